use std::fs;
use std::num::NonZeroUsize;
use std::path::Path;

use clap::ArgMatches;
use saccn::checkpoint::Checkpoint;
use saccn::data::{read_dataset, read_image, synth_dataset, write_dataset, write_density, Scene, SynthParams};
use saccn::eval::{evaluate, evaluate_ground_truth, predict_density, EvalOptions, GameGrid};
use saccn::gradcheck::run_suite;
use saccn::train::{loss_csv, AdamConfig, TrainConfig, Trainer};
use saccn::{Element, NetConfig, Precision, SaccnModel};

use crate::args::{from_command_line, Cli, EvalArgs, InferArgs, InspectArgs, SynthArgs, TrainArgs};
use crate::error::{reading, CliError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "eval.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> Result<Vec<Scene>, CliError> {
    let scenes = read_dataset(dir).map_err(reading(dir))?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!("{}: no annotated scenes", dir.display())));
    }
    Ok(scenes)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(reading(path))
}

pub fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), CliError> {
    let params = SynthParams {
        height: a.size,
        width: a.size,
        channels: a.channels,
        n_range: (a.min_count, a.max_count),
        scale_range: (a.min_radius, a.max_radius),
        clutter_level: a.clutter,
    };
    let scenes = synth_dataset(&params, cli.seed, a.n)?;
    write_dataset(&scenes, &cli.out)?;
    let total: usize = scenes.iter().map(Scene::count).sum();
    println!("wrote {} scenes ({total} heads) to {}", scenes.len(), cli.out.display());
    Ok(())
}

/// Training settings given on the command line or in the config file, for
/// applying on top of a resumed checkpoint.
fn train_overrides(a: &TrainArgs, matches: &ArgMatches) -> Vec<(String, String)> {
    let all = [
        ("steps", a.steps.to_string()),
        ("batch_size", a.batch_size.to_string()),
        ("lr", a.lr.to_string()),
        ("beta1", a.beta1.to_string()),
        ("beta2", a.beta2.to_string()),
        ("epsilon", a.epsilon.to_string()),
        ("crop", a.crop.to_string()),
        ("flip_p", a.flip_p.to_string()),
        ("sigma", a.sigma.to_string()),
        ("log_every", a.log_every.to_string()),
    ];
    all.into_iter()
        .filter(|(k, _)| from_command_line(matches, k))
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

const NET_FLAGS: [&str; 4] = ["base_width", "ram_reduction", "ssa_reduction", "density_scale"];

pub fn train(cli: &Cli, a: &TrainArgs, matches: &ArgMatches) -> Result<(), CliError> {
    match cli.precision {
        Precision::F32 => train_as::<f32>(cli, a, matches),
        Precision::F64 => train_as::<f64>(cli, a, matches),
    }
}

fn train_as<T: Element>(cli: &Cli, a: &TrainArgs, matches: &ArgMatches) -> Result<(), CliError> {
    let scenes = load_dataset(&a.data)?;
    let channels = scenes[0].image.channels;
    let mut trainer = match &a.resume {
        Some(path) => {
            if let Some(flag) = NET_FLAGS.iter().find(|f| from_command_line(matches, f)) {
                return Err(CliError::Usage(format!(
                    "--{} cannot be changed when resuming from {}",
                    flag.replace('_', "-"),
                    path.display()
                )));
            }
            let mut overrides = train_overrides(a, matches);
            if from_command_line(matches, "seed") {
                overrides.push(("seed".into(), cli.seed.to_string()));
            }
            let ckpt = load_checkpoint(path)?;
            Trainer::<T>::from_checkpoint(&ckpt, &overrides).map_err(reading(path))?
        }
        None => {
            let net = NetConfig {
                base_width: a.base_width,
                input_channels: channels,
                ram_reduction: a.ram_reduction,
                ssa_reduction: a.ssa_reduction,
                density_scale: a.density_scale,
                seed: cli.seed,
            };
            let config = TrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                adam: AdamConfig {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    epsilon: a.epsilon,
                },
                crop: a.crop,
                flip_p: a.flip_p,
                sigma: a.sigma,
                seed: cli.seed,
                log_every: a.log_every,
            };
            Trainer::<T>::new(&net, config)?
        }
    };
    if trainer.model.config().input_channels != channels {
        return Err(CliError::Data(format!(
            "{}: images have {channels} channels but the model expects {}",
            a.data.display(),
            trainer.model.config().input_channels
        )));
    }
    let start = trainer.step;
    let curve = trainer.run(&scenes, |step, loss| println!("step {step} loss {loss:.6}"))?;
    create_dir(&cli.out)?;
    let ckpt_path = cli.out.join(CHECKPOINT_FILE);
    trainer.to_checkpoint().save(&ckpt_path)?;
    write_file(&cli.out.join(LOSS_FILE), &loss_csv(&curve))?;
    println!(
        "trained steps {start}..{} ({} parameters); checkpoint {}",
        trainer.step,
        trainer.model.param_count(),
        ckpt_path.display()
    );
    Ok(())
}

fn eval_options(a: &EvalArgs) -> Result<EvalOptions, CliError> {
    Ok(EvalOptions {
        jobs: NonZeroUsize::new(a.jobs).ok_or_else(|| CliError::Usage("--jobs must be at least 1".into()))?,
        strict_order: a.strict_order,
        grid: if a.game_literal { GameGrid::Columns } else { GameGrid::Square },
    })
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Result<(), CliError> {
    let options = eval_options(a)?;
    let scenes = load_dataset(&a.data)?;
    let report = match (&a.checkpoint, a.gt_as_pred) {
        (_, true) => evaluate_ground_truth(&scenes, a.sigma, options)?,
        (Some(path), false) => {
            let ckpt = load_checkpoint(path)?;
            match cli.precision {
                Precision::F32 => {
                    let model = SaccnModel::<f32>::from_checkpoint(&ckpt).map_err(reading(path))?;
                    evaluate(&model, &scenes, a.sigma, options)?
                }
                Precision::F64 => {
                    let model = SaccnModel::<f64>::from_checkpoint(&ckpt).map_err(reading(path))?;
                    evaluate(&model, &scenes, a.sigma, options)?
                }
            }
        }
        (None, false) => return Err(CliError::Usage("--checkpoint is required unless --gt-as-pred".into())),
    };
    create_dir(&cli.out)?;
    let path = cli.out.join(REPORT_FILE);
    write_file(&path, &report.to_json())?;
    println!(
        "images {} MAE {:.4} MSE {:.4} GAME(0..3) {:.4} {:.4} {:.4} {:.4} [{}]; report {}",
        report.images,
        report.mae,
        report.mse,
        report.game[0],
        report.game[1],
        report.game[2],
        report.game[3],
        report.game_grid_label,
        path.display()
    );
    Ok(())
}

pub fn infer(cli: &Cli, a: &InferArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let image = read_image(&a.image).map_err(reading(&a.image))?;
    let map = match cli.precision {
        Precision::F32 => {
            let model = SaccnModel::<f32>::from_checkpoint(&ckpt).map_err(reading(&a.checkpoint))?;
            check_channels(model.config(), image.channels, &a.image)?;
            predict_density(&model, &image)?
        }
        Precision::F64 => {
            let model = SaccnModel::<f64>::from_checkpoint(&ckpt).map_err(reading(&a.checkpoint))?;
            check_channels(model.config(), image.channels, &a.image)?;
            predict_density(&model, &image)?
        }
    };
    let stem = a
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Usage(format!("--image {}: no file name", a.image.display())))?;
    let summary = write_density(&cli.out, stem, &map, map.count())?;
    println!(
        "count {:.4}; wrote {}",
        summary.count,
        cli.out.join(format!("{stem}.den.pgm")).display()
    );
    Ok(())
}

fn check_channels(net: &NetConfig, channels: usize, image: &Path) -> Result<(), CliError> {
    if net.input_channels == channels {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{}: image has {channels} channels but the model expects {}",
            image.display(),
            net.input_channels
        )))
    }
}

pub fn gradcheck(cli: &Cli) -> Result<(), CliError> {
    let report = run_suite(cli.seed)?;
    for e in &report.entries {
        println!("{:<32} {:>6} coords  max rel error {:.3e}", e.name, e.coordinates, e.result.max_rel_error);
    }
    let worst = report.worst().expect("suite is not empty");
    println!(
        "worst: {:.3e} in {}; {} checks in {:.1}s",
        worst.result.max_rel_error,
        worst.name,
        report.entries.len(),
        report.elapsed.as_secs_f64()
    );
    if report.passed(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {} exceeds {GRADCHECK_TOLERANCE:e}",
            worst.name
        )))
    }
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    println!("{}", a.checkpoint.display());
    println!("format {} version {}", String::from_utf8_lossy(saccn::checkpoint::MAGIC), saccn::checkpoint::VERSION);
    println!("settings:");
    for (k, v) in &ckpt.config {
        println!("  {k} = {v}");
    }
    println!("tensors:");
    let mut total = 0;
    for (name, t) in &ckpt.tensors {
        total += t.len();
        println!("  {name:<40} {:<18} {}", format!("{:?}", t.shape()), t.len());
    }
    println!("{} tensors, {total} values", ckpt.tensors.len());
    Ok(())
}
