//! Pixel-wise MSE loss, Adam, and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, gt_density, Scene};
use crate::error::{Error, Result};
use crate::net::{NetConfig, SaccnModel};
use crate::nn::{ParamSet, Session};
use crate::rng;
use crate::tensor::{Element, Tensor};

/// Mean over every element of `(pred - gt)²`.
pub fn mse_loss<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(gt).to_vec(),
        });
    }
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || {
            let mut s = ParamSet::new();
            for (k, p) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(p.shape()));
            }
            s
        };
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter. All gradients are
    /// checked before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - c.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(t)));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.epsilon);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam m for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingParam(format!("adam v for {name}")))?;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * corr1;
                let v_hat = *vi * corr2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Square crop side; 0 trains on whole scenes.
    pub crop: usize,
    pub flip_p: f64,
    pub sigma: f64,
    /// Seeds batch sampling and augmentation.
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            adam: AdamConfig::default(),
            crop: crate::data::DEFAULT_CROP,
            flip_p: 0.5,
            sigma: crate::data::DEFAULT_SIGMA,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip_p {} is not a probability", self.flip_p)));
        }
        let a = self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("adam settings out of range".into()));
        }
        if a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `train.`-prefixed pairs as stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("epsilon", self.adam.epsilon.to_string()),
            ("crop", self.crop.to_string()),
            ("flip_p", self.flip_p.to_string()),
            ("sigma", self.sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    /// Apply one setting, keyed without the `train.` prefix. Returns
    /// `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "flip_p" => self.flip_p = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Scenes, after augmentation, used at `step`: a seeded shuffle of the
/// dataset, cycled if the batch is larger than the dataset.
pub fn sample_batch(scenes: &[Scene], config: &TrainConfig, step: usize) -> Result<Vec<Scene>> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, "batch", step as u64));
    (0..config.batch_size)
        .map(|b| {
            let scene = &scenes[order[b % order.len()]];
            let crop = if config.crop == 0 {
                (scene.height(), scene.width())
            } else {
                (config.crop, config.crop)
            };
            let aug_seed = rng::derive_seed(config.seed, "augment", (step * config.batch_size + b) as u64);
            augment(scene, crop, config.flip_p, aug_seed)
        })
        .collect()
}

/// Stack scenes into an `N×C×H×W` image batch and an `N×1×H×W` target.
pub fn batch_tensors<T: Element>(scenes: &[Scene], sigma: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = scenes.first().ok_or(Error::EmptyDataset)?;
    let (c, h, w) = (first.image.channels, first.height(), first.width());
    let mut images = Vec::with_capacity(scenes.len() * c * h * w);
    let mut targets = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.image.channels, s.height(), s.width()) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: vec![c, h, w],
                rhs: vec![s.image.channels, s.height(), s.width()],
            });
        }
        images.extend(s.image.data.iter().map(|&v| T::from_f64(v as f64)));
        targets.extend(gt_density(&s.points, (h, w), sigma)?.values.iter().map(|&v| T::from_f64(v)));
    }
    let n = scenes.len();
    Ok((
        Tensor::from_vec(&[n, c, h, w], images)?,
        Tensor::from_vec(&[n, 1, h, w], targets)?,
    ))
}

/// Training loss on a batch: MSE between the scaled prediction and the
/// density target times `density_scale`.
pub fn scaled_loss<T: Element>(s: &mut Session<'_, T>, model: &SaccnModel<T>, images: &Tensor<T>, targets: &Tensor<T>) -> Result<Var> {
    let x = s.input(images.clone())?;
    let pred = model.net.forward_scaled(s, x)?;
    let mut scaled = targets.clone();
    let k = T::from_f64(model.config().density_scale);
    scaled.data_mut().iter_mut().for_each(|v| *v *= k);
    let gt = s.tape.constant(scaled)?;
    mse_loss(&mut s.tape, pred, gt)
}

/// Training loss of `model` on a batch, without touching the weights.
pub fn batch_loss<T: Element>(model: &SaccnModel<T>, images: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    let mut s = Session::new(&model.params, false);
    let loss = scaled_loss(&mut s, model, images, targets)?;
    Ok(s.value(loss).data()[0].as_f64())
}

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub model: SaccnModel<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    /// Steps completed so far.
    pub step: usize,
}

impl<T: Element> Trainer<T> {
    pub fn new(net: &NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SaccnModel::build(net)?;
        let adam = AdamState::new(&model.params, config.adam);
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// One optimisation step; returns the batch loss before the update.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<f64> {
        let step = self.step;
        let diverged = |loss: f64| Error::Diverged { step, loss };
        let batch = sample_batch(scenes, &self.config, step)?;
        let (images, targets) = batch_tensors::<T>(&batch, self.config.sigma)?;

        let (grads, loss) = {
            let mut s = Session::new(&self.model.params, true);
            let loss_var = match scaled_loss(&mut s, &self.model, &images, &targets) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let loss = s.value(loss_var).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let grads = match s.backward(loss_var) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(diverged(loss)),
                Err(e) => return Err(e),
            };
            (grads, loss)
        };
        self.adam.step(&mut self.model.params, &grads)?;
        if self.model.params.iter().any(|(_, p)| !p.is_finite()) {
            return Err(diverged(loss));
        }
        self.step += 1;
        Ok(loss)
    }

    /// Run until `config.steps` steps are done. `on_log` sees every
    /// `log_every`-th step and the last one; the full curve is returned.
    pub fn run(&mut self, scenes: &[Scene], mut on_log: impl FnMut(usize, f64)) -> Result<Vec<(usize, f64)>> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let step = self.step;
            let loss = self.step(scenes)?;
            if step.is_multiple_of(self.config.log_every) || self.step == self.config.steps {
                on_log(step, loss);
            }
            curve.push((step, loss));
        }
        Ok(curve)
    }

    /// Model weights, Adam moments and schedule position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.config.extend(self.config.to_pairs());
        ckpt.config.push(("state.step".into(), self.step.to_string()));
        ckpt.config.push(("state.adam_t".into(), self.adam.t.to_string()));
        for (prefix, set) in [("adam/m/", &self.adam.m), ("adam/v/", &self.adam.v)] {
            for (name, t) in set.iter() {
                ckpt.tensors.insert(format!("{prefix}{name}"), t.cast());
            }
        }
        ckpt
    }

    /// Resume from a checkpoint written by [`Trainer::to_checkpoint`].
    /// Stored training settings are the base; `overrides` (keys without
    /// the `train.` prefix) are applied on top.
    pub fn from_checkpoint(ckpt: &Checkpoint, overrides: &[(String, String)]) -> Result<Self> {
        let model = SaccnModel::<T>::from_checkpoint(ckpt)?;
        let mut config = TrainConfig::default();
        for (k, v) in &ckpt.config {
            if let Some(key) = k.strip_prefix("train.") {
                if !config.set(key, v)? {
                    return Err(Error::Config(format!("unknown checkpoint setting `{k}`")));
                }
            }
        }
        for (k, v) in overrides {
            if !config.set(k, v)? {
                return Err(Error::Config(format!("unknown training setting `{k}`")));
            }
        }
        config.validate()?;
        let parse_state = |key: &str| -> Result<u64> {
            ckpt.get(key)
                .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}`; it is not a training checkpoint")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in checkpoint")))
        };
        let step = parse_state("state.step")? as usize;
        let t = parse_state("state.adam_t")?;
        let mut adam = AdamState::new(&model.params, config.adam);
        adam.t = t;
        for (prefix, set) in [("adam/m/", &mut adam.m), ("adam/v/", &mut adam.v)] {
            for (name, slot) in set.iter_mut() {
                let key = format!("{prefix}{name}");
                let stored = ckpt.tensors.get(&key).ok_or_else(|| Error::MissingParam(key.clone()))?;
                if stored.shape() != slot.shape() {
                    return Err(Error::TensorShape {
                        name: key,
                        expected: slot.shape().to_vec(),
                        found: stored.shape().to_vec(),
                    });
                }
                *slot = stored.cast();
            }
        }
        Ok(Self {
            model,
            adam,
            config,
            step,
        })
    }
}

/// `step,loss` CSV text.
pub fn loss_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}
