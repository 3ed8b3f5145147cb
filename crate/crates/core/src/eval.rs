//! Counting metrics and model evaluation.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::data::{DensityMap, Image, Scene};
use crate::error::{Error, Result};
use crate::net::{SaccnModel, SPATIAL_DIVISOR};
use crate::tensor::{Element, Tensor};

/// Highest GAME level reported.
pub const MAX_GAME_LEVEL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
}

pub fn count(density: &DensityMap) -> f64 {
    density.count()
}

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<CountMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(gt).fold((0.0, 0.0), |(a, s), (p, g)| {
        let d = p - g;
        (a + d.abs(), s + d * d)
    });
    Ok(CountMetrics {
        mae: abs / n,
        mse: (sq / n).sqrt(),
    })
}

/// How GAME partitions an image at level L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameGrid {
    /// 2^L × 2^L cells.
    #[default]
    Square,
    /// 2^L full-height column strips.
    Columns,
}

impl GameGrid {
    pub fn label(self) -> &'static str {
        match self {
            GameGrid::Square => "2^L x 2^L grid",
            GameGrid::Columns => "2^L columns",
        }
    }
}

/// Cell `i` of `parts` along an extent spans `floor(i·n/parts)..floor((i+1)·n/parts)`.
fn bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * n / parts).collect()
}

/// Per-cell region counts of a map at `level`, row-major over cells.
pub fn region_counts(map: &DensityMap, level: u32, grid: GameGrid) -> Vec<f64> {
    let parts = 1usize << level;
    let rows = match grid {
        GameGrid::Square => bounds(map.height, parts),
        GameGrid::Columns => vec![0, map.height],
    };
    let cols = bounds(map.width, parts);
    let mut out = Vec::with_capacity((rows.len() - 1) * parts);
    for rw in rows.windows(2) {
        for cw in cols.windows(2) {
            let mut s = 0.0;
            for r in rw[0]..rw[1] {
                for c in cw[0]..cw[1] {
                    s += map.get(r, c);
                }
            }
            out.push(s);
        }
    }
    out
}

/// Sum over cells of the absolute count difference, for one image.
pub fn game_image(pred: &DensityMap, gt: &DensityMap, level: u32, grid: GameGrid) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op: "game",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    if level > MAX_GAME_LEVEL {
        return Err(Error::Config(format!("GAME level {level} exceeds {MAX_GAME_LEVEL}")));
    }
    let p = region_counts(pred, level, grid);
    let g = region_counts(gt, level, grid);
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean of [`game_image`] over images.
pub fn game(preds: &[DensityMap], gts: &[DensityMap], level: u32, grid: GameGrid) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "game",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += game_image(p, g, level, grid)?;
    }
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub id: String,
    pub predicted: f64,
    pub ground_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub mae: f64,
    pub mse: f64,
    pub game_grid: GameGrid,
    pub game_grid_label: String,
    /// GAME at levels 0 through 3.
    pub game: [f64; 4],
    pub counts: Vec<ImageCount>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub jobs: NonZeroUsize,
    /// Reduce per-image terms strictly in dataset order. Otherwise each
    /// worker sums its own share and the partial sums are added.
    pub strict_order: bool,
    pub grid: GameGrid,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            jobs: NonZeroUsize::MIN,
            strict_order: true,
            grid: GameGrid::Square,
        }
    }
}

/// Per-image quantities every metric is built from.
#[derive(Debug, Clone, Copy)]
struct Terms {
    abs: f64,
    sq: f64,
    game: [f64; 4],
}

impl Terms {
    fn add(self, o: Terms) -> Terms {
        let mut game = self.game;
        for (a, b) in game.iter_mut().zip(o.game) {
            *a += b;
        }
        Terms {
            abs: self.abs + o.abs,
            sq: self.sq + o.sq,
            game,
        }
    }

    const ZERO: Terms = Terms {
        abs: 0.0,
        sq: 0.0,
        game: [0.0; 4],
    };
}

struct Item {
    count: ImageCount,
    terms: Terms,
}

fn score(id: &str, pred: &DensityMap, gt: &DensityMap, gt_count: f64, grid: GameGrid) -> Result<Item> {
    let predicted = pred.count();
    let d = predicted - gt_count;
    let mut game = [0.0; 4];
    for (l, g) in game.iter_mut().enumerate() {
        *g = game_image(pred, gt, l as u32, grid)?;
    }
    Ok(Item {
        count: ImageCount {
            id: id.to_string(),
            predicted,
            ground_truth: gt_count,
        },
        terms: Terms {
            abs: d.abs(),
            sq: d * d,
            game,
        },
    })
}

/// Density for a single image of any size: the image is zero-padded on the
/// bottom and right to a multiple of 16 and the prediction cropped back.
pub fn predict_density<T: Element>(model: &SaccnModel<T>, image: &Image) -> Result<DensityMap> {
    let pad = |n: usize| n.div_ceil(SPATIAL_DIVISOR).max(1) * SPATIAL_DIVISOR;
    let (h, w) = (image.height, image.width);
    let (ph, pw) = (pad(h), pad(w));
    let mut data = vec![T::zero(); image.channels * ph * pw];
    for c in 0..image.channels {
        for r in 0..h {
            for x in 0..w {
                data[(c * ph + r) * pw + x] = T::from_f64(image.get(c, r, x) as f64);
            }
        }
    }
    let input = Tensor::from_vec(&[1, image.channels, ph, pw], data)?;
    let full = DensityMap::from_tensor(&model.predict(&input)?, 0)?;
    let mut out = DensityMap::zeros(h, w);
    for r in 0..h {
        out.values[r * w..(r + 1) * w].copy_from_slice(&full.values[r * pw..r * pw + w]);
    }
    Ok(out)
}

/// Score `predict(i)` against each scene's ground truth. Ground-truth
/// counts are annotation counts; GAME compares against `gt_density` maps.
fn evaluate_with<F>(scenes: &[Scene], sigma: f64, options: EvalOptions, predict: F) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<DensityMap> + Sync,
{
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let run = |i: usize| -> Result<Item> {
        let s = &scenes[i];
        let gt = s.density(sigma)?;
        let pred = predict(i)?;
        score(&s.id, &pred, &gt, s.count() as f64, options.grid)
    };
    let jobs = options.jobs.get().min(scenes.len());
    // Worker w takes a contiguous block of images.
    let chunk = scenes.len().div_ceil(jobs);
    let blocks: Vec<Result<Vec<Item>>> = if jobs == 1 {
        vec![(0..scenes.len()).map(run).collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let run = &run;
                    scope.spawn(move || {
                        let lo = w * chunk;
                        let hi = ((w + 1) * chunk).min(scenes.len());
                        (lo..hi).map(run).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;

    let totals = if options.strict_order {
        blocks.iter().flatten().fold(Terms::ZERO, |acc, it| acc.add(it.terms))
    } else {
        blocks
            .iter()
            .map(|b| b.iter().fold(Terms::ZERO, |acc, it| acc.add(it.terms)))
            .fold(Terms::ZERO, Terms::add)
    };
    let n = scenes.len() as f64;
    Ok(EvalReport {
        images: scenes.len(),
        mae: totals.abs / n,
        mse: (totals.sq / n).sqrt(),
        game_grid: options.grid,
        game_grid_label: options.grid.label().to_string(),
        game: totals.game.map(|g| g / n),
        counts: blocks.into_iter().flatten().map(|it| it.count).collect(),
    })
}

pub fn evaluate<T: Element>(
    model: &SaccnModel<T>,
    scenes: &[Scene],
    sigma: f64,
    options: EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(scenes, sigma, options, |i| predict_density(model, &scenes[i].image))
}

/// Evaluate with each scene's own ground-truth density as the prediction.
pub fn evaluate_ground_truth(scenes: &[Scene], sigma: f64, options: EvalOptions) -> Result<EvalReport> {
    evaluate_with(scenes, sigma, options, |i| scenes[i].density(sigma))
}

/// Evaluate a constant-count predictor that spreads `value` uniformly.
pub fn evaluate_constant(scenes: &[Scene], sigma: f64, value: f64, options: EvalOptions) -> Result<EvalReport> {
    evaluate_with(scenes, sigma, options, |i| {
        let s = &scenes[i];
        let n = (s.height() * s.width()) as f64;
        let mut m = DensityMap::zeros(s.height(), s.width());
        m.values.iter_mut().for_each(|v| *v = value / n);
        Ok(m)
    })
}
