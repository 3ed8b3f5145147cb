//! Ground-truth density maps, synthetic scenes, augmentation and the
//! on-disk dataset format.
//!
//! A dataset directory holds `<id>.pgm` (binary P5 grayscale, or P6 for
//! RGB) next to `<id>.ann`, one `x y` pair per line with `#` comments.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_CROP: usize = 64;
/// Gaussian kernels are cut off at this many standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 3.0;

/// A head annotation in pixel coordinates; pixel `(c, r)` covers
/// `[c, c+1) × [r, r+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Planar `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    /// `1×C×H×W` network input.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(&[1, self.channels, self.height, self.width], data).expect("image extents are consistent")
    }

    /// Round to 8 bits, as stored on disk.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect();
        Self { data, ..self.clone() }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub points: Vec<Point>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn density(&self, sigma: f64) -> Result<DensityMap> {
        gt_density(&self.points, (self.height(), self.width()), sigma)
    }
}

/// Single-channel non-negative map whose sum is the count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Take the single channel of an `N×1×H×W` tensor's `n`-th item.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, n: usize) -> Result<Self> {
        match *t.shape() {
            [count, 1, h, w] if n < count => {
                let plane = h * w;
                Ok(Self {
                    height: h,
                    width: w,
                    values: t.data()[n * plane..(n + 1) * plane].iter().map(|v| v.as_f64()).collect(),
                })
            }
            _ => Err(Error::invalid("density", format!("item {n} of {:?} is not a 1-channel map", t.shape()))),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, 1, self.height, self.width], &self.values).expect("density extents are consistent")
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn check_point(p: Point, height: usize, width: usize) -> Result<()> {
    let inside = p.x.is_finite()
        && p.y.is_finite()
        && (0.0..=width as f64).contains(&p.x)
        && (0.0..=height as f64).contains(&p.y);
    if inside {
        Ok(())
    } else {
        Err(Error::PointOutOfBounds {
            x: p.x,
            y: p.y,
            width,
            height,
        })
    }
}

/// Sum of per-point Gaussians sampled at pixel centres, each truncated at
/// 3σ and renormalised to unit mass over the pixels it reaches. Points may
/// lie on the closed image rectangle.
pub fn gt_density(points: &[Point], shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    let (height, width) = shape;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = DensityMap::zeros(height, width);
    if points.is_empty() {
        return Ok(map);
    }
    if height == 0 || width == 0 {
        return Err(Error::PointOutOfBounds {
            x: points[0].x,
            y: points[0].y,
            width,
            height,
        });
    }
    let radius = TRUNCATE_SIGMAS * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::new();
    for &p in points {
        check_point(p, height, width)?;
        let x0 = (p.x - radius - 0.5).ceil().max(0.0) as usize;
        let x1 = ((p.x + radius - 0.5).floor().max(-1.0) as isize).min(width as isize - 1);
        let y0 = (p.y - radius - 0.5).ceil().max(0.0) as usize;
        let y1 = ((p.y + radius - 0.5).floor().max(-1.0) as isize).min(height as isize - 1);
        kernel.clear();
        let mut total = 0.0;
        for r in y0 as isize..=y1 {
            for c in x0 as isize..=x1 {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    let w = (-d2 * inv).exp();
                    total += w;
                    kernel.push((r as usize * width + c as usize, w));
                }
            }
        }
        if total > 0.0 {
            for &(i, w) in &kernel {
                map.values[i] += w / total;
            }
        } else {
            let c = (p.x.floor() as usize).min(width - 1);
            let r = (p.y.floor() as usize).min(height - 1);
            map.values[r * width + c] += 1.0;
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive range of head counts.
    pub n_range: (usize, usize),
    /// Inclusive range of head radii in pixels.
    pub scale_range: (f64, f64),
    /// Number of non-head shapes.
    pub clutter_level: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            n_range: (0, 20),
            scale_range: (1.5, 3.5),
            clutter_level: 4,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_range;
        let (rlo, rhi) = self.scale_range;
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "scene must be non-empty with 1 or 3 channels, got {}×{}×{}",
                self.channels, self.height, self.width
            )));
        }
        if lo > hi {
            return Err(Error::Config(format!("count range {lo}..={hi} is empty")));
        }
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Config(format!("radius range {rlo}..={rhi} is invalid")));
        }
        Ok(())
    }
}

/// Render a scene: a dim background gradient, `clutter_level` flat
/// rectangles and thin lines, and bright radial head blobs at the
/// annotated points.
pub fn synth_scene(params: &SynthParams, seed: u64, id: impl Into<String>) -> Result<Scene> {
    params.validate()?;
    let mut rng = rng::stream(seed, "synth", 0);
    let (h, w, ch) = (params.height, params.width, params.channels);
    let (hf, wf) = (h as f64, w as f64);

    let tint: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.8..=1.0)).collect();
    let base = rng.gen_range(0.05..0.2);
    let slope_x = rng.gen_range(-0.1..0.1) / wf;
    let slope_y = rng.gen_range(-0.1..0.1) / hf;
    let mut plane = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            plane[r * w + c] = base + slope_x * c as f64 + slope_y * r as f64;
        }
    }

    for _ in 0..params.clutter_level {
        let level = rng.gen_range(0.25..0.6);
        if rng.gen_bool(0.5) {
            let rw = rng.gen_range(2.0..wf / 3.0 + 2.0);
            let rh = rng.gen_range(2.0..hf / 3.0 + 2.0);
            let x0 = rng.gen_range(0.0..wf);
            let y0 = rng.gen_range(0.0..hf);
            for r in (y0 as usize)..((y0 + rh) as usize).min(h) {
                for c in (x0 as usize)..((x0 + rw) as usize).min(w) {
                    plane[r * w + c] = level;
                }
            }
        } else {
            let (ax, ay) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
            let (bx, by) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
            let steps = ((bx - ax).abs().max((by - ay).abs()) * 2.0).ceil() as usize + 1;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let c = (ax + t * (bx - ax)) as usize;
                let r = (ay + t * (by - ay)) as usize;
                if r < h && c < w {
                    plane[r * w + c] = level;
                }
            }
        }
    }

    let n = rng.gen_range(params.n_range.0..=params.n_range.1);
    let (rlo, rhi) = params.scale_range;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Point::new(rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let radius = if rlo == rhi { rlo } else { rng.gen_range(rlo..=rhi) };
        let amp = rng.gen_range(0.6..0.9);
        let reach = radius.ceil() as isize + 1;
        let (pc, pr) = (p.x.floor() as isize, p.y.floor() as isize);
        for r in (pr - reach).max(0)..=(pr + reach).min(h as isize - 1) {
            for c in (pc - reach).max(0)..=(pc + reach).min(w as isize - 1) {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let t = 1.0 - (dx * dx + dy * dy) / (radius * radius);
                if t > 0.0 {
                    let i = r as usize * w + c as usize;
                    plane[i] = plane[i].max(amp * t * t + 0.1);
                }
            }
        }
        points.push(p);
    }

    let mut image = Image::filled(ch, h, w, 0.0);
    for (c, &k) in tint.iter().enumerate() {
        for (dst, &v) in image.data[c * h * w..(c + 1) * h * w].iter_mut().zip(&plane) {
            *dst = (v * k).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Scene {
        id: id.into(),
        image,
        points,
    })
}

/// `count` scenes named `scene_0000`, `scene_0001`, ..., each from its own
/// seed derived from `seed`.
pub fn synth_dataset(params: &SynthParams, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| synth_scene(params, rng::derive_seed(seed, "scene", i as u64), format!("scene_{i:04}")))
        .collect()
}

/// Random crop of `crop = (height, width)` plus a horizontal flip with
/// probability `flip_p`. Points outside the closed crop window are dropped.
pub fn augment(scene: &Scene, crop: (usize, usize), flip_p: f64, seed: u64) -> Result<Scene> {
    let (ch, cw) = crop;
    if ch == 0 || cw == 0 || ch > scene.height() || cw > scene.width() {
        return Err(Error::Config(format!(
            "crop {ch}×{cw} does not fit scene `{}` of {}×{}",
            scene.id,
            scene.height(),
            scene.width()
        )));
    }
    let mut rng = rng::stream(seed, "augment", 0);
    let y0 = rng.gen_range(0..=scene.height() - ch);
    let x0 = rng.gen_range(0..=scene.width() - cw);
    let flip = flip_p > 0.0 && rng.gen_bool(flip_p.min(1.0));

    let src = &scene.image;
    let mut image = Image::filled(src.channels, ch, cw, 0.0);
    for c in 0..src.channels {
        for r in 0..ch {
            for x in 0..cw {
                let sx = x0 + if flip { cw - 1 - x } else { x };
                let i = image.idx(c, r, x);
                image.data[i] = src.get(c, y0 + r, sx);
            }
        }
    }
    let (fx0, fy0) = (x0 as f64, y0 as f64);
    let points = scene
        .points
        .iter()
        .filter(|p| p.x >= fx0 && p.x <= fx0 + cw as f64 && p.y >= fy0 && p.y <= fy0 + ch as f64)
        .map(|p| {
            let x = p.x - fx0;
            Point::new(if flip { cw as f64 - x } else { x }, p.y - fy0)
        })
        .collect();
    Ok(Scene {
        id: scene.id.clone(),
        image,
        points,
    })
}

/// Mirror a scene horizontally.
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let src = &scene.image;
    let mut image = src.clone();
    for c in 0..src.channels {
        for r in 0..src.height {
            for x in 0..src.width {
                let i = image.idx(c, r, x);
                image.data[i] = src.get(c, r, src.width - 1 - x);
            }
        }
    }
    let w = src.width as f64;
    Scene {
        id: scene.id.clone(),
        image,
        points: scene.points.iter().map(|p| Point::new(w - p.x, p.y)).collect(),
    }
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height, image.width);
    let (bytes, subtype, color) = match image.channels {
        1 => (
            image.data.iter().map(|&v| quantize(v)).collect::<Vec<u8>>(),
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => {
            let mut bytes = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for c in 0..3 {
                    bytes.push(quantize(image.data[c * h * w + i]));
                }
            }
            (bytes, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        }
        c => return Err(Error::Config(format!("cannot store a {c}-channel image"))),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| format_err(e.to_string()))?;
    let (w, h) = decoder.dimensions();
    let (w, h) = (w as usize, h as usize);
    let color = decoder.color_type();
    let channels = match color {
        image::ColorType::L8 => 1,
        image::ColorType::Rgb8 => 3,
        other => return Err(format_err(format!("unsupported pixel format {other:?}"))),
    };
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut buf).map_err(|e| format_err(e.to_string()))?;
    let mut image = Image::filled(channels, h, w, 0.0);
    for i in 0..h * w {
        for c in 0..channels {
            image.data[c * h * w + i] = buf[i * channels + c] as f32 / 255.0;
        }
    }
    Ok(image)
}

pub fn write_annotations(path: &Path, points: &[Point]) -> Result<()> {
    let mut text = String::new();
    for p in points {
        text.push_str(&format!("{} {}\n", p.x, p.y));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(bad(format!("expected `x y`, found {} fields", fields.len())));
        }
        let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        match (parse(fields[0]), parse(fields[1])) {
            (Some(x), Some(y)) => points.push(Point::new(x, y)),
            _ => return Err(bad(format!("`{line}` is not a pair of numbers"))),
        }
    }
    Ok(points)
}

/// `<id>.pgm` for grayscale, `<id>.ppm` for colour.
pub fn image_path(dir: &Path, id: &str, channels: usize) -> PathBuf {
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    dir.join(format!("{id}.{ext}"))
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    [1, 3].into_iter().map(|c| image_path(dir, id, c)).find(|p| p.is_file())
}

pub fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ann"))
}

pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in scenes {
        write_image(&image_path(dir, &s.id, s.image.channels), &s.image)?;
        write_annotations(&annotation_path(dir, &s.id), &s.points)?;
    }
    Ok(())
}

/// Every `<id>.ann` in `dir` with its image, sorted by id. Points are
/// checked against the image bounds.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ann") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let Some(img_path) = find_image(dir, &id) else {
                let path = image_path(dir, &id, 1);
                return Err(Error::MissingImage { id, path });
            };
            let image = read_image(&img_path)?;
            let ann = annotation_path(dir, &id);
            let points = read_annotations(&ann)?;
            for &p in &points {
                check_point(p, image.height, image.width).map_err(|e| Error::Format {
                    path: ann.clone(),
                    reason: e.to_string(),
                })?;
            }
            Ok(Scene { id, image, points })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    pub count: f64,
    pub sum: f64,
    pub shape: [usize; 2],
}

/// Write `<stem>.den.pgm` (max-normalised for viewing) and `<stem>.den.json`.
/// `count` is the figure reported for the map: the annotated count for
/// ground truth, the map sum for predictions.
pub fn write_density(dir: &Path, stem: &str, map: &DensityMap, count: f64) -> Result<DensitySummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    let view = Image {
        channels: 1,
        height: map.height,
        width: map.width,
        data: map
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v.max(0.0) / max) as f32 } else { 0.0 })
            .collect(),
    };
    write_image(&dir.join(format!("{stem}.den.pgm")), &view)?;
    let summary = DensitySummary {
        count,
        sum: map.count(),
        shape: [map.height, map.width],
    };
    let json_path = dir.join(format!("{stem}.den.json"));
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}
