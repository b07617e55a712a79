//! Deterministic synthetic scenes with ground-truth distractor masks.
//!
//! A smooth base image is built from soft color blobs. Every view applies a
//! per-channel gain to the base (the "clean" paired image) and then pastes
//! disk and rectangle distractors on top. Distractor layouts stay fixed for
//! `persistence` consecutive views. Each view also gets a synthetic feature
//! map whose first channel is a noisy semantic indicator of the distractors.
//!
//! Images are quantized to 8 bits and features to `f32` at generation time so
//! a dataset written to disk reads back bit-identically.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{quantize_unit, ColorImage, InlierMask};
use crate::semantic_mask::FeatureMap;

const HOTSPOT_SEED: u64 = 0x4075_5907;

/// Down/up-sampling factor applied to features.
pub const FEATURE_DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Clean,
    Easy,
    Medium,
    Hard,
    Camouflage,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Self::Clean),
            "easy" => Ok(Self::Easy),
            "medium" => Ok(Self::Medium),
            "hard" => Ok(Self::Hard),
            "camouflage" => Ok(Self::Camouflage),
            other => Err(format!(
                "unknown preset `{other}` (expected clean, easy, medium, hard or camouflage)"
            )),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "clean",
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
            Self::Camouflage => "camouflage",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub views: usize,
    /// Target fraction of pixels covered by distractors in each view.
    pub occupancy: f64,
    /// Number of consecutive views sharing one distractor layout.
    pub persistence: usize,
    /// Per-channel gain amplitude: gains are drawn from `1 ± jitter`.
    pub jitter: f64,
    /// Fill distractors with colors blended from the local background.
    pub camouflage: bool,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    /// Probability that a pixel's semantic channel is correct.
    pub semantic_fidelity: f64,
    pub blobs: usize,
    /// Standard deviation of distractor centers around a per-scene hotspot,
    /// as a fraction of the image size; 0 places them uniformly.
    pub spread: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::preset(Preset::Medium)
    }
}

impl GenConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            width: 96,
            height: 96,
            views: 60,
            occupancy: 0.0,
            persistence: 1,
            jitter: 0.05,
            camouflage: false,
            feature_dim: 8,
            feature_noise_sigma: 0.05,
            semantic_fidelity: 0.95,
            blobs: 40,
            spread: 0.0,
        };
        match preset {
            Preset::Clean => base,
            Preset::Easy => Self {
                occupancy: 0.10,
                ..base
            },
            Preset::Medium => Self {
                occupancy: 0.25,
                ..base
            },
            Preset::Hard => Self {
                occupancy: 0.44,
                ..base
            },
            Preset::Camouflage => Self {
                occupancy: 0.25,
                camouflage: true,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 || self.views == 0 {
            return Err("gen.width, gen.height and gen.views must be positive".into());
        }
        if !(0.0..=0.6).contains(&self.occupancy) {
            return Err(format!(
                "gen.occupancy must lie in [0, 0.6], got {}",
                self.occupancy
            ));
        }
        if self.persistence == 0 {
            return Err("gen.persistence must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(format!(
                "gen.jitter must lie in [0, 1), got {}",
                self.jitter
            ));
        }
        if self.feature_dim == 0 {
            return Err("gen.feature_dim must be at least 1".into());
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err("gen.feature_noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.semantic_fidelity) {
            return Err("gen.semantic_fidelity must lie in [0, 1]".into());
        }
        if self.blobs == 0 {
            return Err("gen.blobs must be at least 1".into());
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err("gen.spread must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: usize,
    /// Training image with distractors.
    pub image: ColorImage,
    /// Same view without distractors.
    pub clean: ColorImage,
    /// Ground truth, 0 on distractor pixels.
    pub gt_inliers: InlierMask,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cfg: GenConfig,
    pub seed: u64,
    /// Base image before per-view gains.
    pub base: ColorImage,
    pub views: Vec<View>,
}

impl SceneDataset {
    pub fn width(&self) -> usize {
        self.base.width
    }

    pub fn height(&self) -> usize {
        self.base.height
    }

    /// Mean distractor fraction over views.
    pub fn measured_occupancy(&self) -> f64 {
        if self.views.is_empty() {
            return 0.0;
        }
        self.views
            .iter()
            .map(|v| 1.0 - v.gt_inliers.inlier_fraction())
            .sum::<f64>()
            / self.views.len() as f64
    }

    /// Per-pixel mean of the training images.
    pub fn mean_image(&self) -> ColorImage {
        let mut acc = vec![[0.0; 3]; self.width() * self.height()];
        for v in &self.views {
            for (a, c) in acc.iter_mut().zip(&v.image.data) {
                for k in 0..3 {
                    a[k] += c[k];
                }
            }
        }
        let n = self.views.len().max(1) as f64;
        for a in &mut acc {
            for c in a.iter_mut() {
                *c /= n;
            }
        }
        ColorImage::new(self.width(), self.height(), acc)
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 2],
    scale: f64,
    color: [f64; 3],
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
    ]
}

/// Normalized soft mixture of Gaussian color blobs.
fn base_image<R: Rng>(cfg: &GenConfig, rng: &mut R) -> (ColorImage, Vec<[f64; 3]>) {
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| Blob {
            center: [rng.gen_range(-0.05..1.05), rng.gen_range(-0.05..1.05)],
            scale: rng.gen_range(0.04..0.16),
            color: random_color(rng, 0.1, 0.9),
        })
        .collect();
    let (w, h) = (cfg.width, cfg.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            // Log-sum-exp normalisation keeps far-from-every-blob pixels finite.
            let logits: Vec<f64> = blobs
                .iter()
                .map(|b| {
                    let d2 = (u - b.center[0]).powi(2) + (v - b.center[1]).powi(2);
                    -d2 / (2.0 * b.scale * b.scale)
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut c = [0.0; 3];
            let mut total = 0.0;
            for (b, l) in blobs.iter().zip(&logits) {
                let wgt = (l - max).exp();
                total += wgt;
                for k in 0..3 {
                    c[k] += wgt * b.color[k];
                }
            }
            data.push(c.map(|v| quantize_unit(v / total)));
        }
    }
    (
        ColorImage::new(w, h, data),
        blobs.iter().map(|b| b.color).collect(),
    )
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Rect {
        center: [f64; 2],
        half: [f64; 2],
        angle: f64,
    },
}

impl Shape {
    /// Pixel-space containment test.
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { center, radius } => {
                (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius
            }
            Shape::Rect {
                center,
                half,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let dx = x - center[0];
                let dy = y - center[1];
                (c * dx + s * dy).abs() <= half[0] && (-s * dx + c * dy).abs() <= half[1]
            }
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Disk { center, .. } | Shape::Rect { center, .. } => center,
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disk { radius, .. } => radius,
            Shape::Rect { half, .. } => half[0].hypot(half[1]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Distractor {
    shape: Shape,
    /// Fill varies linearly from `colors[0]` to `colors[1]` along `direction`.
    colors: [[f64; 3]; 2],
    direction: [f64; 2],
    gradient: bool,
}

fn random_distractor<R: Rng>(
    cfg: &GenConfig,
    palette: &[[f64; 3]],
    hotspot: [f64; 2],
    rng: &mut R,
) -> Distractor {
    let size = cfg.width.min(cfg.height) as f64;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let center = if cfg.spread > 0.0 {
        let normal = Normal::new(0.0, cfg.spread * size).unwrap();
        [
            (hotspot[0] * w + normal.sample(rng)).clamp(0.0, w),
            (hotspot[1] * h + normal.sample(rng)).clamp(0.0, h),
        ]
    } else {
        [rng.gen_range(0.0..w), rng.gen_range(0.0..h)]
    };
    let shape = if rng.gen_bool(0.5) {
        Shape::Disk {
            center,
            radius: rng.gen_range(0.08..0.18) * size,
        }
    } else {
        Shape::Rect {
            center,
            half: [
                rng.gen_range(0.06..0.16) * size,
                rng.gen_range(0.06..0.16) * size,
            ],
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        }
    };
    // Both color sources are always drawn so layouts do not depend on the
    // camouflage flag.
    let random = [random_color(rng, 0.0, 1.0), random_color(rng, 0.0, 1.0)];
    let picked = [
        palette[rng.gen_range(0..palette.len())],
        palette[rng.gen_range(0..palette.len())],
    ];
    let colors = if cfg.camouflage { picked } else { random };
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Distractor {
        shape,
        colors,
        direction: [theta.cos(), theta.sin()],
        gradient: rng.gen_bool(0.5),
    }
}

impl Distractor {
    /// Blend parameter in `[0, 1]` across the shape.
    fn ramp(&self, x: f64, y: f64) -> f64 {
        let c = self.shape.center();
        let r = self.shape.extent().max(1e-9);
        let t = ((x - c[0]) * self.direction[0] + (y - c[1]) * self.direction[1]) / (2.0 * r) + 0.5;
        t.clamp(0.0, 1.0)
    }

    /// Fill color at a pixel whose clean color is `background`.
    fn fill(&self, x: f64, y: f64, background: [f64; 3], camouflage: bool) -> [f64; 3] {
        let t = self.ramp(x, y);
        if camouflage {
            // Fades from the local background into a palette color.
            let target = self.colors[0];
            std::array::from_fn(|k| background[k] * (1.0 - t) + target[k] * t)
        } else if self.gradient {
            std::array::from_fn(|k| self.colors[0][k] * (1.0 - t) + self.colors[1][k] * t)
        } else {
            self.colors[0]
        }
    }
}

/// Adds random distractors until the covered fraction is as close as possible
/// to `target`.
fn layout<R: Rng>(
    cfg: &GenConfig,
    palette: &[[f64; 3]],
    hotspot: [f64; 2],
    rng: &mut R,
) -> (Vec<Distractor>, Vec<bool>) {
    let (w, h) = (cfg.width, cfg.height);
    let n = (w * h) as f64;
    let mut covered = vec![false; w * h];
    let mut count = 0usize;
    let mut shapes = Vec::new();
    if cfg.occupancy <= 0.0 {
        return (shapes, covered);
    }
    for _ in 0..256 {
        let d = random_distractor(cfg, palette, hotspot, rng);
        let mut next = covered.clone();
        let mut next_count = count;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !next[p] && d.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    next[p] = true;
                    next_count += 1;
                }
            }
        }
        let now = (count as f64 / n - cfg.occupancy).abs();
        let then = (next_count as f64 / n - cfg.occupancy).abs();
        if then >= now {
            if next_count as f64 / n > cfg.occupancy {
                break;
            }
            continue;
        }
        covered = next;
        count = next_count;
        shapes.push(d);
    }
    (shapes, covered)
}

/// `sin(2^k π u), cos(2^k π u), sin(2^k π v), cos(2^k π v)` for `k < degree`
/// with `u = x / W`, `v = y / H`.
pub fn positional_encoding(width: usize, height: usize, degree: usize) -> FeatureMap {
    let mut data = Array2::zeros((width * height, 4 * degree));
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            let mut row = data.row_mut(y * width + x);
            for k in 0..degree {
                let f = (1u64 << k) as f64 * std::f64::consts::PI;
                row[4 * k] = (f * u).sin();
                row[4 * k + 1] = (f * u).cos();
                row[4 * k + 2] = (f * v).sin();
                row[4 * k + 3] = (f * v).cos();
            }
        }
    }
    FeatureMap::new(width, height, data)
}

/// Box-downsamples each channel by `factor` and bilinearly upsamples back.
fn resample(data: &Array2<f64>, w: usize, h: usize, factor: usize) -> Array2<f64> {
    let (lw, lh) = (w.div_ceil(factor), h.div_ceil(factor));
    let c = data.ncols();
    let mut low = Array2::<f64>::zeros((lw * lh, c));
    let mut counts = vec![0.0; lw * lh];
    for y in 0..h {
        for x in 0..w {
            let q = (y / factor) * lw + x / factor;
            counts[q] += 1.0;
            let mut row = low.row_mut(q);
            row += &data.row(y * w + x);
        }
    }
    for (q, n) in counts.iter().enumerate() {
        low.row_mut(q).mapv_inplace(|v| v / n);
    }
    let mut out = Array2::zeros((w * h, c));
    let f = factor as f64;
    for y in 0..h {
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (lh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(lh - 1);
        let ty = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (lw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(lw - 1);
            let tx = sx - x0 as f64;
            for k in 0..c {
                let a = low[[y0 * lw + x0, k]] * (1.0 - tx) + low[[y0 * lw + x1, k]] * tx;
                let b = low[[y1 * lw + x0, k]] * (1.0 - tx) + low[[y1 * lw + x1, k]] * tx;
                out[[y * w + x, k]] = a * (1.0 - ty) + b * ty;
            }
        }
    }
    out
}

/// Synthetic per-pixel features for one view.
///
/// Channel 0 is 1 on distractor pixels and 0 elsewhere, each pixel flipped
/// with probability `1 − semantic_fidelity`. The remaining channels are a
/// fixed random projection of the view's RGB (fixed per `seed`, shared by all
/// views). Gaussian noise is added before the low-resolution resampling.
pub fn synth_features(
    image: &ColorImage,
    gt_inliers: &InlierMask,
    cfg: &GenConfig,
    seed: u64,
    view_id: usize,
) -> FeatureMap {
    let (w, h) = (image.width, image.height);
    assert_eq!((w, h), (gt_inliers.width, gt_inliers.height));
    let dim = cfg.feature_dim;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let unit = Normal::new(0.0, 1.0 / 3f64.sqrt()).unwrap();
    let projection: Vec<[f64; 3]> = (1..dim)
        .map(|_| std::array::from_fn(|_| unit.sample(&mut proj_rng)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_0000);
    rng.set_stream(view_id as u64);
    let noise = Normal::new(0.0, cfg.feature_noise_sigma.max(0.0)).unwrap();
    let mut data = Array2::zeros((w * h, dim));
    for p in 0..w * h {
        let distractor = gt_inliers.values[p] < 0.5;
        let flip = !rng.gen_bool(cfg.semantic_fidelity);
        let semantic = if distractor != flip { 1.0 } else { 0.0 };
        let rgb = image.data[p];
        let mut row = data.row_mut(p);
        row[0] = semantic;
        for (k, pr) in projection.iter().enumerate() {
            row[k + 1] = pr[0] * rgb[0] + pr[1] * rgb[1] + pr[2] * rgb[2];
        }
        if cfg.feature_noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let mut out = resample(&data, w, h, FEATURE_DOWNSAMPLE);
    out.mapv_inplace(|v| v as f32 as f64);
    FeatureMap::new(w, h, out)
}

/// Builds a dataset fully determined by `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> SceneDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, palette) = base_image(cfg, &mut rng);
    let (w, h) = (cfg.width, cfg.height);
    let mut views = Vec::with_capacity(cfg.views);
    let mut current: Option<(Vec<Distractor>, Vec<bool>)> = None;
    let mut hotspot_rng = ChaCha8Rng::seed_from_u64(seed ^ HOTSPOT_SEED);
    let hotspot = [
        hotspot_rng.gen_range(0.3..0.7),
        hotspot_rng.gen_range(0.3..0.7),
    ];
    for id in 0..cfg.views {
        if id % cfg.persistence == 0 || current.is_none() {
            current = Some(layout(cfg, &palette, hotspot, &mut rng));
        }
        let (distractors, covered) = current.as_ref().unwrap();
        let gains: [f64; 3] = std::array::from_fn(|_| 1.0 + cfg.jitter * rng.gen_range(-1.0..1.0));
        let clean = ColorImage::new(
            w,
            h,
            base.data
                .iter()
                .map(|c| std::array::from_fn(|k| quantize_unit(c[k] * gains[k])))
                .collect(),
        );
        let mut image = clean.clone();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !covered[p] {
                    continue;
                }
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                // Later distractors are pasted on top of earlier ones.
                if let Some(d) = distractors.iter().rev().find(|d| d.shape.contains(fx, fy)) {
                    image.data[p] = d
                        .fill(fx, fy, clean.data[p], cfg.camouflage)
                        .map(quantize_unit);
                }
            }
        }
        let gt_inliers = InlierMask::from_bools(w, h, covered.iter().map(|&c| !c));
        let features = synth_features(&image, &gt_inliers, cfg, seed, id);
        views.push(View {
            id,
            image,
            clean,
            gt_inliers,
            features,
        });
    }
    SceneDataset {
        cfg: cfg.clone(),
        seed,
        base,
        views,
    }
}
