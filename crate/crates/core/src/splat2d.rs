//! Differentiable 2D Gaussian splats composited front to back.
//!
//! A splat has a mean in normalized image coordinates `[0, 1]²`, a covariance
//! `Σ = R(θ)·diag(σ²)·R(θ)ᵀ` with `σ = exp(log_scales)`, an opacity
//! `o = sigmoid(opacity_logit)`, an RGB color and a fixed depth key. A pixel
//! with normalized center `x` receives
//!
//! ```text
//! α_i = o_i · exp(−½ (x − μ_i)ᵀ Σ_i⁻¹ (x − μ_i))      (inside the 3σ box, else 0)
//! C   = Σ_i ĉ_i α_i Π_{j<i} (1 − α_j) + bg · Π_i (1 − α_i)
//! ```
//!
//! with splats ordered by depth and then index. Per-view appearance is an
//! affine color map `ĉ = clamp(a ⊙ c + b, 0, 1)` whose coefficients come from
//! a latent code pushed through a small network.
//!
//! [`render`] keeps a per-pixel list of contributions so [`render_backward`]
//! can produce exact gradients with a single reverse scan per pixel.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{ColorImage, InlierMask};
use crate::smallnet::{sigmoid, Activation, DenseNet, NetError};

/// Trainable scalars per splat: mean (2), log-scales (2), rotation,
/// opacity logit, color (3).
pub const SPLAT_PARAMS: usize = 9;
pub const P_MEAN: usize = 0;
pub const P_SCALE: usize = 2;
pub const P_ROT: usize = 4;
pub const P_OPACITY: usize = 5;
pub const P_COLOR: usize = 6;

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 1.0;
/// Half-width of the evaluation box in standard deviations.
pub const BOX_SIGMAS: f64 = 3.0;
/// Rows are split into this many bands regardless of thread count so that
/// floating-point summation order never depends on the pool size.
const BANDS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("view {view} out of range ({views} latents)")]
    BadView { view: usize, views: usize },
    #[error("render cache does not match the model ({0})")]
    StaleCache(&'static str),
    #[error("gradient image is {got:?}, render was {expected:?}")]
    DimMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("model must keep at least one splat")]
    Empty,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    pub log_scales: [f64; 2],
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: [f64; 3],
    /// Compositing key, smaller is in front. Not trained.
    pub depth: f64,
}

impl Splat {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 2] {
        [self.log_scales[0].exp(), self.log_scales[1].exp()]
    }

    pub fn params(&self) -> [f64; SPLAT_PARAMS] {
        [
            self.mean[0],
            self.mean[1],
            self.log_scales[0],
            self.log_scales[1],
            self.rotation,
            self.opacity_logit,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn from_params(p: &[f64], depth: f64) -> Self {
        Self {
            mean: [p[0], p[1]],
            log_scales: [p[2], p[3]],
            rotation: p[4],
            opacity_logit: p[5],
            color: [p[6], p[7], p[8]],
            depth,
        }
    }

    /// Clamps scales into `(MIN_SCALE, MAX_SCALE)` and colors into `[0, 1]`.
    pub fn clamp(&mut self) {
        let lo = (MIN_SCALE * (1.0 + 1e-6)).ln();
        let hi = (MAX_SCALE * (1.0 - 1e-6)).ln();
        for s in &mut self.log_scales {
            *s = s.clamp(lo, hi);
        }
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// `Σ = R(θ)·diag(exp(2·log_scales))·R(θ)ᵀ` as `[[a, b], [b, c]]`.
pub fn covariance(splat: &Splat) -> [[f64; 2]; 2] {
    let [sx, sy] = splat.scales();
    let (s, c) = splat.rotation.sin_cos();
    let (vx, vy) = (sx * sx, sy * sy);
    let a = c * c * vx + s * s * vy;
    let b = c * s * (vx - vy);
    let d = s * s * vx + c * c * vy;
    [[a, b], [b, d]]
}

/// Per-view appearance codes and the shared latent-to-affine mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct Glo {
    pub latents: Vec<Vec<f64>>,
    /// Maps a latent to `(raw_a, b) ∈ R³ × R³`; `a = 1 + raw_a`.
    pub mapper: DenseNet,
}

pub const GLO_HIDDEN: usize = 16;

impl Glo {
    /// Random latents, random hidden layer and a zeroed output layer so the
    /// initial map is the identity.
    pub fn new<R: Rng>(views: usize, dim: usize, rng: &mut R) -> Self {
        let mut mapper = DenseNet::new(
            &[dim, GLO_HIDDEN, 6],
            &[Activation::Relu, Activation::Identity],
            false,
            rng,
        )
        .expect("valid mapper shape");
        mapper.zero_last_layer();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let latents = (0..views)
            .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
            .collect();
        Self { latents, mapper }
    }

    pub fn dim(&self) -> usize {
        self.mapper.input_dim()
    }

    /// `(a, b)` for a view.
    pub fn affine(&self, view: usize) -> Result<([f64; 3], [f64; 3]), SplatError> {
        let z = self.latents.get(view).ok_or(SplatError::BadView {
            view,
            views: self.latents.len(),
        })?;
        let out = self.mapper.forward(z)?;
        Ok((
            [1.0 + out[0], 1.0 + out[1], 1.0 + out[2]],
            [out[3], out[4], out[5]],
        ))
    }
}

/// Which color transform to apply when rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appearance {
    /// Raw splat colors.
    Identity,
    /// The GLO transform of a training view (identity when GLO is disabled).
    View(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatModel {
    pub splats: Vec<Splat>,
    pub glo: Option<Glo>,
}

/// `ĉ = clamp(a ⊙ c + b, 0, 1)`.
pub fn glo_color(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| (a[k] * c[k] + b[k]).clamp(0.0, 1.0))
}

impl SplatModel {
    pub fn new(splats: Vec<Splat>) -> Self {
        Self { splats, glo: None }
    }

    /// Splats on a jittered grid with 4-pixel scales, zero rotation, opacity
    /// 0.5 and colors read from `color_source` at each mean.
    pub fn init<R: Rng>(count: usize, color_source: &ColorImage, rng: &mut R) -> Self {
        let (w, h) = (color_source.width, color_source.height);
        let side = (count as f64).sqrt().ceil().max(1.0) as usize;
        let mut cells: Vec<usize> = (0..side * side).collect();
        cells.shuffle(rng);
        cells.truncate(count);
        cells.sort_unstable();
        let splats = cells
            .into_iter()
            .map(|cell| {
                let gx = (cell % side) as f64 + rng.gen_range(0.0..1.0);
                let gy = (cell / side) as f64 + rng.gen_range(0.0..1.0);
                let mean = [gx / side as f64, gy / side as f64];
                let px = ((mean[0] * w as f64) as usize).min(w - 1);
                let py = ((mean[1] * h as f64) as usize).min(h - 1);
                Splat {
                    mean,
                    log_scales: [(4.0 / w as f64).ln(), (4.0 / h as f64).ln()],
                    rotation: 0.0,
                    opacity_logit: 0.0,
                    color: color_source.get(px, py),
                    depth: rng.gen(),
                }
            })
            .collect();
        Self { splats, glo: None }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn params(&self) -> Vec<f64> {
        self.splats.iter().flat_map(|s| s.params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.splats.len() * SPLAT_PARAMS);
        for (s, p) in self
            .splats
            .iter_mut()
            .zip(params.chunks_exact(SPLAT_PARAMS))
        {
            *s = Splat::from_params(p, s.depth);
        }
    }

    /// Compositing order: depth ascending, then index.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.splats.len()).collect();
        idx.sort_by(|&a, &b| {
            self.splats[a]
                .depth
                .total_cmp(&self.splats[b].depth)
                .then(a.cmp(&b))
        });
        idx
    }

    /// Colors after the appearance transform, plus the affine map used.
    pub fn apply_glo(&self, appearance: Appearance) -> Result<AdjustedColors, SplatError> {
        let affine = match (appearance, &self.glo) {
            (Appearance::View(v), Some(glo)) => Some((v, glo.affine(v)?)),
            _ => None,
        };
        let colors = match affine {
            Some((_, (a, b))) => self
                .splats
                .iter()
                .map(|s| glo_color(a, b, s.color))
                .collect(),
            None => self.splats.iter().map(|s| s.color).collect(),
        };
        Ok(AdjustedColors {
            colors,
            affine: affine.map(|(v, (a, b))| (v, a, b)),
        })
    }

    /// Keeps splats whose flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.splats.len());
        let mut it = keep.iter();
        self.splats.retain(|_| *it.next().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedColors {
    pub colors: Vec<[f64; 3]>,
    /// `(view, a, b)` when a GLO transform was applied.
    pub affine: Option<(usize, [f64; 3], [f64; 3])>,
}

/// Per-splat quantities shared by all pixels.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    mean: [f64; 2],
    /// Inverse covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    cos: f64,
    sin: f64,
    inv_var: [f64; 2],
    opacity: f64,
    /// Inclusive pixel box, empty when `x0 > x1` or `y0 > y1`.
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

fn prepare(s: &Splat, w: usize, h: usize) -> Prepared {
    let [sx, sy] = s.scales();
    let (sin, cos) = s.rotation.sin_cos();
    let inv_var = [1.0 / (sx * sx), 1.0 / (sy * sy)];
    let conic = [
        cos * cos * inv_var[0] + sin * sin * inv_var[1],
        cos * sin * (inv_var[0] - inv_var[1]),
        sin * sin * inv_var[0] + cos * cos * inv_var[1],
    ];
    let cov = covariance(s);
    let (wf, hf) = (w as f64, h as f64);
    let cx = s.mean[0] * wf - 0.5;
    let cy = s.mean[1] * hf - 0.5;
    let ex = BOX_SIGMAS * cov[0][0].sqrt() * wf;
    let ey = BOX_SIGMAS * cov[1][1].sqrt() * hf;
    let clip = |v: f64, hi: usize| -> i64 {
        if v.is_nan() {
            -1
        } else {
            v.clamp(-1.0, hi as f64) as i64
        }
    };
    Prepared {
        mean: s.mean,
        conic,
        cos,
        sin,
        inv_var,
        opacity: s.opacity(),
        x0: clip((cx - ex).ceil(), w).max(0),
        x1: clip((cx + ex).floor(), w).min(w as i64 - 1),
        y0: clip((cy - ey).ceil(), h).max(0),
        y1: clip((cy + ey).floor(), h).min(h as i64 - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    splat: u32,
    alpha: f64,
    t_before: f64,
}

#[derive(Debug, Clone)]
struct Band {
    y0: usize,
    /// CSR row pointers, one per pixel plus one.
    offsets: Vec<u32>,
    entries: Vec<Entry>,
    t_final: Vec<f64>,
}

/// Everything [`render_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct RenderCache {
    pub width: usize,
    pub height: usize,
    splat_count: usize,
    colors: AdjustedColors,
    bands: Vec<Band>,
}

impl RenderCache {
    pub fn entry_count(&self) -> usize {
        self.bands.iter().map(|b| b.entries.len()).sum()
    }

    /// `(splat, pixel)` pairs evaluated inside a 3σ box, in pixel order.
    pub fn footprint(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.entry_count());
        for band in &self.bands {
            for local in 0..band.offsets.len() - 1 {
                let p = (band.y0 * self.width + local) as u32;
                for e in
                    &band.entries[band.offsets[local] as usize..band.offsets[local + 1] as usize]
                {
                    out.push((e.splat, p));
                }
            }
        }
        out
    }

    /// Final transmittance per pixel.
    pub fn transmittance(&self) -> Vec<f64> {
        self.bands
            .iter()
            .flat_map(|b| b.t_final.iter().copied())
            .collect()
    }
}

fn band_ranges(h: usize) -> Vec<(usize, usize)> {
    let n = BANDS.min(h.max(1));
    (0..n).map(|i| (i * h / n, (i + 1) * h / n)).collect()
}

fn alpha_at(p: &Prepared, x: f64, y: f64) -> f64 {
    let dx = x - p.mean[0];
    let dy = y - p.mean[1];
    let m = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    p.opacity * (-0.5 * m).exp()
}

fn render_band(
    prepared: &[Prepared],
    order: &[usize],
    colors: &[[f64; 3]],
    w: usize,
    h: usize,
    (y0, y1): (usize, usize),
) -> (Band, Vec<[f64; 3]>) {
    let npix = (y1 - y0) * w;
    let mut counts = vec![0u32; npix + 1];
    let rows = |p: &Prepared| (p.y0.max(y0 as i64), p.y1.min(y1 as i64 - 1));
    for &i in order {
        let p = &prepared[i];
        let (ry0, ry1) = rows(p);
        for py in ry0..=ry1 {
            let base = (py as usize - y0) * w;
            for px in p.x0..=p.x1 {
                counts[base + px as usize + 1] += 1;
            }
        }
    }
    for k in 1..=npix {
        counts[k] += counts[k - 1];
    }
    let offsets = counts;
    let mut cursor: Vec<u32> = offsets[..npix].to_vec();
    let mut entries = vec![
        Entry {
            splat: 0,
            alpha: 0.0,
            t_before: 0.0
        };
        offsets[npix] as usize
    ];
    let (wf, hf) = (w as f64, h as f64);
    for &i in order {
        let p = &prepared[i];
        let (ry0, ry1) = rows(p);
        for py in ry0..=ry1 {
            let y = (py as f64 + 0.5) / hf;
            let base = (py as usize - y0) * w;
            for px in p.x0..=p.x1 {
                let x = (px as f64 + 0.5) / wf;
                let local = base + px as usize;
                entries[cursor[local] as usize] = Entry {
                    splat: i as u32,
                    alpha: alpha_at(p, x, y),
                    t_before: 0.0,
                };
                cursor[local] += 1;
            }
        }
    }
    let mut out = vec![[0.0; 3]; npix];
    let mut t_final = vec![0.0; npix];
    for local in 0..npix {
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for e in &mut entries[offsets[local] as usize..offsets[local + 1] as usize] {
            e.t_before = t;
            let col = colors[e.splat as usize];
            let wgt = e.alpha * t;
            for k in 0..3 {
                c[k] += col[k] * wgt;
            }
            t *= 1.0 - e.alpha;
        }
        for k in 0..3 {
            c[k] += BACKGROUND[k] * t;
        }
        out[local] = c;
        t_final[local] = t;
    }
    (
        Band {
            y0,
            offsets,
            entries,
            t_final,
        },
        out,
    )
}

/// Renders a `width × height` image of the model under `appearance`.
pub fn render(
    model: &SplatModel,
    appearance: Appearance,
    width: usize,
    height: usize,
) -> Result<(ColorImage, RenderCache), SplatError> {
    let colors = model.apply_glo(appearance)?;
    let prepared: Vec<Prepared> = model
        .splats
        .iter()
        .map(|s| prepare(s, width, height))
        .collect();
    let order = model.order();
    let parts: Vec<(Band, Vec<[f64; 3]>)> = band_ranges(height)
        .into_par_iter()
        .map(|range| render_band(&prepared, &order, &colors.colors, width, height, range))
        .collect();
    let mut data = Vec::with_capacity(width * height);
    let mut bands = Vec::with_capacity(parts.len());
    for (band, pixels) in parts {
        data.extend(pixels);
        bands.push(band);
    }
    Ok((
        ColorImage::new(width, height, data),
        RenderCache {
            width,
            height,
            splat_count: model.splats.len(),
            colors,
            bands,
        },
    ))
}

/// Sparse per-entry position-gradient energies
/// `E(g, p) = ‖∂Î_p/∂x_g‖²` with `x_g` measured in pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionGradEnergy {
    pub width: usize,
    pub height: usize,
    /// `(splat, pixel, energy)`.
    pub entries: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    /// `SPLAT_PARAMS` values per splat, in [`Splat::params`] order.
    pub splats: Vec<f64>,
    /// `(view, ∂L/∂z_view)` when a GLO transform was used.
    pub latent: Option<(usize, Vec<f64>)>,
    /// Flat mapper gradient (empty without GLO).
    pub mapper: Vec<f64>,
    pub energy: Option<PositionGradEnergy>,
}

struct BandGrads {
    splats: Vec<f64>,
    /// `∂L/∂ĉ` per splat.
    colors: Vec<[f64; 3]>,
    energy: Vec<(u32, u32, f64)>,
}

#[allow(clippy::too_many_arguments)]
fn backward_band(
    band: &Band,
    prepared: &[Prepared],
    colors: &[[f64; 3]],
    grad: &[[f64; 3]],
    w: usize,
    h: usize,
    n: usize,
    want_energy: bool,
) -> BandGrads {
    let mut out = BandGrads {
        splats: vec![0.0; n * SPLAT_PARAMS],
        colors: vec![[0.0; 3]; n],
        energy: Vec::new(),
    };
    let (wf, hf) = (w as f64, h as f64);
    for local in 0..band.offsets.len() - 1 {
        let px = local % w;
        let py = band.y0 + local / w;
        let pixel = py * w + px;
        let g = grad[pixel];
        let x = (px as f64 + 0.5) / wf;
        let y = (py as f64 + 0.5) / hf;
        let mut behind = BACKGROUND;
        let entries = &band.entries[band.offsets[local] as usize..band.offsets[local + 1] as usize];
        for e in entries.iter().rev() {
            let i = e.splat as usize;
            let col = colors[i];
            let t = e.t_before;
            let a = e.alpha;
            let dc_da: [f64; 3] = std::array::from_fn(|k| t * (col[k] - behind[k]));
            let dl_da = g[0] * dc_da[0] + g[1] * dc_da[1] + g[2] * dc_da[2];
            for k in 0..3 {
                out.colors[i][k] += g[k] * t * a;
                behind[k] = col[k] * a + (1.0 - a) * behind[k];
            }
            if a == 0.0 {
                continue;
            }
            let p = &prepared[i];
            let dx = x - p.mean[0];
            let dy = y - p.mean[1];
            // α Σ⁻¹ d
            let gmx = a * (p.conic[0] * dx + p.conic[1] * dy);
            let gmy = a * (p.conic[1] * dx + p.conic[2] * dy);
            let q1 = p.cos * dx + p.sin * dy;
            let q2 = -p.sin * dx + p.cos * dy;
            let gs = &mut out.splats[i * SPLAT_PARAMS..(i + 1) * SPLAT_PARAMS];
            gs[P_MEAN] += dl_da * gmx;
            gs[P_MEAN + 1] += dl_da * gmy;
            gs[P_SCALE] += dl_da * a * q1 * q1 * p.inv_var[0];
            gs[P_SCALE + 1] += dl_da * a * q2 * q2 * p.inv_var[1];
            gs[P_ROT] += dl_da * (-a * q1 * q2 * (p.inv_var[0] - p.inv_var[1]));
            gs[P_OPACITY] += dl_da * a * (1.0 - p.opacity);
            if want_energy {
                let dcn = dc_da[0] * dc_da[0] + dc_da[1] * dc_da[1] + dc_da[2] * dc_da[2];
                let (ex, ey) = (gmx / wf, gmy / hf);
                out.energy
                    .push((e.splat, pixel as u32, dcn * (ex * ex + ey * ey)));
            }
        }
    }
    out
}

/// Reverse pass: gradients of `Σ_p grad_image(p) · Î(p)` with respect to every
/// splat parameter and, when a GLO transform was applied, the view latent and
/// mapper. `want_energy` also returns position-gradient energies for
/// utilization tracking.
pub fn render_backward(
    model: &SplatModel,
    cache: &RenderCache,
    grad_image: &ColorImage,
    want_energy: bool,
) -> Result<ModelGrads, SplatError> {
    if cache.splat_count != model.splats.len() {
        return Err(SplatError::StaleCache("splat count changed"));
    }
    if (grad_image.width, grad_image.height) != (cache.width, cache.height) {
        return Err(SplatError::DimMismatch {
            expected: (cache.width, cache.height),
            got: (grad_image.width, grad_image.height),
        });
    }
    let (w, h) = (cache.width, cache.height);
    let n = model.splats.len();
    let prepared: Vec<Prepared> = model.splats.iter().map(|s| prepare(s, w, h)).collect();
    let colors = &cache.colors.colors;
    let parts: Vec<BandGrads> = cache
        .bands
        .par_iter()
        .map(|band| {
            backward_band(
                band,
                &prepared,
                colors,
                &grad_image.data,
                w,
                h,
                n,
                want_energy,
            )
        })
        .collect();

    let mut splat_grads = vec![0.0; n * SPLAT_PARAMS];
    let mut color_grads = vec![[0.0; 3]; n];
    let mut energy = Vec::new();
    for part in parts {
        for (a, b) in splat_grads.iter_mut().zip(&part.splats) {
            *a += b;
        }
        for (a, b) in color_grads.iter_mut().zip(&part.colors) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        if want_energy {
            energy.extend(part.energy);
        }
    }

    let mut latent = None;
    let mut mapper = Vec::new();
    match (&cache.colors.affine, &model.glo) {
        (Some((view, a, b)), Some(glo)) => {
            let mut d_affine = [0.0; 6];
            for (i, s) in model.splats.iter().enumerate() {
                for k in 0..3 {
                    let v = a[k] * s.color[k] + b[k];
                    if v > 0.0 && v < 1.0 {
                        let gc = color_grads[i][k];
                        splat_grads[i * SPLAT_PARAMS + P_COLOR + k] += gc * a[k];
                        d_affine[k] += gc * s.color[k];
                        d_affine[3 + k] += gc;
                    }
                }
            }
            let z = &glo.latents[*view];
            let batch = ndarray::Array2::from_shape_vec((1, z.len()), z.clone()).expect("row");
            let fc = glo.mapper.forward_cached(batch)?;
            let go = ndarray::Array2::from_shape_vec((1, 6), d_affine.to_vec()).expect("row");
            let ng = glo.mapper.backward(&fc, go.view())?;
            latent = Some((*view, ng.input.row(0).to_vec()));
            mapper = ng.flatten();
        }
        (Some(_), None) => return Err(SplatError::StaleCache("GLO removed since render")),
        _ => {
            for (i, gc) in color_grads.iter().enumerate() {
                for k in 0..3 {
                    splat_grads[i * SPLAT_PARAMS + P_COLOR + k] += gc[k];
                }
            }
        }
    }
    Ok(ModelGrads {
        splats: splat_grads,
        latent,
        mapper,
        energy: want_energy.then_some(PositionGradEnergy {
            width: w,
            height: h,
            entries: energy,
        }),
    })
}

/// Windowed utilization `u_g = Σ_t mean_p ‖Λ(p)·∂Î_p/∂x_g‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationTracker {
    pub utilization: Vec<f64>,
    /// Steps accumulated since the last prune.
    pub steps: usize,
    pub period: usize,
    pub kappa: f64,
}

impl UtilizationTracker {
    pub fn new(splats: usize, period: usize, kappa: f64) -> Self {
        Self {
            utilization: vec![0.0; splats],
            steps: 0,
            period,
            kappa,
        }
    }

    pub fn reset(&mut self, splats: usize) {
        self.utilization = vec![0.0; splats];
        self.steps = 0;
    }

    pub fn window_complete(&self) -> bool {
        self.steps >= self.period
    }
}

/// Adds one view's masked position-gradient energy to the tracker.
pub fn accumulate_utilization(
    tracker: &mut UtilizationTracker,
    energy: &PositionGradEnergy,
    mask: &InlierMask,
) {
    let pixels = (energy.width * energy.height) as f64;
    for &(g, p, e) in &energy.entries {
        let m = mask.values[p as usize];
        tracker.utilization[g as usize] += m * m * e / pixels;
    }
    tracker.steps += 1;
}

/// Removes splats with `u_g < κ`, keeping the best one if all would go, and
/// resets the tracker. Returns the keep flags in original splat order.
pub fn prune(model: &mut SplatModel, tracker: &mut UtilizationTracker) -> Vec<bool> {
    let mut keep: Vec<bool> = tracker
        .utilization
        .iter()
        .map(|&u| u >= tracker.kappa)
        .collect();
    if !keep.iter().any(|&k| k) && !keep.is_empty() {
        let best = tracker
            .utilization
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        keep[best] = true;
    }
    model.retain(&keep);
    tracker.reset(model.splats.len());
    keep
}
