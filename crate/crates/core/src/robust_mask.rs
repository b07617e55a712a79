//! Residual-driven inlier masks.
//!
//! The pipeline is `trim → smooth → patch`:
//!
//! 1. [`trim_mask`] keeps pixels whose residual is at most the generalized
//!    median `ρ` read from the residual histogram;
//! 2. [`smooth_mask`] re-admits pixels whose 3×3 neighbourhood is mostly inlier;
//! 3. [`patch_mask`] re-admits whole patches whose surrounding window is mostly
//!    inlier.
//!
//! Both later stages are OR-compositions, so the inlier set only grows along the
//! pipeline. [`schedule_alpha`] and [`bernoulli_mask`] implement the warm-up that
//! blends the predicted mask with an all-inlier mask early in training.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{InlierMask, Plane};
use crate::residual_stats::{HistogramError, ResidualHistogram};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Fraction of the tracked residual population treated as outliers.
    pub tau: f64,
    /// Minimum 3×3 inlier density that re-admits a pixel.
    pub box_threshold: f64,
    pub patch_size: usize,
    pub neighborhood: usize,
    /// Minimum neighbourhood inlier density that re-admits a patch.
    pub patch_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Replace the per-pixel mask by the patch vote instead of OR-ing them.
    pub patch_override: bool,
    /// Stage toggles used by ablations; the full filter enables both.
    pub smooth: bool,
    pub patch: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            box_threshold: 0.5,
            patch_size: 8,
            neighborhood: 16,
            patch_threshold: 0.6,
            beta1: 3e-4,
            beta2: 1.5,
            patch_override: false,
            smooth: true,
            patch: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(format!("mask.tau must lie in (0, 1), got {}", self.tau));
        }
        if self.patch_size == 0 {
            return Err("mask.patch_size must be positive".into());
        }
        if self.neighborhood < self.patch_size {
            return Err("mask.neighborhood must be at least mask.patch_size".into());
        }
        if !(self.beta1 >= 0.0 && self.beta2 > 0.0) {
            return Err("mask.beta1 must be non-negative and mask.beta2 positive".into());
        }
        Ok(())
    }
}

/// Inlier iff `residual <= rho`; ties are inliers.
pub fn trim_mask(residuals: &Plane, rho: f64) -> InlierMask {
    InlierMask::from_bools(
        residuals.width,
        residuals.height,
        residuals.data.iter().map(|&r| r <= rho),
    )
}

/// `out = mask OR (box3×3(mask) >= threshold)`, where the box filter averages
/// over the taps that fall inside the image.
pub fn smooth_mask(mask: &InlierMask, box_threshold: f64) -> InlierMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let y0 = y.saturating_sub(1);
        let y1 = (y + 1).min(h - 1);
        for x in 0..w {
            let here = mask.values[y * w + x];
            if here >= 0.5 {
                out.push(1.0);
                continue;
            }
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            let mut sum = 0.0;
            for yy in y0..=y1 {
                let row = &mask.values[yy * w..yy * w + w];
                sum += row[x0..=x1].iter().sum::<f64>();
            }
            let taps = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            out.push(if sum / taps >= box_threshold {
                1.0
            } else {
                0.0
            });
        }
    }
    InlierMask::new(w, h, out)
}

/// Start of a `len`-wide window centred on `[start, start + size)`, shifted so
/// that it stays inside `[0, extent)`.
fn window_start(start: usize, size: usize, len: usize, extent: usize) -> usize {
    if len >= extent {
        return 0;
    }
    let centre2 = 2 * start + size; // twice the patch centre
    let ideal = centre2 as i64 / 2 - len as i64 / 2;
    ideal.clamp(0, (extent - len) as i64) as usize
}

/// Patch vote: every `patch_size`² patch whose `neighborhood`² window has an
/// inlier density of at least `patch_threshold` becomes entirely inlier.
///
/// Edge patches are truncated; windows near the border are shifted inwards so
/// they keep their full size whenever the image is large enough.
pub fn patch_mask(mask: &InlierMask, cfg: &MaskConfig) -> InlierMask {
    let (w, h) = (mask.width, mask.height);
    let ps = cfg.patch_size.max(1);
    let nb = cfg.neighborhood.max(ps);

    // Summed-area table for O(1) window means.
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += mask.values[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let rect_sum = |x0: usize, y0: usize, x1: usize, y1: usize| {
        sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0]
    };

    let mut out = mask.values.clone();
    for py in (0..h).step_by(ps) {
        let ph = ps.min(h - py);
        let wy0 = window_start(py, ph, nb, h);
        let wy1 = (wy0 + nb).min(h);
        for px in (0..w).step_by(ps) {
            let pw = ps.min(w - px);
            let wx0 = window_start(px, pw, nb, w);
            let wx1 = (wx0 + nb).min(w);
            let area = ((wy1 - wy0) * (wx1 - wx0)) as f64;
            let vote = rect_sum(wx0, wy0, wx1, wy1) / area >= cfg.patch_threshold;
            for y in py..py + ph {
                for x in px..px + pw {
                    let v = &mut out[y * w + x];
                    if cfg.patch_override {
                        *v = if vote { 1.0 } else { 0.0 };
                    } else if vote {
                        *v = 1.0;
                    }
                }
            }
        }
    }
    InlierMask::new(w, h, out)
}

/// Runs the enabled stages of the trimmed filter at an explicit cut-off `rho`.
pub fn filter_at(residuals: &Plane, rho: f64, cfg: &MaskConfig) -> InlierMask {
    let mut mask = trim_mask(residuals, rho);
    if cfg.smooth {
        mask = smooth_mask(&mask, cfg.box_threshold);
    }
    if cfg.patch {
        mask = patch_mask(&mask, cfg);
    }
    mask
}

/// `trim(ρ = hist.quantile(τ)) |> smooth |> patch`, honouring the stage toggles.
pub fn robust_filter(
    residuals: &Plane,
    hist: &ResidualHistogram,
    cfg: &MaskConfig,
) -> Result<InlierMask, HistogramError> {
    let rho = hist.quantile(cfg.tau)?;
    Ok(filter_at(residuals, rho, cfg))
}

/// Staircase exponential warm-up `α = exp(−β₁·⌊(t+1)/β₂⌋)`.
pub fn schedule_alpha(step: u64, cfg: &MaskConfig) -> f64 {
    let stair = ((step + 1) as f64 / cfg.beta2).floor();
    (-cfg.beta1 * stair).exp()
}

/// Samples each pixel as inlier with probability `α + (1 − α)·mask*(p)`.
///
/// The stream is keyed by `(seed, step)` and the pixel index is the position
/// in that stream, so a given pixel always sees the same uniform draw.
pub fn bernoulli_mask(mask_star: &InlierMask, alpha: f64, seed: u64, step: u64) -> InlierMask {
    let alpha = alpha.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let values = mask_star
        .values
        .iter()
        .map(|&m| {
            let p = alpha + (1.0 - alpha) * m;
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    InlierMask::new(mask_star.width, mask_star.height, values)
}
