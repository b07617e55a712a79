//! Discounted streaming histogram of residual magnitudes.
//!
//! Each training batch is a whole image, so the fraction of outliers varies
//! wildly from one batch to the next. Instead of trimming each batch at its own
//! percentile, residuals are pooled across batches in a fixed-width bucket
//! histogram whose populations decay geometrically, and the cut-off `ρ` is read
//! from that pooled distribution.

use thiserror::Error;

use crate::image::Plane;

pub const DEFAULT_BUCKET_WIDTH: f64 = 1e-3;
pub const DEFAULT_MAX_RESIDUAL: f64 = 2.0;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

#[derive(Debug, Error, PartialEq)]
pub enum HistogramError {
    #[error("residual {0} is negative or non-finite")]
    BadResidual(f64),
    #[error("histogram is empty")]
    Empty,
    #[error("quantile level must lie in (0, 1), got {0}")]
    BadTau(f64),
    #[error("invalid histogram parameter: {0}")]
    BadParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramConfig {
    pub bucket_width: f64,
    pub max_residual: f64,
    pub discount: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bucket_width: DEFAULT_BUCKET_WIDTH,
            max_residual: DEFAULT_MAX_RESIDUAL,
            discount: DEFAULT_DISCOUNT,
        }
    }
}

/// Bucket `b` covers `[b·w, (b+1)·w)`; residuals at or beyond the last regular
/// bucket land in the overflow bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHistogram {
    bucket_width: f64,
    max_residual: f64,
    discount: f64,
    buckets: Vec<f64>,
    overflow: f64,
}

impl ResidualHistogram {
    pub fn new(cfg: HistogramConfig) -> Result<Self, HistogramError> {
        if !(cfg.bucket_width.is_finite() && cfg.bucket_width > 0.0) {
            return Err(HistogramError::BadParameter(
                "bucket_width must be positive",
            ));
        }
        if !(cfg.max_residual.is_finite() && cfg.max_residual > 0.0) {
            return Err(HistogramError::BadParameter(
                "max_residual must be positive",
            ));
        }
        if !(cfg.discount > 0.0 && cfg.discount <= 1.0) {
            return Err(HistogramError::BadParameter("discount must lie in (0, 1]"));
        }
        // Guard against 2.0 / 1e-3 landing a hair above an integer.
        let regular = ((cfg.max_residual / cfg.bucket_width) - 1e-9)
            .ceil()
            .max(1.0) as usize;
        Ok(Self {
            bucket_width: cfg.bucket_width,
            max_residual: cfg.max_residual,
            discount: cfg.discount,
            buckets: vec![0.0; regular],
            overflow: 0.0,
        })
    }

    /// Rebuilds a histogram from stored populations (checkpoint restore).
    pub fn from_parts(
        cfg: HistogramConfig,
        buckets: Vec<f64>,
        overflow: f64,
    ) -> Result<Self, HistogramError> {
        let mut hist = Self::new(cfg)?;
        if buckets.len() != hist.buckets.len() {
            return Err(HistogramError::BadParameter(
                "bucket count does not match config",
            ));
        }
        if buckets
            .iter()
            .chain(std::iter::once(&overflow))
            .any(|p| !(*p >= 0.0))
        {
            return Err(HistogramError::BadParameter("negative bucket population"));
        }
        hist.buckets = buckets;
        hist.overflow = overflow;
        Ok(hist)
    }

    pub fn config(&self) -> HistogramConfig {
        HistogramConfig {
            bucket_width: self.bucket_width,
            max_residual: self.max_residual,
            discount: self.discount,
        }
    }

    pub fn bucket_width(&self) -> f64 {
        self.bucket_width
    }

    /// Number of buckets including the overflow bucket.
    pub fn bucket_count(&self) -> usize {
        self.buckets.len() + 1
    }

    pub fn buckets(&self) -> &[f64] {
        &self.buckets
    }

    pub fn overflow(&self) -> f64 {
        self.overflow
    }

    pub fn total(&self) -> f64 {
        self.buckets.iter().sum::<f64>() + self.overflow
    }

    pub fn is_empty(&self) -> bool {
        self.total() <= 0.0
    }

    /// Index of the regular bucket holding `r`, or `None` for overflow.
    pub fn bucket_of(&self, r: f64) -> Option<usize> {
        let b = (r / self.bucket_width).floor() as usize;
        (b < self.buckets.len()).then_some(b)
    }

    /// Decays every population by the discount, then adds the new residuals.
    pub fn update(&mut self, residuals: &[f64]) -> Result<(), HistogramError> {
        if let Some(&bad) = residuals.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(HistogramError::BadResidual(bad));
        }
        if self.discount != 1.0 {
            for p in &mut self.buckets {
                *p *= self.discount;
            }
            self.overflow *= self.discount;
        }
        for &r in residuals {
            match self.bucket_of(r) {
                Some(b) => self.buckets[b] += 1.0,
                None => self.overflow += 1.0,
            }
        }
        Ok(())
    }

    pub fn update_plane(&mut self, residuals: &Plane) -> Result<(), HistogramError> {
        self.update(&residuals.data)
    }

    /// Generalized median `ρ` such that a fraction `tau` of the tracked
    /// population lies above it.
    ///
    /// Returns the upper edge of the bucket holding the order statistic at
    /// fractional rank `(1 − τ)·(total − 1)` counted from below, so it agrees
    /// with [`exact_quantile`] to within one bucket width. Overflow yields `+∞`.
    pub fn quantile(&self, tau: f64) -> Result<f64, HistogramError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(HistogramError::BadTau(tau));
        }
        let total = self.total();
        if !(total > 0.0) {
            return Err(HistogramError::Empty);
        }
        let target = ((1.0 - tau) * (total - 1.0)).max(0.0);
        let mut cumulative = 0.0;
        for (b, &p) in self.buckets.iter().enumerate() {
            cumulative += p;
            if p > 0.0 && cumulative > target {
                return Ok((b + 1) as f64 * self.bucket_width);
            }
        }
        Ok(f64::INFINITY)
    }
}

/// Reference order statistic: sorts `values` and returns the element at index
/// `floor((1 − τ)·(N − 1))`.
pub fn exact_quantile(values: &[f64], tau: f64) -> Result<f64, HistogramError> {
    if values.is_empty() {
        return Err(HistogramError::Empty);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(HistogramError::BadTau(tau));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - tau) * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist(discount: f64) -> ResidualHistogram {
        ResidualHistogram::new(HistogramConfig {
            discount,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn bucket_count_includes_overflow() {
        let h = hist(1.0);
        assert_eq!(h.bucket_count(), 2001);
    }

    #[test]
    fn single_bucket_stream() {
        let mut h = hist(0.99);
        h.update(&[0.0005; 100]).unwrap();
        assert_eq!(h.buckets()[0], 100.0);
        assert!(h.buckets()[1..].iter().all(|&p| p == 0.0));
        assert_eq!(h.overflow(), 0.0);
    }

    #[test]
    fn discount_then_increment() {
        let mut h = hist(0.9);
        h.update(&[0.0005; 100]).unwrap();
        h.update(&[0.0015; 10]).unwrap();
        assert!((h.buckets()[0] - 90.0).abs() < 1e-12);
        assert_eq!(h.buckets()[1], 10.0);
    }

    #[test]
    fn overflow_and_errors() {
        let mut h = hist(1.0);
        h.update(&[2.5, 1.9995]).unwrap();
        assert_eq!(h.overflow(), 1.0);
        assert_eq!(h.update(&[-0.1]), Err(HistogramError::BadResidual(-0.1)));
        assert!(h.update(&[f64::NAN]).is_err());
        assert_eq!(hist(1.0).quantile(0.5), Err(HistogramError::Empty));
        assert!(h.quantile(0.0).is_err());
    }

    #[test]
    fn replay_matches_reference_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut h = hist(0.95);
        let mut reference = vec![0.0f64; 2001];
        for _ in 0..30 {
            let batch: Vec<f64> = (0..rng.gen_range(1..200))
                .map(|_| rng.gen::<f64>() * 2.2)
                .collect();
            h.update(&batch).unwrap();
            for p in reference.iter_mut() {
                *p *= 0.95;
            }
            for r in batch {
                let b = ((r * 1000.0).floor() as usize).min(2000);
                reference[b] += 1.0;
            }
        }
        for (b, &p) in h.buckets().iter().enumerate() {
            assert!((p - reference[b]).abs() < 1e-9);
        }
        assert!((h.overflow() - reference[2000]).abs() < 1e-9);
    }

    #[test]
    fn quantile_examples() {
        let mut h = hist(1.0);
        h.update(&[0.0005; 100]).unwrap();
        assert!((h.quantile(0.5).unwrap() - 0.001).abs() < 1e-12);

        let mut uniform = hist(1.0);
        let values: Vec<f64> = (0..1000).map(|b| (b as f64 + 0.5) * 1e-3).collect();
        uniform.update(&values).unwrap();
        let q = uniform.quantile(0.5).unwrap();
        assert!((q - 0.5).abs() <= 1e-3 + 1e-12, "{q}");
        assert!((q - exact_quantile(&values, 0.5).unwrap()).abs() <= 1e-3);

        let mut two = hist(1.0);
        let mut vals = vec![0.1; 70];
        vals.extend(vec![1.0; 30]);
        two.update(&vals).unwrap();
        let q = two.quantile(0.25).unwrap();
        assert!((q - 1.0).abs() <= 1e-3 + 1e-12, "{q}");
        assert!((exact_quantile(&vals, 0.25).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_quantile_examples() {
        assert_eq!(
            exact_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(),
            3.0
        );
        assert_eq!(exact_quantile(&[5.0], 0.9).unwrap(), 5.0);
        assert_eq!(exact_quantile(&[], 0.5), Err(HistogramError::Empty));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        assert!((exact_quantile(&v, 0.5).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn quantile_tracks_distribution_shift() {
        let discount: f64 = 0.97;
        let mut h = hist(discount);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let old: Vec<f64> = (0..1000).map(|_| 0.5 + 0.5 * rng.gen::<f64>()).collect();
        // Bucket-centred values keep the quantization error at half a bucket,
        // leaving the other half for the decayed old mass.
        let new: Vec<f64> = (0..20_000)
            .map(|_| (rng.gen_range(0..200) as f64 + 0.5) * 1e-3)
            .collect();
        for _ in 0..5 {
            h.update(&old).unwrap();
        }
        let n = ((0.01f64).ln() / discount.ln()).ceil() as usize;
        for _ in 0..n {
            h.update(&new).unwrap();
        }
        for i in 1..10 {
            let tau = i as f64 / 10.0;
            let q = h.quantile(tau).unwrap();
            let e = exact_quantile(&new, tau).unwrap();
            assert!((q - e).abs() <= 1e-3 + 1e-12, "tau={tau}: {q} vs {e}");
        }
    }

    proptest::proptest! {
        #[test]
        fn single_update_within_one_bucket(values in proptest::collection::vec(0.0f64..1.5, 1..400)) {
            let mut h = hist(1.0);
            h.update(&values).unwrap();
            let mut prev = f64::INFINITY;
            for i in 1..10 {
                let tau = i as f64 / 10.0;
                let q = h.quantile(tau).unwrap();
                let e = exact_quantile(&values, tau).unwrap();
                proptest::prop_assert!(q - e <= 1e-3 + 1e-12 && q > e, "tau={} q={} e={}", tau, q, e);
                proptest::prop_assert!(q <= prev);
                prev = q;
            }
        }
    }
}
