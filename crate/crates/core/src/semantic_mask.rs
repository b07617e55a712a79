//! Outlier masks from per-pixel semantic features.
//!
//! Two estimators share the residual mask as their source of supervision:
//!
//! * **cluster vote**: pixels are grouped once by spatially connected
//!   agglomerative clustering ([`agglomerate`]); every training step a cluster
//!   is kept when more than half of its pixels pass the residual filter
//!   ([`cluster_vote`]).
//! * **classifier**: a small dense network maps features to an inlier
//!   probability and is trained online with hinge losses against a permissive
//!   and a strict residual label ([`make_labels`], [`mlp_step`]).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::image::{InlierMask, Plane};
use crate::residual_stats::{HistogramError, ResidualHistogram};
use crate::robust_mask::{robust_filter, MaskConfig};
use crate::smallnet::{DenseNet, NetError, NetOptimizer};

/// Permissive and strict trim levels used for classifier labels.
pub const LABEL_TAU_PERMISSIVE: f64 = 0.5;
pub const LABEL_TAU_STRICT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("feature map is {fw}x{fh}, mask is {mw}x{mh}")]
    DimMismatch {
        fw: usize,
        fh: usize,
        mw: usize,
        mh: usize,
    },
    #[error("cluster target {target} outside [1, {pixels}]")]
    BadTarget { target: usize, pixels: usize },
    #[error("strict labels are not a subset of permissive labels")]
    LabelOrder,
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-pixel feature vectors stored as a `pixels × channels` matrix in raster
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, data: Array2<f64>) -> Self {
        assert_eq!(
            data.nrows(),
            width * height,
            "feature rows must equal pixel count"
        );
        Self {
            width,
            height,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixel(&self, x: usize, y: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(y * self.width + x)
    }

    /// Appends the channels of `other` (same dimensions) to every pixel.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let data = ndarray::concatenate(Axis(1), &[self.data.view(), other.data.view()])
            .expect("row counts match");
        FeatureMap::new(self.width, self.height, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel cluster labels in `0..count`, numbered in raster order of first
/// appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl ClusterMap {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

fn neighbors8(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .filter_map(move |(dx, dy)| {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                .then_some((nx as usize, ny as usize))
        })
}

#[derive(Debug, Clone, Copy)]
struct MergeCandidate {
    cost: f64,
    a: usize,
    b: usize,
    version_a: u32,
    version_b: u32,
}

impl PartialEq for MergeCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for MergeCandidate {}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MergeCandidate {
    // Reversed so the max-heap pops the cheapest merge, ties to lower ids.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

struct Cluster {
    size: f64,
    sum: Vec<f64>,
    neighbors: HashSet<usize>,
    version: u32,
    alive: bool,
}

fn ward_cost(a: &Cluster, b: &Cluster) -> f64 {
    let dist2: f64 = a
        .sum
        .iter()
        .zip(&b.sum)
        .map(|(sa, sb)| {
            let d = sa / a.size - sb / b.size;
            d * d
        })
        .sum();
    a.size * b.size / (a.size + b.size) * dist2
}

/// Greedy spatially constrained agglomerative clustering.
///
/// Starts from singleton pixels connected to their 8 neighbours and repeatedly
/// merges the adjacent pair with the smallest increase in within-cluster
/// squared deviation (Ward linkage) until `target` clusters remain.
pub fn agglomerate(features: &FeatureMap, target: usize) -> Result<ClusterMap, SemanticError> {
    let (w, h) = (features.width, features.height);
    let n = w * h;
    if target < 1 || target > n {
        return Err(SemanticError::BadTarget { target, pixels: n });
    }
    let mut clusters: Vec<Cluster> = (0..n)
        .map(|p| Cluster {
            size: 1.0,
            sum: features.data.row(p).to_vec(),
            neighbors: neighbors8(p % w, p / w, w, h)
                .map(|(x, y)| y * w + x)
                .collect(),
            version: 0,
            alive: true,
        })
        .collect();
    let mut heap = BinaryHeap::new();
    for a in 0..n {
        for &b in &clusters[a].neighbors {
            if a < b {
                heap.push(MergeCandidate {
                    cost: ward_cost(&clusters[a], &clusters[b]),
                    a,
                    b,
                    version_a: 0,
                    version_b: 0,
                });
            }
        }
    }
    // Union-find parents so pixels can be resolved to their final cluster.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut remaining = n;
    while remaining > target {
        let Some(cand) = heap.pop() else { break };
        let (a, b) = (cand.a, cand.b);
        if !clusters[a].alive
            || !clusters[b].alive
            || clusters[a].version != cand.version_a
            || clusters[b].version != cand.version_b
        {
            continue;
        }
        // Absorb the smaller neighbour set into the larger one.
        let (keep, gone) = if clusters[a].neighbors.len() >= clusters[b].neighbors.len() {
            (a, b)
        } else {
            (b, a)
        };
        let gone_cluster = std::mem::replace(
            &mut clusters[gone],
            Cluster {
                size: 0.0,
                sum: Vec::new(),
                neighbors: HashSet::new(),
                version: 0,
                alive: false,
            },
        );
        parent[gone] = keep;
        for &c in &gone_cluster.neighbors {
            if c == keep {
                continue;
            }
            clusters[c].neighbors.remove(&gone);
            clusters[c].neighbors.insert(keep);
            clusters[keep].neighbors.insert(c);
        }
        let merged = &mut clusters[keep];
        merged.neighbors.remove(&gone);
        merged.size += gone_cluster.size;
        for (s, g) in merged.sum.iter_mut().zip(&gone_cluster.sum) {
            *s += g;
        }
        merged.version += 1;
        remaining -= 1;

        let mut nbrs: Vec<usize> = clusters[keep].neighbors.iter().copied().collect();
        nbrs.sort_unstable();
        for c in nbrs {
            let (lo, hi) = (keep.min(c), keep.max(c));
            heap.push(MergeCandidate {
                cost: ward_cost(&clusters[lo], &clusters[hi]),
                a: lo,
                b: hi,
                version_a: clusters[lo].version,
                version_b: clusters[hi].version,
            });
        }
    }

    fn find(parent: &mut [usize], mut p: usize) -> usize {
        while parent[p] != p {
            parent[p] = parent[parent[p]];
            p = parent[p];
        }
        p
    }
    let mut relabel = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut count = 0u32;
    for p in 0..n {
        let root = find(&mut parent, p);
        if relabel[root] == u32::MAX {
            relabel[root] = count;
            count += 1;
        }
        labels.push(relabel[root]);
    }
    Ok(ClusterMap {
        width: w,
        height: h,
        labels,
        count: count as usize,
    })
}

/// Per-cluster inlier probability `P(c) = Σ_{p∈c} Λ(p) / |c|`.
pub fn cluster_inlier_probability(clusters: &ClusterMap, pixel_mask: &InlierMask) -> Vec<f64> {
    let mut num = vec![0.0; clusters.count];
    let mut den = vec![0.0; clusters.count];
    for (&l, &m) in clusters.labels.iter().zip(&pixel_mask.values) {
        num[l as usize] += m;
        den[l as usize] += 1.0;
    }
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

/// Marks every pixel of a cluster as inlier iff `P(cluster) > 0.5`.
pub fn cluster_vote(
    clusters: &ClusterMap,
    pixel_mask: &InlierMask,
) -> Result<InlierMask, SemanticError> {
    if (clusters.width, clusters.height) != (pixel_mask.width, pixel_mask.height) {
        return Err(SemanticError::DimMismatch {
            fw: clusters.width,
            fh: clusters.height,
            mw: pixel_mask.width,
            mh: pixel_mask.height,
        });
    }
    let p = cluster_inlier_probability(clusters, pixel_mask);
    Ok(InlierMask::from_bools(
        clusters.width,
        clusters.height,
        clusters.labels.iter().map(|&l| p[l as usize] > 0.5),
    ))
}

/// Self-supervision labels: `U` (permissive, τ = 0.5) and `L` (strict,
/// τ = 0.9), with `L ← L ∧ U` so that `L ⊆ U` always holds.
pub fn make_labels(
    residuals: &Plane,
    hist: &ResidualHistogram,
    cfg: &MaskConfig,
) -> Result<(InlierMask, InlierMask), SemanticError> {
    let upper = robust_filter(
        residuals,
        hist,
        &MaskConfig {
            tau: LABEL_TAU_PERMISSIVE,
            ..*cfg
        },
    )?;
    let lower = robust_filter(
        residuals,
        hist,
        &MaskConfig {
            tau: LABEL_TAU_STRICT,
            ..*cfg
        },
    )?;
    let lower = lower.intersect(&upper);
    Ok((upper, lower))
}

fn check_dims(features: &FeatureMap, mask: &InlierMask) -> Result<(), SemanticError> {
    if (features.width, features.height) != (mask.width, mask.height) {
        return Err(SemanticError::DimMismatch {
            fw: features.width,
            fh: features.height,
            mw: mask.width,
            mh: mask.height,
        });
    }
    Ok(())
}

fn probabilities(classifier: &DenseNet, features: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
    let out = classifier.forward_batch(features)?;
    Ok(out.column(0).to_vec())
}

/// Per-pixel inlier probabilities `H(F; θ)` as a soft mask.
pub fn mlp_mask(classifier: &DenseNet, features: &FeatureMap) -> Result<InlierMask, SemanticError> {
    let p = probabilities(classifier, features.data.view())?;
    Ok(InlierMask::new(features.width, features.height, p))
}

/// `mean_p [max(U − H, 0) + max(H − L, 0)]`.
pub fn hinge_loss(h: &[f64], upper: &InlierMask, lower: &InlierMask) -> f64 {
    let n = h.len() as f64;
    h.iter()
        .zip(&upper.values)
        .zip(&lower.values)
        .map(|((&hv, &u), &l)| (u - hv).max(0.0) + (hv - l).max(0.0))
        .sum::<f64>()
        / n
}

/// Result of one classifier update.
#[derive(Debug, Clone)]
pub struct MlpStep {
    /// Objective evaluated before the update.
    pub loss: f64,
    /// Inlier probabilities before the update.
    pub mask: InlierMask,
}

/// One optimizer step on `hinge_loss + λ·lipschitz_penalty` over every pixel.
///
/// Pixels with `U = 1, L = 0` contribute exactly zero gradient because the
/// two hinge terms cancel.
pub fn mlp_step(
    classifier: &mut DenseNet,
    optimizer: &mut NetOptimizer,
    features: &FeatureMap,
    upper: &InlierMask,
    lower: &InlierMask,
    lambda: f64,
) -> Result<MlpStep, SemanticError> {
    check_labels(features, upper, lower)?;
    let (loss, h) = step_on(
        classifier,
        optimizer,
        features.data.to_owned(),
        &upper.values,
        &lower.values,
        lambda,
    )?;
    Ok(MlpStep {
        loss,
        mask: InlierMask::new(features.width, features.height, h),
    })
}

/// [`mlp_step`] restricted to the pixel indices in `rows`; returns the
/// pre-update objective on that subset.
pub fn mlp_step_rows(
    classifier: &mut DenseNet,
    optimizer: &mut NetOptimizer,
    features: &FeatureMap,
    upper: &InlierMask,
    lower: &InlierMask,
    lambda: f64,
    rows: &[usize],
) -> Result<f64, SemanticError> {
    check_labels(features, upper, lower)?;
    let x = features.data.select(Axis(0), rows);
    let u: Vec<f64> = rows.iter().map(|&p| upper.values[p]).collect();
    let l: Vec<f64> = rows.iter().map(|&p| lower.values[p]).collect();
    Ok(step_on(classifier, optimizer, x, &u, &l, lambda)?.0)
}

fn check_labels(
    features: &FeatureMap,
    upper: &InlierMask,
    lower: &InlierMask,
) -> Result<(), SemanticError> {
    check_dims(features, upper)?;
    check_dims(features, lower)?;
    if !lower.is_subset_of(upper) {
        return Err(SemanticError::LabelOrder);
    }
    Ok(())
}

fn step_on(
    classifier: &mut DenseNet,
    optimizer: &mut NetOptimizer,
    x: Array2<f64>,
    upper: &[f64],
    lower: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>), SemanticError> {
    let n = x.nrows();
    let cache = classifier.forward_cached(x)?;
    let h = cache.output.column(0).to_vec();
    let mut grad_out = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for (p, g) in grad_out.column_mut(0).iter_mut().enumerate() {
        let (hv, u, l) = (h[p], upper[p], lower[p]);
        loss += (u - hv).max(0.0) + (hv - l).max(0.0);
        let mut d = 0.0;
        if u > hv {
            d -= 1.0;
        }
        if hv > l {
            d += 1.0;
        }
        *g = d / n as f64;
    }
    loss /= n as f64;
    if classifier.lipschitz {
        loss += lambda * classifier.lipschitz_penalty();
    }
    let grads = classifier.param_backward(&cache, grad_out.view())?;
    let mut flat = grads.flatten();
    if lambda != 0.0 && classifier.lipschitz {
        add_penalty_grad(classifier, &mut flat, lambda);
    }
    optimizer.step(classifier, &flat)?;
    Ok((loss, h))
}

fn add_penalty_grad(net: &DenseNet, flat: &mut [f64], lambda: f64) {
    let pg = net.lipschitz_penalty_grad();
    let mut offset = 0;
    for (l, g) in net.layers.iter().zip(pg) {
        offset += l.weights.len() + l.bias.len();
        flat[offset] += lambda * g;
        offset += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual_stats::HistogramConfig;
    use crate::smallnet::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(
        w: usize,
        h: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> FeatureMap {
        FeatureMap::new(
            w,
            h,
            Array2::from_shape_fn((w * h, c), |(p, k)| f(p % w, p / w, k)),
        )
    }

    fn is_connected8(map: &ClusterMap, label: u32) -> bool {
        let (w, h) = (map.width, map.height);
        let pixels: Vec<usize> = (0..w * h).filter(|&p| map.labels[p] == label).collect();
        let Some(&start) = pixels.first() else {
            return false;
        };
        let mut seen = vec![false; w * h];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0;
        while let Some(p) = stack.pop() {
            reached += 1;
            for (x, y) in neighbors8(p % w, p / w, w, h) {
                let q = y * w + x;
                if !seen[q] && map.labels[q] == label {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        reached == pixels.len()
    }

    fn sse(features: &FeatureMap, labels: &[u32], k: usize) -> f64 {
        let c = features.channels();
        let mut sum = vec![vec![0.0; c]; k];
        let mut cnt = vec![0.0; k];
        for (p, &l) in labels.iter().enumerate() {
            cnt[l as usize] += 1.0;
            for j in 0..c {
                sum[l as usize][j] += features.data[[p, j]];
            }
        }
        labels
            .iter()
            .enumerate()
            .map(|(p, &l)| {
                (0..c)
                    .map(|j| (features.data[[p, j]] - sum[l as usize][j] / cnt[l as usize]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn two_by_two_columns_match_exhaustive_partition() {
        let f = fmap(2, 2, 2, |x, _, _| if x == 0 { 0.0 } else { 10.0 });
        let map = agglomerate(&f, 2).unwrap();
        // Every 2-labelling of four pixels is 8-connected on a 2×2 grid.
        let mut best = (f64::INFINITY, vec![]);
        for code in 1u32..15 {
            let labels: Vec<u32> = (0..4).map(|p| (code >> p) & 1).collect();
            let e = sse(&f, &labels, 2);
            if e < best.0 {
                best = (e, labels);
            }
        }
        let same =
            |a: &[u32], b: &[u32]| (0..4).all(|i| (0..4).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
        assert!(same(&map.labels, &best.1));
        assert_eq!(map.label(0, 0), map.label(0, 1));
        assert_ne!(map.label(0, 0), map.label(1, 0));
    }

    #[test]
    fn trivial_targets() {
        let f = fmap(5, 4, 3, |_, _, _| 0.25);
        let one = agglomerate(&f, 1).unwrap();
        assert_eq!(one.count, 1);
        assert!(one.labels.iter().all(|&l| l == 0));
        let all = agglomerate(&f, 20).unwrap();
        assert_eq!(all.count, 20);
        assert_eq!(all.labels, (0..20).collect::<Vec<u32>>());
        assert!(agglomerate(&f, 0).is_err());
        assert!(agglomerate(&f, 21).is_err());
    }

    #[test]
    fn clusters_are_connected_and_non_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(3..12), rng.gen_range(3..12));
            let f = fmap(w, h, 2, |_, _, _| rng.gen());
            let target = rng.gen_range(1..w * h);
            let map = agglomerate(&f, target).unwrap();
            assert_eq!(map.count, target);
            assert!(map.sizes().iter().all(|&s| s > 0));
            for l in 0..map.count as u32 {
                assert!(is_connected8(&map, l));
            }
        }
    }

    #[test]
    fn disconnected_equal_features_stay_apart() {
        // Two identical blobs separated by a distinct column must not merge
        // before the separator is absorbed.
        let f = fmap(5, 3, 1, |x, _, _| if x == 2 { 100.0 } else { 0.0 });
        let map = agglomerate(&f, 3).unwrap();
        assert_ne!(map.label(0, 0), map.label(4, 0));
        assert_eq!(map.label(0, 0), map.label(1, 2));
        assert_eq!(map.label(3, 0), map.label(4, 2));
    }

    #[test]
    fn vote_examples() {
        let clusters = ClusterMap {
            width: 4,
            height: 2,
            labels: vec![0, 0, 1, 1, 0, 0, 1, 1],
            count: 2,
        };
        let mask = InlierMask::new(4, 2, vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let out = cluster_vote(&clusters, &mask).unwrap();
        // Cluster 0 has 3/4 inliers, cluster 1 exactly 2/4.
        assert_eq!(out.values, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(cluster_vote(&clusters, &InlierMask::ones(3, 3)).is_err());
    }

    #[test]
    fn vote_recovers_disk_despite_mistrimmed_pixels() {
        let (w, h) = (32, 32);
        let in_disk = |x: usize, y: usize| {
            let (dx, dy) = (x as f64 - 15.5, y as f64 - 12.5);
            dx * dx + dy * dy < 64.0
        };
        let labels: Vec<u32> = (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                if in_disk(x, y) {
                    0
                } else if x < 16 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let mut relabel = std::collections::BTreeMap::new();
        let labels: Vec<u32> = labels
            .iter()
            .map(|l| {
                let n = relabel.len() as u32;
                *relabel.entry(*l).or_insert(n)
            })
            .collect();
        let clusters = ClusterMap {
            width: w,
            height: h,
            labels,
            count: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let disk_pixels: Vec<usize> = (0..w * h).filter(|&p| in_disk(p % w, p / w)).collect();
        let mut mask = InlierMask::from_bools(w, h, (0..w * h).map(|p| !in_disk(p % w, p / w)));
        let flips = (disk_pixels.len() as f64 * 0.3).round() as usize;
        let mut order = disk_pixels.clone();
        for i in 0..flips {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
            mask.values[order[i]] = 1.0;
        }
        let out = cluster_vote(&clusters, &mask).unwrap();
        // Brute-force oracle: recount each cluster directly.
        for p in 0..w * h {
            let l = clusters.labels[p];
            let members: Vec<usize> = (0..w * h).filter(|&q| clusters.labels[q] == l).collect();
            let inl = members.iter().filter(|&&q| mask.values[q] == 1.0).count();
            let expect = 2 * inl > members.len();
            assert_eq!(out.is_inlier(p % w, p / w), expect);
            assert_eq!(out.is_inlier(p % w, p / w), !in_disk(p % w, p / w));
        }
    }

    #[test]
    fn vote_constant_within_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = fmap(10, 10, 2, |_, _, _| rng.gen());
        let map = agglomerate(&f, 7).unwrap();
        let mask = InlierMask::from_bools(10, 10, (0..100).map(|_| rng.gen_bool(0.6)));
        let out = cluster_vote(&map, &mask).unwrap();
        for p in 0..100 {
            for q in 0..100 {
                if map.labels[p] == map.labels[q] {
                    assert_eq!(out.values[p], out.values[q]);
                }
            }
        }
    }

    fn hist_of(residuals: &Plane) -> ResidualHistogram {
        let mut h = ResidualHistogram::new(HistogramConfig {
            discount: 1.0,
            ..Default::default()
        })
        .unwrap();
        h.update_plane(residuals).unwrap();
        h
    }

    #[test]
    fn labels_constant_and_bimodal() {
        let cfg = MaskConfig::default();
        let flat = Plane::filled(16, 16, 0.05);
        let (u, l) = make_labels(&flat, &hist_of(&flat), &cfg).unwrap();
        assert_eq!(u, InlierMask::ones(16, 16));
        assert_eq!(l, InlierMask::ones(16, 16));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = Plane::from_fn(32, 32, |_, _| {
                if rng.gen_bool(0.7) {
                    rng.gen_range(0.0..0.05)
                } else {
                    rng.gen_range(0.5..0.9)
                }
            });
            let bare = MaskConfig {
                smooth: false,
                patch: false,
                ..cfg
            };
            let (u, l) = make_labels(&r, &hist_of(&r), &bare).unwrap();
            assert!(l.is_subset_of(&u));
            assert!(u.inlier_fraction() >= 0.5);
            let (u, l) = make_labels(&r, &hist_of(&r), &cfg).unwrap();
            assert!(l.is_subset_of(&u));
        }
    }

    fn classifier(inputs: usize, seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseNet::new(
            &[inputs, 16, 16, 1],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            true,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut net = classifier(3, 1);
        net.zero_last_layer();
        let f = fmap(4, 4, 3, |x, y, k| (x + y + k) as f64);
        let m = mlp_mask(&net, &f).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_features_identical_probabilities() {
        let net = classifier(2, 4);
        let f = fmap(6, 1, 2, |x, _, k| {
            if x == 1 || x == 4 {
                0.3
            } else {
                (x * 3 + k) as f64
            }
        });
        let m = mlp_mask(&net, &f).unwrap();
        assert_eq!(m.values[1], m.values[4]);
    }

    #[test]
    fn all_inlier_labels_drive_loss_down() {
        let mut net = classifier(2, 6);
        net.zero_last_layer();
        let mut opt = NetOptimizer::new(&net, 1e-3);
        let f = fmap(8, 8, 2, |x, y, _| (x as f64 - y as f64) / 8.0);
        let ones = InlierMask::ones(8, 8);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let step = mlp_step(&mut net, &mut opt, &f, &ones, &ones, 0.0).unwrap();
            assert!(step.loss < prev);
            prev = step.loss;
        }
    }

    #[test]
    fn row_step_over_all_pixels_matches_full_step() {
        let f = fmap(6, 5, 3, |x, y, k| ((x * 5 + y * 3 + k) % 7) as f64 / 7.0);
        let upper = InlierMask::new(6, 5, (0..30).map(|p| (p % 4 != 0) as u8 as f64).collect());
        let lower = InlierMask::new(6, 5, (0..30).map(|p| (p % 4 == 1) as u8 as f64).collect());
        let mut a = classifier(3, 11);
        let mut b = a.clone();
        let (mut oa, mut ob) = (NetOptimizer::new(&a, 1e-2), NetOptimizer::new(&b, 1e-2));
        let rows: Vec<usize> = (0..30).collect();
        for _ in 0..3 {
            let full = mlp_step(&mut a, &mut oa, &f, &upper, &lower, 0.5).unwrap();
            let part = mlp_step_rows(&mut b, &mut ob, &f, &upper, &lower, 0.5, &rows).unwrap();
            assert_eq!(full.loss, part);
        }
        assert_eq!(a, b);
        let before = b.clone();
        mlp_step_rows(&mut b, &mut ob, &f, &upper, &lower, 0.5, &[3]).unwrap();
        assert_ne!(before, b);
    }

    #[test]
    fn ambiguous_band_gets_no_supervision() {
        let net = classifier(2, 7);
        let f = fmap(5, 5, 2, |x, y, k| (x * 2 + y + k) as f64 * 0.1);
        let cache = net.forward_cached(f.data.clone()).unwrap();
        // U = 1, L = 0: hinge derivatives −1 and +1 cancel.
        let grad = Array2::from_elem((25, 1), -1.0 / 25.0 + 1.0 / 25.0);
        let g = net.backward(&cache, grad.view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        let mut trained = net.clone();
        let mut opt = NetOptimizer::new(&trained, 1e-2);
        let before = mlp_mask(&trained, &f).unwrap();
        for _ in 0..5 {
            mlp_step(
                &mut trained,
                &mut opt,
                &f,
                &InlierMask::ones(5, 5),
                &InlierMask::zeros(5, 5),
                0.0,
            )
            .unwrap();
        }
        assert_eq!(mlp_mask(&trained, &f).unwrap(), before);
    }

    #[test]
    fn single_outlier_pixel_loss() {
        let net = DenseNet {
            layers: vec![crate::smallnet::DenseLayer {
                weights: Array2::zeros((1, 1)),
                bias: ndarray::arr1(&[(0.9f64 / 0.1).ln()]),
                lipschitz_c: 0.0,
                activation: Activation::Sigmoid,
            }],
            lipschitz: false,
        };
        let f = fmap(1, 1, 1, |_, _, _| 0.0);
        let h = mlp_mask(&net, &f).unwrap().values;
        let zeros = InlierMask::zeros(1, 1);
        assert!((hinge_loss(&h, &zeros, &zeros) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn label_order_is_checked() {
        let mut net = classifier(1, 1);
        let mut opt = NetOptimizer::new(&net, 1e-3);
        let f = fmap(2, 1, 1, |_, _, _| 0.0);
        let err = mlp_step(
            &mut net,
            &mut opt,
            &f,
            &InlierMask::zeros(2, 1),
            &InlierMask::ones(2, 1),
            0.5,
        );
        assert!(matches!(err, Err(SemanticError::LabelOrder)));
    }
}
