//! The robust fitting loop.
//!
//! Each step visits one view (round robin), renders it, measures per-pixel
//! residuals, derives an inlier mask according to [`MaskMode`], blends it with
//! an all-inlier mask through the warm-up schedule, and takes one optimizer
//! step on the masked reconstruction loss. Utilization-based pruning runs
//! inside a configurable step window.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{positional_encoding, SceneDataset};
use crate::image::{ColorImage, InlierMask, Plane};
use crate::kernels::{KernelError, RobustKernel};
use crate::optim::Adam;
use crate::residual_stats::{HistogramConfig, HistogramError, ResidualHistogram};
use crate::robust_mask::{bernoulli_mask, filter_at, robust_filter, schedule_alpha, MaskConfig};
use crate::semantic_mask::{
    agglomerate, cluster_vote, make_labels, mlp_mask, mlp_step, mlp_step_rows, ClusterMap,
    FeatureMap, SemanticError,
};
use crate::smallnet::{Activation, DenseNet, NetOptimizer};
use crate::splat2d::{
    accumulate_utilization, prune, render, render_backward, Appearance, Glo, SplatError,
    SplatModel, UtilizationTracker, SPLAT_PARAMS,
};

const CLASSIFIER_BATCH_SEED: u64 = 0xc1a5_5b47;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("non-finite {what} at step {step} (view {view})")]
    Divergence {
        step: u64,
        view: usize,
        what: &'static str,
    },
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Trim,
    RobustFilter,
    SlsAgg,
    SlsMlp,
}

impl MaskMode {
    pub const ALL: [MaskMode; 5] = [
        MaskMode::None,
        MaskMode::Trim,
        MaskMode::RobustFilter,
        MaskMode::SlsAgg,
        MaskMode::SlsMlp,
    ];
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "trim" => Ok(Self::Trim),
            "robust_filter" => Ok(Self::RobustFilter),
            "sls_agg" => Ok(Self::SlsAgg),
            "sls_mlp" => Ok(Self::SlsMlp),
            other => Err(format!(
                "unknown mask mode `{other}` (expected none, trim, robust_filter, sls_agg or sls_mlp)"
            )),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Trim => "trim",
            Self::RobustFilter => "robust_filter",
            Self::SlsAgg => "sls_agg",
            Self::SlsMlp => "sls_mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UbpConfig {
    pub enabled: bool,
    pub start: u64,
    pub stop: u64,
    pub period: usize,
    pub kappa: f64,
}

impl Default for UbpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            start: 500,
            stop: 1500,
            period: 100,
            kappa: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlsConfig {
    pub clusters: usize,
    pub lambda: f64,
    pub pe_degree: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Pixels sampled per classifier update; 0 uses the whole image.
    pub batch: usize,
}

impl Default for SlsConfig {
    fn default() -> Self {
        Self {
            clusters: 100,
            lambda: 0.5,
            pe_degree: 8,
            hidden: vec![64, 64],
            lr: 1e-3,
            batch: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub means: f64,
    pub scales: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub glo: f64,
    /// Multiplier reached by every rate at the last step; rates decay
    /// exponentially towards it.
    pub decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 2e-3,
            scales: 5e-3,
            rotation: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            glo: 1e-3,
            decay: 0.1,
        }
    }
}

impl LearningRates {
    /// Rates in effect at `step` of a `steps`-long run.
    pub fn at(&self, step: u64, steps: u64) -> Self {
        let t = step as f64 / steps.saturating_sub(1).max(1) as f64;
        let f = self.decay.powf(t.min(1.0));
        Self {
            means: self.means * f,
            scales: self.scales * f,
            rotation: self.rotation * f,
            opacity: self.opacity * f,
            color: self.color * f,
            glo: self.glo * f,
            decay: self.decay,
        }
    }

    /// Per-parameter rates in [`crate::splat2d::Splat::params`] order.
    fn splat_pattern(&self) -> [f64; SPLAT_PARAMS] {
        [
            self.means,
            self.means,
            self.scales,
            self.scales,
            self.rotation,
            self.opacity,
            self.color,
            self.color,
            self.color,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub splats: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub mode: MaskMode,
    pub mask: MaskConfig,
    pub hist: HistogramConfig,
    pub kernel: RobustKernel,
    pub sls: SlsConfig,
    pub ubp: UbpConfig,
    pub glo_enabled: bool,
    pub glo_dim: usize,
    pub lr: LearningRates,
    /// Compute the mask from the histogram before adding this step's residuals.
    pub mask_before_hist: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            splats: 1500,
            eval_every: 500,
            seed: 0,
            mode: MaskMode::RobustFilter,
            mask: MaskConfig::default(),
            hist: HistogramConfig::default(),
            kernel: RobustKernel::l1(),
            sls: SlsConfig::default(),
            ubp: UbpConfig::default(),
            glo_enabled: true,
            glo_dim: 8,
            lr: LearningRates::default(),
            mask_before_hist: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return bad("trainer.steps must be at least 1".into());
        }
        if self.splats == 0 {
            return bad("trainer.splats must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("trainer.eval_every must be at least 1".into());
        }
        if self.ubp.stop < self.ubp.start {
            return bad(format!(
                "ubp.stop ({}) must not precede ubp.start ({})",
                self.ubp.stop, self.ubp.start
            ));
        }
        if self.ubp.period == 0 {
            return bad("ubp.period must be at least 1".into());
        }
        if self.sls.clusters == 0 || self.sls.pe_degree == 0 || self.sls.hidden.is_empty() {
            return bad("sls.clusters, sls.pe_degree and sls.hidden must be non-empty".into());
        }
        if !(self.lr.decay > 0.0 && self.lr.decay <= 1.0) {
            return bad(format!(
                "lr.decay must lie in (0, 1], got {}",
                self.lr.decay
            ));
        }
        if self.glo_enabled && self.glo_dim == 0 {
            return bad("glo.dim must be at least 1".into());
        }
        self.mask.validate().map_err(TrainError::Config)?;
        RobustKernel::new(self.kernel.kind, self.kernel.scale)?;
        ResidualHistogram::new(self.hist)?;
        Ok(())
    }
}

/// `Σ_p Λ_p · mean_c κ(Î − I) / Σ_p Λ_p` and its gradient image.
pub fn masked_loss(
    rendered: &ColorImage,
    target: &ColorImage,
    mask: &InlierMask,
    kernel: &RobustKernel,
) -> Result<(f64, ColorImage), TrainError> {
    if !rendered.same_dims(target) || (mask.width, mask.height) != (target.width, target.height) {
        return Err(TrainError::Data(
            "loss inputs have different dimensions".into(),
        ));
    }
    let total: f64 = mask.values.iter().sum();
    let mut grad = ColorImage::filled(target.width, target.height, [0.0; 3]);
    if total <= 0.0 {
        warn!("empty inlier mask; loss and gradient are zero");
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for p in 0..target.len() {
        let m = mask.values[p];
        if m == 0.0 {
            continue;
        }
        let (r, t) = (rendered.data[p], target.data[p]);
        let mut acc = 0.0;
        for k in 0..3 {
            let d = r[k] - t[k];
            acc += kernel.value(d)?;
            grad.data[p][k] = m * kernel.derivative(d)? / (3.0 * total);
        }
        loss += m * acc / 3.0;
    }
    Ok((loss / total, grad))
}

/// [`masked_loss`] with the L1 kernel.
pub fn masked_l1(
    rendered: &ColorImage,
    target: &ColorImage,
    mask: &InlierMask,
) -> Result<(f64, ColorImage), TrainError> {
    masked_loss(rendered, target, mask, &RobustKernel::l1())
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ColorImage, b: &ColorImage) -> f64 {
    assert!(a.same_dims(b));
    let mut se = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        for k in 0..3 {
            se += (x[k] - y[k]).powi(2);
        }
    }
    let mse = se / (3 * a.len()) as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// `|pred ∩ gt| / |pred ∪ gt|` over boolean sets; two empty sets give 1.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub psnr: f64,
    pub loss: f64,
    pub iou: f64,
    pub splats: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,psnr,loss,iou,splats,alpha";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format_row(r));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

pub fn format_row(r: &LogRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step, r.psnr, r.loss, r.iou, r.splats, r.alpha
    )
}

/// Everything needed to evaluate or resume evaluation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SplatModel,
    pub hist: ResidualHistogram,
    pub classifier: Option<DenseNet>,
    /// Number of completed optimizer steps.
    pub step: u64,
}

/// Data derived once per dataset: cluster maps and positional channels.
#[derive(Debug, Clone)]
pub struct Context {
    pub clusters: Option<Vec<ClusterMap>>,
    pub encoding: Option<FeatureMap>,
}

impl Context {
    pub fn new(cfg: &TrainConfig, data: &SceneDataset) -> Result<Self, TrainError> {
        let clusters = if cfg.mode == MaskMode::SlsAgg {
            let target = cfg.sls.clusters.min(data.width() * data.height());
            Some(
                data.views
                    .iter()
                    .map(|v| agglomerate(&v.features, target))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        let encoding = (cfg.mode == MaskMode::SlsMlp)
            .then(|| positional_encoding(data.width(), data.height(), cfg.sls.pe_degree));
        Ok(Self { clusters, encoding })
    }

    fn classifier_input(&self, data: &SceneDataset, view: usize) -> FeatureMap {
        let f = &data.views[view].features;
        match &self.encoding {
            Some(pe) => f.concat(pe),
            None => f.clone(),
        }
    }
}

fn check_dataset(data: &SceneDataset) -> Result<(), TrainError> {
    if data.views.is_empty() {
        return Err(TrainError::Data("dataset has no views".into()));
    }
    let (w, h) = (data.width(), data.height());
    for v in &data.views {
        let dims = [
            (v.image.width, v.image.height),
            (v.clean.width, v.clean.height),
            (v.gt_inliers.width, v.gt_inliers.height),
            (v.features.width, v.features.height),
        ];
        if dims.iter().any(|&d| d != (w, h)) {
            return Err(TrainError::Data(format!(
                "view {} has inconsistent dimensions",
                v.id
            )));
        }
        if !v.features.is_finite() {
            return Err(TrainError::Data(format!(
                "view {} has non-finite features",
                v.id
            )));
        }
    }
    let c = data.views[0].features.channels();
    if data.views.iter().any(|v| v.features.channels() != c) {
        return Err(TrainError::Data(
            "feature channel counts differ between views".into(),
        ));
    }
    Ok(())
}

fn appearance(state: &TrainState, view: usize) -> Appearance {
    if state.model.glo.is_some() {
        Appearance::View(view)
    } else {
        Appearance::Identity
    }
}

/// Deterministic mask `Λ*` for a view given current residuals, without
/// touching any state.
fn predicted_mask(
    cfg: &TrainConfig,
    state: &TrainState,
    ctx: &Context,
    data: &SceneDataset,
    view: usize,
    residuals: &Plane,
) -> Result<InlierMask, TrainError> {
    let (w, h) = (residuals.width, residuals.height);
    if cfg.mode == MaskMode::None {
        return Ok(InlierMask::ones(w, h));
    }
    if cfg.mode == MaskMode::SlsMlp {
        let clf = state
            .classifier
            .as_ref()
            .expect("classifier present in sls_mlp mode");
        return Ok(mlp_mask(clf, &ctx.classifier_input(data, view))?);
    }
    if state.hist.is_empty() {
        return Ok(InlierMask::ones(w, h));
    }
    Ok(match cfg.mode {
        MaskMode::Trim => {
            let rho = state.hist.quantile(cfg.mask.tau)?;
            filter_at(
                residuals,
                rho,
                &MaskConfig {
                    smooth: false,
                    patch: false,
                    ..cfg.mask
                },
            )
        }
        MaskMode::RobustFilter => robust_filter(residuals, &state.hist, &cfg.mask)?,
        MaskMode::SlsAgg => {
            let base = robust_filter(residuals, &state.hist, &cfg.mask)?;
            let clusters = ctx
                .clusters
                .as_ref()
                .expect("clusters present in sls_agg mode");
            cluster_vote(&clusters[view], &base)?
        }
        MaskMode::None | MaskMode::SlsMlp => unreachable!(),
    })
}

/// Metrics of a state over all views of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub row: LogRow,
    /// PSNR of the identity-appearance render against the base image.
    pub psnr_identity: f64,
    pub per_view_psnr: Vec<f64>,
    pub per_view_iou: Vec<f64>,
}

pub fn evaluate(
    cfg: &TrainConfig,
    state: &TrainState,
    ctx: &Context,
    data: &SceneDataset,
) -> Result<EvalRecord, TrainError> {
    let (w, h) = (data.width(), data.height());
    let mut per_view_psnr = Vec::with_capacity(data.views.len());
    let mut per_view_iou = Vec::with_capacity(data.views.len());
    let mut loss_sum = 0.0;
    for (i, v) in data.views.iter().enumerate() {
        let (img, _) = render(&state.model, appearance(state, i), w, h)?;
        per_view_psnr.push(psnr(&img, &v.clean));
        let residuals = img.mean_abs_residual(&v.image);
        let mask = predicted_mask(cfg, state, ctx, data, i, &residuals)?;
        loss_sum += masked_loss(&img, &v.image, &mask, &cfg.kernel)?.0;
        per_view_iou.push(mask_iou(&mask.outliers(), &v.gt_inliers.outliers()));
    }
    let n = data.views.len() as f64;
    let (identity, _) = render(&state.model, Appearance::Identity, w, h)?;
    Ok(EvalRecord {
        row: LogRow {
            step: state.step,
            psnr: per_view_psnr.iter().sum::<f64>() / n,
            loss: loss_sum / n,
            iou: per_view_iou.iter().sum::<f64>() / n,
            splats: state.model.len(),
            alpha: schedule_alpha(state.step, &cfg.mask),
        },
        psnr_identity: psnr(&identity, &data.base),
        per_view_psnr,
        per_view_iou,
    })
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub view: usize,
    pub loss: f64,
    pub alpha: f64,
    pub inlier_fraction: f64,
    pub classifier_loss: Option<f64>,
    pub pruned: usize,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a SceneDataset,
    pub ctx: Context,
    pub state: TrainState,
    splat_adam: Adam,
    latent_adam: Adam,
    mapper_adam: Adam,
    classifier_opt: Option<NetOptimizer>,
    tracker: UtilizationTracker,
    last_mask: Option<InlierMask>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a SceneDataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_dataset(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = SplatModel::init(cfg.splats, &data.mean_image(), &mut rng);
        if cfg.glo_enabled {
            model.glo = Some(Glo::new(data.views.len(), cfg.glo_dim, &mut rng));
        }
        let classifier = if cfg.mode == MaskMode::SlsMlp {
            let input = data.views[0].features.channels() + 4 * cfg.sls.pe_degree;
            let mut dims = vec![input];
            dims.extend(&cfg.sls.hidden);
            dims.push(1);
            let mut acts = vec![Activation::Relu; cfg.sls.hidden.len()];
            acts.push(Activation::Sigmoid);
            Some(
                DenseNet::new(&dims, &acts, true, &mut rng)
                    .map_err(|e| TrainError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let classifier_opt = classifier
            .as_ref()
            .map(|c| NetOptimizer::new(c, cfg.sls.lr));
        let ctx = Context::new(&cfg, data)?;
        let latent_len = model.glo.as_ref().map_or(0, |g| g.latents.len() * g.dim());
        let mapper_len = model.glo.as_ref().map_or(0, |g| g.mapper.param_count());
        Ok(Self {
            splat_adam: Adam::new(model.len() * SPLAT_PARAMS),
            latent_adam: Adam::new(latent_len),
            mapper_adam: Adam::new(mapper_len),
            tracker: UtilizationTracker::new(model.len(), cfg.ubp.period, cfg.ubp.kappa),
            state: TrainState {
                model,
                hist: ResidualHistogram::new(cfg.hist)?,
                classifier,
                step: 0,
            },
            classifier_opt,
            ctx,
            cfg,
            data,
            last_mask: None,
        })
    }

    pub fn evaluate(&self) -> Result<EvalRecord, TrainError> {
        evaluate(&self.cfg, &self.state, &self.ctx, self.data)
    }

    /// Sampled mask used by the most recent step.
    pub fn last_mask(&self) -> Option<&InlierMask> {
        self.last_mask.as_ref()
    }

    /// Render and deterministic mask of one view under the current state.
    pub fn preview(&self, view: usize) -> Result<(ColorImage, InlierMask), TrainError> {
        let (w, h) = (self.data.width(), self.data.height());
        let (img, _) = render(&self.state.model, appearance(&self.state, view), w, h)?;
        let residuals = img.mean_abs_residual(&self.data.views[view].image);
        let mask = predicted_mask(
            &self.cfg,
            &self.state,
            &self.ctx,
            self.data,
            view,
            &residuals,
        )?;
        Ok((img, mask))
    }

    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let t = self.state.step;
        let view = (t % self.data.views.len() as u64) as usize;
        let target = &self.data.views[view].image;
        let (w, h) = (self.data.width(), self.data.height());
        let app = appearance(&self.state, view);
        let (img, cache) = render(&self.state.model, app, w, h)?;
        let residuals = img.mean_abs_residual(target);
        if !self.cfg.mask_before_hist {
            self.state.hist.update_plane(&residuals)?;
        }

        let mut classifier_loss = None;
        let mask_star = match self.cfg.mode {
            MaskMode::SlsMlp if !self.state.hist.is_empty() => {
                let (upper, lower) = make_labels(&residuals, &self.state.hist, &self.cfg.mask)?;
                let input = self.ctx.classifier_input(self.data, view);
                let clf = self.state.classifier.as_mut().expect("classifier");
                let opt = self.classifier_opt.as_mut().expect("classifier optimizer");
                let n = input.data.nrows();
                let lambda = self.cfg.sls.lambda;
                if self.cfg.sls.batch == 0 || self.cfg.sls.batch >= n {
                    let out = mlp_step(clf, opt, &input, &upper, &lower, lambda)?;
                    classifier_loss = Some(out.loss);
                    out.mask
                } else {
                    let mask = mlp_mask(clf, &input)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ CLASSIFIER_BATCH_SEED);
                    rng.set_stream(t);
                    let rows = rand::seq::index::sample(&mut rng, n, self.cfg.sls.batch).into_vec();
                    classifier_loss = Some(mlp_step_rows(
                        clf, opt, &input, &upper, &lower, lambda, &rows,
                    )?);
                    mask
                }
            }
            _ => predicted_mask(
                &self.cfg,
                &self.state,
                &self.ctx,
                self.data,
                view,
                &residuals,
            )?,
        };
        if self.cfg.mask_before_hist {
            self.state.hist.update_plane(&residuals)?;
        }

        let alpha = schedule_alpha(t, &self.cfg.mask);
        let mask = if self.cfg.mode == MaskMode::None {
            mask_star
        } else {
            bernoulli_mask(&mask_star, alpha, self.cfg.seed, t)
        };
        let (loss, grad) = masked_loss(&img, target, &mask, &self.cfg.kernel)?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                step: t,
                view,
                what: "loss",
            });
        }

        let in_window = self.cfg.ubp.enabled && t >= self.cfg.ubp.start && t < self.cfg.ubp.stop;
        let grads = render_backward(&self.state.model, &cache, &grad, in_window)?;
        if grads.splats.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Divergence {
                step: t,
                view,
                what: "gradient",
            });
        }
        if !self.apply_gradients(&grads) {
            return Err(TrainError::Divergence {
                step: t,
                view,
                what: "parameter update",
            });
        }

        let mut pruned = 0;
        if in_window {
            if let Some(energy) = &grads.energy {
                accumulate_utilization(&mut self.tracker, energy, &mask);
            }
            if self.tracker.window_complete() {
                let keep = prune(&mut self.state.model, &mut self.tracker);
                pruned = keep.iter().filter(|&&k| !k).count();
                self.splat_adam.retain_chunks(SPLAT_PARAMS, &keep);
                debug!(
                    "step {t}: pruned {pruned}, {} splats remain",
                    self.state.model.len()
                );
            }
        }

        self.state.step += 1;
        let inlier_fraction = mask.inlier_fraction();
        self.last_mask = Some(mask);
        Ok(StepStats {
            step: t,
            view,
            loss,
            alpha,
            inlier_fraction,
            classifier_loss,
            pruned,
        })
    }

    /// Returns false if the splat update produced non-finite parameters.
    fn apply_gradients(&mut self, grads: &crate::splat2d::ModelGrads) -> bool {
        let lr = self.cfg.lr.at(self.state.step, self.cfg.steps);
        let mut params = self.state.model.params();
        self.splat_adam.tick();
        self.splat_adam
            .update_strided(0, &mut params, &grads.splats, &lr.splat_pattern());
        if params.iter().any(|p| !p.is_finite()) {
            return false;
        }
        self.state.model.set_params(&params);
        for s in &mut self.state.model.splats {
            s.clamp();
        }
        if let Some(glo) = self.state.model.glo.as_mut() {
            if let Some((view, gz)) = &grads.latent {
                let dim = glo.dim();
                self.latent_adam.tick();
                self.latent_adam
                    .update(view * dim, &mut glo.latents[*view], gz, lr.glo);
            }
            if !grads.mapper.is_empty() {
                let mut mp = glo.mapper.flat_params();
                self.mapper_adam.step(&mut mp, &grads.mapper, lr.glo);
                glo.mapper
                    .set_flat_params(&mp)
                    .expect("mapper shape is fixed");
            }
        }
        true
    }

    /// Runs all remaining steps, evaluating at step 0 and every `eval_every`
    /// steps. `on_eval` sees each evaluation as it is produced.
    pub fn run(
        &mut self,
        mut on_eval: impl FnMut(&Trainer<'a>, &EvalRecord),
    ) -> Result<TrainLog, TrainError> {
        let mut log = TrainLog::default();
        let first = self.evaluate()?;
        on_eval(self, &first);
        log.rows.push(first.row);
        while self.state.step < self.cfg.steps {
            self.step()?;
            if self.state.step.is_multiple_of(self.cfg.eval_every)
                || self.state.step == self.cfg.steps
            {
                let rec = self.evaluate()?;
                on_eval(self, &rec);
                log.rows.push(rec.row);
            }
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final state with its log.
pub fn train(cfg: &TrainConfig, data: &SceneDataset) -> Result<(TrainState, TrainLog), TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let log = trainer.run(|_, _| {})?;
    Ok((trainer.state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, GenConfig, Preset};

    #[test]
    fn masked_l1_examples() {
        let a = ColorImage::filled(4, 4, [0.3, 0.5, 0.7]);
        let ones = InlierMask::ones(4, 4);
        assert_eq!(masked_l1(&a, &a, &ones).unwrap().0, 0.0);
        let b = ColorImage::filled(4, 4, [0.6; 3]);
        let zero = ColorImage::filled(4, 4, [0.0; 3]);
        let (l, g) = masked_l1(&zero, &b, &InlierMask::zeros(4, 4)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().flatten().all(|&v| v == 0.0));
        let (l, g) = masked_l1(&b, &zero, &ones).unwrap();
        assert!((l - 0.6).abs() < 1e-15);
        assert!(g
            .data
            .iter()
            .flatten()
            .all(|&v| (v - 1.0 / 48.0).abs() < 1e-15));
    }

    #[test]
    fn masked_loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rnd = |rng: &mut ChaCha8Rng| {
            ColorImage::new(
                3,
                3,
                (0..9).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            )
        };
        let (r, t) = (rnd(&mut rng), rnd(&mut rng));
        let mask = InlierMask::new(3, 3, (0..9).map(|_| rng.gen()).collect());
        let kernel = RobustKernel::new(crate::kernels::KernelKind::Charbonnier, 0.2).unwrap();
        let (_, g) = masked_loss(&r, &t, &mask, &kernel).unwrap();
        for p in 0..9 {
            for k in 0..3 {
                let mut up = r.clone();
                up.data[p][k] += 1e-6;
                let mut dn = r.clone();
                dn.data[p][k] -= 1e-6;
                let fd = (masked_loss(&up, &t, &mask, &kernel).unwrap().0
                    - masked_loss(&dn, &t, &mask, &kernel).unwrap().0)
                    / 2e-6;
                assert!((fd - g.data[p][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let a = ColorImage::filled(5, 5, [0.5; 3]);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let b = ColorImage::filled(5, 5, [0.6; 3]);
        let want = 10.0 * (1.0 / 0.01f64).log10();
        assert!((psnr(&a, &b) - want).abs() < 1e-9);
    }

    #[test]
    fn iou_examples() {
        let gt = [true, true, false, false];
        assert_eq!(mask_iou(&gt, &gt), 1.0);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]), 1.0);
        assert!((mask_iou(&[false, true, true, false], &gt) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mode_round_trip() {
        for m in MaskMode::ALL {
            assert_eq!(m.to_string().parse::<MaskMode>().unwrap(), m);
        }
        assert!("median".parse::<MaskMode>().is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = TrainConfig {
            ubp: UbpConfig {
                start: 10,
                stop: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    fn tiny_data() -> SceneDataset {
        generate_scene(
            2,
            &GenConfig {
                width: 24,
                height: 24,
                views: 4,
                ..GenConfig::preset(Preset::Medium)
            },
        )
    }

    fn tiny_cfg(mode: MaskMode) -> TrainConfig {
        TrainConfig {
            steps: 20,
            splats: 40,
            eval_every: 10,
            mode,
            sls: SlsConfig {
                clusters: 6,
                hidden: vec![8, 8],
                pe_degree: 2,
                ..Default::default()
            },
            ubp: UbpConfig {
                enabled: true,
                start: 5,
                stop: 15,
                period: 5,
                kappa: 1e-12,
            },
            ..Default::default()
        }
    }

    #[test]
    fn every_mode_runs_and_logs() {
        let data = tiny_data();
        for mode in MaskMode::ALL {
            let (state, log) = train(&tiny_cfg(mode), &data).unwrap();
            assert_eq!(log.rows.len(), 3, "{mode}");
            assert_eq!(
                log.rows.iter().map(|r| r.step).collect::<Vec<_>>(),
                vec![0, 10, 20]
            );
            assert_eq!(state.step, 20);
            assert!(log
                .rows
                .iter()
                .all(|r| r.psnr.is_finite() && r.loss.is_finite()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let cfg = tiny_cfg(MaskMode::SlsMlp);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let data = tiny_data();
        let cfg = tiny_cfg(MaskMode::RobustFilter);
        let mut t = Trainer::new(cfg, &data).unwrap();
        for _ in 0..7 {
            t.step().unwrap();
        }
        assert_eq!(t.evaluate().unwrap(), t.evaluate().unwrap());
    }
}
