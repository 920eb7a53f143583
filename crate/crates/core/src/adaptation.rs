//! Fully test-time adaptation: entropy loss with reliability filtering,
//! sharpness-aware updates of the adaptable parameter subset, the online
//! stream loop, and supervised source pretraining.
//!
//! The adaptation loss is the mean prediction entropy over the samples whose
//! entropy falls strictly below the threshold E0 = e0_factor * ln(C). Each
//! batch update is sharpness-aware: the gradient is re-evaluated at a
//! perturbed point theta + rho * g / ||g|| and a momentum step is taken from
//! the original point using that second gradient. The reliability mask is
//! recomputed at the perturbed point; if either pass selects nothing the
//! batch is skipped with parameters left bitwise unchanged.

use serde::{Deserialize, Serialize};

use crate::analysis::{MetricsRow, RunningMetrics};
use crate::data::{StreamBatch, SyntheticDataset};
use crate::error::{DctError, DctResult};
use crate::graph::{Graph, Var};
use crate::model::{
    argmax_rows, bind_params, model_forward, ForwardMode, ModelParams, ParamKind,
    TraceOptions,
};
use crate::tensor::Tensor;

/// Which parameters adapt online.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Layer norms plus the conditioner generators (the full method).
    Dct,
    /// Layer norms plus static per-layer conditioner vectors (ablation).
    StaticConditioner,
    /// Layer norms only, plain attention (comparison arm).
    LnOnly,
    /// Forward-only evaluation; parameters never change.
    None,
}

impl AdaptMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptMode::Dct => "dct",
            AdaptMode::StaticConditioner => "static-conditioner",
            AdaptMode::LnOnly => "ln-only",
            AdaptMode::None => "none",
        }
    }

    /// Attention variant used when running this adaptation mode.
    pub fn forward_mode(&self) -> ForwardMode {
        match self {
            AdaptMode::Dct | AdaptMode::StaticConditioner => ForwardMode::Conditioned,
            AdaptMode::LnOnly | AdaptMode::None => ForwardMode::Baseline,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub learning_rate: f32,
    /// SAM perturbation radius.
    pub rho: f32,
    /// E0 = e0_factor * ln(num_classes); must lie in (0, 1].
    pub e0_factor: f32,
    pub mode: AdaptMode,
    pub momentum: f32,
    /// Multiplier on the learning rate of conditioner parameters relative to
    /// the layer norms; the generator tolerates (and profits from) larger
    /// steps than the pretrained LN affines.
    pub generator_lr_scale: f32,
    /// Score each batch from a forward pass taken after its update instead
    /// of the default predict-then-update protocol.
    pub score_after_update: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            learning_rate: 0.01,
            rho: 0.05,
            e0_factor: 0.4,
            mode: AdaptMode::Dct,
            momentum: 0.9,
            generator_lr_scale: 1.0,
            score_after_update: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> DctResult<()> {
        if !(self.learning_rate > 0.0) {
            return Err(DctError::Config { message: "learning_rate must be positive".into() });
        }
        if !(self.rho >= 0.0) {
            return Err(DctError::Config { message: "rho must be non-negative".into() });
        }
        if !(self.e0_factor > 0.0 && self.e0_factor <= 1.0) {
            return Err(DctError::Config { message: "e0_factor must lie in (0, 1]".into() });
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(DctError::Config { message: "momentum must lie in [0, 1)".into() });
        }
        if !(self.generator_lr_scale > 0.0) {
            return Err(DctError::Config { message: "generator_lr_scale must be positive".into() });
        }
        Ok(())
    }

    /// Entropy threshold for `num_classes` classes, computed once per run.
    pub fn e0(&self, num_classes: usize) -> f32 {
        (self.e0_factor as f64 * (num_classes as f64).ln()) as f32
    }
}

// ── entropy and filtering ────────────────────────────────────────────

/// Per-sample Shannon entropy of softmax(logits) in nats, as a `[b]` graph
/// node. Computed as logsumexp(z) - sum_j p_j z_j, which never takes the log
/// of a vanishing probability; differentiable.
pub fn entropy(g: &mut Graph, logits: Var) -> DctResult<Var> {
    let t = g.value(logits);
    if !t.is_matrix() || t.cols() < 2 {
        return Err(DctError::DimMismatch {
            op: "entropy",
            detail: format!("expected [b, C>=2] logits, got {:?}", t.shape()),
        });
    }
    let (b, c) = (t.rows(), t.cols());
    let mut maxes = vec![0.0f32; b];
    for r in 0..b {
        let mut m = f32::NEG_INFINITY;
        for j in 0..c {
            m = m.max(t.get2(r, j));
        }
        maxes[r] = m;
    }
    // z - max (max held constant; the lse gradient is exact regardless)
    let mut neg = vec![0.0f32; b * c];
    for r in 0..b {
        for j in 0..c {
            neg[r * c + j] = -maxes[r];
        }
    }
    let neg = g.constant(Tensor::from_parts(vec![b, c], neg));
    let shifted = g.add(logits, neg)?;
    let e = g.exp(shifted)?;
    let ones = g.constant(Tensor::filled(vec![c, 1], 1.0));
    let sums = g.matmul(e, ones)?;
    let ls = g.log(sums)?;
    let max_col = g.constant(Tensor::from_parts(vec![b, 1], maxes));
    let lse = g.add(ls, max_col)?;

    let p = g.softmax_rows(logits)?;
    let pz = g.mul(p, logits)?;
    let expect = g.matmul(pz, ones)?;
    let neg_expect = g.scale(expect, -1.0)?;
    let h = g.add(lse, neg_expect)?;
    g.reshape(h, vec![b])
}

/// Strict-inequality reliability filter: keep samples with entropy < E0.
pub fn reliability_mask(entropies: &[f32], e0: f32) -> Vec<bool> {
    entropies.iter().map(|&h| h < e0).collect()
}

/// Mean entropy over mask-selected samples. Returns `None` when nothing is
/// selected; the caller must skip the update.
pub fn adaptation_loss(
    g: &mut Graph,
    entropies: Var,
    mask: &[bool],
) -> DctResult<Option<(Var, usize)>> {
    let b = g.value(entropies).numel();
    if mask.len() != b {
        return Err(DctError::DimMismatch {
            op: "adaptation_loss",
            detail: format!("mask length {} vs {} entropies", mask.len(), b),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let mvec: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mvec = g.constant(Tensor::from_parts(vec![b], mvec));
    let sel = g.mul(entropies, mvec)?;
    let total = g.sum(sel)?;
    let loss = g.scale(total, 1.0 / count as f64)?;
    Ok(Some((loss, count)))
}

/// Canonical indices of the parameters a mode adapts.
pub fn select_adaptable(params: &ModelParams, mode: AdaptMode) -> DctResult<Vec<usize>> {
    use crate::model::ConditionerSource;
    match (mode, params.conditioner_source()) {
        (AdaptMode::Dct, ConditionerSource::Static) => {
            return Err(DctError::InvalidMode {
                message: "dct mode needs generator conditioners; model carries static ones".into(),
            })
        }
        (AdaptMode::StaticConditioner, ConditionerSource::Generator) => {
            return Err(DctError::InvalidMode {
                message: "static-conditioner mode needs the static variant; convert first".into(),
            })
        }
        _ => {}
    }
    let take_cond = matches!(mode, AdaptMode::Dct | AdaptMode::StaticConditioner);
    let take_ln = !matches!(mode, AdaptMode::None);
    Ok(params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| match e.kind {
            ParamKind::Backbone => false,
            ParamKind::LayerNorm => take_ln,
            ParamKind::Conditioner => take_cond,
        })
        .map(|(i, _)| i)
        .collect())
}

// ── sharpness-aware stepping ─────────────────────────────────────────

/// One objective evaluation at a candidate parameter point.
pub struct PassEval {
    pub loss: f32,
    /// Gradients aligned with the adaptable parameter vector.
    pub grads: Vec<Tensor>,
    pub n_selected: usize,
}

/// What a batch update did.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Updated { loss1: f32, n1: usize, loss2: f32, n2: usize },
    /// Nothing survived the filter at the unperturbed point.
    SkippedPass1,
    /// Nothing survived the filter at the perturbed point.
    SkippedPass2 { loss1: f32, n1: usize },
    /// Non-finite loss or gradient; parameters restored.
    Aborted { reason: String },
}

impl StepOutcome {
    pub fn skipped(&self) -> bool {
        !matches!(self, StepOutcome::Updated { .. })
    }
}

/// Momentum buffers for the adaptable subset, created lazily on first use.
#[derive(Default)]
pub struct MomentumState {
    buffers: Option<Vec<Tensor>>,
}

impl MomentumState {
    pub fn new() -> Self {
        MomentumState::default()
    }
}

fn grads_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.all_finite())
}

fn global_l2(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One sharpness-aware update of `theta` against an objective closure.
///
/// The closure receives a candidate parameter vector and returns the loss,
/// its gradients, and the reliability-selected count at that point, or `None`
/// when no sample survives the filter. Steps: (1) evaluate at theta; (2)
/// perturb by eps = rho * g / (||g||_2 + 1e-12); (3) re-evaluate and take the
/// perturbed-point gradient; (4) momentum step from the ORIGINAL theta, so a
/// skip or abort leaves theta bitwise unchanged and no eps residue survives.
pub fn sam_step<F>(
    theta: &mut [Tensor],
    state: &mut MomentumState,
    lr: &[f32],
    rho: f32,
    momentum: f32,
    eval: &mut F,
) -> DctResult<StepOutcome>
where
    F: FnMut(&[Tensor]) -> DctResult<Option<PassEval>>,
{
    debug_assert_eq!(lr.len(), theta.len());
    let pass1 = match eval(theta)? {
        Some(e) => e,
        None => return Ok(StepOutcome::SkippedPass1),
    };
    if !pass1.loss.is_finite() || !grads_finite(&pass1.grads) {
        return Ok(StepOutcome::Aborted { reason: "non-finite loss or gradient (pass 1)".into() });
    }

    let norm = global_l2(&pass1.grads);
    let eps_scale = rho as f64 / (norm + 1e-12);
    let perturbed: Vec<Tensor> = theta
        .iter()
        .zip(&pass1.grads)
        .map(|(t, g)| {
            let data: Vec<f32> = t
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| (v as f64 + eps_scale * gv as f64) as f32)
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        })
        .collect();

    let pass2 = match eval(&perturbed)? {
        Some(e) => e,
        None => {
            return Ok(StepOutcome::SkippedPass2 { loss1: pass1.loss, n1: pass1.n_selected })
        }
    };
    if !pass2.loss.is_finite() || !grads_finite(&pass2.grads) {
        return Ok(StepOutcome::Aborted { reason: "non-finite loss or gradient (pass 2)".into() });
    }

    let buffers = state
        .buffers
        .get_or_insert_with(|| theta.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect());
    for (((t, m), g), &rate) in theta.iter_mut().zip(buffers.iter_mut()).zip(&pass2.grads).zip(lr) {
        for ((tv, mv), &gv) in t.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
            *mv = momentum * *mv + gv;
            *tv -= rate * *mv;
        }
    }
    if !theta.iter().all(|t| t.all_finite()) {
        return Err(DctError::Divergence {
            message: "parameters became non-finite after the update".into(),
        });
    }
    Ok(StepOutcome::Updated {
        loss1: pass1.loss,
        n1: pass1.n_selected,
        loss2: pass2.loss,
        n2: pass2.n_selected,
    })
}

// ── online stream adaptation ─────────────────────────────────────────

/// Batch size at which `learning_rate` applies as-is.
pub const REFERENCE_BATCH: usize = 64;

pub struct StreamOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_accuracy: f64,
    pub skipped_batches: usize,
}

struct BatchEval {
    logits: Tensor,
    n_selected: usize,
    loss: Option<f32>,
    grads: Option<Vec<Tensor>>,
}

/// Forward the batch at the given parameters; compute entropies, the
/// reliability mask, and (when anything is selected and `selected` is
/// non-empty) the loss and its gradients over the adaptable subset.
fn eval_batch(
    params: &ModelParams,
    batch: &StreamBatch,
    selected: &[usize],
    fwd_mode: ForwardMode,
    e0: f32,
    with_grads: bool,
) -> DctResult<BatchEval> {
    let mut g = Graph::new();
    let mut flags = vec![false; params.num_entries()];
    if with_grads {
        for &i in selected {
            flags[i] = true;
        }
    }
    let bound = bind_params(&mut g, params, &flags);
    let fwd = model_forward(&mut g, &batch.images, &bound, fwd_mode, TraceOptions::none())?;
    let ent = entropy(&mut g, fwd.logits)?;
    let entropies = g.value(ent).data().to_vec();
    let mask = reliability_mask(&entropies, e0);
    let logits = g.value(fwd.logits).clone();
    match adaptation_loss(&mut g, ent, &mask)? {
        None => Ok(BatchEval { logits, n_selected: 0, loss: None, grads: None }),
        Some((loss_var, count)) => {
            let loss = g.value(loss_var).scalar_value()?;
            let grads = if with_grads {
                let all = g.backward(loss_var)?;
                Some(
                    selected
                        .iter()
                        .map(|&i| {
                            all.get(bound.var(i))
                                .cloned()
                                .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape().to_vec()))
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok(BatchEval { logits, n_selected: count, loss: Some(loss), grads })
        }
    }
}

/// Run the online protocol over a corrupted stream: for each batch in order,
/// predict, then (in the adapting modes) update the adaptable parameters via
/// the sharpness-aware entropy step. Parameters evolve across batches with no
/// reset. By default accuracy is scored from the logits of each batch's first
/// forward pass, i.e. before that batch's own update; `score_after_update`
/// switches to the update-then-predict reading.
pub fn adapt_stream(
    params: &mut ModelParams,
    stream: &[StreamBatch],
    cfg: &AdaptConfig,
) -> DctResult<StreamOutcome> {
    cfg.validate()?;
    let e0 = cfg.e0(params.config.num_classes);
    let fwd_mode = cfg.mode.forward_mode();
    let selected = select_adaptable(params, cfg.mode)?;
    let kind_scale: Vec<f32> = selected
        .iter()
        .map(|&i| match params.entries()[i].kind {
            ParamKind::Conditioner => cfg.generator_lr_scale,
            _ => 1.0,
        })
        .collect();
    let mut metrics = RunningMetrics::new();
    let mut momentum = MomentumState::new();

    for batch in stream {
        if batch.labels.iter().any(|&l| l as usize >= params.config.num_classes) {
            return Err(DctError::Config {
                message: "stream labels exceed the model's class count".into(),
            });
        }
        if cfg.mode == AdaptMode::None {
            let eval = eval_batch(params, batch, &[], fwd_mode, e0, false)?;
            let correct = count_correct(&eval.logits, &batch.labels);
            metrics.update(
                batch.index,
                batch.labels.len(),
                correct,
                eval.n_selected,
                0,
                eval.loss,
                false,
            );
            continue;
        }

        // snapshot of the adaptable subset; skip and abort paths keep it
        let mut theta: Vec<Tensor> =
            selected.iter().map(|&i| params.tensor(i).clone()).collect();
        let mut scratch = params.clone();
        let mut first_eval: Option<(Tensor, usize, Option<f32>)> = None;
        let mut calls = 0usize;
        let outcome = {
            let mut eval = |cand: &[Tensor]| -> DctResult<Option<PassEval>> {
                for (&i, t) in selected.iter().zip(cand) {
                    *scratch.tensor_mut(i) = t.clone();
                }
                let ev = eval_batch(&scratch, batch, &selected, fwd_mode, e0, true)?;
                calls += 1;
                if calls == 1 {
                    first_eval = Some((ev.logits.clone(), ev.n_selected, ev.loss));
                }
                match (ev.loss, ev.grads) {
                    (Some(loss), Some(grads)) => {
                        Ok(Some(PassEval { loss, grads, n_selected: ev.n_selected }))
                    }
                    _ => Ok(None),
                }
            };
            // linear learning-rate scaling with batch size, relative to the
            // reference batch of 64: small batches take proportionally
            // smaller steps, which keeps single-sample streams stable
            let batch_scale = batch.labels.len() as f32 / REFERENCE_BATCH as f32;
            let lr: Vec<f32> = kind_scale
                .iter()
                .map(|&k| cfg.learning_rate * batch_scale * k)
                .collect();
            sam_step(&mut theta, &mut momentum, &lr, cfg.rho, cfg.momentum, &mut eval)?
        };
        if let StepOutcome::Updated { .. } = outcome {
            for (&i, t) in selected.iter().zip(&theta) {
                *params.tensor_mut(i) = t.clone();
            }
        }

        let (first_logits, n1, loss1) = first_eval.expect("pass 1 always evaluates");
        let scoring_logits = if cfg.score_after_update {
            let ev = eval_batch(params, batch, &[], fwd_mode, e0, false)?;
            ev.logits
        } else {
            first_logits
        };
        let correct = count_correct(&scoring_logits, &batch.labels);
        let n2 = match &outcome {
            StepOutcome::Updated { n2, .. } => *n2,
            _ => 0,
        };
        metrics.update(
            batch.index,
            batch.labels.len(),
            correct,
            n1,
            n2,
            loss1,
            outcome.skipped(),
        );
    }

    Ok(StreamOutcome {
        final_accuracy: metrics.running_accuracy(),
        skipped_batches: metrics.skipped_batches(),
        rows: metrics.into_rows(),
    })
}

fn count_correct(logits: &Tensor, labels: &[u32]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count()
}

/// Frozen-parameter top-1 accuracy over a labeled set, evaluated in batches.
pub fn evaluate(
    params: &ModelParams,
    images: &Tensor,
    labels: &[u32],
    batch_size: usize,
    mode: ForwardMode,
) -> DctResult<f64> {
    let total = labels.len();
    let side = params.config.image_size;
    let px = side * side;
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < total {
        let len = batch_size.min(total - start);
        let chunk = Tensor::from_parts(
            vec![len, side, side, 1],
            images.data()[start * px..(start + len) * px].to_vec(),
        );
        let logits = crate::model::forward_logits(params, &chunk, mode)?;
        correct += count_correct(&logits, &labels[start..start + len]);
        start += len;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ── source pretraining ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Label-smoothing mass spread over the non-target classes. Keeps the
    /// source model's logits bounded, which preserves usable entropy
    /// gradients at test time.
    pub label_smoothing: f32,
    /// Apply mild photometric/noise jitter to training batches. Without it
    /// the source features degenerate under photometric test shifts and
    /// entropy adaptation collapses.
    pub augment: bool,
    pub seed: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            label_smoothing: 0.1,
            augment: true,
            seed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Mean cross-entropy of logits against integer labels, as a scalar node.
/// With nonzero `smoothing` the target distribution puts `1 - smoothing` on
/// the label and spreads the rest uniformly.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[u32], smoothing: f32) -> DctResult<Var> {
    let t = g.value(logits);
    let (b, c) = (t.rows(), t.cols());
    if labels.len() != b {
        return Err(DctError::DimMismatch {
            op: "cross_entropy",
            detail: format!("{} labels for {b} logit rows", labels.len()),
        });
    }
    // logsumexp via the entropy helper's stable pieces
    let mut maxes = vec![0.0f32; b];
    for r in 0..b {
        let mut m = f32::NEG_INFINITY;
        for j in 0..c {
            m = m.max(t.get2(r, j));
        }
        maxes[r] = m;
    }
    let mut neg = vec![0.0f32; b * c];
    for r in 0..b {
        for j in 0..c {
            neg[r * c + j] = -maxes[r];
        }
    }
    let neg = g.constant(Tensor::from_parts(vec![b, c], neg));
    let shifted = g.add(logits, neg)?;
    let e = g.exp(shifted)?;
    let ones = g.constant(Tensor::filled(vec![c, 1], 1.0));
    let sums = g.matmul(e, ones)?;
    let ls = g.log(sums)?;
    let max_col = g.constant(Tensor::from_parts(vec![b, 1], maxes));
    let lse = g.add(ls, max_col)?;

    let off = smoothing / c as f32;
    let mut target = vec![off; b * c];
    for (r, &l) in labels.iter().enumerate() {
        target[r * c + l as usize] = 1.0 - smoothing + off;
    }
    let target = g.constant(Tensor::from_parts(vec![b, c], target));
    let picked = g.mul(logits, target)?;
    let target = g.matmul(picked, ones)?;
    let neg_target = g.scale(target, -1.0)?;
    let per_sample = g.add(lse, neg_target)?;
    g.mean(per_sample)
}

/// Supervised training of the full parameter set in baseline mode (no
/// conditioner rows). Deterministic given the seed. Returns the trained
/// parameters and a per-epoch log.
pub fn pretrain(
    config: &crate::model::ModelConfig,
    train: &SyntheticDataset,
    pcfg: &PretrainConfig,
) -> DctResult<(ModelParams, Vec<EpochLog>)> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    if config.num_classes != train.classes {
        return Err(DctError::Config {
            message: format!(
                "num_classes {} does not match dataset classes {}",
                config.num_classes, train.classes
            ),
        });
    }
    if config.image_size != train.image_size {
        return Err(DctError::Config {
            message: format!(
                "image_size {} does not match dataset image size {}",
                config.image_size, train.image_size
            ),
        });
    }
    let seed = pcfg.seed.unwrap_or(0);
    let mut params = ModelParams::init_source(config, seed)?;
    let mut momenta: Vec<Tensor> = params
        .entries()
        .iter()
        .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
        .collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x5EED_0F51_u64);
    let side = config.image_size;
    let px = side * side;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(pcfg.epochs);

    for epoch in 0..pcfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(pcfg.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * px);
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                if pcfg.augment {
                    // contrast jitter only: enough to keep features alive
                    // under photometric test shifts without immunizing the
                    // model against the corruption suite
                    let factor = rng.gen_range(0.6f64..1.4);
                    data.extend(train.image(idx).iter().map(|&v| {
                        let j = 0.5 + factor * (v as f64 - 0.5);
                        j.clamp(0.0, 1.0) as f32
                    }));
                } else {
                    data.extend_from_slice(train.image(idx));
                }
                labels.push(train.labels[idx]);
            }
            let images = Tensor::from_parts(vec![chunk.len(), side, side, 1], data);
            let mut g = Graph::new();
            let flags = vec![true; params.num_entries()];
            let bound = bind_params(&mut g, &params, &flags);
            let leaf_vars: Vec<Var> = (0..params.num_entries()).map(|i| bound.var(i)).collect();
            let fwd =
                model_forward(&mut g, &images, &bound, ForwardMode::Baseline, TraceOptions::none())?;
            let loss = cross_entropy(&mut g, fwd.logits, &labels, pcfg.label_smoothing)?;
            let loss_val = g.value(loss).scalar_value()?;
            if !loss_val.is_finite() {
                return Err(DctError::Divergence {
                    message: format!("training loss became non-finite in epoch {epoch}"),
                });
            }
            correct += count_correct(g.value(fwd.logits), &labels);
            loss_sum += loss_val as f64 * chunk.len() as f64;
            drop(bound);
            let grads = g.backward(loss)?;
            for i in 0..params.num_entries() {
                if let Some(gt) = grads.get(leaf_vars[i]) {
                    let m = momenta[i].data_mut();
                    let w = params.tensor_mut(i).data_mut();
                    for ((wv, mv), &gv) in w.iter_mut().zip(m.iter_mut()).zip(gt.data()) {
                        *mv = pcfg.momentum * *mv + gv;
                        *wv -= pcfg.lr * *mv;
                    }
                }
            }
            if !params.entries().iter().all(|e| e.tensor.all_finite()) {
                return Err(DctError::Divergence {
                    message: format!("weights became non-finite in epoch {epoch}"),
                });
            }
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        });
    }
    Ok((params, logs))
}
