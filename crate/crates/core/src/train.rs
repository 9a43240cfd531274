//! The composite training objective and its optimization loop.
//!
//! Per batch, three updates alternate: (a) the group decoder fits the true
//! groups, (b) the density-ratio weights fit the real-vs-generated
//! discrimination task, and (c) the extractor and target head minimize the
//! composite objective with the other two families frozen. The composite is
//! the task loss plus, weighted by `alpha`, the decoder log-likelihood term
//! (pushed up against the extractor, so the representation stops predicting
//! the groups) and the density-ratio term over the union of real and
//! generated (embedding, group) pairs.
//!
//! Variants drop one or both fairness terms (`Ts`, `Td`, `Vanilla`) or
//! restrict them to positively labeled rows (`EoTsd`).

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::data::{batches, DataError, DataSplits, EncodedDataset, Matrix};
use crate::metrics::{imparity, micro_macro_f1, MetricsError};
use crate::model::{
    GumbelConfig, GumbelSampler, ModelBundle, ModelConfig, ModelError, MountedModel, Trainable,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error(transparent)]
    Adam(#[from] AdamError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("invalid train config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({step} step): {source}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        step: &'static str,
        source: TensorError,
    },
}

/// Which terms the composite objective keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Task + decoder term + density-ratio term.
    Tsd,
    /// Task + decoder term.
    Ts,
    /// Task + density-ratio term.
    Td,
    /// Task loss only; the decoder and estimator still train but never enter
    /// the task-family update.
    Vanilla,
    /// Full objective with fairness terms restricted to positive rows,
    /// targeting equal opportunity instead of statistical parity.
    #[serde(rename = "eo")]
    EoTsd,
}

impl Variant {
    pub fn has_sensitive_term(self) -> bool {
        matches!(self, Variant::Tsd | Variant::Ts | Variant::EoTsd)
    }

    pub fn has_ratio_term(self) -> bool {
        matches!(self, Variant::Tsd | Variant::Td | Variant::EoTsd)
    }

    pub fn is_equal_opportunity(self) -> bool {
        matches!(self, Variant::EoTsd)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Tsd => "tsd",
            Variant::Ts => "ts",
            Variant::Td => "td",
            Variant::Vanilla => "vanilla",
            Variant::EoTsd => "eo",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fairness regularization weight.
    pub alpha: f64,
    pub variant: Variant,
    pub epochs: usize,
    /// Early-stop after this many epochs without validation improvement.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Starting Gumbel temperature.
    pub tau0: f64,
    /// Epochs between temperature divisions.
    pub anneal_period: usize,
    /// Divisor applied to the temperature each period.
    pub anneal_factor: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            variant: Variant::Tsd,
            epochs: 100,
            patience: 5,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 128,
            tau0: 1.0,
            anneal_period: 50,
            anneal_factor: 2.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, class_count: usize) -> Result<(), TrainError> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.epochs < 1 || self.patience < 1 || self.batch_size < 1 {
            return Err(TrainError::InvalidConfig(
                "epochs, patience and batch_size must be >= 1".into(),
            ));
        }
        if self.tau0 <= 0.0 || self.anneal_factor <= 0.0 || self.anneal_period < 1 {
            return Err(TrainError::InvalidConfig(
                "tau0 and anneal_factor must be > 0, anneal_period >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::InvalidConfig("need at least one seed".into()));
        }
        if self.variant.is_equal_opportunity() && class_count != 2 {
            return Err(TrainError::InvalidConfig(format!(
                "equal-opportunity variant requires binary labels, got {class_count} classes"
            )));
        }
        Ok(())
    }
}

/// Temperature schedule: `tau0 / factor^(epoch / period)`.
pub fn anneal_temperature(epoch: usize, config: &TrainConfig) -> f64 {
    config.tau0 / config.anneal_factor.powi((epoch / config.anneal_period) as i32)
}

/// Per-epoch log record: loss components averaged over batches, the current
/// temperature, and validation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub task_loss: f64,
    pub sensitive_loss: f64,
    pub ratio_loss: f64,
    pub temperature: f64,
    pub val_imparity: f64,
    pub val_micro_f1: f64,
}

/// One mini-batch view of an encoded dataset.
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_one_hot: Matrix,
    pub group_card: usize,
}

impl Batch {
    pub fn from_rows(ds: &EncodedDataset, rows: &[usize]) -> Self {
        Self {
            features: ds.features().gather(rows),
            labels: rows.iter().map(|&r| ds.labels()[r]).collect(),
            groups: rows.iter().map(|&r| ds.groups()[r]).collect(),
            group_one_hot: ds.group_one_hot(rows),
            group_card: ds.group_card(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rows the fairness terms range over: every row for statistical parity,
/// positively labeled rows for equal opportunity.
pub fn fairness_rows(variant: Variant, labels: &[usize]) -> Vec<usize> {
    if variant.is_equal_opportunity() {
        (0..labels.len()).filter(|&i| labels[i] == 1).collect()
    } else {
        (0..labels.len()).collect()
    }
}

/// Pre-drawn Gumbel noise plus temperature, fixed so a loss graph is a
/// deterministic function of the parameters (finite differences included).
pub struct GumbelDraw {
    pub noise: Vec<f64>,
    pub temperature: f64,
}

impl GumbelDraw {
    pub fn for_rows(sampler: &mut GumbelSampler, row_count: usize, group_card: usize) -> Self {
        Self {
            noise: sampler.draw_noise(row_count * group_card),
            temperature: sampler.temperature(),
        }
    }
}

/// The composite objective recorded on one tape.
pub struct ObjectiveGraph {
    pub tape: Tape,
    pub mounted: MountedModel,
    pub total: Var,
    pub task: Var,
    /// Decoder log-likelihood term (times alpha); absent when the variant
    /// drops it or an equal-opportunity batch has no positive rows.
    pub sensitive: Option<Var>,
    /// Density-ratio term (times alpha); absent as above.
    pub ratio: Option<Var>,
    /// Set when an equal-opportunity batch had no positive rows.
    pub eo_empty: bool,
}

impl ObjectiveGraph {
    pub fn task_value(&self) -> f64 {
        self.tape.value(self.task).item()
    }

    pub fn sensitive_value(&self) -> f64 {
        self.sensitive.map_or(0.0, |v| self.tape.value(v).item())
    }

    pub fn ratio_value(&self) -> f64 {
        self.ratio.map_or(0.0, |v| self.tape.value(v).item())
    }

    pub fn total_value(&self) -> f64 {
        self.tape.value(self.total).item()
    }
}

fn mount_batch(
    bundle: &ModelBundle,
    batch: &Batch,
    trainable: Trainable,
) -> Result<(Tape, MountedModel, Var, Var), TrainError> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(
        batch.features.rows(),
        batch.features.cols(),
        batch.features.data().to_vec(),
    )?);
    let mounted = bundle.mount(&mut tape, trainable);
    let embedding = mounted.extract(&mut tape, x)?;
    Ok((tape, mounted, x, embedding))
}

/// Decoder log-likelihood term: `alpha * mean(log q at true groups)`.
fn sensitive_term(tape: &mut Tape, true_group_log_q: Var, alpha: f64) -> Result<Var, TensorError> {
    let mean = tape.mean(true_group_log_q)?;
    tape.scale(mean, alpha)
}

/// Density-ratio term over the equal-size union of real and generated pairs:
/// `alpha * (mean(real scores) + mean(generated scores)) / 2`.
fn ratio_term(
    tape: &mut Tape,
    real_scores: Var,
    generated_scores: Var,
    alpha: f64,
) -> Result<Var, TensorError> {
    let mean_real = tape.mean(real_scores)?;
    let mean_gen = tape.mean(generated_scores)?;
    let sum = tape.add(mean_real, mean_gen)?;
    tape.scale(sum, 0.5 * alpha)
}

/// Build the full composite objective for one batch. The decomposition is
/// exact by construction: `total` is the running sum of the returned
/// component nodes.
pub fn build_objective(
    bundle: &ModelBundle,
    batch: &Batch,
    variant: Variant,
    alpha: f64,
    draw: &GumbelDraw,
    trainable: Trainable,
) -> Result<ObjectiveGraph, TrainError> {
    let (mut tape, mounted, _x, embedding) = mount_batch(bundle, batch, trainable)?;

    let log_probs = mounted.predict_target(&mut tape, embedding)?;
    let task = tape.nll_loss(log_probs, &batch.labels)?;

    let rows = fairness_rows(variant, &batch.labels);
    let wants_fairness = variant.has_sensitive_term() || variant.has_ratio_term();
    let eo_empty = variant.is_equal_opportunity() && rows.is_empty();

    let mut total = task;
    let mut sensitive = None;
    let mut ratio = None;

    if wants_fairness && !eo_empty {
        let (fair_emb, fair_groups, fair_one_hot) = if rows.len() == batch.len() {
            (embedding, batch.groups.clone(), batch.group_one_hot.clone())
        } else {
            let emb = tape.select_rows(embedding, &rows)?;
            let groups = rows.iter().map(|&r| batch.groups[r]).collect();
            (emb, groups, batch.group_one_hot.gather(&rows))
        };
        let prediction = mounted.predict_sensitive(&mut tape, fair_emb, &fair_groups)?;

        if variant.has_sensitive_term() {
            let term = sensitive_term(&mut tape, prediction.true_group_log_q, alpha)?;
            total = tape.add(total, term)?;
            sensitive = Some(term);
        }
        if variant.has_ratio_term() {
            let real_one_hot = tape.leaf(Tensor::matrix(
                fair_one_hot.rows(),
                fair_one_hot.cols(),
                fair_one_hot.data().to_vec(),
            )?);
            let real_scores = mounted.density_ratio(&mut tape, fair_emb, real_one_hot)?;

            let probs = tape.exp(prediction.log_probs)?;
            let expected_noise = rows.len() * batch.group_card;
            if draw.noise.len() != expected_noise {
                return Err(TrainError::InvalidConfig(format!(
                    "gumbel draw has {} noise points, batch needs {expected_noise}",
                    draw.noise.len()
                )));
            }
            let generated = tape.gumbel_softmax(probs, &draw.noise, draw.temperature)?;
            let generated_scores = mounted.density_ratio(&mut tape, fair_emb, generated)?;

            let term = ratio_term(&mut tape, real_scores, generated_scores, alpha)?;
            total = tape.add(total, term)?;
            ratio = Some(term);
        }
    }

    let graph = ObjectiveGraph {
        tape,
        mounted,
        total,
        task,
        sensitive,
        ratio,
        eo_empty,
    };
    debug_assert!(
        (graph.total_value()
            - (graph.task_value() + graph.sensitive_value() + graph.ratio_value()))
        .abs()
            <= 1e-12,
        "objective must decompose exactly into its terms"
    );
    Ok(graph)
}

/// Worst relative error between backward-pass gradients and central finite
/// differences, taken over every parameter family of the composite objective.
/// The finite-difference side re-evaluates the forward value only, so it is
/// independent of the backward implementation it checks.
pub fn objective_grad_check(
    bundle: &ModelBundle,
    batch: &Batch,
    variant: Variant,
    alpha: f64,
    draw: &GumbelDraw,
    h: f64,
) -> Result<f64, TrainError> {
    use crate::check::{central_diff_grad, rel_err};

    let mut graph = build_objective(bundle, batch, variant, alpha, draw, Trainable::all())?;
    let total = graph.total;
    graph.tape.backward(total)?;

    // Leaf order matches ModelBundle::params() declaration order.
    let mut vars = graph.mounted.task_vars();
    vars.extend(graph.mounted.decoder_vars());
    vars.extend(graph.mounted.ratio_vars());

    let mut worst = 0.0f64;
    for (slot, var) in vars.iter().enumerate() {
        let base = bundle.params()[slot].values().to_vec();
        let f = |vals: &[f64]| -> f64 {
            let mut probe = bundle.clone();
            probe.params_mut()[slot].values_mut().copy_from_slice(vals);
            build_objective(&probe, batch, variant, alpha, draw, Trainable::none())
                .expect("forward evaluation of a perturbed bundle")
                .total_value()
        };
        let numeric = central_diff_grad(&f, &base, h);
        let zeros = vec![0.0; base.len()];
        let analytic = graph.tape.grad(*var).unwrap_or(&zeros);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

/// Adam state per parameter family.
pub struct Optimizers {
    pub task: AdamState,
    pub decoder: AdamState,
    pub ratio: AdamState,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, config: &TrainConfig) -> Self {
        let adam = AdamConfig::new(config.learning_rate, config.weight_decay);
        let sizes = |params: Vec<&crate::model::Param>| -> Vec<usize> {
            params.iter().map(|p| p.len()).collect()
        };
        Self {
            task: AdamState::new(adam, &sizes(bundle.task_params())),
            decoder: AdamState::new(adam, &sizes(bundle.decoder_params())),
            ratio: AdamState::new(adam, &sizes(bundle.ratio_params())),
        }
    }
}

fn apply_update(
    tape: &Tape,
    vars: &[Var],
    mut params: Vec<&mut crate::model::Param>,
    adam: &mut AdamState,
) -> Result<(), TrainError> {
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();
    let grad_slices: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut param_slices: Vec<&mut [f64]> =
        params.iter_mut().map(|p| p.values_mut()).collect();
    adam.step(&mut param_slices, &grad_slices)?;
    Ok(())
}

/// Step (a): fit the group decoder to the true groups (mean negative log
/// likelihood), leaving every other family untouched. Returns the loss, or
/// `None` when an equal-opportunity batch has no positive rows.
pub fn step_decoder(
    bundle: &mut ModelBundle,
    batch: &Batch,
    variant: Variant,
    adam: &mut AdamState,
) -> Result<Option<f64>, TrainError> {
    let rows = fairness_rows(variant, &batch.labels);
    if rows.is_empty() {
        return Ok(None);
    }
    let (mut tape, mounted, _x, embedding) =
        mount_batch(bundle, batch, Trainable::only_decoder())?;
    let fair_emb = if rows.len() == batch.len() {
        embedding
    } else {
        tape.select_rows(embedding, &rows)?
    };
    let groups: Vec<usize> = rows.iter().map(|&r| batch.groups[r]).collect();
    let prediction = mounted.predict_sensitive(&mut tape, fair_emb, &groups)?;
    let loss = decoder_loss(&mut tape, prediction.true_group_log_q)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    apply_update(
        &tape,
        &mounted.decoder_vars(),
        bundle.decoder_params_mut(),
        adam,
    )?;
    Ok(Some(value))
}

/// Mean negative log likelihood of the true groups.
fn decoder_loss(tape: &mut Tape, true_group_log_q: Var) -> Result<Var, TensorError> {
    let mean = tape.mean(true_group_log_q)?;
    tape.scale(mean, -1.0)
}

/// Step (b): fit the density-ratio weights by logistic discrimination of real
/// (+1) versus generated (-1) pairs.
pub fn step_estimator(
    bundle: &mut ModelBundle,
    batch: &Batch,
    variant: Variant,
    sampler: &mut GumbelSampler,
    adam: &mut AdamState,
) -> Result<Option<f64>, TrainError> {
    let rows = fairness_rows(variant, &batch.labels);
    if rows.is_empty() {
        return Ok(None);
    }
    let (mut tape, mounted, _x, embedding) = mount_batch(bundle, batch, Trainable::only_ratio())?;
    let (fair_emb, fair_one_hot) = if rows.len() == batch.len() {
        (embedding, batch.group_one_hot.clone())
    } else {
        (
            tape.select_rows(embedding, &rows)?,
            batch.group_one_hot.gather(&rows),
        )
    };
    let groups: Vec<usize> = rows.iter().map(|&r| batch.groups[r]).collect();
    let prediction = mounted.predict_sensitive(&mut tape, fair_emb, &groups)?;

    let real_one_hot = tape.leaf(Tensor::matrix(
        fair_one_hot.rows(),
        fair_one_hot.cols(),
        fair_one_hot.data().to_vec(),
    )?);
    let real_scores = mounted.density_ratio(&mut tape, fair_emb, real_one_hot)?;
    let probs = tape.exp(prediction.log_probs)?;
    let generated = sampler.sample(&mut tape, probs)?;
    let generated_scores = mounted.density_ratio(&mut tape, fair_emb, generated)?;

    let loss = estimator_loss(&mut tape, real_scores, generated_scores, rows.len())?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    apply_update(
        &tape,
        &mounted.ratio_vars(),
        bundle.ratio_params_mut(),
        adam,
    )?;
    Ok(Some(value))
}

/// Logistic discrimination loss over the pooled real (+1) and generated (-1)
/// score sets.
fn estimator_loss(
    tape: &mut Tape,
    real_scores: Var,
    generated_scores: Var,
    rows: usize,
) -> Result<Var, TensorError> {
    let pos = tape.logistic_loss(real_scores, &vec![1.0; rows])?;
    let neg = tape.logistic_loss(generated_scores, &vec![-1.0; rows])?;
    let sum = tape.add(pos, neg)?;
    tape.scale(sum, 0.5)
}

/// Loss components from step (c).
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub task: f64,
    pub sensitive: f64,
    pub ratio: f64,
    pub eo_empty: bool,
}

/// Step (c): update the extractor and target head on the composite objective
/// with the decoder and ratio weights frozen.
pub fn step_task(
    bundle: &mut ModelBundle,
    batch: &Batch,
    config: &TrainConfig,
    sampler: &mut GumbelSampler,
    adam: &mut AdamState,
) -> Result<StepLosses, TrainError> {
    let variant = config.variant;
    let rows = fairness_rows(variant, &batch.labels);
    let draw = if variant.has_ratio_term() {
        GumbelDraw::for_rows(sampler, rows.len(), batch.group_card)
    } else {
        GumbelDraw {
            noise: Vec::new(),
            temperature: sampler.temperature(),
        }
    };
    let mut graph = build_objective(
        bundle,
        batch,
        variant,
        config.alpha,
        &draw,
        Trainable::only_task(),
    )?;
    let losses = StepLosses {
        task: graph.task_value(),
        sensitive: graph.sensitive_value(),
        ratio: graph.ratio_value(),
        eo_empty: graph.eo_empty,
    };
    let total = graph.total;
    graph.tape.backward(total)?;
    apply_update(
        &graph.tape,
        &graph.mounted.task_vars(),
        bundle.task_params_mut(),
        adam,
    )?;
    Ok(losses)
}

/// Mean loss components over one epoch of alternating updates.
#[derive(Debug, Clone, Copy)]
pub struct EpochLosses {
    pub task: f64,
    pub sensitive: f64,
    pub ratio: f64,
    /// Equal-opportunity batches skipped for having no positive rows.
    pub eo_empty_batches: usize,
}

fn stream_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ epoch.wrapping_mul(0x9e3779b97f4a7c15)
        ^ stream.wrapping_mul(0xd2b74407b1ce6e93);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One pass over the training split: per batch, decoder step, estimator step,
/// then the task step. Deterministic given (seed, epoch) and the incoming
/// bundle state.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    train: &EncodedDataset,
    config: &TrainConfig,
    optimizers: &mut Optimizers,
    seed: u64,
    epoch: usize,
) -> Result<EpochLosses, TrainError> {
    let temperature = anneal_temperature(epoch, config);
    let mut sampler = GumbelSampler::new(GumbelConfig {
        temperature,
        seed: stream_seed(seed, epoch as u64, 1),
    })?;

    let mut totals = (0.0, 0.0, 0.0);
    let mut eo_empty_batches = 0usize;
    let batch_list = batches(train.len(), config.batch_size, seed, epoch);
    let batch_count = batch_list.len();
    for (batch_idx, rows) in batch_list.into_iter().enumerate() {
        let wrap = |step: &'static str| {
            move |err: TrainError| {
                let source = match err {
                    TrainError::Tensor(source @ TensorError::NonFinite { .. }) => source,
                    TrainError::Model(ModelError::Tensor(
                        source @ TensorError::NonFinite { .. },
                    )) => source,
                    other => return other,
                };
                TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    step,
                    source,
                }
            }
        };
        let batch = Batch::from_rows(train, &rows);
        step_decoder(bundle, &batch, config.variant, &mut optimizers.decoder)
            .map_err(wrap("decoder"))?;
        step_estimator(
            bundle,
            &batch,
            config.variant,
            &mut sampler,
            &mut optimizers.ratio,
        )
        .map_err(wrap("estimator"))?;
        let losses = step_task(bundle, &batch, config, &mut sampler, &mut optimizers.task)
            .map_err(wrap("task"))?;
        totals.0 += losses.task;
        totals.1 += losses.sensitive;
        totals.2 += losses.ratio;
        if losses.eo_empty {
            eo_empty_batches += 1;
        }
    }
    let denom = batch_count.max(1) as f64;
    Ok(EpochLosses {
        task: totals.0 / denom,
        sensitive: totals.1 / denom,
        ratio: totals.2 / denom,
        eo_empty_batches,
    })
}

/// What fit() optimizes during model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Smallest validation imparity (fairness variants).
    MinImparity,
    /// Largest validation micro F1 (vanilla).
    MaxMicroF1,
}

impl SelectionMode {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Vanilla => SelectionMode::MaxMicroF1,
            _ => SelectionMode::MinImparity,
        }
    }
}

/// Tracks the best validation metric and decides when patience runs out.
#[derive(Debug, Clone)]
pub struct ModelSelector {
    mode: SelectionMode,
    patience: usize,
    best: Option<(f64, usize)>,
    stale_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectorDecision {
    pub improved: bool,
    pub stop: bool,
}

impl ModelSelector {
    pub fn new(mode: SelectionMode, patience: usize) -> Self {
        Self {
            mode,
            patience,
            best: None,
            stale_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    /// Observe one epoch's metric. Strict improvement resets patience.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> SelectorDecision {
        let improved = match (self.best, self.mode) {
            (None, _) => true,
            (Some((best, _)), SelectionMode::MinImparity) => metric < best,
            (Some((best, _)), SelectionMode::MaxMicroF1) => metric > best,
        };
        if improved {
            self.best = Some((metric, epoch));
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        SelectorDecision {
            improved,
            stop: self.stale_epochs >= self.patience,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters at the best validation epoch.
    pub bundle: ModelBundle,
    pub reports: Vec<EpochReport>,
    /// Epoch index of the selected checkpoint.
    pub selected_epoch: usize,
    pub epochs_run: usize,
    /// Equal-opportunity batches skipped for lacking positive rows.
    pub eo_empty_batches: usize,
}

/// Hard predictions of the bundle on a split: (micro F1, macro F1, imparity).
pub fn evaluate_split(
    bundle: &ModelBundle,
    split: &EncodedDataset,
) -> Result<(f64, f64, f64), TrainError> {
    let predictions = bundle.predict(split.features())?;
    let (micro, macro_) = micro_macro_f1(&predictions, split.labels(), split.class_count())?;
    let imp = imparity(
        &predictions,
        split.groups(),
        split.class_count(),
        split.group_card(),
    )?;
    Ok((micro, macro_, imp))
}

/// Train one seed to completion: run up to `config.epochs` epochs with
/// per-epoch validation, early-stop on stale patience, and return the
/// checkpoint from the best validation epoch (lowest imparity, or highest
/// micro F1 for the vanilla variant).
pub fn fit(
    splits: &DataSplits,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome, TrainError> {
    config.validate(splits.train.class_count())?;
    model_config.validate()?;

    let mut bundle = ModelBundle::init(model_config.clone(), seed)?;
    let mut optimizers = Optimizers::new(&bundle, config);
    let mut selector =
        ModelSelector::new(SelectionMode::for_variant(config.variant), config.patience);

    let mut reports = Vec::new();
    let mut best_bundle = bundle.clone();
    let mut eo_empty_batches = 0usize;

    for epoch in 0..config.epochs {
        let losses =
            train_epoch(&mut bundle, &splits.train, config, &mut optimizers, seed, epoch)?;
        eo_empty_batches += losses.eo_empty_batches;
        if losses.eo_empty_batches > 0 {
            eprintln!(
                "warning: epoch {epoch}: {} equal-opportunity batches had no positive rows; fairness terms contributed 0",
                losses.eo_empty_batches
            );
        }

        let (val_micro, _, val_imparity) = evaluate_split(&bundle, &splits.validation)?;
        reports.push(EpochReport {
            epoch,
            task_loss: losses.task,
            sensitive_loss: losses.sensitive,
            ratio_loss: losses.ratio,
            temperature: anneal_temperature(epoch, config),
            val_imparity,
            val_micro_f1: val_micro,
        });

        let metric = match SelectionMode::for_variant(config.variant) {
            SelectionMode::MinImparity => val_imparity,
            SelectionMode::MaxMicroF1 => val_micro,
        };
        let decision = selector.observe(epoch, metric);
        if decision.improved {
            best_bundle = bundle.clone();
        }
        if decision.stop {
            break;
        }
    }

    let selected_epoch = selector.best().map_or(0, |(_, e)| e);
    Ok(FitOutcome {
        bundle: best_bundle,
        epochs_run: reports.len(),
        reports,
        selected_epoch,
        eo_empty_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::assert_close;
    use crate::data::{encode, load_csv, split, DatasetSchema, SplitSpec};
    use crate::model::ExtractorConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_config(input_dim: usize, group_card: usize) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                input_dim,
                hidden: vec![8],
                embed_dim: 4,
            },
            class_count: 2,
            group_card,
        }
    }

    fn random_batch(n: usize, d: usize, group_card: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Matrix::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                features.set(r, c, rng.gen_range(-1.5..1.5));
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.gen_range(0..group_card)).collect();
        let mut group_one_hot = Matrix::zeros(n, group_card);
        for (r, &g) in groups.iter().enumerate() {
            group_one_hot.set(r, g, 1.0);
        }
        Batch {
            features,
            labels,
            groups,
            group_one_hot,
            group_card,
        }
    }

    fn draw_for(batch: &Batch, variant: Variant, tau: f64, seed: u64) -> GumbelDraw {
        let mut sampler = GumbelSampler::new(GumbelConfig {
            temperature: tau,
            seed,
        })
        .unwrap();
        let rows = fairness_rows(variant, &batch.labels);
        GumbelDraw::for_rows(&mut sampler, rows.len(), batch.group_card)
    }

    #[test]
    fn anneal_schedule_reference_points() {
        let cfg = TrainConfig::default();
        assert_eq!(anneal_temperature(0, &cfg), 1.0);
        assert_eq!(anneal_temperature(49, &cfg), 1.0);
        assert_eq!(anneal_temperature(50, &cfg), 0.5);
        assert_eq!(anneal_temperature(149, &cfg), 0.25);
    }

    #[test]
    fn anneal_matches_iterative_halving_for_a_thousand_epochs() {
        let cfg = TrainConfig::default();
        let mut tau = cfg.tau0;
        for epoch in 0..=1000 {
            if epoch > 0 && epoch % cfg.anneal_period == 0 {
                tau /= cfg.anneal_factor;
            }
            assert_close(anneal_temperature(epoch, &cfg), tau, 1e-15);
        }
    }

    #[test]
    fn objective_decomposes_exactly_per_batch() {
        let batch = random_batch(12, 5, 3, 3);
        let bundle = ModelBundle::init(model_config(5, 3), 1).unwrap();
        for variant in [Variant::Tsd, Variant::Ts, Variant::Td, Variant::Vanilla] {
            let draw = draw_for(&batch, variant, 1.0, 7);
            let graph =
                build_objective(&bundle, &batch, variant, 0.1, &draw, Trainable::all()).unwrap();
            let sum = graph.task_value() + graph.sensitive_value() + graph.ratio_value();
            assert!(
                (graph.total_value() - sum).abs() <= 1e-12,
                "{variant}: {} vs {sum}",
                graph.total_value()
            );
            assert_eq!(graph.sensitive.is_some(), variant.has_sensitive_term());
            assert_eq!(graph.ratio.is_some(), variant.has_ratio_term());
        }
    }

    #[test]
    fn sensitive_term_uniform_decoder_hand_value() {
        // Zero decoder weights: log q = ln(1/6) for every row, so the term is
        // alpha * ln(1/6).
        let batch = random_batch(10, 5, 6, 4);
        let mut bundle = ModelBundle::init(model_config(5, 6), 2).unwrap();
        bundle.group_decoder.weight.values_mut().fill(0.0);
        bundle.group_decoder.bias.values_mut().fill(0.0);
        let draw = draw_for(&batch, Variant::Ts, 1.0, 0);
        let graph =
            build_objective(&bundle, &batch, Variant::Ts, 0.1, &draw, Trainable::all()).unwrap();
        assert_close(graph.sensitive_value(), 0.1 * (1.0f64 / 6.0).ln(), 1e-12);
        assert!(graph.sensitive_value() <= 0.0);

        // alpha = 0 zeroes the term.
        let graph =
            build_objective(&bundle, &batch, Variant::Ts, 0.0, &draw, Trainable::all()).unwrap();
        assert_eq!(graph.sensitive_value(), 0.0);
    }

    #[test]
    fn ratio_term_hand_value() {
        // Single sample with known scores: real 1+2, generated 1+0, so the
        // term is 0.1 * ((3) + (1)) / 2 = 0.2.
        let mut tape = Tape::new();
        let real = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let generated = tape.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let term = ratio_term(&mut tape, real, generated, 0.1).unwrap();
        assert_close(tape.value(term).item(), 0.2, 1e-15);
    }

    #[test]
    fn ratio_term_zero_weights_and_zero_alpha() {
        let batch = random_batch(8, 5, 3, 9);
        let bundle = ModelBundle::init(model_config(5, 3), 5).unwrap();
        // Ratio weights start at zero by construction.
        let draw = draw_for(&batch, Variant::Td, 1.0, 1);
        let graph =
            build_objective(&bundle, &batch, Variant::Td, 0.1, &draw, Trainable::all()).unwrap();
        assert_eq!(graph.ratio_value(), 0.0);

        let graph =
            build_objective(&bundle, &batch, Variant::Td, 0.0, &draw, Trainable::all()).unwrap();
        assert_eq!(graph.ratio_value(), 0.0);
    }

    #[test]
    fn estimator_loss_reference_points() {
        // Zero scores: ln 2. Perfectly separated scores: well under 1e-4.
        let mut tape = Tape::new();
        let real = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let gen = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let loss = estimator_loss(&mut tape, real, gen, 2).unwrap();
        assert_close(tape.value(loss).item(), 2.0f64.ln(), 1e-12);

        let mut tape = Tape::new();
        let real = tape.leaf(Tensor::matrix(2, 1, vec![10.0, 10.0]).unwrap());
        let gen = tape.leaf(Tensor::matrix(2, 1, vec![-10.0, -10.0]).unwrap());
        let loss = estimator_loss(&mut tape, real, gen, 2).unwrap();
        assert!(tape.value(loss).item() < 1e-4);
    }

    #[test]
    fn decoder_loss_reference_points() {
        // Uniform over 4 groups: ln 4. Certain prediction: 0.
        let mut tape = Tape::new();
        let logq = tape.leaf(Tensor::matrix(3, 1, vec![0.25f64.ln(); 3]).unwrap());
        let loss = decoder_loss(&mut tape, logq).unwrap();
        assert_close(tape.value(loss).item(), 4.0f64.ln(), 1e-12);

        let mut tape = Tape::new();
        let logq = tape.leaf(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        let loss = decoder_loss(&mut tape, logq).unwrap();
        assert_close(tape.value(loss).item(), 0.0, 1e-15);
    }

    #[test]
    fn estimator_steps_learn_separable_pairs() {
        // Decoder biased to always predict group 1 while the real groups are
        // all 0: the discriminator has a linearly separable problem and must
        // beat indifference (ln 2) after a few hundred steps.
        let mut batch = random_batch(16, 5, 2, 21);
        batch.groups = vec![0; 16];
        let mut one_hot = Matrix::zeros(16, 2);
        for r in 0..16 {
            one_hot.set(r, 0, 1.0);
        }
        batch.group_one_hot = one_hot;

        let mut bundle = ModelBundle::init(model_config(5, 2), 3).unwrap();
        bundle.group_decoder.weight.values_mut().fill(0.0);
        bundle
            .group_decoder
            .bias
            .values_mut()
            .copy_from_slice(&[-5.0, 5.0]);

        let mut sampler = GumbelSampler::new(GumbelConfig {
            temperature: 0.1,
            seed: 8,
        })
        .unwrap();
        let adam_cfg = AdamConfig::new(0.05, 0.0);
        let mut adam = AdamState::new(
            adam_cfg,
            &bundle
                .ratio_params()
                .iter()
                .map(|p| p.len())
                .collect::<Vec<_>>(),
        );
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let loss = step_estimator(&mut bundle, &batch, Variant::Tsd, &mut sampler, &mut adam)
                .unwrap()
                .unwrap();
            first.get_or_insert(loss);
            last = loss;
        }
        assert_close(first.unwrap(), 2.0f64.ln(), 1e-9);
        assert!(last < 2.0f64.ln(), "estimator failed to learn: {last}");
    }

    #[test]
    fn decoder_steps_learn_group_separable_embeddings() {
        // Features are the group one-hot itself, so the decoder can learn the
        // groups through the (frozen) extractor.
        let group_card = 3;
        let n = 18;
        let mut features = Matrix::zeros(n, group_card);
        let mut groups = Vec::new();
        for r in 0..n {
            let g = r % group_card;
            features.set(r, g, 1.0);
            groups.push(g);
        }
        let mut one_hot = Matrix::zeros(n, group_card);
        for (r, &g) in groups.iter().enumerate() {
            one_hot.set(r, g, 1.0);
        }
        let batch = Batch {
            features,
            labels: vec![0; n],
            groups,
            group_one_hot: one_hot,
            group_card,
        };
        let mut bundle = ModelBundle::init(model_config(group_card, group_card), 4).unwrap();
        let adam_cfg = AdamConfig::new(0.05, 0.0);
        let mut adam = AdamState::new(
            adam_cfg,
            &bundle
                .decoder_params()
                .iter()
                .map(|p| p.len())
                .collect::<Vec<_>>(),
        );
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let loss = step_decoder(&mut bundle, &batch, Variant::Tsd, &mut adam)
                .unwrap()
                .unwrap();
            first.get_or_insert(loss);
            last = loss;
        }
        assert!(last < first.unwrap() / 2.0, "{last} vs {first:?}");
    }

    #[test]
    fn steps_never_touch_other_parameter_families() {
        let batch = random_batch(10, 5, 3, 6);
        let config = TrainConfig {
            variant: Variant::Ts,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut bundle = ModelBundle::init(model_config(5, 3), 11).unwrap();
        // Make ratio weights nonzero so an accidental update would show.
        bundle.ratio_outcome.values_mut().fill(0.25);
        bundle.ratio_group.values_mut().fill(-0.5);
        let mut optimizers = Optimizers::new(&bundle, &config);
        let snapshot = |b: &ModelBundle| -> Vec<Vec<f64>> {
            b.params().iter().map(|p| p.values().to_vec()).collect()
        };

        // Step (c) on TS must move task params only.
        let before = snapshot(&bundle);
        let mut sampler = GumbelSampler::new(GumbelConfig {
            temperature: 1.0,
            seed: 0,
        })
        .unwrap();
        step_task(&mut bundle, &batch, &config, &mut sampler, &mut optimizers.task).unwrap();
        let after = snapshot(&bundle);
        let task_count = bundle.task_params().len();
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            if i < task_count {
                assert_ne!(b, a, "task param {i} should have moved");
            } else {
                assert_eq!(b, a, "non-task param {i} must stay frozen in step (c)");
            }
        }

        // Step (a) moves only the decoder family.
        let before = snapshot(&bundle);
        step_decoder(&mut bundle, &batch, config.variant, &mut optimizers.decoder).unwrap();
        let after = snapshot(&bundle);
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            if i == task_count || i == task_count + 1 {
                assert_ne!(b, a, "decoder param {i} should have moved");
            } else {
                assert_eq!(b, a, "param {i} must stay frozen in step (a)");
            }
        }

        // Step (b) moves only the ratio family.
        let before = snapshot(&bundle);
        step_estimator(
            &mut bundle,
            &batch,
            config.variant,
            &mut sampler,
            &mut optimizers.ratio,
        )
        .unwrap();
        let after = snapshot(&bundle);
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            if i >= task_count + 2 {
                assert_ne!(b, a, "ratio param {i} should have moved");
            } else {
                assert_eq!(b, a, "param {i} must stay frozen in step (b)");
            }
        }
    }

    #[test]
    fn eo_variant_restricts_terms_to_positive_rows() {
        let bundle = ModelBundle::init(model_config(5, 3), 7).unwrap();

        // All-positive batch: identical to the statistical-parity losses.
        let mut all_pos = random_batch(12, 5, 3, 13);
        all_pos.labels = vec![1; 12];
        let draw = draw_for(&all_pos, Variant::EoTsd, 1.0, 3);
        let eo = build_objective(&bundle, &all_pos, Variant::EoTsd, 0.1, &draw, Trainable::all())
            .unwrap();
        let draw = draw_for(&all_pos, Variant::Tsd, 1.0, 3);
        let sp = build_objective(&bundle, &all_pos, Variant::Tsd, 0.1, &draw, Trainable::all())
            .unwrap();
        assert_eq!(eo.sensitive_value(), sp.sensitive_value());
        assert_eq!(eo.ratio_value(), sp.ratio_value());

        // Mixed batch: equals the losses recomputed on the positive subset.
        let mut batch = random_batch(12, 5, 3, 13);
        batch.labels = vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0];
        let rows = fairness_rows(Variant::EoTsd, &batch.labels);
        assert_eq!(rows, vec![1, 2, 4, 7, 8, 10]);
        let draw = draw_for(&batch, Variant::EoTsd, 1.0, 5);
        let eo = build_objective(&bundle, &batch, Variant::EoTsd, 0.1, &draw, Trainable::all())
            .unwrap();

        let positive_batch = Batch {
            features: batch.features.gather(&rows),
            labels: rows.iter().map(|&r| batch.labels[r]).collect(),
            groups: rows.iter().map(|&r| batch.groups[r]).collect(),
            group_one_hot: batch.group_one_hot.gather(&rows),
            group_card: batch.group_card,
        };
        let draw = draw_for(&positive_batch, Variant::Tsd, 1.0, 5);
        let sub = build_objective(
            &bundle,
            &positive_batch,
            Variant::Tsd,
            0.1,
            &draw,
            Trainable::all(),
        )
        .unwrap();
        assert_close(eo.sensitive_value(), sub.sensitive_value(), 1e-12);
        assert_close(eo.ratio_value(), sub.ratio_value(), 1e-12);

        // No positives: terms vanish with the empty flag set.
        let mut no_pos = random_batch(6, 5, 3, 14);
        no_pos.labels = vec![0; 6];
        let draw = GumbelDraw {
            noise: Vec::new(),
            temperature: 1.0,
        };
        let eo = build_objective(&bundle, &no_pos, Variant::EoTsd, 0.1, &draw, Trainable::all())
            .unwrap();
        assert!(eo.eo_empty);
        assert_eq!(eo.sensitive_value(), 0.0);
        assert_eq!(eo.ratio_value(), 0.0);
        assert_eq!(eo.total_value(), eo.task_value());
    }

    #[test]
    fn selector_patience_stops_after_six_epochs_of_worsening() {
        // First observation sets the best; five stale epochs exhaust
        // patience, so a monotonically worsening run stops at its sixth epoch.
        let mut selector = ModelSelector::new(SelectionMode::MinImparity, 5);
        let mut epochs_run = 0;
        for epoch in 0..100 {
            let metric = 0.1 + 0.01 * epoch as f64;
            epochs_run += 1;
            if selector.observe(epoch, metric).stop {
                break;
            }
        }
        assert_eq!(epochs_run, 6);
        assert_eq!(selector.best(), Some((0.1, 0)));
    }

    #[test]
    fn selector_max_mode_tracks_micro_f1() {
        let mut selector = ModelSelector::new(SelectionMode::MaxMicroF1, 2);
        assert!(selector.observe(0, 0.5).improved);
        assert!(selector.observe(1, 0.7).improved);
        assert!(!selector.observe(2, 0.7).improved);
        let d = selector.observe(3, 0.6);
        assert!(!d.improved && d.stop);
        assert_eq!(selector.best(), Some((0.7, 1)));
    }

    fn gaussian_csv(n: usize, seed: u64) -> String {
        // Two well-separated label clouds; sensitive attribute independent.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::from("x1,x2,grp,label\n");
        for _ in 0..n {
            let y = rng.gen_bool(0.5);
            let mu = if y { 1.2 } else { -1.2 };
            let x1: f64 = mu + rng.gen_range(-1.0..1.0);
            let x2: f64 = -mu + rng.gen_range(-1.0..1.0);
            let g = if rng.gen_bool(0.5) { "a" } else { "b" };
            let label = if y { "pos" } else { "neg" };
            out.push_str(&format!("{x1},{x2},{g},{label}\n"));
        }
        out
    }

    fn toy_splits(n: usize, seed: u64) -> (DataSplits, ModelConfig) {
        let schema = DatasetSchema::from_json(
            r#"{
                "features": [
                    {"name": "x1", "kind": "continuous"},
                    {"name": "x2", "kind": "continuous"}
                ],
                "label": "label",
                "label_values": ["neg", "pos"],
                "sensitive": [{"name": "grp", "categories": ["a", "b"]}]
            }"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, gaussian_csv(n, seed)).unwrap();
        let table = load_csv(&path, &schema).unwrap();
        let ds = encode(&table, &schema, &["grp".into()]).unwrap();
        let splits = split(&ds, &SplitSpec::default()).unwrap();
        let mc = ModelConfig {
            extractor: ExtractorConfig {
                input_dim: ds.feature_dim(),
                hidden: vec![8],
                embed_dim: 4,
            },
            class_count: 2,
            group_card: ds.group_card(),
        };
        (splits, mc)
    }

    #[test]
    fn task_loss_decreases_on_separable_data() {
        let (splits, mc) = toy_splits(240, 5);
        let config = TrainConfig {
            variant: Variant::Vanilla,
            epochs: 50,
            patience: 60,
            learning_rate: 1e-2,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let outcome = fit(&splits, &mc, &config, 0).unwrap();
        let first = outcome.reports.first().unwrap().task_loss;
        let last = outcome.reports.last().unwrap().task_loss;
        assert!(
            last < first / 2.0,
            "task loss did not halve: {first} -> {last}"
        );
    }

    #[test]
    fn vanilla_task_family_trajectory_equals_pure_task_loop() {
        let (splits, mc) = toy_splits(120, 8);
        let config = TrainConfig {
            variant: Variant::Vanilla,
            epochs: 3,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            ..TrainConfig::default()
        };

        // Framework path.
        let seed = 1;
        let mut bundle = ModelBundle::init(mc.clone(), seed).unwrap();
        let mut optimizers = Optimizers::new(&bundle, &config);
        for epoch in 0..3 {
            train_epoch(&mut bundle, &splits.train, &config, &mut optimizers, seed, epoch)
                .unwrap();
        }

        // Pure task loop: same init, same batches, task step only.
        let mut reference = ModelBundle::init(mc, seed).unwrap();
        let adam_cfg = AdamConfig::new(config.learning_rate, config.weight_decay);
        let mut adam = AdamState::new(
            adam_cfg,
            &reference
                .task_params()
                .iter()
                .map(|p| p.len())
                .collect::<Vec<_>>(),
        );
        for epoch in 0..3 {
            for rows in batches(splits.train.len(), config.batch_size, seed, epoch) {
                let batch = Batch::from_rows(&splits.train, &rows);
                let (mut tape, mounted, _x, emb) =
                    mount_batch(&reference, &batch, Trainable::only_task()).unwrap();
                let lp = mounted.predict_target(&mut tape, emb).unwrap();
                let loss = tape.nll_loss(lp, &batch.labels).unwrap();
                tape.backward(loss).unwrap();
                apply_update(
                    &tape,
                    &mounted.task_vars(),
                    reference.task_params_mut(),
                    &mut adam,
                )
                .unwrap();
            }
        }

        for (a, b) in bundle.task_params().iter().zip(reference.task_params()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn alpha_zero_fairness_variants_match_vanilla_task_family() {
        let (splits, mc) = toy_splits(120, 12);
        let base = TrainConfig {
            variant: Variant::Vanilla,
            alpha: 0.0,
            epochs: 2,
            patience: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = |variant: Variant| {
            let config = TrainConfig {
                variant,
                ..base.clone()
            };
            let seed = 2;
            let mut bundle = ModelBundle::init(mc.clone(), seed).unwrap();
            let mut optimizers = Optimizers::new(&bundle, &config);
            for epoch in 0..2 {
                train_epoch(&mut bundle, &splits.train, &config, &mut optimizers, seed, epoch)
                    .unwrap();
            }
            bundle
                .task_params()
                .iter()
                .map(|p| p.values().to_vec())
                .collect::<Vec<_>>()
        };
        let vanilla = run(Variant::Vanilla);
        for variant in [Variant::Tsd, Variant::Ts, Variant::Td] {
            assert_eq!(run(variant), vanilla, "{variant} diverged at alpha = 0");
        }
    }

    #[test]
    fn train_epoch_is_deterministic_given_seed_and_epoch() {
        let (splits, mc) = toy_splits(100, 3);
        let config = TrainConfig {
            variant: Variant::Tsd,
            learning_rate: 1e-3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut bundle = ModelBundle::init(mc.clone(), 4).unwrap();
            let mut optimizers = Optimizers::new(&bundle, &config);
            train_epoch(&mut bundle, &splits.train, &config, &mut optimizers, 4, 0).unwrap();
            bundle
                .params()
                .iter()
                .map(|p| p.values().to_vec())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn fit_returns_best_epoch_and_is_reproducible() {
        let (splits, mc) = toy_splits(200, 6);
        let config = TrainConfig {
            variant: Variant::Tsd,
            epochs: 8,
            patience: 8,
            learning_rate: 1e-3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let o1 = fit(&splits, &mc, &config, 0).unwrap();
        let o2 = fit(&splits, &mc, &config, 0).unwrap();

        // Selected checkpoint's validation imparity is the minimum logged.
        let best = o1
            .reports
            .iter()
            .map(|r| r.val_imparity)
            .fold(f64::INFINITY, f64::min);
        assert_close(o1.reports[o1.selected_epoch].val_imparity, best, 1e-15);

        // Identical seeds give identical selections and parameters.
        assert_eq!(o1.selected_epoch, o2.selected_epoch);
        for (a, b) in o1.bundle.params().iter().zip(o2.bundle.params()) {
            assert!(a
                .values()
                .iter()
                .zip(b.values())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn diverged_parameters_abort_with_step_diagnostics() {
        // Parameters large enough to overflow the forward pass: the epoch
        // must abort naming the epoch, batch and sub-step rather than carry
        // non-finite values forward.
        let (splits, mc) = toy_splits(60, 9);
        let config = TrainConfig {
            variant: Variant::Tsd,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut bundle = ModelBundle::init(mc, 0).unwrap();
        for p in bundle.task_params_mut() {
            p.values_mut().fill(1e200);
        }
        let mut optimizers = Optimizers::new(&bundle, &config);
        let err = train_epoch(&mut bundle, &splits.train, &config, &mut optimizers, 0, 0)
            .unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch, batch, .. } => {
                assert_eq!((epoch, batch), (0, 0));
            }
            other => panic!("expected non-finite abort, got {other}"),
        }
    }

    #[test]
    fn eo_rejects_multiclass_labels() {
        let config = TrainConfig {
            variant: Variant::EoTsd,
            ..TrainConfig::default()
        };
        assert!(matches!(
            config.validate(3),
            Err(TrainError::InvalidConfig(_))
        ));
        assert!(config.validate(2).is_ok());
    }

    #[test]
    fn variant_serialization_round_trips() {
        for (variant, text) in [
            (Variant::Tsd, "\"tsd\""),
            (Variant::Ts, "\"ts\""),
            (Variant::Td, "\"td\""),
            (Variant::Vanilla, "\"vanilla\""),
            (Variant::EoTsd, "\"eo\""),
        ] {
            assert_eq!(serde_json::to_string(&variant).unwrap(), text);
            let back: Variant = serde_json::from_str(text).unwrap();
            assert_eq!(back, variant);
        }
    }
}
