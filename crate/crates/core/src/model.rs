//! The four-part architecture: feature extractor, target predictor, sensitive
//! group decoder (with Gumbel-Softmax sampling for generated groups) and the
//! linear density-ratio scorer.
//!
//! Persistent parameters live in [`ModelBundle`]; each forward pass mounts
//! them as leaves on a fresh tape, so gradient flow per update step is
//! controlled by which parameter groups are mounted trainable.

use crate::data::Matrix;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("input has {actual} columns, model expects {expected}")]
    InputDim { expected: usize, actual: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("not a model checkpoint (bad magic)")]
    BadMagic,

    #[error("checkpoint truncated: expected {expected} parameter values, got {actual}")]
    Truncated { expected: usize, actual: usize },
}

/// MLP shape of the feature extractor: affine+ReLU per hidden layer, then a
/// final affine (no activation) into the embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub class_count: usize,
    pub group_card: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.extractor;
        if e.input_dim == 0
            || e.embed_dim == 0
            || e.hidden.contains(&0)
            || self.class_count < 2
            || self.group_card == 0
        {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One persistent parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Param {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Uniform in ±sqrt(6/(fan_in+fan_out)).
    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            shape: vec![rows, cols],
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn to_tensor(&self, requires_grad: bool) -> Tensor {
        let t = Tensor::new(self.shape.clone(), self.values.clone()).expect("param shape fixed");
        if requires_grad {
            t.with_grad()
        } else {
            t
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::glorot(input, output, rng),
            bias: Param::zeros(vec![output]),
        }
    }
}

/// All trainable state: extractor plus target head (updated by the task
/// objective), the group decoder, and the two density-ratio weight vectors.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub extractor: Vec<Linear>,
    pub target_head: Linear,
    pub group_decoder: Linear,
    /// Ratio weight over the embedding, `embed_dim x 1`.
    pub ratio_outcome: Param,
    /// Ratio weight over the group one-hot, `group_card x 1`.
    pub ratio_group: Param,
}

/// Which parameter families are mounted trainable for one tape.
#[derive(Debug, Clone, Copy)]
pub struct Trainable {
    /// Extractor and target head.
    pub task: bool,
    /// Group decoder.
    pub decoder: bool,
    /// Density-ratio weights.
    pub ratio: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Self {
            task: true,
            decoder: true,
            ratio: true,
        }
    }

    pub fn none() -> Self {
        Self {
            task: false,
            decoder: false,
            ratio: false,
        }
    }

    pub fn only_task() -> Self {
        Self {
            task: true,
            ..Self::none()
        }
    }

    pub fn only_decoder() -> Self {
        Self {
            decoder: true,
            ..Self::none()
        }
    }

    pub fn only_ratio() -> Self {
        Self {
            ratio: true,
            ..Self::none()
        }
    }
}

impl ModelBundle {
    /// Glorot weights, zero biases, zero ratio weights (the discriminator
    /// starts indifferent: score 0 means ratio 1).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &config.extractor;
        let mut dims = vec![e.input_dim];
        dims.extend(&e.hidden);
        dims.push(e.embed_dim);
        let extractor = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], &mut rng))
            .collect();
        let target_head = Linear::new(e.embed_dim, config.class_count, &mut rng);
        let group_decoder = Linear::new(e.embed_dim, config.group_card, &mut rng);
        let ratio_outcome = Param::zeros(vec![e.embed_dim, 1]);
        let ratio_group = Param::zeros(vec![config.group_card, 1]);
        Ok(Self {
            config,
            extractor,
            target_head,
            group_decoder,
            ratio_outcome,
            ratio_group,
        })
    }

    /// Parameter tensors in declaration order (the checkpoint order).
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.extractor {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.target_head.weight);
        out.push(&self.target_head.bias);
        out.push(&self.group_decoder.weight);
        out.push(&self.group_decoder.bias);
        out.push(&self.ratio_outcome);
        out.push(&self.ratio_group);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.extractor {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.target_head.weight);
        out.push(&mut self.target_head.bias);
        out.push(&mut self.group_decoder.weight);
        out.push(&mut self.group_decoder.bias);
        out.push(&mut self.ratio_outcome);
        out.push(&mut self.ratio_group);
        out
    }

    /// Extractor + target head, the family updated by the task objective.
    pub fn task_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.extractor {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.target_head.weight);
        out.push(&self.target_head.bias);
        out
    }

    pub fn task_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.extractor {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.target_head.weight);
        out.push(&mut self.target_head.bias);
        out
    }

    pub fn decoder_params(&self) -> Vec<&Param> {
        vec![&self.group_decoder.weight, &self.group_decoder.bias]
    }

    pub fn decoder_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.group_decoder.weight, &mut self.group_decoder.bias]
    }

    pub fn ratio_params(&self) -> Vec<&Param> {
        vec![&self.ratio_outcome, &self.ratio_group]
    }

    pub fn ratio_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.ratio_outcome, &mut self.ratio_group]
    }

    /// Mount every parameter as a tape leaf; `trainable` controls which
    /// families request gradients.
    pub fn mount(&self, tape: &mut Tape, trainable: Trainable) -> MountedModel {
        let mount_linear = |tape: &mut Tape, l: &Linear, rg: bool| {
            (
                tape.leaf(l.weight.to_tensor(rg)),
                tape.leaf(l.bias.to_tensor(rg)),
            )
        };
        let extractor = self
            .extractor
            .iter()
            .map(|l| mount_linear(tape, l, trainable.task))
            .collect();
        let target_head = mount_linear(tape, &self.target_head, trainable.task);
        let group_decoder = mount_linear(tape, &self.group_decoder, trainable.decoder);
        let ratio_outcome = tape.leaf(self.ratio_outcome.to_tensor(trainable.ratio));
        let ratio_group = tape.leaf(self.ratio_group.to_tensor(trainable.ratio));
        MountedModel {
            input_dim: self.config.extractor.input_dim,
            extractor,
            target_head,
            group_decoder,
            ratio_outcome,
            ratio_group,
        }
    }

    /// Hard-label predictions for a feature matrix (argmax over the target
    /// head logits; no gradients recorded).
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(
            features.rows(),
            features.cols(),
            features.data().to_vec(),
        )?);
        let mounted = self.mount(&mut tape, Trainable::none());
        let emb = mounted.extract(&mut tape, x)?;
        let logits = tape.affine(emb, mounted.target_head.0, mounted.target_head.1)?;
        let t = tape.value(logits);
        let c = self.config.class_count;
        let mut out = Vec::with_capacity(features.rows());
        for r in 0..features.rows() {
            let row = &t.values()[r * c..(r + 1) * c];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            out.push(argmax);
        }
        Ok(out)
    }
}

/// Tape handles for one mounted forward pass.
pub struct MountedModel {
    input_dim: usize,
    pub extractor: Vec<(Var, Var)>,
    pub target_head: (Var, Var),
    pub group_decoder: (Var, Var),
    pub ratio_outcome: Var,
    pub ratio_group: Var,
}

impl MountedModel {
    /// Leaf vars of the task family (extractor + target head), declaration
    /// order; used to read gradients out after backward.
    pub fn task_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self
            .extractor
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .collect();
        v.push(self.target_head.0);
        v.push(self.target_head.1);
        v
    }

    pub fn decoder_vars(&self) -> Vec<Var> {
        vec![self.group_decoder.0, self.group_decoder.1]
    }

    pub fn ratio_vars(&self) -> Vec<Var> {
        vec![self.ratio_outcome, self.ratio_group]
    }

    /// Learned representation: affine+ReLU per hidden layer, final affine.
    pub fn extract(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                actual: cols,
            });
        }
        let mut h = x;
        let last = self.extractor.len() - 1;
        for (i, &(w, b)) in self.extractor.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Class log-probabilities from the embedding.
    pub fn predict_target(&self, tape: &mut Tape, embedding: Var) -> Result<Var, ModelError> {
        let logits = tape.affine(embedding, self.target_head.0, self.target_head.1)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// Group log-probabilities from the embedding, plus the per-row log
    /// likelihood of the true groups.
    pub fn predict_sensitive(
        &self,
        tape: &mut Tape,
        embedding: Var,
        groups: &[usize],
    ) -> Result<SensitivePrediction, ModelError> {
        let logits = tape.affine(embedding, self.group_decoder.0, self.group_decoder.1)?;
        let log_probs = tape.log_softmax(logits)?;
        let true_group_log_q = tape.gather_cols(log_probs, groups)?;
        Ok(SensitivePrediction {
            log_probs,
            true_group_log_q,
        })
    }

    /// Per-row linear log density ratio: embedding . w_outcome + group . w_group.
    pub fn density_ratio(
        &self,
        tape: &mut Tape,
        embedding: Var,
        group_vec: Var,
    ) -> Result<Var, ModelError> {
        let a = tape.matmul(embedding, self.ratio_outcome)?;
        let b = tape.matmul(group_vec, self.ratio_group)?;
        Ok(tape.add(a, b)?)
    }
}

pub struct SensitivePrediction {
    pub log_probs: Var,
    /// `m x 1` of log q at each row's true group.
    pub true_group_log_q: Var,
}

/// Temperature and seed for the categorical relaxation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub seed: u64,
}

/// Stateful sampler; deterministic given (seed, draw counter).
pub struct GumbelSampler {
    temperature: f64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl GumbelSampler {
    pub fn new(config: GumbelConfig) -> Result<Self, ModelError> {
        if config.temperature <= 0.0 || !config.temperature.is_finite() {
            return Err(ModelError::Tensor(TensorError::BadTemperature(
                config.temperature,
            )));
        }
        Ok(Self {
            temperature: config.temperature,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            draws: 0,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<(), ModelError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(ModelError::Tensor(TensorError::BadTemperature(temperature)));
        }
        self.temperature = temperature;
        Ok(())
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Pre-draw Gumbel(0,1) noise: `-ln(-ln(u))` with u uniform on (0,1).
    pub fn draw_noise(&mut self, count: usize) -> Vec<f64> {
        self.draws += count as u64;
        (0..count)
            .map(|_| {
                let u: f64 = self.rng.gen::<f64>().max(f64::MIN_POSITIVE);
                -(-u.ln()).ln()
            })
            .collect()
    }

    /// Soft one-hot sample rows from probability rows; differentiable w.r.t.
    /// the probabilities.
    pub fn sample(&mut self, tape: &mut Tape, probs: Var) -> Result<Var, ModelError> {
        let noise = self.draw_noise(tape.value(probs).len());
        Ok(tape.gumbel_softmax(probs, &noise, self.temperature)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FMCKPT01";

/// Self-describing checkpoint header; `meta` is free-form (the CLI stores its
/// config echo there).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Write magic, a length-prefixed JSON header, then every parameter tensor in
/// declaration order as raw little-endian f64.
pub fn save_checkpoint(
    bundle: &ModelBundle,
    meta: serde_json::Value,
    path: &Path,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        model: bundle.config.clone(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for param in bundle.params() {
        for v in param.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointHeader), ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut bundle = ModelBundle::init(header.model.clone(), 0)?;
    let expected: usize = bundle.params().iter().map(|p| p.len()).sum();
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != expected * 8 {
        return Err(ModelError::Truncated {
            expected,
            actual: raw.len() / 8,
        });
    }
    let mut offset = 0;
    for param in bundle.params_mut() {
        for v in param.values_mut() {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&raw[offset..offset + 8]);
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    Ok((bundle, header))
}
