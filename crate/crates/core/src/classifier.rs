//! Linear softmax head, cross-entropy, analytic gradients and the minibatch
//! SGD trainer used by every training stage.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmd::{self, KernelBank, DEFAULT_MULTIPLIERS};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const HEAD_MAGIC: &[u8; 8] = b"PRPLHD01";

/// Affine map `x W + b` followed by a softmax. `W` is `d x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient of a scalar loss with respect to a head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadGradient {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            weights: Array2::zeros((d, c)),
            bias: Array1::zeros(c),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.ncols(),
                found: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "head parameters must be finite".into(),
            ));
        }
        Ok(Self { weights, bias })
    }

    /// All-zero head; its softmax output is uniform.
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            weights: Array2::zeros((d, c)),
            bias: Array1::zeros(c),
        }
    }

    pub fn d(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: x.ncols(),
            });
        }
        Ok(x.dot(&self.weights) + &self.bias)
    }

    /// Class with the highest probability per row, ties to the lower index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<u32>> {
        Ok(forward(self, x)?
            .outer_iter()
            .map(|row| argmax(row.as_slice().expect("standard layout")).0 as u32)
            .collect())
    }
}

/// Index and value of the first maximum.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Glorot-uniform weights in `[-sqrt(6/(d+C)), sqrt(6/(d+C))]`, zero bias.
pub fn init_head(d: usize, c: usize, seed: u64) -> ClassifierHead {
    let limit = (6.0 / (d + c) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Array2::from_shape_simple_fn((d, c), || rng.random_range(-limit..=limit));
    ClassifierHead {
        weights,
        bias: Array1::zeros(c),
    }
}

/// Row-wise max-subtracted softmax, in place.
pub(crate) fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    z
}

/// Class probabilities for each row of `x`.
pub fn forward(head: &ClassifierHead, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(head.logits(x)?))
}

fn check_labels(labels: &[u32], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            num_classes: c as u32,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels, logs floored at 1e-12.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[[i, l as usize]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Backpropagates `dL/dlogits` to the head parameters.
fn logits_grad_to_params(x: ArrayView2<f64>, dz: &Array2<f64>) -> HeadGradient {
    HeadGradient {
        weights: x.t().dot(dz),
        bias: dz.sum_axis(Axis(0)),
    }
}

/// `dL/dlogits` for mean cross-entropy: `(P - Y) / n`.
fn ce_logit_grad(probs: &Array2<f64>, labels: &[u32]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut dz = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        dz[[i, l as usize]] -= 1.0;
    }
    dz / n
}

/// Chain rule through the row softmax: `dz = P * (G - <G, P>)` per row.
fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut dz = grad_probs.clone();
    for (mut dz_row, p_row) in dz.outer_iter_mut().zip(probs.outer_iter()) {
        let inner = dz_row.dot(&p_row);
        dz_row.zip_mut_with(&p_row, |g, &p| *g = p * (*g - inner));
    }
    dz
}

/// Analytic gradient of the mean cross-entropy of `head` on `(x, labels)`.
pub fn grad_source_loss(
    head: &ClassifierHead,
    x: ArrayView2<f64>,
    labels: &[u32],
) -> Result<HeadGradient> {
    let probs = forward(head, x)?;
    check_labels(labels, x.nrows(), head.num_classes())?;
    if labels.is_empty() {
        return Ok(HeadGradient::zeros(head.d(), head.num_classes()));
    }
    Ok(logits_grad_to_params(x, &ce_logit_grad(&probs, labels)))
}

/// Value and gradient of `CE(F(x_lab), y) + mmd_weight * MMD²(F(x_lab), F(x_tgt))`.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub source: f64,
    pub mmd: f64,
    pub grad: HeadGradient,
}

pub fn joint_loss_and_grad(
    head: &ClassifierHead,
    x_labeled: ArrayView2<f64>,
    labels: &[u32],
    x_target: ArrayView2<f64>,
    bank: Option<&KernelBank>,
    mmd_weight: f64,
) -> Result<JointLoss> {
    let probs = forward(head, x_labeled)?;
    let source = cross_entropy(probs.view(), labels)?;
    let mut grad = logits_grad_to_params(x_labeled, &ce_logit_grad(&probs, labels));
    let mut mmd_value = 0.0;
    if let Some(bank) = bank.filter(|_| mmd_weight > 0.0) {
        let probs_t = forward(head, x_target)?;
        let (value, ga, gb) = mmd::mmd2_with_grads(probs.view(), probs_t.view(), bank)?;
        mmd_value = value;
        let ga = softmax_backward(&probs, &(ga * mmd_weight));
        let gb = softmax_backward(&probs_t, &(gb * mmd_weight));
        let from_a = logits_grad_to_params(x_labeled, &ga);
        let from_b = logits_grad_to_params(x_target, &gb);
        grad.weights += &(from_a.weights + from_b.weights);
        grad.bias += &(from_a.bias + from_b.bias);
    }
    Ok(JointLoss {
        source,
        mmd: mmd_value,
        grad,
    })
}

/// `W <- W - lr dW`, `b <- b - lr db`.
pub fn sgd_step(
    head: &ClassifierHead,
    grads: &HeadGradient,
    learning_rate: f64,
) -> Result<ClassifierHead> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            context: String::new(),
        });
    }
    if grads.weights.dim() != head.weights.dim() || grads.bias.len() != head.bias.len() {
        return Err(Error::DimensionMismatch {
            expected: head.weights.len(),
            found: grads.weights.len(),
        });
    }
    Ok(ClassifierHead {
        weights: &head.weights - &(&grads.weights * learning_rate),
        bias: &head.bias - &(&grads.bias * learning_rate),
    })
}

/// Optimiser settings shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    #[serde(alias = "batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mmd_weight: f64,
    pub l2_normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 9,
            seed: 0,
            mmd_weight: 1.0,
            l2_normalize_inputs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.mmd_weight > 0.0 && self.batch_size < 2 {
            return bad("batch_size must be at least 2 when the MMD term is enabled".into());
        }
        if !(self.mmd_weight >= 0.0 && self.mmd_weight.is_finite()) {
            return bad(format!(
                "mmd_weight must be non-negative, got {}",
                self.mmd_weight
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-stage RNG: one ChaCha stream per `(stage, epoch)` under the run seed.
fn epoch_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Bandwidths for one stage: median heuristic on the pooled current outputs
/// of both domains. Falls back to unit median when outputs coincide.
pub fn stage_kernel_bank(
    head: &ClassifierHead,
    x_labeled: ArrayView2<f64>,
    x_target: ArrayView2<f64>,
) -> Result<KernelBank> {
    let pooled = ndarray::concatenate(
        Axis(0),
        &[
            forward(head, x_labeled)?.view(),
            forward(head, x_target)?.view(),
        ],
    )
    .expect("matching class counts");
    match mmd::median_heuristic(pooled.view(), &DEFAULT_MULTIPLIERS) {
        Err(Error::DegenerateData(_)) => KernelBank::new(DEFAULT_MULTIPLIERS.to_vec()),
        other => other,
    }
}

/// Trains `head` for `config.epochs` passes over `(x_labeled, labels)`,
/// pairing each labeled minibatch with an equally sized target minibatch
/// for the MMD term. Shuffling is keyed by `(config.seed, stage, epoch)`.
pub fn train_stage(
    mut head: ClassifierHead,
    x_labeled: ArrayView2<f64>,
    labels: &[u32],
    x_target: ArrayView2<f64>,
    config: &TrainConfig,
    stage: usize,
) -> Result<(ClassifierHead, Option<KernelBank>)> {
    config.validate()?;
    check_labels(labels, x_labeled.nrows(), head.num_classes())?;
    let use_mmd = config.mmd_weight > 0.0 && x_target.nrows() > 0;
    let bank = if use_mmd {
        Some(stage_kernel_bank(&head, x_labeled, x_target)?)
    } else {
        None
    };
    let n_lab = x_labeled.nrows();
    let n_tgt = x_target.nrows();
    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, stage, epoch);
        let mut lab_order: Vec<usize> = (0..n_lab).collect();
        lab_order.shuffle(&mut rng);
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        tgt_order.shuffle(&mut rng);
        let mut tgt_cursor = 0usize;
        for (step, batch) in lab_order.chunks(config.batch_size).enumerate() {
            let xb = x_labeled.select(Axis(0), batch);
            let yb: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let xt = if use_mmd {
                let tb: Vec<usize> = (0..batch.len())
                    .map(|k| tgt_order[(tgt_cursor + k) % n_tgt])
                    .collect();
                tgt_cursor = (tgt_cursor + batch.len()) % n_tgt;
                x_target.select(Axis(0), &tb)
            } else {
                Array2::zeros((0, x_labeled.ncols()))
            };
            let loss = joint_loss_and_grad(
                &head,
                xb.view(),
                &yb,
                xt.view(),
                bank.as_ref(),
                config.mmd_weight,
            )?;
            head = sgd_step(&head, &loss.grad, config.learning_rate).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteGradient {
                    context: format!(" at stage {stage}, epoch {epoch}, step {step}"),
                },
                other => other,
            })?;
        }
    }
    Ok((head, bank))
}

/// Encodes a head as `PRPLHD01`, u32 d, u32 C, row-major W (f64), b (f64).
pub fn encode_head(head: &ClassifierHead) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (head.weights.len() + head.bias.len()));
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&(head.d() as u32).to_le_bytes());
    out.extend_from_slice(&(head.num_classes() as u32).to_le_bytes());
    for v in head.weights.iter().chain(head.bias.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<ClassifierHead> {
    if bytes.len() < 16 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::MalformedHeader("missing PRPLHD01 magic".into()));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = 8 * (d * c + c);
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let weights = Array2::from_shape_vec((d, c), values[..d * c].to_vec())
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    ClassifierHead::new(weights, Array1::from(values[d * c..].to_vec()))
}

pub fn save_head(head: &ClassifierHead, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(head)).map_err(|e| Error::from(e).with_path(path))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).with_path(path))?;
    decode_head(&bytes).map_err(|e| e.with_path(path))
}

/// Scales every row to unit L2 norm; zero rows are left as they are.
pub fn l2_normalize_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}
