//! Confident pseudo-labels, the updated labeled domain, and the recurrent
//! training driver.
//!
//! A run is stage 0 (source labels, CE + MMD against the full target) then
//! `T` recurrent stages. Stage `t` re-selects confident target rows from
//! scratch with the current head at threshold `p_t`, stacks them under the
//! source, and continues training the same head on that updated domain.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    self, argmax, cross_entropy, forward, init_head, train_stage, ClassifierHead, TrainConfig,
};
use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::mmd;

/// Threshold used for stage-0 diagnostics when the schedule is empty.
pub const DEFAULT_DIAGNOSTIC_THRESHOLD: f64 = 0.5;

/// Iteration count, per-iteration thresholds and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecurrentConfig")]
pub struct RecurrentConfig {
    #[serde(rename = "T")]
    iterations: usize,
    p_schedule: Vec<f64>,
    train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecurrentConfig {
    #[serde(rename = "T")]
    iterations: usize,
    p_schedule: Vec<f64>,
    #[serde(default)]
    train: TrainConfig,
}

impl TryFrom<RawRecurrentConfig> for RecurrentConfig {
    type Error = Error;

    fn try_from(raw: RawRecurrentConfig) -> Result<Self> {
        Self::new(raw.iterations, raw.p_schedule, raw.train)
    }
}

impl RecurrentConfig {
    /// Validates `len(p_schedule) == iterations`, every `p` in `[0, 1]`,
    /// and a non-decreasing schedule.
    pub fn new(iterations: usize, p_schedule: Vec<f64>, train: TrainConfig) -> Result<Self> {
        let cfg = Self {
            iterations,
            p_schedule,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `T = 3`, `p = [0.5, 0.8, 0.9]`, default optimiser.
    pub fn standard(seed: u64) -> Self {
        Self::new(
            3,
            vec![0.5, 0.8, 0.9],
            TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )
        .expect("default schedule is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_schedule.len() != self.iterations {
            return Err(Error::InvalidConfig(format!(
                "p_schedule has {} entries but T = {}",
                self.p_schedule.len(),
                self.iterations
            )));
        }
        if let Some(p) = self.p_schedule.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!(
                "threshold {p} outside [0, 1]"
            )));
        }
        if let Some(w) = self.p_schedule.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(format!(
                "p_schedule must be non-decreasing, found {} after {}",
                w[1], w[0]
            )));
        }
        self.train.validate()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn p_schedule(&self) -> &[f64] {
        &self.p_schedule
    }

    pub fn train(&self) -> &TrainConfig {
        &self.train
    }

    /// Same schedule with a different optimiser config.
    pub fn with_train(&self, train: TrainConfig) -> Result<Self> {
        Self::new(self.iterations, self.p_schedule.clone(), train)
    }
}

/// Target rows whose top class probability strictly exceeds the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidentSet {
    pub target_indices: Vec<usize>,
    pub pseudo_labels: Vec<u32>,
    pub threshold: f64,
    pub iteration: usize,
}

impl ConfidentSet {
    pub fn len(&self) -> usize {
        self.target_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_indices.is_empty()
    }
}

fn check_threshold(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "threshold {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Selection from precomputed probabilities.
pub(crate) fn confident_from_probs(
    probs: ArrayView2<f64>,
    p: f64,
    iteration: usize,
) -> ConfidentSet {
    let mut target_indices = Vec::new();
    let mut pseudo_labels = Vec::new();
    for (j, row) in probs.outer_iter().enumerate() {
        let (class, top) = argmax(row.as_slice().expect("standard layout"));
        if top > p {
            target_indices.push(j);
            pseudo_labels.push(class as u32);
        }
    }
    ConfidentSet {
        target_indices,
        pseudo_labels,
        threshold: p,
        iteration,
    }
}

/// Rows of `target` whose maximum softmax probability under `head` is
/// strictly greater than `p`, labeled with the argmax class.
pub fn confident_pseudo_labels(
    head: &ClassifierHead,
    target: &FeatureSet,
    p: f64,
    iteration: usize,
) -> Result<ConfidentSet> {
    check_threshold(p)?;
    let probs = forward(head, target.to_f64().view())?;
    Ok(confident_from_probs(probs.view(), p, iteration))
}

/// Source rows stacked over confident target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatedDomain {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    /// `true` for rows taken from the target with a pseudo label.
    pub pseudo: Vec<bool>,
}

impl UpdatedDomain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn stack_domain(
    xs: ArrayView2<f64>,
    ys: &[u32],
    xt: ArrayView2<f64>,
    cs: &ConfidentSet,
    num_classes: u32,
) -> Result<UpdatedDomain> {
    if xs.ncols() != xt.ncols() {
        return Err(Error::DimensionMismatch {
            expected: xs.ncols(),
            found: xt.ncols(),
        });
    }
    if cs.target_indices.len() != cs.pseudo_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: cs.target_indices.len(),
            found: cs.pseudo_labels.len(),
        });
    }
    for (&row, &label) in cs.target_indices.iter().zip(&cs.pseudo_labels) {
        if row >= xt.nrows() {
            return Err(Error::IndexOutOfRange {
                index: row,
                len: xt.nrows(),
            });
        }
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
    }
    let picked = xt.select(Axis(0), &cs.target_indices);
    let features = ndarray::concatenate(Axis(0), &[xs, picked.view()]).expect("equal widths");
    let mut labels = ys.to_vec();
    labels.extend_from_slice(&cs.pseudo_labels);
    let mut pseudo = vec![false; ys.len()];
    pseudo.resize(labels.len(), true);
    Ok(UpdatedDomain {
        features,
        labels,
        pseudo,
    })
}

/// Builds the updated labeled domain from a labeled source and a confident
/// subset of the target.
pub fn build_updated_domain(
    source: &FeatureSet,
    target: &FeatureSet,
    cs: &ConfidentSet,
) -> Result<UpdatedDomain> {
    let ys = source.labels().ok_or(Error::Unlabeled)?;
    let c = source.num_classes().ok_or(Error::Unlabeled)?;
    stack_domain(source.to_f64().view(), ys, target.to_f64().view(), cs, c)
}

/// Diagnostics recorded after each training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub t: usize,
    /// Threshold that selected this stage's training rows (`p_t`) and the
    /// post-training diagnostic set. Stage 0 uses `p_1`.
    pub threshold: f64,
    /// Confident target rows in this stage's training domain (0 at stage 0).
    pub n_confident: usize,
    pub n_updated: usize,
    pub loss_source: f64,
    pub loss_mmd: f64,
    pub dist_marginal: f64,
    /// Class-conditional distance of the trained head's confident set at
    /// `threshold`; absent when that set shares no class with the source.
    pub dist_conditional: Option<f64>,
    /// Size of the post-training confident set behind `dist_conditional`.
    pub n_confident_diagnostic: usize,
    pub source_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Everything a recurrent run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageRecord>,
    pub config: RecurrentConfig,
    pub seed: u64,
}

impl RunReport {
    pub fn distance_record(&self) -> mmd::DistanceRecord {
        mmd::DistanceRecord {
            marginal: self.stages.last().map_or(0.0, |s| s.dist_marginal),
            conditional: self
                .stages
                .iter()
                .filter_map(|s| s.dist_conditional)
                .collect(),
            mmd2: self.stages.iter().map(|s| s.loss_mmd).collect(),
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.stages.last().and_then(|s| s.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Validated, f64-widened (and optionally row-normalised) inputs of a run.
struct Prepared {
    source: FeatureSet,
    target: FeatureSet,
    xs: Array2<f64>,
    xt: Array2<f64>,
    num_classes: u32,
}

fn normalized_set(fs: &FeatureSet, x: &Array2<f64>) -> Result<FeatureSet> {
    FeatureSet::new(
        fs.extractor_id(),
        fs.domain_id(),
        x.mapv(|v| v as f32),
        fs.labels().map(<[u32]>::to_vec),
        fs.num_classes(),
    )
}

fn prepare(source: &FeatureSet, target: &FeatureSet, train: &TrainConfig) -> Result<Prepared> {
    source.labels().ok_or(Error::Unlabeled)?;
    let c = source.num_classes().ok_or(Error::Unlabeled)?;
    if source.d() != target.d() {
        return Err(Error::DimensionMismatch {
            expected: source.d(),
            found: target.d(),
        });
    }
    if let Some(tc) = target
        .num_classes()
        .filter(|&tc| tc != c && target.is_labeled())
    {
        return Err(Error::InvalidConfig(format!(
            "target declares {tc} classes, source has {c}"
        )));
    }
    let mut xs = source.to_f64();
    let mut xt = target.to_f64();
    if train.l2_normalize_inputs {
        classifier::l2_normalize_rows(&mut xs);
        classifier::l2_normalize_rows(&mut xt);
        Ok(Prepared {
            source: normalized_set(source, &xs)?,
            target: normalized_set(target, &xt)?,
            xs,
            xt,
            num_classes: c,
        })
    } else {
        Ok(Prepared {
            source: source.clone(),
            target: target.clone(),
            xs,
            xt,
            num_classes: c,
        })
    }
}

fn accuracy_of(probs: ArrayView2<f64>, labels: &[u32]) -> f64 {
    let hits = probs
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.as_slice().expect("standard layout")).0 == l as usize)
        .count();
    hits as f64 / labels.len() as f64
}

struct StageInputs<'a> {
    t: usize,
    threshold: f64,
    n_confident: usize,
    labeled_x: ArrayView2<'a, f64>,
    labeled_y: &'a [u32],
}

fn record_stage(
    prep: &Prepared,
    head: &ClassifierHead,
    bank: Option<&mmd::KernelBank>,
    inputs: StageInputs<'_>,
) -> Result<StageRecord> {
    let source_labels = prep.source.labels().expect("checked in prepare");
    let probs_s = forward(head, prep.xs.view())?;
    let probs_t = forward(head, prep.xt.view())?;
    let probs_l = forward(head, inputs.labeled_x)?;
    let loss_source = cross_entropy(probs_l.view(), inputs.labeled_y)?;
    let loss_mmd = match bank {
        Some(bank) => mmd::mmd2(probs_l.view(), probs_t.view(), bank)?,
        None => 0.0,
    };
    let diag = confident_from_probs(probs_t.view(), inputs.threshold, inputs.t);
    let dist_conditional = match mmd::conditional_distance(&prep.source, &prep.target, &diag) {
        Ok(v) => Some(v),
        Err(Error::NoSharedClasses) => None,
        Err(e) => return Err(e),
    };
    Ok(StageRecord {
        t: inputs.t,
        threshold: inputs.threshold,
        n_confident: inputs.n_confident,
        n_updated: inputs.labeled_y.len(),
        loss_source,
        loss_mmd,
        dist_marginal: mmd::marginal_distance(probs_s.view(), probs_t.view())?,
        dist_conditional,
        n_confident_diagnostic: diag.len(),
        source_accuracy: accuracy_of(probs_s.view(), source_labels),
        accuracy: prep
            .target
            .labels()
            .map(|labels| accuracy_of(probs_t.view(), labels)),
    })
}

fn with_stage_context(e: Error, t: usize) -> Error {
    match e {
        Error::NonFiniteGradient { context } if !context.contains("stage") => {
            Error::NonFiniteGradient {
                context: format!(" at stage {t}{context}"),
            }
        }
        other => other,
    }
}

/// Stage-0 training followed by `T` recurrent pseudo-labeling stages.
///
/// Target labels, when present, only feed the reported accuracy.
pub fn recurrent_fit(
    source: &FeatureSet,
    target: &FeatureSet,
    rc: &RecurrentConfig,
) -> Result<(ClassifierHead, RunReport)> {
    rc.validate()?;
    let train = rc.train();
    let prep = prepare(source, target, train)?;
    let source_labels = prep.source.labels().expect("checked in prepare");
    let c = prep.num_classes as usize;

    let head = init_head(source.d(), c, train.seed);
    let (mut head, bank) = train_stage(
        head,
        prep.xs.view(),
        source_labels,
        prep.xt.view(),
        train,
        0,
    )
    .map_err(|e| with_stage_context(e, 0))?;
    let stage0_threshold = rc
        .p_schedule()
        .first()
        .copied()
        .unwrap_or(DEFAULT_DIAGNOSTIC_THRESHOLD);
    let mut stages = vec![record_stage(
        &prep,
        &head,
        bank.as_ref(),
        StageInputs {
            t: 0,
            threshold: stage0_threshold,
            n_confident: 0,
            labeled_x: prep.xs.view(),
            labeled_y: source_labels,
        },
    )?];

    for (i, &p) in rc.p_schedule().iter().enumerate() {
        let t = i + 1;
        let probs_t = forward(&head, prep.xt.view())?;
        let cs = confident_from_probs(probs_t.view(), p, t);
        let domain = stack_domain(
            prep.xs.view(),
            source_labels,
            prep.xt.view(),
            &cs,
            prep.num_classes,
        )?;
        let (next, bank) = train_stage(
            head,
            domain.features.view(),
            &domain.labels,
            prep.xt.view(),
            train,
            t,
        )
        .map_err(|e| with_stage_context(e, t))?;
        head = next;
        stages.push(record_stage(
            &prep,
            &head,
            bank.as_ref(),
            StageInputs {
                t,
                threshold: p,
                n_confident: cs.len(),
                labeled_x: domain.features.view(),
                labeled_y: &domain.labels,
            },
        )?);
    }

    Ok((
        head,
        RunReport {
            stages,
            config: rc.clone(),
            seed: train.seed,
        },
    ))
}

/// Source-only training (no MMD, no pseudo-labels) with the same optimiser
/// settings. Returns the head and, when the target is labeled, its accuracy.
pub fn source_only_baseline(
    source: &FeatureSet,
    target: &FeatureSet,
    tc: &TrainConfig,
) -> Result<(ClassifierHead, Option<f64>)> {
    let tc = TrainConfig {
        mmd_weight: 0.0,
        ..tc.clone()
    };
    tc.validate()?;
    let prep = prepare(source, target, &tc)?;
    let labels = prep.source.labels().expect("checked in prepare");
    let head = init_head(source.d(), prep.num_classes as usize, tc.seed);
    let empty = Array2::<f64>::zeros((0, source.d()));
    let (head, _) = train_stage(head, prep.xs.view(), labels, empty.view(), &tc, 0)?;
    let accuracy = match prep.target.labels() {
        Some(labels) => Some(accuracy_of(forward(&head, prep.xt.view())?.view(), labels)),
        None => None,
    };
    Ok((head, accuracy))
}
