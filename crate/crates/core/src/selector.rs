//! Unsupervised ranking of feature extractors by source/target distance.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::feature_store::{load_feature_set, DatasetManifest, FeatureSet};
use crate::mmd::{self, DEFAULT_MULTIPLIERS};

/// Rows per domain fed to the MMD metric unless configured otherwise.
pub const DEFAULT_MMD_MAX_SAMPLES: usize = 1000;

/// Distance used to compare a source and a target feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionMetric {
    /// L2 distance between domain means.
    MeanL2,
    /// MMD² on raw features with median-heuristic bandwidths. Each domain
    /// is subsampled (evenly strided) to at most `max_samples` rows.
    Mmd {
        multipliers: Vec<f64>,
        max_samples: usize,
    },
    /// `1 - cos(mean_source, mean_target)`.
    MeanCosine,
}

impl SelectionMetric {
    pub fn mmd_default() -> Self {
        SelectionMetric::Mmd {
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            max_samples: DEFAULT_MMD_MAX_SAMPLES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMetric::MeanL2 => "mean_l2",
            SelectionMetric::Mmd { .. } => "mmd",
            SelectionMetric::MeanCosine => "mean_cosine",
        }
    }

    /// Parses `mean_l2`, `mmd` or `mean_cosine`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mean_l2" => Ok(SelectionMetric::MeanL2),
            "mmd" => Ok(Self::mmd_default()),
            "mean_cosine" => Ok(SelectionMetric::MeanCosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?}, expected mean_l2, mmd or mean_cosine"
            ))),
        }
    }

    pub fn distance(&self, source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
        match self {
            SelectionMetric::MeanL2 => pre_distance(source, target),
            SelectionMetric::MeanCosine => mean_cosine_distance(source, target),
            SelectionMetric::Mmd {
                multipliers,
                max_samples,
            } => mmd_distance(source, target, multipliers, *max_samples),
        }
    }
}

fn check_compatible(source: &FeatureSet, target: &FeatureSet) -> Result<()> {
    if source.extractor_id() != target.extractor_id() {
        return Err(Error::ExtractorMismatch(
            source.extractor_id().to_string(),
            target.extractor_id().to_string(),
        ));
    }
    if source.d() != target.d() {
        return Err(Error::DimensionMismatch {
            expected: source.d(),
            found: target.d(),
        });
    }
    Ok(())
}

/// `|mean(source) - mean(target)|_2`, accumulated in f64.
pub fn pre_distance(source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    check_compatible(source, target)?;
    let diff = source.mean_row() - target.mean_row();
    Ok(diff.dot(&diff).sqrt())
}

/// `1 - cos` of the two domain means, in `[0, 2]`.
pub fn mean_cosine_distance(source: &FeatureSet, target: &FeatureSet) -> Result<f64> {
    check_compatible(source, target)?;
    let (ms, mt) = (source.mean_row(), target.mean_row());
    let (ns, nt) = (ms.dot(&ms).sqrt(), mt.dot(&mt).sqrt());
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::DegenerateMean);
    }
    let cos = (ms.dot(&mt) / (ns * nt)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

fn strided(x: Array2<f64>, cap: usize) -> Array2<f64> {
    let n = x.nrows();
    if n <= cap {
        return x;
    }
    let rows: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    x.select(Axis(0), &rows)
}

fn mmd_distance(
    source: &FeatureSet,
    target: &FeatureSet,
    multipliers: &[f64],
    max_samples: usize,
) -> Result<f64> {
    check_compatible(source, target)?;
    if max_samples == 0 {
        return Err(Error::InvalidConfig(
            "max_samples must be at least 1".into(),
        ));
    }
    let a = strided(source.to_f64(), max_samples);
    let b = strided(target.to_f64(), max_samples);
    let pooled = concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths");
    let bank = mmd::median_heuristic(pooled.view(), multipliers)?;
    Ok(mmd::mmd2(a.view(), b.view(), &bank)?.max(0.0))
}

/// Per-extractor distances and the argmin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub metric: String,
    pub distances: BTreeMap<String, f64>,
    pub chosen: String,
}

/// Extractor with the smallest distance; equal distances resolve to the
/// lexicographically smallest id.
pub fn argmin_extractor(distances: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    // BTreeMap iterates in id order, so strict `<` keeps the first id on ties.
    for (id, &d) in distances {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((id, d));
        }
    }
    best.map(|(id, _)| id)
}

/// Loads every extractor's source and target files, scores them with
/// `metric`, and picks the closest pair.
pub fn select_best(
    manifest: &DatasetManifest,
    source_domain: &str,
    target_domain: &str,
    metric: &SelectionMetric,
) -> Result<SelectionReport> {
    let extractors = manifest.extractors_with(source_domain, target_domain);
    if extractors.is_empty() {
        return Err(Error::EmptyManifest(format!(
            "no extractor has both {source_domain:?} and {target_domain:?}"
        )));
    }
    let scored = exec::map_slice(&extractors, |id| -> Result<f64> {
        let load = |domain: &str| {
            let path = manifest
                .path_for(id, domain)
                .expect("listed by extractors_with");
            load_feature_set(path)
        };
        let source = load(source_domain)?;
        let target = load(target_domain)?;
        let d = metric.distance(&source, &target)?;
        if !d.is_finite() {
            return Err(Error::DegenerateData(format!("distance {d} is not finite")));
        }
        Ok(d)
    });
    let mut distances = BTreeMap::new();
    for (id, result) in extractors.iter().zip(scored) {
        let d = result.map_err(|e| Error::Extractor {
            extractor: id.clone(),
            source: Box::new(e),
        })?;
        distances.insert(id.clone(), d);
    }
    let chosen = argmin_extractor(&distances).expect("non-empty").to_string();
    Ok(SelectionReport {
        metric: metric.name().to_string(),
        distances,
        chosen,
    })
}
