//! Divergence estimate from a run's distances, the divergence-driven grid
//! tuner, and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierHead, TrainConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::feature_store::{FeatureSet, UnlabeledFeatureSet};
use crate::pseudo::{recurrent_fit, RecurrentConfig, RunReport};

/// The ideal-joint-hypothesis term of the bound needs target labels and is
/// never estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptability {
    NotEstimable,
}

/// `d_H ~= Dist_Ma + (1/T) sum_t Dist_Co_t` with its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub dist_marginal: f64,
    pub dist_conditional_mean: f64,
    pub d_h: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub p_schedule: Vec<f64>,
    pub source_risk: Option<f64>,
    pub target_risk: Option<f64>,
    pub gamma: Adaptability,
}

/// Divergence of a complete report: marginal distance of the final stage
/// plus the mean conditional distance over recurrent stages `1..=T`.
pub fn estimate_divergence(report: &RunReport) -> Result<DivergenceReport> {
    let recurrent = report.stages.iter().filter(|s| s.t > 0).count();
    if recurrent == 0 {
        return Err(Error::IncompleteReport("no recurrent stage".into()));
    }
    divergence_through(report, report.stages.last().expect("non-empty").t)
}

/// Divergence using stages `0..=t` only. For `t = 0` the stage-0
/// conditional distance stands in for the (empty) recurrent mean.
pub fn divergence_through(report: &RunReport, t: usize) -> Result<DivergenceReport> {
    let last = report
        .stages
        .iter()
        .find(|s| s.t == t)
        .ok_or_else(|| Error::IncompleteReport(format!("no stage {t}")))?;
    let window: Vec<_> = if t == 0 {
        vec![last]
    } else {
        report
            .stages
            .iter()
            .filter(|s| s.t >= 1 && s.t <= t)
            .collect()
    };
    let mut conditional = Vec::with_capacity(window.len());
    for s in &window {
        conditional.push(s.dist_conditional.ok_or_else(|| {
            Error::IncompleteReport(format!("stage {} lacks a conditional distance", s.t))
        })?);
    }
    let dist_conditional_mean = conditional.iter().sum::<f64>() / conditional.len() as f64;
    let dist_marginal = last.dist_marginal;
    Ok(DivergenceReport {
        dist_marginal,
        dist_conditional_mean,
        d_h: dist_marginal + dist_conditional_mean,
        iterations: report.config.iterations(),
        p_schedule: report.config.p_schedule().to_vec(),
        source_risk: Some(1.0 - last.source_accuracy),
        target_risk: last.accuracy.map(|a| 1.0 - a),
        gamma: Adaptability::NotEstimable,
    })
}

/// One candidate `(T, p_schedule)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    #[serde(rename = "T")]
    pub iterations: usize,
    pub p_schedule: Vec<f64>,
}

impl GridCell {
    pub fn new(iterations: usize, p_schedule: Vec<f64>) -> Self {
        Self {
            iterations,
            p_schedule,
        }
    }

    fn label(&self) -> String {
        format!("T={} p={:?}", self.iterations, self.p_schedule)
    }
}

/// Ordered list of candidate cells; ties go to the earliest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneGrid {
    pub cells: Vec<GridCell>,
}

impl TuneGrid {
    /// Varies `T` with a constant threshold `p` at every iteration.
    pub fn vary_iterations(ts: &[usize], p: f64) -> Self {
        Self {
            cells: ts.iter().map(|&t| GridCell::new(t, vec![p; t])).collect(),
        }
    }

    /// Fixes `T` to the schedules' common length and varies the schedule.
    pub fn vary_schedules(schedules: &[Vec<f64>]) -> Self {
        Self {
            cells: schedules
                .iter()
                .map(|p| GridCell::new(p.len(), p.clone()))
                .collect(),
        }
    }
}

/// One row of the tuning table. `d_h` is null when the run produced no
/// usable conditional distance (e.g. thresholds too high to select any row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    #[serde(rename = "T")]
    pub iterations: usize,
    pub p_schedule: Vec<f64>,
    #[serde(rename = "d_H")]
    pub d_h: Option<f64>,
    pub dist_marginal: f64,
    pub dist_conditional_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTable {
    pub cells: Vec<TuneRow>,
    pub chosen: GridCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best: RecurrentConfig,
    pub table: TuningTable,
}

/// Runs every grid cell (in parallel) and picks the lowest `d_H`.
///
/// The target is taken as an unlabeled view, so target accuracy can never
/// influence the choice.
pub fn tune(
    source: &FeatureSet,
    target: &UnlabeledFeatureSet,
    grid: &TuneGrid,
    tc: &TrainConfig,
) -> Result<TuneOutcome> {
    if grid.cells.is_empty() {
        return Err(Error::InvalidConfig("tuning grid is empty".into()));
    }
    let configs = grid
        .cells
        .iter()
        .map(|cell| {
            RecurrentConfig::new(cell.iterations, cell.p_schedule.clone(), tc.clone()).map_err(
                |e| Error::TuneCell {
                    cell: cell.label(),
                    source: Box::new(e),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let target = target.as_feature_set();
    let runs = exec::map_slice(&configs, |rc| recurrent_fit(source, target, rc));

    let mut rows = Vec::with_capacity(runs.len());
    for (cell, run) in grid.cells.iter().zip(runs) {
        let (_, report) = run.map_err(|e| Error::TuneCell {
            cell: cell.label(),
            source: Box::new(e),
        })?;
        let row = match estimate_divergence(&report) {
            Ok(div) => TuneRow {
                iterations: cell.iterations,
                p_schedule: cell.p_schedule.clone(),
                d_h: Some(div.d_h),
                dist_marginal: div.dist_marginal,
                dist_conditional_mean: Some(div.dist_conditional_mean),
            },
            Err(Error::IncompleteReport(_)) => TuneRow {
                iterations: cell.iterations,
                p_schedule: cell.p_schedule.clone(),
                d_h: None,
                dist_marginal: report.stages.last().map_or(f64::NAN, |s| s.dist_marginal),
                dist_conditional_mean: None,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(d) = row.d_h {
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
    }
    let (best_index, _) = best.ok_or_else(|| {
        Error::IncompleteReport("no grid cell produced a divergence estimate".into())
    })?;
    Ok(TuneOutcome {
        best: configs[best_index].clone(),
        table: TuningTable {
            cells: rows,
            chosen: grid.cells[best_index].clone(),
        },
    })
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_accuracy(head: &ClassifierHead, fs: &FeatureSet) -> Result<f64> {
    let labels = fs.labels().ok_or(Error::Unlabeled)?;
    let predicted = head.predict(fs.to_f64().view())?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::StageRecord;
    use ndarray::array;

    fn stage(t: usize, ma: f64, co: Option<f64>) -> StageRecord {
        StageRecord {
            t,
            threshold: 0.5,
            n_confident: 0,
            n_updated: 0,
            loss_source: 0.0,
            loss_mmd: 0.0,
            dist_marginal: ma,
            dist_conditional: co,
            n_confident_diagnostic: 0,
            source_accuracy: 1.0,
            accuracy: None,
        }
    }

    fn report(stages: Vec<StageRecord>, schedule: Vec<f64>) -> RunReport {
        RunReport {
            stages,
            config: RecurrentConfig::new(schedule.len(), schedule, TrainConfig::default()).unwrap(),
            seed: 0,
        }
    }

    #[test]
    fn one_iteration_sum() {
        let r = report(
            vec![stage(0, 0.9, Some(9.0)), stage(1, 0.3, Some(0.5))],
            vec![0.5],
        );
        let d = estimate_divergence(&r).unwrap();
        assert!((d.d_h - 0.8).abs() < 1e-15);
        assert_eq!(d.d_h, d.dist_marginal + d.dist_conditional_mean);
        assert_eq!(d.gamma, Adaptability::NotEstimable);
    }

    #[test]
    fn two_iteration_mean() {
        let r = report(
            vec![
                stage(0, 0.7, None),
                stage(1, 0.5, Some(0.4)),
                stage(2, 0.1, Some(0.2)),
            ],
            vec![0.5, 0.8],
        );
        let d = estimate_divergence(&r).unwrap();
        assert!((d.d_h - 0.4).abs() < 1e-15);
        let early = divergence_through(&r, 1).unwrap();
        assert!((early.d_h - 0.9).abs() < 1e-15);
    }

    #[test]
    fn missing_conditional_is_incomplete() {
        let r = report(
            vec![stage(0, 0.7, Some(1.0)), stage(1, 0.5, None)],
            vec![0.9],
        );
        assert!(matches!(
            estimate_divergence(&r),
            Err(Error::IncompleteReport(_))
        ));
        let r = report(vec![stage(0, 0.7, Some(1.0))], vec![]);
        assert!(matches!(
            estimate_divergence(&r),
            Err(Error::IncompleteReport(_))
        ));
        assert!((divergence_through(&r, 0).unwrap().d_h - 1.7).abs() < 1e-15);
    }

    fn labeled(x: ndarray::Array2<f32>, y: Vec<u32>) -> FeatureSet {
        FeatureSet::new("e", "d", x, Some(y), Some(2)).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let head = ClassifierHead::new(array![[1.0, -1.0]], array![0.0, 0.0]).unwrap();
        let fs = labeled(array![[1.0f32], [-1.0], [2.0], [-3.0]], vec![0, 1, 0, 1]);
        assert_eq!(evaluate_accuracy(&head, &fs).unwrap(), 1.0);

        let constant = ClassifierHead::new(array![[0.0, 0.0]], array![1.0, 0.0]).unwrap();
        assert_eq!(evaluate_accuracy(&constant, &fs).unwrap(), 0.5);

        let fs = labeled(array![[1.0f32], [-1.0], [2.0], [3.0]], vec![0, 1, 0, 1]);
        assert_eq!(evaluate_accuracy(&head, &fs).unwrap(), 0.75);

        let unlabeled = FeatureSet::new("e", "d", array![[1.0f32]], None, None).unwrap();
        assert!(matches!(
            evaluate_accuracy(&head, &unlabeled),
            Err(Error::Unlabeled)
        ));
    }

    #[test]
    fn accuracy_ties_go_to_lowest_class() {
        let head = ClassifierHead::zeros(1, 2);
        let fs = labeled(array![[1.0f32], [2.0]], vec![0, 1]);
        assert_eq!(evaluate_accuracy(&head, &fs).unwrap(), 0.5);
    }

    #[test]
    fn table_json_shape() {
        let row = TuneRow {
            iterations: 3,
            p_schedule: vec![0.5, 0.8, 0.9],
            d_h: Some(1.0),
            dist_marginal: 0.25,
            dist_conditional_mean: Some(0.75),
        };
        let table = TuningTable {
            cells: vec![row],
            chosen: GridCell::new(3, vec![0.5, 0.8, 0.9]),
        };
        let v = serde_json::to_value(&table).unwrap();
        assert_eq!(v["cells"][0]["d_H"], 1.0);
        assert_eq!(v["cells"][0]["T"], 3);
        assert_eq!(v["chosen"]["p_schedule"][2], 0.9);
    }

    #[test]
    fn grid_builders() {
        let g = TuneGrid::vary_iterations(&[1, 2, 3], 0.7);
        assert_eq!(g.cells[2], GridCell::new(3, vec![0.7; 3]));
        let g = TuneGrid::vary_schedules(&[vec![0.5, 0.8], vec![0.6, 0.6]]);
        assert_eq!(g.cells.len(), 2);
    }
}
