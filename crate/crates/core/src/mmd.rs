//! Multi-bandwidth RBF kernel, the biased (V-statistic) MMD² estimator with
//! analytic gradients, and the marginal / conditional distance diagnostics.
//!
//! The kernel is the uniform mean of `m` Gaussian kernels,
//! `kappa(x, y) = (1/m) sum_s exp(-|x - y|^2 / (2 sigma_s^2))`, and
//!
//! ```text
//! mmd2(A, B) = 1/na^2 sum_ij k(a_i, a_j) + 1/nb^2 sum_ij k(b_i, b_j)
//!            - 2/(na nb) sum_ij k(a_i, b_j)
//! ```
//!
//! including the diagonal terms. Row partial sums may run in parallel; the
//! final fold is sequential in row order so results are reproducible.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::feature_store::{mean_of_rows, rows_by_class, FeatureSet};
use crate::pseudo::ConfidentSet;

/// Multipliers applied to the median pairwise distance.
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Maximum rows inspected by [`median_heuristic`].
pub const MEDIAN_SUBSAMPLE: usize = 1000;

/// Kernel-pair count below which row sums stay on the calling thread.
const PARALLEL_MIN_PAIRS: usize = 1 << 14;

fn worth_parallel(na: usize, nb: usize) -> bool {
    (na + nb) * (na + nb) >= PARALLEL_MIN_PAIRS
}

/// RBF bandwidths whose kernels are averaged into `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidConfig(
                "kernel bank needs at least one bandwidth".into(),
            ));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth {s} must be positive"
            )));
        }
        Ok(Self { bandwidths })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn gammas(&self) -> Vec<f64> {
        self.bandwidths.iter().map(|s| 0.5 / (s * s)).collect()
    }
}

/// Evenly strided row indices, at most `cap` of them.
fn strided_rows(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

fn sq_dist(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Bandwidths `multiplier_i * median pairwise distance`, the median taken
/// over a deterministic strided subsample of at most 1000 rows.
pub fn median_heuristic(data: ArrayView2<f64>, multipliers: &[f64]) -> Result<KernelBank> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let rows = strided_rows(n, MEDIAN_SUBSAMPLE);
    let mut dists: Vec<f64> = exec::map_indices(rows.len(), |i| {
        let xi = data.row(rows[i]);
        rows[i + 1..]
            .iter()
            .map(|&j| sq_dist(xi, data.row(j)).sqrt())
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let len = dists.len();
    let mid = len / 2;
    let (lower, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if len % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    };
    if median.is_nan() || median <= 0.0 {
        return Err(Error::DegenerateData(
            "median pairwise distance is zero".into(),
        ));
    }
    KernelBank::new(multipliers.iter().map(|m| m * median).collect())
}

#[inline]
fn kernel_from_sq(sq: f64, gammas: &[f64]) -> f64 {
    gammas.iter().map(|g| (-g * sq).exp()).sum::<f64>() / gammas.len() as f64
}

/// Derivative of the kernel with respect to `|x - y|^2`, negated:
/// `(1/m) sum_s gamma_s exp(-gamma_s r^2)`.
#[inline]
fn kernel_slope_from_sq(sq: f64, gammas: &[f64]) -> f64 {
    gammas.iter().map(|g| g * (-g * sq).exp()).sum::<f64>() / gammas.len() as f64
}

/// Mean of the bank's RBF kernels evaluated at `(x, y)`.
pub fn kappa(x: ArrayView1<f64>, y: ArrayView1<f64>, bank: &KernelBank) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(kernel_from_sq(sq_dist(x, y), &bank.gammas()))
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::DegenerateData(
            "MMD needs at least one row per side".into(),
        ));
    }
    Ok(())
}

/// Row-partitioned kernel sums, either on the worker pool or inline.
struct KernelSums<'a> {
    gammas: &'a [f64],
    parallel: bool,
}

impl KernelSums<'_> {
    fn rows<F: Fn(usize) -> f64 + Send + Sync>(&self, n: usize, f: F) -> f64 {
        if self.parallel {
            exec::ordered_sum(n, f)
        } else {
            (0..n).map(f).sum()
        }
    }

    /// `sum_ij k(x_i, x_j)` using the symmetric upper triangle.
    fn within(&self, x: &ArrayView2<f64>) -> f64 {
        let n = x.nrows();
        let g = self.gammas;
        let off = self.rows(n, |i| {
            let xi = x.row(i);
            (i + 1..n)
                .map(|j| kernel_from_sq(sq_dist(xi, x.row(j)), g))
                .sum::<f64>()
        });
        n as f64 + 2.0 * off
    }

    fn across(&self, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> f64 {
        let g = self.gammas;
        self.rows(x.nrows(), |i| {
            let xi = x.row(i);
            y.outer_iter()
                .map(|yj| kernel_from_sq(sq_dist(xi, yj), g))
                .sum::<f64>()
        })
    }

    fn mmd2(&self, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
        let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
        self.within(a) / (na * na) + self.within(b) / (nb * nb)
            - 2.0 * self.across(a, b) / (na * nb)
    }
}

/// Biased MMD² between the rows of `a` and `b`.
pub fn mmd2(a: ArrayView2<f64>, b: ArrayView2<f64>, bank: &KernelBank) -> Result<f64> {
    check_pair(&a, &b)?;
    let gammas = bank.gammas();
    Ok(KernelSums {
        gammas: &gammas,
        parallel: worth_parallel(a.nrows(), b.nrows()),
    }
    .mmd2(&a, &b))
}

/// [`mmd2`] forced onto the calling thread regardless of the `parallel`
/// feature. Bitwise identical to [`mmd2`].
pub fn mmd2_sequential(a: ArrayView2<f64>, b: ArrayView2<f64>, bank: &KernelBank) -> Result<f64> {
    check_pair(&a, &b)?;
    let gammas = bank.gammas();
    Ok(KernelSums {
        gammas: &gammas,
        parallel: false,
    }
    .mmd2(&a, &b))
}

/// Gradient of the `x`-side terms of MMD² with respect to each row of `x`:
/// `2/nx^2 sum_j dk(x_i, x_j) - 2/(nx ny) sum_j dk(x_i, y_j)`.
fn grad_side(x: &ArrayView2<f64>, y: &ArrayView2<f64>, gammas: &[f64]) -> Array2<f64> {
    let parallel = worth_parallel(x.nrows(), y.nrows());
    let (nx, ny) = (x.nrows() as f64, y.nrows() as f64);
    let q = x.ncols();
    let w_within = 2.0 / (nx * nx);
    let w_across = 2.0 / (nx * ny);
    let row_grad = |i: usize| {
        let xi = x.row(i);
        let mut g = Array1::<f64>::zeros(q);
        // d/dx exp(-gamma |x-y|^2) = -2 gamma exp(..) (x - y)
        let mut accumulate = |other: ArrayView1<f64>, weight: f64| {
            let slope = kernel_slope_from_sq(sq_dist(xi, other), gammas);
            let coef = -2.0 * slope * weight;
            g.zip_mut_with(&(&xi - &other), |gk, &diff| *gk += coef * diff);
        };
        for xj in x.outer_iter() {
            accumulate(xj, w_within);
        }
        for yj in y.outer_iter() {
            accumulate(yj, -w_across);
        }
        g
    };
    let rows: Vec<Array1<f64>> = if parallel {
        exec::map_indices(x.nrows(), row_grad)
    } else {
        (0..x.nrows()).map(row_grad).collect()
    };
    let mut out = Array2::<f64>::zeros((x.nrows(), q));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    out
}

/// Analytic gradient of [`mmd2`] with respect to the rows of `a`.
pub fn grad_mmd2_wrt_a(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bank: &KernelBank,
) -> Result<Array2<f64>> {
    check_pair(&a, &b)?;
    Ok(grad_side(&a, &b, &bank.gammas()))
}

/// MMD² together with its gradients with respect to both arguments.
pub fn mmd2_with_grads(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bank: &KernelBank,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(&a, &b)?;
    let gammas = bank.gammas();
    let value = KernelSums {
        gammas: &gammas,
        parallel: worth_parallel(a.nrows(), b.nrows()),
    }
    .mmd2(&a, &b);
    Ok((
        value,
        grad_side(&a, &b, &gammas),
        grad_side(&b, &a, &gammas),
    ))
}

fn mean_rows(x: &ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty matrix")
}

/// L2 distance between the row means of two output matrices.
pub fn marginal_distance(ls: ArrayView2<f64>, lt: ArrayView2<f64>) -> Result<f64> {
    check_pair(&ls, &lt)?;
    let diff = mean_rows(&ls) - mean_rows(&lt);
    Ok(diff.dot(&diff).sqrt())
}

/// Class-averaged L2 distance between source class means and confident
/// target class means, on raw features. Classes absent from either side
/// are skipped; the average runs over the classes present in both.
pub fn conditional_distance(
    source: &FeatureSet,
    target: &FeatureSet,
    confident: &ConfidentSet,
) -> Result<f64> {
    let labels = source.labels().ok_or(Error::Unlabeled)?;
    let c = source.num_classes().ok_or(Error::Unlabeled)? as usize;
    if source.d() != target.d() {
        return Err(Error::DimensionMismatch {
            expected: source.d(),
            found: target.d(),
        });
    }
    let mut target_rows = vec![Vec::new(); c];
    for (&row, &label) in confident
        .target_indices
        .iter()
        .zip(&confident.pseudo_labels)
    {
        if row >= target.n() {
            return Err(Error::IndexOutOfRange {
                index: row,
                len: target.n(),
            });
        }
        let label = label as usize;
        if label >= c {
            return Err(Error::LabelOutOfRange {
                row,
                label: label as u32,
                num_classes: c as u32,
            });
        }
        target_rows[label].push(row);
    }
    let source_rows = rows_by_class(labels, c);
    let mut total = 0.0;
    let mut shared = 0usize;
    for (s_rows, t_rows) in source_rows.iter().zip(&target_rows) {
        if s_rows.is_empty() || t_rows.is_empty() {
            continue;
        }
        let diff = mean_of_rows(source.data(), s_rows) - mean_of_rows(target.data(), t_rows);
        total += diff.dot(&diff).sqrt();
        shared += 1;
    }
    if shared == 0 {
        return Err(Error::NoSharedClasses);
    }
    Ok(total / shared as f64)
}

/// Distances gathered over a recurrent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub marginal: f64,
    pub conditional: Vec<f64>,
    pub mmd2: Vec<f64>,
}
