//! Independent oracles shared by the integration tests. Nothing here calls
//! into the estimator or gradient code it is used to check.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, q: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, q), || rng.random_range(-scale..scale))
}

/// Direct transcription of the biased MMD² definition: three explicit
/// double loops, each kernel evaluated from scratch.
pub fn naive_mmd2(a: &Array2<f64>, b: &Array2<f64>, bandwidths: &[f64]) -> f64 {
    let kernel = |x: &[f64], y: &[f64]| -> f64 {
        let mut sq = 0.0;
        for k in 0..x.len() {
            sq += (x[k] - y[k]).powi(2);
        }
        let mut total = 0.0;
        for s in bandwidths {
            total += (-sq / (2.0 * s * s)).exp();
        }
        total / bandwidths.len() as f64
    };
    let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.outer_iter().map(|r| r.to_vec()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let (na, nb) = (ra.len() as f64, rb.len() as f64);
    let mut aa = 0.0;
    for x in &ra {
        for y in &ra {
            aa += kernel(x, y);
        }
    }
    let mut bb = 0.0;
    for x in &rb {
        for y in &rb {
            bb += kernel(x, y);
        }
    }
    let mut ab = 0.0;
    for x in &ra {
        for y in &rb {
            ab += kernel(x, y);
        }
    }
    aa / (na * na) + bb / (nb * nb) - 2.0 * ab / (na * nb)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` along one coordinate of
/// a matrix argument.
pub fn central_diff<F: Fn(&Array2<f64>) -> f64>(
    f: F,
    x: &Array2<f64>,
    idx: (usize, usize),
    h: f64,
) -> f64 {
    let mut plus = x.clone();
    plus[idx] += h;
    let mut minus = x.clone();
    minus[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Step size for every finite-difference check.
pub const FD_STEP: f64 = 1e-4;

/// Relative error with a 1e-6 denominator floor, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead of roundoff noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Reference softmax cross-entropy computed from logits by hand.
pub fn reference_ce(x: &Array2<f64>, w: &Array2<f64>, b: &[f64], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..w.ncols())
            .map(|c| (0..w.nrows()).map(|k| x[[i, k]] * w[[k, c]]).sum::<f64>() + b[c])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[label as usize];
    }
    total / labels.len() as f64
}

/// Reference softmax of `x W + b`.
pub fn reference_probs(x: &Array2<f64>, w: &Array2<f64>, b: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for i in 0..x.nrows() {
        let logits: Vec<f64> = (0..w.ncols())
            .map(|c| (0..w.nrows()).map(|k| x[[i, k]] * w[[k, c]]).sum::<f64>() + b[c])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for c in 0..w.ncols() {
            out[[i, c]] = (logits[c] - max).exp() / z;
        }
    }
    out
}

/// Office-31 pre-distances of seventeen ImageNet extractors, scaled down by
/// 1e5.
pub const OFFICE31_EXTRACTOR_DISTANCES: [(&str, f64); 17] = [
    ("SqueezeNet", 32.61),
    ("AlexNet", 18.74),
    ("GoogleNet", 15.74),
    ("ShuffleNet", 25.81),
    ("ResNet18", 18.99),
    ("Vgg16", 16.11),
    ("Vgg19", 16.17),
    ("MobileNetv2", 8.13),
    ("Nasnetmobile", 5.44),
    ("ResNet50", 19.62),
    ("ResNet101", 20.17),
    ("DenseNet201", 22.05),
    ("Inceptionv3", 5.47),
    ("Xception", 5.75),
    ("Inceptionresnetv2", 5.73),
    ("NasnetLarge", 4.04),
    ("EfficientNetB7", 1.27),
];

/// Writes one source/target pair per extractor whose mean-L2 distance is
/// exactly `value * 1e5`, plus a manifest naming them. Returns the manifest
/// path.
pub fn write_extractor_fixture(dir: &std::path::Path) -> std::path::PathBuf {
    use prpl::feature_store::{save_feature_set, FeatureSet};
    let mut entries = Vec::new();
    for (name, value) in OFFICE31_EXTRACTOR_DISTANCES {
        let offset = (value * 1e5) as f32;
        // Source rows are symmetric around 0, target rows around `offset`
        // along the first axis.
        let source = ndarray::array![[1.0f32, 0.0, 2.0], [-1.0, 0.0, -2.0]];
        let mut target = source.clone();
        target.column_mut(0).mapv_inplace(|v| v + offset);
        for (domain, data, labels) in [
            ("amazon", source, Some(vec![0, 1])),
            ("webcam", target, None),
        ] {
            let fs = FeatureSet::new(name, domain, data, labels, Some(31)).unwrap();
            let file = format!("{name}_{domain}.prplfs");
            save_feature_set(&fs, dir.join(&file)).unwrap();
            entries.push(serde_json::json!({"extractor": name, "domain": domain, "path": file}));
        }
    }
    let manifest = serde_json::json!({"num_classes": 31, "entries": entries});
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}
