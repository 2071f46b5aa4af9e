//! Feature-set data model, the `PRPLFS01` binary format, CSV ingestion,
//! dataset manifests and a synthetic shifted-Gaussian generator.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "PRPLFS01"
//! u32 n, u32 d, u32 label_flag (0|1), u32 num_classes (0 = undeclared)
//! u32 len, extractor_id bytes (UTF-8)
//! u32 len, domain_id bytes (UTF-8)
//! n*d f32, row-major
//! n u32 labels            (only when label_flag = 1)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"PRPLFS01";

/// An `n x d` matrix of extracted features for one (extractor, domain) pair,
/// optionally carrying class labels. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    extractor_id: String,
    domain_id: String,
    data: Array2<f32>,
    labels: Option<Vec<u32>>,
    num_classes: Option<u32>,
}

impl FeatureSet {
    /// Builds a validated feature set. `num_classes` is required when
    /// labels are given and may be declared for unlabeled sets.
    pub fn new(
        extractor_id: impl Into<String>,
        domain_id: impl Into<String>,
        data: Array2<f32>,
        labels: Option<Vec<u32>>,
        num_classes: Option<u32>,
    ) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidFeatureSet(format!(
                "shape {n}x{d}, both dimensions must be at least 1"
            )));
        }
        for (row, values) in data.outer_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row });
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: labels.len(),
                });
            }
            let c = num_classes.ok_or_else(|| {
                Error::InvalidFeatureSet("labels present without num_classes".into())
            })?;
            if c < 2 {
                return Err(Error::InvalidFeatureSet(format!(
                    "num_classes must be at least 2, got {c}"
                )));
            }
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    num_classes: c,
                });
            }
        }
        Ok(Self {
            extractor_id: extractor_id.into(),
            domain_id: domain_id.into(),
            data,
            labels,
            num_classes,
        })
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<u32> {
        self.num_classes
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Features widened to f64 for downstream arithmetic.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// Column means accumulated in f64.
    pub fn mean_row(&self) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.d());
        for row in self.data.outer_iter() {
            acc.zip_mut_with(&row, |a, &v| *a += f64::from(v));
        }
        acc / self.n() as f64
    }

    /// Drops labels, keeping any declared class count. The result can be
    /// handed to code paths that must never see ground truth.
    pub fn to_unlabeled(&self) -> UnlabeledFeatureSet {
        UnlabeledFeatureSet(FeatureSet {
            labels: None,
            ..self.clone()
        })
    }
}

/// A feature set statically known to carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledFeatureSet(FeatureSet);

impl UnlabeledFeatureSet {
    pub fn as_feature_set(&self) -> &FeatureSet {
        &self.0
    }
}

impl From<FeatureSet> for UnlabeledFeatureSet {
    fn from(fs: FeatureSet) -> Self {
        fs.to_unlabeled()
    }
}

/// Encodes a feature set into the `PRPLFS01` byte layout.
pub fn encode_feature_set(fs: &FeatureSet) -> Vec<u8> {
    let labels_bytes = fs.labels.as_ref().map_or(0, |l| 4 * l.len());
    let mut out = Vec::with_capacity(
        8 + 16 + 8 + fs.extractor_id.len() + fs.domain_id.len() + 4 * fs.data.len() + labels_bytes,
    );
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        fs.n() as u32,
        fs.d() as u32,
        u32::from(fs.labels.is_some()),
        fs.num_classes.unwrap_or(0),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in [&fs.extractor_id, &fs.domain_id] {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    for v in fs.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &fs.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedHeader(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::MalformedHeader(format!("{what} is not valid UTF-8")))
    }
}

/// Decodes the `PRPLFS01` byte layout, validating every invariant.
pub fn decode_feature_set(bytes: &[u8]) -> Result<FeatureSet> {
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(Error::MalformedHeader("missing PRPLFS01 magic".into()));
    }
    let mut cur = Cursor {
        bytes,
        pos: FEATURE_MAGIC.len(),
    };
    let n = cur.u32("n")? as usize;
    let d = cur.u32("d")? as usize;
    let label_flag = cur.u32("label_flag")?;
    let num_classes = cur.u32("num_classes")?;
    if label_flag > 1 {
        return Err(Error::MalformedHeader(format!(
            "label_flag must be 0 or 1, got {label_flag}"
        )));
    }
    let extractor_id = cur.string("extractor_id")?;
    let domain_id = cur.string("domain_id")?;

    let payload = &bytes[cur.pos..];
    let expected = (n as u64) * (d as u64) * 4 + if label_flag == 1 { n as u64 * 4 } else { 0 };
    if payload.len() as u64 != expected {
        return Err(Error::DimensionMismatch {
            expected: expected as usize,
            found: payload.len(),
        });
    }
    let (feat_bytes, label_bytes) = payload.split_at(n * d * 4);
    let values: Vec<f32> = feat_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let labels = (label_flag == 1).then(|| {
        label_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>()
    });
    let num_classes = (num_classes > 0 || label_flag == 1).then_some(num_classes);
    FeatureSet::new(extractor_id, domain_id, data, labels, num_classes)
}

/// Loads a feature set, dispatching on content: `PRPLFS01` binary, or the
/// CSV ingestion format when the file starts with `# extractor=`.
pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).with_path(path))?;
    let result = if bytes.starts_with(b"# extractor=") {
        std::str::from_utf8(&bytes)
            .map_err(|_| Error::MalformedHeader("CSV is not valid UTF-8".into()))
            .and_then(parse_csv_feature_set)
    } else {
        decode_feature_set(&bytes)
    };
    result.map_err(|e| e.with_path(path))
}

pub fn save_feature_set(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_set(fs)).map_err(|e| Error::from(e).with_path(path))
}

/// Parses the CSV ingestion format:
/// `# extractor=<id> domain=<id> n=<n> d=<d> labels=<0|1> classes=<C>`
/// followed by one comma-separated row per sample, label last when present.
pub fn parse_csv_feature_set(text: &str) -> Result<FeatureSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::MalformedHeader("missing CSV header line".into()))?;
    let mut fields = BTreeMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("bad header token {tok:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::MalformedHeader(format!("header lacks {k}=")))
    };
    let num = |k: &str| -> Result<u32> {
        get(k)?
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("{k} is not an integer")))
    };
    let extractor = get("extractor")?.to_string();
    let domain = get("domain")?.to_string();
    let n = num("n")? as usize;
    let d = num("d")? as usize;
    let labeled = match num("labels")? {
        0 => false,
        1 => true,
        v => {
            return Err(Error::MalformedHeader(format!(
                "labels must be 0 or 1, got {v}"
            )))
        }
    };
    let classes = num("classes")?;

    let width = d + usize::from(labeled);
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(if labeled { n } else { 0 });
    let mut rows = 0usize;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                found: cells.len(),
            });
        }
        for c in &cells[..d] {
            let v: f32 = c.parse().map_err(|_| {
                Error::MalformedHeader(format!("row {rows}: {c:?} is not a number"))
            })?;
            values.push(v);
        }
        if labeled {
            let l: u32 = cells[d].parse().map_err(|_| {
                Error::MalformedHeader(format!(
                    "row {rows}: label {:?} is not an integer",
                    cells[d]
                ))
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rows,
        });
    }
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let num_classes = (classes > 0 || labeled).then_some(classes);
    FeatureSet::new(
        extractor,
        domain,
        data,
        labeled.then_some(labels),
        num_classes,
    )
}

/// One `(extractor, domain) -> file` row of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub extractor: String,
    pub domain: String,
    pub path: PathBuf,
}

/// Index of extracted feature files across extractors and domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a JSON manifest. Relative entry paths are resolved against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).with_path(path))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::from(e).with_path(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for entry in &mut manifest.entries {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks that every `(extractor, domain)` pair is unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if seen.insert((&e.extractor, &e.domain), ()).is_some() {
                return Err(Error::InvalidManifest(format!(
                    "duplicate entry for extractor {} domain {}",
                    e.extractor, e.domain
                )));
            }
        }
        Ok(())
    }

    pub fn path_for(&self, extractor: &str, domain: &str) -> Option<&Path> {
        self.entries
            .iter()
            .find(|e| e.extractor == extractor && e.domain == domain)
            .map(|e| e.path.as_path())
    }

    /// Extractors that have files for both domains, sorted by id.
    pub fn extractors_with(&self, source: &str, target: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.extractor.clone())
            .filter(|x| self.path_for(x, source).is_some() && self.path_for(x, target).is_some())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Parameters of the synthetic shifted-Gaussian domain pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: u32,
    pub d: usize,
    pub n_per_class_source: usize,
    pub n_per_class_target: usize,
    /// Norm of each class mean.
    pub class_mean_separation: f64,
    /// Norm of the shift vector added to every target sample.
    pub domain_shift: f64,
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.d == 0 || self.n_per_class_source == 0 || self.n_per_class_target == 0 {
            return bad("d and per-class counts must be at least 1");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if !(self.class_mean_separation >= 0.0 && self.class_mean_separation.is_finite()) {
            return bad("class_mean_separation must be non-negative");
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return bad("domain_shift must be non-negative");
        }
        Ok(())
    }
}

/// Ground-truth geometry behind a synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub class_means: Array2<f64>,
    pub shift: Array1<f64>,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Generates `(source, target)` with class means `mu_c` of norm
/// `class_mean_separation` in random directions, target rows offset by a
/// shift of norm `domain_shift`, and isotropic noise of scale
/// `noise_sigma`. Rows are class-major; both sets carry labels.
pub fn synth_gaussian_domains(spec: &SynthSpec, seed: u64) -> Result<(FeatureSet, FeatureSet)> {
    synth_gaussian_domains_with_truth(spec, seed).map(|(s, t, _)| (s, t))
}

pub fn synth_gaussian_domains_with_truth(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(FeatureSet, FeatureSet, SynthTruth)> {
    spec.validate()?;
    let c = spec.num_classes as usize;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_means = Array2::<f64>::zeros((c, d));
    for mut row in class_means.outer_iter_mut() {
        row.assign(&(random_unit(&mut rng, d) * spec.class_mean_separation));
    }
    let shift = random_unit(&mut rng, d) * spec.domain_shift;

    let mut sample = |per_class: usize, offset: Option<&Array1<f64>>, domain: &str| {
        let mut data = Array2::<f32>::zeros((c * per_class, d));
        let mut labels = Vec::with_capacity(c * per_class);
        for (i, mut row) in data.outer_iter_mut().enumerate() {
            let class = i / per_class;
            labels.push(class as u32);
            for (k, v) in row.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                let mu = class_means[[class, k]] + offset.map_or(0.0, |s| s[k]);
                *v = (mu + spec.noise_sigma * noise) as f32;
            }
        }
        FeatureSet::new(
            "synthetic",
            domain,
            data,
            Some(labels),
            Some(spec.num_classes),
        )
    };
    let source = sample(spec.n_per_class_source, None, "source")?;
    let target = sample(spec.n_per_class_target, Some(&shift), "target")?;
    Ok((source, target, SynthTruth { class_means, shift }))
}

/// Per-class row indices for a labeled set, in ascending row order.
pub(crate) fn rows_by_class(labels: &[u32], num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        out[l as usize].push(i);
    }
    out
}

/// Column means of the selected rows, in f64.
pub(crate) fn mean_of_rows(data: &Array2<f32>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(data.ncols());
    for &r in rows {
        acc.zip_mut_with(&data.index_axis(Axis(0), r), |a, &v| *a += f64::from(v));
    }
    acc / rows.len() as f64
}

/// Appends `.prplfs` style suffixes: `<prefix>_source.prplfs` etc.
pub fn synth_output_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with("_source.prplfs"), with("_target.prplfs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> FeatureSet {
        FeatureSet::new(
            "ext",
            "dom",
            array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]],
            Some(vec![0, 1]),
            Some(2),
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_finite_with_row() {
        let err = FeatureSet::new("e", "d", array![[1.0f32], [f32::NAN]], None, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { row: 1 }));
        let err = FeatureSet::new("e", "d", array![[f32::INFINITY]], None, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { row: 0 }));
    }

    #[test]
    fn rejects_empty_and_bad_class_counts() {
        assert!(FeatureSet::new("e", "d", Array2::<f32>::zeros((0, 3)), None, None).is_err());
        assert!(FeatureSet::new("e", "d", array![[1.0f32]], Some(vec![0]), Some(1)).is_err());
        assert!(FeatureSet::new("e", "d", array![[1.0f32]], Some(vec![0]), None).is_err());
    }

    #[test]
    fn truncated_payload_is_dimension_mismatch() {
        let mut bytes = encode_feature_set(
            &FeatureSet::new("e", "d", Array2::<f32>::zeros((2, 3)), None, None).unwrap(),
        );
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(Error::DimensionMismatch {
                expected: 24,
                found: 20
            })
        ));
    }

    #[test]
    fn label_out_of_range_detected_on_load() {
        let fs = FeatureSet::new(
            "e",
            "d",
            Array2::<f32>::zeros((1, 2)),
            Some(vec![0]),
            Some(5),
        )
        .unwrap();
        let mut bytes = encode_feature_set(&fs);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(Error::LabelOutOfRange {
                label: 7,
                num_classes: 5,
                ..
            })
        ));
    }

    #[test]
    fn bad_magic_and_flag() {
        assert!(matches!(
            decode_feature_set(b"NOTMAGIC\0\0"),
            Err(Error::MalformedHeader(_))
        ));
        let mut bytes = encode_feature_set(&small());
        bytes[16..20].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn encoding_layout_is_exact() {
        let fs = FeatureSet::new("ab", "c", array![[1.5f32]], None, None).unwrap();
        let bytes = encode_feature_set(&fs);
        let mut expected = b"PRPLFS01".to_vec();
        for v in [1u32, 1, 0, 0, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"c");
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn csv_ingestion() {
        let text = "# extractor=vgg domain=amazon n=2 d=3 labels=1 classes=4\n\
                    1,2,3,0\n4.5,5,6,3\n";
        let fs = parse_csv_feature_set(text).unwrap();
        assert_eq!(fs.extractor_id(), "vgg");
        assert_eq!(fs.domain_id(), "amazon");
        assert_eq!(fs.data(), &array![[1.0f32, 2.0, 3.0], [4.5, 5.0, 6.0]]);
        assert_eq!(fs.labels(), Some(&[0u32, 3][..]));

        let short = "# extractor=x domain=y n=2 d=2 labels=0 classes=0\n1,2\n";
        assert!(matches!(
            parse_csv_feature_set(short),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 1
            })
        ));
        let bad_label = "# extractor=x domain=y n=1 d=1 labels=1 classes=3\n1,3\n";
        assert!(matches!(
            parse_csv_feature_set(bad_label),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let err = save_feature_set(&small(), "/nonexistent-dir/xyz/out.prplfs").unwrap_err();
        assert!(!err.is_validation());
    }

    #[test]
    fn unlabeled_view_strips_labels() {
        let u = small().to_unlabeled();
        assert!(u.as_feature_set().labels().is_none());
        assert_eq!(u.as_feature_set().num_classes(), Some(2));
    }

    fn spec() -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            d: 4,
            n_per_class_source: 5,
            n_per_class_target: 7,
            class_mean_separation: 3.0,
            domain_shift: 1.0,
            noise_sigma: 0.5,
        }
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let (s1, t1) = synth_gaussian_domains(&spec(), 7).unwrap();
        let (s2, t2) = synth_gaussian_domains(&spec(), 7).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!((s1.n(), s1.d()), (15, 4));
        assert_eq!(t1.n(), 21);
        let (s3, _) = synth_gaussian_domains(&spec(), 8).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn zero_shift_tiny_noise_class_means_coincide() {
        let sp = SynthSpec {
            domain_shift: 0.0,
            noise_sigma: 1e-9,
            ..spec()
        };
        let (s, t) = synth_gaussian_domains(&sp, 3).unwrap();
        let (sl, tl) = (s.labels().unwrap(), t.labels().unwrap());
        for c in 0..3 {
            let sm = mean_of_rows(s.data(), &rows_by_class(sl, 3)[c]);
            let tm = mean_of_rows(t.data(), &rows_by_class(tl, 3)[c]);
            let gap = (&sm - &tm).mapv(|v| v * v).sum().sqrt();
            assert!(gap < 1e-6, "class {c} gap {gap}");
        }
    }

    #[test]
    fn synth_rejects_bad_spec() {
        let sp = SynthSpec {
            noise_sigma: 0.0,
            ..spec()
        };
        assert!(synth_gaussian_domains(&sp, 1).is_err());
        let sp = SynthSpec {
            n_per_class_source: 0,
            ..spec()
        };
        assert!(synth_gaussian_domains(&sp, 1).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let e = ManifestEntry {
            extractor: "a".into(),
            domain: "s".into(),
            path: "x".into(),
        };
        let m = DatasetManifest {
            num_classes: 2,
            entries: vec![e.clone(), e],
        };
        assert!(m.validate().is_err());
    }
}
