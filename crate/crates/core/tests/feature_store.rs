mod common;

use ndarray::Array2;
use proptest::prelude::*;

use prpl::feature_store::{
    decode_feature_set, encode_feature_set, load_feature_set, save_feature_set,
    synth_gaussian_domains, synth_gaussian_domains_with_truth, DatasetManifest, FeatureSet,
    SynthSpec,
};
use prpl::Error;

fn arb_feature_set() -> impl Strategy<Value = FeatureSet> {
    (1usize..12, 1usize..6, 2u32..6, any::<bool>()).prop_flat_map(|(n, d, c, labeled)| {
        (
            prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
                n * d,
            ),
            prop::collection::vec(0..c, n),
            "[a-zA-Z0-9_]{0,12}",
            "[a-z]{1,8}",
        )
            .prop_map(move |(values, labels, ext, dom)| {
                let data = Array2::from_shape_vec((n, d), values).unwrap();
                let labels = labeled.then_some(labels);
                FeatureSet::new(ext, dom, data, labels, Some(c)).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn binary_round_trip_is_bit_exact(fs in arb_feature_set()) {
        let decoded = decode_feature_set(&encode_feature_set(&fs)).unwrap();
        let bits = |f: &FeatureSet| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&decoded), bits(&fs));
        prop_assert_eq!(decoded.labels(), fs.labels());
        prop_assert_eq!(decoded.extractor_id(), fs.extractor_id());
        prop_assert_eq!(decoded.domain_id(), fs.domain_id());
        prop_assert_eq!(decoded.num_classes(), fs.num_classes());
        prop_assert_eq!(encode_feature_set(&decoded), encode_feature_set(&fs));
    }

    #[test]
    fn truncated_payload_is_rejected(fs in arb_feature_set(), cut in 1usize..8) {
        let bytes = encode_feature_set(&fs);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_feature_set(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn saved_files_are_byte_identical_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 3,
        d: 5,
        n_per_class_source: 4,
        n_per_class_target: 2,
        class_mean_separation: 3.0,
        domain_shift: 1.0,
        noise_sigma: 0.5,
    };
    let (s, _) = synth_gaussian_domains(&spec, 11).unwrap();
    let (a, b) = (dir.path().join("a.prplfs"), dir.path().join("b.prplfs"));
    save_feature_set(&s, &a).unwrap();
    save_feature_set(&s, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_feature_set(&a).unwrap(), s);
}

#[test]
fn csv_files_load_through_the_same_entry_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.csv");
    std::fs::write(
        &path,
        "# extractor=ResNet50 domain=dslr n=2 d=2 labels=1 classes=3\n0.5,-1,2\n1.5,2,0\n",
    )
    .unwrap();
    let fs = load_feature_set(&path).unwrap();
    assert_eq!(fs.extractor_id(), "ResNet50");
    assert_eq!(fs.domain_id(), "dslr");
    assert_eq!(fs.labels(), Some(&[2u32, 0][..]));
    assert_eq!(fs.data()[[1, 1]], 2.0);
}

#[test]
fn invalid_sets_are_rejected() {
    let nan = ndarray::array![[1.0f32, 2.0], [f32::NAN, 0.0]];
    assert!(matches!(
        FeatureSet::new("e", "s", nan, None, None),
        Err(Error::NonFiniteValue { row: 1 })
    ));
    let ok = ndarray::array![[1.0f32], [2.0]];
    assert!(matches!(
        FeatureSet::new("e", "s", ok.clone(), Some(vec![0, 3]), Some(3)),
        Err(Error::LabelOutOfRange { row: 1, .. })
    ));
    assert!(FeatureSet::new("e", "s", ok, Some(vec![0]), Some(3)).is_err());
    assert!(FeatureSet::new("e", "s", Array2::zeros((0, 3)), None, None).is_err());
}

#[test]
fn manifest_resolves_relative_paths_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_extractor_fixture(dir.path());
    let manifest = DatasetManifest::load(&path).unwrap();
    assert_eq!(manifest.extractors_with("amazon", "webcam").len(), 17);
    assert!(manifest
        .path_for("AlexNet", "amazon")
        .unwrap()
        .is_absolute());
    assert!(manifest.extractors_with("amazon", "dslr").is_empty());

    let dup = dir.path().join("dup.json");
    std::fs::write(
        &dup,
        r#"{"num_classes":2,"entries":[
            {"extractor":"x","domain":"a","path":"p"},
            {"extractor":"x","domain":"a","path":"q"}]}"#,
    )
    .unwrap();
    assert!(DatasetManifest::load(&dup).is_err());
}

#[test]
fn synthetic_domains_match_their_generating_parameters() {
    let spec = SynthSpec {
        num_classes: 2,
        d: 8,
        n_per_class_source: 4000,
        n_per_class_target: 4000,
        class_mean_separation: 5.0,
        domain_shift: 2.0,
        noise_sigma: 0.5,
    };
    let (s, t, truth) = synth_gaussian_domains_with_truth(&spec, 3).unwrap();
    assert_eq!((s.n(), t.n(), s.d()), (8000, 8000, 8));
    assert!((truth.shift.dot(&truth.shift).sqrt() - 2.0).abs() < 1e-12);
    for row in truth.class_means.outer_iter() {
        assert!((row.dot(&row).sqrt() - 5.0).abs() < 1e-12);
    }
    // Per-class sample means sit within 5 standard errors of the truth.
    let tol = 5.0 * 0.5 / (4000f64).sqrt();
    let (xs, xt) = (s.to_f64(), t.to_f64());
    let ys = s.labels().unwrap();
    let yt = t.labels().unwrap();
    for c in 0..2u32 {
        for k in 0..8 {
            let mean = |x: &Array2<f64>, y: &[u32]| {
                let v: Vec<f64> = (0..x.nrows())
                    .filter(|&i| y[i] == c)
                    .map(|i| x[[i, k]])
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let mu = truth.class_means[[c as usize, k]];
            assert!((mean(&xs, ys) - mu).abs() < tol);
            assert!((mean(&xt, yt) - mu - truth.shift[k]).abs() < tol);
        }
    }
}

#[test]
fn synthetic_generation_is_seeded() {
    let spec = SynthSpec {
        num_classes: 3,
        d: 4,
        n_per_class_source: 5,
        n_per_class_target: 5,
        class_mean_separation: 2.0,
        domain_shift: 1.0,
        noise_sigma: 1.0,
    };
    assert_eq!(
        synth_gaussian_domains(&spec, 9).unwrap(),
        synth_gaussian_domains(&spec, 9).unwrap()
    );
    assert_ne!(
        synth_gaussian_domains(&spec, 9).unwrap(),
        synth_gaussian_domains(&spec, 10).unwrap()
    );
}
