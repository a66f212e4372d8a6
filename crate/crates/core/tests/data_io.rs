use std::fs;

use mkgp::data::{
    generate_synthetic, load_dataset, make_folds, normalize_features, save_dataset, LabelSet,
    ModalityMatrix, SyntheticSpec,
};
use mkgp::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn cohort_shaped_synthetic_data_has_the_requested_sizes() {
    let syn = generate_synthetic(&SyntheticSpec::new(62, 4, 5, 20, 1)).unwrap();
    let d = &syn.dataset;
    assert_eq!(d.n_subjects(), 62);
    assert_eq!(d.modalities.len(), 5);
    assert!(d.modalities.iter().all(|m| m.values.shape() == (62, 20)));
    assert_eq!(d.labels.as_ref().unwrap().n_classes(), 4);
    assert_eq!(syn.f.len(), 4 * 62);
    assert_eq!(syn.hyper.theta.shape(), (4, 5));
}

#[test]
fn saved_datasets_load_back_unchanged() {
    let syn = generate_synthetic(&SyntheticSpec::new(12, 3, 2, 4, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(dir.path(), &syn.dataset).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.subject_ids, syn.dataset.subject_ids);
    assert_eq!(back.labels, syn.dataset.labels);
    for (a, b) in back.modalities.iter().zip(&syn.dataset.modalities) {
        assert_eq!(a.id, b.id);
        // shortest round-trip float formatting is exact
        assert_eq!(a.values, b.values);
    }
    let again = tempfile::tempdir().unwrap();
    save_dataset(again.path(), &back).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let first = fs::read(dir.path().join(&name)).unwrap();
        let second = fs::read(again.path().join(&name)).unwrap();
        assert_eq!(first, second, "{name:?}");
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let err = load_dataset(std::path::Path::new("/nonexistent/manifest.toml")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn unknown_manifest_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.toml");
    fs::write(&path, "modalities = []\nbogus = 1\n").unwrap();
    assert!(load_dataset(&path).is_err());
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n * d)
        .prop_filter("rows must be nonzero", move |v| {
            v.chunks(d).all(|r| r.iter().any(|x| x.abs() > 1e-3))
        })
        .prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_columns_are_centered_and_scaled(x in (3usize..9, 1usize..6).prop_flat_map(|(n, d)| matrix(n, d))) {
        let out = normalize_features(&ModalityMatrix::new("a", x).unwrap()).unwrap();
        let n = out.values.nrows() as f64;
        for col in out.values.column_iter() {
            let mean = col.mean();
            prop_assert!(mean.abs() < 1e-9);
            let var = col.iter().map(|v| v * v).sum::<f64>() / (n - 1.0);
            prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9, "var {}", var);
        }
    }

    #[test]
    fn normalization_ignores_row_scale(x in matrix(5, 3), s in proptest::collection::vec(0.1f64..10.0, 5)) {
        let mut scaled = x.clone();
        for (i, f) in s.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*f);
        }
        let a = normalize_features(&ModalityMatrix::new("a", x).unwrap()).unwrap();
        let b = normalize_features(&ModalityMatrix::new("a", scaled).unwrap()).unwrap();
        prop_assert!((a.values - b.values).amax() < 1e-8);
    }

    #[test]
    fn folds_are_stratified_and_partition_subjects(
        index in proptest::collection::vec(0usize..4, 8..80),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels = LabelSet::from_indices(index, 4).unwrap();
        let folds = make_folds(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.n_subjects()];
        let mut sizes = Vec::new();
        for f in 0..k {
            let test = folds.test_rows(f);
            let train = folds.train_rows(f);
            prop_assert_eq!(test.len() + train.len(), labels.n_subjects());
            for &i in &test {
                seen[i] += 1;
            }
            sizes.push(test.len());
            for (c, &count) in labels.counts().iter().enumerate() {
                let in_fold = test.iter().filter(|&&i| labels.class_of(i) == c).count();
                prop_assert!(in_fold == count / k || in_fold == count.div_ceil(k));
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let again = make_folds(&labels, k, seed).unwrap();
        prop_assert_eq!(again.fold_of(), folds.fold_of());
    }
}
