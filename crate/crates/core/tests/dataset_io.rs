use ndarray::Array2;
use ntkcpl::dataset::{load_features, sample_candidate_subset, ALState, FeatureSet, Format};
use ntkcpl::{seeded_rng, Error};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_and_csv_round_trips_agree(
        values in proptest::collection::vec(-1e6f64..1e6, 1..60),
        d in 1usize..4,
        labeled in any::<bool>(),
    ) {
        let n = values.len() / d;
        prop_assume!(n > 0);
        let x = Array2::from_shape_vec((n, d), values[..n * d].to_vec()).unwrap();
        let labels = labeled.then(|| (0..n).map(|i| i % 3).collect::<Vec<_>>());
        let c = if labeled { 3 } else { 0 };
        let fs = FeatureSet::new(x, labels, c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.bin");
        let csv = dir.path().join("f.csv");
        fs.save(&bin, Format::Binary).unwrap();
        fs.save(&csv, Format::Csv).unwrap();
        let from_bin = load_features(&bin, Format::Binary).unwrap();
        let from_csv = load_features(&csv, Format::Csv).unwrap();
        // the binary format stores single precision
        prop_assert_eq!(from_bin.features(), fs.features().mapv(|v| v as f32 as f64));
        // Rust float formatting round-trips exactly
        prop_assert_eq!(from_csv.features(), fs.features());
        prop_assert_eq!(from_bin.labels(), fs.labels());
        prop_assert_eq!(from_csv.labels(), fs.labels());
    }

    #[test]
    fn candidates_are_unlabeled_and_distinct(seed in any::<u64>(), pool in 1usize..80, size in 1usize..100, labeled in 0usize..20) {
        let labeled: Vec<(usize, usize)> = (0..labeled.min(pool)).map(|i| (i, 0)).collect();
        let mut state = ALState::with_labeled(pool, &labeled).unwrap();
        match sample_candidate_subset(&mut state, size, &mut seeded_rng(seed)) {
            Ok(c) => {
                prop_assert_eq!(c.len(), size.min(pool - labeled.len()));
                let set: std::collections::BTreeSet<usize> = c.iter().copied().collect();
                prop_assert_eq!(set.len(), c.len());
                prop_assert!(c.iter().all(|&i| i >= labeled.len() && i < pool));
            }
            Err(Error::EmptyPool) => prop_assert_eq!(labeled.len(), pool),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}

#[test]
fn malformed_files_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    std::fs::write(&p, "f0,f1,label\n1,2,0\n3,NaN,1\n").unwrap();
    assert!(matches!(load_features(&p, Format::Csv), Err(Error::Validation { row: 1, .. })));
    std::fs::write(&p, "f0,label\n1,0\n2\n").unwrap();
    assert!(matches!(load_features(&p, Format::Csv), Err(Error::Format(_))));
    let p = dir.path().join("missing.bin");
    assert!(matches!(load_features(&p, Format::Binary), Err(Error::Io { .. })));
}
