mod common;

use gradfair::data::{load_dataset, split, synth_biased, DataError, DatasetSpec, FeatureKind, DEFAULT_FRACTIONS};
use gradfair::harness::{run_experiment, Experiment, TrainConfig};
use proptest::prelude::*;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn as_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_partition(n in 100usize..400, seed in any::<u64>(), a in 0.2f64..0.6, b in 0.1f64..0.3) {
        let ds = synth_biased(n, 3, &[0.5], 1).unwrap();
        let fractions = (a, b, 1.0 - a - b);
        let s = split(&ds, fractions, seed).unwrap();
        let (tr, va, te) = &s.indices;
        prop_assert_eq!(tr.len(), s.train.len());
        prop_assert_eq!(va.len(), s.val.len());
        prop_assert_eq!(te.len(), s.test.len());
        let mut all: Vec<usize> = tr.iter().chain(va).chain(te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&s.indices, &split(&ds, fractions, seed).unwrap().indices);
        // labels follow their rows
        for (part, rows) in [(&s.train, tr), (&s.val, va), (&s.test, te)] {
            for (i, &r) in rows.iter().enumerate() {
                prop_assert_eq!(part.target[i], ds.target[r]);
                prop_assert_eq!(part.protected[0][i], ds.protected[0][r]);
            }
        }
    }

    #[test]
    fn train_columns_are_standardized(n in 100usize..300, d in 2usize..6, seed in any::<u64>()) {
        let ds = synth_biased(n, d, &[0.7], seed).unwrap();
        let s = split(&ds, DEFAULT_FRACTIONS, seed).unwrap();
        let x = &s.train.features;
        for j in 0..x.cols() {
            let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn unbiased_generator_has_no_label_correlation() {
    let ds = synth_biased(5000, 6, &[0.0], 11).unwrap();
    let r = pearson(&as_f64(&ds.protected[0]), &as_f64(&ds.target));
    assert!(r.abs() < 0.05, "corr(a, y) = {r}");
}

#[test]
fn fully_biased_generator_gives_plain_network_high_discrimination() {
    let ds = synth_biased(5000, 6, &[1.0], 3).unwrap();
    let leak: Vec<f64> = (0..ds.len()).map(|i| ds.features.get(i, 0)).collect();
    assert!((pearson(&leak, &as_f64(&ds.protected[0])) - 1.0).abs() < 1e-12);
    let exp = Experiment::prepare("synthetic", split(&ds, DEFAULT_FRACTIONS, 3).unwrap(), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let r = run_experiment(&exp, &cfg).unwrap();
    assert!(r.test.discrimination[0] > 0.3, "NN discrimination {}", r.test.discrimination[0]);
}

#[test]
fn generator_rejects_bad_bias() {
    assert!(matches!(synth_biased(500, 4, &[1.2], 0), Err(DataError::Synth(_))));
    assert!(matches!(synth_biased(500, 4, &[-0.1], 0), Err(DataError::Synth(_))));
    assert!(matches!(synth_biased(50, 4, &[0.5], 0), Err(DataError::Synth(_))));
}

fn bundled(name: &str) -> (DatasetSpec, gradfair::data::EncodedDataset) {
    let spec = DatasetSpec::from_file(&common::data_dir().join(name).join(format!("{name}.toml"))).unwrap();
    let ds = load_dataset(&spec).unwrap();
    (spec, ds)
}

#[test]
fn adult_loads_and_passes_audit() {
    let (spec, ds) = bundled("adult");
    assert_eq!(ds.len(), 48842);
    assert_eq!(ds.protected_names, ["gender"]);
    assert!(!ds.feature_names.iter().any(|f| f.starts_with("sex")));
    ds.audit(&spec).unwrap();
    let positive = ds.target.iter().filter(|&&y| y == 1).count() as f64 / ds.len() as f64;
    assert!((positive - 0.2393).abs() < 0.005, "positive rate {positive}");
    let women = ds.protected[0].iter().filter(|&&a| a == 1).count() as f64 / ds.len() as f64;
    assert!((women - 0.3315).abs() < 0.005, "female share {women}");
    assert!(ds.feature_kinds.contains(&FeatureKind::OneHot));
    assert!(ds.features.all_finite());
}

#[test]
fn german_loads_and_passes_audit() {
    let (spec, ds) = bundled("german");
    assert_eq!(ds.len(), 1000);
    assert_eq!(ds.protected_names, ["age"]);
    assert!(!ds.feature_names.iter().any(|f| f == "age"));
    ds.audit(&spec).unwrap();
    let good = ds.target.iter().filter(|&&y| y == 1).count();
    assert_eq!(good, 700);
}
