use exclusion_search::dataset::{generate_synthetic, SyntheticGenConfig};
use exclusion_search::harness::{
    pareto_front_exhaustive, run_arms, run_experiment, run_search, training_sets, Arm, ExperimentConfig,
};
use exclusion_search::Error;

fn quick(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: dir.to_path_buf(),
        permutation_shuffles: 50,
        ..Default::default()
    };
    cfg.train_ms.epochs = 3;
    cfg.train_confusion.epochs = 2;
    cfg
}

#[test]
fn single_arm_gives_single_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        arms: vec![Arm::Ms],
        ..quick(tmp.path())
    };
    run_experiment(&cfg).unwrap();
    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "protocol,ms");
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn same_config_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = quick(a.path());
    ca.search.n_trials = 2;
    ca.search.epochs = 1;
    let cb = ExperimentConfig {
        out_dir: b.path().to_path_buf(),
        ..ca.clone()
    };
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    for f in [
        "summary.csv",
        "summary_detail.csv",
        "probe.csv",
        "match_report.csv",
        "pareto.csv",
        "manifest.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert!(!a.path().join("INCOMPLETE").exists());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert!(matches!(ExperimentConfig::from_toml("colour = 3"), Err(Error::Toml(_))));
    assert!(matches!(
        ExperimentConfig::from_toml("arms = []"),
        Err(Error::InvalidConfig(_))
    ));
    let partial = ExperimentConfig::from_toml("seed = 9\n[confusion]\nweight = 1.5\n").unwrap();
    assert_eq!((partial.seed, partial.confusion.weight), (9, 1.5));
}

#[test]
fn failing_stage_is_named_and_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick(tmp.path());
    cfg.generator.n_identities = 400;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Stage {
                stage: "training_sets",
                ..
            }
        ),
        "{err}"
    );
    let marker = std::fs::read_to_string(tmp.path().join("INCOMPLETE")).unwrap();
    assert!(marker.contains("training_sets"));
}

#[test]
fn training_sets_have_matching_sizes() {
    for seed in 0..3 {
        let ds = generate_synthetic(&SyntheticGenConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let (without, with) = training_sets(&ds, seed).unwrap();
        assert_eq!(without.n_persons(), 0);
        assert_eq!(with.n_persons(), ds.n_persons());
        let gap = (with.len() as f64 - without.len() as f64).abs() / without.len() as f64;
        assert!(gap <= 0.01, "sizes {} vs {}", with.len(), without.len());
    }
}

#[test]
fn combined_arm_is_no_better_than_either_mitigation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        permutation_shuffles: 0,
        ..ExperimentConfig {
            out_dir: tmp.path().to_path_buf(),
            ..Default::default()
        }
    };
    let res = run_arms(&cfg).unwrap();
    let ic = res.person_map(Arm::IndexConfusion).unwrap();
    assert!(ic <= res.person_map(Arm::Index).unwrap());
    assert!(ic <= res.person_map(Arm::Confusion).unwrap());
}

#[test]
fn pareto_front_of_fifty_trials_matches_dominance_filter() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick(tmp.path());
    cfg.search.epochs = 1;
    cfg.search.n_trials = 50;
    let bench = exclusion_search::harness::generate_benchmark(&cfg).unwrap();
    let (_, with) = training_sets(&bench.train, cfg.seed).unwrap();
    let out = run_search(&cfg, &with, &bench.validation, None).unwrap();
    assert_eq!(out.trials.len(), 50);
    assert_eq!(out.front, pareto_front_exhaustive(&out.trials));
    assert!(!out.front.is_empty());
}
