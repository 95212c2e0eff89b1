use std::fs;
use std::path::Path;

use sep_core::pipeline::{hash_path, run, Outcome, PipelineConfig, RunManifest, Stage};
use sep_core::Error;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(dir, 11);
    cfg.synth.n_households = 60;
    cfg.synth.image_size = 16;
    cfg.split.n_train = 40;
    cfg.split.n_test = 15;
    cfg.preprocess.image_size = 16;
    cfg.extractor.train.epochs = 1;
    cfg.extractor.train.batch_size = 8;
    cfg.search.n_iter = 1;
    cfg.search.k_folds = 3;
    cfg.search.space.rf_n_trees = [10, 15];
    cfg.search.space.gbt_n_rounds = [10, 15];
    cfg
}

fn parse(text: &str) -> Result<PipelineConfig, Vec<String>> {
    match PipelineConfig::from_json(text, Path::new("/tmp")) {
        Ok(c) => Ok(c),
        Err(Error::Config(e)) => Err(e),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn minimal_config_gets_defaults() {
    let cfg = parse(r#"{"output_dir": "o", "seed": 3}"#).unwrap();
    assert_eq!(cfg.output_dir, Path::new("/tmp/o"));
    assert_eq!((cfg.split.n_train, cfg.split.n_test), (800, 175));
    assert_eq!(cfg.search.k_folds, 10);
    assert_eq!(cfg.models.predictor_sets.len() * cfg.models.algorithms.len(), 9);
    assert!(cfg.uses_synthetic_inputs());
}

#[test]
fn negative_seed_is_one_error() {
    let errs = parse(r#"{"output_dir": "o", "seed": -4}"#).unwrap_err();
    assert_eq!(errs.len(), 1, "{errs:?}");
    assert!(errs[0].contains("seed"));
}

#[test]
fn every_problem_is_reported() {
    let errs = parse(r#"{"output_dir": "o", "seed": 1, "split": {"n_train": 1}, "shap": {"top_n": 0}, "seeed": 2}"#)
        .unwrap_err();
    assert_eq!(errs.len(), 3, "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("seeed")));
}

#[test]
fn unknown_nested_keys_are_rejected() {
    let errs = parse(r#"{"output_dir": "o", "seed": 1, "search": {"k_fold": 5}}"#).unwrap_err();
    assert!(errs[0].contains("k_fold"), "{errs:?}");
}

#[test]
fn partial_external_inputs_are_rejected() {
    let errs = parse(r#"{"output_dir": "o", "seed": 1, "inputs": {"cohort": "nope.csv"}}"#).unwrap_err();
    assert!(errs.iter().any(|e| e.contains("cohort, manifest and raster")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("does not exist")), "{errs:?}");
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ORDER {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert_eq!("all".parse::<Stage>().unwrap(), Stage::All);
    assert!("fitt".parse::<Stage>().is_err());
}

#[test]
fn missing_dependency_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(Stage::Fit, &tiny(dir.path()), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    match err {
        Error::MissingDependency { requires, .. } => assert_eq!(requires, "extract"),
        e => panic!("{e}"),
    }
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn held_lock_refuses_second_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "").unwrap();
    assert!(run(Stage::Synth, &tiny(dir.path()), false).is_err());
}

#[test]
fn full_run_is_idempotent_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run(Stage::All, &cfg, false).unwrap();
    assert!(first.iter().all(|(_, o)| *o == Outcome::Ran));
    let report = fs::read(dir.path().join("report/report.json")).unwrap();
    let hashes: Vec<String> =
        Stage::ORDER.iter().map(|s| hash_path(&dir.path().join(s.dir_name())).unwrap()).collect();

    let second = run(Stage::All, &cfg, false).unwrap();
    assert!(second.iter().all(|(_, o)| *o == Outcome::Skipped));

    fs::remove_file(dir.path().join("features/wall.csv")).unwrap();
    let third = run(Stage::All, &cfg, false).unwrap();
    let ran: Vec<Stage> = third.iter().filter(|(_, o)| *o == Outcome::Ran).map(|(s, _)| *s).collect();
    assert_eq!(ran, vec![Stage::Extract]);
    let after: Vec<String> =
        Stage::ORDER.iter().map(|s| hash_path(&dir.path().join(s.dir_name())).unwrap()).collect();
    assert_eq!(hashes, after);

    let forced = run(Stage::Split, &cfg, true).unwrap();
    assert_eq!(forced, vec![(Stage::Split, Outcome::Ran)]);
    assert_eq!(fs::read(dir.path().join("report/report.json")).unwrap(), report);

    let manifest = RunManifest::load(&dir.path().join("run_manifest.json")).unwrap();
    assert_eq!(manifest.stages.len(), Stage::ORDER.len());
    let extractor = &manifest.stages["train-extractor"];
    assert!(extractor.inputs.iter().all(|i| !i.contains("measures")), "{:?}", extractor.inputs);

    let labels: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("split/labels_train.json")).unwrap()).unwrap();
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("split/split.json")).unwrap()).unwrap();
    let n_train = split["train_ids"].as_array().unwrap().len();
    assert_eq!(labels["labels"].as_object().unwrap().len(), n_train);

    let report: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(report["constants"]["n_fitted_models"], 27);
    assert_eq!(report["constants"]["complete_width"], 390);
    assert_eq!(report["reduced"].as_array().unwrap().len(), 3);
}

#[test]
fn config_change_reruns_only_affected_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.models.algorithms = vec![sep_core::tabular::Algorithm::RandomForest];
    run(Stage::All, &cfg, false).unwrap();
    cfg.shap.top_n = 2;
    let out = run(Stage::All, &cfg, false).unwrap();
    let ran: Vec<Stage> = out.iter().filter(|(_, o)| *o == Outcome::Ran).map(|(s, _)| *s).collect();
    assert_eq!(ran, vec![Stage::Explain, Stage::Report]);
}

#[test]
fn external_inputs_skip_synth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("gen"));
    run(Stage::Synth, &cfg, false).unwrap();
    let synth = dir.path().join("gen/synth");
    let text = format!(
        r#"{{"output_dir": "ext", "seed": 11, "split": {{"n_train": 40, "n_test": 15}},
            "inputs": {{"cohort": "{0}/survey.csv", "manifest": "{0}/manifest.jsonl", "raster": "{0}/scene.png"}}}}"#,
        synth.display()
    );
    let ext = PipelineConfig::from_json(&text, dir.path()).unwrap();
    assert!(!ext.uses_synthetic_inputs());
    assert!(run(Stage::Synth, &ext, false).is_err());
    run(Stage::Sep, &ext, false).unwrap();
    assert_eq!(
        fs::read(dir.path().join("ext/sep/measures.csv")).unwrap(),
        {
            run(Stage::Sep, &cfg, false).unwrap();
            fs::read(dir.path().join("gen/sep/measures.csv")).unwrap()
        }
    );
}
