use std::fs;

use restcal::adapt::evaluate;
use restcal::config::RunConfig;
use restcal::eegpack::PackLoader;
use restcal::par;
use restcal::pipeline::{
    adapt_target, calibrate_target, eval_target, export_target_features, load_result, load_stage1, load_target,
    prepare_dataset, run_pipeline, run_target, target_dir, train_target, Audit,
};
use restcal::synthgen::SynthConfig;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        synth: SynthConfig {
            n_subjects: 3,
            trials_per_class: 4,
            rs_trials_per_subject: 2,
            ..SynthConfig::default()
        },
        sweep_fractions: vec![0.5, 1.0],
        output: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    cfg.calib.steps = 5;
    cfg.adapt.epochs = 2;
    cfg.derive_seeds();
    cfg
}

#[test]
fn pipeline_writes_artifacts_and_clean_audit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = run_pipeline(&cfg, &["S2".to_string()], false).unwrap();
    assert_eq!(report.subjects.len(), 1);
    let t = target_dir(&cfg, "S2");
    for f in ["stage1.ckpt", "history.jsonl", "audit.json", "adapted.ckpt", "adapt.json", "result.json"] {
        assert!(t.join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("report.tsv").is_file());
    let audit: Audit = serde_json::from_str(&fs::read_to_string(t.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit.target_reads, 0);
    assert_eq!(audit.subjects_read, vec!["S1".to_string(), "S3".to_string()]);
    assert_eq!(load_result(&cfg, "S2").unwrap(), report.subjects[0]);
    // 2 rest epochs per task trial plus 2 per rest recording, times 2 classes
    let calibrated = report.subjects[0].calibrated + report.subjects[0].flagged;
    assert_eq!(calibrated, (2 * 4 + 2 * 2) * 2);
}

#[test]
fn staged_calls_reproduce_the_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let loader = PackLoader::open(&prepare_dataset(&cfg).unwrap()).unwrap();
    let whole = run_target(&cfg, &loader, "S1", false).unwrap();

    let staged_dir = tempfile::tempdir().unwrap();
    let cfg2 = RunConfig {
        output: staged_dir.path().to_path_buf(),
        ..cfg.clone()
    };
    let s1 = train_target(&cfg2, &loader, "S1").unwrap();
    calibrate_target(&cfg2, &loader, &s1, "S1").unwrap();
    let reloaded = load_stage1(&cfg2, "S1").unwrap();
    assert_eq!(reloaded.model.fingerprint(), s1.model.fingerprint());
    adapt_target(&cfg2, &reloaded, "S1").unwrap();
    let staged = eval_target(&cfg2, &loader, "S1").unwrap();
    assert_eq!(staged.accuracy, whole.accuracy);
    assert_eq!(staged.baseline_accuracy, whole.baseline_accuracy);
    assert_eq!(staged.checkpoint, whole.checkpoint);

    let table = export_target_features(&cfg2, &loader, "S1").unwrap();
    let data = load_target(&cfg2, &loader, "S1").unwrap();
    assert_eq!(table.rows.len(), data.ts.len() + data.rs.len() + staged.calibrated);
}

#[test]
fn sweep_reuses_stage1_and_full_fraction_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let loader = PackLoader::open(&prepare_dataset(&cfg).unwrap()).unwrap();
    let r = run_target(&cfg, &loader, "S3", true).unwrap();
    assert_eq!(r.sweep.len(), 2);
    let stage1 = load_stage1(&cfg, "S3").unwrap();
    assert!(r.sweep.iter().all(|row| row.base_checkpoint == stage1.model.fingerprint()));
    let full = r.sweep.iter().find(|row| row.fraction == 1.0).unwrap();
    assert_eq!(full.accuracy, r.accuracy);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let run = |workers: usize| {
        par::set_workers(workers);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let loader = PackLoader::open(&prepare_dataset(&cfg).unwrap()).unwrap();
        run_target(&cfg, &loader, "S1", false).unwrap()
    };
    let seq = run(1);
    let par_ = run(0);
    assert_eq!(seq, par_);
}

#[test]
fn evaluation_leaves_the_model_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let loader = PackLoader::open(&prepare_dataset(&cfg).unwrap()).unwrap();
    let s1 = train_target(&cfg, &loader, "S2").unwrap();
    let data = load_target(&cfg, &loader, "S2").unwrap();
    let before = s1.model.clone();
    let a = evaluate(&s1.model, &data.ts).unwrap();
    let b = evaluate(&s1.model, &data.ts).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, s1.model);
    let rows: usize = a.confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    assert_eq!(rows, data.ts.len());
}

#[test]
fn unknown_target_and_empty_targets_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = prepare_dataset(&cfg).unwrap();
    let e = restcal::pipeline::resolve_targets(&cfg, &ds, &["S9".into()], false).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let e = restcal::pipeline::resolve_targets(&cfg, &ds, &[], false).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let all = restcal::pipeline::resolve_targets(&cfg, &ds, &[], true).unwrap();
    assert_eq!(all, vec!["S1", "S2", "S3"]);
}
