use std::collections::BTreeSet;

use logex::corpus::CorpusSpec;
use logex::diffusion::UNetConfig;
use logex::pipeline::*;

fn tiny(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(name);
    let spec = CorpusSpec {
        n_classes: 4,
        n_head_classes: 2,
        head_count_per_class: 12,
        tail_count_per_class: 3,
        val_head_count: 4,
        val_tail_count: 2,
        test_count_per_class: 4,
        image_size: 8,
        texture_seed: 1,
        feature_strength: 1.0,
    };
    cfg.classifier = logex::classifier::ClassifierConfig::desk(4, 8, 0);
    cfg.classifier.architecture_id = "tiny".into();
    cfg.classifier.epochs = 2;
    cfg.classifier.eval_interval = 1;
    cfg.classifier.batch_size = 16;
    cfg.diffusion.unet = UNetConfig {
        image_size: 8,
        base_channels: 4,
        cond_tokens: 1,
        cond_dim: 4,
        heads: 1,
        groups: 2,
    };
    cfg.diffusion.t_max = 20;
    cfg.diffusion.train.steps = 4;
    cfg.diffusion.train.batch_size = 4;
    cfg.diffusion.train.eval_every = 2;
    cfg.lora.steps = 2;
    cfg.lora.batch_size = 2;
    cfg.lora.eval_every = 1;
    cfg.guidance.sampling_steps = 2;
    cfg.guidance.max_outer_steps = 2;
    cfg.synthetic_per_class = 2;
    cfg.seeds = vec![0];
    cfg.corpus = CorpusSource::Toy(spec);
    cfg
}

fn diff(cfg: &ExperimentConfig, a: Method, b: Method) -> BTreeSet<String> {
    config_diff(&stage_plan(cfg, a, 0, 4), &stage_plan(cfg, b, 0, 4)).into_iter().collect()
}

#[test]
fn baselines_differ_from_logex_only_where_intended() {
    let cfg = tiny("plan");
    assert_eq!(
        diff(&cfg, Method::Logex, Method::FgEntropy),
        BTreeSet::from(["generate.guidance.objective".to_string(), "retrain.synthetic.inclusion".to_string()])
    );
    assert_eq!(
        diff(&cfg, Method::Logex, Method::LogexLoraOnly),
        BTreeSet::from(["generate.guidance.max_outer_steps".to_string()])
    );
}

#[test]
fn method_gating() {
    let cfg = tiny("gating");
    for m in ALL_METHODS {
        let plan = stage_plan(&cfg, m, 0, 4);
        let stages: BTreeSet<&str> = plan.as_object().unwrap().keys().map(String::as_str).collect();
        if m.uses_synthetic() {
            assert!(stages.is_superset(&BTreeSet::from(["diffusion", "lora", "generate"])), "{m}");
        } else {
            assert_eq!(stages, BTreeSet::from(["corpus", "retrain"]), "{m}");
        }
    }
    let ce = stage_plan(&cfg, Method::Ce, 0, 4);
    let logex = stage_plan(&cfg, Method::Logex, 0, 4);
    assert_eq!(ce["retrain"]["classifier"], logex["aux_classifier"]);
}

#[test]
fn config_toml_round_trip() {
    let cfg = tiny("toml");
    let text = cfg.to_toml().unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), text).unwrap();
    let back = ExperimentConfig::read(&dir.path().join("exp.toml")).unwrap();
    assert_eq!(back, cfg);
    let mut bad = cfg.clone();
    bad.methods.clear();
    assert!(bad.validate().is_err());
    assert_eq!("ldam_rw_drw".parse::<Method>().unwrap(), Method::LdamRwDrw);
}

#[test]
fn stage_without_upstream_names_the_missing_stage() {
    let root = tempfile::tempdir().unwrap();
    let err = Runner::run_stage(tiny("dep"), Some(root.path()), Stage::Retrain, Method::Ce, 0).unwrap_err();
    assert!(err.to_string().contains("corpus"), "{err}");
    Runner::run_stage(tiny("dep"), Some(root.path()), Stage::Corpus, Method::Ce, 0).unwrap();
    let e = Runner::run_stage(tiny("dep"), Some(root.path()), Stage::Retrain, Method::Ce, 0).unwrap();
    assert_eq!(e.status, EntryStatus::Ran);
    let err = Runner::run_stage(tiny("dep"), Some(root.path()), Stage::Lora, Method::Ce, 0).unwrap_err();
    assert!(err.to_string().contains("diffusion"), "{err}");
}

#[test]
fn suite_runs_in_workflow_order_and_then_caches() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny("suite");
    cfg.methods = vec![Method::Logex, Method::Ce, Method::DreamOod];
    let first = run_method_suite(cfg.clone(), Some(root.path())).unwrap();
    assert!(first.failures.is_empty(), "{:?}", first.failures);
    let ledger = RunLedger::open(&first.dir).unwrap();
    let order: Vec<Stage> = ledger
        .entries()
        .unwrap()
        .iter()
        .filter(|e| e.status == EntryStatus::Ran)
        .map(|e| e.stage)
        .collect();
    assert_eq!(
        order,
        vec![
            Stage::Corpus,
            Stage::AuxClassifier,
            Stage::Diffusion,
            Stage::Lora,
            Stage::Generate,
            Stage::Retrain,
            Stage::Evaluate,
            Stage::Evaluate,
        ]
    );
    let rows: Vec<&str> = first.report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(rows, vec!["ce", "dream_ood", "logex"]);
    assert_eq!(first.report.rows[1].note.as_deref(), Some("not implemented"));
    let zoo = first.zoo.as_ref().unwrap();
    assert_eq!(zoo.rows.len(), logex::scores::ZOO.len());
    assert_eq!(first.generation[0].n_images, 4);

    let md = std::fs::read_to_string(first.dir.join("report/report.md")).unwrap();
    let csv = std::fs::read_to_string(first.dir.join("report/report.csv")).unwrap();
    assert_eq!(logex::eval::EvalReport::from_csv(&csv).unwrap().to_markdown(), md);

    let second = run_method_suite(cfg, Some(root.path())).unwrap();
    assert_eq!(second.executed, 0);
    assert!(second.cached > 0);
    assert_eq!(second.report, first.report);
}

#[test]
fn empty_report_is_rejected() {
    let r = logex::eval::EvalReport {
        score_name: "p_tail".into(),
        seeds: vec![0],
        rows: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&r, &[ReportFormat::Csv], dir.path()).is_err());
}
