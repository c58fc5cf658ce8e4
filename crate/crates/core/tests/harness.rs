use marlcomm_core::config::ExperimentConfig;
use marlcomm_core::harness::{self, MetricsRecord, RunRecord};

fn tiny(out: &std::path::Path) -> Vec<String> {
    [
        "game.n=5",
        "game.obstacle_len=3",
        "game.step_cap=10",
        "trainer.episodes=4",
        "trainer.eval_every=2",
        "trainer.eval_episodes=2",
        "trainer.batch_size=2",
        "trainer.hidden=8",
        "trainer.msg_dim=4",
        "trainer.enc_out=4",
        "trainer.enc_hidden=8",
        "trainer.mixer_embed=4",
        "trainer.hyper_hidden=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("run.output_dir={:?}", out.display().to_string())])
    .collect()
}

#[test]
fn parallel_seeds_match_single_seed_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ovs = tiny(tmp.path());
    ovs.push("run.seeds=[4, 9]".into());
    ovs.push("run.name=\"pair\"".into());
    let cfg = ExperimentConfig::default().with_overrides(&ovs).unwrap();
    let out = harness::train(&cfg).unwrap();
    assert_eq!(out.summary.seeds, vec![4, 9]);
    assert!(out.dir.join("summary.json").exists());

    let alone = harness::train_seed(&cfg, 9, &tmp.path().join("alone"), None).unwrap();
    let a = std::fs::read(out.dir.join("seed_9/metrics.jsonl")).unwrap();
    let b = std::fs::read(alone.dir.join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn metrics_file_has_header_and_evaluations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default().with_overrides(&tiny(tmp.path())).unwrap();
    let seed = harness::train_seed(&cfg, 0, &tmp.path().join("s"), None).unwrap();
    let text = std::fs::read_to_string(&seed.record.metrics_path).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["kind"], "header");
    assert_eq!(header["config_hash"], cfg.hash());
    let records: Vec<MetricsRecord> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    let evaluated: Vec<u64> = records.iter().filter(|r| r.eval_steps_mean.is_some()).map(|r| r.episode).collect();
    assert_eq!(evaluated, vec![1, 3]);
    assert!(records.iter().all(|r| r.wallclock.is_none()));

    let record = RunRecord::load(&seed.dir.join("run_record.json")).unwrap();
    assert_eq!(record.config, cfg);
    assert!(record.provenance.contains(&cfg.hash()[..12]));
}

#[test]
fn tampered_run_record_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default().with_overrides(&tiny(tmp.path())).unwrap();
    let seed = harness::train_seed(&cfg, 1, &tmp.path().join("s"), None).unwrap();
    let mut record = seed.record.clone();
    record.config.trainer.lr *= 2.0;
    assert!(harness::rerun(&record, &tmp.path().join("again")).is_err());
}

#[test]
fn bandwidth_suite_writes_a_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let report = harness::run_suite("fig5_bandwidth", &tiny(tmp.path())).unwrap();
    let csv = std::fs::read_to_string(&report.csv_path).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("cell,game,algorithm"));
    assert!(rows[1].starts_with("default_bw,pp_n5_a3,offpolicy,sum_mlp,15,1,"));
    assert!(rows[2].starts_with("reduced_bw,pp_n5_a3,offpolicy,sum_mlp,5,1,"));
    assert!(report.dir.join("reduced_bw/summary.json").exists());
}

#[test]
fn checkpoint_evaluation_reproduces_the_final_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default().with_overrides(&tiny(tmp.path())).unwrap();
    let seed = harness::train_seed(&cfg, 2, &tmp.path().join("s"), None).unwrap();
    let final_ckpt = seed.record.checkpoint_paths.last().unwrap();
    let again = harness::evaluate_checkpoint(&cfg, final_ckpt, cfg.trainer.eval_episodes, 2).unwrap();
    assert_eq!(again, seed.final_eval);
}
