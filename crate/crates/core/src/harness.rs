//! Training runs, evaluation, provenance records and named experiment suites.
//!
//! A run writes, per seed, into `<output>/<run.name>/seed_<seed>/`:
//!
//! ```text
//! config.toml        resolved configuration
//! metrics.jsonl      header line, then one record per training episode
//! final_eval.json    greedy evaluation of the final weights
//! ckpt_ep<k>.lrlw    periodic checkpoints (if enabled)
//! final.lrlw         final checkpoint
//! run_record.json    everything needed to regenerate metrics.jsonl
//! ```
//!
//! and `summary.json` (mean and std over seeds) next to the seed directories.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunConfig};
use crate::error::{Error, Result};
use crate::meta_env::{GameConfig, MetaEnv};
use crate::nn::Checkpoint;
use crate::trainer::{build_learner, evaluate, AgentModel, EvalSummary, HeadKind, AlgorithmKind};

/// When set, relative `run.output_dir` paths are resolved against it.
pub const OUTPUT_ROOT_ENV: &str = "MARLCOMM_OUTPUT_ROOT";

pub const SUITES: [&str; 6] = ["table1_encoders", "fig3_pp", "fig5_bandwidth", "lj_5_2", "lj_5_3", "appendixD"];

pub fn resolve_output_dir(run: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if run.output_dir.is_relative() => PathBuf::from(root).join(&run.output_dir),
        _ => run.output_dir.clone(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Provenance of one seed of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub provenance: String,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn provenance(config_hash: &str, seed: u64) -> String {
    format!(
        "{}@{}+cfg.{}.seed.{seed}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        &config_hash[..12.min(config_hash.len())]
    )
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    kind: &'static str,
    provenance: &'a str,
    config_hash: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: u64,
    pub env_steps: u64,
    pub eval_steps_mean: Option<f64>,
    pub eval_reward_mean: Option<f64>,
    pub alpha_comm: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub wallclock: Option<f64>,
    pub steps: usize,
    pub reward: f64,
    pub eval_alpha_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Final-policy statistics of a run, across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub steps: MeanStd,
    pub reward: MeanStd,
    pub alpha: MeanStd,
    /// Seed-averaged per-step communication probability.
    pub comm_curve: Vec<f64>,
}

impl RunSummary {
    pub fn from_outcomes(name: &str, cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Self {
        let pick = |f: &dyn Fn(&EvalSummary) -> f64| MeanStd::of(&outcomes.iter().map(|o| f(&o.final_eval)).collect::<Vec<_>>());
        let horizon = outcomes.iter().map(|o| o.final_eval.comm_curve.len()).max().unwrap_or(0);
        let comm_curve = (0..horizon)
            .map(|t| {
                let v: Vec<f64> = outcomes.iter().filter_map(|o| o.final_eval.comm_curve.get(t).copied()).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        Self {
            name: name.to_owned(),
            config_hash: cfg.hash(),
            seeds: outcomes.iter().map(|o| o.record.seed).collect(),
            steps: pick(&|e| e.steps_mean),
            reward: pick(&|e| e.reward_mean),
            alpha: pick(&|e| e.alpha_mean),
            comm_curve,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub final_eval: EvalSummary,
}

fn new_env(cfg: &ExperimentConfig) -> Result<MetaEnv> {
    MetaEnv::new(cfg.meta_env_config())
}

fn checkpoint_path(dir: &Path, episodes: u64) -> PathBuf {
    dir.join(format!("ckpt_ep{episodes}.lrlw"))
}

/// Train one seed into `dir`. With `resume`, weights and counters are
/// restored from the checkpoint and new records are appended to the
/// existing metrics file.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, resume: Option<&Path>) -> Result<SeedOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let config_hash = cfg.hash();
    let prov = provenance(&config_hash, seed);
    let mut env = new_env(cfg)?;
    let mut eval_env = new_env(cfg)?;
    if cfg.run.telemetry {
        let path = dir.join("telemetry.jsonl");
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        env.set_telemetry(Some(Box::new(BufWriter::new(f))));
    }
    let mut learner = build_learner(&cfg.trainer, &env, seed)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut checkpoint_paths = vec![];
    let file = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            learner.restore(&ckpt)?;
            OpenOptions::new()
                .append(true)
                .open(&metrics_path)
                .map_err(|e| io_err(&metrics_path, e))?
        }
        None => {
            fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| io_err(dir, e))?;
            File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?
        }
    };
    let mut out = BufWriter::new(file);
    if resume.is_none() {
        let header = MetricsHeader {
            kind: "header",
            provenance: &prov,
            config_hash: &config_hash,
            seed,
            config: cfg,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
    }

    let t0 = Instant::now();
    let tc = &cfg.trainer;
    while learner.episodes_done() < tc.episodes {
        let rep = learner.train_episode(&mut env)?;
        let done = learner.episodes_done();
        let eval = if tc.eval_every > 0 && done % tc.eval_every == 0 {
            Some(learner.evaluate(&mut eval_env, seed, tc.eval_episodes)?)
        } else {
            None
        };
        let rec = MetricsRecord {
            episode: rep.episode,
            env_steps: rep.env_steps,
            eval_steps_mean: eval.as_ref().map(|e| e.steps_mean),
            eval_reward_mean: eval.as_ref().map(|e| e.reward_mean),
            alpha_comm: rep.metrics.alpha,
            loss: rep.loss,
            epsilon: rep.epsilon,
            wallclock: cfg.run.record_wallclock.then(|| t0.elapsed().as_secs_f64()),
            steps: rep.metrics.steps,
            reward: rep.metrics.reward,
            eval_alpha_mean: eval.as_ref().map(|e| e.alpha_mean),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            let path = checkpoint_path(dir, done);
            learner.checkpoint().save(&path)?;
            checkpoint_paths.push(path);
        }
    }
    out.flush()?;
    drop(env);

    let final_path = dir.join("final.lrlw");
    learner.checkpoint().save(&final_path)?;
    checkpoint_paths.push(final_path);
    let final_eval = learner.evaluate(&mut eval_env, seed, tc.eval_episodes)?;
    write_json(&dir.join("final_eval.json"), &final_eval)?;
    let record = RunRecord {
        config_hash,
        seed,
        metrics_path,
        checkpoint_paths,
        provenance: prov,
        config: cfg.clone(),
    };
    record.save(&dir.join("run_record.json"))?;
    Ok(SeedOutcome {
        dir: dir.to_owned(),
        record,
        final_eval,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub summary: RunSummary,
}

/// Train every seed of `cfg.run.seeds` in parallel and write `summary.json`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = resolve_output_dir(&cfg.run).join(&cfg.run.name);
    let seeds = cfg
        .run
        .seeds
        .par_iter()
        .map(|&s| train_seed(cfg, s, &dir.join(format!("seed_{s}")), None))
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary::from_outcomes(&cfg.run.name, cfg, &seeds);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(TrainOutcome { dir, seeds, summary })
}

/// Regenerate a seed's metrics into `dir` from its record alone.
pub fn rerun(record: &RunRecord, dir: &Path) -> Result<PathBuf> {
    if record.config.hash() != record.config_hash {
        return Err(Error::Contract("run record's config does not match its hash".into()));
    }
    Ok(train_seed(&record.config, record.seed, dir, None)?.record.metrics_path)
}

/// Rebuild the network described by `cfg` and load the online weights of a checkpoint.
pub fn load_policy(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<(AgentModel, crate::nn::ParamStore, HeadKind)> {
    let env = new_env(cfg)?;
    let learner = build_learner(&cfg.trainer, &env, 0)?;
    let model = learner.model().clone();
    let mut ps = learner.params().clone();
    ckpt.load_store("online/", &mut ps).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!("checkpoint does not fit the configured network: {msg}")),
        other => other,
    })?;
    Ok((model, ps, learner.head_kind()))
}

/// Greedy evaluation of a checkpoint over `episodes` fixed seeds.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt_path: &Path, episodes: usize, seed: u64) -> Result<EvalSummary> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, ps, head) = load_policy(cfg, &ckpt)?;
    let mut env = new_env(cfg)?;
    evaluate(&model, &ps, head, &mut env, seed, episodes)
}

/// One configuration of a suite, as overrides on the default configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCell {
    pub name: String,
    /// Game whose defaults the overrides start from.
    pub game: GameConfig,
    pub overrides: Vec<String>,
}

fn cell(name: &str, overrides: &[&str]) -> SuiteCell {
    SuiteCell {
        name: name.to_owned(),
        game: GameConfig::default(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

fn lj_cells(trees: usize) -> Vec<SuiteCell> {
    let trees = format!("game.trees={trees}");
    let base = [
        "game.n=10",
        "game.agents=5",
        trees.as_str(),
        "game.tree_atten_db=4.5",
        "channel.radio.theta_r_db=20.0",
        "trainer.episodes=60000",
    ];
    let with = |extra: &'static str| base.iter().copied().chain([extra]).collect::<Vec<_>>();
    [
        cell("offpolicy", &with("trainer.algorithm=offpolicy")),
        cell("offpolicy_nocomm", &with("trainer.algorithm=offpolicy_nocomm")),
        cell("onpolicy", &with("trainer.algorithm=onpolicy")),
    ]
    .into_iter()
    .map(|c| SuiteCell {
        game: GameConfig::Lumberjacks(Default::default()),
        ..c
    })
    .collect()
}

/// Expand a suite name into its cells.
pub fn suite_cells(name: &str) -> Result<Vec<SuiteCell>> {
    Ok(match name {
        "table1_encoders" => vec![
            cell("concat_mlp", &["trainer.encoder=concat_mlp"]),
            cell("mean_mlp", &["trainer.encoder=mean_mlp"]),
            cell("sum_mlp", &["trainer.encoder=sum_mlp"]),
        ],
        "fig3_pp" => vec![
            cell("offpolicy", &["trainer.algorithm=offpolicy"]),
            cell("offpolicy_nocomm", &["trainer.algorithm=offpolicy_nocomm"]),
            cell("onpolicy", &["trainer.algorithm=onpolicy"]),
        ],
        "fig5_bandwidth" => vec![
            cell("default_bw", &[]),
            cell("reduced_bw", &["channel.mac.slots_per_step=5"]),
        ],
        "lj_5_2" => lj_cells(2),
        "lj_5_3" => lj_cells(3),
        "appendixD" => vec![
            cell("ppw", &[]),
            cell("ppw_noise", &["channel.noise_range_dbm=[-95.0, -90.0]"]),
            cell(
                "ppw_noise_atten",
                &["channel.noise_range_dbm=[-95.0, -90.0]", "game.atten_set=[2.5, 3.5, 4.5]"],
            ),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    })
}

/// Resolved configuration of every cell: the cell's overrides on the
/// defaults, then `extra` overrides, with outputs under `<output>/<suite>/`.
pub fn suite_configs(name: &str, extra: &[String]) -> Result<Vec<ExperimentConfig>> {
    suite_cells(name)?
        .into_iter()
        .map(|c| {
            let base = ExperimentConfig {
                game: c.game.clone(),
                ..ExperimentConfig::default()
            };
            let mut ovs = c.overrides.clone();
            ovs.extend(extra.iter().cloned());
            let mut cfg = base.with_overrides(&ovs)?;
            cfg.run.name = c.name.clone();
            cfg.run.output_dir = cfg.run.output_dir.join(name);
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub dir: PathBuf,
    pub csv_path: PathBuf,
    pub summaries: Vec<RunSummary>,
}

fn describe(cfg: &ExperimentConfig) -> (String, &'static str, &'static str) {
    let game = match &cfg.game {
        GameConfig::PredatorPrey(c) => format!("pp_n{}_a{}", c.n, c.predators),
        GameConfig::Lumberjacks(c) => format!("lj_n{}_a{}_t{}", c.n, c.agents, c.trees),
    };
    let encoder = if cfg.trainer.algorithm == AlgorithmKind::OffpolicyNocomm {
        "none"
    } else {
        cfg.trainer.encoder.as_str()
    };
    (game, cfg.trainer.algorithm.as_str(), encoder)
}

/// Run every (cell, seed) job of a suite in parallel, then write one
/// `summary.json` per cell and `comparison.csv` for the suite.
pub fn run_suite(name: &str, extra: &[String]) -> Result<SuiteReport> {
    let cfgs = suite_configs(name, extra)?;
    let jobs: Vec<(usize, u64)> = cfgs
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.run.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(k, s)| {
            let cfg = &cfgs[k];
            let dir = resolve_output_dir(&cfg.run).join(&cfg.run.name).join(format!("seed_{s}"));
            train_seed(cfg, s, &dir, None).map(|o| (k, o))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = vec![];
    let mut csv = String::from(
        "cell,game,algorithm,encoder,slots_per_step,seeds,steps_mean,steps_std,reward_mean,reward_std,alpha_mean,alpha_std\n",
    );
    for (k, cfg) in cfgs.iter().enumerate() {
        let outcomes: Vec<SeedOutcome> = results.iter().filter(|(j, _)| *j == k).map(|(_, o)| o.clone()).collect();
        let summary = RunSummary::from_outcomes(&cfg.run.name, cfg, &outcomes);
        let cell_dir = resolve_output_dir(&cfg.run).join(&cfg.run.name);
        write_json(&cell_dir.join("summary.json"), &summary)?;
        let (game, algorithm, encoder) = describe(cfg);
        csv.push_str(&format!(
            "{},{game},{algorithm},{encoder},{},{},{},{},{},{},{},{}\n",
            summary.name,
            cfg.channel.mac.slots_per_step,
            outcomes.len(),
            summary.steps.mean,
            summary.steps.std,
            summary.reward.mean,
            summary.reward.std,
            summary.alpha.mean,
            summary.alpha.std,
        ));
        summaries.push(summary);
    }
    let dir = cfgs
        .first()
        .map(|c| resolve_output_dir(&c.run))
        .unwrap_or_default();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let csv_path = dir.join("comparison.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    Ok(SuiteReport {
        dir,
        csv_path,
        summaries,
    })
}

/// Name, shape and value range of every checkpoint entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub min: f64,
    pub max: f64,
}

pub fn inspect_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ckpt
        .entries
        .iter()
        .map(|(name, m)| CheckpointEntry {
            name: name.clone(),
            shape: [m.nrows(), m.ncols()],
            min: m.iter().copied().fold(f64::INFINITY, f64::min),
            max: m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_expands_to_valid_configs() {
        for name in SUITES {
            let cfgs = suite_configs(name, &[]).unwrap();
            assert!(cfgs.len() >= 2, "{name}");
            for c in &cfgs {
                assert!(c.run.output_dir.ends_with(name));
            }
        }
        assert!(suite_cells("table2").unwrap_err().is_config());
    }

    #[test]
    fn suite_cells_match_their_experiments() {
        let t1 = suite_configs("table1_encoders", &[]).unwrap();
        let kinds: Vec<&str> = t1.iter().map(|c| c.trainer.encoder.as_str()).collect();
        assert_eq!(kinds, ["concat_mlp", "mean_mlp", "sum_mlp"]);
        let lj = suite_configs("lj_5_3", &[]).unwrap();
        match &lj[0].game {
            GameConfig::Lumberjacks(c) => {
                assert_eq!((c.n, c.agents, c.trees, c.tree_atten_db), (10, 5, 3, 4.5));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(lj[0].channel.radio.theta_r_db, 20.0);
        assert_eq!(t1[0].channel.radio.theta_r_db, 15.0);
        let d = suite_configs("appendixD", &[]).unwrap();
        assert_eq!(d[2].channel.noise_range_dbm, Some([-95.0, -90.0]));
        match &d[2].game {
            GameConfig::PredatorPrey(c) => assert_eq!(c.atten_set, vec![2.5, 3.5, 4.5]),
            other => panic!("{other:?}"),
        }
        let bw = suite_configs("fig5_bandwidth", &["trainer.episodes=3".into()]).unwrap();
        assert_eq!(bw[1].channel.mac.slots_per_step, 5);
        assert_eq!(bw[1].trainer.episodes, 3);
    }

    #[test]
    fn mean_std_is_population() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[]).mean, 0.0);
    }
}
