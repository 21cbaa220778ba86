//! Experiment orchestration: dataset generation, behavior pretraining, agent
//! runs with JSON-lines logs and checkpoints, evaluation, landscape sweeps and
//! the regulariser × gradient-penalty ablation grid.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{
    policy_eval_returns, scale_rewards, train_bc, Agent, AgentConfig, BcConfig, EpochRecord,
    Regularizer,
};
use crate::behavior_model::{CvaeEnsemble, PretrainConfig};
use crate::divergences::{divergence_sweep, sweep_csv, Panel, SweepRow};
use crate::envs_data::{self, normalized_score, Dataset, DatasetMode, ScoreReference};
use crate::error::{Error, Result};
use crate::networks::{load_tensors, write_atomic, Mlp};
use crate::rng::{stream_rng, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub members: usize,
    pub hidden: usize,
    pub pretrain: PretrainConfig,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            members: 3,
            hidden: 64,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub mode: String,
    /// Episodes per data-collection arm.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub behavior: BehaviorConfig,
    pub agent: AgentConfig,
    pub bc: BcConfig,
    /// Episodes for the final evaluation.
    pub eval_episodes: usize,
    /// Episodes behind each score reference.
    pub reference_episodes: usize,
    /// Trailing moving-average window of the ablation curves, in epochs.
    pub smoothing_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: envs_data::ENV_ID.to_string(),
            mode: "med-exp".to_string(),
            episodes: 200,
            seeds: vec![0, 1, 2],
            behavior: BehaviorConfig::default(),
            agent: AgentConfig::default(),
            bc: BcConfig::default(),
            eval_episodes: 100,
            reference_episodes: 100,
            smoothing_window: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env != envs_data::ENV_ID {
            return Err(Error::Config(format!(
                "unknown env '{}' (only '{}')",
                self.env,
                envs_data::ENV_ID
            )));
        }
        DatasetMode::parse(&self.mode)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.episodes == 0 || self.eval_episodes == 0 || self.reference_episodes == 0 {
            return Err(Error::Config("episode counts must be positive".into()));
        }
        if self.behavior.members == 0 || self.smoothing_window == 0 {
            return Err(Error::Config(
                "ensemble size and smoothing window must be positive".into(),
            ));
        }
        self.agent.validate()
    }

    pub fn dataset_mode(&self) -> Result<DatasetMode> {
        DatasetMode::parse(&self.mode)
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Score reference for the environment, cached under `dir`.
pub fn score_reference(dir: &Path, episodes: usize) -> Result<ScoreReference> {
    ScoreReference::cached(
        &dir.join(format!("{}_score_reference.json", envs_data::ENV_ID)),
        episodes,
        0,
    )
}

pub fn gen_data(mode: DatasetMode, episodes: usize, seed: u64, path: &Path) -> Result<Dataset> {
    let data = envs_data::generate(mode, episodes, seed)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    data.save(path)?;
    Ok(data)
}

/// Pretrain a behavior ensemble on the reward-agnostic dataset; writes the
/// checkpoint and an ELBO curve CSV (`step,member_0,…`).
pub fn train_behavior(
    dataset: &Dataset,
    cfg: &BehaviorConfig,
    seed: u64,
    ckpt: &Path,
    curve_csv: Option<&Path>,
) -> Result<(CvaeEnsemble, Vec<Vec<f64>>)> {
    let mut ens = CvaeEnsemble::new(
        cfg.members,
        dataset.state_dim(),
        dataset.action_dim(),
        cfg.hidden,
        seed,
    )?;
    let curves = ens.pretrain(dataset, &cfg.pretrain, seed)?;
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    ens.save(ckpt)?;
    if let Some(path) = curve_csv {
        let mut out = String::from("step");
        for k in 0..curves.len() {
            let _ = write!(out, ",member_{k}");
        }
        out.push('\n');
        for step in 0..cfg.pretrain.steps {
            let _ = write!(out, "{step}");
            for c in &curves {
                let _ = write!(out, ",{}", c[step]);
            }
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())?;
    }
    Ok((ens, curves))
}

/// Files of one agent run.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
        }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // a crash mid-write can only leave the final line incomplete
            Err(_) => break,
        }
    }
    Ok(out)
}

fn append_line(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    f.sync_data()?;
    Ok(())
}

/// Train (or resume) an agent run in `paths.dir`.
///
/// The dataset is rescaled to `[0, 1]` rewards here. Each epoch appends one
/// JSON line, then refreshes `last.ckpt`, and `best.ckpt` whenever the
/// normalised evaluation score improves. With `resume` and an existing
/// `last.ckpt` the run continues after the checkpointed epoch and log lines
/// past it are dropped.
pub fn train_agent(
    raw: &Dataset,
    behavior: CvaeEnsemble,
    cfg: &AgentConfig,
    seed: u64,
    paths: &RunPaths,
    reference: &ScoreReference,
    resume: bool,
) -> Result<Vec<EpochRecord>> {
    let data = scale_rewards(raw)?;
    fs::create_dir_all(&paths.dir)?;
    let mut agent;
    let mut records;
    if resume && paths.last().is_file() {
        agent = Agent::load(&paths.last())?;
        agent.cfg.epochs = cfg.epochs;
        records = read_log(&paths.log()).unwrap_or_default();
        records.retain(|r| r.epoch <= agent.epoch);
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_atomic(&paths.log(), text.as_bytes())?;
    } else {
        agent = Agent::new(cfg.clone(), behavior, data.meta.action_bounds.clone(), seed)?;
        agent.initialize(&data)?;
        let first = agent.init_record(&data, reference)?;
        write_atomic(
            &paths.log(),
            format!("{}\n", serde_json::to_string(&first)?).as_bytes(),
        )?;
        agent.save(&paths.last())?;
        agent.save(&paths.best())?;
        records = vec![first];
    }
    let mut best = records
        .iter()
        .map(|r| r.eval_return_normalized)
        .fold(f64::NEG_INFINITY, f64::max);
    let log = paths.log();
    let result = agent.train(&data, reference, &mut |r, a| {
        append_line(&log, r)?;
        a.save(&paths.last())?;
        if r.eval_return_normalized > best {
            best = r.eval_return_normalized;
            a.save(&paths.best())?;
        }
        Ok(())
    });
    records.extend(result?);
    Ok(records)
}

/// Mean and standard deviation of evaluation returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized_mean: f64,
    pub normalized_std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn eval_report(returns: &[f64], reference: &ScoreReference) -> EvalReport {
    let (m, s) = mean_std(returns);
    let scores: Vec<f64> = returns
        .iter()
        .map(|r| normalized_score(*r, reference))
        .collect();
    let (nm, ns) = mean_std(&scores);
    EvalReport {
        episodes: returns.len(),
        return_mean: m,
        return_std: s,
        normalized_mean: nm,
        normalized_std: ns,
    }
}

/// Deterministic-policy evaluation of an agent or behavior-cloning checkpoint.
pub fn evaluate_checkpoint(
    path: &Path,
    episodes: usize,
    seed: u64,
    reference: &ScoreReference,
) -> Result<EvalReport> {
    let (policy, bounds) = load_policy(path)?;
    let mut rng = stream_rng(seed, streams::EVAL);
    let returns = policy_eval_returns(&policy, &bounds, episodes, &mut rng)?;
    Ok(eval_report(&returns, reference))
}

/// Policy network and bounds from an agent or behavior-cloning checkpoint.
pub fn load_policy(path: &Path) -> Result<(Mlp, crate::distributions::ActionBounds)> {
    require_file(path, "policy checkpoint")?;
    let (tensors, meta) = load_tensors(path)?;
    match meta.get("kind").and_then(|k| k.as_str()) {
        Some("agent") => {
            let agent = Agent::load(path)?;
            Ok((agent.policy, agent.bounds))
        }
        Some("bc_policy") => {
            let sizes: Vec<usize> = serde_json::from_value(meta["sizes"].clone())?;
            let bounds = serde_json::from_value(meta["bounds"].clone())?;
            Ok((Mlp::from_params(&sizes, tensors)?, bounds))
        }
        other => Err(Error::Format(format!(
            "checkpoint kind {other:?} holds no policy"
        ))),
    }
}

/// Behavior-cloning baseline: fit, save, and return the policy.
pub fn train_bc_policy(
    raw: &Dataset,
    cfg: &BcConfig,
    seed: u64,
    path: Option<&Path>,
) -> Result<Mlp> {
    let (policy, _) = train_bc(raw, cfg, seed)?;
    if let Some(path) = path {
        let meta = serde_json::json!({
            "kind": "bc_policy",
            "sizes": policy.sizes(),
            "bounds": raw.meta.action_bounds,
        });
        crate::networks::save_tensors(path, policy.params(), &meta)?;
    }
    Ok(policy)
}

pub fn sweep(panel: Panel, seed: u64) -> Result<(Vec<SweepRow>, String)> {
    let rows = divergence_sweep(&panel.config(seed))?;
    let csv = sweep_csv(&rows);
    Ok((rows, csv))
}

/// Trailing moving average: entry `i` averages entries `max(0, i−w+1)..=i`.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub regularizer: Regularizer,
    pub gp: bool,
}

impl Arm {
    pub fn all() -> [Arm; 4] {
        [
            Arm {
                regularizer: Regularizer::KlUpper,
                gp: true,
            },
            Arm {
                regularizer: Regularizer::KlUpper,
                gp: false,
            },
            Arm {
                regularizer: Regularizer::Mmd,
                gp: true,
            },
            Arm {
                regularizer: Regularizer::Mmd,
                gp: false,
            },
        ]
    }

    pub fn name(&self) -> String {
        let reg = match self.regularizer {
            Regularizer::KlUpper => "kl",
            Regularizer::Mmd => "mmd",
        };
        format!("{reg}_{}", if self.gp { "gp" } else { "nogp" })
    }
}

/// Run logs of the ablation grid, keyed by arm then seed. A run that aborted
/// numerically keeps the records it produced before the abort.
pub struct AblationRuns {
    pub arms: Vec<(Arm, Vec<(u64, Vec<EpochRecord>, Option<String>)>)>,
}

/// Run the 2×2 grid over all seeds. Per seed the dataset and behavior model
/// are shared by the four arms.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<AblationRuns> {
    cfg.validate()?;
    let mode = cfg.dataset_mode()?;
    let reference = score_reference(out, cfg.reference_episodes)?;
    let mut arms: Vec<(Arm, Vec<_>)> = Arm::all().iter().map(|a| (*a, Vec::new())).collect();
    for &seed in &cfg.seeds {
        let sdir = out.join(format!("seed_{seed}"));
        let raw = gen_data(mode, cfg.episodes, seed, &sdir.join("dataset.bin"))?;
        let (ens, _) = train_behavior(
            &raw,
            &cfg.behavior,
            seed,
            &sdir.join("behavior.ckpt"),
            Some(&sdir.join("elbo.csv")),
        )?;
        for (arm, runs) in arms.iter_mut() {
            let agent_cfg = AgentConfig {
                regularizer: arm.regularizer,
                gp_enabled: arm.gp,
                ..cfg.agent.clone()
            };
            let paths = RunPaths::new(&sdir.join(arm.name()));
            match train_agent(
                &raw,
                ens.clone(),
                &agent_cfg,
                seed,
                &paths,
                &reference,
                false,
            ) {
                Ok(records) => runs.push((seed, records, None)),
                Err(Error::Numeric { context, detail }) => {
                    let records = read_log(&paths.log()).unwrap_or_default();
                    runs.push((seed, records, Some(format!("{context}: {detail}"))));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(AblationRuns { arms })
}

/// Aggregate the grid into `epoch,arm,metric,mean,std` rows: one row per
/// training epoch, arm and metric (`normalized_score`, `mean_dataset_q`).
/// Each run is smoothed first; aborted runs contribute only the epochs they
/// reached.
pub fn ablation_csv(runs: &AblationRuns, epochs: usize, window: usize) -> String {
    let mut out = String::from("epoch,arm,metric,mean,std,runs\n");
    type Metric = fn(&EpochRecord) -> f64;
    let metrics: [(&str, Metric); 2] = [
        ("normalized_score", |r| r.eval_return_normalized),
        ("mean_dataset_q", |r| r.mean_dataset_q),
    ];
    for (arm, seeds) in &runs.arms {
        for (name, f) in metrics {
            let curves: Vec<Vec<f64>> = seeds
                .iter()
                .map(|(_, recs, _)| {
                    let xs: Vec<f64> = recs.iter().filter(|r| r.epoch >= 1).map(f).collect();
                    smooth(&xs, window)
                })
                .collect();
            for e in 1..=epochs {
                let vals: Vec<f64> = curves
                    .iter()
                    .filter_map(|c| c.get(e - 1).copied())
                    .collect();
                let (m, s) = mean_std(&vals);
                let _ = writeln!(out, "{e},{},{name},{m},{s},{}", arm.name(), vals.len());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_average() {
        let s = smooth(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(s, vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(smooth(&[5.0, 7.0], 20), vec![5.0, 6.0]);
    }

    #[test]
    fn config_rejects_bad_mode_and_empty_seeds() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.mode = "nope".into();
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
