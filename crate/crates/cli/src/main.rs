use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bracp::agent::Regularizer;
use bracp::divergences::Panel;
use bracp::envs_data::{Dataset, DatasetMode};
use bracp::harness::{self, ExperimentConfig, RunPaths};
use bracp::networks::write_atomic;
use bracp::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Offline behavior-regularised actor-critic experiments on the two-goal
/// point mass.
#[derive(Debug, Parser)]
#[command(name = "bracp", version)]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (for `ablate`, replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Random,
    Medium,
    Expert,
    MedExp,
    Mixed,
}

impl From<Mode> for DatasetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Random => DatasetMode::Random,
            Mode::Medium => DatasetMode::Medium,
            Mode::Expert => DatasetMode::Expert,
            Mode::MedExp => DatasetMode::MedExp,
            Mode::Mixed => DatasetMode::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Reg {
    Kl,
    Mmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PanelArg {
    Left,
    Middle,
    Right,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scripted controllers and write a dataset file.
    GenData {
        #[arg(long, default_value = "twogoal")]
        env: String,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Episodes per collection arm.
        #[arg(long)]
        episodes: Option<usize>,
        /// Also write a CSV copy for inspection.
        #[arg(long)]
        csv: bool,
    },
    /// Pretrain the behavior-model ensemble (and optionally a cloned policy).
    TrainBc {
        #[arg(long)]
        dataset: PathBuf,
        /// Ensemble size.
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also fit the maximum-likelihood behavior-cloning policy.
        #[arg(long)]
        clone_policy: bool,
    },
    /// Train an agent against a pretrained behavior model.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        behavior: PathBuf,
        /// Disable the gradient penalty in policy evaluation.
        #[arg(long)]
        no_gp: bool,
        #[arg(long, value_enum)]
        regularizer: Option<Reg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `last.ckpt` in the output directory when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the deterministic policy of an agent or cloned-policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Divergence landscape of a Gaussian against a fixed behavior density.
    SweepDivergence {
        #[arg(long, value_enum)]
        panel: PanelArg,
    },
    /// Regulariser × gradient-penalty grid over the configured seeds.
    Ablate {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.clone();
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    match cli.command {
        Command::GenData {
            env,
            mode,
            episodes,
            csv,
        } => {
            cfg.env = env;
            if let Some(m) = mode {
                cfg.mode = DatasetMode::from(m).name().to_string();
            }
            if let Some(e) = episodes {
                cfg.episodes = e;
            }
            cfg.validate()?;
            let mode = cfg.dataset_mode()?;
            let path = out.join(format!("{}_{}_seed{seed}.bin", cfg.env, mode.name()));
            let data = harness::gen_data(mode, cfg.episodes, seed, &path)?;
            if csv {
                write_atomic(&path.with_extension("csv"), data.to_csv().as_bytes())?;
            }
            println!("{} transitions -> {}", data.len(), path.display());
        }
        Command::TrainBc {
            dataset,
            members,
            steps,
            clone_policy,
        } => {
            if let Some(b) = members {
                cfg.behavior.members = b;
            }
            if let Some(s) = steps {
                cfg.behavior.pretrain.steps = s;
            }
            cfg.validate()?;
            let data = load_dataset(&dataset)?;
            fs::create_dir_all(&out)?;
            let ckpt = out.join("behavior.ckpt");
            let (ens, curves) = harness::train_behavior(
                &data,
                &cfg.behavior,
                seed,
                &ckpt,
                Some(&out.join("elbo.csv")),
            )?;
            let last: Vec<String> = curves
                .iter()
                .map(|c| format!("{:.4}", c.last().copied().unwrap_or(f64::NAN)))
                .collect();
            println!(
                "{} members, final ELBO [{}] -> {}",
                ens.len(),
                last.join(", "),
                ckpt.display()
            );
            if clone_policy {
                let path = out.join("bc_policy.ckpt");
                harness::train_bc_policy(&data, &cfg.bc, seed, Some(&path))?;
                println!("cloned policy -> {}", path.display());
            }
        }
        Command::Train {
            dataset,
            behavior,
            no_gp,
            regularizer,
            epochs,
            resume,
        } => {
            if no_gp {
                cfg.agent.gp_enabled = false;
            }
            if let Some(r) = regularizer {
                cfg.agent.regularizer = match r {
                    Reg::Kl => Regularizer::KlUpper,
                    Reg::Mmd => Regularizer::Mmd,
                };
            }
            if let Some(e) = epochs {
                cfg.agent.epochs = e;
            }
            cfg.validate()?;
            let data = load_dataset(&dataset)?;
            harness::require_file(&behavior, "behavior checkpoint")?;
            let ens = bracp::behavior_model::CvaeEnsemble::load(&behavior)?;
            let reference = harness::score_reference(&out, cfg.reference_episodes)?;
            let paths = RunPaths::new(&out);
            let records =
                harness::train_agent(&data, ens, &cfg.agent, seed, &paths, &reference, resume)?;
            if let Some(r) = records.last() {
                println!(
                    "epoch {}: mean Q {:.3}, bound {:.3}, entropy {:.3}, score {:.1} -> {}",
                    r.epoch,
                    r.mean_dataset_q,
                    r.kl_bound_mean,
                    r.entropy_mean,
                    r.eval_return_normalized,
                    paths.log().display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
        } => {
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            let reference = harness::score_reference(&out, cfg.reference_episodes)?;
            let report = harness::evaluate_checkpoint(&checkpoint, episodes, seed, &reference)?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::create_dir_all(&out)?;
            write_atomic(&out.join("eval.json"), json.as_bytes())?;
            println!(
                "return {:.3} ± {:.3}, normalized {:.2} ± {:.2} over {} episodes",
                report.return_mean,
                report.return_std,
                report.normalized_mean,
                report.normalized_std,
                report.episodes
            );
        }
        Command::SweepDivergence { panel } => {
            let panel = match panel {
                PanelArg::Left => Panel::Left,
                PanelArg::Middle => Panel::Middle,
                PanelArg::Right => Panel::Right,
            };
            let (_, csv) = harness::sweep(panel, seed)?;
            fs::create_dir_all(&out)?;
            let path = out.join(format!("sweep_{}.csv", panel.name()));
            write_atomic(&path, csv.as_bytes())?;
            println!("{}", path.display());
        }
        Command::Ablate { mode, epochs } => {
            if let Some(m) = mode {
                cfg.mode = DatasetMode::from(m).name().to_string();
            }
            if let Some(e) = epochs {
                cfg.agent.epochs = e;
            }
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            let runs = harness::run_ablation(&cfg, &out)?;
            let csv = harness::ablation_csv(&runs, cfg.agent.epochs, cfg.smoothing_window);
            let path = out.join("ablation.csv");
            write_atomic(&path, csv.as_bytes())?;
            for (arm, seeds) in &runs.arms {
                for (s, _, abort) in seeds {
                    if let Some(why) = abort {
                        eprintln!("{} seed {s} stopped early: {why}", arm.name());
                    }
                }
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    harness::require_file(path, "dataset")?;
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Precondition(_)) => 2,
        Some(Error::Numeric { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
