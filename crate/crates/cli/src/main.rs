//! `zoomvla`: command-line pipeline for the thinking-with-image policy.
//!
//! Subcommands:
//! - synth: build and validate the chain-of-thought dataset
//! - sft: supervised fine-tuning on a synthesized dataset
//! - rl: GRPO from an SFT checkpoint or from scratch
//! - eval: greedy evaluation with a per-tier report, optionally without tools
//! - ablate: SFT-only vs RL-from-scratch vs SFT+RL on identical seeds
//! - curves: long-format plot data with smoothed series
//! - rollout: dump trajectories, or replay a dump with `--replay`
//!
//! Every failure prints one JSON error record on stderr and exits with the
//! code of its failure kind.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use zoomvla::forge::Dataset;
use zoomvla::grpo::{curves_csv, CurveRecord, RlError};
use zoomvla::harness::{
    ablation, evaluate, parse_curves, reinforce, supervise, synthesize, tidy_csv, tidy_curves,
    HarnessError, RunConfig,
};
use zoomvla::policy::{DecodeMode, PolicyParams};
use zoomvla::rollout::{replay, rollout_episode, EpisodeTrajectory, RolloutContext};
use zoomvla::sft::{reports_csv, SftError};

const DATASET_DIR: &str = "dataset";
const SFT_CKPT: &str = "sft.ckpt";
const RL_CKPT: &str = "rl.ckpt";
const CURVES: &str = "curves.csv";

#[derive(Parser)]
#[command(
    name = "zoomvla",
    version,
    about = "Thinking-with-image VLA pipeline on the MiniManip grid world"
)]
struct Cli {
    /// Run configuration (TOML); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed overriding every module seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize and validate the chain-of-thought dataset.
    Synth,
    /// Supervised fine-tuning from the seeded initialization.
    Sft {
        /// Dataset directory [default: <out>/dataset].
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// GRPO training, regularized toward the starting checkpoint.
    Rl {
        /// Starting checkpoint [default: <out>/sft.ckpt].
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start from the seeded random initialization instead of a checkpoint.
        #[arg(long, conflicts_with = "init")]
        from_scratch: bool,
    },
    /// Greedy evaluation over the configured seeds.
    Eval {
        /// Checkpoint to evaluate [default: <out>/rl.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Every tool call returns error evidence.
        #[arg(long)]
        no_tools: bool,
        /// Episodes per task.
        #[arg(long)]
        episodes: Option<usize>,
        /// First evaluation seed.
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Train and evaluate SFT-only, RL-from-scratch and SFT+RL.
    Ablate {
        /// Reuse a synthesized dataset instead of building one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Long-format plot data from a run's curve file.
    Curves {
        /// Run directory holding curves.csv [default: <out>].
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Roll out a checkpoint and dump trajectories, or replay a dump.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task name [default: every task of the suite].
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Sample at this temperature instead of decoding greedily.
        #[arg(long)]
        temperature: Option<f64>,
        /// Re-simulate every trajectory of this dump and check it.
        #[arg(long, conflicts_with_all = ["checkpoint", "temperature"])]
        replay: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, record) = match e.downcast_ref::<HarnessError>() {
                Some(h) => (h.exit_code(), h.record()),
                None => (
                    1,
                    json!({ "error": "internal", "code": 1, "message": format!("{e:#}") }),
                ),
            };
            eprintln!("{record}");
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s)?;
    }
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(HarnessError::from)?;
    log_config(&cfg, out)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Sft { dataset } => {
            cmd_sft(&cfg, out, &dataset.unwrap_or_else(|| out.join(DATASET_DIR)))
        }
        Command::Rl { init, from_scratch } => cmd_rl(
            &cfg,
            out,
            if from_scratch {
                None
            } else {
                Some(init.unwrap_or_else(|| out.join(SFT_CKPT)))
            },
        ),
        Command::Eval {
            checkpoint,
            no_tools,
            episodes,
            eval_seed,
        } => {
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            if let Some(s) = eval_seed {
                cfg.eval.seed = s;
            }
            cfg.validate()?;
            cmd_eval(
                &cfg,
                out,
                &checkpoint.unwrap_or_else(|| out.join(RL_CKPT)),
                !no_tools,
            )
        }
        Command::Ablate { dataset } => cmd_ablate(&cfg, out, dataset.as_deref()),
        Command::Curves { run } => cmd_curves(run.as_deref().unwrap_or(out)),
        Command::Rollout {
            replay: Some(dump), ..
        } => cmd_replay(&cfg, &dump),
        Command::Rollout {
            checkpoint,
            task,
            episodes,
            temperature,
            replay: None,
        } => cmd_rollout(
            &cfg,
            out,
            &checkpoint.unwrap_or_else(|| out.join(RL_CKPT)),
            task.as_deref(),
            episodes,
            temperature,
        ),
    }
}

/// Writes the resolved config next to the outputs and logs its content hash.
fn log_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let hash = cfg.content_hash();
    write(&out.join("config.resolved.toml"), &cfg.to_toml())?;
    eprintln!(
        "{}",
        json!({ "event": "config", "sha256": hash, "path": out.join("config.resolved.toml") })
    );
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(HarnessError::from)?;
    }
    fs::write(path, contents)
        .map_err(HarnessError::from)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<PolicyParams> {
    Ok(PolicyParams::load(path, Some(&cfg.policy)).map_err(HarnessError::from)?)
}

fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(HarnessError::from)?;
    }
    params.save(path).map_err(HarnessError::from)?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = synthesize(cfg)?;
    if ds.is_empty() {
        eprintln!(
            "{}",
            json!({ "event": "warning", "message": "dataset is empty: no demonstrations were requested" })
        );
    }
    ds.write(&out.join(DATASET_DIR), cfg.policy.evidence_res as u32)
        .map_err(HarnessError::from)?;
    println!(
        "{}",
        json!({ "command": "synth", "records": ds.len(), "stats": ds.stats })
    );
    Ok(())
}

fn cmd_sft(cfg: &RunConfig, out: &Path, dataset: &Path) -> Result<()> {
    let ds = Dataset::read(dataset, &cfg.policy).map_err(HarnessError::from)?;
    let (params, reports) = match supervise(cfg, &ds, |r| {
        eprintln!("{}", json!({ "event": "epoch", "report": r }));
    }) {
        Err(HarnessError::Sft(SftError::NumericalFault {
            epoch,
            reason,
            last_good,
        })) => {
            save_checkpoint(&last_good, &out.join("sft.last_good.ckpt"))?;
            return Err(HarnessError::Sft(SftError::NumericalFault {
                epoch,
                reason,
                last_good,
            })
            .into());
        }
        other => other?,
    };
    save_checkpoint(&params, &out.join(SFT_CKPT))?;
    write(&out.join("sft_metrics.csv"), &reports_csv(&reports))?;
    let last = reports.last().expect("epoch 0 is always reported");
    println!(
        "{}",
        json!({ "command": "sft", "records": ds.len(), "initial_loss": reports[0].loss_total, "final_loss": last.loss_total })
    );
    Ok(())
}

fn cmd_rl(cfg: &RunConfig, out: &Path, init: Option<PathBuf>) -> Result<()> {
    let start = match &init {
        Some(p) => load_checkpoint(cfg, p)?,
        None => PolicyParams::init(cfg.policy, cfg.init_seed),
    };
    let mut curve: Vec<CurveRecord> = Vec::new();
    let result = reinforce(cfg, &start, &start, |r, _| {
        eprintln!("{}", json!({ "event": "iteration", "record": r }));
        curve.push(*r);
    });
    write(&out.join(CURVES), &curves_csv(&curve))?;
    let (params, _) = match result {
        Err(HarnessError::Rl(RlError::NumericalFault {
            iteration,
            reason,
            last_good,
        })) => {
            save_checkpoint(&last_good, &out.join("rl.last_good.ckpt"))?;
            return Err(HarnessError::Rl(RlError::NumericalFault {
                iteration,
                reason,
                last_good,
            })
            .into());
        }
        other => other?,
    };
    save_checkpoint(&params, &out.join(RL_CKPT))?;
    println!(
        "{}",
        json!({ "command": "rl", "iterations": curve.len(), "from_scratch": init.is_none() })
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, tools: bool) -> Result<()> {
    let params = load_checkpoint(cfg, checkpoint)?;
    let report = evaluate(cfg, &params, tools)?;
    let json = report.to_json();
    write(
        &out.join(if tools {
            "eval.json"
        } else {
            "eval_no_tools.json"
        }),
        &format!("{json}\n"),
    )?;
    println!("{json}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, dataset: Option<&Path>) -> Result<()> {
    let ds = match dataset {
        Some(d) => Dataset::read(d, &cfg.policy).map_err(HarnessError::from)?,
        None => synthesize(cfg)?,
    };
    let (table, art) = ablation(cfg, &ds);
    let dir = out.join("ablation");
    if let Some(p) = &art.sft {
        save_checkpoint(p, &dir.join("sft_only.ckpt"))?;
    }
    for (name, run) in [("rl_from_scratch", &art.scratch), ("sft_rl", &art.sft_rl)] {
        if let Some((p, curve)) = run {
            save_checkpoint(p, &dir.join(format!("{name}.ckpt")))?;
            write(&dir.join(format!("{name}_curves.csv")), &curves_csv(curve))?;
        }
    }
    write(&out.join("ablation.csv"), &table.to_csv())?;
    write(
        &out.join("ablation.json"),
        &format!("{}\n", serde_json::to_string(&table)?),
    )?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_curves(run: &Path) -> Result<()> {
    let text = fs::read_to_string(run.join(CURVES)).map_err(|e| {
        HarnessError::MissingMetrics(format!("{}: {e}", run.join(CURVES).display()))
    })?;
    let rows = tidy_curves(&parse_curves(&text)?);
    write(&run.join("curves_long.csv"), &tidy_csv(&rows))?;
    println!(
        "{}",
        json!({ "command": "curves", "rows": rows.len(), "path": run.join("curves_long.csv") })
    );
    Ok(())
}

fn cmd_rollout(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    task: Option<&str>,
    episodes: usize,
    temperature: Option<f64>,
) -> Result<()> {
    let params = load_checkpoint(cfg, checkpoint)?;
    let tasks: Vec<_> = match task {
        Some(name) => vec![cfg
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| HarnessError::UnknownTask(name.into()))?],
        None => cfg.tasks.iter().collect(),
    };
    let (grammar, registry) = (cfg.grammar(), cfg.registry());
    let ctx = RolloutContext {
        grammar: &grammar,
        registry: &registry,
        env: &cfg.env,
        budget: cfg.budget,
    };
    let mode = temperature.map_or(DecodeMode::Greedy, |tau| DecodeMode::Temperature { tau });
    let path = out.join("trajectories.jsonl");
    let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(HarnessError::from)?);
    let mut successes = 0;
    for t in &tasks {
        for i in 0..episodes {
            let seed = cfg.eval.seed + i as u64;
            let traj =
                rollout_episode(&params, &ctx, t, seed, mode, seed).map_err(HarnessError::from)?;
            successes += traj.success as usize;
            serde_json::to_writer(&mut file, &traj)?;
            file.write_all(b"\n").map_err(HarnessError::from)?;
        }
    }
    file.flush().map_err(HarnessError::from)?;
    println!(
        "{}",
        json!({ "command": "rollout", "episodes": tasks.len() * episodes, "successes": successes, "path": path })
    );
    Ok(())
}

fn cmd_replay(cfg: &RunConfig, dump: &Path) -> Result<()> {
    let (grammar, registry) = (cfg.grammar(), cfg.registry());
    let ctx = RolloutContext {
        grammar: &grammar,
        registry: &registry,
        env: &cfg.env,
        budget: cfg.budget,
    };
    let file = std::io::BufReader::new(fs::File::open(dump).map_err(HarnessError::from)?);
    let mut n = 0;
    for line in file.lines() {
        let line = line.map_err(HarnessError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: EpisodeTrajectory =
            serde_json::from_str(&line).with_context(|| format!("trajectory {}", n + 1))?;
        let task = cfg
            .tasks
            .iter()
            .find(|t| t.name == traj.task)
            .ok_or_else(|| HarnessError::UnknownTask(traj.task.clone()))?;
        replay(&ctx, task, &traj).map_err(HarnessError::from)?;
        n += 1;
    }
    println!(
        "{}",
        json!({ "command": "replay", "trajectories": n, "status": "ok" })
    );
    Ok(())
}
