//! Pipeline plumbing shared by the command-line tool and the acceptance run:
//! the run configuration, the stages `synth → sft → rl → eval`, the
//! evaluation report with its tier breakdown, the training-stage ablation and
//! curve post-processing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::render::CELL_PX;
use crate::env::{EnvConfig, EnvError, TaskSpec, TaskSuite, Tier};
use crate::forge::{build_dataset, Dataset, ForgeConfig, ForgeError};
use crate::grpo::{train_rl, CurveRecord, GrpoConfig, RlError, CURVE_HEADER};
use crate::policy::{CheckpointError, DecodeMode, PolicyConfig, PolicyParams};
use crate::rollout::{rollout_episode, LoopBudget, ReplayError, RolloutContext};
use crate::sft::{dataset_sequences, train, LossReport, SftConfig, SftError};
use crate::trace::Grammar;
use crate::vision::ToolRegistry;
use crate::vocab::Vocabulary;

/// Evaluation protocol: greedy episodes on seeds `seed..seed + episodes` per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 50,
            seed: 0,
        }
    }
}

fn default_tasks() -> Vec<TaskSpec> {
    TaskSuite::default_suite().tasks
}

/// Every module's parameters plus the global seed.
///
/// When `seed` is set it overrides the dataset, initialization, SFT and RL
/// seeds; otherwise the per-module seeds apply as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Seed of the randomly initialized policy.
    pub init_seed: u64,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub budget: LoopBudget,
    pub forge: ForgeConfig,
    pub sft: SftConfig,
    pub rl: GrpoConfig,
    pub eval: EvalConfig,
    #[serde(rename = "task", default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            init_seed: 0,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            budget: LoopBudget::default(),
            forge: ForgeConfig::default(),
            sft: SftConfig::default(),
            rl: GrpoConfig::default(),
            eval: EvalConfig::default(),
            tasks: default_tasks(),
        }
    }
}

impl RunConfig {
    /// Parses a config file, rejecting unknown keys, then resolves and validates it.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Replaces the global seed, then resolves again.
    pub fn with_seed(mut self, seed: u64) -> Result<Self, HarnessError> {
        self.seed = Some(seed);
        self.resolved()
    }

    /// Propagates the global seed into the module seeds and validates.
    pub fn resolved(mut self) -> Result<Self, HarnessError> {
        if let Some(s) = self.seed {
            self.init_seed = s;
            self.forge.seed = s;
            self.sft.seed = s;
            self.rl.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.tasks.is_empty() {
            return bad("the task suite is empty".into());
        }
        for t in &self.tasks {
            t.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let vocab = self.grammar().vocab.len();
        if self.policy.vocab_size != vocab {
            return bad(format!(
                "policy.vocab_size is {} but the vocabulary has {vocab} tokens",
                self.policy.vocab_size
            ));
        }
        if self.policy.chunk_len != self.env.chunk_len
            || self.policy.grid_size != self.env.grid_size as usize
        {
            return bad("policy and env disagree on chunk_len or grid_size".into());
        }
        if self.budget.max_seq_len > self.policy.max_seq_len {
            return bad(format!(
                "budget.max_seq_len {} exceeds policy.max_seq_len {}",
                self.budget.max_seq_len, self.policy.max_seq_len
            ));
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be positive".into());
        }
        self.rl.validate().map_err(HarnessError::Config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn suite(&self) -> TaskSuite {
        TaskSuite {
            tasks: self.tasks.clone(),
        }
    }

    pub fn grammar(&self) -> Grammar {
        let side = self.env.grid_size * CELL_PX;
        Grammar {
            vocab: Vocabulary::with_frame(side),
            chunk_len: self.env.chunk_len,
            max_tool_calls: self.budget.max_tool_calls,
            frame_w: side,
            frame_h: side,
        }
    }

    pub fn registry(&self) -> ToolRegistry {
        ToolRegistry::with_zoom(self.policy.evidence_res as u32)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Forge(#[from] ForgeError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("sft: {0}")]
    Sft(#[from] SftError),
    #[error("rl: {0}")]
    Rl(#[from] RlError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("missing metrics: {0}")]
    MissingMetrics(String),
    #[error("replay: {0}")]
    Replay(#[from] ReplayError),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

impl HarnessError {
    /// Distinct nonzero process exit code per failure kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::Io(_) => 4,
            HarnessError::Forge(_) => 5,
            HarnessError::Checkpoint(CheckpointError::Mismatch { .. }) => 7,
            HarnessError::Checkpoint(_) => 6,
            HarnessError::Sft(_) => 8,
            HarnessError::Rl(_) => 9,
            HarnessError::Env(_) => 10,
            HarnessError::MissingMetrics(_) => 11,
            HarnessError::Replay(_) => 12,
            HarnessError::UnknownTask(_) => 13,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::Forge(_) => "dataset",
            HarnessError::Checkpoint(CheckpointError::Mismatch { .. }) => "checkpoint_mismatch",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Sft(_) => "sft",
            HarnessError::Rl(_) => "rl",
            HarnessError::Env(_) => "environment",
            HarnessError::MissingMetrics(_) => "missing_metrics",
            HarnessError::Replay(_) => "replay",
            HarnessError::UnknownTask(_) => "unknown_task",
        }
    }

    /// One-line machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "code": self.exit_code(), "message": self.to_string() })
    }
}

/// Builds and validates the chain-of-thought dataset.
pub fn synthesize(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    Ok(build_dataset(
        &cfg.suite(),
        &cfg.forge,
        &cfg.env,
        &cfg.grammar(),
        &cfg.policy,
    )?)
}

/// Supervised fine-tuning from the seeded random initialization.
pub fn supervise(
    cfg: &RunConfig,
    ds: &Dataset,
    on_epoch: impl FnMut(&LossReport),
) -> Result<(PolicyParams, Vec<LossReport>), HarnessError> {
    let init = PolicyParams::init(cfg.policy, cfg.init_seed);
    let seqs =
        dataset_sequences(ds, &cfg.grammar(), &cfg.registry(), &init).map_err(SftError::from)?;
    Ok(train(&init, &seqs, &cfg.sft, on_epoch)?)
}

/// GRPO from `init`, regularized toward `reference`.
pub fn reinforce(
    cfg: &RunConfig,
    init: &PolicyParams,
    reference: &PolicyParams,
    on_iteration: impl FnMut(&CurveRecord, &PolicyParams),
) -> Result<(PolicyParams, Vec<CurveRecord>), HarnessError> {
    let grammar = cfg.grammar();
    let registry = cfg.registry();
    let ctx = RolloutContext {
        grammar: &grammar,
        registry: &registry,
        env: &cfg.env,
        budget: cfg.budget,
    };
    Ok(train_rl(
        init,
        reference,
        &cfg.suite(),
        &ctx,
        &cfg.rl,
        on_iteration,
    )?)
}

/// Integer totals of a set of evaluation episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTotals {
    pub episodes: usize,
    pub successes: usize,
    /// Primitive environment steps.
    pub steps: usize,
    pub decision_steps: usize,
    pub response_tokens: usize,
    pub episodes_with_tools: usize,
    pub tool_calls: usize,
}

impl EvalTotals {
    fn add(&mut self, o: &EvalTotals) {
        self.episodes += o.episodes;
        self.successes += o.successes;
        self.steps += o.steps;
        self.decision_steps += o.decision_steps;
        self.response_tokens += o.response_tokens;
        self.episodes_with_tools += o.episodes_with_tools;
        self.tool_calls += o.tool_calls;
    }
}

/// Rates derived from [`EvalTotals`]; every mean is episode-weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub totals: EvalTotals,
    pub success_rate: f64,
    pub mean_episode_len: f64,
    pub mean_response_len: f64,
    /// Fraction of episodes with at least one tool call.
    pub tool_call_rate: f64,
    pub tool_calls_per_step: f64,
}

impl EvalSummary {
    pub fn from_totals(t: EvalTotals) -> Self {
        let per = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        EvalSummary {
            totals: t,
            success_rate: per(t.successes, t.episodes),
            mean_episode_len: per(t.steps, t.episodes),
            mean_response_len: per(t.response_tokens, t.episodes),
            tool_call_rate: per(t.episodes_with_tools, t.episodes),
            tool_calls_per_step: per(t.tool_calls, t.decision_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub tier: Tier,
    pub ambiguous: bool,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tools: bool,
    pub episodes_per_task: usize,
    pub seed: u64,
    pub tasks: Vec<TaskEval>,
    pub tiers: BTreeMap<Tier, EvalSummary>,
    /// Tasks whose target is only identifiable by its marking.
    pub ambiguous: Option<EvalSummary>,
    pub overall: EvalSummary,
}

impl EvalReport {
    /// Aggregates per-task rows into tier, ambiguous and overall summaries.
    pub fn assemble(
        tools: bool,
        episodes_per_task: usize,
        seed: u64,
        tasks: Vec<TaskEval>,
    ) -> Self {
        let mut tier_totals: BTreeMap<Tier, EvalTotals> = BTreeMap::new();
        let mut amb: Option<EvalTotals> = None;
        let mut all = EvalTotals::default();
        for t in &tasks {
            tier_totals
                .entry(t.tier)
                .or_default()
                .add(&t.summary.totals);
            if t.ambiguous {
                amb.get_or_insert_with(EvalTotals::default)
                    .add(&t.summary.totals);
            }
            all.add(&t.summary.totals);
        }
        EvalReport {
            tools,
            episodes_per_task,
            seed,
            tasks,
            tiers: tier_totals
                .into_iter()
                .map(|(k, v)| (k, EvalSummary::from_totals(v)))
                .collect(),
            ambiguous: amb.map(EvalSummary::from_totals),
            overall: EvalSummary::from_totals(all),
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskEval> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Single-line JSON rendering.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Greedy evaluation of `params` on the configured suite and seeds. Without
/// tools every call returns error evidence.
pub fn evaluate(
    cfg: &RunConfig,
    params: &PolicyParams,
    tools: bool,
) -> Result<EvalReport, HarnessError> {
    let grammar = cfg.grammar();
    let registry = if tools {
        cfg.registry()
    } else {
        ToolRegistry::empty()
    };
    let ctx = RolloutContext {
        grammar: &grammar,
        registry: &registry,
        env: &cfg.env,
        budget: cfg.budget,
    };
    let mut rows = Vec::with_capacity(cfg.tasks.len());
    for task in &cfg.tasks {
        let mut t = EvalTotals::default();
        for i in 0..cfg.eval.episodes {
            let ep = rollout_episode(
                params,
                &ctx,
                task,
                cfg.eval.seed + i as u64,
                DecodeMode::Greedy,
                0,
            )?;
            t.add(&EvalTotals {
                episodes: 1,
                successes: ep.success as usize,
                steps: ep.primitive_steps(cfg.env.chunk_len),
                decision_steps: ep.steps.len(),
                response_tokens: ep.response_len,
                episodes_with_tools: (ep.tool_calls > 0) as usize,
                tool_calls: ep.tool_calls,
            });
        }
        rows.push(TaskEval {
            task: task.name.clone(),
            tier: task.tier,
            ambiguous: task.is_ambiguous(),
            summary: EvalSummary::from_totals(t),
        });
    }
    Ok(EvalReport::assemble(
        tools,
        cfg.eval.episodes,
        cfg.eval.seed,
        rows,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SftOnly,
    RlFromScratch,
    SftRl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SftOnly, Variant::RlFromScratch, Variant::SftRl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SftOnly => "sft_only",
            Variant::RlFromScratch => "rl_from_scratch",
            Variant::SftRl => "sft_rl",
        }
    }
}

/// Outcome of one ablation variant: its report or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.report.as_ref())
    }

    /// Comma-separated table: one row per variant, success per tier and overall.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,short,medium,long,extra_long,ambiguous,overall,error\n");
        for r in &self.rows {
            let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let rep = r.report.as_ref();
            let tiers: Vec<String> = Tier::ALL
                .iter()
                .map(|t| cell(rep.and_then(|p| p.tiers.get(t)).map(|x| x.success_rate)))
                .collect();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant.name(),
                tiers.join(","),
                cell(rep.and_then(|p| p.ambiguous).map(|x| x.success_rate)),
                cell(rep.map(|p| p.overall.success_rate)),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        s
    }
}

/// Parameters produced by the ablation, kept for inspection or saving.
#[derive(Debug, Default)]
pub struct AblationArtifacts {
    pub sft: Option<PolicyParams>,
    pub scratch: Option<(PolicyParams, Vec<CurveRecord>)>,
    pub sft_rl: Option<(PolicyParams, Vec<CurveRecord>)>,
}

/// Trains and evaluates SFT-only, RL-from-scratch and SFT+RL on the same
/// suite and evaluation seeds. A failing variant is recorded and the others
/// still run; SFT+RL depends on the SFT variant.
pub fn ablation(cfg: &RunConfig, ds: &Dataset) -> (AblationTable, AblationArtifacts) {
    let mut art = AblationArtifacts::default();
    let mut rows = Vec::new();
    let mut row = |variant, res: Result<EvalReport, HarnessError>| {
        let (report, error) = match res {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(AblationRow {
            variant,
            report,
            error,
        });
    };
    let sft = supervise(cfg, ds, |_| {}).map(|(p, _)| p);
    row(
        Variant::SftOnly,
        sft.as_ref()
            .map_err(clone_err)
            .and_then(|p| evaluate(cfg, p, true)),
    );
    let init = PolicyParams::init(cfg.policy, cfg.init_seed);
    let scratch = reinforce(cfg, &init, &init, |_, _| {});
    row(
        Variant::RlFromScratch,
        scratch
            .as_ref()
            .map_err(clone_err)
            .and_then(|(p, _)| evaluate(cfg, p, true)),
    );
    let sft_rl = match &sft {
        Ok(p) => reinforce(cfg, p, p, |_, _| {}),
        Err(e) => Err(HarnessError::Config(format!("no SFT checkpoint: {e}"))),
    };
    row(
        Variant::SftRl,
        sft_rl
            .as_ref()
            .map_err(clone_err)
            .and_then(|(p, _)| evaluate(cfg, p, true)),
    );
    art.sft = sft.ok();
    art.scratch = scratch.ok();
    art.sft_rl = sft_rl.ok();
    (AblationTable { rows }, art)
}

fn clone_err(e: &HarnessError) -> HarnessError {
    HarnessError::Config(e.to_string())
}

/// Trailing moving mean; the first `window - 1` points average what is available.
pub fn moving_mean(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Window of the smoothed curve series.
pub const SMOOTHING_WINDOW: usize = 10;

/// One row of the long-format plot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub metric: String,
    pub iteration: usize,
    pub value: f64,
}

const CURVE_METRICS: [&str; 6] = [
    "mean_reward",
    "mean_success",
    "mean_response_len",
    "tool_call_rate",
    "kl_mean",
    "grad_norm",
];

fn metric(r: &CurveRecord, name: &str) -> f64 {
    match name {
        "mean_reward" => r.mean_reward,
        "mean_success" => r.mean_success,
        "mean_response_len" => r.mean_response_len,
        "tool_call_rate" => r.tool_call_rate,
        "kl_mean" => r.kl_mean,
        _ => r.grad_norm,
    }
}

/// Raw and smoothed series of every curve metric, smoothed rows named `<metric>_smoothed`.
pub fn tidy_curves(records: &[CurveRecord]) -> Vec<TidyRow> {
    let mut rows = Vec::new();
    for m in CURVE_METRICS {
        let raw: Vec<f64> = records.iter().map(|r| metric(r, m)).collect();
        let smooth = moving_mean(&raw, SMOOTHING_WINDOW);
        for (series, name) in [(raw, m.to_string()), (smooth, format!("{m}_smoothed"))] {
            rows.extend(records.iter().zip(series).map(|(r, value)| TidyRow {
                metric: name.clone(),
                iteration: r.iteration,
                value,
            }));
        }
    }
    rows
}

pub fn tidy_csv(rows: &[TidyRow]) -> String {
    let mut s = String::from("metric,iteration,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.iteration, r.value));
    }
    s
}

/// Parses a curve file written by the RL stage.
pub fn parse_curves(text: &str) -> Result<Vec<CurveRecord>, HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::MissingMetrics("empty curve file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let want: Vec<&str> = CURVE_HEADER.split(',').collect();
    let missing: Vec<&str> = want.iter().copied().filter(|w| !cols.contains(w)).collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingMetrics(missing.join(", ")));
    }
    let idx: Vec<usize> = want
        .iter()
        .map(|w| cols.iter().position(|c| c == w).expect("checked above"))
        .collect();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |k: usize| -> Result<f64, HarnessError> {
            f.get(idx[k])
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| {
                    HarnessError::MissingMetrics(format!(
                        "line {}: bad or missing {}",
                        n + 2,
                        want[k]
                    ))
                })
        };
        out.push(CurveRecord {
            iteration: num(0)? as usize,
            mean_reward: num(1)?,
            mean_success: num(2)?,
            mean_response_len: num(3)?,
            tool_call_rate: num(4)?,
            kl_mean: num(5)?,
            grad_norm: num(6)?,
        });
    }
    if out.is_empty() {
        return Err(HarnessError::MissingMetrics(
            "curve file has no iterations".into(),
        ));
    }
    Ok(out)
}

/// First-window and last-window smoothed values of one curve metric.
pub fn window_trend(records: &[CurveRecord], name: &str) -> Option<(f64, f64)> {
    if records.len() < SMOOTHING_WINDOW || !CURVE_METRICS.contains(&name) {
        return None;
    }
    let s = moving_mean(
        &records.iter().map(|r| metric(r, name)).collect::<Vec<_>>(),
        SMOOTHING_WINDOW,
    );
    Some((s[SMOOTHING_WINDOW - 1], s[s.len() - 1]))
}
