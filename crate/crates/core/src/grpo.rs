//! Group relative policy optimization over whole reasoning-action episodes:
//! sparse outcome reward plus a format bonus, group-normalized advantages,
//! an asymmetrically clipped token-level surrogate and an exact KL penalty
//! against the frozen reference policy.

use crate::env::TaskSuite;
use crate::forge::derived_seed;
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{log_softmax, Model, PolicyError, PolicyParams, Sequence};
use crate::rollout::{rollout_group, EpisodeTrajectory, RolloutContext};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha_s: f64,
    pub alpha_f: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_s: 1.0,
            alpha_f: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha_s > 0.0 && self.alpha_f >= 0.0 && self.alpha_f < self.alpha_s) {
            return Err(format!(
                "need 0 <= alpha_f < alpha_s and alpha_s > 0, got {self:?}"
            ));
        }
        Ok(())
    }
}

/// `R = alpha_s * I_success + alpha_f * I_format`, with the format indicator
/// requiring every decision step of the episode to parse.
pub fn compute_reward(traj: &EpisodeTrajectory, cfg: &RewardConfig) -> f64 {
    let s = if traj.success { cfg.alpha_s } else { 0.0 };
    let f = if traj.format_ok() { cfg.alpha_f } else { 0.0 };
    s + f
}

/// `(R_i - mean) / max(std, guard)` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64], std_guard: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "a group needs at least two rewards");
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(std_guard);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// How per-token surrogate terms are combined within one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAggregation {
    /// Mean over the trajectory's generated tokens.
    Mean,
    /// Plain sum over generated tokens.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub groups_per_update: usize,
    pub updates_per_iteration: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub std_guard: f64,
    pub iterations: usize,
    pub aggregation: TokenAggregation,
    pub clip_norm: Option<f64>,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.01,
            groups_per_update: 32,
            updates_per_iteration: 1,
            learning_rate: 5e-4,
            temperature: 1.0,
            std_guard: 1e-8,
            iterations: 200,
            aggregation: TokenAggregation::Mean,
            clip_norm: None,
            reward: RewardConfig::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.reward.validate()?;
        if self.group_size < 2 {
            return Err("group_size must be at least 2".into());
        }
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(format!(
                "need 0 < eps_low <= eps_high < 1, got {} / {}",
                self.eps_low, self.eps_high
            ));
        }
        if self.beta < 0.0 || self.temperature <= 0.0 || self.learning_rate < 0.0 {
            return Err(
                "beta, temperature and learning_rate must be non-negative (temperature positive)"
                    .into(),
            );
        }
        if self.groups_per_update == 0 || self.updates_per_iteration == 0 {
            return Err("groups_per_update and updates_per_iteration must be positive".into());
        }
        Ok(())
    }
}

/// M rollouts from one initial condition with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub task: String,
    pub env_seed: u64,
    pub trajectories: Vec<EpisodeTrajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        task: &str,
        env_seed: u64,
        trajectories: Vec<EpisodeTrajectory>,
        reward: &RewardConfig,
        std_guard: f64,
    ) -> Self {
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| compute_reward(t, reward))
            .collect();
        let advantages = normalize_advantages(&rewards, std_guard);
        GroupBatch {
            task: task.to_string(),
            env_seed,
            trajectories,
            rewards,
            advantages,
        }
    }
}

/// A trajectory laid out for repeated objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrajectory {
    pub seqs: Vec<Sequence>,
    pub old_logprobs: Vec<Vec<f64>>,
    /// Reference log-probabilities over the whole vocabulary at every target row.
    pub ref_logp: Vec<Vec<Vec<f64>>>,
    pub advantage: f64,
    pub tokens: usize,
}

/// Builds model inputs for every step and caches reference distributions.
pub fn prepare(
    batch: &GroupBatch,
    ctx: &RolloutContext<'_>,
    reference: &PolicyParams,
) -> Result<Vec<PreparedTrajectory>, PolicyError> {
    let ref_model = Model::new(reference);
    batch
        .trajectories
        .iter()
        .zip(&batch.advantages)
        .map(|(traj, &advantage)| {
            let mut seqs = Vec::with_capacity(traj.steps.len());
            let mut old = Vec::with_capacity(traj.steps.len());
            let mut refs = Vec::with_capacity(traj.steps.len());
            for s in &traj.steps {
                let seq =
                    Sequence::for_step(&s.prompt, &s.step, &ctx.grammar.vocab, &reference.config)?;
                if seq.targets.len() != s.logprobs.len() {
                    return Err(PolicyError::BadPrompt(
                        "stored log-probabilities do not match the trace".into(),
                    ));
                }
                refs.push(
                    ref_model
                        .forward(&seq)
                        .logits
                        .iter()
                        .map(|l| log_softmax(l))
                        .collect(),
                );
                old.push(s.logprobs.clone());
                seqs.push(seq);
            }
            let tokens = old.iter().map(Vec::len).sum();
            Ok(PreparedTrajectory {
                seqs,
                old_logprobs: old,
                ref_logp: refs,
                advantage,
                tokens,
            })
        })
        .collect()
}

/// `KL(p || q)` for two log-probability vectors over the same support.
pub fn token_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean full-distribution KL to the reference over a sequence's generated positions.
pub fn kl_term(params: &PolicyParams, reference: &PolicyParams, seq: &Sequence) -> f64 {
    if seq.targets.is_empty() {
        return 0.0;
    }
    let p = Model::new(params).forward(seq);
    let q = Model::new(reference).forward(seq);
    let total: f64 = p
        .logits
        .iter()
        .zip(&q.logits)
        .map(|(a, b)| token_kl(&log_softmax(a), &log_softmax(b)))
        .sum();
    total / seq.targets.len() as f64
}

/// Diagnostics of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub kl_mean: f64,
    pub clipped_fraction: f64,
    pub tokens: usize,
}

/// The surrogate `J` averaged over groups and the gradient of `-J`.
///
/// Each generated token contributes
/// `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A) - beta KL_t` with
/// `r = exp(log pi_theta - log pi_old)`; token terms are aggregated per
/// trajectory, then averaged over trajectories and groups.
pub fn grpo_objective(
    groups: &[Vec<PreparedTrajectory>],
    params: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<(ObjectiveStats, Vec<f64>), PolicyError> {
    let model = Model::new(params);
    let mut grad = vec![0.0; params.len()];
    let mut j = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let n_groups = groups.len().max(1) as f64;
    for group in groups {
        let m = group.len().max(1) as f64;
        for tr in group {
            let norm = match cfg.aggregation {
                TokenAggregation::Mean => tr.tokens.max(1) as f64,
                TokenAggregation::Sum => 1.0,
            };
            let c = 1.0 / (n_groups * m * norm);
            let a = tr.advantage;
            for ((seq, old), refs) in tr.seqs.iter().zip(&tr.old_logprobs).zip(&tr.ref_logp) {
                let cache = model.forward(seq);
                let mut dl = Vec::with_capacity(seq.targets.len());
                for (((t, logits), &old_lp), ref_lp) in
                    seq.targets.iter().zip(&cache.logits).zip(old).zip(refs)
                {
                    let lp = log_softmax(logits);
                    let tok = t.token as usize;
                    let ratio = (lp[tok] - old_lp).exp();
                    let clipped_ratio = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
                    let unclipped = ratio * a;
                    let surrogate = unclipped.min(clipped_ratio * a);
                    // The unclipped branch carries gradient unless the clipped one is strictly smaller.
                    let live = unclipped <= clipped_ratio * a;
                    if !live {
                        clipped += 1;
                    }
                    let kl = token_kl(&lp, ref_lp);
                    j += c * (surrogate - cfg.beta * kl);
                    kl_sum += kl;
                    tokens += 1;
                    let pg = if live { ratio * a } else { 0.0 };
                    // d(-J)/dz_v = -c [pg (onehot - pi)_v - beta pi_v ((lp - ref)_v - KL)]
                    let mut d = vec![0.0; lp.len()];
                    for v in 0..lp.len() {
                        let pi = lp[v].exp();
                        let onehot = if v == tok { 1.0 } else { 0.0 };
                        d[v] =
                            -c * (pg * (onehot - pi) - cfg.beta * pi * ((lp[v] - ref_lp[v]) - kl));
                    }
                    dl.push(d);
                }
                let rows: Vec<usize> = seq.targets.iter().map(|t| t.row).collect();
                model.backward(seq, &cache, &rows, &dl, &mut grad);
            }
        }
    }
    if !j.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::NumericalFault(format!(
            "non-finite objective {j}"
        )));
    }
    let stats = ObjectiveStats {
        objective: j,
        kl_mean: kl_sum / tokens.max(1) as f64,
        clipped_fraction: clipped as f64 / tokens.max(1) as f64,
        tokens,
    };
    Ok((stats, grad))
}

/// One row of the RL curve file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_success: f64,
    pub mean_response_len: f64,
    pub tool_call_rate: f64,
    pub kl_mean: f64,
    pub grad_norm: f64,
}

pub const CURVE_HEADER: &str =
    "iteration,mean_reward,mean_success,mean_response_len,tool_call_rate,kl_mean,grad_norm";

pub fn curves_csv(records: &[CurveRecord]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            r.mean_reward,
            r.mean_success,
            r.mean_response_len,
            r.tool_call_rate,
            r.kl_mean,
            r.grad_norm
        ));
    }
    s
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty task suite")]
    EmptySuite,
    #[error("environment: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("numerical fault at iteration {iteration}: {reason}")]
    NumericalFault {
        iteration: usize,
        reason: String,
        last_good: Box<PolicyParams>,
    },
}

/// Aggregate statistics of a set of episodes.
pub fn episode_summary(
    trajs: &[&EpisodeTrajectory],
    reward: &RewardConfig,
) -> (f64, f64, f64, f64) {
    let n = trajs.len().max(1) as f64;
    let mean_reward = trajs.iter().map(|t| compute_reward(t, reward)).sum::<f64>() / n;
    let mean_success = trajs.iter().filter(|t| t.success).count() as f64 / n;
    let mean_len = trajs.iter().map(|t| t.response_len as f64).sum::<f64>() / n;
    let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
    let calls: usize = trajs.iter().map(|t| t.tool_calls).sum();
    (
        mean_reward,
        mean_success,
        mean_len,
        calls as f64 / steps.max(1) as f64,
    )
}

/// GRPO training loop starting from `init` with `reference` frozen.
pub fn train_rl(
    init: &PolicyParams,
    reference: &PolicyParams,
    suite: &TaskSuite,
    ctx: &RolloutContext<'_>,
    cfg: &GrpoConfig,
    mut on_iteration: impl FnMut(&CurveRecord, &PolicyParams),
) -> Result<(PolicyParams, Vec<CurveRecord>), RlError> {
    cfg.validate().map_err(RlError::Config)?;
    if suite.tasks.is_empty() {
        return Err(RlError::EmptySuite);
    }
    let mut theta = init.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            clip_norm: cfg.clip_norm,
            ..AdamWConfig::with_lr(cfg.learning_rate)
        },
        theta.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let fault = |reason: String, last: &PolicyParams| RlError::NumericalFault {
            iteration: it,
            reason,
            last_good: Box::new(last.clone()),
        };
        let theta_old = theta.clone();
        let mut batches = Vec::with_capacity(cfg.groups_per_update);
        // Every task is equally likely for each group, and an iteration's
        // groups cover the suite as evenly as their count allows.
        let n = suite.tasks.len();
        let mut order: Vec<usize> = (0..cfg.groups_per_update.div_ceil(n) * n)
            .map(|i| i % n)
            .collect();
        order.shuffle(&mut rng);
        for (gi, &ti) in order.iter().take(cfg.groups_per_update).enumerate() {
            let task = &suite.tasks[ti];
            let k = (it * cfg.groups_per_update + gi) as u64;
            let env_seed = derived_seed("rl-env", cfg.seed, &task.name, k);
            let base = derived_seed("rl-sample", cfg.seed, &task.name, k);
            let trajs = rollout_group(
                &theta_old,
                ctx,
                task,
                env_seed,
                cfg.group_size,
                cfg.temperature,
                base,
            )?;
            batches.push(GroupBatch::new(
                &task.name,
                env_seed,
                trajs,
                &cfg.reward,
                cfg.std_guard,
            ));
        }
        // At the reference point with no advantage signal the objective and its
        // gradient are exactly zero, so the forward and backward passes are skipped.
        let inert = theta.values == reference.values
            && batches
                .iter()
                .all(|b| b.advantages.iter().all(|&a| a == 0.0));
        let prepared: Vec<Vec<PreparedTrajectory>> = if inert {
            Vec::new()
        } else {
            batches
                .iter()
                .map(|b| prepare(b, ctx, reference))
                .collect::<Result<_, _>>()
                .map_err(|e| fault(e.to_string(), &theta))?
        };
        let mut stats = ObjectiveStats::default();
        let mut grad_norm = 0.0;
        for _ in 0..cfg.updates_per_iteration {
            if inert {
                break;
            }
            let (s, grad) =
                grpo_objective(&prepared, &theta, cfg).map_err(|e| fault(e.to_string(), &theta))?;
            let before = theta.values.clone();
            grad_norm = opt.step(&mut theta.values, &grad);
            if !theta.all_finite() {
                theta.values = before;
                return Err(fault("non-finite parameters".into(), &theta));
            }
            stats = s;
        }
        let all: Vec<&EpisodeTrajectory> = batches.iter().flat_map(|b| &b.trajectories).collect();
        let (mean_reward, mean_success, mean_response_len, tool_call_rate) =
            episode_summary(&all, &cfg.reward);
        let rec = CurveRecord {
            iteration: it,
            mean_reward,
            mean_success,
            mean_response_len,
            tool_call_rate,
            kl_mean: stats.kl_mean,
            grad_norm,
        };
        on_iteration(&rec, &theta);
        curve.push(rec);
    }
    Ok((theta, curve))
}
