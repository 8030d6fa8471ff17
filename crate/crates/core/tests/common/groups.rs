//! Short rollout groups with random advantages for objective checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomvla::env::{EnvConfig, TaskSuite};
use zoomvla::grpo::{normalize_advantages, prepare, GroupBatch, PreparedTrajectory, RewardConfig};
use zoomvla::policy::{log_softmax, Model, PolicyConfig, PolicyParams, PromptContext, Sequence};
use zoomvla::rollout::{rollout_group, LoopBudget, RolloutContext};
use zoomvla::sft::{sequence_loss, TokenWeights};
use zoomvla::trace::Grammar;
use zoomvla::vision::ToolRegistry;

pub struct Fixture {
    pub grammar: Grammar,
    pub registry: ToolRegistry,
    pub env: EnvConfig,
    pub suite: TaskSuite,
}

impl Fixture {
    pub fn new() -> Self {
        Fixture {
            grammar: Grammar::default(),
            registry: ToolRegistry::with_zoom(PolicyConfig::default().evidence_res as u32),
            env: EnvConfig::default(),
            suite: TaskSuite::default_suite(),
        }
    }

    pub fn ctx(&self, budget: LoopBudget) -> RolloutContext<'_> {
        RolloutContext {
            grammar: &self.grammar,
            registry: &self.registry,
            env: &self.env,
            budget,
        }
    }
}

pub fn short_budget() -> LoopBudget {
    LoopBudget {
        max_tool_calls: 3,
        max_seq_len: 20,
        max_decision_steps: 2,
    }
}

/// Groups of short rollouts whose advantages come from random rewards.
pub fn random_groups(
    fx: &Fixture,
    old: &PolicyParams,
    reference: &PolicyParams,
    n_groups: usize,
    m: usize,
    seed: u64,
) -> Vec<Vec<PreparedTrajectory>> {
    let ctx = fx.ctx(short_budget());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_groups)
        .map(|g| {
            let task = &fx.suite.tasks[g % fx.suite.tasks.len()];
            let trajs = rollout_group(old, &ctx, task, g as u64, m, 1.0, seed + g as u64).unwrap();
            let mut batch =
                GroupBatch::new(&task.name, g as u64, trajs, &RewardConfig::default(), 1e-8);
            let rewards: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
            batch.advantages = normalize_advantages(&rewards, 1e-8);
            prepare(&batch, &ctx, reference).unwrap()
        })
        .collect()
}

pub fn dot_ok(a: &[f64], b: &[f64], tol: f64) -> f64 {
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < tol, "max abs difference {worst:e}");
    worst
}

/// Gradient of `sum_t log pi(token_t)` over a trajectory's steps.
pub fn trajectory_score(params: &PolicyParams, tr: &PreparedTrajectory) -> Vec<f64> {
    let model = Model::new(params);
    let mut nll_grad = vec![0.0; params.len()];
    for seq in &tr.seqs {
        sequence_loss(
            &model,
            seq,
            TokenWeights::default(),
            1.0,
            Some(&mut nll_grad),
        );
    }
    nll_grad.iter().map(|g| -g).collect()
}

/// A one-token trajectory with chosen ratio and advantage.
pub fn single_token(p: &PolicyParams, ratio: f64, advantage: f64) -> Vec<Vec<PreparedTrajectory>> {
    let g = Grammar::default();
    let think = g.tok(zoomvla::vocab::Control::ThinkOpen);
    let seq = Sequence::raw(&PromptContext::bare(), &[think], &p.config).unwrap();
    let lp = log_softmax(&Model::new(p).forward(&seq).logits[0]);
    let tr = PreparedTrajectory {
        old_logprobs: vec![vec![lp[think as usize] - ratio.ln()]],
        ref_logp: vec![vec![lp.clone()]],
        seqs: vec![seq],
        advantage,
        tokens: 1,
    };
    vec![vec![tr]]
}
