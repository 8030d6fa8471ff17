//! The reasoning controller: alternates policy generation with tool execution
//! and evidence injection until an action chunk closes the decision step, then
//! executes the chunk in the environment.

use crate::action::{Action, ActionChunk};
use crate::env::{EnvConfig, EnvError, Observation, TaskSpec};
use crate::policy::{
    evidence_feature, log_softmax, pick_token, prompt_inputs, DecodeMode, Decoder, Input, Model,
    PolicyParams, PromptContext, StepTrace,
};
use crate::trace::{Grammar, Region, ToolSpec};
use crate::vision::{execute_tool_call, EvidencePayload, ToolError, ToolRegistry};
use crate::vocab::{Control, TokenId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Limits that guarantee every decision step and episode terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopBudget {
    pub max_tool_calls: usize,
    pub max_seq_len: usize,
    pub max_decision_steps: usize,
}

impl Default for LoopBudget {
    fn default() -> Self {
        LoopBudget {
            max_tool_calls: 3,
            max_seq_len: 128,
            max_decision_steps: 24,
        }
    }
}

/// Outcome of one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub step: StepTrace,
    pub chunk: ActionChunk,
    /// Log-probability of each generated token under the sampling policy, in
    /// generation order (the order of [`crate::policy::Sequence::targets`]).
    pub logprobs: Vec<f64>,
    /// Tool calls that were executed (successfully or not).
    pub tool_calls: usize,
    /// True when the controller had to force the action segment open.
    pub forced: bool,
}

struct Generation<'a> {
    tokens: Vec<TokenId>,
    generated: Vec<bool>,
    evidence: Vec<EvidencePayload>,
    logprobs: Vec<f64>,
    grammar: &'a Grammar,
}

impl Generation<'_> {
    fn push(&mut self, t: TokenId, generated: bool, logits: &[f64]) {
        if generated {
            self.logprobs.push(log_softmax(logits)[t as usize]);
        }
        self.tokens.push(t);
        self.generated.push(generated);
    }

    /// The call spelled out between the most recent tool opener and the closer just emitted.
    fn pending_call(&self) -> Option<ToolSpec> {
        let v = &self.grammar.vocab;
        let open = self.grammar.tok(Control::ToolOpen);
        let start = self.tokens.iter().rposition(|&t| t == open)? + 1;
        let args = &self.tokens[start..self.tokens.len() - 1];
        if args.len() != 5 {
            return None;
        }
        let name = v.as_tool_name(args[0])?;
        let mut c = [0u32; 4];
        for (slot, &t) in c.iter_mut().zip(&args[1..]) {
            *slot = v.as_coord(t)?;
        }
        Some(ToolSpec {
            name: name.to_string(),
            region: Region::new(c[0], c[1], c[2], c[3]),
        })
    }
}

fn malformed_call() -> EvidencePayload {
    EvidencePayload::ToolError(ToolError::UnknownTool("malformed call".into()))
}

/// Runs one decision step. Every fault degrades to tool-error evidence or a
/// forced action segment, so the returned chunk is always executable.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    params: &PolicyParams,
    grammar: &Grammar,
    registry: &ToolRegistry,
    obs: &Observation,
    instruction: &[TokenId],
    mode: DecodeMode,
    budget: &LoopBudget,
    rng: &mut ChaCha8Rng,
) -> (PromptContext, Decision) {
    let cfg = &params.config;
    let k = cfg.chunk_len;
    let prompt = PromptContext::new(obs, instruction.to_vec(), cfg);
    let model = Model::new(params);
    let (mut dec, mut logits) = Decoder::new(&model, &prompt_inputs(&prompt, cfg));
    let max_len = budget.max_seq_len.min(cfg.max_seq_len);
    let evid = grammar.tok(Control::Evid);
    let act_open = grammar.tok(Control::ActOpen);
    let mut g = Generation {
        tokens: vec![],
        generated: vec![],
        evidence: vec![],
        logprobs: vec![],
        grammar,
    };
    let mut tool_opens = 0;
    let mut tool_calls = 0;
    let mut forced = false;

    loop {
        // Room for this token, a possible evidence marker, the opener and the slots.
        if g.tokens.len() + 3 + k > max_len {
            g.push(act_open, false, &logits);
            forced = true;
            break;
        }
        let t = pick_token(&logits, mode, rng);
        g.push(t, true, &logits);
        if t == act_open {
            break;
        }
        let pos = g.tokens.len() - 1;
        match grammar.vocab.as_control(t) {
            Some(Control::Eos) => {
                dec.push(Input::Token { token: t, pos });
                g.push(act_open, false, &logits);
                forced = true;
                break;
            }
            Some(Control::ToolOpen) => {
                tool_opens += 1;
                if tool_opens > budget.max_tool_calls {
                    dec.push(Input::Token { token: t, pos });
                    g.push(act_open, false, &logits);
                    forced = true;
                    break;
                }
                logits = dec.push(Input::Token { token: t, pos });
            }
            Some(Control::ToolClose) => {
                dec.push(Input::Token { token: t, pos });
                let payload = match g.pending_call() {
                    Some(call) => execute_tool_call(registry, &call, &obs.image),
                    None => malformed_call(),
                };
                tool_calls += 1;
                let feature = evidence_feature(&payload, cfg).unwrap_or(None);
                g.evidence.push(payload);
                logits = dec.push_evidence(evid, pos + 1, feature);
                g.tokens.push(evid);
                g.generated.push(false);
            }
            Some(Control::Evid) => {
                g.evidence.push(malformed_call());
                logits = dec.push_evidence(evid, pos, None);
            }
            _ => logits = dec.push(Input::Token { token: t, pos }),
        }
    }

    dec.push(Input::Token {
        token: act_open,
        pos: g.tokens.len() - 1,
    });
    // The action block: all K slots are decoded jointly from one bidirectional pass.
    let start = g.tokens.len();
    let slots: Vec<Input> = (0..k)
        .map(|slot| Input::Slot {
            slot,
            pos: start + slot,
        })
        .collect();
    let rows = dec.push_block(&slots);
    let slot_mode = if forced { DecodeMode::Greedy } else { mode };
    let mut actions = Vec::with_capacity(k);
    for row in &rows {
        let t = pick_token(row, slot_mode, rng);
        g.push(t, true, row);
        actions.push(grammar.vocab.as_action(t).unwrap_or(Action::Noop));
    }
    g.push(grammar.tok(Control::ActClose), false, &[]);
    g.push(grammar.tok(Control::Eos), false, &[]);
    let step = StepTrace {
        tokens: g.tokens,
        generated: g.generated,
        evidence: g.evidence,
    };
    (
        prompt,
        Decision {
            step,
            chunk: ActionChunk::new(actions),
            logprobs: g.logprobs,
            tool_calls,
            forced,
        },
    )
}

/// One recorded decision step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub prompt: PromptContext,
    pub step: StepTrace,
    pub chunk: ActionChunk,
    pub logprobs: Vec<f64>,
    pub format_ok: bool,
    pub tool_calls: usize,
    /// Environment success after executing this step's chunk.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub task: String,
    pub env_seed: u64,
    pub sample_seed: u64,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    /// Policy-generated tokens over all steps; injected markers never count.
    pub response_len: usize,
    pub tool_calls: usize,
}

impl EpisodeTrajectory {
    /// Episode-level format indicator: every step's trace parsed.
    pub fn format_ok(&self) -> bool {
        self.steps.iter().all(|s| s.format_ok)
    }

    pub fn primitive_steps(&self, chunk_len: usize) -> usize {
        self.steps.len() * chunk_len
    }
}

/// Shared inputs of every rollout.
#[derive(Debug)]
pub struct RolloutContext<'a> {
    pub grammar: &'a Grammar,
    pub registry: &'a ToolRegistry,
    pub env: &'a EnvConfig,
    pub budget: LoopBudget,
}

/// Rolls out one episode until the environment reports done or the decision budget runs out.
pub fn rollout_episode(
    params: &PolicyParams,
    ctx: &RolloutContext<'_>,
    task: &TaskSpec,
    env_seed: u64,
    mode: DecodeMode,
    sample_seed: u64,
) -> Result<EpisodeTrajectory, EnvError> {
    let (mut state, mut obs) = ctx.env.reset(task, env_seed)?;
    let instruction: Vec<TokenId> = task
        .instruction_words()
        .iter()
        .map(|w| ctx.grammar.vocab.word(w))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut steps = Vec::new();
    let mut success = state.success();
    while !state.done() && steps.len() < ctx.budget.max_decision_steps {
        let (prompt, d) = decide(
            params,
            ctx.grammar,
            ctx.registry,
            &obs,
            &instruction,
            mode,
            &ctx.budget,
            &mut rng,
        );
        let out = state.step(&d.chunk)?;
        obs = state.observe();
        success = out.success;
        steps.push(StepRecord {
            prompt,
            format_ok: ctx.grammar.check_format(&d.step.tokens) == 1,
            step: d.step,
            chunk: d.chunk,
            logprobs: d.logprobs,
            tool_calls: d.tool_calls,
            success,
        });
    }
    let response_len = steps.iter().map(|s| s.step.generated_len()).sum();
    let tool_calls = steps.iter().map(|s| s.tool_calls).sum();
    Ok(EpisodeTrajectory {
        task: task.name.clone(),
        env_seed,
        sample_seed,
        steps,
        success,
        response_len,
        tool_calls,
    })
}

/// Sampling seed of member `i` of a group, derived from the group's base seed.
pub fn member_seed(base_seed: u64, i: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 8 bytes"))
}

/// `m` temperature rollouts from the same initial condition under a frozen snapshot.
pub fn rollout_group(
    params_old: &PolicyParams,
    ctx: &RolloutContext<'_>,
    task: &TaskSpec,
    env_seed: u64,
    m: usize,
    temperature: f64,
    base_seed: u64,
) -> Result<Vec<EpisodeTrajectory>, EnvError> {
    assert!(m >= 2, "a group needs at least two members");
    let mode = DecodeMode::Temperature { tau: temperature };
    (0..m)
        .map(|i| {
            rollout_episode(
                params_old,
                ctx,
                task,
                env_seed,
                mode,
                member_seed(base_seed, i),
            )
        })
        .collect()
}

/// Mismatch found while replaying a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("environment: {0}")]
    Env(String),
    #[error("step {step}: evidence {index} differs from re-executing the recorded call")]
    Evidence { step: usize, index: usize },
    #[error("step {step}: success flag differs from re-simulation")]
    Success { step: usize },
}

/// Re-simulates a trajectory from its task and seed, re-executing every
/// recorded tool call on the re-rendered frame.
pub fn replay(
    ctx: &RolloutContext<'_>,
    task: &TaskSpec,
    traj: &EpisodeTrajectory,
) -> Result<(), ReplayError> {
    let (mut state, mut obs) = ctx
        .env
        .reset(task, traj.env_seed)
        .map_err(|e| ReplayError::Env(e.to_string()))?;
    let open = ctx.grammar.tok(Control::ToolOpen);
    let close = ctx.grammar.tok(Control::ToolClose);
    let evid = ctx.grammar.tok(Control::Evid);
    for (si, rec) in traj.steps.iter().enumerate() {
        let toks = &rec.step.tokens;
        let mut ev = 0;
        for (i, &t) in toks.iter().enumerate() {
            if t != evid {
                continue;
            }
            let expected = if i > 0 && toks[i - 1] == close && !rec.step.generated[i] {
                let start = toks[..i - 1]
                    .iter()
                    .rposition(|&x| x == open)
                    .map_or(i, |p| p + 1);
                let gen = Generation {
                    tokens: toks[start - 1..i].to_vec(),
                    generated: vec![],
                    evidence: vec![],
                    logprobs: vec![],
                    grammar: ctx.grammar,
                };
                match gen.pending_call() {
                    Some(call) => execute_tool_call(ctx.registry, &call, &obs.image),
                    None => malformed_call(),
                }
            } else {
                malformed_call()
            };
            if rec.step.evidence.get(ev) != Some(&expected) {
                return Err(ReplayError::Evidence {
                    step: si,
                    index: ev,
                });
            }
            ev += 1;
        }
        let out = state
            .step(&rec.chunk)
            .map_err(|e| ReplayError::Env(e.to_string()))?;
        obs = state.observe();
        if out.success != rec.success {
            return Err(ReplayError::Success { step: si });
        }
    }
    Ok(())
}
