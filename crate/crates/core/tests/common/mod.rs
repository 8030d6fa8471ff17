//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod faults;
pub mod fuzz;
pub mod groups;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use zoomvla::action::Action;
use zoomvla::env::{EnvConfig, TaskSuite};
use zoomvla::policy::{PolicyConfig, PolicyParams, PromptContext, StepTrace};
use zoomvla::trace::{Grammar, Region, Segment, ToolSpec, Trace};
use zoomvla::vision::{execute_tool_call, ToolRegistry};

/// Initialised parameters with extra Gaussian noise so every nonlinearity is exercised.
pub fn rough_params(cfg: PolicyConfig, seed: u64, noise: f64) -> PolicyParams {
    let mut p = PolicyParams::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let n = Normal::new(0.0, noise).unwrap();
    for v in &mut p.values {
        *v += n.sample(&mut rng);
    }
    p
}

/// A grasp-style decision step on a real frame: think, zoom, evidence, think, act.
pub fn zoom_step(grammar: &Grammar, seed: u64) -> (PromptContext, StepTrace) {
    let cfg = PolicyConfig::default();
    let suite = TaskSuite::default_suite();
    let task = &suite.tasks[0];
    let (_, obs) = EnvConfig::default().reset(task, seed).unwrap();
    let v = &grammar.vocab;
    let instr = task.instruction_words().iter().map(|w| v.word(w)).collect();
    let prompt = PromptContext::new(&obs, instr, &cfg);
    let region = Region::new(6, 10, 18, 22);
    let spec = ToolSpec {
        name: "zoom_in".into(),
        region,
    };
    let trace = Trace {
        segments: vec![
            Segment::Think(vec![
                v.word("dotA"),
                v.word("red"),
                v.word("block"),
                v.word("grasp"),
            ]),
            Segment::ToolCall(spec.clone()),
            Segment::Evidence,
            Segment::Think(vec![v.word("confirm"), v.word("dotA"), v.word("right")]),
            Segment::Action(vec![
                Action::Right,
                Action::ToggleGrip,
                Action::Noop,
                Action::Noop,
            ]),
        ],
    };
    let tokens = grammar.render(&trace);
    let ev = execute_tool_call(
        &ToolRegistry::with_zoom(cfg.evidence_res as u32),
        &spec,
        &obs.image,
    );
    (
        prompt,
        StepTrace::from_tokens(tokens, vec![ev], v, grammar.chunk_len),
    )
}

/// One character per token class, so the grammar can be checked by a regular expression.
fn class_char(grammar: &Grammar, t: u32) -> char {
    use zoomvla::vocab::{Control, TokenClass};
    let v = &grammar.vocab;
    if let Some(c) = v.as_control(t) {
        return match c {
            Control::ThinkOpen => 'T',
            Control::ThinkClose => 't',
            Control::ToolOpen => 'O',
            Control::ToolClose => 'o',
            Control::ActOpen => 'A',
            Control::ActClose => 'a',
            Control::Evid => 'E',
            Control::Eos => '$',
        };
    }
    if v.as_tool_name(t).is_some() {
        return 'n';
    }
    if v.as_coord(t).is_some() {
        return 'c';
    }
    match v.class(t) {
        Some(TokenClass::Action) => 'm',
        Some(TokenClass::Text) => 'w',
        _ => '?',
    }
}

/// Independent acceptance check: a regular expression over token classes,
/// a count of tool calls and a bounds check on every zoom region.
pub fn reference_accepts(grammar: &Grammar, tokens: &[u32]) -> bool {
    let s: String = tokens.iter().map(|&t| class_char(grammar, t)).collect();
    let pattern = format!(r"^(?:Tw*t(?:Onc{{4}}oE)?)*Am{{{}}}a\$$", grammar.chunk_len);
    if !regex::Regex::new(&pattern).unwrap().is_match(&s) {
        return false;
    }
    let calls: Vec<usize> = s.match_indices('O').map(|(i, _)| i).collect();
    if calls.len() > grammar.max_tool_calls {
        return false;
    }
    calls.iter().all(|&i| {
        let c: Vec<u32> = (0..4)
            .map(|k| grammar.vocab.as_coord(tokens[i + 2 + k]).unwrap())
            .collect();
        c[0] < c[2] && c[1] < c[3] && c[2] <= grammar.frame_w && c[3] <= grammar.frame_h
    })
}

/// A policy whose every block is the identity, so each row's logits depend
/// only on its own input: the instruction rows emit `first`, the trace row at
/// position `p` emits `program[p % program.len()]` and every action slot emits
/// `slot_token`.
pub fn scripted_params(program: &[u32], first: u32, slot_token: u32) -> PolicyParams {
    let cfg = PolicyConfig::default();
    let d = cfg.d_model;
    assert!(program.len() <= d / 2 && cfg.chunk_len <= d / 2);
    let mut p = PolicyParams::zeros(cfg);
    let lay = p.layout();
    let v = &mut p.values;
    v[lay.lnf_g.clone()].fill(1.0);
    for pos in 0..cfg.max_seq_len {
        let q = if program.is_empty() {
            0
        } else {
            pos % program.len()
        };
        v[lay.trace_pos.start + pos * d + q] = 1.0;
    }
    for s in 0..cfg.chunk_len {
        v[lay.slot_emb.start + s * d + d / 2 + s] = 4.0;
    }
    for (q, &t) in program.iter().enumerate() {
        v[lay.w_out.start + t as usize * d + q] += 10.0;
    }
    for s in 0..cfg.chunk_len {
        v[lay.w_out.start + slot_token as usize * d + d / 2 + s] += 30.0;
    }
    v[lay.b_out.start + first as usize] = 20.0;
    p
}
