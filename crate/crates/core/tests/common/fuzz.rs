//! Random valid traces and token-level edits of them.

use rand::Rng;
use zoomvla::action::Action;
use zoomvla::trace::{Grammar, Region, Segment, ToolSpec, Trace};
use zoomvla::vocab::{Control, TEXT_WORDS};

pub fn random_trace(g: &Grammar, rng: &mut impl Rng) -> Trace {
    let v = &g.vocab;
    let mut segments = Vec::new();
    let rounds = rng.gen_range(0..5);
    let mut calls = 0;
    for _ in 0..rounds {
        let words = (0..rng.gen_range(0..5))
            .map(|_| v.word(TEXT_WORDS[rng.gen_range(0..TEXT_WORDS.len())]))
            .collect();
        segments.push(Segment::Think(words));
        if calls < g.max_tool_calls && rng.gen_bool(0.5) {
            let x0 = rng.gen_range(0..g.frame_w);
            let y0 = rng.gen_range(0..g.frame_h);
            let region = Region::new(
                x0,
                y0,
                rng.gen_range(x0 + 1..=g.frame_w),
                rng.gen_range(y0 + 1..=g.frame_h),
            );
            segments.push(Segment::ToolCall(ToolSpec {
                name: "zoom_in".into(),
                region,
            }));
            segments.push(Segment::Evidence);
            calls += 1;
        }
    }
    let acts = (0..g.chunk_len)
        .map(|_| Action::ALL[rng.gen_range(0..Action::ALL.len())])
        .collect();
    segments.push(Segment::Action(acts));
    Trace { segments }
}

/// Random edits of a valid trace, drawn so that most stay close to the language.
pub fn mutate_tokens(g: &Grammar, tokens: &mut Vec<u32>, rng: &mut impl Rng) {
    let vsize = g.vocab.len() as u32;
    for _ in 0..rng.gen_range(1..4) {
        let n = tokens.len();
        match rng.gen_range(0..5) {
            0 if n > 0 => {
                tokens.remove(rng.gen_range(0..n));
            }
            1 => tokens.insert(rng.gen_range(0..=n), rng.gen_range(0..vsize)),
            2 if n > 0 => tokens[rng.gen_range(0..n)] = rng.gen_range(0..vsize),
            3 if n > 1 => {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                tokens.swap(a, b);
            }
            _ => {
                let c = Control::ALL[rng.gen_range(0..Control::ALL.len())];
                tokens.insert(rng.gen_range(0..=n), g.tok(c));
            }
        }
    }
}
