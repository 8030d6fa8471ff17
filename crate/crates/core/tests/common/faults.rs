//! Independent keyframe recount and single-fault mutations of dataset records.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zoomvla::forge::{CotRecord, Demonstration, ValidationError};
use zoomvla::trace::{Grammar, Region};
use zoomvla::vocab::TokenClass;

/// Gripper state after each chunk, obtained by stepping the stored states.
pub fn recount(demo: &Demonstration) -> Vec<usize> {
    let after: Vec<bool> = demo
        .states
        .iter()
        .zip(&demo.plan.chunks)
        .map(|(s, c)| {
            let mut sim = s.clone();
            sim.step(c).unwrap();
            sim.gripper_closed
        })
        .collect();
    (1..after.len())
        .filter(|&i| after[i] != after[i - 1])
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Mutation {
    TagDrop,
    FrameSwap,
    ChunkEdit,
    RegionShift,
}

/// Applies one fault; returns `None` when the fault is impossible for this record.
pub fn mutate_record(
    grammar: &Grammar,
    rec: &CotRecord,
    demo: &Demonstration,
    kind: Mutation,
    rng: &mut ChaCha8Rng,
) -> Option<CotRecord> {
    let v = &grammar.vocab;
    let mut m = rec.clone();
    match kind {
        Mutation::TagDrop => {
            let tags: Vec<usize> = (0..m.target.len())
                .filter(|&i| v.as_control(m.target[i]).is_some())
                .collect();
            m.target.remove(tags[rng.gen_range(0..tags.len())]);
        }
        Mutation::FrameSwap => {
            let f = rec.frame_id;
            let others: Vec<usize> = (0..demo.len() + 2).filter(|&j| j != f).collect();
            m.frame_id = others[rng.gen_range(0..others.len())];
        }
        Mutation::ChunkEdit => {
            let acts: Vec<usize> = (0..m.target.len())
                .filter(|&i| v.class(m.target[i]) == Some(TokenClass::Action))
                .collect();
            let i = acts[rng.gen_range(0..acts.len())];
            let choices: Vec<u32> = (0..v.len() as u32)
                .filter(|&t| v.class(t) == Some(TokenClass::Action) && t != m.target[i])
                .collect();
            m.target[i] = choices[rng.gen_range(0..choices.len())];
        }
        Mutation::RegionShift => {
            let r = m.tool_region?;
            let (dx, dy) = loop {
                let d = (rng.gen_range(-60i64..=60), rng.gen_range(-60i64..=60));
                if d != (0, 0) {
                    break d;
                }
            };
            let shift = |a: u32, d: i64| (a as i64 + d).max(0) as u32;
            let moved = Region::new(
                shift(r.x0, dx),
                shift(r.y0, dy),
                shift(r.x1, dx),
                shift(r.y1, dy),
            );
            if moved == r {
                return None;
            }
            m.tool_region = Some(moved);
        }
    }
    Some(m)
}

pub fn correctly_classified(kind: Mutation, errs: &[ValidationError]) -> bool {
    use ValidationError::*;
    errs.iter().any(|e| match kind {
        Mutation::TagDrop => matches!(e, Grammar { .. }),
        Mutation::FrameSwap => {
            matches!(
                e,
                KeyframeMismatch
                    | ChunkMismatch
                    | PromptMismatch
                    | FrameOutOfRange { .. }
                    | FrameOrder { .. }
            )
        }
        Mutation::ChunkEdit => matches!(e, ChunkMismatch),
        Mutation::RegionShift => matches!(e, RegionMismatch | RegionOutOfFrame),
    })
}
