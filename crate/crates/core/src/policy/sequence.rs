//! Model inputs: the prompt context and the per-position input layout of a
//! decision step, together with the hybrid attention mask it implies.

use super::params::PolicyConfig;
use super::PolicyError;
use crate::env::render::BACKGROUND;
use crate::env::Observation;
use crate::vision::{EvidencePayload, Image};
use crate::vocab::{Control, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// A coarse observation patch that contains something other than table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarsePatch {
    pub px: usize,
    pub py: usize,
    /// Mean colour of the patch scaled to `[0, 1]`.
    pub rgb: [f64; 3],
}

/// Conditioning context of one decision step: proprioception, the coarse
/// view of the current frame and the instruction tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub gripper: (usize, usize),
    pub closed: bool,
    pub patches: Vec<CoarsePatch>,
    pub instruction: Vec<TokenId>,
}

impl PromptContext {
    pub fn new(obs: &Observation, instruction: Vec<TokenId>, cfg: &PolicyConfig) -> Self {
        let img = &obs.image;
        let cell = img.width as usize / cfg.coarse_grid;
        let pooled = img.pooled(cell as u32);
        let mut patches = Vec::new();
        for py in 0..cfg.coarse_grid {
            for px in 0..cfg.coarse_grid {
                if !is_blank(img, px * cell, py * cell, cell) {
                    let m = pooled[py * cfg.coarse_grid + px];
                    patches.push(CoarsePatch {
                        px,
                        py,
                        rgb: [m[0] / 255.0, m[1] / 255.0, m[2] / 255.0],
                    });
                }
            }
        }
        PromptContext {
            gripper: (obs.proprio.x as usize, obs.proprio.y as usize),
            closed: obs.proprio.closed,
            patches,
            instruction,
        }
    }

    /// Prompt with only a proprioceptive token; used for raw token streams.
    pub fn bare() -> Self {
        PromptContext {
            gripper: (0, 0),
            closed: false,
            patches: vec![],
            instruction: vec![],
        }
    }

    pub fn len(&self) -> usize {
        1 + self.patches.len() + self.instruction.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn is_blank(img: &Image, x0: usize, y0: usize, side: usize) -> bool {
    (y0..y0 + side).all(|y| (x0..x0 + side).all(|x| img.get(x as u32, y as u32) == BACKGROUND))
}

/// What is fed to the network at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Input {
    Proprio {
        x: usize,
        y: usize,
        closed: bool,
    },
    Patch {
        rgb: [f64; 3],
        rx: usize,
        ry: usize,
    },
    Instr {
        token: TokenId,
        index: usize,
    },
    Token {
        token: TokenId,
        pos: usize,
    },
    /// Injected evidence; `feature` indexes [`Sequence::evidence`], `None` is a tool error.
    Evidence {
        token: TokenId,
        pos: usize,
        feature: Option<usize>,
    },
    /// Placeholder of action slot `slot`, decoded in parallel with its siblings.
    Slot {
        slot: usize,
        pos: usize,
    },
}

/// A prediction: the logits at `row` are scored against `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub token: TokenId,
}

/// Token-level record of one decision step.
///
/// `generated[i]` is true for tokens sampled from the policy and false for
/// tokens injected by the controller (evidence markers, forced tags).
/// `evidence` holds one payload per evidence marker, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub tokens: Vec<TokenId>,
    pub generated: Vec<bool>,
    pub evidence: Vec<EvidencePayload>,
}

impl StepTrace {
    /// Marks evidence markers and the tags closing an action segment as
    /// injected and everything else as generated.
    pub fn from_tokens(
        tokens: Vec<TokenId>,
        evidence: Vec<EvidencePayload>,
        vocab: &Vocabulary,
        chunk_len: usize,
    ) -> Self {
        let evid = vocab.control(Control::Evid);
        let act_open = vocab.control(Control::ActOpen);
        let mut generated = vec![true; tokens.len()];
        let mut i = 0;
        while i < tokens.len() {
            if tokens[i] == evid {
                generated[i] = false;
            } else if tokens[i] == act_open {
                for g in generated.iter_mut().skip(i + 1 + chunk_len) {
                    *g = false;
                }
                break;
            }
            i += 1;
        }
        StepTrace {
            tokens,
            generated,
            evidence,
        }
    }

    /// Number of policy-generated tokens (the response-length contribution).
    pub fn generated_len(&self) -> usize {
        self.generated.iter().filter(|&&g| g).count()
    }
}

/// Fully laid-out model input with its attention structure and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Input>,
    /// Positions `[0, prefix_len)` form the bidirectional prompt block.
    pub prefix_len: usize,
    /// Bidirectional action block, if present.
    pub block: Option<Range<usize>>,
    pub targets: Vec<Target>,
    pub evidence: Vec<Vec<f64>>,
}

fn check_prompt(prompt: &PromptContext, cfg: &PolicyConfig) -> Result<(), PolicyError> {
    if prompt.instruction.len() > cfg.max_instr_len {
        return Err(PolicyError::InstructionTooLong {
            len: prompt.instruction.len(),
            max: cfg.max_instr_len,
        });
    }
    let (gx, gy) = prompt.gripper;
    if gx >= cfg.grid_size || gy >= cfg.grid_size {
        return Err(PolicyError::BadPrompt(format!(
            "gripper {gx},{gy} off the grid"
        )));
    }
    Ok(())
}

/// Prompt positions: proprioception, coarse patches, instruction.
pub fn prompt_inputs(prompt: &PromptContext, cfg: &PolicyConfig) -> Vec<Input> {
    let (gx, gy) = prompt.gripper;
    let cells = cfg.grid_size / cfg.coarse_grid;
    let mut v = Vec::with_capacity(prompt.len());
    v.push(Input::Proprio {
        x: gx,
        y: gy,
        closed: prompt.closed,
    });
    for p in &prompt.patches {
        v.push(Input::Patch {
            rgb: p.rgb,
            rx: p.px * cells + cfg.grid_size - 1 - gx,
            ry: p.py * cells + cfg.grid_size - 1 - gy,
        });
    }
    for (index, &token) in prompt.instruction.iter().enumerate() {
        v.push(Input::Instr { token, index });
    }
    v
}

pub fn evidence_feature(
    payload: &EvidencePayload,
    cfg: &PolicyConfig,
) -> Result<Option<Vec<f64>>, PolicyError> {
    match payload {
        EvidencePayload::ToolError(_) => Ok(None),
        EvidencePayload::Patch(p) => {
            let e = cfg.evidence_res as u32;
            if p.pixels.width != e || p.pixels.height != e {
                return Err(PolicyError::EvidenceShape {
                    width: p.pixels.width,
                    height: p.pixels.height,
                });
            }
            Ok(Some(
                p.pixels
                    .data
                    .iter()
                    .map(|&b| f64::from(b) / 255.0)
                    .collect(),
            ))
        }
    }
}

impl Sequence {
    /// Layout of a decision step: prompt, trace tokens up to and including
    /// the action opener, then one slot per action token.
    pub fn for_step(
        prompt: &PromptContext,
        step: &StepTrace,
        vocab: &Vocabulary,
        cfg: &PolicyConfig,
    ) -> Result<Sequence, PolicyError> {
        check_prompt(prompt, cfg)?;
        let evid = vocab.control(Control::Evid);
        let act_open = vocab.control(Control::ActOpen);
        let mut inputs = prompt_inputs(prompt, cfg);
        let prefix_len = inputs.len();
        let mut targets = Vec::new();
        let mut evidence = Vec::new();
        let mut block = None;
        let mut ev_seen = 0;
        let n = step.tokens.len();
        let mut i = 0;
        while i < n {
            let t = step.tokens[i];
            if step.generated[i] {
                targets.push(Target {
                    row: inputs.len() - 1,
                    token: t,
                });
            }
            if t == evid {
                let payload = step
                    .evidence
                    .get(ev_seen)
                    .ok_or(PolicyError::EvidenceCount)?;
                ev_seen += 1;
                let feature = evidence_feature(payload, cfg)?.map(|f| {
                    evidence.push(f);
                    evidence.len() - 1
                });
                inputs.push(Input::Evidence {
                    token: t,
                    pos: i,
                    feature,
                });
            } else {
                inputs.push(Input::Token { token: t, pos: i });
            }
            i += 1;
            if t == act_open {
                let start = inputs.len();
                for slot in 0..cfg.chunk_len.min(n - i) {
                    let pos = i + slot;
                    if step.generated[pos] {
                        targets.push(Target {
                            row: inputs.len(),
                            token: step.tokens[pos],
                        });
                    }
                    inputs.push(Input::Slot { slot, pos });
                }
                block = Some(start..inputs.len());
                break;
            }
        }
        if ev_seen != step.evidence.len() {
            return Err(PolicyError::EvidenceCount);
        }
        let trace_len = inputs.len() - prefix_len;
        if trace_len > cfg.max_seq_len {
            return Err(PolicyError::SequenceTooLong {
                len: trace_len,
                max: cfg.max_seq_len,
            });
        }
        Ok(Sequence {
            inputs,
            prefix_len,
            block,
            targets,
            evidence,
        })
    }

    /// Plain causal token stream after the prompt; every token is a target.
    pub fn raw(
        prompt: &PromptContext,
        tokens: &[TokenId],
        cfg: &PolicyConfig,
    ) -> Result<Sequence, PolicyError> {
        check_prompt(prompt, cfg)?;
        if tokens.len() > cfg.max_seq_len {
            return Err(PolicyError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let mut inputs = prompt_inputs(prompt, cfg);
        let prefix_len = inputs.len();
        let mut targets = Vec::with_capacity(tokens.len());
        for (pos, &token) in tokens.iter().enumerate() {
            targets.push(Target {
                row: inputs.len() - 1,
                token,
            });
            inputs.push(Input::Token { token, pos });
        }
        Ok(Sequence {
            inputs,
            prefix_len,
            block: None,
            targets,
            evidence: vec![],
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of keys visible to query row `q`; visible keys are always `[0, n)`.
    pub fn visible(&self, q: usize) -> usize {
        visible_keys(q, self.prefix_len, self.block.as_ref())
    }

    /// The attention mask as an explicit boolean matrix.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        (0..self.len())
            .map(|q| (0..self.len()).map(|k| k < self.visible(q)).collect())
            .collect()
    }
}

pub(crate) fn visible_keys(q: usize, prefix_len: usize, block: Option<&Range<usize>>) -> usize {
    if q < prefix_len {
        prefix_len
    } else if let Some(b) = block.filter(|b| b.contains(&q)) {
        b.end
    } else {
        q + 1
    }
}
