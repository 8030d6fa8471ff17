//! Tiny autoregressive token policy with exact gradients.

pub mod decoder;
pub mod model;
pub mod params;
pub mod sequence;

pub use decoder::Decoder;
pub use model::{log_softmax, sequence_logprob, softmax, ForwardCache, Model};
pub use params::{CheckpointError, ParamLayout, PolicyConfig, PolicyParams};
pub use sequence::{
    evidence_feature, prompt_inputs, CoarsePatch, Input, PromptContext, Sequence, StepTrace, Target,
};

use crate::vocab::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("trace of {len} positions exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("instruction of {len} tokens exceeds the maximum of {max}")]
    InstructionTooLong { len: usize, max: usize },
    #[error("bad prompt: {0}")]
    BadPrompt(String),
    #[error("evidence payload count does not match evidence markers")]
    EvidenceCount,
    #[error("evidence patch is {width}x{height}, expected the configured resolution")]
    EvidenceShape { width: u32, height: u32 },
    #[error("numerical fault: {0}")]
    NumericalFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Temperature { tau: f64 },
}

/// Picks a token from one logit row: argmax (lowest id on ties) or a
/// temperature-scaled categorical draw.
pub fn pick_token(logits: &[f64], mode: DecodeMode, rng: &mut impl Rng) -> TokenId {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best as TokenId
        }
        DecodeMode::Temperature { tau } => {
            assert!(tau > 0.0, "temperature must be positive");
            let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as TokenId;
                }
            }
            (probs.len() - 1) as TokenId
        }
    }
}

/// Samples a plain token stream of length `len` after `prompt`.
pub fn sample_raw(
    params: &PolicyParams,
    prompt: &PromptContext,
    len: usize,
    mode: DecodeMode,
    seed: u64,
) -> Vec<TokenId> {
    let model = Model::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dec, mut logits) = Decoder::new(&model, &prompt_inputs(prompt, &params.config));
    let mut out = Vec::with_capacity(len);
    for pos in 0..len {
        let t = pick_token(&logits, mode, &mut rng);
        out.push(t);
        if pos + 1 < len {
            logits = dec.push(Input::Token { token: t, pos });
        }
    }
    out
}
