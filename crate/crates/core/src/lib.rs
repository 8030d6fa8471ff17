//! Thinking-with-image vision-language-action stack at desk scale.
//!
//! A tiny autoregressive policy interleaves textual reasoning, ZOOM-IN tool
//! calls and injected visual evidence before emitting an action chunk for the
//! MiniManip grid world. The crate covers the trace grammar, environment,
//! visual tools, policy with exact gradients, the reasoning controller, the
//! chain-of-thought dataset synthesizer, supervised fine-tuning and GRPO.

pub mod action;
pub mod env;
pub mod forge;
pub mod grpo;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod rollout;
pub mod sft;
pub mod trace;
pub mod vision;
pub mod vocab;
