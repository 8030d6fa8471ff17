//! Structured reasoning traces: think / tool-call / evidence / action segments.
//!
//! Grammar over token ids:
//!
//! ```text
//! trace   := (think (tool evid)?)* action <eos>
//! think   := <think> TEXT* </think>
//! tool    := <tool> TOOL_NAME COORD COORD COORD COORD </tool>
//! evid    := <evid>
//! action  := <act> ACTION{K} </act>
//! ```
//!
//! A tool call must directly follow a think segment and is always answered by
//! exactly one evidence marker. The evidence pixels travel out of band; the
//! token stream only records where they were injected.

use crate::action::Action;
use crate::vocab::{Control, TokenClass, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Region {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Region { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn fits(&self, w: u32, h: u32) -> bool {
        !self.is_empty() && self.x1 <= w && self.y1 <= h
    }

    pub fn contains_rect(&self, other: &Region) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Think(Vec<TokenId>),
    ToolCall(ToolSpec),
    Evidence,
    Action(Vec<Action>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Trace {
    pub segments: Vec<Segment>,
}

impl Trace {
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolSpec> {
        self.segments.iter().filter_map(|s| match s {
            Segment::ToolCall(t) => Some(t),
            _ => None,
        })
    }

    pub fn num_tool_calls(&self) -> usize {
        self.tool_calls().count()
    }

    pub fn action(&self) -> Option<&[Action]> {
        self.segments.iter().rev().find_map(|s| match s {
            Segment::Action(a) => Some(a.as_slice()),
            _ => None,
        })
    }
}

/// What the parser wanted at the failing position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    SegmentStart,
    Class(TokenClass),
    Tag(Control),
    ToolName,
    Coordinate,
    EndOfInput,
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expected::SegmentStart => f.write_str("<think>, <tool> or <act>"),
            Expected::Class(c) => write!(f, "{c} token"),
            Expected::Tag(c) => f.write_str(c.surface()),
            Expected::ToolName => f.write_str("tool name"),
            Expected::Coordinate => f.write_str("coordinate"),
            Expected::EndOfInput => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseErrorKind {
    UnbalancedTag,
    BadToolArgs,
    MissingAction,
    MissingEvidence,
    TooManyToolCalls,
    UnexpectedToken,
    TrailingTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at position {position}: expected {expected}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub position: usize,
    pub expected: Expected,
}

/// Grammar parameters plus the vocabulary they are expressed in.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub vocab: Vocabulary,
    pub chunk_len: usize,
    pub max_tool_calls: usize,
    pub frame_w: u32,
    pub frame_h: u32,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            vocab: Vocabulary::default(),
            chunk_len: 4,
            max_tool_calls: 3,
            frame_w: 48,
            frame_h: 48,
        }
    }
}

fn err(kind: ParseErrorKind, position: usize, expected: Expected) -> ParseError {
    ParseError {
        kind,
        position,
        expected,
    }
}

impl Grammar {
    pub fn tok(&self, c: Control) -> TokenId {
        self.vocab.control(c)
    }

    pub fn parse(&self, tokens: &[TokenId]) -> Result<Trace, ParseError> {
        use ParseErrorKind::*;
        let v = &self.vocab;
        let n = tokens.len();
        let mut pos = 0;
        let mut segments = Vec::new();
        let mut tool_calls = 0;
        let mut after_think = false;

        loop {
            if pos == n {
                return Err(err(MissingAction, n, Expected::SegmentStart));
            }
            match v.as_control(tokens[pos]) {
                Some(Control::ThinkOpen) => {
                    pos += 1;
                    let mut words = Vec::new();
                    loop {
                        if pos == n {
                            return Err(err(UnbalancedTag, n, Expected::Tag(Control::ThinkClose)));
                        }
                        let t = tokens[pos];
                        if v.class(t) == Some(TokenClass::Text) {
                            words.push(t);
                            pos += 1;
                        } else if t == self.tok(Control::ThinkClose) {
                            pos += 1;
                            break;
                        } else {
                            return Err(err(
                                UnbalancedTag,
                                pos,
                                Expected::Tag(Control::ThinkClose),
                            ));
                        }
                    }
                    segments.push(Segment::Think(words));
                    after_think = true;
                }
                Some(Control::ToolOpen) => {
                    if !after_think {
                        return Err(err(UnexpectedToken, pos, Expected::SegmentStart));
                    }
                    if tool_calls == self.max_tool_calls {
                        return Err(err(TooManyToolCalls, pos, Expected::SegmentStart));
                    }
                    pos += 1;
                    let name = match tokens.get(pos) {
                        None => {
                            return Err(err(UnbalancedTag, n, Expected::Tag(Control::ToolClose)))
                        }
                        Some(&t) => {
                            v.as_tool_name(t)
                                .ok_or(err(BadToolArgs, pos, Expected::ToolName))?
                        }
                    };
                    pos += 1;
                    let first_coord = pos;
                    let mut c = [0u32; 4];
                    for slot in c.iter_mut() {
                        match tokens.get(pos) {
                            None => {
                                return Err(err(
                                    UnbalancedTag,
                                    n,
                                    Expected::Tag(Control::ToolClose),
                                ))
                            }
                            Some(&t) => {
                                *slot = v.as_coord(t).ok_or(err(
                                    BadToolArgs,
                                    pos,
                                    Expected::Coordinate,
                                ))?
                            }
                        }
                        pos += 1;
                    }
                    match tokens.get(pos) {
                        None => {
                            return Err(err(UnbalancedTag, n, Expected::Tag(Control::ToolClose)))
                        }
                        Some(&t) if t == self.tok(Control::ToolClose) => pos += 1,
                        Some(_) => {
                            return Err(err(BadToolArgs, pos, Expected::Tag(Control::ToolClose)))
                        }
                    }
                    let region = Region::new(c[0], c[1], c[2], c[3]);
                    if !region.fits(self.frame_w, self.frame_h) {
                        return Err(err(BadToolArgs, first_coord, Expected::Coordinate));
                    }
                    match tokens.get(pos) {
                        Some(&t) if t == self.tok(Control::Evid) => pos += 1,
                        _ => return Err(err(MissingEvidence, pos, Expected::Tag(Control::Evid))),
                    }
                    segments.push(Segment::ToolCall(ToolSpec {
                        name: name.to_string(),
                        region,
                    }));
                    segments.push(Segment::Evidence);
                    tool_calls += 1;
                    after_think = false;
                }
                Some(Control::ActOpen) => {
                    pos += 1;
                    let mut acts = Vec::with_capacity(self.chunk_len);
                    for _ in 0..self.chunk_len {
                        match tokens.get(pos) {
                            None => {
                                return Err(err(UnbalancedTag, n, Expected::Tag(Control::ActClose)))
                            }
                            Some(&t) => acts.push(v.as_action(t).ok_or(err(
                                UnexpectedToken,
                                pos,
                                Expected::Class(TokenClass::Action),
                            ))?),
                        }
                        pos += 1;
                    }
                    match tokens.get(pos) {
                        None => {
                            return Err(err(UnbalancedTag, n, Expected::Tag(Control::ActClose)))
                        }
                        Some(&t) if t == self.tok(Control::ActClose) => pos += 1,
                        Some(_) => {
                            return Err(err(UnexpectedToken, pos, Expected::Tag(Control::ActClose)))
                        }
                    }
                    match tokens.get(pos) {
                        Some(&t) if t == self.tok(Control::Eos) => pos += 1,
                        _ => return Err(err(UnexpectedToken, pos, Expected::Tag(Control::Eos))),
                    }
                    if pos != n {
                        return Err(err(TrailingTokens, pos, Expected::EndOfInput));
                    }
                    segments.push(Segment::Action(acts));
                    return Ok(Trace { segments });
                }
                Some(Control::ThinkClose | Control::ToolClose | Control::ActClose) => {
                    return Err(err(UnbalancedTag, pos, Expected::SegmentStart));
                }
                _ => return Err(err(UnexpectedToken, pos, Expected::SegmentStart)),
            }
        }
    }

    /// Token form of a valid trace. Panics if the trace references tokens the
    /// vocabulary cannot express (unknown tool, coordinate out of range).
    pub fn render(&self, trace: &Trace) -> Vec<TokenId> {
        let v = &self.vocab;
        let mut out = Vec::new();
        for seg in &trace.segments {
            match seg {
                Segment::Think(words) => {
                    out.push(self.tok(Control::ThinkOpen));
                    out.extend_from_slice(words);
                    out.push(self.tok(Control::ThinkClose));
                }
                Segment::ToolCall(spec) => {
                    out.push(self.tok(Control::ToolOpen));
                    out.push(
                        v.tool_name_token(&spec.name)
                            .expect("tool name in vocabulary"),
                    );
                    let r = spec.region;
                    for c in [r.x0, r.y0, r.x1, r.y1] {
                        out.push(v.coord_token(c).expect("coordinate in vocabulary"));
                    }
                    out.push(self.tok(Control::ToolClose));
                }
                Segment::Evidence => out.push(self.tok(Control::Evid)),
                Segment::Action(acts) => {
                    out.push(self.tok(Control::ActOpen));
                    out.extend(acts.iter().map(|&a| v.action_token(a)));
                    out.push(self.tok(Control::ActClose));
                    out.push(self.tok(Control::Eos));
                }
            }
        }
        out
    }

    /// Format indicator: 1 iff the tokens parse.
    pub fn check_format(&self, tokens: &[TokenId]) -> u8 {
        u8::from(self.parse(tokens).is_ok())
    }
}

pub fn parse_trace(grammar: &Grammar, tokens: &[TokenId]) -> Result<Trace, ParseError> {
    grammar.parse(tokens)
}

pub fn render_trace(grammar: &Grammar, trace: &Trace) -> Vec<TokenId> {
    grammar.render(trace)
}

pub fn check_format(grammar: &Grammar, tokens: &[TokenId]) -> u8 {
    grammar.check_format(tokens)
}
