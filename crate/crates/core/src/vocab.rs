//! Token vocabulary shared by the grammar, the annotator and the policy.
//!
//! Ids are partitioned into four classes. Control tags come first, then the
//! six action primitives, then the tool-argument sub-vocabulary (tool names
//! followed by one token per pixel coordinate), then free text words.
//!
//! On disk a vocabulary is plain text with one surface form per line; the line
//! number is the token id. Classes are recovered from the surface form.

use crate::action::Action;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Text,
    Control,
    ToolArg,
    Action,
}

/// The eight structural tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Control {
    ThinkOpen,
    ThinkClose,
    ToolOpen,
    ToolClose,
    ActOpen,
    ActClose,
    Evid,
    Eos,
}

impl Control {
    pub const ALL: [Control; 8] = [
        Control::ThinkOpen,
        Control::ThinkClose,
        Control::ToolOpen,
        Control::ToolClose,
        Control::ActOpen,
        Control::ActClose,
        Control::Evid,
        Control::Eos,
    ];

    pub fn surface(self) -> &'static str {
        match self {
            Control::ThinkOpen => "<think>",
            Control::ThinkClose => "</think>",
            Control::ToolOpen => "<tool>",
            Control::ToolClose => "</tool>",
            Control::ActOpen => "<act>",
            Control::ActClose => "</act>",
            Control::Evid => "<evid>",
            Control::Eos => "<eos>",
        }
    }
}

/// Tool names that exist in the default vocabulary.
pub const TOOL_NAMES: [&str; 1] = ["zoom_in"];

/// Template words used by instructions and reasoning traces.
pub const TEXT_WORDS: [&str; 27] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", // colors
    "block", "plate", "bowl", "bin", // kinds
    "dotA", "dotB", // markings
    "pick", "place", "stack", "put", "on", "in", // instructions
    "toward", "grasp", "release", "confirm", "here", "right", "left", // reasoning
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate surface form {0:?} at line {1}")]
    Duplicate(String, usize),
    #[error("vocabulary is missing required token {0:?}")]
    Missing(String),
    #[error("empty surface form at line {0}")]
    Empty(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, TokenId>,
    control: [TokenId; 8],
    actions: [TokenId; 6],
    coord_base: Option<(TokenId, u32)>,
}

fn classify(surface: &str) -> TokenClass {
    if Control::ALL.iter().any(|c| c.surface() == surface) {
        TokenClass::Control
    } else if Action::from_name(surface).is_some() {
        TokenClass::Action
    } else if surface.starts_with('@') || parse_coord(surface).is_some() {
        TokenClass::ToolArg
    } else {
        TokenClass::Text
    }
}

fn parse_coord(surface: &str) -> Option<u32> {
    surface.strip_prefix('#')?.parse().ok()
}

impl Vocabulary {
    /// Default vocabulary for frames up to `max_coord` pixels on a side.
    pub fn with_frame(max_coord: u32) -> Self {
        let mut surfaces: Vec<String> = Control::ALL
            .iter()
            .map(|c| c.surface().to_string())
            .collect();
        surfaces.extend(Action::ALL.iter().map(|a| a.name().to_string()));
        surfaces.extend(TOOL_NAMES.iter().map(|n| format!("@{n}")));
        surfaces.extend((0..=max_coord).map(|c| format!("#{c}")));
        surfaces.extend(TEXT_WORDS.iter().map(|w| w.to_string()));
        Self::from_surfaces(surfaces).expect("default vocabulary is well formed")
    }

    pub fn from_surfaces(surfaces: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::new();
        for (i, s) in surfaces.iter().enumerate() {
            if s.is_empty() {
                return Err(VocabError::Empty(i));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(s.clone(), i));
            }
        }
        let classes: Vec<TokenClass> = surfaces.iter().map(|s| classify(s)).collect();
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| VocabError::Missing(s.to_string()))
        };
        let mut control = [0; 8];
        for (slot, c) in control.iter_mut().zip(Control::ALL) {
            *slot = lookup(c.surface())?;
        }
        let mut actions = [0; 6];
        for (slot, a) in actions.iter_mut().zip(Action::ALL) {
            *slot = lookup(a.name())?;
        }
        // Coordinates must be a contiguous run #0..=#max so value <-> id is affine.
        let coord_base = match index.get("#0") {
            None => None,
            Some(&base) => {
                let mut max = 0u32;
                while let Some(&id) = index.get(&format!("#{}", max + 1)) {
                    if id != base + max + 1 {
                        break;
                    }
                    max += 1;
                }
                Some((base, max))
            }
        };
        Ok(Vocabulary {
            surfaces,
            classes,
            index,
            control,
            actions,
            coord_base,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_surfaces(text.lines().map(|l| l.trim_end().to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = self.surfaces.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn class(&self, id: TokenId) -> Option<TokenClass> {
        self.classes.get(id as usize).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Id of a text word; panics on words outside the vocabulary.
    pub fn word(&self, w: &str) -> TokenId {
        match self.index.get(w) {
            Some(&id) if self.classes[id as usize] == TokenClass::Text => id,
            _ => panic!("{w:?} is not a text word of this vocabulary"),
        }
    }

    pub fn control(&self, c: Control) -> TokenId {
        self.control[c as usize]
    }

    pub fn as_control(&self, id: TokenId) -> Option<Control> {
        Control::ALL.into_iter().find(|&c| self.control(c) == id)
    }

    pub fn action_token(&self, a: Action) -> TokenId {
        self.actions[a as usize]
    }

    pub fn as_action(&self, id: TokenId) -> Option<Action> {
        Action::ALL
            .into_iter()
            .find(|&a| self.action_token(a) == id)
    }

    pub fn tool_name_token(&self, name: &str) -> Option<TokenId> {
        self.id(&format!("@{name}"))
    }

    /// Tool name carried by a tool-name token (not a coordinate).
    pub fn as_tool_name(&self, id: TokenId) -> Option<&str> {
        self.surface(id)?.strip_prefix('@')
    }

    pub fn coord_token(&self, value: u32) -> Option<TokenId> {
        let (base, max) = self.coord_base?;
        (value <= max).then_some(base + value)
    }

    pub fn as_coord(&self, id: TokenId) -> Option<u32> {
        let (base, max) = self.coord_base?;
        (id >= base && id - base <= max).then(|| id - base)
    }

    /// Human-readable dump of a token string.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| {
                self.surface(t)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("<unk:{t}>"))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::with_frame(48)
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TokenClass::Text => "TEXT",
            TokenClass::Control => "CONTROL",
            TokenClass::ToolArg => "TOOL_ARG",
            TokenClass::Action => "ACTION",
        };
        f.write_str(s)
    }
}
