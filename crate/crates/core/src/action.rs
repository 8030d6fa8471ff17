//! Low-level manipulation primitives and fixed-length action chunks.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One primitive gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    ToggleGrip,
    Noop,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::ToggleGrip,
        Action::Noop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "UP",
            Action::Down => "DOWN",
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::ToggleGrip => "TOGGLE_GRIP",
            Action::Noop => "NOOP",
        }
    }

    pub fn from_name(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Grid displacement `(dx, dy)`; `y` grows downwards.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::ToggleGrip | Action::Noop => (0, 0),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A chunk of exactly `K` primitives executed in order by one environment step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionChunk(Vec<Action>);

impl ActionChunk {
    /// Panics unless `actions` is non-empty; the caller owns the length contract.
    pub fn new(actions: Vec<Action>) -> Self {
        assert!(!actions.is_empty(), "action chunk cannot be empty");
        ActionChunk(actions)
    }

    pub fn noop(k: usize) -> Self {
        ActionChunk(vec![Action::Noop; k])
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
