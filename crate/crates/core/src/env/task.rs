//! Task specifications: object classes, goal relations and horizon tiers.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::Orange,
        Color::Purple,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::Cyan => [40, 210, 220],
            Color::Magenta => [210, 50, 200],
            Color::Orange => [240, 140, 30],
            Color::Purple => [130, 60, 190],
        }
    }

    fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    Block,
    Plate,
    Bowl,
    Bin,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Block, Kind::Plate, Kind::Bowl, Kind::Bin];

    pub fn word(self) -> &'static str {
        match self {
            Kind::Block => "block",
            Kind::Plate => "plate",
            Kind::Bowl => "bowl",
            Kind::Bin => "bin",
        }
    }

    pub fn pickable(self) -> bool {
        matches!(self, Kind::Block | Kind::Bowl)
    }

    fn from_word(w: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Marking {
    DotA,
    DotB,
}

impl Marking {
    pub fn word(self) -> &'static str {
        match self {
            Marking::DotA => "dotA",
            Marking::DotB => "dotB",
        }
    }

    pub fn other(self) -> Marking {
        match self {
            Marking::DotA => Marking::DotB,
            Marking::DotB => Marking::DotA,
        }
    }

    fn from_word(w: &str) -> Option<Marking> {
        [Marking::DotA, Marking::DotB]
            .into_iter()
            .find(|m| m.word() == w)
    }
}

/// A description matching zero or more objects, e.g. "dotA red block" or "bin".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectClass {
    pub kind: Kind,
    pub color: Option<Color>,
    pub marking: Option<Marking>,
}

impl ObjectClass {
    pub fn new(kind: Kind, color: Option<Color>, marking: Option<Marking>) -> Self {
        ObjectClass {
            kind,
            color,
            marking,
        }
    }

    pub fn matches(&self, kind: Kind, color: Color, marking: Marking) -> bool {
        self.kind == kind
            && self.color.is_none_or(|c| c == color)
            && self.marking.is_none_or(|m| m == marking)
    }

    /// Surface words in instruction order: marking, colour, kind.
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::with_capacity(3);
        if let Some(m) = self.marking {
            w.push(m.word());
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        w.push(self.kind.word());
        w
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words().join(" "))
    }
}

impl From<ObjectClass> for String {
    fn from(c: ObjectClass) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ObjectClass {
    type Error = TaskError;

    fn try_from(s: String) -> Result<Self, TaskError> {
        let bad = || TaskError::BadClass(s.clone());
        let words: Vec<&str> = s.split_whitespace().collect();
        let (&kind_word, rest) = words.split_last().ok_or_else(bad)?;
        let kind = Kind::from_word(kind_word).ok_or_else(bad)?;
        let (mut marking, mut color) = (None, None);
        for w in rest {
            if let Some(m) = Marking::from_word(w) {
                if marking.replace(m).is_some() || color.is_some() {
                    return Err(bad());
                }
            } else if let Some(c) = Color::from_word(w) {
                if color.replace(c).is_some() {
                    return Err(bad());
                }
            } else {
                return Err(bad());
            }
        }
        Ok(ObjectClass {
            kind,
            color,
            marking,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "relation", rename_all = "snake_case")]
pub enum Relation {
    Holding {
        object: ObjectClass,
    },
    On {
        object: ObjectClass,
        support: ObjectClass,
    },
}

impl Relation {
    pub fn classes(&self) -> Vec<ObjectClass> {
        match *self {
            Relation::Holding { object } => vec![object],
            Relation::On { object, support } => vec![object, support],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Short,
    Medium,
    Long,
    ExtraLong,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Short, Tier::Medium, Tier::Long, Tier::ExtraLong];

    /// Primitive-step budget of an episode.
    pub fn max_steps(self) -> u32 {
        match self {
            Tier::Short => 12,
            Tier::Medium => 24,
            Tier::Long => 48,
            Tier::ExtraLong => 96,
        }
    }

    /// Chunks of headroom the scripted expert leaves unused on generated layouts.
    pub fn slack_chunks(self, chunk_len: usize) -> u32 {
        let chunks = self.max_steps() / chunk_len as u32;
        (chunks / 4).max(1)
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn default_distractors() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub tier: Tier,
    /// Space-separated instruction words.
    pub instruction: String,
    #[serde(default)]
    pub goal: Vec<Relation>,
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot parse object class {0:?}")]
    BadClass(String),
    #[error("invalid task {task:?}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("task suite parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

impl TaskSpec {
    pub fn instruction_words(&self) -> Vec<&str> {
        self.instruction.split_whitespace().collect()
    }

    pub fn max_steps(&self) -> u32 {
        self.tier.max_steps()
    }

    /// Distinct classes referenced by the goal, in first-mention order.
    pub fn referenced_classes(&self) -> Vec<ObjectClass> {
        let mut out: Vec<ObjectClass> = Vec::new();
        for c in self.goal.iter().flat_map(Relation::classes) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Whether some referenced object is only identifiable by its marking.
    pub fn is_ambiguous(&self) -> bool {
        self.referenced_classes()
            .iter()
            .any(|c| c.marking.is_some())
    }

    /// Rejects goals whose referenced classes cannot be spawned or manipulated.
    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |reason: String| TaskError::InvalidTask {
            task: self.name.clone(),
            reason,
        };
        let classes = self.referenced_classes();
        for rel in &self.goal {
            let moved = match rel {
                Relation::Holding { object } | Relation::On { object, .. } => object,
            };
            if !moved.kind.pickable() {
                return Err(invalid(format!("{moved} cannot be picked up")));
            }
            if let Relation::On { object, support } = rel {
                if object == support {
                    return Err(invalid(format!("{object} cannot rest on itself")));
                }
            }
        }
        for c in &classes {
            if c.marking.is_some() && c.color.is_none() {
                return Err(invalid(format!("marked class {c} needs a colour")));
            }
            if c.color.is_none() && c.kind != Kind::Bin {
                return Err(invalid(format!("class {c} needs a colour")));
            }
            if c.kind == Kind::Bin && c.marking.is_some() {
                return Err(invalid(format!("bins carry no marking reference: {c}")));
            }
            // Two references that could match the same object make the goal ill-posed.
            for d in &classes {
                if c != d
                    && c.kind == d.kind
                    && (c.color.is_none() || d.color.is_none() || c.color == d.color)
                {
                    let same_pair =
                        c.color == d.color && c.marking.is_some() && d.marking.is_some();
                    if !same_pair {
                        return Err(invalid(format!("classes {c} and {d} overlap")));
                    }
                }
            }
        }
        let groups = classes.iter().filter(|c| c.marking.is_none()).count()
            + classes.iter().filter(|c| c.marking.is_some()).count();
        if groups + self.distractors > 16 {
            return Err(invalid("more objects than lattice sites".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSuite {
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn from_toml(text: &str) -> Result<Self, TaskError> {
        let suite: TaskSuite = toml::from_str(text)?;
        for t in &suite.tasks {
            t.validate()?;
        }
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task suite serializes")
    }

    /// The four-task suite spanning every horizon tier.
    pub fn default_suite() -> Self {
        let class = |s: &str| ObjectClass::try_from(s.to_string()).expect("built-in class");
        TaskSuite {
            tasks: vec![
                TaskSpec {
                    name: "pick_marked_block".into(),
                    tier: Tier::Short,
                    instruction: "pick dotA red block".into(),
                    goal: vec![Relation::Holding {
                        object: class("dotA red block"),
                    }],
                    distractors: 2,
                },
                TaskSpec {
                    name: "place_marked_block".into(),
                    tier: Tier::Medium,
                    instruction: "place dotB blue block on yellow plate".into(),
                    goal: vec![Relation::On {
                        object: class("dotB blue block"),
                        support: class("yellow plate"),
                    }],
                    distractors: 2,
                },
                TaskSpec {
                    name: "stack_bowls".into(),
                    tier: Tier::Long,
                    instruction: "stack green bowl on red bowl".into(),
                    goal: vec![Relation::On {
                        object: class("green bowl"),
                        support: class("red bowl"),
                    }],
                    distractors: 2,
                },
                TaskSpec {
                    name: "bin_three_blocks".into(),
                    tier: Tier::ExtraLong,
                    instruction: "put red green blue block in bin".into(),
                    goal: ["red block", "green block", "blue block"]
                        .into_iter()
                        .map(|o| Relation::On {
                            object: class(o),
                            support: class("bin"),
                        })
                        .collect(),
                    distractors: 1,
                },
            ],
        }
    }
}
