//! MiniManip: a deterministic grid-world tabletop with a single gripper.
//!
//! Objects rest on a 12x12 grid. A gripper moves one cell per primitive and
//! toggles between open and closed; closing over a pickable object lifts it,
//! opening while holding puts it on whatever is on top of the current cell
//! (inside it, for bins). Goals are conjunctions of `Holding` and `On`
//! relations over object classes.

pub mod expert;
pub mod render;
pub mod task;

use crate::action::{Action, ActionChunk};
use crate::vision::Image;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use expert::{scripted_expert, ExpertPlan, ExpertStep, Phase};
pub use task::{Color, Kind, Marking, ObjectClass, Relation, TaskError, TaskSpec, TaskSuite, Tier};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub kind: Kind,
    pub color: Color,
    pub marking: Marking,
    pub cell: (u32, u32),
    /// Object this one rests on (or is contained in, for bins).
    pub support: Option<usize>,
}

impl Object {
    pub fn is(&self, class: &ObjectClass) -> bool {
        class.matches(self.kind, self.color, self.marking)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub grid_size: u32,
    pub gripper_pos: (u32, u32),
    pub gripper_closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<Object>,
    pub step_count: u32,
    pub max_steps: u32,
    pub rng_seed: u64,
    pub goal: Vec<Relation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Proprio {
    pub x: u32,
    pub y: u32,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub image: Image,
    pub proprio: Proprio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
    /// Primitives actually executed (fewer than the chunk when the episode ends early).
    pub executed: usize,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    InvalidTask(#[from] TaskError),
    #[error("step called on a finished episode")]
    SteppedAfterDone,
    #[error("expert cannot solve state: {0}")]
    Unsolvable(String),
    #[error("no admissible layout for task {task:?} seed {seed} after {attempts} attempts")]
    LayoutExhausted {
        task: String,
        seed: u64,
        attempts: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: u32,
    pub chunk_len: usize,
    pub max_layout_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_size: 12,
            chunk_len: 4,
            max_layout_attempts: 20_000,
        }
    }
}

impl EnvState {
    pub fn observe(&self) -> Observation {
        Observation {
            image: render::render(self),
            proprio: Proprio {
                x: self.gripper_pos.0,
                y: self.gripper_pos.1,
                closed: self.gripper_closed,
            },
        }
    }

    pub fn inside_bin(&self, id: usize) -> bool {
        self.objects[id]
            .support
            .is_some_and(|s| self.objects[s].kind == Kind::Bin)
    }

    pub fn stack_depth(&self, id: usize) -> u32 {
        let mut depth = 0;
        let mut cur = self.objects[id].support;
        while let Some(s) = cur {
            depth += 1;
            cur = self.objects[s].support;
        }
        depth
    }

    /// Visible object at `cell` that nothing rests on (bins stay on top of their contents).
    pub fn top_at(&self, cell: (u32, u32)) -> Option<usize> {
        self.objects
            .iter()
            .filter(|o| o.cell == cell && self.held != Some(o.id) && !self.inside_bin(o.id))
            .find(|o| {
                o.kind == Kind::Bin
                    || !self
                        .objects
                        .iter()
                        .any(|p| p.support == Some(o.id) && self.held != Some(p.id))
            })
            .map(|o| o.id)
    }

    pub fn relation_holds(&self, rel: &Relation) -> bool {
        match rel {
            Relation::Holding { object } => self.held.is_some_and(|h| self.objects[h].is(object)),
            Relation::On { object, support } => self.objects.iter().any(|o| {
                o.is(object)
                    && self.held != Some(o.id)
                    && o.support.is_some_and(|s| self.objects[s].is(support))
            }),
        }
    }

    /// Conjunction of the goal relations; an empty goal is satisfied.
    pub fn success(&self) -> bool {
        self.goal.iter().all(|r| self.relation_holds(r))
    }

    pub fn done(&self) -> bool {
        self.success() || self.step_count >= self.max_steps
    }

    fn apply(&mut self, a: Action) {
        match a {
            Action::ToggleGrip => self.toggle(),
            Action::Noop => {}
            _ => {
                let (dx, dy) = a.delta();
                let max = self.grid_size as i64 - 1;
                let x = (self.gripper_pos.0 as i64 + dx as i64).clamp(0, max) as u32;
                let y = (self.gripper_pos.1 as i64 + dy as i64).clamp(0, max) as u32;
                self.gripper_pos = (x, y);
                if let Some(h) = self.held {
                    self.objects[h].cell = self.gripper_pos;
                }
            }
        }
    }

    fn toggle(&mut self) {
        if self.gripper_closed {
            self.gripper_closed = false;
            let below = self.top_at(self.gripper_pos);
            if let Some(h) = self.held.take() {
                self.objects[h].support = below;
                self.objects[h].cell = self.gripper_pos;
            }
        } else {
            self.gripper_closed = true;
            if let Some(t) = self.top_at(self.gripper_pos) {
                if self.objects[t].kind.pickable() {
                    self.held = Some(t);
                    self.objects[t].support = None;
                }
            }
        }
    }

    /// Executes the chunk's primitives in order, stopping as soon as the episode ends.
    pub fn step(&mut self, chunk: &ActionChunk) -> Result<StepOutcome, EnvError> {
        if self.done() {
            return Err(EnvError::SteppedAfterDone);
        }
        let mut executed = 0;
        for &a in chunk.actions() {
            self.apply(a);
            self.step_count += 1;
            executed += 1;
            if self.done() {
                break;
            }
        }
        Ok(StepOutcome {
            done: self.done(),
            success: self.success(),
            executed,
        })
    }
}

/// Functional form of [`EnvState::step`].
pub fn step(
    state: &EnvState,
    chunk: &ActionChunk,
) -> Result<(EnvState, Observation, bool, u8), EnvError> {
    let mut next = state.clone();
    let out = next.step(chunk)?;
    let obs = next.observe();
    Ok((next, obs, out.done, u8::from(out.success)))
}

/// Seed of the layout generator: a stable hash of the task name and episode seed.
pub fn layout_seed(task: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(task.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

enum Group {
    Single(ObjectClass),
    Pair { kind: Kind, color: Color },
}

fn spawn_groups(task: &TaskSpec) -> Vec<Group> {
    let mut groups = Vec::new();
    let mut pairs: Vec<(Kind, Color)> = Vec::new();
    for c in task.referenced_classes() {
        match (c.marking, c.color) {
            (Some(_), Some(color)) => {
                if !pairs.contains(&(c.kind, color)) {
                    pairs.push((c.kind, color));
                    groups.push(Group::Pair {
                        kind: c.kind,
                        color,
                    });
                }
            }
            _ => groups.push(Group::Single(c)),
        }
    }
    groups
}

const MARKINGS: [Marking; 2] = [Marking::DotA, Marking::DotB];

impl EnvConfig {
    /// Interior 8x8-pixel patches; an object anchored at a lattice site
    /// occupies the left cell of the patch's top row.
    fn lattice(&self) -> Vec<(u32, u32)> {
        let patches = self.grid_size / 2;
        let mut out = Vec::new();
        for py in 1..patches - 1 {
            for px in 1..patches - 1 {
                out.push((2 * px, 2 * py));
            }
        }
        out
    }

    fn sample_layout(&self, task: &TaskSpec, seed: u64, rng: &mut ChaCha8Rng) -> EnvState {
        let referenced = task.referenced_classes();
        let used_colors: Vec<Color> = referenced.iter().filter_map(|c| c.color).collect();
        let free_colors: Vec<Color> = Color::ALL
            .into_iter()
            .filter(|c| !used_colors.contains(c))
            .collect();
        let mut sites = self.lattice();
        sites.shuffle(rng);
        let mut sites = sites.into_iter();
        let mut objects: Vec<Object> = Vec::new();
        let push = |objects: &mut Vec<Object>, kind, color, marking, cell| {
            let id = objects.len();
            objects.push(Object {
                id,
                kind,
                color,
                marking,
                cell,
                support: None,
            });
        };
        for g in spawn_groups(task) {
            let site = sites.next().expect("validated task fits the lattice");
            match g {
                Group::Single(c) => {
                    let color = c
                        .color
                        .unwrap_or_else(|| *free_colors.choose(rng).expect("free colour"));
                    let marking = c.marking.unwrap_or_else(|| MARKINGS[rng.gen_range(0..2)]);
                    push(&mut objects, c.kind, color, marking, site);
                }
                Group::Pair { kind, color } => {
                    let left = MARKINGS[rng.gen_range(0..2)];
                    push(&mut objects, kind, color, left, site);
                    push(
                        &mut objects,
                        kind,
                        color,
                        left.other(),
                        (site.0 + 1, site.1),
                    );
                }
            }
        }
        for _ in 0..task.distractors {
            let site = sites.next().expect("validated task fits the lattice");
            let kind = [Kind::Block, Kind::Plate, Kind::Bowl][rng.gen_range(0..3)];
            let color = *free_colors.choose(rng).expect("free colour");
            let marking = MARKINGS[rng.gen_range(0..2)];
            push(&mut objects, kind, color, marking, site);
        }
        let gripper_pos = (
            rng.gen_range(0..self.grid_size),
            rng.gen_range(0..self.grid_size),
        );
        EnvState {
            grid_size: self.grid_size,
            gripper_pos,
            gripper_closed: false,
            held: None,
            objects,
            step_count: 0,
            max_steps: task.max_steps(),
            rng_seed: seed,
            goal: task.goal.clone(),
        }
    }

    /// Deterministic layout for `(task, seed)`, rejection-sampled so the
    /// scripted expert finishes with the tier's slack to spare and never
    /// starts directly on its first grasp site.
    pub fn reset(&self, task: &TaskSpec, seed: u64) -> Result<(EnvState, Observation), EnvError> {
        task.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed(&task.name, seed));
        let max_chunks = task.max_steps() / self.chunk_len as u32;
        let budget = max_chunks.saturating_sub(task.tier.slack_chunks(self.chunk_len)) as usize;
        for _ in 0..self.max_layout_attempts {
            let state = self.sample_layout(task, seed, &mut rng);
            if state.success() {
                return Ok((state.clone(), state.observe()));
            }
            let Ok(plan) = scripted_expert(&state, self.chunk_len) else {
                continue;
            };
            let starts_on_grasp = plan.steps.first().is_some_and(|s| s.phase == Phase::Grasp);
            if plan.chunks.len() <= budget && !starts_on_grasp {
                let obs = state.observe();
                return Ok((state, obs));
            }
        }
        Err(EnvError::LayoutExhausted {
            task: task.name.clone(),
            seed,
            attempts: self.max_layout_attempts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> TaskSuite {
        TaskSuite::default_suite()
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::default();
        for t in &suite().tasks {
            let a = cfg.reset(t, 7).unwrap();
            let b = cfg.reset(t, 7).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn moves_clamp_and_shift() {
        let cfg = EnvConfig::default();
        let (mut s, _) = cfg.reset(&suite().tasks[2], 0).unwrap();
        s.gripper_pos = (2, 3);
        s.step(&ActionChunk::new(vec![
            Action::Right,
            Action::Noop,
            Action::Noop,
            Action::Noop,
        ]))
        .unwrap();
        assert_eq!(s.gripper_pos, (3, 3));
        s.gripper_pos = (0, 0);
        s.step(&ActionChunk::new(vec![
            Action::Left,
            Action::Up,
            Action::Up,
            Action::Left,
        ]))
        .unwrap();
        assert_eq!(s.gripper_pos, (0, 0));
    }

    #[test]
    fn toggle_picks_and_places() {
        let cfg = EnvConfig::default();
        let (mut s, _) = cfg.reset(&suite().tasks[2], 3).unwrap();
        let bowl = s
            .objects
            .iter()
            .find(|o| o.kind == Kind::Bowl && o.color == Color::Green)
            .unwrap()
            .clone();
        s.gripper_pos = bowl.cell;
        let grab = ActionChunk::new(vec![
            Action::ToggleGrip,
            Action::Noop,
            Action::Noop,
            Action::Noop,
        ]);
        s.step(&grab).unwrap();
        assert_eq!(s.held, Some(bowl.id));
        s.step(&ActionChunk::new(vec![
            Action::Down,
            Action::Noop,
            Action::Noop,
            Action::Noop,
        ]))
        .unwrap();
        assert_eq!(s.objects[bowl.id].cell, s.gripper_pos);
        s.step(&grab).unwrap();
        assert_eq!(s.held, None);
        assert!(!s.gripper_closed);
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let cfg = EnvConfig::default();
        let (mut s, _) = cfg.reset(&suite().tasks[0], 1).unwrap();
        s.step_count = s.max_steps;
        assert!(matches!(
            s.step(&ActionChunk::noop(4)),
            Err(EnvError::SteppedAfterDone)
        ));
    }

    #[test]
    fn empty_goal_is_already_satisfied() {
        let task = TaskSpec {
            name: "idle".into(),
            tier: Tier::Short,
            instruction: "pick".into(),
            goal: vec![],
            distractors: 2,
        };
        let (s, _) = EnvConfig::default().reset(&task, 0).unwrap();
        assert!(s.success() && s.done());
    }
}
