//! Greedy scripted expert over ground-truth state.
//!
//! The expert walks x-first then y, at most one chunk of moves at a time, and
//! pads with NOOP on arrival so every grasp or release happens in a chunk of
//! its own. Marked targets are approached via the left cell of their lattice
//! patch; the grasp chunk then steps right if the target sits on the right cell.

use super::task::{ObjectClass, Relation};
use super::{EnvError, EnvState};
use crate::action::{Action, ActionChunk};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Navigate,
    Grasp,
    Release,
}

/// Ground-truth intent behind one expert chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertStep {
    pub phase: Phase,
    /// Object being approached, grasped, or released onto.
    pub target: usize,
    /// Class under which the instruction refers to `target`.
    pub class: ObjectClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPlan {
    pub chunks: Vec<ActionChunk>,
    /// `gripper_closed[i]` is the gripper state after chunk `i` has executed.
    pub gripper_closed: Vec<bool>,
    pub steps: Vec<ExpertStep>,
    pub success: bool,
}

struct Rollout {
    sim: EnvState,
    k: usize,
    plan: ExpertPlan,
}

impl Rollout {
    fn push(&mut self, actions: Vec<Action>, step: ExpertStep) -> Result<(), EnvError> {
        let chunk = ActionChunk::new(actions);
        self.sim
            .step(&chunk)
            .map_err(|e| EnvError::Unsolvable(e.to_string()))?;
        self.plan.chunks.push(chunk);
        self.plan.gripper_closed.push(self.sim.gripper_closed);
        self.plan.steps.push(step);
        Ok(())
    }

    fn finished(&self) -> bool {
        self.sim.done()
    }

    fn navigate(&mut self, to: (u32, u32), step: ExpertStep) -> Result<(), EnvError> {
        while self.sim.gripper_pos != to && !self.finished() {
            let mut pos = self.sim.gripper_pos;
            let mut actions = Vec::with_capacity(self.k);
            while actions.len() < self.k && pos != to {
                let a = if pos.0 < to.0 {
                    Action::Right
                } else if pos.0 > to.0 {
                    Action::Left
                } else if pos.1 < to.1 {
                    Action::Down
                } else {
                    Action::Up
                };
                let (dx, dy) = a.delta();
                pos = ((pos.0 as i32 + dx) as u32, (pos.1 as i32 + dy) as u32);
                actions.push(a);
            }
            actions.resize(self.k, Action::Noop);
            self.push(actions, step)?;
        }
        Ok(())
    }

    fn find(&self, class: &ObjectClass, movable: bool) -> Result<usize, EnvError> {
        let s = &self.sim;
        let hits: Vec<usize> = s
            .objects
            .iter()
            .filter(|o| o.is(class) && !s.inside_bin(o.id))
            .map(|o| o.id)
            .collect();
        match hits.as_slice() {
            [id] => {
                if movable && s.held != Some(*id) && s.top_at(s.objects[*id].cell) != Some(*id) {
                    return Err(EnvError::Unsolvable(format!("{class} is buried")));
                }
                Ok(*id)
            }
            [] => Err(EnvError::Unsolvable(format!("no reachable {class}"))),
            _ => Err(EnvError::Unsolvable(format!("{class} is not unique"))),
        }
    }

    fn grasp(&mut self, target: usize, class: ObjectClass) -> Result<(), EnvError> {
        let cell = self.sim.objects[target].cell;
        let staging = (cell.0 & !1, cell.1);
        self.navigate(
            staging,
            ExpertStep {
                phase: Phase::Navigate,
                target,
                class,
            },
        )?;
        if self.finished() {
            return Ok(());
        }
        let side = if cell.0 == staging.0 {
            Action::Noop
        } else {
            Action::Right
        };
        let mut actions = vec![side, Action::ToggleGrip];
        actions.resize(self.k, Action::Noop);
        self.push(
            actions,
            ExpertStep {
                phase: Phase::Grasp,
                target,
                class,
            },
        )
    }

    fn release_on(&mut self, dest: usize, class: ObjectClass) -> Result<(), EnvError> {
        let cell = self.sim.objects[dest].cell;
        self.navigate(
            cell,
            ExpertStep {
                phase: Phase::Navigate,
                target: dest,
                class,
            },
        )?;
        if self.finished() {
            return Ok(());
        }
        let mut actions = vec![Action::Noop, Action::ToggleGrip];
        actions.resize(self.k, Action::Noop);
        self.push(
            actions,
            ExpertStep {
                phase: Phase::Release,
                target: dest,
                class,
            },
        )
    }
}

/// Plans and simulates a full solution from `state`; the state itself is untouched.
pub fn scripted_expert(state: &EnvState, chunk_len: usize) -> Result<ExpertPlan, EnvError> {
    assert!(
        chunk_len >= 2,
        "grasp chunks need room for a side step and a toggle"
    );
    let mut r = Rollout {
        sim: state.clone(),
        k: chunk_len,
        plan: ExpertPlan {
            chunks: vec![],
            gripper_closed: vec![],
            steps: vec![],
            success: false,
        },
    };
    for rel in state.goal.clone() {
        if r.finished() {
            break;
        }
        if r.sim.relation_holds(&rel) {
            continue;
        }
        match rel {
            Relation::Holding { object } => {
                if r.sim.held.is_some() {
                    return Err(EnvError::Unsolvable("gripper already busy".into()));
                }
                let t = r.find(&object, true)?;
                r.grasp(t, object)?;
            }
            Relation::On { object, support } => {
                let t = r.find(&object, true)?;
                if r.sim.held != Some(t) {
                    if r.sim.held.is_some() {
                        return Err(EnvError::Unsolvable("gripper already busy".into()));
                    }
                    r.grasp(t, object)?;
                }
                if r.finished() {
                    break;
                }
                let dest = r.find(&support, false)?;
                r.release_on(dest, support)?;
            }
        }
    }
    r.plan.success = r.sim.success();
    if !r.plan.success {
        return Err(EnvError::Unsolvable("plan does not reach the goal".into()));
    }
    Ok(r.plan)
}

/// Indices `i > 0` at which the gripper state differs from the previous entry.
pub fn gripper_transitions(timeline: &[bool]) -> Vec<usize> {
    (1..timeline.len())
        .filter(|&i| timeline[i] != timeline[i - 1])
        .collect()
}
