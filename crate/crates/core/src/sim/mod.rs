//! Deterministic synthetic GUI environment.
//!
//! A [`World`] is a small graph of screens, each holding an ordered element
//! list. Actions dispatch through a transition table keyed by
//! `(screen, element, action kind)`. A [`TaskSpec`] pairs an instruction with
//! an ordered chain of milestones and an oracle solution.

mod env;
mod generate;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Action, ActionKind, VIEWPORT};

pub use env::{max_steps_for, Env, StepResult};
pub use generate::{
    build_task, generate_world, perturb_layout, sample_template, StepSpec, TaskTemplate, MAX_DIFFICULTY,
    MAX_SEGMENT_TARGETS,
};
pub use oracle::oracle_rollout;

pub type ScreenId = u32;
pub type ElementId = u32;
pub type FlagId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("difficulty {0} outside [1, {MAX_DIFFICULTY}]")]
    Range(u32),
    #[error("task does not belong to this world: {0}")]
    MismatchedTask(String),
    #[error("descriptive targets must be grounded before stepping")]
    DescriptiveTarget,
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("oracle replay failed: {0}")]
    OracleBroken(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Button,
    Link,
    Textbox,
    Checkbox,
    Listitem,
    Label,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Button, Role::Link, Role::Textbox, Role::Checkbox, Role::Listitem, Role::Label];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Button => "button",
            Role::Link => "link",
            Role::Textbox => "textbox",
            Role::Checkbox => "checkbox",
            Role::Listitem => "listitem",
            Role::Label => "label",
        }
    }

    pub fn index(self) -> usize {
        Role::ALL.iter().position(|r| *r == self).expect("role listed")
    }

    /// Roles the planner may click.
    pub fn is_clickable(self) -> bool {
        matches!(self, Role::Button | Role::Link | Role::Checkbox | Role::Listitem)
    }
}

/// Axis-aligned box in page units. `y` is measured from the top of the page,
/// so elements below the first viewport have `y + h > 1000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bounds {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Bounds {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersects_window(&self, scroll: u32) -> bool {
        self.y < scroll + VIEWPORT && self.bottom() > scroll
    }

    /// Center of the part of the box inside the window, in viewport units.
    pub fn visible_center(&self, scroll: u32) -> (u32, u32) {
        let top = self.y.max(scroll);
        let bottom = self.bottom().min(scroll + VIEWPORT);
        let cx = self.x + self.w / 2;
        let cy = top + (bottom - top) / 2;
        (cx, cy - scroll)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementState {
    pub text: String,
    pub checked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Element {
    pub id: ElementId,
    pub role: Role,
    pub label: String,
    pub bounds: Bounds,
    pub state: ElementState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Screen {
    pub id: ScreenId,
    /// Ordered by element id.
    pub elements: Vec<Element>,
    pub scroll_extent: u32,
}

impl Screen {
    pub fn element(&self, id: ElementId) -> Option<&Element> {
        self.elements.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effect {
    Navigate(ScreenId),
    SetText,
    Toggle,
    SubmitFlag(FlagId),
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition {
    pub screen: ScreenId,
    pub element: ElementId,
    pub action_kind: ActionKind,
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct World {
    /// Provenance: the template seed this world was built from.
    pub seed: u64,
    pub screens: BTreeMap<ScreenId, Screen>,
    pub transitions: Vec<Transition>,
    pub initial_screen: ScreenId,
    pub flags: BTreeSet<FlagId>,
}

impl World {
    pub fn screen(&self, id: ScreenId) -> Option<&Screen> {
        self.screens.get(&id)
    }

    pub fn effect(&self, screen: ScreenId, element: ElementId, kind: ActionKind) -> Effect {
        self.transitions
            .iter()
            .find(|t| t.screen == screen && t.element == element && t.action_kind == kind)
            .map(|t| t.effect)
            .unwrap_or(Effect::NoOp)
    }

    /// True when some element on the screen sets a flag when clicked.
    pub fn screen_has_flag_element(&self, screen: ScreenId) -> bool {
        self.transitions.iter().any(|t| t.screen == screen && matches!(t.effect, Effect::SubmitFlag(_)))
    }

    /// Screens reachable from the initial screen through `Navigate` effects.
    pub fn reachable_screens(&self) -> BTreeSet<ScreenId> {
        let mut seen = BTreeSet::from([self.initial_screen]);
        let mut stack = vec![self.initial_screen];
        while let Some(s) = stack.pop() {
            for t in self.transitions.iter().filter(|t| t.screen == s) {
                if let Effect::Navigate(next) = t.effect {
                    if seen.insert(next) {
                        stack.push(next);
                    }
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Predicate {
    Visited { screen: ScreenId },
    TextEquals { screen: ScreenId, element: ElementId, text: String },
    Checked { screen: ScreenId, element: ElementId },
    FlagSet { flag: FlagId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub name: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSpec {
    pub instruction: String,
    pub world_seed: u64,
    pub milestones: Vec<Milestone>,
    pub difficulty: u32,
    pub oracle: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Observation {
    pub screen_id: ScreenId,
    pub visible_elements: Vec<Element>,
    pub scroll_offset: u32,
    pub step_index: u32,
    pub scroll_extent: u32,
    /// Depth of the back stack; `Back` is only meaningful when nonzero.
    pub history_depth: u32,
}

impl Observation {
    pub fn element(&self, id: ElementId) -> Option<&Element> {
        self.visible_elements.iter().find(|e| e.id == id)
    }
}

/// Latched milestone bits plus the submitted answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeState {
    pub satisfied: u64,
    pub answer: Option<String>,
}

impl JudgeState {
    pub fn count(&self) -> u32 {
        self.satisfied.count_ones()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Partial,
    Fail,
}

/// Success iff every milestone holds, Partial iff some do, Fail otherwise.
pub fn judge_outcome(judge: &JudgeState, milestone_count: usize) -> Outcome {
    outcome_from_bits(judge.satisfied, milestone_count)
}

pub fn outcome_from_bits(bits: u64, milestone_count: usize) -> Outcome {
    let all = if milestone_count >= 64 { u64::MAX } else { (1u64 << milestone_count) - 1 };
    let hit = bits & all;
    if milestone_count > 0 && hit == all {
        Outcome::Success
    } else if hit != 0 {
        Outcome::Partial
    } else {
        Outcome::Fail
    }
}
