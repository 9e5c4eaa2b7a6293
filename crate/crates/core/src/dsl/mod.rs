//! The agent action language.
//!
//! A planner emits actions whose targets are either grounded (viewport
//! coordinates or an element id) or descriptive (free text to be resolved
//! by the grounder). The surface syntax is a single line such as
//! `do(action="Click", element_coordinates=[823,684])`.

mod parse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use parse::{parse_action, parse_grounding_query};

/// Viewport side length in normalized units.
pub const VIEWPORT: u32 = 1000;
pub const MAX_DESCRIPTION_CHARS: usize = 512;
pub const MAX_TEXT_CHARS: usize = 4096;
pub const MAX_LINE_CHARS: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("syntax error at char {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("action requires exactly one target")]
    MissingTarget,
    #[error("value out of range: {0}")]
    Range(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TargetSpec {
    Grounded { x: u32, y: u32 },
    Descriptive(String),
    ElementRef(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Up,
    Down,
}

impl ScrollDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click(TargetSpec),
    Input { target: TargetSpec, text: String },
    Scroll { direction: ScrollDirection, amount: u32 },
    Back,
    Finish { answer: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Click,
    Input,
    Scroll,
    Back,
    Finish,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::Input { .. } => ActionKind::Input,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::Back => ActionKind::Back,
            Action::Finish { .. } => ActionKind::Finish,
        }
    }

    pub fn target(&self) -> Option<&TargetSpec> {
        match self {
            Action::Click(t) | Action::Input { target: t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn is_descriptive(&self) -> bool {
        matches!(self.target(), Some(TargetSpec::Descriptive(_)))
    }

    /// Checks the value-level invariants the parser enforces.
    pub fn validate(&self) -> Result<(), DslError> {
        if let Some(t) = self.target() {
            t.validate()?;
        }
        match self {
            Action::Input { text, .. } if text.chars().count() > MAX_TEXT_CHARS => {
                Err(DslError::Range(format!("text longer than {MAX_TEXT_CHARS} chars")))
            }
            Action::Scroll { amount: 0, .. } => Err(DslError::Range("scroll amount must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Canonical single-line surface form.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), DslError> {
        match self {
            TargetSpec::Grounded { x, y } if *x >= VIEWPORT || *y >= VIEWPORT => {
                Err(DslError::Range(format!("coordinate [{x},{y}] outside [0,{VIEWPORT})")))
            }
            TargetSpec::Descriptive(d) => validate_description(d, 0),
            _ => Ok(()),
        }
    }
}

pub(crate) fn validate_description(text: &str, offset: usize) -> Result<(), DslError> {
    if text.trim().is_empty() {
        return Err(DslError::Syntax { offset, message: "empty description".into() });
    }
    if text.chars().count() > MAX_DESCRIPTION_CHARS {
        return Err(DslError::Range(format!("description longer than {MAX_DESCRIPTION_CHARS} chars")));
    }
    Ok(())
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

fn write_target(f: &mut fmt::Formatter<'_>, t: &TargetSpec) -> fmt::Result {
    match t {
        TargetSpec::Grounded { x, y } => write!(f, ", element_coordinates=[{x},{y}]"),
        TargetSpec::Descriptive(d) => {
            f.write_str(", element_description=")?;
            write_quoted(f, d)
        }
        TargetSpec::ElementRef(id) => write!(f, ", element_id={id}"),
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click(t) => {
                f.write_str("do(action=\"Click\"")?;
                write_target(f, t)?;
                f.write_str(")")
            }
            Action::Input { target, text } => {
                f.write_str("do(action=\"Input\"")?;
                write_target(f, target)?;
                f.write_str(", text=")?;
                write_quoted(f, text)?;
                f.write_str(")")
            }
            Action::Scroll { direction, amount } => {
                write!(f, "do(action=\"Scroll\", direction=\"{}\", amount={amount})", direction.as_str())
            }
            Action::Back => f.write_str("do(action=\"Back\")"),
            Action::Finish { answer: None } => f.write_str("finish()"),
            Action::Finish { answer: Some(a) } => {
                f.write_str("finish(answer=")?;
                write_quoted(f, a)?;
                f.write_str(")")
            }
        }
    }
}

impl FromStr for Action {
    type Err = DslError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_action(&s).map_err(serde::de::Error::custom)
    }
}

/// Request to resolve a description to coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroundingQuery(String);

impl GroundingQuery {
    pub fn new(description: impl Into<String>) -> Result<Self, DslError> {
        let d = description.into();
        validate_description(&d, 0)?;
        Ok(Self(d))
    }

    pub fn description(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroundingQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("find_coordinates_by_instruction(")?;
        write_quoted(f, &self.0)?;
        f.write_str(")")
    }
}

/// An action whose target slot is still open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PendingAction {
    Click,
    Input { text: String },
}

/// Splits a descriptive action into the open action and the grounding query.
/// Returns `None` when there is nothing to ground.
pub fn split_for_grounding(action: &Action) -> Option<(PendingAction, GroundingQuery)> {
    match action {
        Action::Click(TargetSpec::Descriptive(d)) => Some((PendingAction::Click, GroundingQuery(d.clone()))),
        Action::Input { target: TargetSpec::Descriptive(d), text } => {
            Some((PendingAction::Input { text: text.clone() }, GroundingQuery(d.clone())))
        }
        _ => None,
    }
}

pub fn resolve_target(pending: PendingAction, target: TargetSpec) -> Action {
    match pending {
        PendingAction::Click => Action::Click(target),
        PendingAction::Input { text } => Action::Input { target, text },
    }
}
