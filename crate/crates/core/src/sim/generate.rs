//! Procedural worlds.
//!
//! A task is first sampled as a [`TaskTemplate`]: a chain of steps, each of
//! which names one target element and yields one milestone and one oracle
//! action. The world is then built deterministically from the template, so
//! curriculum mutations can append or drop steps and regenerate a solvable
//! task.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Bounds, Effect, Element, ElementId, ElementState, Env, Milestone, Predicate, Role, Screen, ScreenId, SimError,
    TaskSpec, Transition, World,
};
use crate::dsl::{Action, ActionKind, TargetSpec, VIEWPORT};
use crate::grounder::make_description;
use crate::seed::{hash_str, rng_from};

pub const MAX_DIFFICULTY: u32 = 12;
/// Non-navigation targets allowed on one screen before the chain must move on.
pub const MAX_SEGMENT_TARGETS: usize = 4;

const QUALIFIERS: [&str; 24] = [
    "Account", "Billing", "Cart", "Coffee", "Delivery", "Dinner", "Payment", "Profile", "Review", "Shipping", "Ticket",
    "Travel", "Wallet", "Coupon", "Garden", "Music", "Photo", "Recipe", "Hotel", "Train", "Weather", "Library",
    "Parking", "Studio",
];
const NOUNS: [&str; 16] = [
    "settings",
    "details",
    "history",
    "summary",
    "options",
    "notes",
    "status",
    "filter",
    "address",
    "preferences",
    "invoice",
    "schedule",
    "gallery",
    "members",
    "rewards",
    "calendar",
];
const HEADINGS: [&str; 8] = ["Welcome", "Overview", "Dashboard", "Today", "Highlights", "Updates", "News", "Tips"];
const PAYLOADS: [&str; 12] =
    ["latte", "tokyo", "alice", "sunday", "window", "cobalt", "maple", "harbor", "violet", "falcon", "lemon", "quartz"];

const COLUMN_CENTERS: [u32; 3] = [170, 500, 830];
const ROWS_ABOVE_FOLD: u32 = 6;
const ROW_PITCH: u32 = 140;
const FIRST_ROW_Y: u32 = 50;
const BELOW_FOLD_ROWS: [u32; 2] = [1030, 1170];
const MAX_ELEMENTS: usize = 12;
const MIN_ELEMENTS: usize = 4;
/// Screens of harder tasks carry more distractors, starting at this difficulty.
const DENSE_FROM: u32 = 3;
const EXTRA_DISTRACTORS_PER_LEVEL: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum StepSpec {
    Navigate { label: String },
    Input { label: String, payload: String },
    Toggle { label: String },
    Submit { label: String },
    Pick { label: String },
}

impl StepSpec {
    pub fn label(&self) -> &str {
        match self {
            StepSpec::Navigate { label }
            | StepSpec::Input { label, .. }
            | StepSpec::Toggle { label }
            | StepSpec::Submit { label }
            | StepSpec::Pick { label } => label,
        }
    }

    fn role(&self) -> Role {
        match self {
            StepSpec::Navigate { .. } => Role::Link,
            StepSpec::Input { .. } => Role::Textbox,
            StepSpec::Toggle { .. } => Role::Checkbox,
            StepSpec::Submit { .. } => Role::Button,
            StepSpec::Pick { .. } => Role::Listitem,
        }
    }

    fn phrase(&self) -> String {
        match self {
            StepSpec::Navigate { label } => format!("open {label}"),
            StepSpec::Input { label, payload } => format!("type \"{payload}\" into {label}"),
            StepSpec::Toggle { label } => format!("check {label}"),
            StepSpec::Submit { label } => format!("press {label}"),
            StepSpec::Pick { label } => format!("select {label}"),
        }
    }
}

/// Generator-level description of a task: everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskTemplate {
    pub world_seed: u64,
    pub chain: Vec<StepSpec>,
}

impl TaskTemplate {
    pub fn difficulty(&self) -> u32 {
        self.chain.len() as u32
    }

    pub fn instruction(&self) -> String {
        let body = self.chain.iter().map(StepSpec::phrase).collect::<Vec<_>>().join(", then ");
        let mut chars = body.chars();
        match chars.next() {
            Some(first) => format!("{}{}.", first.to_uppercase(), chars.as_str()),
            None => String::new(),
        }
    }

    /// Appends one freshly sampled step.
    pub fn append_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), SimError> {
        if self.difficulty() >= MAX_DIFFICULTY {
            return Err(SimError::Range(self.difficulty() + 1));
        }
        let segment = self.chain.iter().rev().take_while(|s| !matches!(s, StepSpec::Navigate { .. })).count();
        let has_input = self.chain.iter().any(|s| matches!(s, StepSpec::Input { .. }));
        let used: BTreeSet<&str> = self.chain.iter().map(StepSpec::label).collect();
        let label = loop {
            let q = QUALIFIERS[rng.gen_range(0..QUALIFIERS.len())];
            let n = NOUNS[rng.gen_range(0..NOUNS.len())];
            let l = format!("{q} {n}");
            if !used.contains(l.as_str()) {
                break l;
            }
        };
        // weights: navigate, toggle, submit, pick, input
        let mut weights = [3u32, 2, 2, 2, if has_input { 0 } else { 2 }];
        if segment >= MAX_SEGMENT_TARGETS {
            weights = [1, 0, 0, 0, 0];
        }
        let total: u32 = weights.iter().sum();
        let mut draw = rng.gen_range(0..total);
        let mut kind = 0;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                kind = i;
                break;
            }
            draw -= w;
        }
        let step = match kind {
            0 => StepSpec::Navigate { label },
            1 => StepSpec::Toggle { label },
            2 => StepSpec::Submit { label },
            3 => StepSpec::Pick { label },
            _ => StepSpec::Input { label, payload: PAYLOADS[rng.gen_range(0..PAYLOADS.len())].to_string() },
        };
        self.chain.push(step);
        Ok(())
    }
}

/// Samples the step chain for `(seed, difficulty)`.
pub fn sample_template(seed: u64, difficulty: u32) -> Result<TaskTemplate, SimError> {
    if !(1..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(SimError::Range(difficulty));
    }
    let mut rng = rng_from(&[seed, difficulty as u64, 0x7e3a]);
    let mut template = TaskTemplate { world_seed: seed, chain: Vec::new() };
    for _ in 0..difficulty {
        template.append_step(&mut rng)?;
    }
    Ok(template)
}

/// Deterministic in `(seed, difficulty)`.
pub fn generate_world(seed: u64, difficulty: u32) -> Result<(World, TaskSpec), SimError> {
    build_task(&sample_template(seed, difficulty)?)
}

enum Slot {
    Target(usize),
    Distractor,
    Heading,
}

struct Placed {
    role: Role,
    label: String,
    slot: Slot,
    bounds: Bounds,
}

fn split_label(label: &str) -> (&str, &str) {
    label.split_once(' ').unwrap_or((label, ""))
}

fn distractor_label<R: Rng + ?Sized>(base: &str, taken: &BTreeSet<String>, rng: &mut R) -> Option<String> {
    let (q, n) = split_label(base);
    for _ in 0..64 {
        let candidate = if rng.gen_bool(0.5) {
            format!("{q} {}", NOUNS[rng.gen_range(0..NOUNS.len())])
        } else {
            format!("{} {n}", QUALIFIERS[rng.gen_range(0..QUALIFIERS.len())])
        };
        if !taken.contains(&candidate.to_lowercase()) {
            return Some(candidate);
        }
    }
    None
}

fn sized_bounds<R: Rng + ?Sized>(col: usize, y: u32, rng: &mut R) -> Bounds {
    let w = rng.gen_range(8..=20) * 10;
    let h = [40, 50, 60][rng.gen_range(0..3)];
    Bounds { x: COLUMN_CENTERS[col] - w / 2, y: y + rng.gen_range(0..3) * 10, w, h }
}

fn scroll_extent_for(elements: &[Element]) -> u32 {
    let bottom = elements.iter().map(|e| e.bounds.bottom()).max().unwrap_or(0);
    if bottom > VIEWPORT {
        bottom + 40 - VIEWPORT
    } else {
        0
    }
}

struct ScreenBuild {
    elements: Vec<Element>,
    /// step index -> element id
    targets: BTreeMap<usize, ElementId>,
    distractors: Vec<(ElementId, Role)>,
}

fn build_screen<R: Rng + ?Sized>(
    steps: &[(usize, &StepSpec)],
    difficulty: u32,
    anchor_labels: &[&str],
    chain_labels: &BTreeSet<String>,
    rng: &mut R,
) -> ScreenBuild {
    let mut taken: BTreeSet<String> = chain_labels.clone();
    let mut placed: Vec<Placed> = Vec::new();
    let mut slots: Vec<(usize, u32)> =
        (0..ROWS_ABOVE_FOLD).flat_map(|r| (0..3).map(move |c| (c, FIRST_ROW_Y + r * ROW_PITCH))).collect();
    slots.shuffle(rng);
    let mut next_slot = || slots.pop().expect("enough slots above the fold");

    for (idx, step) in steps {
        let (c, y) = next_slot();
        placed.push(Placed {
            role: step.role(),
            label: step.label().to_string(),
            slot: Slot::Target(*idx),
            bounds: sized_bounds(c, y, rng),
        });
    }
    let (c, y) = next_slot();
    let heading = HEADINGS[rng.gen_range(0..HEADINGS.len())].to_string();
    taken.insert(heading.to_lowercase());
    placed.push(Placed { role: Role::Label, label: heading, slot: Slot::Heading, bounds: sized_bounds(c, y, rng) });

    let room = MAX_ELEMENTS - placed.len();
    let extra = difficulty.saturating_sub(DENSE_FROM - 1) as usize * EXTRA_DISTRACTORS_PER_LEVEL;
    let n_distractors = (rng.gen_range(2..=4) + extra).min(room);
    let below_fold = if rng.gen_bool(0.35) { rng.gen_range(1..=2) } else { 0 };
    let roles = [Role::Button, Role::Link, Role::Checkbox, Role::Listitem, Role::Textbox];
    for k in 0..n_distractors {
        let base = anchor_labels[rng.gen_range(0..anchor_labels.len())];
        let Some(label) = distractor_label(base, &taken, rng) else { continue };
        taken.insert(label.to_lowercase());
        let bounds = if let Some(&row) = BELOW_FOLD_ROWS[..below_fold].get(k) {
            sized_bounds(rng.gen_range(0..3), row, rng)
        } else {
            let (c, y) = next_slot();
            sized_bounds(c, y, rng)
        };
        placed.push(Placed { role: roles[rng.gen_range(0..roles.len())], label, slot: Slot::Distractor, bounds });
    }
    while placed.len() < MIN_ELEMENTS {
        let (c, y) = next_slot();
        let label = loop {
            let h = HEADINGS[rng.gen_range(0..HEADINGS.len())];
            if taken.insert(h.to_lowercase()) {
                break h.to_string();
            }
        };
        placed.push(Placed { role: Role::Label, label, slot: Slot::Heading, bounds: sized_bounds(c, y, rng) });
    }

    placed.shuffle(rng);
    let mut out = ScreenBuild { elements: Vec::new(), targets: BTreeMap::new(), distractors: Vec::new() };
    for (id, p) in placed.into_iter().enumerate() {
        let id = id as ElementId;
        match p.slot {
            Slot::Target(step) => {
                out.targets.insert(step, id);
            }
            Slot::Distractor => out.distractors.push((id, p.role)),
            Slot::Heading => {}
        }
        out.elements.push(Element {
            id,
            role: p.role,
            label: p.label,
            bounds: p.bounds,
            state: ElementState::default(),
        });
    }
    out
}

/// Builds the world, milestones, instruction and oracle for a template.
pub fn build_task(template: &TaskTemplate) -> Result<(World, TaskSpec), SimError> {
    let difficulty = template.difficulty();
    if !(1..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(SimError::Range(difficulty));
    }
    let chain = &template.chain;
    let chain_labels: BTreeSet<String> = chain.iter().map(|s| s.label().to_lowercase()).collect();

    // steps grouped by the screen their target lives on
    let mut segments: Vec<Vec<(usize, &StepSpec)>> = vec![Vec::new()];
    for (i, step) in chain.iter().enumerate() {
        segments.last_mut().expect("nonempty").push((i, step));
        if matches!(step, StepSpec::Navigate { .. }) {
            segments.push(Vec::new());
        }
    }
    let dead_end = segments.len() as ScreenId;

    let mut screens = BTreeMap::new();
    let mut transitions = Vec::new();
    let mut flags = BTreeSet::new();
    let mut next_flag = 0u32;
    let mut milestones: Vec<Option<Milestone>> = vec![None; chain.len()];
    let mut target_of: Vec<(ScreenId, ElementId)> = vec![(0, 0); chain.len()];
    let mut dead_end_used = false;

    for (s, segment) in segments.iter().enumerate() {
        let screen_id = s as ScreenId;
        let key = segment.iter().map(|(_, st)| st.label()).collect::<Vec<_>>().join("|");
        let mut rng = rng_from(&[template.world_seed, s as u64, hash_str(&key)]);
        let anchors: Vec<&str> = if segment.is_empty() {
            vec![chain[chain.len() - 1].label()]
        } else {
            segment.iter().map(|(_, st)| st.label()).collect()
        };
        let built = build_screen(segment, difficulty, &anchors, &chain_labels, &mut rng);

        for (idx, step) in segment {
            let id = built.targets[idx];
            target_of[*idx] = (screen_id, id);
            let (kind, effect, predicate) = match step {
                StepSpec::Navigate { .. } => {
                    (ActionKind::Click, Effect::Navigate(screen_id + 1), Predicate::Visited { screen: screen_id + 1 })
                }
                StepSpec::Input { payload, .. } => (
                    ActionKind::Input,
                    Effect::SetText,
                    Predicate::TextEquals { screen: screen_id, element: id, text: payload.clone() },
                ),
                StepSpec::Toggle { .. } => {
                    (ActionKind::Click, Effect::Toggle, Predicate::Checked { screen: screen_id, element: id })
                }
                StepSpec::Submit { .. } | StepSpec::Pick { .. } => {
                    let flag = next_flag;
                    next_flag += 1;
                    flags.insert(flag);
                    (ActionKind::Click, Effect::SubmitFlag(flag), Predicate::FlagSet { flag })
                }
            };
            transitions.push(Transition { screen: screen_id, element: id, action_kind: kind, effect });
            milestones[*idx] = Some(Milestone { name: step.phrase(), predicate });
        }
        for &(id, role) in &built.distractors {
            let (kind, effect) = match role {
                Role::Link => {
                    dead_end_used = true;
                    (ActionKind::Click, Effect::Navigate(dead_end))
                }
                Role::Textbox => (ActionKind::Input, Effect::SetText),
                Role::Checkbox => (ActionKind::Click, Effect::Toggle),
                Role::Button if rng.gen_bool(0.5) => (ActionKind::Click, Effect::NoOp),
                _ => {
                    // decoy flags never appear in a milestone
                    let flag = 1000 + next_flag;
                    next_flag += 1;
                    flags.insert(flag);
                    (ActionKind::Click, Effect::SubmitFlag(flag))
                }
            };
            transitions.push(Transition { screen: screen_id, element: id, action_kind: kind, effect });
        }
        let scroll_extent = scroll_extent_for(&built.elements);
        screens.insert(screen_id, Screen { id: screen_id, elements: built.elements, scroll_extent });
    }

    if dead_end_used {
        let mut rng = rng_from(&[template.world_seed, dead_end as u64, 0xdead]);
        let anchors: Vec<&str> = chain.iter().map(StepSpec::label).collect();
        let built = build_screen(&[], difficulty, &anchors, &chain_labels, &mut rng);
        let scroll_extent = scroll_extent_for(&built.elements);
        screens.insert(dead_end, Screen { id: dead_end, elements: built.elements, scroll_extent });
    }

    transitions.sort_by_key(|t| (t.screen, t.element, t.action_kind));
    let world = World { seed: template.world_seed, screens, transitions, initial_screen: 0, flags };
    let mut task = TaskSpec {
        instruction: template.instruction(),
        world_seed: template.world_seed,
        milestones: milestones.into_iter().map(|m| m.expect("every step yields a milestone")).collect(),
        difficulty,
        oracle: Vec::new(),
    };
    task.oracle = derive_oracle(&world, &task, chain, &target_of)?;
    Ok((world, task))
}

fn derive_oracle(
    world: &World,
    task: &TaskSpec,
    chain: &[StepSpec],
    target_of: &[(ScreenId, ElementId)],
) -> Result<Vec<Action>, SimError> {
    let mut env = Env::new(world.clone(), task.clone())?;
    let mut oracle = Vec::with_capacity(chain.len());
    for (step, &(screen, id)) in chain.iter().zip(target_of) {
        let obs = env.observation();
        let element = obs
            .element(id)
            .filter(|_| obs.screen_id == screen)
            .ok_or_else(|| SimError::OracleBroken(format!("target {id} not visible on screen {screen}")))?;
        let desc = TargetSpec::Descriptive(make_description(element, &obs));
        let (cx, cy) = element.bounds.visible_center(obs.scroll_offset);
        let grounded = TargetSpec::Grounded { x: cx, y: cy };
        let (descriptive, executed) = match step {
            StepSpec::Input { payload, .. } => (
                Action::Input { target: desc, text: payload.clone() },
                Action::Input { target: grounded, text: payload.clone() },
            ),
            _ => (Action::Click(desc), Action::Click(grounded)),
        };
        env.step(&executed)?;
        oracle.push(descriptive);
    }
    if env.judge().count() as usize != task.milestones.len() {
        return Err(SimError::OracleBroken("oracle does not satisfy every milestone".into()));
    }
    Ok(oracle)
}

/// Shifts each screen's elements by a seeded offset of up to ±120 units,
/// keeping them inside the horizontal viewport.
pub fn perturb_layout(world: &World, seed: u64) -> World {
    let mut out = world.clone();
    for (id, screen) in out.screens.iter_mut() {
        let mut rng = rng_from(&[seed, *id as u64, 0x5ca1e]);
        let dx: i64 = rng.gen_range(-120..=120);
        let dy: i64 = rng.gen_range(-120..=120);
        for e in screen.elements.iter_mut() {
            let max_x = (VIEWPORT - e.bounds.w) as i64;
            e.bounds.x = (e.bounds.x as i64 + dx).clamp(0, max_x) as u32;
            e.bounds.y = (e.bounds.y as i64 + dy).max(0) as u32;
        }
        screen.scroll_extent = scroll_extent_for(&screen.elements);
    }
    out
}
