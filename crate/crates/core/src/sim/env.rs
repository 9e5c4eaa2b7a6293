use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Effect, ElementId, FlagId, JudgeState, Observation, Predicate, ScreenId, SimError, TaskSpec, World};
use crate::dsl::{Action, ScrollDirection, TargetSpec};

pub fn max_steps_for(difficulty: u32) -> u32 {
    2 * difficulty + 6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepResult {
    pub observation: Observation,
    pub done: bool,
    pub judge: JudgeState,
    pub missed_click: bool,
}

/// One episode-capable environment instance. Single-threaded; `Send` when idle.
#[derive(Debug, Clone)]
pub struct Env {
    initial: World,
    task: TaskSpec,
    live: World,
    screen: ScreenId,
    scroll: u32,
    history: Vec<ScreenId>,
    flags: BTreeSet<FlagId>,
    visited: BTreeSet<ScreenId>,
    judge: JudgeState,
    step_index: u32,
    done: bool,
}

impl Env {
    /// Builds an environment and resets it.
    pub fn new(world: World, task: TaskSpec) -> Result<Self, SimError> {
        check_task(&world, &task)?;
        let screen = world.initial_screen;
        let mut env = Self {
            live: world.clone(),
            initial: world,
            task,
            screen,
            scroll: 0,
            history: Vec::new(),
            flags: BTreeSet::new(),
            visited: BTreeSet::new(),
            judge: JudgeState::default(),
            step_index: 0,
            done: false,
        };
        env.reset();
        Ok(env)
    }

    pub fn world(&self) -> &World {
        &self.initial
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn max_steps(&self) -> u32 {
        max_steps_for(self.task.difficulty)
    }

    pub fn judge(&self) -> &JudgeState {
        &self.judge
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn current_screen(&self) -> ScreenId {
        self.screen
    }

    pub fn visited(&self) -> &BTreeSet<ScreenId> {
        &self.visited
    }

    pub fn reset(&mut self) -> Observation {
        self.live = self.initial.clone();
        self.screen = self.initial.initial_screen;
        self.scroll = 0;
        self.history.clear();
        self.flags.clear();
        self.visited = BTreeSet::from([self.screen]);
        self.judge = JudgeState::default();
        self.step_index = 0;
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        let screen = &self.live.screens[&self.screen];
        Observation {
            screen_id: self.screen,
            visible_elements: screen
                .elements
                .iter()
                .filter(|e| e.bounds.intersects_window(self.scroll))
                .cloned()
                .collect(),
            scroll_offset: self.scroll,
            step_index: self.step_index,
            scroll_extent: screen.scroll_extent,
            history_depth: self.history.len() as u32,
        }
    }

    /// Applies one grounded action.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeFinished);
        }
        if action.is_descriptive() {
            return Err(SimError::DescriptiveTarget);
        }
        let mut missed = false;
        match action {
            Action::Click(target) | Action::Input { target, .. } => match self.hit(target) {
                Some(element) => self.apply(element, action),
                None => missed = true,
            },
            Action::Scroll { direction, amount } => {
                let extent = self.live.screens[&self.screen].scroll_extent;
                let delta = amount.saturating_mul(100);
                self.scroll = match direction {
                    ScrollDirection::Down => self.scroll.saturating_add(delta).min(extent),
                    ScrollDirection::Up => self.scroll.saturating_sub(delta),
                };
            }
            Action::Back => {
                if let Some(prev) = self.history.pop() {
                    self.screen = prev;
                    self.scroll = 0;
                }
            }
            Action::Finish { answer } => {
                self.judge.answer = answer.clone();
                self.done = true;
            }
        }
        Ok(self.finish_step(missed))
    }

    /// Spends a step without effect, as when a description could not be grounded.
    pub fn step_wasted(&mut self) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeFinished);
        }
        Ok(self.finish_step(true))
    }

    fn finish_step(&mut self, missed: bool) -> StepResult {
        self.update_judge();
        self.step_index += 1;
        let all = self.judge.count() as usize == self.task.milestones.len();
        if all || self.step_index >= self.max_steps() {
            self.done = true;
        }
        StepResult { observation: self.observation(), done: self.done, judge: self.judge.clone(), missed_click: missed }
    }

    fn hit(&self, target: &TargetSpec) -> Option<ElementId> {
        let screen = &self.live.screens[&self.screen];
        match target {
            TargetSpec::Grounded { x, y } => {
                let py = y + self.scroll;
                screen
                    .elements
                    .iter()
                    .filter(|e| e.bounds.intersects_window(self.scroll) && e.bounds.contains(*x, py))
                    .map(|e| e.id)
                    .max()
            }
            TargetSpec::ElementRef(id) => {
                screen.element(*id).filter(|e| e.bounds.intersects_window(self.scroll)).map(|e| e.id)
            }
            TargetSpec::Descriptive(_) => None,
        }
    }

    fn apply(&mut self, element: ElementId, action: &Action) {
        match self.live.effect(self.screen, element, action.kind()) {
            Effect::Navigate(next) => {
                self.history.push(self.screen);
                self.screen = next;
                self.scroll = 0;
                self.visited.insert(next);
            }
            Effect::SetText => {
                if let Action::Input { text, .. } = action {
                    if let Some(e) = self.element_mut(element) {
                        e.state.text = text.clone();
                    }
                }
            }
            Effect::Toggle => {
                if let Some(e) = self.element_mut(element) {
                    e.state.checked = !e.state.checked;
                }
            }
            Effect::SubmitFlag(flag) => {
                self.flags.insert(flag);
            }
            Effect::NoOp => {}
        }
    }

    fn element_mut(&mut self, id: ElementId) -> Option<&mut super::Element> {
        self.live.screens.get_mut(&self.screen).and_then(|s| s.elements.iter_mut().find(|e| e.id == id))
    }

    fn holds(&self, predicate: &Predicate) -> bool {
        match predicate {
            Predicate::Visited { screen } => self.visited.contains(screen),
            Predicate::TextEquals { screen, element, text } => {
                self.live.screen(*screen).and_then(|s| s.element(*element)).is_some_and(|e| &e.state.text == text)
            }
            Predicate::Checked { screen, element } => {
                self.live.screen(*screen).and_then(|s| s.element(*element)).is_some_and(|e| e.state.checked)
            }
            Predicate::FlagSet { flag } => self.flags.contains(flag),
        }
    }

    /// Milestones latch in order: bit `i` can only be set once bit `i-1` is.
    fn update_judge(&mut self) {
        for (i, m) in self.task.milestones.iter().enumerate() {
            let bit = 1u64 << i;
            if self.judge.satisfied & bit != 0 {
                continue;
            }
            if self.holds(&m.predicate) {
                self.judge.satisfied |= bit;
            } else {
                break;
            }
        }
    }
}

fn check_task(world: &World, task: &TaskSpec) -> Result<(), SimError> {
    if task.world_seed != world.seed {
        return Err(SimError::MismatchedTask(format!("task seed {} vs world seed {}", task.world_seed, world.seed)));
    }
    if task.milestones.len() > 64 {
        return Err(SimError::MismatchedTask("more than 64 milestones".into()));
    }
    let reachable = world.reachable_screens();
    for m in &task.milestones {
        let ok = match &m.predicate {
            Predicate::Visited { screen } => reachable.contains(screen),
            Predicate::TextEquals { screen, element, .. } | Predicate::Checked { screen, element } => {
                reachable.contains(screen) && world.screen(*screen).and_then(|s| s.element(*element)).is_some()
            }
            Predicate::FlagSet { flag } => world.flags.contains(flag),
        };
        if !ok {
            return Err(SimError::MismatchedTask(format!("milestone `{}` references missing state", m.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dsl::ActionKind;
    use crate::sim::{Bounds, Element, ElementState, Milestone, Role, Screen, Transition};

    fn element(id: u32, role: Role, label: &str, x: u32, y: u32) -> Element {
        Element {
            id,
            role,
            label: label.into(),
            bounds: Bounds { x, y, w: 100, h: 40 },
            state: ElementState::default(),
        }
    }

    /// Home has a link to screen 1 and a checkbox; screen 1 has a submit button
    /// and an element below the fold.
    fn two_screen_world() -> (World, TaskSpec) {
        let home = Screen {
            id: 0,
            elements: vec![
                element(0, Role::Link, "Account settings", 100, 100),
                element(1, Role::Checkbox, "Coffee options", 400, 100),
            ],
            scroll_extent: 0,
        };
        let second = Screen {
            id: 1,
            elements: vec![
                element(0, Role::Button, "Submit order", 700, 600),
                element(1, Role::Label, "Footer", 100, 1100),
            ],
            scroll_extent: 180,
        };
        let world = World {
            seed: 11,
            screens: BTreeMap::from([(0, home), (1, second)]),
            transitions: vec![
                Transition { screen: 0, element: 0, action_kind: ActionKind::Click, effect: Effect::Navigate(1) },
                Transition { screen: 0, element: 1, action_kind: ActionKind::Click, effect: Effect::Toggle },
                Transition { screen: 1, element: 0, action_kind: ActionKind::Click, effect: Effect::SubmitFlag(0) },
            ],
            initial_screen: 0,
            flags: BTreeSet::from([0]),
        };
        let task = TaskSpec {
            instruction: "check Coffee options, then open Account settings, then press Submit order".into(),
            world_seed: 11,
            milestones: vec![
                Milestone { name: "checked".into(), predicate: Predicate::Checked { screen: 0, element: 1 } },
                Milestone { name: "opened".into(), predicate: Predicate::Visited { screen: 1 } },
                Milestone { name: "pressed".into(), predicate: Predicate::FlagSet { flag: 0 } },
            ],
            difficulty: 3,
            oracle: vec![],
        };
        (world, task)
    }

    fn click(x: u32, y: u32) -> Action {
        Action::Click(TargetSpec::Grounded { x, y })
    }

    #[test]
    fn click_navigates() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let r = env.step(&click(150, 120)).unwrap();
        assert_eq!(r.observation.screen_id, 1);
        assert!(!r.missed_click);
        assert_eq!(r.observation.history_depth, 1);
    }

    #[test]
    fn miss_is_noop() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let before = env.observation();
        let r = env.step(&click(0, 0)).unwrap();
        assert!(r.missed_click);
        assert_eq!(r.observation.visible_elements, before.visible_elements);
        assert_eq!(r.observation.screen_id, before.screen_id);
    }

    #[test]
    fn step_after_finish() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let r = env.step(&Action::Finish { answer: Some("x".into()) }).unwrap();
        assert!(r.done);
        assert_eq!(r.judge.answer.as_deref(), Some("x"));
        assert_eq!(env.step(&Action::Back), Err(SimError::EpisodeFinished));
    }

    #[test]
    fn descriptive_rejected() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let a = Action::Click(TargetSpec::Descriptive("x".into()));
        assert_eq!(env.step(&a), Err(SimError::DescriptiveTarget));
    }

    #[test]
    fn reset_restores_state() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let first = env.reset();
        assert_eq!(env.reset(), first);
        env.step(&click(450, 120)).unwrap();
        env.step(&click(150, 120)).unwrap();
        assert_eq!(env.reset(), first);
        assert_eq!(env.judge(), &JudgeState::default());
    }

    #[test]
    fn mismatched_task() {
        let (w, mut t) = two_screen_world();
        t.world_seed = 12;
        assert!(matches!(Env::new(w, t), Err(SimError::MismatchedTask(_))));
    }

    #[test]
    fn ordered_latching_and_auto_done() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        // navigating first does not latch milestone 1 before milestone 0
        env.step(&click(150, 120)).unwrap();
        assert_eq!(env.judge().satisfied, 0);
        env.step(&Action::Back).unwrap();
        let r = env.step(&click(450, 120)).unwrap();
        assert_eq!(r.judge.satisfied, 0b011);
        env.step(&click(150, 120)).unwrap();
        let r = env.step(&click(750, 620)).unwrap();
        assert_eq!(r.judge.satisfied, 0b111);
        assert!(r.done);
    }

    #[test]
    fn scroll_reveals_and_clamps() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        env.step(&click(150, 120)).unwrap();
        assert_eq!(env.observation().visible_elements.len(), 1);
        let r = env.step(&Action::Scroll { direction: ScrollDirection::Down, amount: 5 }).unwrap();
        assert_eq!(r.observation.scroll_offset, 180);
        assert!(r.observation.visible_elements.iter().any(|e| e.label == "Footer"));
        let r = env.step(&Action::Scroll { direction: ScrollDirection::Up, amount: 1 }).unwrap();
        assert_eq!(r.observation.scroll_offset, 80);
    }

    #[test]
    fn budget_stops_episode() {
        let (w, t) = two_screen_world();
        let mut env = Env::new(w, t).unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(&click(0, 0)).unwrap().done {
                break;
            }
        }
        assert_eq!(steps, max_steps_for(3));
    }
}
