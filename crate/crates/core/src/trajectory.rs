//! Episode records shared by the environment, trainers and the harness.

use serde::{Deserialize, Serialize};

use crate::dsl::Action;
use crate::sim::{Observation, Outcome, ScreenId};

/// Per-step shaping penalty.
pub const STEP_PENALTY: f64 = -0.01;
/// Terminal bonus on Success.
pub const SUCCESS_BONUS: f64 = 1.0;

/// Reward for step `t` of an episode with `len` steps.
pub fn step_reward(t: usize, len: usize, success: bool) -> f64 {
    if success && t + 1 == len {
        STEP_PENALTY + SUCCESS_BONUS
    } else {
        STEP_PENALTY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrajectoryStep {
    /// State digest: together with the instruction, `max_steps` and the
    /// earlier actions this rebuilds the candidate set and features.
    pub observation: Observation,
    /// Planner-level action (descriptive targets stay descriptive).
    pub action: Action,
    pub behavior_log_prob: f64,
    pub reward: f64,
    pub missed_click: bool,
    /// Judge bitmask after this step.
    pub milestones: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trajectory {
    pub task_id: String,
    pub instruction: String,
    pub max_steps: u32,
    pub milestone_count: u32,
    pub screen_count: u32,
    pub final_screen: ScreenId,
    /// Whether the last screen holds an element that submits a flag.
    pub final_screen_flag: bool,
    pub steps: Vec<TrajectoryStep>,
    pub finished: bool,
    /// Outcome used for training: the judge's, or the reward model's label.
    pub outcome: Outcome,
    /// Ground-truth outcome from the milestone judge.
    pub judge_outcome: Outcome,
    pub policy_version: u64,
    pub expert: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl DoubleEndedIterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Relabels the training outcome and recomputes rewards from it.
    pub fn relabel(&mut self, outcome: Outcome) {
        self.outcome = outcome;
        let len = self.steps.len();
        for (t, step) in self.steps.iter_mut().enumerate() {
            step.reward = step_reward(t, len, outcome == Outcome::Success);
        }
    }

    pub fn log_rows(&self) -> Vec<StepLogRow> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| StepLogRow {
                task_id: self.task_id.clone(),
                step_index: i as u32,
                screen_id: s.observation.screen_id,
                action_text: s.action.render(),
                behavior_log_prob: s.behavior_log_prob,
                reward: s.reward,
                missed_click: s.missed_click,
                milestones_bitmask: s.milestones,
            })
            .collect()
    }
}

/// One line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepLogRow {
    pub task_id: String,
    pub step_index: u32,
    pub screen_id: ScreenId,
    pub action_text: String,
    pub behavior_log_prob: f64,
    pub reward: f64,
    pub missed_click: bool,
    pub milestones_bitmask: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewards_follow_scheme() {
        assert_eq!(step_reward(0, 3, true), -0.01);
        assert_eq!(step_reward(2, 3, true), 0.99);
        assert_eq!(step_reward(2, 3, false), -0.01);
    }
}
