//! Episode execution and deterministic parallel fan-out.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{resolve_target, split_for_grounding, Action, TargetSpec};
use crate::grounder::{ground, NoiseModel};
use crate::planner::{DecisionState, Planner, PlannerError};
use crate::seed::{rng_from, stable_hash};
use crate::sim::{
    judge_outcome, max_steps_for, perturb_layout, Env, JudgeState, Observation, Outcome, ScreenId, SimError,
    StepResult, TaskSpec, World,
};
use crate::trajectory::{step_reward, Trajectory, TrajectoryStep};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("transport: {0}")]
    Transport(String),
}

/// How planner actions reach the environment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterfaceMode {
    /// Descriptive targets are resolved by the grounder at run time.
    #[default]
    Intermediate,
    /// Targets are replaced by coordinates memorized on the unperturbed layout.
    EndToEnd,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub seed: u64,
    pub noise: NoiseModel,
    pub mode: InterfaceMode,
    pub perturb: bool,
}

/// What the grounder would see on `world` at `(screen, scroll)`.
fn static_observation(world: &World, screen: ScreenId, like: &Observation) -> Option<Observation> {
    let s = world.screen(screen)?;
    Some(Observation {
        screen_id: screen,
        visible_elements: s
            .elements
            .iter()
            .filter(|e| e.bounds.intersects_window(like.scroll_offset))
            .cloned()
            .collect(),
        ..like.clone()
    })
}

/// Turns a planner action into an executable one, or `None` when grounding fails.
fn execute_form(
    action: &Action,
    obs: &Observation,
    reference: &World,
    opts: &EpisodeOptions,
    noise: &NoiseModel,
) -> Option<Action> {
    let Some((pending, query)) = split_for_grounding(action) else {
        return Some(action.clone());
    };
    let g = match opts.mode {
        InterfaceMode::Intermediate => ground(&query, obs, noise).ok()?,
        InterfaceMode::EndToEnd => {
            let memory = static_observation(reference, obs.screen_id, obs)?;
            ground(&query, &memory, &NoiseModel::EXACT).ok()?
        }
    };
    let (x, y) = g.coordinates;
    Some(resolve_target(pending, TargetSpec::Grounded { x, y }))
}

/// Minimal environment surface an episode needs; implemented in-process by
/// [`Env`] and over the wire by the remote worker client.
pub trait EpisodeEnv {
    fn reset(&mut self) -> Result<Observation, RolloutError>;
    fn step(&mut self, action: &Action) -> Result<StepResult, RolloutError>;
    /// Spends a step without acting (ungroundable description).
    fn step_wasted(&mut self) -> Result<StepResult, RolloutError>;
}

impl EpisodeEnv for Env {
    fn reset(&mut self) -> Result<Observation, RolloutError> {
        Ok(Env::reset(self))
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, RolloutError> {
        Ok(Env::step(self, action)?)
    }

    fn step_wasted(&mut self) -> Result<StepResult, RolloutError> {
        Ok(Env::step_wasted(self)?)
    }
}

/// The world an episode actually runs on.
pub fn episode_world(world: &World, opts: &EpisodeOptions) -> World {
    if opts.perturb {
        perturb_layout(world, opts.seed)
    } else {
        world.clone()
    }
}

/// Runs one episode of `planner` on `(world, task)` in-process.
pub fn run_episode(
    world: &World,
    task: &TaskSpec,
    task_id: &str,
    planner: &Planner,
    opts: &EpisodeOptions,
) -> Result<Trajectory, RolloutError> {
    let mut env = Env::new(episode_world(world, opts), task.clone())?;
    drive(&mut env, world, task, task_id, planner, opts)
}

/// Episode loop over any [`EpisodeEnv`]. `world` is the unperturbed layout,
/// used for end-to-end coordinate memory and screen metadata.
pub fn drive<E: EpisodeEnv>(
    env: &mut E,
    world: &World,
    task: &TaskSpec,
    task_id: &str,
    planner: &Planner,
    opts: &EpisodeOptions,
) -> Result<Trajectory, RolloutError> {
    let mut rng = rng_from(&[opts.seed, 0x91a7]);
    let noise = NoiseModel::new(opts.noise.epsilon, stable_hash(&[opts.noise.rng_seed, opts.seed]));
    let max_steps = max_steps_for(task.difficulty);
    let mut history: Vec<Action> = Vec::new();
    let mut steps = Vec::new();
    let mut observation = env.reset()?;
    let judge: JudgeState = loop {
        let state =
            DecisionState { observation: &observation, instruction: &task.instruction, history: &history, max_steps };
        let (action, behavior_log_prob) = planner.decide(&state, task, &mut rng)?;
        let result = match execute_form(&action, &observation, world, opts, &noise) {
            Some(exec) => env.step(&exec)?,
            None => env.step_wasted()?,
        };
        steps.push(TrajectoryStep {
            observation: std::mem::replace(&mut observation, result.observation),
            action: action.clone(),
            behavior_log_prob,
            reward: 0.0,
            missed_click: result.missed_click,
            milestones: result.judge.satisfied,
        });
        history.push(action);
        if result.done || steps.len() >= max_steps as usize {
            break result.judge;
        }
    };
    let outcome = judge_outcome(&judge, task.milestones.len());
    let len = steps.len();
    for (t, s) in steps.iter_mut().enumerate() {
        s.reward = step_reward(t, len, outcome == Outcome::Success);
    }
    let final_screen = observation.screen_id;
    Ok(Trajectory {
        task_id: task_id.to_string(),
        instruction: task.instruction.clone(),
        max_steps,
        milestone_count: task.milestones.len() as u32,
        screen_count: world.screens.len() as u32,
        final_screen,
        final_screen_flag: world.screen_has_flag_element(final_screen),
        steps,
        finished: true,
        outcome,
        judge_outcome: outcome,
        policy_version: planner.version(),
        expert: matches!(planner, Planner::Oracle),
    })
}

/// Applies `f` to every job on `workers` scoped threads. Output order equals
/// input order regardless of which worker finished first.
pub fn run_parallel<J, R, F>(jobs: &[J], workers: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                if tx.send((i, f(job))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut out: Vec<(usize, R)> = rx.into_iter().collect();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}
