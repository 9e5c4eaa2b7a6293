use super::{judge_outcome, Env, Outcome, SimError, TaskSpec, World};
use crate::dsl::{resolve_target, split_for_grounding, TargetSpec};
use crate::grounder::{ground, NoiseModel};
use crate::trajectory::{step_reward, Trajectory, TrajectoryStep};

/// Replays the task's oracle, grounding descriptive steps exactly.
pub fn oracle_rollout(world: &World, task: &TaskSpec) -> Result<Trajectory, SimError> {
    let mut env = Env::new(world.clone(), task.clone())?;
    let mut steps = Vec::with_capacity(task.oracle.len());
    for (i, action) in task.oracle.iter().enumerate() {
        if env.is_done() {
            return Err(SimError::OracleBroken(format!("episode ended before oracle step {i}")));
        }
        let observation = env.observation();
        let executed = match split_for_grounding(action) {
            Some((pending, query)) => {
                let g = ground(&query, &observation, &NoiseModel::EXACT)
                    .map_err(|e| SimError::OracleBroken(format!("step {i}: {e}")))?;
                let (x, y) = g.coordinates;
                resolve_target(pending, TargetSpec::Grounded { x, y })
            }
            None => action.clone(),
        };
        let result = env.step(&executed)?;
        steps.push(TrajectoryStep {
            observation,
            action: action.clone(),
            behavior_log_prob: 0.0,
            reward: 0.0,
            missed_click: result.missed_click,
            milestones: result.judge.satisfied,
        });
    }
    let outcome = judge_outcome(env.judge(), task.milestones.len());
    if outcome != Outcome::Success {
        return Err(SimError::OracleBroken(format!("oracle replay ended {outcome:?}")));
    }
    let len = steps.len();
    for (t, s) in steps.iter_mut().enumerate() {
        s.reward = step_reward(t, len, true);
    }
    let final_screen = env.current_screen();
    Ok(Trajectory {
        task_id: format!("seed{}-d{}", task.world_seed, task.difficulty),
        instruction: task.instruction.clone(),
        max_steps: env.max_steps(),
        milestone_count: task.milestones.len() as u32,
        screen_count: world.screens.len() as u32,
        final_screen,
        final_screen_flag: world.screen_has_flag_element(final_screen),
        steps,
        finished: true,
        outcome,
        judge_outcome: outcome,
        policy_version: 0,
        expert: true,
    })
}
