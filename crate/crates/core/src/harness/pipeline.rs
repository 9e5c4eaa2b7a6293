//! End-to-end self-evolving training run: BC warm start, then alternating
//! actor-critic iterations and curriculum evolution, with held-out evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_suite, write_trajectory_log, HarnessError, RunConfig};
use crate::curriculum::{evolve, harvest_failures, schedule_iteration, CurriculumConfig, CurriculumError, Pool};
use crate::grounder::NoiseModel;
use crate::planner::{Planner, PolicyCheckpoint, PolicyParams};
use crate::reward::{orm_train, summarize, OrmCheckpoint, OrmParams, RewardError};
use crate::rl::{
    bc_train, train_iteration, CriticParams, IterationStats, ReplayBuffer, RewardSource, RlError, TrainConfig,
};
use crate::rollout::{run_episode, run_parallel, EpisodeOptions, InterfaceMode};
use crate::seed::{rng_from, stable_hash};
use crate::sim::{generate_world, oracle_rollout, Outcome, SimError};
use crate::trajectory::Trajectory;

/// Flat experiment file: training, curriculum and evaluation knobs in one
/// document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub workers: usize,
    pub iterations: u32,
    /// Records scheduled per iteration.
    pub tasks_per_iteration: usize,
    pub seed_pool_size: usize,
    pub min_difficulty: u32,
    pub max_difficulty: u32,
    pub eval_suite_size: usize,

    pub bc_trajectories: usize,
    pub bc_max_difficulty: u32,
    pub bc_lr: f64,
    pub bc_epochs: usize,

    pub gamma: f64,
    pub beta: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub confidence_band: (f64, f64),
    pub rollout_budget: usize,
    pub policy_steps: usize,
    pub critic_steps: usize,
    pub replay_capacity: usize,
    pub reward_source: RewardSource,
    pub grounder_noise: f64,

    pub value_band: (f64, f64),
    pub mix_ratio: f64,
    pub pool_cap: usize,
    pub mutations_per_failure: usize,
    pub critic_filter: bool,

    /// Labeled trajectories used to fit the outcome reward model.
    pub orm_trajectories: usize,
    pub orm_lr: f64,
    pub orm_epochs: usize,
    /// Write per-iteration trajectory logs (step rows) to the run directory.
    pub log_trajectories: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let c = CurriculumConfig::default();
        Self {
            master_seed: 0,
            workers: 1,
            iterations: 6,
            tasks_per_iteration: 150,
            seed_pool_size: 600,
            min_difficulty: 1,
            max_difficulty: 6,
            eval_suite_size: 300,
            bc_trajectories: 1000,
            bc_max_difficulty: 2,
            bc_lr: 0.1,
            bc_epochs: 10,
            gamma: t.gamma,
            beta: t.beta,
            lr_policy: t.lr_policy,
            lr_critic: t.lr_critic,
            confidence_band: t.confidence_band,
            rollout_budget: t.rollout_budget,
            policy_steps: t.policy_steps,
            critic_steps: t.critic_steps,
            replay_capacity: t.replay_capacity,
            reward_source: t.reward_source,
            grounder_noise: t.grounder_noise,
            value_band: c.value_band,
            mix_ratio: c.mix_ratio,
            pool_cap: c.pool_cap,
            mutations_per_failure: c.mutations_per_failure,
            critic_filter: c.critic_filter,
            orm_trajectories: 1000,
            orm_lr: 1.0,
            orm_epochs: 2000,
            log_trajectories: false,
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            beta: self.beta,
            lr_policy: self.lr_policy,
            lr_critic: self.lr_critic,
            confidence_band: self.confidence_band,
            rollout_budget: self.rollout_budget,
            policy_steps: self.policy_steps,
            critic_steps: self.critic_steps,
            replay_capacity: self.replay_capacity,
            reward_source: self.reward_source,
            grounder_noise: self.grounder_noise,
            workers: self.workers,
        }
    }

    pub fn curriculum_config(&self) -> CurriculumConfig {
        CurriculumConfig {
            value_band: self.value_band,
            mix_ratio: self.mix_ratio,
            pool_cap: self.pool_cap,
            mutations_per_failure: self.mutations_per_failure,
            critic_filter: self.critic_filter,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.min_difficulty == 0 || self.min_difficulty > self.max_difficulty {
            return bad("difficulty range must satisfy 1 <= min <= max");
        }
        if self.seed_pool_size == 0 || self.eval_suite_size == 0 || self.tasks_per_iteration == 0 {
            return bad("pool, suite and per-iteration sizes must be positive");
        }
        if self.bc_trajectories == 0 || self.bc_max_difficulty == 0 {
            return bad("behavior cloning needs data");
        }
        self.train_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.curriculum_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Mixed-difficulty seed records, cycling through the difficulty range.
    fn seed_pairs(&self, count: usize, salt: u64) -> Vec<(u64, u32)> {
        let span = (self.max_difficulty - self.min_difficulty + 1) as usize;
        (0..count)
            .map(|i| (stable_hash(&[self.master_seed, salt, i as u64]), self.min_difficulty + (i % span) as u32))
            .collect()
    }

    pub fn training_pool(&self) -> Result<Pool, CurriculumError> {
        Pool::from_seeds(self.seed_pairs(self.seed_pool_size, 0x7001))
    }

    pub fn eval_pool(&self) -> Result<Pool, CurriculumError> {
        Pool::from_seeds(self.seed_pairs(self.eval_suite_size, 0xe7a1))
    }

    fn eval_config(&self, pool: &Pool, policy: &PolicyParams) -> RunConfig {
        RunConfig {
            master_seed: self.master_seed,
            workers: self.workers,
            grounder_noise: self.grounder_noise,
            ..RunConfig::new(pool.records().to_vec(), Planner::Softmax { params: policy.clone() })
        }
    }
}

/// Oracle demonstrations on `count` fresh worlds with difficulty cycling
/// through `1..=max_difficulty`.
pub fn bc_corpus(seed: u64, count: usize, max_difficulty: u32) -> Result<Vec<Trajectory>, SimError> {
    (0..count)
        .map(|i| {
            let d = 1 + (i as u32 % max_difficulty.max(1));
            let (world, task) = generate_world(stable_hash(&[seed, 0xbc, i as u64]), d)?;
            let mut t = oracle_rollout(&world, &task)?;
            t.task_id = format!("bc{i:06}");
            Ok(t)
        })
        .collect()
}

/// Labeled rollouts from a spread of behaviors, for fitting the ORM.
pub fn orm_corpus(cfg: &ExperimentConfig, policy: &PolicyParams, salt: u64) -> Result<Vec<Trajectory>, HarnessError> {
    let pool = Pool::from_seeds(cfg.seed_pairs(cfg.orm_trajectories, salt))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let planners = [
        Planner::Softmax { params: policy.clone() },
        Planner::ScriptedNoisy { p: 0.1 },
        Planner::ScriptedNoisy { p: 0.3 },
        Planner::ScriptedNoisy { p: 0.6 },
    ];
    let jobs: Vec<usize> = (0..pool.len()).collect();
    let out = run_parallel(&jobs, cfg.workers, |&i| {
        let r = &pool.records()[i];
        let (world, task) = r.regenerate()?;
        let opts = EpisodeOptions {
            seed: stable_hash(&[cfg.master_seed, salt, i as u64]),
            noise: NoiseModel::new(cfg.grounder_noise, cfg.master_seed),
            mode: InterfaceMode::Intermediate,
            perturb: false,
        };
        run_episode(&world, &task, &r.id, &planners[i % planners.len()], &opts)
    });
    Ok(out.into_iter().collect::<Result<Vec<_>, _>>()?)
}

pub fn fit_orm(data: &[Trajectory], lr: f64, epochs: usize) -> Result<OrmParams, RewardError> {
    let labeled: Vec<_> = data
        .iter()
        .map(|t| Ok((summarize(t)?, t.judge_outcome == Outcome::Success)))
        .collect::<Result<_, RewardError>>()?;
    match orm_train(&labeled, lr, epochs) {
        Ok(fit) => Ok(fit.params),
        Err(RewardError::DegenerateData { fallback }) => Ok(fallback),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IterationRecord {
    #[serde(flatten)]
    pub stats: IterationStats,
    /// Held-out mixed-suite SR after this iteration's update.
    #[serde(rename = "evalSR")]
    pub eval_sr: f64,
    pub pool_size: usize,
    pub harvested: usize,
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumRun {
    pub bc_policy: PolicyParams,
    pub bc_eval_sr: f64,
    pub iterations: Vec<IterationRecord>,
    pub policy: PolicyParams,
    pub critic: CriticParams,
    pub orm: Option<OrmParams>,
    pub pool: Pool,
}

impl CurriculumRun {
    pub fn final_eval_sr(&self) -> f64 {
        self.iterations.last().map(|r| r.eval_sr).unwrap_or(self.bc_eval_sr)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn rl_err(e: RlError) -> HarnessError {
    HarnessError::Config(e.to_string())
}

fn cur_err(e: CurriculumError) -> HarnessError {
    HarnessError::Config(e.to_string())
}

/// Runs the whole experiment. With `out_dir`, writes `stats.jsonl`, per-iteration
/// checkpoints, the final pool and (optionally) trajectory logs.
pub fn run_curriculum(
    cfg: &ExperimentConfig,
    init_policy: Option<PolicyParams>,
    out_dir: Option<&Path>,
) -> Result<CurriculumRun, HarnessError> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let tcfg = cfg.train_config();
    let ccfg = cfg.curriculum_config();

    let bc_policy = match init_policy {
        Some(p) => p,
        None => {
            let corpus = bc_corpus(cfg.master_seed, cfg.bc_trajectories, cfg.bc_max_difficulty)?;
            bc_train(&corpus, &PolicyParams::default(), cfg.bc_lr, cfg.bc_epochs).map_err(rl_err)?.0
        }
    };
    let eval_pool = cfg.eval_pool().map_err(cur_err)?;
    let bc_eval_sr = run_suite(&cfg.eval_config(&eval_pool, &bc_policy))?.sr;

    let orm = match cfg.reward_source {
        RewardSource::Judge => None,
        RewardSource::Orm => {
            let data = orm_corpus(cfg, &bc_policy, 0x0e11)?;
            Some(fit_orm(&data, cfg.orm_lr, cfg.orm_epochs).map_err(|e| HarnessError::Config(e.to_string()))?)
        }
    };

    let mut pool = cfg.training_pool().map_err(cur_err)?;
    let mut policy = bc_policy.clone();
    let mut critic = CriticParams::default();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut iterations = Vec::new();
    let mut stats_out = match out_dir {
        Some(dir) => {
            write_json(&dir.join("policy-bc.json"), &PolicyCheckpoint::from(&bc_policy))?;
            if let Some(o) = &orm {
                write_json(&dir.join("orm.json"), &OrmCheckpoint::from(o))?;
            }
            Some(BufWriter::new(fs::File::create(dir.join("stats.jsonl"))?))
        }
        None => None,
    };

    for it in 0..cfg.iterations {
        let mut rng = rng_from(&[cfg.master_seed, 0xc011, it as u64]);
        let scheduled = schedule_iteration(&mut pool, &ccfg, cfg.tasks_per_iteration, &mut rng).map_err(cur_err)?;
        let tasks = scheduled.iter().map(|r| r.rollout_task()).collect::<Result<Vec<_>, _>>()?;
        let out = train_iteration(
            &policy,
            &critic,
            &mut buffer,
            &tasks,
            &tcfg,
            orm.as_ref(),
            stable_hash(&[cfg.master_seed, 0x7a1, it as u64]),
        )
        .map_err(rl_err)?;
        policy = out.policy;
        critic = out.critic;

        // the curriculum only sees training outcomes, which are ORM labels in the judge-free regime
        let results: Vec<(String, Outcome)> = out.trajectories.iter().map(|t| (t.task_id.clone(), t.outcome)).collect();
        let failed = harvest_failures(&results, &mut pool).map_err(cur_err)?;
        let admitted = evolve(&mut pool, &failed, &critic, &ccfg, &mut rng).map_err(cur_err)?;
        let eval_sr = run_suite(&cfg.eval_config(&eval_pool, &policy))?.sr;

        let record = IterationRecord {
            stats: IterationStats { iteration: it + 1, ..out.stats },
            eval_sr,
            pool_size: pool.len(),
            harvested: failed.len(),
            admitted: admitted.len(),
        };
        if let (Some(dir), Some(stats)) = (out_dir, stats_out.as_mut()) {
            serde_json::to_writer(&mut *stats, &record)?;
            stats.write_all(b"\n")?;
            stats.flush()?;
            write_json(&dir.join(format!("policy-iter{:03}.json", it + 1)), &PolicyCheckpoint::from(&policy))?;
            write_json(&dir.join(format!("critic-iter{:03}.json", it + 1)), &critic)?;
            if cfg.log_trajectories {
                write_trajectory_log(&dir.join(format!("trajectories-iter{:03}.jsonl", it + 1)), &out.trajectories)?;
            }
        }
        iterations.push(record);
    }

    if let Some(dir) = out_dir {
        let mut w = BufWriter::new(fs::File::create(dir.join("pool.jsonl"))?);
        pool.save_jsonl(&mut w).map_err(cur_err)?;
        w.flush()?;
        write_json(&dir.join("policy-final.json"), &PolicyCheckpoint::from(&policy))?;
    }
    Ok(CurriculumRun { bc_policy, bc_eval_sr, iterations, policy, critic, orm, pool })
}
