//! Behavior cloning, Monte-Carlo actor-critic with a KL anchor, and
//! confidence-filtered replay.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::Action;
use crate::grounder::NoiseModel;
use crate::planner::{dot, CandidateSet, DecisionState, Features, Planner, PlannerError, PolicyParams, F};
use crate::reward::{orm_label, summarize, OrmParams};
use crate::rollout::{run_episode, run_parallel, EpisodeOptions, InterfaceMode, RolloutError};
use crate::seed::{rng_from, stable_hash};
use crate::sim::{Outcome, TaskSpec, World};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("no training data")]
    EmptyData,
    #[error("empty batch")]
    EmptyBatch,
    #[error("distributions differ in support")]
    SupportMismatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no tasks to roll out")]
    NoTasks,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    #[default]
    Judge,
    Orm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub beta: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    /// Per-step mean log-prob band for replayed trajectories.
    pub confidence_band: (f64, f64),
    pub rollout_budget: usize,
    /// Gradient steps on the policy per iteration, all against the same reference.
    pub policy_steps: usize,
    pub critic_steps: usize,
    pub replay_capacity: usize,
    pub reward_source: RewardSource,
    pub grounder_noise: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            beta: 0.1,
            lr_policy: 0.05,
            lr_critic: 0.1,
            confidence_band: (0.05f64.ln(), 0.95f64.ln()),
            rollout_budget: 200,
            policy_steps: 20,
            critic_steps: 3000,
            replay_capacity: 2000,
            reward_source: RewardSource::Judge,
            grounder_noise: 0.0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RlError::Config("gamma must lie in (0, 1]".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(RlError::Config("beta must be non-negative".into()));
        }
        if !(self.confidence_band.0 < self.confidence_band.1) {
            return Err(RlError::Config("confidence band must satisfy cLo < cHi".into()));
        }
        if !(self.lr_policy >= 0.0 && self.lr_critic >= 0.0) {
            return Err(RlError::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub v: Features,
}

impl CriticParams {
    pub fn value(&self, psi: &Features) -> f64 {
        dot(&self.v, psi)
    }
}

/// One decision point rebuilt from a trajectory.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub set: CandidateSet,
    pub action: usize,
    pub ret: f64,
    pub psi: Features,
}

/// Discounted returns `G_t = r_t + γ G_{t+1}`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Rebuilds candidate sets for every step; the history is the earlier actions.
pub fn samples_from(traj: &Trajectory, gamma: f64) -> Result<Vec<StepSample>, RlError> {
    let returns = compute_returns(&traj.rewards(), gamma);
    let mut history: Vec<Action> = Vec::with_capacity(traj.len());
    let mut out = Vec::with_capacity(traj.len());
    for (step, ret) in traj.steps.iter().zip(returns) {
        let state = DecisionState {
            observation: &step.observation,
            instruction: &traj.instruction,
            history: &history,
            max_steps: traj.max_steps,
        };
        let set = CandidateSet::build(&state);
        let action = set.index_of(&step.action).ok_or_else(|| PlannerError::NotACandidate(step.action.render()))?;
        let psi = set.state_features();
        out.push(StepSample { set, action, ret, psi });
        history.push(step.action.clone());
    }
    Ok(out)
}

/// Per-step SGD on `−log π(a_expert | s)`. Returns the mean loss of each epoch.
pub fn bc_train(
    expert: &[Trajectory],
    p0: &PolicyParams,
    lr: f64,
    epochs: usize,
) -> Result<(PolicyParams, Vec<f64>), RlError> {
    let mut samples = Vec::new();
    for traj in expert {
        samples.extend(samples_from(traj, 1.0)?);
    }
    if samples.is_empty() {
        return Err(RlError::EmptyData);
    }
    let mut p = p0.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng_from(&[0xbc, epoch as u64]));
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            total -= p.log_distribution(&s.set)[s.action];
            let g = p.grad_log_prob(&s.set, s.action);
            for (w, gi) in p.w.iter_mut().zip(g) {
                *w += lr * gi;
            }
        }
        trace.push(total / samples.len() as f64);
    }
    p.version = p0.version + 1;
    Ok((p, trace))
}

/// Mean `½(vᵀψ − G)²` and its gradient.
pub fn critic_loss_grad(c: &CriticParams, batch: &[(Features, f64)]) -> (f64, Features) {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; F];
    for (psi, g) in batch {
        let err = c.value(psi) - g;
        loss += 0.5 * err * err / n;
        for (gi, x) in grad.iter_mut().zip(psi) {
            *gi += err * x / n;
        }
    }
    (loss, grad)
}

/// One gradient step on the critic. Returns the new params and the pre-step loss.
pub fn critic_update(c: &CriticParams, batch: &[(Features, f64)], lr: f64) -> Result<(CriticParams, f64), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let (loss, grad) = critic_loss_grad(c, batch);
    let mut next = c.clone();
    for (v, g) in next.v.iter_mut().zip(grad) {
        *v -= lr * g;
    }
    Ok((next, loss))
}

/// `Σ p_i ln(p_i / q_i)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, RlError> {
    if p.len() != q.len() || q.iter().any(|x| !(*x > 0.0)) {
        return Err(RlError::SupportMismatch);
    }
    Ok(p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum())
}

/// Policy-update batch with advantages and reference log-probs fixed.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    items: Vec<PolicyItem>,
}

#[derive(Debug, Clone)]
struct PolicyItem {
    set: CandidateSet,
    action: usize,
    advantage: f64,
    ref_logp: Vec<f64>,
}

impl PolicyBatch {
    pub fn new(samples: &[StepSample], reference: &PolicyParams, critic: &CriticParams) -> Self {
        let items = samples
            .iter()
            .map(|s| PolicyItem {
                set: s.set.clone(),
                action: s.action,
                advantage: s.ret - critic.value(&s.psi),
                ref_logp: reference.log_distribution(&s.set),
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Mean KL from the policy to the reference over batch states.
    pub fn mean_kl(&self, p: &PolicyParams) -> f64 {
        let n = self.items.len().max(1) as f64;
        self.items
            .iter()
            .map(|it| {
                let logp = p.log_distribution(&it.set);
                logp.iter().zip(&it.ref_logp).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    /// `mean[−Â log π(a|s) + β KL(π ‖ π_ref)]`.
    pub fn loss(&self, p: &PolicyParams, beta: f64) -> f64 {
        let n = self.items.len() as f64;
        let mut total = 0.0;
        for it in &self.items {
            let logp = p.log_distribution(&it.set);
            let kl: f64 = logp.iter().zip(&it.ref_logp).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
            total += -it.advantage * logp[it.action] + beta * kl;
        }
        total / n
    }

    pub fn grad(&self, p: &PolicyParams, beta: f64) -> Features {
        let n = self.items.len() as f64;
        let t = p.temperature;
        let mut g = [0.0; F];
        for it in &self.items {
            let logp = p.log_distribution(&it.set);
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let mut mean_phi = [0.0; F];
            for (pr, phi) in probs.iter().zip(&it.set.features) {
                for (m, x) in mean_phi.iter_mut().zip(phi) {
                    *m += pr * x;
                }
            }
            let phi_a = &it.set.features[it.action];
            for k in 0..F {
                g[k] -= it.advantage * (phi_a[k] - mean_phi[k]) / t / n;
            }
            if beta != 0.0 {
                for (i, phi) in it.set.features.iter().enumerate() {
                    let c = probs[i] * (logp[i] - it.ref_logp[i]) * beta / t / n;
                    for k in 0..F {
                        g[k] += c * (phi[k] - mean_phi[k]);
                    }
                }
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub loss: f64,
    pub mean_kl: f64,
}

/// One gradient step on the KL-anchored objective. Loss and KL are pre-step.
pub fn policy_update_kl(
    p: &PolicyParams,
    reference: &PolicyParams,
    critic: &CriticParams,
    batch: &[StepSample],
    beta: f64,
    lr: f64,
) -> Result<(PolicyParams, PolicyStep), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let pb = PolicyBatch::new(batch, reference, critic);
    Ok(step_on(p, &pb, beta, lr))
}

fn step_on(p: &PolicyParams, pb: &PolicyBatch, beta: f64, lr: f64) -> (PolicyParams, PolicyStep) {
    let stats = PolicyStep { loss: pb.loss(p, beta), mean_kl: pb.mean_kl(p) };
    let g = pb.grad(p, beta);
    let mut next = p.clone();
    for (w, gi) in next.w.iter_mut().zip(g) {
        *w -= lr * gi;
    }
    next.version += 1;
    (next, stats)
}

/// Mean per-step log-prob of the trajectory's actions under `p`.
pub fn mean_log_prob(traj: &Trajectory, p: &PolicyParams) -> Result<f64, RlError> {
    let samples = samples_from(traj, 1.0)?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    Ok(samples.iter().map(|s| p.log_distribution(&s.set)[s.action]).sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferedTrajectory {
    pub trajectory: Trajectory,
    /// Per-step log-probs under the policy that last refreshed this entry.
    pub log_probs: Vec<f64>,
}

/// FIFO buffer of successful trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<BufferedTrajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter().map(|b| &b.trajectory)
    }

    /// Admits only Success trajectories. Returns whether it was stored.
    pub fn push(&mut self, traj: Trajectory) -> bool {
        if traj.outcome != Outcome::Success || self.capacity == 0 {
            return false;
        }
        let log_probs = traj.steps.iter().map(|s| s.behavior_log_prob).collect();
        self.items.push_back(BufferedTrajectory { trajectory: traj, log_probs });
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
        true
    }
}

/// Keeps stored trajectories whose mean log-prob under `p` lies in `band`.
pub fn replay_filter(buf: &mut ReplayBuffer, p: &PolicyParams, band: (f64, f64)) -> Result<Vec<Trajectory>, RlError> {
    let mut kept = Vec::new();
    for item in buf.items.iter_mut() {
        let samples = samples_from(&item.trajectory, 1.0)?;
        item.log_probs = samples.iter().map(|s| p.log_distribution(&s.set)[s.action]).collect();
        let mean = if item.log_probs.is_empty() {
            0.0
        } else {
            item.log_probs.iter().sum::<f64>() / item.log_probs.len() as f64
        };
        if band.0 <= mean && mean <= band.1 {
            kept.push(item.trajectory.clone());
        }
    }
    Ok(kept)
}

/// A task instance ready for rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTask {
    pub id: String,
    pub world: World,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IterationStats {
    pub iteration: u32,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "meanKL")]
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub buffer_size: usize,
    pub rollouts: usize,
    pub batch_steps: usize,
}

pub struct IterationOutput {
    pub policy: PolicyParams,
    pub critic: CriticParams,
    pub stats: IterationStats,
    pub trajectories: Vec<Trajectory>,
}

/// Rolls out `cfg.rollout_budget` episodes cycling over `tasks`.
pub fn collect_rollouts(
    policy: &PolicyParams,
    tasks: &[RolloutTask],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Trajectory>, RlError> {
    let planner = Planner::Softmax { params: policy.clone() };
    let jobs: Vec<usize> = (0..cfg.rollout_budget).collect();
    let results = run_parallel(&jobs, cfg.workers, |&j| {
        let t = &tasks[j % tasks.len()];
        let opts = EpisodeOptions {
            seed: stable_hash(&[seed, j as u64]),
            noise: NoiseModel::new(cfg.grounder_noise, seed),
            mode: InterfaceMode::Intermediate,
            perturb: false,
        };
        run_episode(&t.world, &t.task, &t.id, &planner, &opts)
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// One actor-critic iteration. The pre-iteration policy is the KL reference.
pub fn train_iteration(
    policy: &PolicyParams,
    critic: &CriticParams,
    buffer: &mut ReplayBuffer,
    tasks: &[RolloutTask],
    cfg: &TrainConfig,
    orm: Option<&OrmParams>,
    seed: u64,
) -> Result<IterationOutput, RlError> {
    cfg.validate()?;
    if cfg.rollout_budget == 0 {
        return Ok(IterationOutput {
            policy: policy.clone(),
            critic: critic.clone(),
            stats: IterationStats { buffer_size: buffer.len(), ..Default::default() },
            trajectories: Vec::new(),
        });
    }
    if tasks.is_empty() {
        return Err(RlError::NoTasks);
    }
    let mut fresh = collect_rollouts(policy, tasks, cfg, seed)?;
    if cfg.reward_source == RewardSource::Orm {
        let default_orm = OrmParams::default();
        let orm = orm.unwrap_or(&default_orm);
        for traj in fresh.iter_mut() {
            let label = orm_label(orm, &summarize(traj).expect("rollouts are finished"));
            traj.relabel(label);
        }
    }
    let successes = fresh.iter().filter(|t| t.judge_outcome == Outcome::Success).count();

    // critic on every fresh step
    let mut critic_batch = Vec::new();
    for traj in &fresh {
        for s in samples_from(traj, cfg.gamma)? {
            critic_batch.push((s.psi, s.ret));
        }
    }
    let mut next_critic = critic.clone();
    let mut critic_loss = 0.0;
    for _ in 0..cfg.critic_steps.max(1) {
        let (c, loss) = critic_update(&next_critic, &critic_batch, cfg.lr_critic)?;
        next_critic = c;
        critic_loss = loss;
    }

    // policy on fresh successes plus confident replay
    let mut batch = Vec::new();
    for traj in fresh.iter().filter(|t| t.outcome == Outcome::Success) {
        batch.extend(samples_from(traj, cfg.gamma)?);
    }
    for traj in replay_filter(buffer, policy, cfg.confidence_band)? {
        batch.extend(samples_from(&traj, cfg.gamma)?);
    }
    let reference = policy.clone();
    let mut next_policy = policy.clone();
    let mut step_stats = PolicyStep { loss: 0.0, mean_kl: 0.0 };
    if !batch.is_empty() {
        let pb = PolicyBatch::new(&batch, &reference, &next_critic);
        for _ in 0..cfg.policy_steps {
            let (p, s) = step_on(&next_policy, &pb, cfg.beta, cfg.lr_policy);
            next_policy = p;
            step_stats = s;
        }
        step_stats.mean_kl = pb.mean_kl(&next_policy);
    }
    for traj in fresh.iter().filter(|t| t.outcome == Outcome::Success) {
        buffer.push(traj.clone());
    }
    let stats = IterationStats {
        iteration: 0,
        sr: successes as f64 / fresh.len() as f64,
        mean_kl: step_stats.mean_kl,
        policy_loss: step_stats.loss,
        critic_loss,
        buffer_size: buffer.len(),
        rollouts: fresh.len(),
        batch_steps: batch.len(),
    };
    Ok(IterationOutput { policy: next_policy, critic: next_critic, stats, trajectories: fresh })
}
