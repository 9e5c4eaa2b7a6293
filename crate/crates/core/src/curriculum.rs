//! Self-evolving instruction pool.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{CandidateSet, DecisionState};
use crate::rl::{CriticParams, RolloutTask};
use crate::sim::{
    build_task, max_steps_for, sample_template, Env, Outcome, SimError, TaskSpec, TaskTemplate, World, MAX_DIFFICULTY,
};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("cannot simplify a difficulty-1 record")]
    FloorReached,
    #[error("cannot complicate a record at difficulty {MAX_DIFFICULTY}")]
    CeilingReached,
    #[error("pool is empty")]
    EmptyPool,
    #[error("invalid curriculum config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("pool file: {0}")]
    Io(#[from] std::io::Error),
    #[error("pool file line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Complicate,
    Simplify,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Provenance {
    Seed,
    MutatedFrom { parent: String, direction: Direction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Solved,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstructionRecord {
    pub id: String,
    pub template: TaskTemplate,
    pub instruction: String,
    pub difficulty: u32,
    pub provenance: Provenance,
    pub status: Status,
    pub attempts: u32,
    /// Insertion sequence number; larger is newer.
    pub created: u64,
}

impl InstructionRecord {
    pub fn is_seed(&self) -> bool {
        self.provenance == Provenance::Seed
    }

    pub fn regenerate(&self) -> Result<(World, TaskSpec), SimError> {
        build_task(&self.template)
    }

    pub fn rollout_task(&self) -> Result<RolloutTask, SimError> {
        let (world, task) = self.regenerate()?;
        Ok(RolloutTask { id: self.id.clone(), world, task })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CurriculumConfig {
    pub value_band: (f64, f64),
    pub mix_ratio: f64,
    pub pool_cap: usize,
    pub mutations_per_failure: usize,
    /// When false, every mutated candidate is admitted (ablation).
    pub critic_filter: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { value_band: (0.05, 0.75), mix_ratio: 0.5, pool_cap: 5000, mutations_per_failure: 2, critic_filter: true }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let (lo, hi) = self.value_band;
        if !(lo < hi) {
            return Err(CurriculumError::Config("value band must satisfy vLo < vHi".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(CurriculumError::Config("mix ratio must lie in [0, 1]".into()));
        }
        if self.pool_cap == 0 {
            return Err(CurriculumError::Config("pool cap must be positive".into()));
        }
        Ok(())
    }
}

/// Instruction records in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    records: Vec<InstructionRecord>,
    next_seq: u64,
}

impl Pool {
    /// Seed records for `(seed, difficulty)` pairs.
    pub fn from_seeds(pairs: impl IntoIterator<Item = (u64, u32)>) -> Result<Self, CurriculumError> {
        let mut pool = Pool::default();
        for (seed, difficulty) in pairs {
            let template = sample_template(seed, difficulty)?;
            pool.insert(template, Provenance::Seed)?;
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&InstructionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn get_mut(&mut self, id: &str) -> Option<&mut InstructionRecord> {
        self.records.iter_mut().find(|r| r.id == id)
    }

    pub fn contains_template(&self, t: &TaskTemplate) -> bool {
        self.records.iter().any(|r| &r.template == t)
    }

    fn insert(&mut self, template: TaskTemplate, provenance: Provenance) -> Result<String, CurriculumError> {
        build_task(&template)?;
        let record = self.make_record(template, provenance);
        let id = record.id.clone();
        self.records.push(record);
        Ok(id)
    }

    fn make_record(&mut self, template: TaskTemplate, provenance: Provenance) -> InstructionRecord {
        let seq = self.next_seq;
        self.next_seq += 1;
        let prefix = if provenance == Provenance::Seed { 's' } else { 'm' };
        InstructionRecord {
            id: format!("{prefix}{seq:06}"),
            instruction: template.instruction(),
            difficulty: template.difficulty(),
            template,
            provenance,
            status: Status::Pending,
            attempts: 0,
            created: seq,
        }
    }

    /// Adds an already-built record (from `mutate`), renumbering it into this pool.
    pub fn admit(&mut self, mut record: InstructionRecord) -> String {
        let fresh = self.make_record(record.template.clone(), record.provenance.clone());
        record.id = fresh.id;
        record.created = fresh.created;
        let id = record.id.clone();
        self.records.push(record);
        id
    }

    /// Drops records until at most `cap` remain: oldest evolved first, then
    /// oldest solved seeds, then oldest seeds.
    pub fn evict_to(&mut self, cap: usize) {
        let mut excess = self.records.len().saturating_sub(cap);
        let passes: [fn(&InstructionRecord) -> bool; 3] =
            [|r| !r.is_seed(), |r| r.is_seed() && r.status == Status::Solved, |_| true];
        for pass in passes {
            if excess == 0 {
                break;
            }
            let mut drop: BTreeSet<usize> = BTreeSet::new();
            let mut by_age: Vec<(u64, usize)> =
                self.records.iter().enumerate().filter(|(_, r)| pass(r)).map(|(i, r)| (r.created, i)).collect();
            by_age.sort();
            for (_, i) in by_age.into_iter().take(excess) {
                drop.insert(i);
            }
            excess -= drop.len();
            let mut i = 0;
            self.records.retain(|_| {
                let keep = !drop.contains(&i);
                i += 1;
                keep
            });
        }
    }

    pub fn save_jsonl<W: Write>(&self, mut out: W) -> Result<(), CurriculumError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| CurriculumError::Parse { line: 0, source: e })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl<R: BufRead>(input: R) -> Result<Self, CurriculumError> {
        let mut records: Vec<InstructionRecord> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line).map_err(|e| CurriculumError::Parse { line: i + 1, source: e })?;
            records.push(r);
        }
        let next_seq = records.iter().map(|r| r.created + 1).max().unwrap_or(0);
        Ok(Self { records, next_seq })
    }
}

/// Updates status and attempts from `(record id, outcome)` pairs and returns
/// the records with no success in this batch.
pub fn harvest_failures(
    results: &[(String, Outcome)],
    pool: &mut Pool,
) -> Result<Vec<InstructionRecord>, CurriculumError> {
    let mut solved: BTreeMap<&str, bool> = BTreeMap::new();
    for (id, outcome) in results {
        if pool.get(id).is_none() {
            return Err(CurriculumError::UnknownRecord(id.clone()));
        }
        *solved.entry(id.as_str()).or_insert(false) |= *outcome == Outcome::Success;
    }
    for (id, _) in results {
        pool.get_mut(id).expect("checked above").attempts += 1;
    }
    let mut failed = Vec::new();
    for (id, ok) in solved {
        let r = pool.get_mut(id).expect("checked above");
        r.status = if ok { Status::Solved } else { Status::Failed };
        if !ok {
            failed.push(r.clone());
        }
    }
    Ok(failed)
}

/// One mutated child of `r`. The child's id is provisional until admitted.
pub fn mutate<R: Rng + ?Sized>(
    r: &InstructionRecord,
    direction: Direction,
    rng: &mut R,
) -> Result<InstructionRecord, CurriculumError> {
    let mut template = r.template.clone();
    match direction {
        Direction::Complicate => {
            if template.difficulty() >= MAX_DIFFICULTY {
                return Err(CurriculumError::CeilingReached);
            }
            template.append_step(rng)?;
        }
        Direction::Simplify => {
            if template.difficulty() <= 1 {
                return Err(CurriculumError::FloorReached);
            }
            template.chain.pop();
        }
    }
    build_task(&template)?;
    Ok(InstructionRecord {
        id: format!("{}-{}", r.id, if direction == Direction::Complicate { "c" } else { "s" }),
        instruction: template.instruction(),
        difficulty: template.difficulty(),
        template,
        provenance: Provenance::MutatedFrom { parent: r.id.clone(), direction },
        status: Status::Pending,
        attempts: 0,
        created: 0,
    })
}

/// Critic value of a record's initial state.
pub fn initial_value(r: &InstructionRecord, critic: &CriticParams) -> Result<f64, SimError> {
    let (world, task) = r.regenerate()?;
    let env = Env::new(world, task)?;
    let obs = env.observation();
    let state = DecisionState {
        observation: &obs,
        instruction: &env.task().instruction,
        history: &[],
        max_steps: max_steps_for(r.difficulty),
    };
    Ok(critic.value(&CandidateSet::build(&state).state_features()))
}

/// Keeps candidates whose initial-state value lies in `band`.
pub fn critic_filter(
    candidates: &[InstructionRecord],
    critic: &CriticParams,
    band: (f64, f64),
) -> Result<Vec<InstructionRecord>, CurriculumError> {
    let mut out = Vec::new();
    for c in candidates {
        let v = initial_value(c, critic)?;
        if band.0 <= v && v <= band.1 {
            out.push(c.clone());
        }
    }
    Ok(out)
}

/// Mutates each failed record, filters the children and admits them.
/// Returns the ids admitted.
pub fn evolve<R: Rng + ?Sized>(
    pool: &mut Pool,
    failed: &[InstructionRecord],
    critic: &CriticParams,
    cfg: &CurriculumConfig,
    rng: &mut R,
) -> Result<Vec<String>, CurriculumError> {
    let mut children = Vec::new();
    for r in failed {
        for _ in 0..cfg.mutations_per_failure {
            let direction = if r.difficulty <= 1 {
                Direction::Complicate
            } else if r.difficulty >= MAX_DIFFICULTY || rng.gen_bool(0.5) {
                Direction::Simplify
            } else {
                Direction::Complicate
            };
            let child = mutate(r, direction, rng)?;
            if !pool.contains_template(&child.template)
                && !children.iter().any(|c: &InstructionRecord| c.template == child.template)
            {
                children.push(child);
            }
        }
    }
    let accepted = if cfg.critic_filter { critic_filter(&children, critic, cfg.value_band)? } else { children };
    Ok(accepted.into_iter().map(|c| pool.admit(c)).collect())
}

/// Picks `budget` records: a `mix_ratio` share of evolved records (unsolved
/// and newest first) and the rest from unsolved seeds. Evicts beyond the cap.
pub fn schedule_iteration<R: Rng + ?Sized>(
    pool: &mut Pool,
    cfg: &CurriculumConfig,
    budget: usize,
    rng: &mut R,
) -> Result<Vec<InstructionRecord>, CurriculumError> {
    if pool.is_empty() {
        return Err(CurriculumError::EmptyPool);
    }
    pool.evict_to(cfg.pool_cap);
    let mut evolved: Vec<&InstructionRecord> = pool.records.iter().filter(|r| !r.is_seed()).collect();
    evolved.sort_by_key(|r| (r.status == Status::Solved, std::cmp::Reverse(r.created)));
    let want_evolved = (cfg.mix_ratio * budget as f64).round() as usize;
    let mut chosen: Vec<InstructionRecord> = evolved.iter().take(want_evolved).map(|r| (*r).clone()).collect();

    let mut unsolved: Vec<&InstructionRecord> =
        pool.records.iter().filter(|r| r.is_seed() && r.status != Status::Solved).collect();
    unsolved.shuffle(rng);
    let need = budget - chosen.len();
    chosen.extend(unsolved.iter().take(need).map(|r| (*r).clone()));
    if chosen.len() < budget {
        // not enough unsolved seeds: top up from solved seeds
        let mut rest: Vec<&InstructionRecord> =
            pool.records.iter().filter(|r| r.is_seed() && r.status == Status::Solved).collect();
        rest.shuffle(rng);
        let need = budget - chosen.len();
        chosen.extend(rest.iter().take(need).map(|r| (*r).clone()));
    }
    Ok(chosen)
}
