//! Candidate enumeration, the linear softmax policy and scripted planners.
//!
//! Feature map (F = 16), frozen:
//!
//! | idx | meaning |
//! |-----|---------|
//! | 0 | instruction/label content-token Jaccard |
//! | 1..=6 | role one-hot: button, link, textbox, checkbox, listitem, label |
//! | 7 | target center lies in the top half of the viewport |
//! | 8..=12 | action kind: Click, Input, Scroll, Back, Finish |
//! | 13 | step index / max steps |
//! | 14 | same action already taken this episode |
//! | 15 | bias |

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse_action, Action, ActionKind, DslError, ScrollDirection, TargetSpec};
use crate::grounder::{element_region, enumerate_som, ground, make_description, NoiseModel};
use crate::sim::{Element, Observation, TaskSpec};
use crate::text::{content_tokens, jaccard, last_content_word, quoted_payloads};

pub const F: usize = 16;
pub type Features = [f64; F];

pub const IDX_JACCARD: usize = 0;
pub const IDX_ROLE: usize = 1;
pub const IDX_TOP_HALF: usize = 7;
pub const IDX_KIND: usize = 8;
pub const IDX_STEP: usize = 13;
pub const IDX_REPEAT: usize = 14;
pub const IDX_BIAS: usize = 15;

/// Prompt history window for external planners.
pub const PROMPT_HISTORY: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("action is not among the candidates: {0}")]
    NotACandidate(String),
    #[error("oracle step {step} out of range for {len} steps")]
    Index { step: usize, len: usize },
    #[error(transparent)]
    Dsl(#[from] DslError),
}

/// Everything the policy conditions on.
#[derive(Debug, Clone, Copy)]
pub struct DecisionState<'a> {
    pub observation: &'a Observation,
    pub instruction: &'a str,
    /// Earlier actions of this episode, oldest first.
    pub history: &'a [Action],
    pub max_steps: u32,
}

/// Text typed by Input candidates and offered as the Finish answer.
pub fn payload(instruction: &str) -> String {
    quoted_payloads(instruction)
        .into_iter()
        .find(|p| !p.is_empty())
        .or_else(|| last_content_word(instruction))
        .unwrap_or_default()
}

/// Deterministically ordered candidate actions. Finish is always last.
pub fn candidates(obs: &Observation, instruction: &str) -> Vec<Action> {
    let t = payload(instruction);
    let mut out = Vec::new();
    let mut elements: Vec<&Element> = obs.visible_elements.iter().collect();
    elements.sort_by_key(|e| e.id);
    for e in elements {
        let target = TargetSpec::Descriptive(make_description(e, obs));
        if e.role.is_clickable() {
            out.push(Action::Click(target));
        } else if e.role == crate::sim::Role::Textbox {
            out.push(Action::Input { target, text: t.clone() });
        }
    }
    if obs.scroll_offset < obs.scroll_extent {
        out.push(Action::Scroll { direction: ScrollDirection::Down, amount: 1 });
    }
    if obs.scroll_offset > 0 {
        out.push(Action::Scroll { direction: ScrollDirection::Up, amount: 1 });
    }
    if obs.history_depth > 0 {
        out.push(Action::Back);
    }
    out.push(Action::Finish { answer: if t.is_empty() { None } else { Some(t) } });
    out
}

fn kind_index(kind: ActionKind) -> usize {
    match kind {
        ActionKind::Click => 0,
        ActionKind::Input => 1,
        ActionKind::Scroll => 2,
        ActionKind::Back => 3,
        ActionKind::Finish => 4,
    }
}

/// Element a descriptive candidate refers to, by exact grounding.
fn target_element<'o>(action: &Action, obs: &'o Observation) -> Option<&'o Element> {
    let TargetSpec::Descriptive(d) = action.target()? else { return None };
    let q = crate::dsl::GroundingQuery::new(d.clone()).ok()?;
    let g = ground(&q, obs, &NoiseModel::EXACT).ok()?;
    obs.element(g.element_id)
}

fn featurize_with(state: &DecisionState, action: &Action, instr: &BTreeSet<String>) -> Features {
    let obs = state.observation;
    let mut phi = [0.0; F];
    if let Some(e) = target_element(action, obs) {
        phi[IDX_JACCARD] = jaccard(instr, &content_tokens(&e.label));
        phi[IDX_ROLE + e.role.index()] = 1.0;
        let (_, cy) = e.bounds.visible_center(obs.scroll_offset);
        if cy < 500 {
            phi[IDX_TOP_HALF] = 1.0;
        }
    }
    phi[IDX_KIND + kind_index(action.kind())] = 1.0;
    phi[IDX_STEP] = if state.max_steps == 0 { 0.0 } else { (obs.step_index as f64 / state.max_steps as f64).min(1.0) };
    if state.history.contains(action) {
        phi[IDX_REPEAT] = 1.0;
    }
    phi[IDX_BIAS] = 1.0;
    phi
}

pub fn featurize(state: &DecisionState, action: &Action) -> Features {
    featurize_with(state, action, &content_tokens(state.instruction))
}

/// Candidates with their feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub actions: Vec<Action>,
    pub features: Vec<Features>,
}

impl CandidateSet {
    pub fn build(state: &DecisionState) -> Self {
        let actions = candidates(state.observation, state.instruction);
        let instr = content_tokens(state.instruction);
        let features = actions.iter().map(|a| featurize_with(state, a, &instr)).collect();
        Self { actions, features }
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Critic state features: candidate mean with action-kind slots zeroed.
    pub fn state_features(&self) -> Features {
        let mut psi = [0.0; F];
        if self.features.is_empty() {
            psi[IDX_BIAS] = 1.0;
            return psi;
        }
        let n = self.features.len() as f64;
        for phi in &self.features {
            for (p, v) in psi.iter_mut().zip(phi) {
                *p += v / n;
            }
        }
        for slot in &mut psi[IDX_KIND..IDX_KIND + 5] {
            *slot = 0.0;
        }
        psi[IDX_BIAS] = 1.0;
        psi
    }
}

pub fn dot(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-probabilities matching [`softmax`].
pub fn log_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w: Features,
    pub version: u64,
    pub temperature: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { w: [0.0; F], version: 0, temperature: 1.0 }
    }
}

/// On-disk checkpoint record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub version: u64,
    #[serde(rename = "F")]
    pub f: usize,
    pub w: Vec<f64>,
    pub temperature: f64,
}

impl From<&PolicyParams> for PolicyCheckpoint {
    fn from(p: &PolicyParams) -> Self {
        Self { version: p.version, f: F, w: p.w.to_vec(), temperature: p.temperature }
    }
}

impl TryFrom<PolicyCheckpoint> for PolicyParams {
    type Error = String;

    fn try_from(c: PolicyCheckpoint) -> Result<Self, String> {
        if c.f != F || c.w.len() != F {
            return Err(format!("checkpoint has {} weights, expected {F}", c.w.len()));
        }
        if !c.w.iter().all(|x| x.is_finite()) || !(c.temperature > 0.0) {
            return Err("checkpoint holds non-finite weights or a non-positive temperature".into());
        }
        let mut w = [0.0; F];
        w.copy_from_slice(&c.w);
        Ok(Self { w, version: c.version, temperature: c.temperature })
    }
}

impl PolicyParams {
    pub fn scores(&self, set: &CandidateSet) -> Vec<f64> {
        set.features.iter().map(|phi| dot(&self.w, phi)).collect()
    }

    pub fn distribution(&self, set: &CandidateSet) -> Vec<f64> {
        softmax(&self.scores(set), self.temperature)
    }

    pub fn log_distribution(&self, set: &CandidateSet) -> Vec<f64> {
        log_softmax(&self.scores(set), self.temperature)
    }

    /// Gradient of `log π(a_k)` with respect to `w`: `(φ_k − E_π φ) / T`.
    pub fn grad_log_prob(&self, set: &CandidateSet, k: usize) -> Features {
        let probs = self.distribution(set);
        let mut g = set.features[k];
        for (p, phi) in probs.iter().zip(&set.features) {
            for (gi, x) in g.iter_mut().zip(phi) {
                *gi -= p * x;
            }
        }
        g.map(|x| x / self.temperature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub log_prob: f64,
    pub dist: Vec<(Action, f64)>,
}

/// Samples an action from the softmax policy.
pub fn act<R: Rng + ?Sized>(p: &PolicyParams, state: &DecisionState, rng: &mut R) -> Decision {
    let set = CandidateSet::build(state);
    act_on(p, &set, rng)
}

pub fn act_on<R: Rng + ?Sized>(p: &PolicyParams, set: &CandidateSet, rng: &mut R) -> Decision {
    let logp = p.log_distribution(set);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = probs.len() - 1;
    for (i, pr) in probs.iter().enumerate() {
        acc += pr;
        if u < acc {
            k = i;
            break;
        }
    }
    Decision {
        action: set.actions[k].clone(),
        log_prob: logp[k],
        dist: set.actions.iter().cloned().zip(probs).collect(),
    }
}

pub fn log_prob(p: &PolicyParams, state: &DecisionState, a: &Action) -> Result<f64, PlannerError> {
    let set = CandidateSet::build(state);
    let k = set.index_of(a).ok_or_else(|| PlannerError::NotACandidate(a.render()))?;
    Ok(p.log_distribution(&set)[k])
}

/// The task's oracle action at `step`, in descriptive form.
pub fn oracle_planner(task: &TaskSpec, step: usize) -> Result<Action, PlannerError> {
    task.oracle.get(step).cloned().ok_or(PlannerError::Index { step, len: task.oracle.len() })
}

/// Text context handed to an external planner.
pub fn render_prompt(state: &DecisionState) -> String {
    let obs = state.observation;
    let mut out = format!("Instruction: {}\n", state.instruction);
    for m in enumerate_som(obs) {
        let e = obs.element(m.element_id).expect("mark refers to a visible element");
        out.push_str(&format!(
            "[{}] {} \"{}\" ({})\n",
            m.mark,
            m.role.as_str(),
            m.label,
            element_region(e, obs).as_str()
        ));
    }
    let start = state.history.len().saturating_sub(PROMPT_HISTORY);
    for a in &state.history[start..] {
        out.push_str(&format!("> {}\n", a.render()));
    }
    out
}

/// Serializes the context, asks `callback` for a reply and parses it.
pub fn external_planner_adapter<C>(state: &DecisionState, callback: C) -> Result<Action, PlannerError>
where
    C: FnOnce(&str) -> String,
{
    let reply = callback(&render_prompt(state));
    Ok(parse_action(reply.trim())?)
}

/// Planner variants the harness can run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Planner {
    Softmax {
        params: PolicyParams,
    },
    Oracle,
    /// Oracle action with probability `1 − p`, otherwise a uniform candidate.
    ScriptedNoisy {
        p: f64,
    },
}

impl Planner {
    pub fn version(&self) -> u64 {
        match self {
            Planner::Softmax { params } => params.version,
            _ => 0,
        }
    }

    /// Chooses the next action and the behavior log-probability under the planner.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        state: &DecisionState,
        task: &TaskSpec,
        rng: &mut R,
    ) -> Result<(Action, f64), PlannerError> {
        match self {
            Planner::Softmax { params } => {
                let d = act(params, state, rng);
                Ok((d.action, d.log_prob))
            }
            Planner::Oracle => Ok((scripted_step(task, state), 0.0)),
            Planner::ScriptedNoisy { p } => {
                let noisy = rng.gen::<f64>() < *p;
                if noisy {
                    let cands = candidates(state.observation, state.instruction);
                    let k = rng.gen_range(0..cands.len());
                    let lp = (1.0 / cands.len() as f64).ln();
                    Ok((cands[k].clone(), lp))
                } else {
                    Ok((scripted_step(task, state), 0.0))
                }
            }
        }
    }
}

/// Past the end of the oracle, scripted planners emit the same Finish the
/// candidate list offers.
fn scripted_step(task: &TaskSpec, state: &DecisionState) -> Action {
    oracle_planner(task, state.observation.step_index as usize).unwrap_or_else(|_| {
        let t = payload(state.instruction);
        Action::Finish { answer: if t.is_empty() { None } else { Some(t) } }
    })
}
