//! Outcome reward model: logistic regression over judge-free trajectory summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Action, ActionKind};
use crate::sim::Outcome;
use crate::text::{content_tokens, jaccard};
use crate::trajectory::Trajectory;

pub const G: usize = 8;
pub type Summary = [f64; G];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("trajectory has not finished")]
    UnfinishedTrajectory,
    #[error("training data holds a single class; fell back to a constant predictor")]
    DegenerateData { fallback: OrmParams },
    #[error("training data is empty")]
    EmptyData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OrmParams {
    pub u: Summary,
    pub trained_on: usize,
}

impl Default for OrmParams {
    fn default() -> Self {
        Self { u: [0.0; G], trained_on: 0 }
    }
}

/// On-disk record `{G, u[], trainedOn}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OrmCheckpoint {
    #[serde(rename = "G")]
    pub g: usize,
    pub u: Vec<f64>,
    pub trained_on: usize,
}

impl From<&OrmParams> for OrmCheckpoint {
    fn from(p: &OrmParams) -> Self {
        Self { g: G, u: p.u.to_vec(), trained_on: p.trained_on }
    }
}

impl TryFrom<OrmCheckpoint> for OrmParams {
    type Error = String;

    fn try_from(c: OrmCheckpoint) -> Result<Self, String> {
        if c.g != G || c.u.len() != G || !c.u.iter().all(|x| x.is_finite()) {
            return Err(format!("expected {G} finite weights"));
        }
        let mut u = [0.0; G];
        u.copy_from_slice(&c.u);
        Ok(Self { u, trained_on: c.trained_on })
    }
}

/// Observable features of a finished trajectory. Never reads milestone bits.
pub fn summarize(traj: &Trajectory) -> Result<Summary, RewardError> {
    if !traj.finished {
        return Err(RewardError::UnfinishedTrajectory);
    }
    let len = traj.steps.len();
    let answer = traj.actions().rev().find_map(|a| match a {
        Action::Finish { answer } => answer.clone(),
        _ => None,
    });
    let mut s = [0.0; G];
    if let Some(ans) = &answer {
        s[0] = jaccard(&content_tokens(ans), &content_tokens(&traj.instruction));
    }
    s[1] = if traj.max_steps == 0 { 1.0 } else { (len as f64 / traj.max_steps as f64).min(1.0) };
    s[2] = if len == 0 { 0.0 } else { traj.steps.iter().filter(|st| st.missed_click).count() as f64 / len as f64 };
    let mut screens: BTreeSet<u32> = traj.steps.iter().map(|st| st.observation.screen_id).collect();
    screens.insert(traj.final_screen);
    s[3] = if traj.screen_count == 0 { 0.0 } else { (screens.len() as f64 / traj.screen_count as f64).min(1.0) };
    s[4] = if traj.final_screen_flag { 1.0 } else { 0.0 };
    s[5] = if traj.actions().any(|a| a.kind() == ActionKind::Input) { 1.0 } else { 0.0 };
    s[6] = if answer.is_some() { 1.0 } else { 0.0 };
    s[7] = 1.0;
    Ok(s)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(u: &Summary, s: &Summary) -> f64 {
    u.iter().zip(s).map(|(a, b)| a * b).sum()
}

pub fn orm_score(p: &OrmParams, s: &Summary) -> f64 {
    sigmoid(dot(&p.u, s))
}

/// Thresholded reward-model outcome.
pub fn orm_label(p: &OrmParams, s: &Summary) -> Outcome {
    if orm_score(p, s) >= 0.5 {
        Outcome::Success
    } else {
        Outcome::Fail
    }
}

/// Mean logistic loss.
pub fn orm_loss(u: &Summary, data: &[(Summary, bool)]) -> f64 {
    let n = data.len() as f64;
    data.iter()
        .map(|(s, y)| {
            let z = dot(u, s);
            // log(1 + e^z) − y·z, computed stably
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - if *y { z } else { 0.0 }
        })
        .sum::<f64>()
        / n
}

pub fn orm_grad(u: &Summary, data: &[(Summary, bool)]) -> Summary {
    let n = data.len() as f64;
    let mut g = [0.0; G];
    for (s, y) in data {
        let r = sigmoid(dot(u, s)) - if *y { 1.0 } else { 0.0 };
        for (gi, si) in g.iter_mut().zip(s) {
            *gi += r * si / n;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrmFit {
    pub params: OrmParams,
    /// Loss before each epoch, then after the last one.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent from `u = 0`.
pub fn orm_train(data: &[(Summary, bool)], lr: f64, epochs: usize) -> Result<OrmFit, RewardError> {
    if data.is_empty() {
        return Err(RewardError::EmptyData);
    }
    let positives = data.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == data.len() {
        let rate = (positives as f64 + 0.5) / (data.len() as f64 + 1.0);
        let mut u = [0.0; G];
        u[G - 1] = (rate / (1.0 - rate)).ln();
        return Err(RewardError::DegenerateData { fallback: OrmParams { u, trained_on: data.len() } });
    }
    let mut u = [0.0; G];
    let mut trace = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        trace.push(orm_loss(&u, data));
        let g = orm_grad(&u, data);
        for (ui, gi) in u.iter_mut().zip(g) {
            *ui -= lr * gi;
        }
    }
    trace.push(orm_loss(&u, data));
    Ok(OrmFit { params: OrmParams { u, trained_on: data.len() }, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_world, oracle_rollout};

    fn summary(flag: f64, len: f64) -> Summary {
        [0.0, len, 0.0, 0.5, flag, 0.0, 0.0, 1.0]
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-12);
        assert_eq!(orm_score(&OrmParams::default(), &summary(1.0, 0.3)), 0.5);
    }

    #[test]
    fn separable_set_is_fit() {
        let data: Vec<_> = (0..20)
            .map(|i| {
                let y = i % 2 == 0;
                (summary(if y { 1.0 } else { 0.0 }, (i % 7) as f64 / 7.0), y)
            })
            .collect();
        let fit = orm_train(&data, 0.5, 500).unwrap();
        assert!(data.iter().all(|(s, y)| (orm_score(&fit.params, s) >= 0.5) == *y));
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = vec![(summary(1.0, 0.1), true), (summary(0.0, 0.2), true)];
        match orm_train(&data, 0.1, 10) {
            Err(RewardError::DegenerateData { fallback }) => assert!(orm_score(&fallback, &data[0].0) > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oracle_summary() {
        let (w, t) = generate_world(7, 3).unwrap();
        let traj = oracle_rollout(&w, &t).unwrap();
        let s = summarize(&traj).unwrap();
        assert_eq!(s[2], 0.0);
        assert_eq!(s[7], 1.0);
        assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(summarize(&traj).unwrap(), s);
        let mut open = traj.clone();
        open.finished = false;
        assert_eq!(summarize(&open), Err(RewardError::UnfinishedTrajectory));
    }
}
