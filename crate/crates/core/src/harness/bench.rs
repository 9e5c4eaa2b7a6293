//! Grounding benchmark over generated screens.

use serde::{Deserialize, Serialize};

use crate::dsl::GroundingQuery;
use crate::grounder::{ground, is_unambiguous, make_description, NoiseModel};
use crate::seed::stable_hash;
use crate::sim::{generate_world, ElementId, Observation, SimError, MAX_DIFFICULTY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundingCase {
    pub observation: Observation,
    pub target: ElementId,
    pub description: String,
}

/// `count` cases, each an unambiguous visible element with its canonical
/// description. Every case carries its own step index so noise draws are
/// independent across cases.
pub fn grounding_corpus(seed: u64, count: usize) -> Result<Vec<GroundingCase>, SimError> {
    let mut cases = Vec::with_capacity(count);
    let mut w = 0u64;
    while cases.len() < count {
        let d = 1 + (w % MAX_DIFFICULTY as u64) as u32;
        let (world, _) = generate_world(stable_hash(&[seed, 0x9d, w]), d)?;
        w += 1;
        for screen in world.screens.values() {
            let visible: Vec<_> = screen.elements.iter().filter(|e| e.bounds.intersects_window(0)).cloned().collect();
            let obs = Observation {
                screen_id: screen.id,
                visible_elements: visible,
                scroll_offset: 0,
                step_index: 0,
                scroll_extent: screen.scroll_extent,
                history_depth: 0,
            };
            for e in &obs.visible_elements {
                if cases.len() == count {
                    break;
                }
                if is_unambiguous(e, &obs) {
                    cases.push(GroundingCase {
                        observation: Observation { step_index: cases.len() as u32, ..obs.clone() },
                        target: e.id,
                        description: make_description(e, &obs),
                    });
                }
            }
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundBenchReport {
    pub epsilon: f64,
    pub queries: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Queries with at least two candidates on screen.
    pub multi_candidate: usize,
    pub runner_up: usize,
    pub runner_up_rate: f64,
    pub errors: usize,
}

pub fn ground_bench(cases: &[GroundingCase], noise: &NoiseModel) -> GroundBenchReport {
    let mut r = GroundBenchReport { epsilon: noise.epsilon, queries: cases.len(), ..Default::default() };
    for c in cases {
        let Ok(q) = GroundingQuery::new(c.description.clone()) else {
            r.errors += 1;
            continue;
        };
        match ground(&q, &c.observation, noise) {
            Ok(g) => {
                if g.element_id == c.target {
                    r.correct += 1;
                }
                if g.ranked.len() >= 2 {
                    r.multi_candidate += 1;
                    if g.element_id == g.ranked[1].0 {
                        r.runner_up += 1;
                    }
                }
            }
            Err(_) => r.errors += 1,
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    r.accuracy = frac(r.correct, r.queries);
    r.runner_up_rate = frac(r.runner_up, r.multi_candidate);
    r
}
