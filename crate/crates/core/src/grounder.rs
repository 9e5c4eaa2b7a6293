//! Description-to-element resolution over an observation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{GroundingQuery, VIEWPORT};
use crate::seed::{hash_str, stable_hash, unit_interval};
use crate::sim::{Bounds, Element, ElementId, Observation, Role};
use crate::text::{content_tokens, jaccard, tokens};

/// Minimum best score for a description to count as groundable.
pub const THRESHOLD: f64 = 0.2;
const W_LABEL: f64 = 0.6;
const W_ROLE: f64 = 0.2;
const W_SPATIAL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundError {
    #[error("observation has no visible elements")]
    NoCandidates,
    #[error("best score {best:.3} is below the grounding threshold")]
    BelowThreshold { best: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoiseModel {
    pub epsilon: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub const EXACT: NoiseModel = NoiseModel { epsilon: 0.0, rng_seed: 0 };

    pub fn new(epsilon: f64, rng_seed: u64) -> Self {
        Self { epsilon: epsilon.clamp(0.0, 1.0), rng_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundingResult {
    pub element_id: ElementId,
    pub coordinates: (u32, u32),
    pub score: f64,
    /// Every visible element, by score descending then id ascending.
    pub ranked: Vec<(ElementId, f64)>,
}

/// One cell of the 3x3 viewport grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    TopLeft,
    Top,
    TopRight,
    Left,
    Center,
    Right,
    BottomLeft,
    Bottom,
    BottomRight,
}

impl Region {
    const GRID: [[Region; 3]; 3] = [
        [Region::TopLeft, Region::Top, Region::TopRight],
        [Region::Left, Region::Center, Region::Right],
        [Region::BottomLeft, Region::Bottom, Region::BottomRight],
    ];

    /// Region containing a viewport point.
    pub fn of_point(x: u32, y: u32) -> Region {
        let cell = |v: u32| ((v.min(VIEWPORT - 1) * 3) / VIEWPORT) as usize;
        Region::GRID[cell(y)][cell(x)]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::TopLeft => "top left",
            Region::Top => "top",
            Region::TopRight => "top right",
            Region::Left => "left",
            Region::Center => "center",
            Region::Right => "right",
            Region::BottomLeft => "bottom left",
            Region::Bottom => "bottom",
            Region::BottomRight => "bottom right",
        }
    }

    /// Reads a spatial hint from free text, if one is present.
    pub fn from_hint(description: &str) -> Option<Region> {
        let toks = tokens(description);
        let has = |w: &str| toks.iter().any(|t| t == w);
        let row = if has("top") {
            Some(0)
        } else if has("bottom") {
            Some(2)
        } else {
            None
        };
        let col = if has("left") {
            Some(0)
        } else if has("right") {
            Some(2)
        } else {
            None
        };
        match (row, col) {
            (None, None) if has("center") => Some(Region::Center),
            (None, None) => None,
            (r, c) => Some(Region::GRID[r.unwrap_or(1)][c.unwrap_or(1)]),
        }
    }
}

/// Region of an element's visible center.
pub fn element_region(e: &Element, obs: &Observation) -> Region {
    let (x, y) = e.bounds.visible_center(obs.scroll_offset);
    Region::of_point(x, y)
}

/// `0.6·J + 0.2·R + 0.2·S`, in [0, 1].
pub fn score(description: &str, element: &Element, obs: &Observation) -> f64 {
    let j = jaccard(&content_tokens(&element.label), &content_tokens(description));
    let r = if tokens(description).iter().any(|t| t == element.role.as_str()) { 1.0 } else { 0.0 };
    let s = match Region::from_hint(description) {
        None => 1.0,
        Some(hint) if hint == element_region(element, obs) => 1.0,
        Some(_) => 0.0,
    };
    W_LABEL * j + W_ROLE * r + W_SPATIAL * s
}

/// Scores every visible element, sorted by (score desc, id asc).
pub fn rank(description: &str, obs: &Observation) -> Vec<(ElementId, f64)> {
    let mut ranked: Vec<_> = obs.visible_elements.iter().map(|e| (e.id, score(description, e, obs))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Deterministic uniform draw for one grounding call.
fn noise_draw(noise: &NoiseModel, description: &str, obs: &Observation) -> f64 {
    unit_interval(stable_hash(&[
        noise.rng_seed,
        hash_str(description),
        obs.screen_id as u64,
        obs.scroll_offset as u64,
        obs.step_index as u64,
    ]))
}

pub fn ground(q: &GroundingQuery, obs: &Observation, noise: &NoiseModel) -> Result<GroundingResult, GroundError> {
    let description = q.description();
    let ranked = rank(description, obs);
    let Some(&(best_id, best)) = ranked.first() else {
        return Err(GroundError::NoCandidates);
    };
    if best < THRESHOLD {
        return Err(GroundError::BelowThreshold { best });
    }
    let (element_id, score) =
        if ranked.len() >= 2 && noise.epsilon > 0.0 && noise_draw(noise, description, obs) < noise.epsilon {
            ranked[1]
        } else {
            (best_id, best)
        };
    let element = obs.element(element_id).expect("ranked ids come from the observation");
    Ok(GroundingResult { element_id, coordinates: element.bounds.visible_center(obs.scroll_offset), score, ranked })
}

/// Canonical description: `the '<label>' <role> on the <region>`.
pub fn make_description(e: &Element, obs: &Observation) -> String {
    format!("the '{}' {} on the {}", e.label, e.role.as_str(), element_region(e, obs).as_str())
}

/// True when no other visible element shares label tokens, role and region with `e`.
pub fn is_unambiguous(e: &Element, obs: &Observation) -> bool {
    let key = (content_tokens(&e.label), e.role, element_region(e, obs));
    !obs.visible_elements
        .iter()
        .any(|o| o.id != e.id && (content_tokens(&o.label), o.role, element_region(o, obs)) == key)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SomMark {
    pub mark: u32,
    pub element_id: ElementId,
    pub role: Role,
    pub label: String,
    pub bounds: Bounds,
}

/// Set-of-marks listing: marks 1..N over visible elements in id order.
pub fn enumerate_som(obs: &Observation) -> Vec<SomMark> {
    let mut visible: Vec<&Element> = obs.visible_elements.iter().collect();
    visible.sort_by_key(|e| e.id);
    visible
        .into_iter()
        .enumerate()
        .map(|(i, e)| SomMark {
            mark: i as u32 + 1,
            element_id: e.id,
            role: e.role,
            label: e.label.clone(),
            bounds: e.bounds,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ElementState;

    fn el(id: u32, role: Role, label: &str, cx: u32, cy: u32) -> Element {
        Element {
            id,
            role,
            label: label.into(),
            bounds: Bounds { x: cx - 40, y: cy - 20, w: 80, h: 40 },
            state: ElementState::default(),
        }
    }

    fn obs(elements: Vec<Element>) -> Observation {
        Observation {
            screen_id: 0,
            visible_elements: elements,
            scroll_offset: 0,
            step_index: 0,
            scroll_extent: 0,
            history_depth: 0,
        }
    }

    fn q(s: &str) -> GroundingQuery {
        GroundingQuery::new(s).unwrap()
    }

    #[test]
    fn submit_button_example() {
        let submit = el(3, Role::Button, "Submit", 823, 684);
        let o = obs(vec![el(1, Role::Label, "Reset", 100, 100), submit.clone()]);
        let d = make_description(&submit, &o);
        assert_eq!(d, "the 'Submit' button on the bottom right");
        assert_eq!(score(&d, &submit, &o), 1.0);
        assert_eq!(score(&d, &o.visible_elements[0], &o), 0.0);
        let r = ground(&q(&d), &o, &NoiseModel::EXACT).unwrap();
        assert_eq!(r.element_id, 3);
        assert_eq!(r.coordinates, (823, 684));
    }

    #[test]
    fn partial_label_without_hint() {
        let e = el(0, Role::Button, "Submit order", 500, 500);
        let o = obs(vec![e.clone()]);
        assert!((score("Submit", &e, &o) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn center_region() {
        assert_eq!(Region::of_point(500, 500), Region::Center);
        assert_eq!(Region::from_hint("on the center"), Some(Region::Center));
        assert_eq!(Region::from_hint("top"), Some(Region::Top));
        assert_eq!(Region::from_hint("bottom right"), Some(Region::BottomRight));
        assert_eq!(Region::from_hint("submit"), None);
    }

    #[test]
    fn ties_break_to_lower_id() {
        let o = obs(vec![el(4, Role::Button, "OK", 200, 200), el(2, Role::Button, "OK", 800, 800)]);
        let r = ground(&q("OK button"), &o, &NoiseModel::EXACT).unwrap();
        assert_eq!(r.element_id, 2);
        assert_eq!(r.ranked, vec![(2, 1.0), (4, 1.0)]);
    }

    #[test]
    fn errors() {
        assert_eq!(ground(&q("anything"), &obs(vec![]), &NoiseModel::EXACT), Err(GroundError::NoCandidates));
        let o = obs(vec![el(0, Role::Label, "Reset", 100, 100)]);
        assert!(matches!(
            ground(&q("the 'Pay' button on the bottom right"), &o, &NoiseModel::EXACT),
            Err(GroundError::BelowThreshold { .. })
        ));
    }

    #[test]
    fn single_candidate_ignores_noise() {
        let e = el(0, Role::Link, "Help", 500, 500);
        let o = obs(vec![e.clone()]);
        let r = ground(&q("the 'Help' link"), &o, &NoiseModel::new(1.0, 1)).unwrap();
        assert_eq!(r.element_id, 0);
    }

    #[test]
    fn full_noise_returns_runner_up() {
        let o = obs(vec![el(0, Role::Link, "Help", 500, 500), el(1, Role::Link, "Help center", 100, 100)]);
        let r = ground(&q("the 'Help' link"), &o, &NoiseModel::new(1.0, 9)).unwrap();
        assert_eq!(r.element_id, 1);
    }

    #[test]
    fn som_marks_follow_ids() {
        let o = obs(vec![
            el(5, Role::Link, "a", 100, 100),
            el(2, Role::Button, "b", 200, 200),
            el(9, Role::Label, "c", 300, 300),
        ]);
        let marks = enumerate_som(&o);
        assert_eq!(marks.iter().map(|m| m.mark).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(marks.iter().map(|m| m.element_id).collect::<Vec<_>>(), vec![2, 5, 9]);
        assert!(enumerate_som(&obs(vec![])).is_empty());
    }
}
