use deskagent_core::dsl::{Action, ScrollDirection, TargetSpec};
use deskagent_core::planner::payload;
use deskagent_core::sim::{
    generate_world, judge_outcome, max_steps_for, oracle_rollout, perturb_layout, Env, Observation, Outcome, Role,
    MAX_DIFFICULTY,
};
use proptest::prelude::*;
use rand::Rng;

/// Every grounded action available in `obs`: a click on each visible element,
/// the payload typed into each textbox, both scrolls, Back and Finish.
fn grounded_moves(obs: &Observation, instruction: &str) -> Vec<Action> {
    let text = payload(instruction);
    let mut moves = Vec::new();
    for e in &obs.visible_elements {
        moves.push(Action::Click(TargetSpec::ElementRef(e.id)));
        if e.role == Role::Textbox {
            moves.push(Action::Input { target: TargetSpec::ElementRef(e.id), text: text.clone() });
        }
    }
    moves.push(Action::Scroll { direction: ScrollDirection::Down, amount: 1 });
    moves.push(Action::Scroll { direction: ScrollDirection::Up, amount: 1 });
    moves.push(Action::Back);
    moves.push(Action::Finish { answer: None });
    moves
}

/// True if some action sequence of length `depth` or less reaches Success.
fn solvable_within(env: &Env, depth: usize) -> bool {
    if judge_outcome(env.judge(), env.task().milestones.len()) == Outcome::Success {
        return true;
    }
    if depth == 0 || env.is_done() {
        return false;
    }
    let obs = env.observation();
    grounded_moves(&obs, &env.task().instruction).into_iter().any(|a| {
        let mut next = env.clone();
        next.step(&a).is_ok() && solvable_within(&next, depth - 1)
    })
}

#[test]
fn oracle_is_shortest_for_small_tasks() {
    for seed in 0..25u64 {
        for d in 1..=3u32 {
            let (world, task) = generate_world(seed, d).unwrap();
            assert_eq!(task.oracle.len(), d as usize);
            let mut env = Env::new(world, task).unwrap();
            env.reset();
            assert!(!solvable_within(&env, d as usize - 1), "seed {seed} d {d} solved in fewer than {d} steps");
            assert!(solvable_within(&env, d as usize), "seed {seed} d {d} not solvable by brute force");
        }
    }
}

#[test]
fn oracle_succeeds_across_difficulties() {
    for d in 1..=MAX_DIFFICULTY {
        for seed in 0..20u64 {
            let (world, task) = generate_world(1000 + seed, d).unwrap();
            let traj = oracle_rollout(&world, &task).unwrap();
            assert_eq!(traj.outcome, Outcome::Success);
            assert!(traj.len() as u32 <= max_steps_for(d));
            assert!(!world.reachable_screens().is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn milestones_never_unlatch(seed in any::<u64>(), d in 1u32..=8, walk in any::<u64>()) {
        let (world, task) = generate_world(seed, d).unwrap();
        let mut env = Env::new(world, task).unwrap();
        let mut obs = env.reset();
        let mut rng = deskagent_core::seed::rng_from(&[walk]);
        let mut bits = 0u64;
        while !env.is_done() {
            let moves = grounded_moves(&obs, &env.task().instruction);
            let a = &moves[rng.gen_range(0..moves.len())];
            let r = env.step(a).unwrap();
            prop_assert_eq!(r.judge.satisfied & bits, bits, "a satisfied milestone was lost");
            bits = r.judge.satisfied;
            obs = r.observation;
        }
        prop_assert!(obs.step_index <= env.max_steps());
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), d in 1u32..=MAX_DIFFICULTY) {
        prop_assert_eq!(generate_world(seed, d).unwrap(), generate_world(seed, d).unwrap());
    }

    #[test]
    fn perturbation_keeps_elements_in_bounds(seed in any::<u64>(), d in 1u32..=6, p in any::<u64>()) {
        let (world, _) = generate_world(seed, d).unwrap();
        let moved = perturb_layout(&world, p);
        for (id, screen) in &moved.screens {
            let before = &world.screens[id];
            prop_assert_eq!(screen.elements.len(), before.elements.len());
            for (a, b) in screen.elements.iter().zip(&before.elements) {
                prop_assert!((a.bounds.x as i64 - b.bounds.x as i64).abs() <= 120);
                prop_assert!((a.bounds.y as i64 - b.bounds.y as i64).abs() <= 120);
                prop_assert!(a.bounds.x + a.bounds.w <= 1000);
            }
        }
    }
}

#[test]
fn out_of_range_difficulty_is_an_error() {
    assert!(generate_world(1, 0).is_err());
    assert!(generate_world(1, MAX_DIFFICULTY + 1).is_err());
}
