use deskagent_core::curriculum::{
    critic_filter, evolve, harvest_failures, mutate, schedule_iteration, CurriculumConfig, Direction, Pool, Provenance,
};
use deskagent_core::planner::F;
use deskagent_core::rl::CriticParams;
use deskagent_core::seed::rng_from;
use deskagent_core::sim::{oracle_rollout, Outcome};
use proptest::prelude::*;
use rand::Rng;

fn seeds(n: u64, max_d: u32) -> Pool {
    Pool::from_seeds((0..n).map(|s| (s, 1 + (s as u32 % max_d)))).unwrap()
}

fn random_critic(seed: u64) -> CriticParams {
    let mut rng = rng_from(&[seed, 0xc1]);
    CriticParams { v: std::array::from_fn(|_| rng.gen_range(-0.5..0.5)) }
}

#[test]
fn mutated_records_stay_solvable() {
    let pool = seeds(200, 11);
    let mut rng = rng_from(&[9]);
    let mut frontier: Vec<_> = pool.records().to_vec();
    let mut checked = 0;
    while checked < 1000 {
        let parent = frontier[rng.gen_range(0..frontier.len())].clone();
        let direction = if rng.gen_bool(0.5) { Direction::Complicate } else { Direction::Simplify };
        let Ok(child) = mutate(&parent, direction, &mut rng) else { continue };
        assert_eq!(child.difficulty.abs_diff(parent.difficulty), 1);
        assert!(matches!(&child.provenance, Provenance::MutatedFrom { parent: p, .. } if *p == parent.id));
        let (world, task) = child.regenerate().unwrap();
        let traj = oracle_rollout(&world, &task).unwrap();
        assert_eq!(traj.outcome, Outcome::Success, "{}", child.instruction);
        assert_eq!(traj.len() as u32, child.difficulty);
        frontier.push(child);
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn widening_the_band_never_drops_candidates(
        critic_seed in any::<u64>(),
        lo in -1.0f64..1.0,
        width in 0.0f64..1.0,
        grow_lo in 0.0f64..0.5,
        grow_hi in 0.0f64..0.5,
    ) {
        let candidates = seeds(24, 8).records().to_vec();
        let critic = random_critic(critic_seed);
        let narrow = critic_filter(&candidates, &critic, (lo, lo + width)).unwrap();
        let wide = critic_filter(&candidates, &critic, (lo - grow_lo, lo + width + grow_hi)).unwrap();
        prop_assert!(narrow.iter().all(|r| wide.iter().any(|w| w.id == r.id)));
    }

    #[test]
    fn scheduling_respects_cap_and_budget(
        n in 5u64..40,
        parents in 0usize..20,
        cap in 5usize..60,
        budget in 1usize..30,
        mix in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut pool = seeds(n, 6);
        let mut rng = rng_from(&[seed]);
        let records = pool.records().to_vec();
        for r in records.iter().cycle().take(parents) {
            if let Ok(c) = mutate(r, Direction::Complicate, &mut rng) {
                if !pool.contains_template(&c.template) {
                    pool.admit(c);
                }
            }
        }
        let cfg = CurriculumConfig { pool_cap: cap, mix_ratio: mix, ..CurriculumConfig::default() };
        let picked = schedule_iteration(&mut pool, &cfg, budget, &mut rng).unwrap();
        let seed_count = pool.records().iter().filter(|r| r.is_seed()).count();
        prop_assert!(pool.len() <= cap.max(seed_count));
        prop_assert!(picked.len() <= budget);
        let evolved = pool.len() - seed_count;
        let from_evolved = evolved.min((mix * budget as f64).round() as usize);
        prop_assert_eq!(picked.len(), from_evolved + seed_count.min(budget - from_evolved));
        prop_assert!(picked.iter().all(|r| pool.get(&r.id).is_some()));
    }

    #[test]
    fn evolution_admits_solvable_novel_children(seed in any::<u64>(), failing in 1usize..8) {
        let mut pool = seeds(12, 6);
        let ids: Vec<String> = pool.records().iter().map(|r| r.id.clone()).collect();
        let results: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i < failing { Outcome::Fail } else { Outcome::Success }))
            .collect();
        let failed = harvest_failures(&results, &mut pool).unwrap();
        prop_assert_eq!(failed.len(), failing);
        let before = pool.len();
        let cfg = CurriculumConfig { critic_filter: false, ..CurriculumConfig::default() };
        let admitted = evolve(&mut pool, &failed, &CriticParams::default(), &cfg, &mut rng_from(&[seed])).unwrap();
        prop_assert_eq!(pool.len(), before + admitted.len());
        for id in &admitted {
            let r = pool.get(id).unwrap();
            let (world, task) = r.regenerate().unwrap();
            prop_assert_eq!(oracle_rollout(&world, &task).unwrap().outcome, Outcome::Success);
        }
        let mut templates: Vec<_> = pool.records().iter().map(|r| serde_json::to_string(&r.template).unwrap()).collect();
        templates.sort();
        templates.dedup();
        prop_assert_eq!(templates.len(), pool.len());
    }
}

#[test]
fn critic_dimension_matches_features() {
    assert_eq!(CriticParams::default().v.len(), F);
}
