use deskagent_core::planner::{PolicyParams, F};
use deskagent_core::reward::{orm_grad, orm_loss, orm_train, G};
use deskagent_core::rl::{
    compute_returns, critic_loss_grad, critic_update, kl_divergence, policy_update_kl, samples_from, CriticParams,
    PolicyBatch, ReplayBuffer, RlError, StepSample,
};
use deskagent_core::seed::rng_from;
use deskagent_core::sim::{generate_world, oracle_rollout, Outcome};
use deskagent_core::trajectory::Trajectory;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn oracle_traj(seed: u64, d: u32) -> Trajectory {
    let (world, task) = generate_world(seed, d).unwrap();
    oracle_rollout(&world, &task).unwrap()
}

fn batch(seed: u64, n: usize) -> Vec<StepSample> {
    (0..n as u64).flat_map(|i| samples_from(&oracle_traj(seed + i, 1 + (i % 4) as u32), 0.9).unwrap()).collect()
}

fn random_vec<const N: usize>(rng: &mut ChaCha8Rng, scale: f64) -> [f64; N] {
    let mut v = [0.0; N];
    v.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    v
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

fn central_difference<const N: usize>(x: &[f64; N], f: impl Fn(&[f64; N]) -> f64) -> [f64; N] {
    let h = 1e-5;
    let mut g = [0.0; N];
    for j in 0..N {
        let (mut hi, mut lo) = (*x, *x);
        hi[j] += h;
        lo[j] -= h;
        g[j] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

fn distance(a: &PolicyParams, b: &PolicyParams) -> f64 {
    a.w.iter().zip(&b.w).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn policy_loss_gradient_with_kl_term() {
    let mut rng = rng_from(&[1]);
    for i in 0..100u64 {
        let samples = batch(100 * i, 3);
        let reference = PolicyParams { w: random_vec(&mut rng, 1.5), ..Default::default() };
        let critic = CriticParams { v: random_vec(&mut rng, 0.5) };
        let p =
            PolicyParams { w: random_vec(&mut rng, 1.5), temperature: rng.gen_range(0.5..2.0), ..Default::default() };
        let beta = rng.gen_range(0.0..2.0);
        let pb = PolicyBatch::new(&samples, &reference, &critic);
        let analytic = pb.grad(&p, beta);
        let fd = central_difference(&p.w, |w| pb.loss(&PolicyParams { w: *w, ..p.clone() }, beta));
        let err = relative_error(&fd, &analytic);
        assert!(err < 1e-5, "config {i}: relative error {err:e}");
    }
}

#[test]
fn critic_loss_gradient() {
    let mut rng = rng_from(&[2]);
    for i in 0..100u64 {
        let data: Vec<_> = batch(7 * i, 2).into_iter().map(|s| (s.psi, s.ret)).collect();
        let c = CriticParams { v: random_vec(&mut rng, 1.0) };
        let (_, analytic) = critic_loss_grad(&c, &data);
        let fd = central_difference(&c.v, |v| critic_loss_grad(&CriticParams { v: *v }, &data).0);
        assert!(relative_error(&fd, &analytic) < 1e-5, "config {i}");
    }
}

#[test]
fn orm_loss_gradient() {
    let mut rng = rng_from(&[3]);
    for i in 0..100 {
        let data: Vec<([f64; G], bool)> = (0..20)
            .map(|_| {
                let mut s: [f64; G] = random_vec(&mut rng, 1.0).map(f64::abs);
                s[G - 1] = 1.0;
                (s, rng.gen_bool(0.5))
            })
            .collect();
        let u: [f64; G] = random_vec(&mut rng, 2.0);
        let fd = central_difference(&u, |u| orm_loss(u, &data));
        assert!(relative_error(&fd, &orm_grad(&u, &data)) < 1e-5, "config {i}");
    }
}

#[test]
fn anchoring_grows_with_beta() {
    let samples = batch(5, 6);
    let mut rng = rng_from(&[4]);
    let reference = PolicyParams { w: random_vec(&mut rng, 1.0), ..Default::default() };
    let critic = CriticParams::default();
    let start =
        PolicyParams { w: std::array::from_fn(|j| reference.w[j] + rng.gen_range(-0.5..0.5)), ..reference.clone() };
    let betas = [0.01, 0.1, 1.0, 10.0];

    // one step from a displaced start
    let one: Vec<f64> = betas
        .iter()
        .map(|&b| distance(&policy_update_kl(&start, &reference, &critic, &samples, b, 0.05).unwrap().0, &reference))
        .collect();
    // thirty steps from the reference itself
    let many: Vec<f64> = betas
        .iter()
        .map(|&b| {
            let mut p = reference.clone();
            for _ in 0..30 {
                p = policy_update_kl(&p, &reference, &critic, &samples, b, 0.05).unwrap().0;
            }
            distance(&p, &reference)
        })
        .collect();
    for w in one.windows(2).chain(many.windows(2)) {
        assert!(w[1] <= w[0] + 1e-12, "{one:?} {many:?}");
    }
}

#[test]
fn updates_bump_version() {
    let samples = batch(11, 2);
    let p = PolicyParams::default();
    let (q, _) = policy_update_kl(&p, &p, &CriticParams::default(), &samples, 0.1, 0.05).unwrap();
    assert!(q.version > p.version);
    assert!(matches!(policy_update_kl(&p, &p, &CriticParams::default(), &[], 0.1, 0.05), Err(RlError::EmptyBatch)));
}

#[test]
fn critic_loss_decreases_on_a_fixed_batch() {
    let data: Vec<_> = batch(17, 10).into_iter().map(|s| (s.psi, s.ret)).collect();
    let mut c = CriticParams::default();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let (next, loss) = critic_update(&c, &data, 0.1).unwrap();
        assert!(loss <= last + 1e-12);
        last = loss;
        c = next;
    }
}

#[test]
fn orm_trace_is_non_increasing() {
    let mut rng = rng_from(&[6]);
    let data: Vec<([f64; G], bool)> = (0..100)
        .map(|_| {
            let mut s = [0.0; G];
            s.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
            s[G - 1] = 1.0;
            (s, s[4] + 0.3 * rng.gen_range(-1.0..1.0) > 0.5)
        })
        .collect();
    let fit = orm_train(&data, 0.1, 300).unwrap();
    for w in fit.loss_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

fn distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

#[test]
fn kl_is_a_divergence() {
    let mut rng = rng_from(&[7]);
    for _ in 0..1000 {
        let n = rng.gen_range(2..12);
        let (p, q) = (distribution(&mut rng, n), distribution(&mut rng, n));
        assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
    }
    assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn buffer_holds_only_successes(outcomes in prop::collection::vec(0u8..3, 0..60), cap in 0usize..10) {
        let base = oracle_traj(1, 1);
        let mut buf = ReplayBuffer::new(cap);
        for o in outcomes {
            let mut t = base.clone();
            t.outcome = [Outcome::Success, Outcome::Partial, Outcome::Fail][o as usize];
            let stored = buf.push(t);
            prop_assert_eq!(stored, o == 0 && cap > 0);
            prop_assert!(buf.len() <= cap);
            prop_assert!(buf.iter().all(|t| t.outcome == Outcome::Success));
        }
    }

    #[test]
    fn returns_follow_the_recursion(rewards in prop::collection::vec(-1.0f64..1.0, 0..30), gamma in 0.01f64..=1.0) {
        let g = compute_returns(&rewards, gamma);
        prop_assert_eq!(g.len(), rewards.len());
        for t in 0..rewards.len() {
            let next = g.get(t + 1).copied().unwrap_or(0.0);
            prop_assert!((g[t] - (rewards[t] + gamma * next)).abs() < 1e-12);
        }
    }
}

#[test]
fn features_are_sized_consistently() {
    assert_eq!(batch(1, 1)[0].psi.len(), F);
}
