use std::collections::BTreeMap;

use deskagent_core::curriculum::Pool;
use deskagent_core::harness::{
    aggregate, outcomes_from_logs, pass_at_2_with_logs, report_emit, run_suite, run_suite_with_logs, MetricsReport,
    RunConfig,
};
use deskagent_core::planner::Planner;
use deskagent_core::sim::Outcome;
use deskagent_core::trajectory::StepLogRow;
use proptest::prelude::*;

fn suite(n: u64, offset: u64) -> Vec<deskagent_core::curriculum::InstructionRecord> {
    Pool::from_seeds((0..n).map(|s| (s + offset, (s % 6 + 1) as u32))).unwrap().records().to_vec()
}

fn noisy(n: u64, master: u64, workers: usize, p: f64) -> RunConfig {
    let mut cfg = RunConfig::new(suite(n, master), Planner::ScriptedNoisy { p });
    cfg.master_seed = master;
    cfg.workers = workers;
    cfg
}

fn check_rates(m: &MetricsReport) {
    let total = m.sr + m.partial_rate + m.fail_rate;
    assert!((total - 1.0).abs() < 1e-12);
    assert!(m.sr <= m.pass_at2 + 1e-12 && m.pass_at2 <= 1.0);
    let rows: usize = m.per_difficulty.values().map(|r| r.tasks).sum();
    assert_eq!(rows, m.tasks);
}

#[test]
fn worker_count_does_not_change_results() {
    for master in [1, 2, 3] {
        let serial = pass_at_2_with_logs(&noisy(40, master, 1, 0.4)).unwrap();
        let parallel = pass_at_2_with_logs(&noisy(40, master, 8, 0.4)).unwrap();
        assert_eq!(serde_json::to_string(&serial.0).unwrap(), serde_json::to_string(&parallel.0).unwrap());
        assert_eq!(serial.1, parallel.1);
        assert_eq!(serial.2, parallel.2);
        check_rates(&serial.0);
    }
}

#[test]
fn logs_agree_with_judgments() {
    for (master, p) in [(4, 0.2), (5, 0.5), (6, 0.8)] {
        let cfg = noisy(50, master, 4, p);
        let (report, trajs) = run_suite_with_logs(&cfg).unwrap();
        let rows: Vec<StepLogRow> = trajs.iter().flat_map(|t| t.log_rows()).collect();
        let counts: BTreeMap<String, u32> = trajs.iter().map(|t| (t.task_id.clone(), t.milestone_count)).collect();
        let from_logs = outcomes_from_logs(&rows, &counts);
        let mut judged: BTreeMap<Outcome, usize> = BTreeMap::new();
        for r in &report.results {
            *judged.entry(r.outcome).or_insert(0) += 1;
        }
        assert_eq!(from_logs, judged, "master {master}");
    }
}

#[test]
fn emitted_reports_round_trip() {
    let report = pass_at_2_with_logs(&noisy(30, 8, 2, 0.5)).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    let paths = report_emit(&report, dir.path()).unwrap();
    let json = std::fs::read_to_string(&paths[0]).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&report).unwrap());

    let mut reader = csv::Reader::from_path(&paths[1]).unwrap();
    assert_eq!(reader.records().count(), report.episodes);

    let again = tempfile::tempdir().unwrap();
    for (a, b) in paths.iter().zip(report_emit(&back, again.path()).unwrap()) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

#[test]
fn oracle_suite_is_fully_solved() {
    let mut cfg = RunConfig::new(suite(25, 100), Planner::Oracle);
    cfg.workers = 3;
    let m = run_suite(&cfg).unwrap();
    assert_eq!(m.sr, 1.0);
    assert_eq!(m.fail_rate, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregate_rates_are_consistent(outcomes in prop::collection::vec((0u8..3, 0u8..3, 1u32..8), 0..40)) {
        let label = |o: u8| [Outcome::Success, Outcome::Partial, Outcome::Fail][o as usize];
        let mut results = Vec::new();
        for (i, (first, second, d)) in outcomes.iter().enumerate() {
            let first = label(*first);
            let base = deskagent_core::harness::EpisodeResult {
                task_id: format!("t{i:03}"),
                attempt: 1,
                outcome: first,
                steps: 1,
                total_reward: 0.0,
                seed_used: i as u64,
                difficulty: *d,
                milestone_count: *d,
                transport_error: false,
            };
            if first != Outcome::Success {
                results.push(deskagent_core::harness::EpisodeResult { attempt: 2, outcome: label(*second), ..base.clone() });
            }
            results.push(base);
        }
        let m = aggregate("prop", results);
        prop_assert_eq!(m.tasks, outcomes.len());
        if m.tasks > 0 {
            check_rates(&m);
            let solved = outcomes.iter().filter(|(a, b, _)| *a == 0 || *b == 0).count();
            prop_assert!((m.pass_at2 - solved as f64 / m.tasks as f64).abs() < 1e-12);
        }
        prop_assert!(m.results.windows(2).all(|w| (&w[0].task_id, w[0].attempt) < (&w[1].task_id, w[1].attempt)));
    }
}
