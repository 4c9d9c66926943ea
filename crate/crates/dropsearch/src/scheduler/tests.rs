use std::collections::BTreeSet;

use super::*;
use crate::controller::{Controller, ControllerConfig};
use crate::reward::{EvalResult, SyntheticReward};
use crate::space::{GenomeLayout, SiteLayout};

fn two_site_layout() -> GenomeLayout {
    GenomeLayout::transformer(&SiteLayout::subset(&["ffn_inner", "ffn_out"]).unwrap())
}

fn controller(batch_m: usize, lr: f64) -> Controller {
    let config = ControllerConfig { lr, batch_m, ..ControllerConfig::default() };
    Controller::factorized(two_site_layout(), config).unwrap()
}

fn synthetic() -> SyntheticReward {
    SyntheticReward::new(two_site_layout(), 7, 1.0).unwrap()
}

fn config(capacity: usize, batch_m: usize, budget: u64, seed: u64) -> SearchConfig {
    SearchConfig { capacity, batch_m, budget, seed }
}

/// Fails deterministically on a fixed slice of per-job seeds.
struct FlakyReward {
    inner: SyntheticReward,
    modulus: u64,
}

impl RewardFn for FlakyReward {
    fn name(&self) -> &'static str {
        "flaky"
    }

    fn layout(&self) -> &GenomeLayout {
        self.inner.layout()
    }

    fn evaluate(&self, genome: &PatternGenome, seed: u64) -> crate::error::Result<EvalResult> {
        if seed % self.modulus == 0 {
            return Err(Error::EvalFailed(format!("planted failure for seed {seed}")));
        }
        self.inner.evaluate(genome, seed)
    }
}

struct PanickyReward {
    inner: SyntheticReward,
}

impl RewardFn for PanickyReward {
    fn name(&self) -> &'static str {
        "panicky"
    }

    fn layout(&self) -> &GenomeLayout {
        self.inner.layout()
    }

    fn evaluate(&self, genome: &PatternGenome, seed: u64) -> crate::error::Result<EvalResult> {
        if seed % 3 == 0 {
            panic!("planted panic for seed {seed}");
        }
        self.inner.evaluate(genome, seed)
    }
}

struct AlwaysFails(GenomeLayout);

impl RewardFn for AlwaysFails {
    fn name(&self) -> &'static str {
        "always-fails"
    }

    fn layout(&self) -> &GenomeLayout {
        &self.0
    }

    fn evaluate(&self, _: &PatternGenome, seed: u64) -> crate::error::Result<EvalResult> {
        Err(Error::EvalFailed(format!("down for seed {seed}")))
    }
}

// ── queue mechanics ──────────────────────────────────────────────────────────

#[test]
fn fill_tops_up_to_capacity_then_noops() {
    let mut core = SearchCore::new(controller(2, 0.01), config(8, 2, 32, 1)).unwrap();
    assert_eq!(core.fill_queue().unwrap(), (0..8).collect::<Vec<u64>>());
    assert_eq!(core.fill_queue().unwrap().len(), 0, "full queue refuses more");
}

#[test]
fn fill_clamps_to_remaining_budget() {
    let mut core = SearchCore::new(controller(2, 0.01), config(8, 2, 3, 1)).unwrap();
    assert_eq!(core.fill_queue().unwrap().len(), 3, "only the budget remainder spawns");
}

#[test]
fn completion_of_unknown_job_is_rejected() {
    let mut core = SearchCore::new(controller(2, 0.01), config(4, 2, 8, 1)).unwrap();
    core.fill_queue().unwrap();
    let err = core.on_complete(99, 0.0, Ok(EvalResult::bare(0.5))).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "unknown job: {err}");
}

#[test]
fn completion_of_unstarted_job_is_rejected() {
    let mut core = SearchCore::new(controller(2, 0.01), config(4, 2, 8, 1)).unwrap();
    core.fill_queue().unwrap();
    assert_eq!(core.state(0), Some(JobState::Queued));
    let err = core.on_complete(0, 0.0, Ok(EvalResult::bare(0.5))).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "queued job cannot complete: {err}");
    assert_eq!(core.state(0), Some(JobState::Queued), "state unchanged after rejection");
}

#[test]
fn duplicate_completion_is_rejected_and_state_preserved() {
    let mut core = SearchCore::new(controller(2, 0.01), config(4, 2, 8, 1)).unwrap();
    core.fill_queue().unwrap();
    let (id, _) = core.start_next().unwrap();
    core.on_complete(id, 1.0, Ok(EvalResult::bare(0.5))).unwrap();
    let before = core.q_finished.len();
    let err = core.on_complete(id, 2.0, Ok(EvalResult::bare(0.9))).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "duplicate: {err}");
    assert_eq!(core.q_finished.len(), before, "duplicate left the finished queue alone");
}

#[test]
fn batch_forms_at_exactly_m_with_original_logp() {
    let mut core = SearchCore::new(controller(3, 0.05), config(6, 3, 6, 3)).unwrap();
    core.fill_queue().unwrap();
    let sampled_logp: Vec<f64> =
        core.q_unfinished.values().map(|j| j.record.logp_old).collect();
    for i in 0..3 {
        let (id, _) = core.start_next().unwrap();
        let updated = core.on_complete(id, i as f64, Ok(EvalResult::bare(0.1 * i as f64))).unwrap();
        assert_eq!(updated, i == 2, "update fires exactly when the m-th record lands");
    }
    assert_eq!(core.controller.version(), 1);
    assert_eq!(core.records.len(), 3);
    for (i, r) in core.records.iter().enumerate() {
        assert_eq!(r.status, JobStatus::Ok);
        assert_eq!(r.logp_old, sampled_logp[i], "update left the recorded logp alone");
        assert_eq!(r.staleness, Some(0), "first batch sampled at the live version");
        assert_eq!(r.update, Some(1));
    }
    // remaining three jobs were sampled at version 0 but update at version 1
    for _ in 0..3 {
        let (id, _) = core.start_next().unwrap();
        core.on_complete(id, 9.0, Ok(EvalResult::bare(0.5))).unwrap();
    }
    assert!(core.records[3..].iter().all(|r| r.staleness == Some(1)));
}

#[test]
fn mismatched_controller_batch_is_a_config_error() {
    let err = SearchCore::new(controller(4, 0.01), config(8, 2, 8, 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn config_validation_rejects_degenerate_shapes() {
    assert!(config(1, 2, 8, 0).validate().is_err(), "capacity below batch");
    assert!(config(4, 0, 8, 0).validate().is_err(), "zero batch");
    assert!(config(4, 2, 1, 0).validate().is_err(), "budget below one batch");
    assert!(config(4, 2, 8, 0).validate().is_ok());
}

// ── availability traces ──────────────────────────────────────────────────────

#[test]
fn trace_validation_and_lookup() {
    assert!(AvailabilityTrace::new(vec![]).is_err(), "empty");
    assert!(AvailabilityTrace::new(vec![(1.0, 2)]).is_err(), "must start at zero");
    assert!(AvailabilityTrace::new(vec![(0.0, 2), (0.0, 3)]).is_err(), "times must increase");
    assert!(AvailabilityTrace::new(vec![(0.0, 2), (5.0, 0)]).is_err(), "final segment idle");
    let tr = AvailabilityTrace::new(vec![(0.0, 2), (5.0, 0), (9.0, 3)]).unwrap();
    assert_eq!(tr.workers_at(0.0), 2);
    assert_eq!(tr.workers_at(4.999), 2);
    assert_eq!(tr.workers_at(5.0), 0);
    assert_eq!(tr.workers_at(100.0), 3);
    assert_eq!(tr.next_change_after(0.0), Some(5.0));
    assert_eq!(tr.next_change_after(5.0), Some(9.0));
    assert_eq!(tr.next_change_after(9.0), None);
}

// ── synchronous reference equivalence ────────────────────────────────────────

/// The plain one-at-a-time loop the scheduler must collapse to at C = M = 1.
fn reference_sync(mut ctl: Controller, cfg: &SearchConfig, reward: &dyn RewardFn) -> (Controller, Vec<f64>) {
    let mut rng = sample_rng(cfg.seed);
    let mut perfs = Vec::new();
    for job_id in 0..cfg.budget {
        let rec = ctl.sample_record(&mut rng).unwrap();
        let perf = reward.evaluate(&rec.genome, eval_seed(cfg.seed, job_id)).unwrap().perf;
        perfs.push(perf);
        ctl.reinforce_update(&[(rec, perf)]).unwrap();
    }
    (ctl, perfs)
}

#[test]
fn single_worker_sim_is_bitwise_the_synchronous_loop() {
    let cfg = config(1, 1, 24, 11);
    let reward = synthetic();
    let (ref_ctl, ref_perfs) = reference_sync(controller(1, 0.05), &cfg, &reward);
    let trace = AvailabilityTrace::constant(1).unwrap();
    let out = run_search_sim(controller(1, 0.05), cfg, &reward, &trace).unwrap();
    assert_eq!(
        serde_json::to_string(&out.controller).unwrap(),
        serde_json::to_string(&ref_ctl).unwrap(),
        "final parameters, optimizer and baseline must match bit for bit"
    );
    let perfs: Vec<f64> = out.log.records.iter().map(|r| r.perf.unwrap()).collect();
    assert_eq!(perfs, ref_perfs);
    assert!(out.log.records.iter().all(|r| r.staleness == Some(0)), "synchronous ⇒ never stale");
    assert_eq!(out.updates, 24);
}

#[test]
fn single_worker_live_controller_matches_reference() {
    let cfg = config(1, 1, 16, 13);
    let reward = synthetic();
    let (ref_ctl, _) = reference_sync(controller(1, 0.05), &cfg, &reward);
    let out = run_search_live(controller(1, 0.05), cfg, &reward, 1).unwrap();
    assert_eq!(
        serde_json::to_string(&out.controller).unwrap(),
        serde_json::to_string(&ref_ctl).unwrap()
    );
}

// ── simulated trace runs ─────────────────────────────────────────────────────

#[test]
fn sim_run_is_bit_reproducible() {
    let trace = AvailabilityTrace::new(vec![(0.0, 2), (4.0, 1), (9.0, 3)]).unwrap();
    let cfg = config(12, 3, 27, 21);
    let reward = synthetic();
    let a = run_search_sim(controller(3, 0.02), cfg.clone(), &reward, &trace).unwrap();
    let b = run_search_sim(controller(3, 0.02), cfg, &reward, &trace).unwrap();
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    assert_eq!(
        serde_json::to_string(&a.controller).unwrap(),
        serde_json::to_string(&b.controller).unwrap()
    );
}

#[test]
fn sim_accounting_balances_exactly() {
    let trace = AvailabilityTrace::new(vec![(0.0, 4), (6.0, 2)]).unwrap();
    let cfg = config(8, 3, 16, 5);
    let out = run_search_sim(controller(3, 0.02), cfg, &synthetic(), &trace).unwrap();
    assert_eq!(out.evaluated_ok, 16, "budget counts successful evaluations");
    assert_eq!(out.updates, 5, "⌊16/3⌋ updates");
    assert_eq!(out.leftover, 1, "16 mod 3 records can never batch");
    assert_eq!(out.failed, 0);
    assert_eq!(out.controller.version(), 5);
    let ids: BTreeSet<u64> = out.log.records.iter().map(|r| r.job_id).collect();
    assert_eq!(ids.len(), out.log.records.len(), "every job id logged exactly once");
    assert_eq!(
        out.log.records.iter().filter(|r| r.status == JobStatus::Leftover).count(),
        1
    );
}

#[test]
fn failed_jobs_are_replaced_and_budget_still_met() {
    let trace = AvailabilityTrace::constant(4).unwrap();
    let cfg = config(8, 4, 24, 31);
    let reward = FlakyReward { inner: synthetic(), modulus: 4 };
    let out = run_search_sim(controller(4, 0.02), cfg.clone(), &reward, &trace).unwrap();
    assert!(out.failed > 0, "the planted failures must actually fire");
    assert_eq!(out.evaluated_ok, 24, "failures were resampled until the budget was met");
    assert_eq!(out.updates, 6);
    let ok = out.log.records.iter().filter(|r| r.status == JobStatus::Ok).count() as u64;
    let failed = out.log.records.iter().filter(|r| r.status == JobStatus::Failed).count() as u64;
    assert_eq!(ok, out.evaluated_ok - out.leftover);
    assert_eq!(failed, out.failed);
    assert!(out
        .log
        .records
        .iter()
        .filter(|r| r.status == JobStatus::Failed)
        .all(|r| r.perf.is_none() && r.error.is_some()));
    // and the whole flaky run still replays bit for bit
    let again = run_search_sim(controller(4, 0.02), cfg, &reward, &trace).unwrap();
    assert_eq!(out.log.to_jsonl().unwrap(), again.log.to_jsonl().unwrap());
}

#[test]
fn evaluator_panics_are_contained_as_failures() {
    let trace = AvailabilityTrace::constant(2).unwrap();
    let cfg = config(4, 2, 12, 17);
    let reward = PanickyReward { inner: synthetic() };
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {})); // keep planted panics out of test output
    let out = run_search_sim(controller(2, 0.02), cfg, &reward, &trace);
    std::panic::set_hook(hook);
    let out = out.unwrap();
    assert!(out.failed > 0);
    assert_eq!(out.evaluated_ok, 12);
    assert!(out
        .log
        .records
        .iter()
        .filter(|r| r.status == JobStatus::Failed)
        .all(|r| r.error.as_deref().unwrap().contains("panicked")));
}

#[test]
fn persistent_failure_aborts_with_diagnostic() {
    let trace = AvailabilityTrace::constant(4).unwrap();
    let cfg = config(8, 2, 40, 19);
    let err = run_search_sim(controller(2, 0.02), cfg, &AlwaysFails(two_site_layout()), &trace)
        .unwrap_err();
    let Error::Aborted(msg) = err else { panic!("expected abort, got {err}") };
    assert!(msg.contains("failed"), "diagnostic names the failure: {msg}");
}

#[test]
fn concurrency_produces_stale_records() {
    let trace = AvailabilityTrace::constant(4).unwrap();
    let cfg = config(8, 2, 32, 23);
    let out = run_search_sim(controller(2, 0.02), cfg, &synthetic(), &trace).unwrap();
    let max_staleness =
        out.log.records.iter().filter_map(|r| r.staleness).max().unwrap();
    assert!(
        max_staleness >= 1,
        "a queue deeper than one batch must batch some records late, got max {max_staleness}"
    );
}

#[test]
fn worker_outage_mid_run_still_completes() {
    // capacity sits idle from t=3 to t=8; the final segment revives one worker
    let trace = AvailabilityTrace::new(vec![(0.0, 3), (3.0, 0), (8.0, 1)]).unwrap();
    let cfg = config(6, 2, 12, 29);
    let out = run_search_sim(controller(2, 0.02), cfg, &synthetic(), &trace).unwrap();
    assert_eq!(out.evaluated_ok, 12);
    assert_eq!(out.updates, 6);
}

// ── live mode ────────────────────────────────────────────────────────────────

#[test]
fn live_mode_accounting_holds_across_threads() {
    let cfg = config(8, 2, 16, 37);
    let out = run_search_live(controller(2, 0.02), cfg, &synthetic(), 4).unwrap();
    assert_eq!(out.evaluated_ok, 16);
    assert_eq!(out.updates, 8);
    assert_eq!(out.controller.version(), 8);
    let ids: BTreeSet<u64> = out.log.records.iter().map(|r| r.job_id).collect();
    assert_eq!(ids.len(), out.log.records.len());
    for r in &out.log.records {
        assert!(r.t >= 0.0 && r.t.is_finite());
        if r.status == JobStatus::Ok {
            assert!(r.update.unwrap() >= 1);
        }
    }
}

#[test]
fn live_mode_rejects_zero_workers() {
    let cfg = config(2, 2, 4, 1);
    let err = run_search_live(controller(2, 0.02), cfg, &synthetic(), 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

// ── log format ───────────────────────────────────────────────────────────────

#[test]
fn log_round_trips_through_jsonl() {
    let trace = AvailabilityTrace::new(vec![(0.0, 2), (4.0, 1)]).unwrap();
    let cfg = config(4, 2, 10, 41);
    let reward = FlakyReward { inner: synthetic(), modulus: 5 };
    let out = run_search_sim(controller(2, 0.02), cfg, &reward, &trace).unwrap();
    let text = out.log.to_jsonl().unwrap();
    let back = SearchLog::from_jsonl(&text).unwrap();
    assert_eq!(back, out.log);
    assert_eq!(back.to_jsonl().unwrap(), text, "serialization is a fixed point");
}

#[test]
fn best_so_far_is_monotone_and_skips_failures() {
    let trace = AvailabilityTrace::constant(3).unwrap();
    let cfg = config(6, 2, 20, 43);
    let reward = FlakyReward { inner: synthetic(), modulus: 4 };
    let out = run_search_sim(controller(2, 0.02), cfg, &reward, &trace).unwrap();
    let curve = out.log.best_so_far();
    assert_eq!(curve.len() as u64, out.evaluated_ok);
    for w in curve.windows(2) {
        assert!(w[1].2 >= w[0].2, "best-so-far regressed: {:?} -> {:?}", w[0], w[1]);
    }
    for (i, perf, best) in &curve {
        assert!(best >= perf, "at {i}");
    }
}
