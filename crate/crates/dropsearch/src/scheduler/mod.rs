//! Asynchronous two-queue search orchestration.
//!
//! The controller keeps a queue of unfinished jobs topped up to a capacity
//! `C` and a queue of finished evaluations; every time `M` finished jobs are
//! waiting, they form one REINFORCE batch whose records keep the log-prob
//! recorded at sampling time (the importance-sampling correction handles the
//! staleness). Two drivers share this core: a live mode that fans jobs out to
//! worker threads under wall-clock time, and a simulated mode that replays a
//! piecewise-constant worker-availability trace under a deterministic clock,
//! making whole searches bit-reproducible.
//!
//! `budget` counts genomes that complete evaluation successfully: failed jobs
//! are logged, dropped, and replaced by fresh samples, so a finished search
//! always performed exactly `⌊budget / M⌋` updates, with the sub-batch
//! remainder logged as leftover. Parameter updates run only on the
//! orchestration thread.

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, SampleRecord};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::reward::{EvalResult, RewardFn};
use crate::space::PatternGenome;

/// Stream tags splitting the search seed: genome sampling, the simulated
/// clock, and per-job evaluator seeds never share randomness.
const SAMPLE_STREAM: u64 = 0x10;
const SIM_STREAM: u64 = 0x11;
const EVAL_STREAM: u64 = 0x12;

/// Completions required before the failure-rate abort can trigger.
const ABORT_MIN_COMPLETIONS: u64 = 20;

pub fn sample_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(mix_seed(seed, SAMPLE_STREAM))
}

/// Evaluator seed for one job, stable across modes and replays.
pub fn eval_seed(seed: u64, job_id: u64) -> u64 {
    mix_seed(mix_seed(seed, EVAL_STREAM), job_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Unfinished-queue capacity `C`.
    pub capacity: usize,
    /// Records per REINFORCE update `M`; must match the controller's.
    pub batch_m: usize,
    /// Successful evaluations the search performs.
    pub budget: u64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        // C = 4M keeps all workers busy through one in-flight generation lag
        SearchConfig { capacity: 64, batch_m: 16, budget: 16_384, seed: 0 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_m == 0 || self.capacity < self.batch_m {
            return Err(Error::Config(format!(
                "need capacity ≥ batch_m ≥ 1, got C={} M={}",
                self.capacity, self.batch_m
            )));
        }
        if self.budget < self.batch_m as u64 {
            return Err(Error::Config(format!(
                "budget {} below one batch of {}",
                self.budget, self.batch_m
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Running,
    Finished,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub job_id: u64,
    pub record: SampleRecord,
    pub state: JobState,
}

/// Piecewise-constant worker counts over simulated time. The last segment
/// persists forever and must keep at least one worker, or the simulation
/// could stall. A drop in the count never kills running jobs; it only gates
/// new assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityTrace {
    segments: Vec<(f64, usize)>,
}

impl AvailabilityTrace {
    pub fn new(segments: Vec<(f64, usize)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("availability trace needs at least one segment".into()));
        }
        if segments[0].0 != 0.0 {
            return Err(Error::Config(format!(
                "availability trace must start at t=0, got {}",
                segments[0].0
            )));
        }
        for w in segments.windows(2) {
            if !(w[1].0.is_finite() && w[1].0 > w[0].0) {
                return Err(Error::Config(format!(
                    "availability trace times must increase, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if segments.last().unwrap().1 == 0 {
            return Err(Error::Config(
                "final trace segment must keep ≥ 1 worker or the search never finishes".into(),
            ));
        }
        Ok(AvailabilityTrace { segments })
    }

    pub fn constant(workers: usize) -> Result<Self> {
        Self::new(vec![(0.0, workers)])
    }

    pub fn segments(&self) -> &[(f64, usize)] {
        &self.segments
    }

    pub fn workers_at(&self, t: f64) -> usize {
        self.segments
            .iter()
            .rev()
            .find(|(start, _)| *start <= t)
            .map(|(_, w)| *w)
            .unwrap_or(0)
    }

    pub fn next_change_after(&self, t: f64) -> Option<f64> {
        self.segments.iter().map(|(s, _)| *s).find(|&s| s > t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Ok,
    Failed,
    Leftover,
}

/// One logged job. `t` is the completion time: simulated seconds in sim mode,
/// wall-clock seconds in live mode, the sample index in random search.
/// Successful records are written when their batch updates the controller,
/// so `staleness` (versions the policy advanced between sampling and the
/// update) and the update index are known; the sub-batch remainder at budget
/// exhaustion appears as `leftover`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub job_id: u64,
    pub genome: String,
    pub logp_old: f64,
    pub theta_version: u64,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness: Option<u64>,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHeader {
    pub schema: u32,
    pub mode: String,
    pub evaluator: String,
    pub config: SearchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AvailabilityTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub header: SearchHeader,
    pub records: Vec<LogRecord>,
}

impl SearchLog {
    /// One JSON object per line: the header, then every record in log order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty search log".into()))
            .and_then(|l| Ok(serde_json::from_str(l)?))?;
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(SearchLog { header, records })
    }

    /// `(sample_index, perf, best_so_far)` over successful records in log
    /// order — the random-search comparison curve.
    pub fn best_so_far(&self) -> Vec<(u64, f64, f64)> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .filter_map(|r| r.perf.filter(|_| r.status != JobStatus::Failed))
            .enumerate()
            .map(|(i, perf)| {
                best = best.max(perf);
                (i as u64, perf, best)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub log: SearchLog,
    pub controller: Controller,
    pub updates: u64,
    pub evaluated_ok: u64,
    pub failed: u64,
    pub leftover: u64,
}

#[derive(Clone, Debug)]
struct FinishedJob {
    job_id: u64,
    record: SampleRecord,
    result: EvalResult,
    t: f64,
}

/// Mode-independent queue and update bookkeeping.
#[derive(Clone, Debug)]
pub struct SearchCore {
    controller: Controller,
    config: SearchConfig,
    rng_sample: ChaCha8Rng,
    q_unfinished: BTreeMap<u64, Job>,
    q_finished: VecDeque<FinishedJob>,
    next_job_id: u64,
    batched: u64,
    failed: u64,
    completions: u64,
    updates: u64,
    records: Vec<LogRecord>,
}

impl SearchCore {
    pub fn new(controller: Controller, config: SearchConfig) -> Result<Self> {
        config.validate()?;
        if controller.config().batch_m != config.batch_m {
            return Err(Error::Config(format!(
                "controller batches {} records per update, search config says {}",
                controller.config().batch_m,
                config.batch_m
            )));
        }
        let rng_sample = sample_rng(config.seed);
        Ok(SearchCore {
            controller,
            config,
            rng_sample,
            q_unfinished: BTreeMap::new(),
            q_finished: VecDeque::new(),
            next_job_id: 0,
            batched: 0,
            failed: 0,
            completions: 0,
            updates: 0,
            records: Vec::new(),
        })
    }

    /// Successes already secured or still possible from what is in flight.
    fn accounted(&self) -> u64 {
        self.batched + self.q_finished.len() as u64 + self.q_unfinished.len() as u64
    }

    /// All budgeted evaluations have arrived and nothing is in flight.
    pub fn done(&self) -> bool {
        self.q_unfinished.is_empty()
            && self.batched + self.q_finished.len() as u64 >= self.config.budget
    }

    /// Sample fresh jobs until the unfinished queue holds `C` entries, or
    /// fewer when the remaining budget does not need that many. Returns the
    /// new job ids.
    pub fn fill_queue(&mut self) -> Result<Vec<u64>> {
        let room = self.config.capacity - self.q_unfinished.len();
        let remaining = self.config.budget.saturating_sub(self.accounted());
        let n = room.min(remaining.min(usize::MAX as u64) as usize);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let record = self.controller.sample_record(&mut self.rng_sample)?;
            let job_id = self.next_job_id;
            self.next_job_id += 1;
            self.q_unfinished.insert(job_id, Job { job_id, record, state: JobState::Queued });
            ids.push(job_id);
        }
        debug_assert!(self.q_unfinished.len() <= self.config.capacity);
        Ok(ids)
    }

    /// Lowest-id queued job, marked running; what a free worker picks up.
    pub fn start_next(&mut self) -> Option<(u64, PatternGenome)> {
        let job = self
            .q_unfinished
            .values_mut()
            .find(|j| j.state == JobState::Queued)?;
        job.state = JobState::Running;
        Some((job.job_id, job.record.genome.clone()))
    }

    pub fn state(&self, job_id: u64) -> Option<JobState> {
        self.q_unfinished.get(&job_id).map(|j| j.state)
    }

    /// Deliver one evaluation outcome. Failed jobs are logged and dropped
    /// (the next fill replaces them); successes join the finished queue, and
    /// every `M` of them trigger one REINFORCE update whose records are then
    /// logged with their staleness. Returns whether an update ran.
    pub fn on_complete(
        &mut self,
        job_id: u64,
        t: f64,
        outcome: std::result::Result<EvalResult, String>,
    ) -> Result<bool> {
        match self.q_unfinished.get(&job_id) {
            None => {
                return Err(Error::contract(format!(
                    "completion for unknown or already-completed job {job_id}"
                )))
            }
            Some(job) if job.state != JobState::Running => {
                return Err(Error::contract(format!(
                    "completion for job {job_id} which was never started"
                )))
            }
            Some(_) => {}
        }
        let mut job = self.q_unfinished.remove(&job_id).expect("checked above");
        job.state = JobState::Finished;
        self.completions += 1;
        match outcome {
            Err(message) => {
                self.failed += 1;
                self.records.push(LogRecord {
                    job_id,
                    genome: job.record.genome.to_string(),
                    logp_old: job.record.logp_old,
                    theta_version: job.record.theta_version,
                    status: JobStatus::Failed,
                    perf: None,
                    staleness: None,
                    t,
                    update: None,
                    metrics: BTreeMap::new(),
                    error: Some(message),
                });
            }
            Ok(result) => {
                self.q_finished.push_back(FinishedJob { job_id, record: job.record, result, t });
            }
        }
        if self.completions >= ABORT_MIN_COMPLETIONS && self.failed * 2 > self.completions {
            return Err(Error::Aborted(format!(
                "{} of {} evaluations failed; evaluator appears persistently broken",
                self.failed, self.completions
            )));
        }
        if self.q_finished.len() < self.config.batch_m {
            return Ok(false);
        }
        let batch: Vec<FinishedJob> =
            (0..self.config.batch_m).map(|_| self.q_finished.pop_front().unwrap()).collect();
        let pairs: Vec<(SampleRecord, f64)> =
            batch.iter().map(|f| (f.record.clone(), f.result.perf)).collect();
        let stats = self.controller.reinforce_update(&pairs)?;
        self.updates += 1;
        let version_before = stats.theta_version - 1;
        for f in batch {
            self.records.push(LogRecord {
                job_id: f.job_id,
                genome: f.record.genome.to_string(),
                logp_old: f.record.logp_old,
                theta_version: f.record.theta_version,
                status: JobStatus::Ok,
                perf: Some(f.result.perf),
                staleness: Some(version_before - f.record.theta_version),
                t: f.t,
                update: Some(stats.theta_version),
                metrics: f.result.metrics,
                error: None,
            });
            self.batched += 1;
        }
        Ok(true)
    }

    /// Close out the run: log any sub-batch remainder as leftover and build
    /// the outcome.
    fn finish(mut self, mode: &str, evaluator: &str, trace: Option<AvailabilityTrace>) -> SearchOutcome {
        let leftover = self.q_finished.len() as u64;
        while let Some(f) = self.q_finished.pop_front() {
            self.records.push(LogRecord {
                job_id: f.job_id,
                genome: f.record.genome.to_string(),
                logp_old: f.record.logp_old,
                theta_version: f.record.theta_version,
                status: JobStatus::Leftover,
                perf: Some(f.result.perf),
                staleness: None,
                t: f.t,
                update: None,
                metrics: f.result.metrics,
                error: None,
            });
        }
        SearchOutcome {
            log: SearchLog {
                header: SearchHeader {
                    schema: 1,
                    mode: mode.to_string(),
                    evaluator: evaluator.to_string(),
                    config: self.config,
                    trace,
                },
                records: self.records,
            },
            controller: self.controller,
            updates: self.updates,
            evaluated_ok: self.batched + leftover,
            failed: self.failed,
            leftover,
        }
    }
}

fn run_eval(evaluator: &dyn RewardFn, genome: &PatternGenome, seed: u64) -> std::result::Result<EvalResult, String> {
    match catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(genome, seed))) {
        Ok(Ok(r)) => {
            if r.perf.is_finite() {
                Ok(r)
            } else {
                Err(format!("non-finite perf {}", r.perf))
            }
        }
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic_message(panic)),
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("evaluator panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("evaluator panicked: {s}")
    } else {
        "evaluator panicked".to_string()
    }
}

/// Run a search against a simulated worker-availability trace. Durations come
/// from a dedicated simulation stream, evaluation happens eagerly at
/// assignment (results only become visible at the simulated completion time),
/// and every tie breaks on job id — so the whole run, log included, is a
/// deterministic function of `(controller, config, evaluator, trace)`.
pub fn run_search_sim(
    controller: Controller,
    config: SearchConfig,
    evaluator: &dyn RewardFn,
    trace: &AvailabilityTrace,
) -> Result<SearchOutcome> {
    use rand::SeedableRng;
    struct InFlight {
        job_id: u64,
        finish_t: f64,
        outcome: std::result::Result<EvalResult, String>,
    }
    let mut core = SearchCore::new(controller, config.clone())?;
    let mut rng_sim = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SIM_STREAM));
    let mut running: Vec<InFlight> = Vec::new();
    let mut t = 0.0_f64;
    loop {
        // deliver everything due at the current clock, earliest (then lowest
        // job id) first; each delivery may trigger an update
        loop {
            let due = running
                .iter()
                .enumerate()
                .filter(|(_, r)| r.finish_t <= t)
                .min_by(|(_, a), (_, b)| {
                    (a.finish_t, a.job_id)
                        .partial_cmp(&(b.finish_t, b.job_id))
                        .expect("finite times")
                })
                .map(|(i, _)| i);
            let Some(i) = due else { break };
            let fin = running.remove(i);
            core.on_complete(fin.job_id, fin.finish_t, fin.outcome)?;
        }
        if core.done() && running.is_empty() {
            break;
        }
        core.fill_queue()?;
        let workers = trace.workers_at(t);
        while running.len() < workers {
            let Some((job_id, genome)) = core.start_next() else { break };
            let outcome = run_eval(evaluator, &genome, eval_seed(config.seed, job_id));
            let duration = 0.5 + rng_sim.random::<f64>();
            running.push(InFlight { job_id, finish_t: t + duration, outcome });
        }
        let next_finish = running.iter().map(|r| r.finish_t).fold(f64::INFINITY, f64::min);
        let next_change = trace.next_change_after(t).unwrap_or(f64::INFINITY);
        let next_t = next_finish.min(next_change);
        if !next_t.is_finite() {
            return Err(Error::contract(
                "simulation stalled: nothing running and no capacity change ahead".to_string(),
            ));
        }
        t = next_t;
    }
    Ok(core.finish("sim", evaluator.name(), Some(trace.clone())))
}

/// Run a search on live worker threads under wall-clock time. Completion
/// order depends on real scheduling, so live runs are not replayable; the
/// accounting invariants still hold. Updates stay on this thread.
pub fn run_search_live(
    controller: Controller,
    config: SearchConfig,
    evaluator: &dyn RewardFn,
    workers: usize,
) -> Result<SearchOutcome> {
    if workers == 0 {
        return Err(Error::Config("live search needs ≥ 1 worker thread".into()));
    }
    let mut core = SearchCore::new(controller, config.clone())?;
    let started = Instant::now();
    let (job_tx, job_rx) = crossbeam_channel::unbounded::<(u64, PatternGenome, u64)>();
    let (res_tx, res_rx) =
        crossbeam_channel::unbounded::<(u64, std::result::Result<EvalResult, String>)>();
    std::thread::scope(|scope| -> Result<SearchOutcome> {
        for _ in 0..workers {
            let rx = job_rx.clone();
            let tx = res_tx.clone();
            scope.spawn(move || {
                while let Ok((job_id, genome, seed)) = rx.recv() {
                    if tx.send((job_id, run_eval(evaluator, &genome, seed))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(res_tx);
        let dispatch = |core: &mut SearchCore| -> Result<()> {
            core.fill_queue()?;
            while let Some((job_id, genome)) = core.start_next() {
                job_tx
                    .send((job_id, genome, eval_seed(config.seed, job_id)))
                    .map_err(|_| Error::contract("worker pool hung up".to_string()))?;
            }
            Ok(())
        };
        dispatch(&mut core)?;
        while !core.done() {
            let (job_id, outcome) = res_rx
                .recv()
                .map_err(|_| Error::contract("all workers exited early".to_string()))?;
            core.on_complete(job_id, started.elapsed().as_secs_f64(), outcome)?;
            dispatch(&mut core)?;
        }
        drop(job_tx);
        Ok(core.finish("live", evaluator.name(), None))
    })
}
