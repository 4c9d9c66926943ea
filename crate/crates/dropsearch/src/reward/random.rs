//! Uniform random-search baseline: evaluates `budget` uniformly sampled
//! genomes and emits the same log format as the controller search, so
//! best-so-far curves compare directly.



use super::RewardFn;
use crate::error::{Error, Result};
use crate::scheduler::{eval_seed, sample_rng, JobStatus, LogRecord, SearchConfig, SearchHeader, SearchLog};
use crate::space::uniform_random_genome;

/// Completions required before the failure-rate abort can trigger (matches
/// the scheduler's threshold).
const ABORT_MIN_COMPLETIONS: u64 = 20;

/// Evaluate `budget` uniform genomes under the shared sampling and per-job
/// seed streams. `logp_old` is the exact uniform log-probability, and the
/// record index stands in for time. Failed evaluations are logged and
/// replaced by fresh draws, just like the scheduler does.
pub fn random_search(budget: u64, evaluator: &dyn RewardFn, seed: u64) -> Result<SearchLog> {
    if budget == 0 {
        return Err(Error::Config("random search needs budget ≥ 1".into()));
    }
    let layout = evaluator.layout().clone();
    let uniform_logp: f64 = -layout.flat_cards().iter().map(|&c| (c as f64).ln()).sum::<f64>();
    let mut rng = sample_rng(seed);
    let mut records = Vec::with_capacity(budget as usize);
    let mut ok = 0u64;
    let mut failed = 0u64;
    let mut job_id = 0u64;
    while ok < budget {
        let genome = uniform_random_genome(&layout, &mut rng);
        let outcome = evaluator.evaluate(&genome, eval_seed(seed, job_id));
        let mut record = LogRecord {
            job_id,
            genome: genome.to_string(),
            logp_old: uniform_logp,
            theta_version: 0,
            status: JobStatus::Ok,
            perf: None,
            staleness: None,
            t: job_id as f64,
            update: None,
            metrics: Default::default(),
            error: None,
        };
        match outcome {
            Ok(result) if result.perf.is_finite() => {
                record.perf = Some(result.perf);
                record.metrics = result.metrics;
                ok += 1;
            }
            Ok(result) => {
                record.status = JobStatus::Failed;
                record.error = Some(format!("non-finite perf {}", result.perf));
                failed += 1;
            }
            Err(e) => {
                record.status = JobStatus::Failed;
                record.error = Some(e.to_string());
                failed += 1;
            }
        }
        records.push(record);
        job_id += 1;
        if job_id >= ABORT_MIN_COMPLETIONS && failed * 2 > job_id {
            return Err(Error::Aborted(format!(
                "{failed} of {job_id} evaluations failed; evaluator appears persistently broken"
            )));
        }
    }
    Ok(SearchLog {
        header: SearchHeader {
            schema: 1,
            mode: "random".into(),
            evaluator: evaluator.name().into(),
            config: SearchConfig { capacity: 1, batch_m: 1, budget, seed },
            trace: None,
        },
        records,
    })
}
