//! Run configuration, on-disk layout, and the operations behind the CLI.
//!
//! A run lives in one directory named by a content hash of its resolved
//! configuration, so rerunning with the same settings lands in the same place
//! (and refuses to clobber it without `--force`). A search run contains:
//!
//! ```text
//! runs/sim-3fb2a91c04e7/
//!   config.json      resolved RunConfig (flags already applied)
//!   search.jsonl     header + one record per job
//!   checkpoint.json  final controller state
//!   curves.csv       sample_index, perf, best_so_far
//!   report.json      best genome, staleness histogram, mask counters
//! ```
//!
//! `report` regenerates the last two files from the log alone; because every
//! number in them is a pure function of the log, regeneration is byte-exact.
//! `replay` re-executes a simulated-trace run from its config and compares
//! the fresh log byte-for-byte against the stored one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Controller, ControllerConfig, PolicyConfig};
use crate::mix_seed;
use crate::error::{Error, Result};
use crate::mask::{sample_conv_mask, sample_transformer_mask, pgm_slices, RateSchedule};
use crate::reward::{build_reward, random_search, RewardSpec};
use crate::scheduler::{
    run_search_live, run_search_sim, AvailabilityTrace, JobStatus, SearchConfig, SearchLog,
    SearchOutcome,
};
use crate::space::{
    decode_conv, decode_transformer, PatternGenome, SiteLayout, TargetKind,
};


/// Seed stream for attention-policy weight init, disjoint from the
/// scheduler's sampling/simulation/evaluation streams.
const POLICY_INIT_STREAM: u64 = 0x13;

/// Which policy network drives the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Factorized,
    Attention,
}

/// Controller section of [`RunConfig`]: backend choice plus hyper-parameters.
/// The batch size lives in the search section so the two can never disagree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSettings {
    pub backend: BackendKind,
    pub lr: f64,
    pub entropy_coef: f64,
    pub baseline_momentum: f64,
    /// Symmetric importance-ratio clip bound; `null` keeps raw ratios.
    pub ratio_clip: Option<f64>,
    /// Network shape when `backend` is `attention`; ignored otherwise.
    pub policy: PolicyConfig,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        let c = ControllerConfig::default();
        ControllerSettings {
            // the factorized policy is the cheap exhaustively-testable default;
            // flip to `attention` for prefix-conditioned sampling
            backend: BackendKind::Factorized,
            lr: c.lr,
            entropy_coef: c.entropy_coef,
            baseline_momentum: c.baseline_momentum,
            ratio_clip: c.ratio_clip,
            policy: PolicyConfig::default(),
        }
    }
}

/// How the scheduler obtains workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Deterministic virtual time driven by `trace`; replayable.
    Sim,
    /// Real threads and wall-clock timestamps; not replayable.
    Live,
}

/// Everything one search run needs, in one JSON document. Unknown keys are
/// rejected so a typo cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub controller: ControllerSettings,
    pub reward: RewardSpec,
    pub mode: RunMode,
    /// Worker availability segments `(start_time, workers)` for sim mode.
    pub trace: Vec<(f64, usize)>,
    /// Thread count for live mode.
    pub workers: usize,
    /// Parent directory that run directories are created under.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            search: SearchConfig::default(),
            controller: ControllerSettings::default(),
            reward: RewardSpec::default(),
            mode: RunMode::Sim,
            trace: vec![(0.0, 4)],
            workers: 4,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.reward.validate()?;
        self.controller_config().validate_for_search()?;
        match self.mode {
            RunMode::Sim => {
                AvailabilityTrace::new(self.trace.clone())?;
            }
            RunMode::Live => {
                if self.workers == 0 {
                    return Err(Error::Config("live mode needs at least one worker".into()));
                }
            }
        }
        Ok(())
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            lr: self.controller.lr,
            batch_m: self.search.batch_m,
            entropy_coef: self.controller.entropy_coef,
            baseline_momentum: self.controller.baseline_momentum,
            ratio_clip: self.controller.ratio_clip,
        }
    }

    pub fn build_controller(&self) -> Result<Controller> {
        let layout = self.reward.layout()?;
        match self.controller.backend {
            BackendKind::Factorized => Controller::factorized(layout, self.controller_config()),
            BackendKind::Attention => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(self.search.seed, POLICY_INIT_STREAM));
                Controller::attention(layout, self.controller.policy, self.controller_config(), &mut rng)
            }
        }
    }

    /// Content hash of the resolved configuration, naming the run directory.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(hex[..12].to_string())
    }

    pub fn run_dir(&self, label: &str) -> Result<PathBuf> {
        Ok(self.out_dir.join(format!("{label}-{}", self.hash()?)))
    }
}

impl ControllerConfig {
    fn validate_for_search(&self) -> Result<()> {
        // constructing a throwaway policy would also validate, but this keeps
        // config errors cheap and typed as user errors
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("controller lr {} must be positive", self.lr)));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(Error::Config(format!(
                "entropy_coef {} must be non-negative",
                self.entropy_coef
            )));
        }
        if let Some(c) = self.ratio_clip {
            if !(c.is_finite() && c > 1.0) {
                return Err(Error::Config(format!("ratio_clip {c} must exceed 1")));
            }
        }
        Ok(())
    }
}

// ── report generation ─────────────────────────────────────────────────────────

/// Everything `report.json` holds. Derived from the log alone, so any log
/// regenerates its report byte-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub evaluator: String,
    pub evaluated: u64,
    pub failed: u64,
    pub updates: u64,
    pub best: Option<BestGenome>,
    /// staleness value → number of batched records that carried it
    pub staleness_hist: BTreeMap<u64, u64>,
    pub degenerate_masks: u64,
    pub identity_masks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestGenome {
    pub job_id: u64,
    pub perf: f64,
    pub genome: String,
    pub decoded: serde_json::Value,
}

fn transformer_sites(reward: &RewardSpec) -> Result<SiteLayout> {
    match &reward.sites {
        None => Ok(SiteLayout::full()),
        Some(names) => {
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            SiteLayout::subset(&refs)
        }
    }
}

fn decoded_genome(text: &str, reward: &RewardSpec) -> Result<(PatternGenome, serde_json::Value)> {
    let genome: PatternGenome = text.parse()?;
    let value = match genome.kind {
        TargetKind::Conv => serde_json::to_value(decode_conv(&genome)?)?,
        TargetKind::Transformer => {
            serde_json::to_value(decode_transformer(&genome, &transformer_sites(reward)?)?)?
        }
    };
    Ok((genome, value))
}

pub fn make_report(log: &SearchLog, reward: &RewardSpec) -> Result<Report> {
    let mut best: Option<(u64, f64, &str)> = None;
    let mut staleness_hist = BTreeMap::new();
    let mut evaluated = 0;
    let mut failed = 0;
    let mut updates = 0;
    let mut degenerate = 0.0;
    let mut identity = 0.0;
    for r in &log.records {
        match r.status {
            JobStatus::Failed => failed += 1,
            JobStatus::Ok | JobStatus::Leftover => {
                evaluated += 1;
                let perf = r.perf.ok_or_else(|| {
                    Error::contract(format!("successful record {} lacks perf", r.job_id))
                })?;
                if best.map_or(true, |(_, b, _)| perf > b) {
                    best = Some((r.job_id, perf, &r.genome));
                }
                degenerate += r.metrics.get("degenerate_masks").copied().unwrap_or(0.0);
                identity += r.metrics.get("identity_masks").copied().unwrap_or(0.0);
            }
        }
        if let Some(s) = r.staleness {
            *staleness_hist.entry(s).or_insert(0) += 1;
        }
        if let Some(u) = r.update {
            updates = updates.max(u);
        }
    }
    let best = match best {
        None => None,
        Some((job_id, perf, text)) => {
            let (genome, decoded) = decoded_genome(text, reward)?;
            Some(BestGenome { job_id, perf, genome: genome.to_string(), decoded })
        }
    };
    Ok(Report {
        mode: log.header.mode.clone(),
        evaluator: log.header.evaluator.clone(),
        evaluated,
        failed,
        updates,
        best,
        staleness_hist,
        degenerate_masks: degenerate as u64,
        identity_masks: identity as u64,
    })
}

/// Best-so-far curve as CSV with columns `sample_index,perf,best_so_far`.
pub fn export_curves(log: &SearchLog) -> Result<String> {
    let curve = log.best_so_far();
    if curve.is_empty() {
        return Err(Error::Config("log holds no successful evaluations to plot".into()));
    }
    let mut out = String::from("sample_index,perf,best_so_far\n");
    for (i, perf, best) in curve {
        out.push_str(&format!("{i},{perf},{best}\n"));
    }
    Ok(out)
}

// ── run directory IO ──────────────────────────────────────────────────────────

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_analysis(dir: &Path, log: &SearchLog, reward: &RewardSpec) -> Result<()> {
    fs::write(dir.join("curves.csv"), export_curves(log)?)?;
    write_pretty(&dir.join("report.json"), &make_report(log, reward)?)
}

/// Run an RL search per `config` and persist the full run directory.
pub fn cmd_search(config: &RunConfig, force: bool) -> Result<(PathBuf, SearchOutcome)> {
    config.validate()?;
    let controller = config.build_controller()?;
    let evaluator = build_reward(&config.reward)?;
    let outcome = match config.mode {
        RunMode::Sim => {
            let trace = AvailabilityTrace::new(config.trace.clone())?;
            run_search_sim(controller, config.search.clone(), evaluator.as_ref(), &trace)?
        }
        RunMode::Live => {
            run_search_live(controller, config.search.clone(), evaluator.as_ref(), config.workers)?
        }
    };
    let label = match config.mode {
        RunMode::Sim => "sim",
        RunMode::Live => "live",
    };
    let dir = config.run_dir(label)?;
    prepare_dir(&dir, force)?;
    write_pretty(&dir.join("config.json"), config)?;
    fs::write(dir.join("search.jsonl"), outcome.log.to_jsonl()?)?;
    write_pretty(&dir.join("checkpoint.json"), &outcome.controller)?;
    write_analysis(&dir, &outcome.log, &config.reward)?;
    Ok((dir, outcome))
}

/// Run the uniform-sampling baseline and persist its run directory.
pub fn cmd_random_search(config: &RunConfig, force: bool) -> Result<(PathBuf, SearchLog)> {
    config.validate()?;
    let evaluator = build_reward(&config.reward)?;
    let log = random_search(config.search.budget, evaluator.as_ref(), config.search.seed)?;
    let dir = config.run_dir("random")?;
    prepare_dir(&dir, force)?;
    write_pretty(&dir.join("config.json"), config)?;
    fs::write(dir.join("search.jsonl"), log.to_jsonl()?)?;
    write_analysis(&dir, &log, &config.reward)?;
    Ok((dir, log))
}

/// Score one genome under the configured evaluator and per-call seed.
pub fn cmd_eval_genome(config: &RunConfig, genome_text: &str, seed: u64) -> Result<String> {
    config.reward.validate()?;
    let evaluator = build_reward(&config.reward)?;
    let genome: PatternGenome = genome_text.parse()?;
    genome.matches_layout(evaluator.layout())?;
    let result = evaluator.evaluate(&genome, seed)?;
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    Ok(text)
}

/// Draw each group's mask once and write plain-PGM renders into `out`.
///
/// Conv genomes render on a `[1, 16, 16, 2]` activation with the toy
/// classifier's rate ramp; transformer genomes on `[1, 70, 64]` at `rate`.
pub fn cmd_render_mask(
    genome_text: &str,
    rate: f64,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let genome: PatternGenome = genome_text.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::new();
    fs::create_dir_all(out)?;
    let mut emit = |stem: String, body: String| -> Result<()> {
        let path = out.join(format!("{stem}.pgm"));
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    match genome.kind {
        TargetKind::Conv => {
            let specs = decode_conv(&genome)?;
            // the input layer counts as ramp point 0, as in the toy classifier
            let ramp = RateSchedule::new(rate, specs.len() + 1)?;
            for (g, spec) in specs.iter().enumerate() {
                let mask = sample_conv_mask(spec, &[1, 16, 16, 2], ramp.rate_at(g + 1)?, &mut rng)?;
                for (stem, body) in pgm_slices(&mask)? {
                    emit(format!("g{g}_{stem}"), body)?;
                }
            }
        }
        TargetKind::Transformer => {
            let sites = SiteLayout::full();
            let decoded = if genome.groups.len() == sites.len() {
                decode_transformer(&genome, &sites)?
            } else {
                return Err(Error::Genome(format!(
                    "transformer renders need all {} sites, got {} groups",
                    sites.len(),
                    genome.groups.len()
                )));
            };
            for (g, (site, spec)) in decoded.iter().enumerate() {
                let mask = sample_transformer_mask(spec, &[1, 70, 64], rate, &mut rng)?;
                for (stem, body) in pgm_slices(&mask)? {
                    emit(format!("s{g}_{site}_{stem}"), body)?;
                }
            }
        }
    }
    Ok(written)
}

/// Regenerate `curves.csv` and `report.json` for an existing run directory.
pub fn cmd_report(run: &Path) -> Result<(PathBuf, PathBuf)> {
    let config = RunConfig::load(&run.join("config.json"))?;
    let log = SearchLog::from_jsonl(&fs::read_to_string(run.join("search.jsonl"))?)?;
    write_analysis(run, &log, &config.reward)?;
    Ok((run.join("curves.csv"), run.join("report.json")))
}

/// Re-execute a simulated-trace run from its stored config and assert the
/// fresh log (and checkpoint, if present) is byte-identical.
pub fn cmd_replay(run: &Path) -> Result<u64> {
    let config = RunConfig::load(&run.join("config.json"))?;
    if config.mode != RunMode::Sim {
        return Err(Error::Config(
            "only simulated-trace runs replay; live timestamps are not reproducible".into(),
        ));
    }
    config.validate()?;
    let stored = fs::read_to_string(run.join("search.jsonl"))?;
    let controller = config.build_controller()?;
    let evaluator = build_reward(&config.reward)?;
    let trace = AvailabilityTrace::new(config.trace.clone())?;
    let outcome = run_search_sim(controller, config.search.clone(), evaluator.as_ref(), &trace)?;
    let fresh = outcome.log.to_jsonl()?;
    if fresh != stored {
        let line = fresh
            .lines()
            .zip(stored.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| fresh.lines().count().min(stored.lines().count()) + 1, |i| i + 1);
        return Err(Error::ReplayMismatch(format!(
            "regenerated log diverges from {} at line {line}",
            run.join("search.jsonl").display()
        )));
    }
    let checkpoint_path = run.join("checkpoint.json");
    if checkpoint_path.exists() {
        let mut fresh_ckpt = serde_json::to_string_pretty(&outcome.controller)?;
        fresh_ckpt.push('\n');
        if fresh_ckpt != fs::read_to_string(&checkpoint_path)? {
            return Err(Error::ReplayMismatch(format!(
                "regenerated controller state diverges from {}",
                checkpoint_path.display()
            )));
        }
    }
    Ok(outcome.evaluated_ok)
}
