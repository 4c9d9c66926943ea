//! Toy image-classification proxy: a two-conv-layer network (8 then 16
//! channels, per-channel normalization, masks applied right after each
//! normalization) on a procedurally generated two-class 16×16 dataset of
//! oriented bars in noise. Perf is held-out accuracy.
//!
//! The genome carries two layer groups. Group 0 masks the stem stage, group 1
//! masks the residual block; group 1's `residual` flag additionally masks the
//! block's projection skip path with a fresh draw (group 0 has no skip, so
//! its flag is inert). Rates follow the linear ramp with the input counting
//! as ramp point 0: the two masked stages sit at points 1 and 2, so they see
//! `final/2` and `final`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    stream_rng, EvalResult, RewardFn, RewardSpec, STREAM_BATCH, STREAM_DATA, STREAM_INIT,
    STREAM_MASK,
};
use crate::error::{Error, Result};
use crate::mask::{apply_drop, sample_conv_mask, ConvPatternSpec, DropStats, RateSchedule};
use crate::space::{decode_conv, GenomeLayout, PatternGenome};
use crate::tensor::{Adam, ParamSet, Tape, Tensor, Var};

pub(crate) const IMG: usize = 16;
const PIXELS: usize = IMG * IMG;

pub struct ToyConvReward {
    spec: RewardSpec,
    layout: GenomeLayout,
    train_x: Vec<f64>,
    train_y: Vec<usize>,
    val_x: Vec<f64>,
    val_y: Vec<usize>,
}

impl ToyConvReward {
    pub fn new(spec: RewardSpec) -> Result<Self> {
        spec.validate()?;
        let layout = GenomeLayout::conv(2)?;
        let mut rng = stream_rng(spec.seed, STREAM_DATA);
        let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
        let (mut val_x, mut val_y) = (Vec::new(), Vec::new());
        bars(spec.n_train, spec.noise, &mut rng, &mut train_x, &mut train_y);
        bars(spec.n_val, spec.noise, &mut rng, &mut val_x, &mut val_y);
        Ok(ToyConvReward { spec, layout, train_x, train_y, val_x, val_y })
    }

    /// The same training run with the mask machinery absent entirely; the
    /// identity-genome tests compare against this bit for bit.
    pub fn evaluate_baseline(&self, seed: u64) -> Result<EvalResult> {
        self.run(seed, None)
    }

    fn run(&self, seed: u64, specs: Option<&[ConvPatternSpec]>) -> Result<EvalResult> {
        let schedule = RateSchedule::new(self.spec.final_rate, 3)?;
        let rates = [schedule.rate_at(1)?, schedule.rate_at(2)?];
        let mut rng_init = stream_rng(seed, STREAM_INIT);
        let mut rng_mask = stream_rng(seed, STREAM_MASK);
        let mut rng_batch = stream_rng(seed, STREAM_BATCH);
        let mut params = init_params(&mut rng_init);
        let mut adam = Adam::new(self.spec.lr);
        let mut stats = DropStats::default();
        let mut train_applications = 0u64;
        let mut train_loss = Vec::with_capacity(self.spec.train_steps);

        let eff = ((self.spec.n_train as f64 * self.spec.train_fraction).round() as usize)
            .clamp(self.spec.batch_size, self.spec.n_train);
        for _ in 0..self.spec.train_steps {
            let idx: Vec<usize> =
                (0..self.spec.batch_size).map(|_| rng_batch.random_range(0..eff)).collect();
            let (bx, by) = gather(&self.train_x, &self.train_y, &idx);
            let mut tape = Tape::new();
            let vars = params.leaf_all(&mut tape)?;
            let x0 = tape.constant(bx)?;
            let logits = match specs {
                Some(s) => {
                    let mut ctx = MaskCtx { specs: s, rates, rng: &mut rng_mask, stats: &mut stats };
                    forward(&mut tape, &vars, x0, Some(&mut ctx), &mut train_applications)?
                }
                None => forward(&mut tape, &vars, x0, None, &mut train_applications)?,
            };
            let loss = tape.cross_entropy(logits, &by)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::EvalFailed(format!("non-finite training loss {lv}")));
            }
            train_loss.push(lv);
            let grads = tape.backward(loss)?;
            let gvec = vars
                .iter()
                .enumerate()
                .map(|(i, &v)| grads.require(v, params.name(i)))
                .collect::<Result<Vec<_>>>()?;
            adam.step(&mut params, &gvec)?;
        }

        // held-out pass: no mask context exists, the counter proves it
        let mut eval_applications = 0u64;
        let all: Vec<usize> = (0..self.spec.n_val).collect();
        let (vx, vy) = gather(&self.val_x, &self.val_y, &all);
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let x0 = tape.constant(vx)?;
        let logits = forward(&mut tape, &vars, x0, None, &mut eval_applications)?;
        let lt = tape.value(logits);
        if !lt.all_finite() {
            return Err(Error::EvalFailed("non-finite held-out logits".into()));
        }
        let correct = vy
            .iter()
            .enumerate()
            .filter(|&(r, &y)| {
                let row = &lt.data()[r * 2..r * 2 + 2];
                (row[1] > row[0]) == (y == 1)
            })
            .count();
        let acc = correct as f64 / vy.len() as f64;

        let mut res = EvalResult { perf: acc, metrics: Default::default(), train_loss };
        res.metrics.insert("val_accuracy".into(), acc);
        res.metrics.insert("degenerate_masks".into(), stats.degenerate as f64);
        res.metrics.insert("identity_masks".into(), stats.identity as f64);
        res.metrics.insert("train_mask_applications".into(), train_applications as f64);
        res.metrics.insert("eval_mask_applications".into(), eval_applications as f64);
        Ok(res)
    }
}

impl RewardFn for ToyConvReward {
    fn name(&self) -> &'static str {
        "toy-conv"
    }

    fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    fn evaluate(&self, genome: &PatternGenome, seed: u64) -> Result<EvalResult> {
        genome.matches_layout(&self.layout)?;
        let specs = decode_conv(genome)?;
        self.run(seed, Some(&specs))
    }
}

/// Class 0: horizontal bars; class 1: vertical bars. Bars of thickness 2 at
/// period 4 with a random phase, plus Gaussian pixel noise.
fn bars(n: usize, noise: f64, rng: &mut ChaCha8Rng, x: &mut Vec<f64>, y: &mut Vec<usize>) {
    x.reserve(n * PIXELS);
    for i in 0..n {
        let label = i % 2;
        let phase = rng.random_range(0..4usize);
        for r in 0..IMG {
            for c in 0..IMG {
                let coord = if label == 0 { r } else { c };
                let base = if (coord + phase) % 4 < 2 { 1.0 } else { 0.0 };
                let eps: f64 = rng.sample(StandardNormal);
                x.push(base + noise * eps);
            }
        }
        y.push(label);
    }
}

fn gather(x: &[f64], y: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(idx.len() * PIXELS);
    for &i in idx {
        data.extend_from_slice(&x[i * PIXELS..(i + 1) * PIXELS]);
    }
    let t = Tensor::new(vec![idx.len(), IMG, IMG, 1], data).expect("gather shape");
    (t, idx.iter().map(|&i| y[i]).collect())
}

fn init_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("k1", Tensor::randn(&[3, 3, 1, 8], 0.45, rng));
    p.add("g1", Tensor::ones(&[8]));
    p.add("b1", Tensor::zeros(&[8]));
    p.add("k2", Tensor::randn(&[3, 3, 8, 16], 0.16, rng));
    p.add("g2", Tensor::ones(&[16]));
    p.add("b2", Tensor::zeros(&[16]));
    p.add("proj", Tensor::randn(&[1, 1, 8, 16], 0.35, rng));
    p.add("head_w", Tensor::randn(&[16, 2], 0.2, rng));
    p.add("head_b", Tensor::zeros(&[2]));
    p
}

struct MaskCtx<'a> {
    specs: &'a [ConvPatternSpec],
    rates: [f64; 2],
    rng: &'a mut ChaCha8Rng,
    stats: &'a mut DropStats,
}

/// Stem (3×3 same-extent conv to 8 channels), then a residual block (3×3
/// same-extent conv to 16 channels with a 1×1 projection skip), then global
/// average pooling into a linear head. Every masked map keeps the full 16×16
/// extent so all `size_k` values stay meaningful.
fn forward(
    tape: &mut Tape,
    v: &[Var],
    x0: Var,
    mut masks: Option<&mut MaskCtx>,
    applications: &mut u64,
) -> Result<Var> {
    let b = tape.value(x0).shape()[0];
    let p1 = tape.pad2d(x0, 1)?;
    let c1 = tape.conv2d(p1, v[0])?;
    let n1 = tape.channel_norm(c1, v[1], v[2])?;
    let n1 = mask_site(tape, n1, 0, [b, IMG, IMG, 8], &mut masks, false, applications)?;
    let x1 = tape.relu(n1)?;

    let p2 = tape.pad2d(x1, 1)?;
    let c2 = tape.conv2d(p2, v[3])?;
    let n2 = tape.channel_norm(c2, v[4], v[5])?;
    let n2 = mask_site(tape, n2, 1, [b, IMG, IMG, 16], &mut masks, false, applications)?;
    let main = tape.relu(n2)?;
    let skip = tape.conv2d(x1, v[6])?;
    let skip = mask_site(tape, skip, 1, [b, IMG, IMG, 16], &mut masks, true, applications)?;
    let x2 = tape.add(main, skip)?;

    let pooled = tape.global_avg_pool(x2)?;
    let logits = tape.matmul(pooled, v[7])?;
    tape.add_bias(logits, v[8])
}

fn mask_site(
    tape: &mut Tape,
    x: Var,
    group: usize,
    shape: [usize; 4],
    masks: &mut Option<&mut MaskCtx>,
    skip_path: bool,
    applications: &mut u64,
) -> Result<Var> {
    let Some(ctx) = masks.as_deref_mut() else {
        return Ok(x);
    };
    let spec = &ctx.specs[group];
    if skip_path && !spec.residual {
        return Ok(x);
    }
    let m = sample_conv_mask(spec, &shape, ctx.rates[group], ctx.rng)?;
    *applications += 1;
    apply_drop(tape, x, &m, ctx.stats)
}
