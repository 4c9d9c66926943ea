//! Toy language-model proxy: a 2-layer, 2-head, hidden-64 causal attention
//! model on a procedural character corpus. Masks hit all eight sites with one
//! spec per site shared across heads and layers, drawn fresh per layer per
//! training step. Perf is `80 / valid-ppl`.
//!
//! The corpus has a deterministic grammar: each character opens a fixed
//! window of 82 successors (start `(7·x + 3) mod 100`), and the next
//! character is uniform within it. Conditional entropy is therefore exactly
//! `ln 82`, so even a perfectly trained model stays above perplexity 82 and
//! perf stays inside (0, 1]. All sites use the flat `final_rate` — the
//! layer ramp is a conv-stack notion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    stream_rng, EvalResult, RewardFn, RewardSpec, STREAM_BATCH, STREAM_DATA, STREAM_INIT,
    STREAM_MASK,
};
use crate::error::{Error, Result};
use crate::mask::{apply_drop, sample_transformer_mask, DropStats, Mask, TransformerPatternSpec};
use crate::space::{decode_transformer, GenomeLayout, PatternGenome, SiteLayout};
use crate::tensor::{Adam, ParamSet, Tape, Tensor, Var};

pub(crate) const T_LEN: usize = 70;
pub(crate) const VOCAB: usize = 100;
pub(crate) const WINDOW: usize = 82;
const HIDDEN: usize = 64;
const HEADS: usize = 2;
const HEAD_DIM: usize = 32;
const FFN: usize = 128;
const LAYERS: usize = 2;
const PPL_SCALE: f64 = 80.0;
const MASKED: f64 = -1e30;

/// Mask source for one site application; swapped out by the
/// reference-equivalence tests.
pub(crate) type MaskSampler =
    fn(&TransformerPatternSpec, &[usize; 3], f64, &mut ChaCha8Rng) -> Result<Mask>;

pub struct ToyLmReward {
    spec: RewardSpec,
    layout: GenomeLayout,
    sites: SiteLayout,
    train: Vec<Vec<usize>>,
    val: Vec<Vec<usize>>,
}

impl ToyLmReward {
    pub fn new(spec: RewardSpec) -> Result<Self> {
        spec.validate()?;
        let sites = SiteLayout::full();
        let layout = GenomeLayout::transformer(&sites);
        let mut rng = stream_rng(spec.seed, STREAM_DATA);
        let train = (0..spec.n_train).map(|_| sequence(&mut rng)).collect();
        let val = (0..spec.n_val).map(|_| sequence(&mut rng)).collect();
        Ok(ToyLmReward { spec, layout, sites, train, val })
    }

    /// The same training run with the mask machinery absent entirely.
    pub fn evaluate_baseline(&self, seed: u64) -> Result<EvalResult> {
        self.run(seed, None, sample_transformer_mask_adapter)
    }

    pub(crate) fn evaluate_with_sampler(
        &self,
        genome: &PatternGenome,
        seed: u64,
        sampler: MaskSampler,
    ) -> Result<EvalResult> {
        let specs = self.site_specs(genome)?;
        self.run(seed, Some(&specs), sampler)
    }

    fn site_specs(&self, genome: &PatternGenome) -> Result<Vec<TransformerPatternSpec>> {
        genome.matches_layout(&self.layout)?;
        let decoded = decode_transformer(genome, &self.sites)?;
        Ok(decoded.into_iter().map(|(_, s)| s).collect())
    }

    fn run(
        &self,
        seed: u64,
        specs: Option<&[TransformerPatternSpec]>,
        sampler: MaskSampler,
    ) -> Result<EvalResult> {
        let mut rng_init = stream_rng(seed, STREAM_INIT);
        let mut rng_mask = stream_rng(seed, STREAM_MASK);
        let mut rng_batch = stream_rng(seed, STREAM_BATCH);
        let mut params = init_params(&mut rng_init);
        let mut adam = Adam::new(self.spec.lr);
        let mut stats = DropStats::default();
        let mut train_applications = 0u64;
        let mut train_loss = Vec::with_capacity(self.spec.train_steps);
        let causal_mask =
            Tensor::from_fn(&[T_LEN, T_LEN], |i| if i % T_LEN <= i / T_LEN { 0.0 } else { MASKED });

        for _ in 0..self.spec.train_steps {
            let idx: Vec<usize> = (0..self.spec.batch_size)
                .map(|_| rng_batch.random_range(0..self.train.len()))
                .collect();
            let (inputs, targets) = flatten(&self.train, &idx);
            let mut tape = Tape::new();
            let vars = params.leaf_all(&mut tape)?;
            let causal = tape.constant(causal_mask.clone())?;
            let logits = match specs {
                Some(s) => {
                    let mut ctx = MaskCtx {
                        specs: s,
                        rate: self.spec.final_rate,
                        rng: &mut rng_mask,
                        stats: &mut stats,
                        sampler,
                    };
                    forward(&mut tape, &vars, &inputs, idx.len(), causal, Some(&mut ctx), &mut train_applications)?
                }
                None => forward(&mut tape, &vars, &inputs, idx.len(), causal, None, &mut train_applications)?,
            };
            let loss = tape.cross_entropy(logits, &targets)?;
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

        // held-out perplexity, masks structurally absent
        let mut eval_applications = 0u64;
        let mut nll_sum = 0.0;
        let mut n_tokens = 0usize;
        for chunk in (0..self.val.len()).collect::<Vec<_>>().chunks(self.spec.batch_size) {
            let (inputs, targets) = flatten(&self.val, chunk);
            let mut tape = Tape::new();
            let vars = params
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let causal = tape.constant(causal_mask.clone())?;
            let logits =
                forward(&mut tape, &vars, &inputs, chunk.len(), causal, None, &mut eval_applications)?;
            let ce = tape.cross_entropy(logits, &targets)?;
            let l = tape.value(ce).item();
            if !l.is_finite() {
                return Err(Error::EvalFailed(format!("non-finite validation loss {l}")));
            }
            nll_sum += l * targets.len() as f64;
            n_tokens += targets.len();
        }
        let ppl = (nll_sum / n_tokens as f64).exp();
        let mut res = EvalResult { perf: PPL_SCALE / ppl, metrics: Default::default(), train_loss };
        res.metrics.insert("valid_ppl".into(), ppl);
        res.metrics.insert("degenerate_masks".into(), stats.degenerate as f64);
        res.metrics.insert("identity_masks".into(), stats.identity as f64);
        res.metrics.insert("train_mask_applications".into(), train_applications as f64);
        res.metrics.insert("eval_mask_applications".into(), eval_applications as f64);
        Ok(res)
    }
}

impl RewardFn for ToyLmReward {
    fn name(&self) -> &'static str {
        "toy-lm"
    }

    fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    fn evaluate(&self, genome: &PatternGenome, seed: u64) -> Result<EvalResult> {
        self.evaluate_with_sampler(genome, seed, sample_transformer_mask_adapter)
    }
}

fn sample_transformer_mask_adapter(
    spec: &TransformerPatternSpec,
    shape: &[usize; 3],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Mask> {
    sample_transformer_mask(spec, shape, rate, rng)
}

/// One corpus segment of `T_LEN + 1` characters under the window grammar.
fn sequence(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut s = Vec::with_capacity(T_LEN + 1);
    s.push(rng.random_range(0..VOCAB));
    for t in 0..T_LEN {
        let j = rng.random_range(0..WINDOW);
        s.push((7 * s[t] + 3 + j) % VOCAB);
    }
    s
}

/// Inputs and next-character targets for the chosen sequences, flattened
/// batch-major for rank-2 activations.
fn flatten(seqs: &[Vec<usize>], idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(idx.len() * T_LEN);
    let mut targets = Vec::with_capacity(idx.len() * T_LEN);
    for &i in idx {
        inputs.extend_from_slice(&seqs[i][..T_LEN]);
        targets.extend_from_slice(&seqs[i][1..]);
    }
    (inputs, targets)
}

fn init_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("tok_emb", Tensor::randn(&[VOCAB, HIDDEN], 0.1, rng));
    p.add("pos_emb", Tensor::randn(&[T_LEN, HIDDEN], 0.05, rng));
    for l in 0..LAYERS {
        p.add(format!("l{l}_ln1_g"), Tensor::ones(&[HIDDEN]));
        p.add(format!("l{l}_ln1_b"), Tensor::zeros(&[HIDDEN]));
        p.add(format!("l{l}_wq"), Tensor::randn(&[HIDDEN, HEADS * HEAD_DIM], 0.08, rng));
        p.add(format!("l{l}_wk"), Tensor::randn(&[HIDDEN, HEADS * HEAD_DIM], 0.08, rng));
        p.add(format!("l{l}_wv"), Tensor::randn(&[HIDDEN, HEADS * HEAD_DIM], 0.08, rng));
        p.add(format!("l{l}_wo"), Tensor::randn(&[HEADS * HEAD_DIM, HIDDEN], 0.08, rng));
        p.add(format!("l{l}_ln2_g"), Tensor::ones(&[HIDDEN]));
        p.add(format!("l{l}_ln2_b"), Tensor::zeros(&[HIDDEN]));
        p.add(format!("l{l}_w1"), Tensor::randn(&[HIDDEN, FFN], 0.08, rng));
        p.add(format!("l{l}_w2"), Tensor::randn(&[FFN, HIDDEN], 0.08, rng));
    }
    p.add("ln_f_g", Tensor::ones(&[HIDDEN]));
    p.add("ln_f_b", Tensor::zeros(&[HIDDEN]));
    p.add("head_w", Tensor::randn(&[HIDDEN, VOCAB], 0.08, rng));
    p.add("head_b", Tensor::zeros(&[VOCAB]));
    p
}

struct MaskCtx<'a> {
    specs: &'a [TransformerPatternSpec],
    rate: f64,
    rng: &'a mut ChaCha8Rng,
    stats: &'a mut DropStats,
    sampler: MaskSampler,
}

// Site indices follow `TRANSFORMER_SITES` order.
const S_QUERY: usize = 0;
const S_KEY: usize = 1;
const S_VALUE: usize = 2;
const S_ATTN_PROBS: usize = 3;
const S_ATTN_OUT: usize = 4;
const S_ATTN_RESIDUAL: usize = 5;
const S_FFN_INNER: usize = 6;
const S_FFN_OUT: usize = 7;

/// Pre-LN causal transformer over `b` flattened sequences; returns
/// `[b·T_LEN, VOCAB]` logits.
fn forward(
    tape: &mut Tape,
    v: &[Var],
    inputs: &[usize],
    b: usize,
    causal: Var,
    mut masks: Option<&mut MaskCtx>,
    applications: &mut u64,
) -> Result<Var> {
    let pos: Vec<usize> = (0..b).flat_map(|_| 0..T_LEN).collect();
    let te = tape.embedding(v[0], inputs)?;
    let pe = tape.embedding(v[1], &pos)?;
    let mut x = tape.add(te, pe)?;
    for l in 0..LAYERS {
        let p = 2 + 10 * l;
        let h = tape.layer_norm(x, v[p], v[p + 1])?;
        let q = tape.matmul(h, v[p + 2])?;
        let q = site_mask(tape, q, S_QUERY, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        let k = tape.matmul(h, v[p + 3])?;
        let k = site_mask(tape, k, S_KEY, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        let val = tape.matmul(h, v[p + 4])?;
        let val = site_mask(tape, val, S_VALUE, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        let mut rows = Vec::with_capacity(b);
        for bi in 0..b {
            let mut heads = Vec::with_capacity(HEADS);
            for hd in 0..HEADS {
                let qb = tape.slice_rows(q, bi * T_LEN, T_LEN)?;
                let qb = tape.slice_cols(qb, hd * HEAD_DIM, HEAD_DIM)?;
                let kb = tape.slice_rows(k, bi * T_LEN, T_LEN)?;
                let kb = tape.slice_cols(kb, hd * HEAD_DIM, HEAD_DIM)?;
                let vb = tape.slice_rows(val, bi * T_LEN, T_LEN)?;
                let vb = tape.slice_cols(vb, hd * HEAD_DIM, HEAD_DIM)?;
                let kt = tape.transpose(kb)?;
                let sc = tape.matmul(qb, kt)?;
                let sc = tape.scale(sc, 1.0 / (HEAD_DIM as f64).sqrt())?;
                let sc = tape.add(sc, causal)?;
                let pr = tape.softmax(sc)?;
                let pr =
                    site_mask(tape, pr, S_ATTN_PROBS, [1, T_LEN, T_LEN], &mut masks, applications)?;
                heads.push(tape.matmul(pr, vb)?);
            }
            rows.push(tape.concat_cols(&heads)?);
        }
        let ctx_all = tape.concat_rows(&rows)?;
        let attn = tape.matmul(ctx_all, v[p + 5])?;
        let attn = site_mask(tape, attn, S_ATTN_OUT, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        let skip =
            site_mask(tape, x, S_ATTN_RESIDUAL, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        x = tape.add(skip, attn)?;
        let h2 = tape.layer_norm(x, v[p + 6], v[p + 7])?;
        let inner = tape.matmul(h2, v[p + 8])?;
        let inner = tape.relu(inner)?;
        let inner = site_mask(tape, inner, S_FFN_INNER, [b, T_LEN, FFN], &mut masks, applications)?;
        let out = tape.matmul(inner, v[p + 9])?;
        let out = site_mask(tape, out, S_FFN_OUT, [b, T_LEN, HIDDEN], &mut masks, applications)?;
        x = tape.add(x, out)?;
    }
    let base = 2 + 10 * LAYERS;
    let xf = tape.layer_norm(x, v[base], v[base + 1])?;
    let logits = tape.matmul(xf, v[base + 2])?;
    tape.add_bias(logits, v[base + 3])
}

fn site_mask(
    tape: &mut Tape,
    x: Var,
    site: usize,
    shape: [usize; 3],
    masks: &mut Option<&mut MaskCtx>,
    applications: &mut u64,
) -> Result<Var> {
    let Some(ctx) = masks.as_deref_mut() else {
        return Ok(x);
    };
    let m = (ctx.sampler)(&ctx.specs[site], &shape, ctx.rate, ctx.rng)?;
    *applications += 1;
    let m = m.reshape(tape.value(x).shape().to_vec())?;
    apply_drop(tape, x, &m, ctx.stats)
}
