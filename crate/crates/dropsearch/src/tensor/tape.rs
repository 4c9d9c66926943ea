//! Wengert-list reverse-mode autodiff.
//!
//! Values live in an arena owned by the [`Tape`]; every op records its input
//! ids and enough metadata to replay itself backwards. The backward pass
//! visits nodes in exact reverse recording order, which also pins the
//! floating-point accumulation order.

use super::{dims2, Elem, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Conv2d(usize, usize),
    Pad2d(usize, usize),
    GlobalAvgPool(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    ChannelNorm { x: usize, gain: usize, bias: usize },
    Embedding { table: usize, indices: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. A value that
/// does not participate in the loss has no entry.
pub struct Gradients<T: Elem = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient that must exist (e.g. a trainable parameter in an update step).
    pub fn require(&self, v: Var, name: &str) -> Result<&Tensor<T>> {
        self.get(v)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter `{name}`")))
    }
}

pub struct Tape<T: Elem = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an input value. `needs_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    // ── elementwise and shape ops ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("add", out, Op::Add(a.0, b.0), needs)
    }

    /// `x + bias` where `bias` has the length of x's trailing axis and is
    /// broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let m = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % m])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x.0) || self.needs(bias.0);
        self.push("add_bias", out, Op::AddBias(x.0, bias.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("mul", out, Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(x).map(|v| v * k);
        let needs = self.needs(x.0);
        self.push("scale", out, Op::Scale(x.0, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x.0);
        self.push("relu", out, Op::Relu(x.0), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims2(tx, "transpose")?;
        let xd = tx.data();
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = xd[i * m + j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x.0);
        self.push("transpose", out, Op::Transpose(x.0), needs)
    }

    // ── matmul ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims2(ta, "matmul")?;
        let (kb, m) = dims2(tb, "matmul")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = matmul_data(ta.data(), tb.data(), n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("matmul", out, Op::Matmul(a.0, b.0), needs)
    }

    // ── reductions and row ops ─────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x.0);
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::contract("mean of empty tensor".to_string()));
        }
        let s = tx.data().iter().copied().sum::<T>() / T::of(tx.len() as f64);
        let needs = self.needs(x.0);
        self.push("mean", Tensor::scalar(s), Op::Mean(x.0), needs)
    }

    /// Extract a single element (by flat index) as a rank-0 tensor.
    pub fn pick(&mut self, x: Var, flat: usize) -> Result<Var> {
        let tx = self.value(x);
        if flat >= tx.len() {
            return Err(Error::contract(format!(
                "pick index {flat} out of range for {} elements",
                tx.len()
            )));
        }
        let v = tx.data()[flat];
        let needs = self.needs(x.0);
        self.push("pick", Tensor::scalar(v), Op::Pick(x.0, flat), needs)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = rowwise(tx, softmax_row)?;
        let needs = self.needs(x.0);
        self.push("softmax", out, Op::Softmax(x.0), needs)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = rowwise(tx, log_softmax_row)?;
        let needs = self.needs(x.0);
        self.push("log_softmax", out, Op::LogSoftmax(x.0), needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims2(tx, "slice_rows")?;
        if start + len > n {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of range for {n} rows",
                start + len
            )));
        }
        let data = tx.data()[start * m..(start + len) * m].to_vec();
        let out = Tensor::new(vec![len, m], data)?;
        let needs = self.needs(x.0);
        self.push("slice_rows", out, Op::SliceRows(x.0, start, len), needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = dims2(tx, "slice_cols")?;
        if start + len > m {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of range for {m} cols",
                start + len
            )));
        }
        let xd = tx.data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        let needs = self.needs(x.0);
        self.push("slice_cols", out, Op::SliceCols(x.0, start, len), needs)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors".to_string()));
        }
        let m = dims2(self.value(xs[0]), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            let (r, c) = dims2(t, "concat_rows")?;
            if c != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, m], data)?;
        let needs = xs.iter().any(|v| self.needs(v.0));
        let ids = xs.iter().map(|v| v.0).collect();
        self.push("concat_rows", out, Op::ConcatRows(ids), needs)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors".to_string()));
        }
        let n = dims2(self.value(xs[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.value(v);
            let (r, c) = dims2(t, "concat_cols")?;
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let m: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * m];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let xd = self.value(v).data();
            for i in 0..n {
                data[i * m + off..i * m + off + w].copy_from_slice(&xd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![n, m], data)?;
        let needs = xs.iter().any(|v| self.needs(v.0));
        let ids = xs.iter().map(|v| v.0).collect();
        self.push("concat_cols", out, Op::ConcatCols(ids), needs)
    }

    // ── network ops ────────────────────────────────────────────────────────

    /// Valid (no padding, stride 1) 2-d convolution, NHWC input and
    /// `[kh, kw, c_in, c_out]` kernel. Desk scale only: kernel ≤ 5,
    /// channels ≤ 64.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (shape_i, shape_k) = (ti.shape().to_vec(), tk.shape().to_vec());
        let [n, h, w, ci] = shape_i[..] else {
            return Err(Error::contract(format!(
                "conv2d input must be rank-4 NHWC, got {shape_i:?}"
            )));
        };
        let [kh, kw, cik, co] = shape_k[..] else {
            return Err(Error::contract(format!(
                "conv2d kernel must be rank-4 [kh, kw, c_in, c_out], got {shape_k:?}"
            )));
        };
        if ci != cik || h < kh || w < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: shape_i,
                rhs: shape_k,
            });
        }
        if kh > 5 || kw > 5 || ci > 64 || co > 64 {
            return Err(Error::contract(format!(
                "conv2d is desk scale only (kernel ≤ 5, channels ≤ 64), got kernel {kh}x{kw}, channels {ci}->{co}"
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (xd, kd) = (ti.data(), tk.data());
        let mut out = vec![T::zero(); n * oh * ow * co];
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let o0 = ((b * oh + y) * ow + x) * co;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let i0 = ((b * h + y + ky) * w + x + kx) * ci;
                            for c in 0..ci {
                                let xv = xd[i0 + c];
                                let k0 = ((ky * kw + kx) * ci + c) * co;
                                for oc in 0..co {
                                    out[o0 + oc] += xv * kd[k0 + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, co], out)?;
        let needs = self.needs(input.0) || self.needs(kernel.0);
        self.push("conv2d", out, Op::Conv2d(input.0, kernel.0), needs)
    }

    /// Zero-pad the spatial axes of an NHWC tensor by `pad` on every side,
    /// so a `2·pad + 1` valid convolution preserves the extent.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::contract(format!(
                "pad2d expects rank-4 NHWC, got {shape:?}"
            )));
        };
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xd = tx.data();
        let mut out = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i0 = ((b * h + y) * w + xx) * c;
                    let o0 = ((b * oh + y + pad) * ow + xx + pad) * c;
                    out[o0..o0 + c].copy_from_slice(&xd[i0..i0 + c]);
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        let needs = self.needs(x.0);
        self.push("pad2d", out, Op::Pad2d(x.0, pad), needs)
    }

    /// Mean over the spatial axes of an NHWC tensor, yielding `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::contract(format!(
                "global_avg_pool expects rank-4 NHWC, got {shape:?}"
            )));
        };
        let inv = T::of(1.0 / (h * w) as f64);
        let xd = tx.data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let i0 = ((b * h + y) * w + xx) * c;
                    for ch in 0..c {
                        out[b * c + ch] += xd[i0 + ch];
                    }
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let out = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(x.0);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x.0), needs)
    }

    /// Per-row normalization over the trailing axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let m = *tx.shape().last().ok_or_else(|| Error::contract("layer_norm on rank-0".to_string()))?;
        if tg.shape() != [m] || tb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (gd, bd) = (tg.data(), tb.data());
        let xd = tx.data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..xd.len() / m {
            let row = &xd[r * m..(r + 1) * m];
            let (mean, inv) = moments(row);
            for j in 0..m {
                out[r * m + j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            needs,
        )
    }

    /// Per-channel normalization over all leading axes (channels last), with
    /// learned per-channel gain/bias. Statistics always come from the current
    /// batch, so the op is a pure function of its inputs.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = *tx.shape().last().ok_or_else(|| Error::contract("channel_norm on rank-0".to_string()))?;
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if tx.len() == c {
            return Err(Error::contract(
                "channel_norm needs more than one sample per channel".to_string(),
            ));
        }
        let (gd, bd) = (tg.data(), tb.data());
        let xd = tx.data();
        let mut out = vec![T::zero(); xd.len()];
        let rows = xd.len() / c;
        for ch in 0..c {
            let (mean, inv) = moments_strided(xd, ch, c, rows);
            for r in 0..rows {
                let i = r * c + ch;
                out[i] = gd[ch] * (xd[i] - mean) * inv + bd[ch];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            "channel_norm",
            out,
            Op::ChannelNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            needs,
        )
    }

    /// Gather rows of an embedding table: `table[v, d]` × indices → `[len, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims2(tt, "embedding")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of range for table of {v} rows"
            )));
        }
        let td = tt.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let needs = self.needs(table.0);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Mean negative log-likelihood of integer targets under row logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = dims2(tl, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy got {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!(
                "cross_entropy target {bad} out of range for {k} classes"
            )));
        }
        let ld = tl.data();
        let mut nll = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            nll += lse - row[t];
        }
        let loss = Tensor::scalar(nll / T::of(n as f64));
        let needs = self.needs(logits.0);
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// node; unreachable or constant nodes have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape".to_string()));
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.add_from(gd));
                self.acc(grads, *b, |d| d.add_from(gd));
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |d| d.add_from(gd));
                let m = self.nodes[*bias].value.len();
                self.acc(grads, *bias, |d| {
                    for (k, &gv) in gd.iter().enumerate() {
                        d[k % m] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * bv[k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * av[k];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                // dA[i,p] = Σ_j g[i,j]·B[p,j]
                self.acc(grads, *a, |d| {
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let mut s = T::zero();
                            for j in 0..m {
                                s += grow[j] * brow[j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                // dB[p,j] = Σ_i A[i,p]·g[i,j]
                self.acc(grads, *b, |d| {
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            let drow = &mut d[p * m..(p + 1) * m];
                            for j in 0..m {
                                drow[j] += a_ip * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                self.acc(grads, *x, |d| {
                    for j in 0..m {
                        for i in 0..n {
                            d[i * m + j] += gd[j * n + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        if xv[k] > T::zero() {
                            d[k] += gd[k];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for r in 0..y.len() / m {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &gd[r * m..(r + 1) * m]);
                        let mut dot = T::zero();
                        for j in 0..m {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..m {
                            d[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let m = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for r in 0..y.len() / m {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &gd[r * m..(r + 1) * m]);
                        let gsum = gr.iter().copied().sum::<T>();
                        for j in 0..m {
                            d[r * m + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let gv = gd[0] / T::of(n as f64);
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Pick(x, flat) => {
                let gv = gd[0];
                let flat = *flat;
                self.acc(grads, *x, |d| d[flat] += gv);
            }
            Op::SliceRows(x, start, _len) => {
                let m = *self.nodes[*x].value.shape().last().unwrap();
                let off = start * m;
                self.acc(grads, *x, |d| {
                    for (k, &gv) in gd.iter().enumerate() {
                        d[off + k] += gv;
                    }
                });
            }
            Op::SliceCols(x, start, len) => {
                let m = self.nodes[*x].value.shape()[1];
                let (start, len) = (*start, *len);
                self.acc(grads, *x, |d| {
                    for r in 0..gd.len() / len {
                        for j in 0..len {
                            d[r * m + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &x in ids {
                    let n = self.nodes[x].value.len();
                    self.acc(grads, x, |d| {
                        for k in 0..n {
                            d[k] += gd[off + k];
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(ids) => {
                let m = *node.value.shape().last().unwrap();
                let mut off = 0;
                for &x in ids {
                    let t = &self.nodes[x].value;
                    let (rows, w) = (t.shape()[0], t.shape()[1]);
                    self.acc(grads, x, |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += gd[r * m + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Conv2d(input, kernel) => {
                let ti = &self.nodes[*input].value;
                let tk = &self.nodes[*kernel].value;
                let [n, h, w, ci] = ti.shape() else { unreachable!() };
                let [kh, kw, _, co] = tk.shape() else { unreachable!() };
                let (n, h, w, ci, kh, kw, co) = (*n, *h, *w, *ci, *kh, *kw, *co);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let (xd, kd) = (ti.data(), tk.data());
                self.acc(grads, *input, |d| {
                    for b in 0..n {
                        for y in 0..oh {
                            for x in 0..ow {
                                let o0 = ((b * oh + y) * ow + x) * co;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let i0 = ((b * h + y + ky) * w + x + kx) * ci;
                                        for c in 0..ci {
                                            let k0 = ((ky * kw + kx) * ci + c) * co;
                                            let mut s = T::zero();
                                            for oc in 0..co {
                                                s += gd[o0 + oc] * kd[k0 + oc];
                                            }
                                            d[i0 + c] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *kernel, |d| {
                    for b in 0..n {
                        for y in 0..oh {
                            for x in 0..ow {
                                let o0 = ((b * oh + y) * ow + x) * co;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let i0 = ((b * h + y + ky) * w + x + kx) * ci;
                                        for c in 0..ci {
                                            let xv = xd[i0 + c];
                                            let k0 = ((ky * kw + kx) * ci + c) * co;
                                            for oc in 0..co {
                                                d[k0 + oc] += xv * gd[o0 + oc];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Pad2d(x, pad) => {
                let tx = &self.nodes[*x].value;
                let [n, h, w, c] = tx.shape() else { unreachable!() };
                let (n, h, w, c, pad) = (*n, *h, *w, *c, *pad);
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let i0 = ((b * h + y) * w + xx) * c;
                                let o0 = ((b * oh + y + pad) * ow + xx + pad) * c;
                                for ch in 0..c {
                                    d[i0 + ch] += gd[o0 + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let tx = &self.nodes[*x].value;
                let [n, h, w, c] = tx.shape() else { unreachable!() };
                let (n, h, w, c) = (*n, *h, *w, *c);
                let inv = T::of(1.0 / (h * w) as f64);
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let i0 = ((b * h + y) * w + xx) * c;
                                for ch in 0..c {
                                    d[i0 + ch] += gd[b * c + ch] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = &self.nodes[*x].value;
                let gainv = self.nodes[*gain].value.data();
                let m = *tx.shape().last().unwrap();
                let xd = tx.data();
                let rows = xd.len() / m;
                // recompute row statistics
                let mut xhat = vec![T::zero(); xd.len()];
                let mut invs = vec![T::zero(); rows];
                for r in 0..rows {
                    let row = &xd[r * m..(r + 1) * m];
                    let (mean, inv) = moments(row);
                    invs[r] = inv;
                    for j in 0..m {
                        xhat[r * m + j] = (row[j] - mean) * inv;
                    }
                }
                self.acc(grads, *gain, |d| {
                    for r in 0..rows {
                        for j in 0..m {
                            d[j] += gd[r * m + j] * xhat[r * m + j];
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for r in 0..rows {
                        for j in 0..m {
                            d[j] += gd[r * m + j];
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    let inv_m = T::of(1.0 / m as f64);
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            let dxh = gd[r * m + j] * gainv[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * m + j];
                        }
                        let (m1, m2) = (s1 * inv_m, s2 * inv_m);
                        for j in 0..m {
                            let dxh = gd[r * m + j] * gainv[j];
                            d[r * m + j] += invs[r] * (dxh - m1 - xhat[r * m + j] * m2);
                        }
                    }
                });
            }
            Op::ChannelNorm { x, gain, bias } => {
                let tx = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.data();
                let c = *tx.shape().last().unwrap();
                let xd = tx.data();
                let rows = xd.len() / c;
                let mut xhat = vec![T::zero(); xd.len()];
                let mut invs = vec![T::zero(); c];
                for ch in 0..c {
                    let (mean, inv) = moments_strided(xd, ch, c, rows);
                    invs[ch] = inv;
                    for r in 0..rows {
                        xhat[r * c + ch] = (xd[r * c + ch] - mean) * inv;
                    }
                }
                self.acc(grads, *gain, |d| {
                    for r in 0..rows {
                        for ch in 0..c {
                            d[ch] += gd[r * c + ch] * xhat[r * c + ch];
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for r in 0..rows {
                        for ch in 0..c {
                            d[ch] += gd[r * c + ch];
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    let inv_n = T::of(1.0 / rows as f64);
                    for ch in 0..c {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for r in 0..rows {
                            let dxh = gd[r * c + ch] * gv[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[r * c + ch];
                        }
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        for r in 0..rows {
                            let dxh = gd[r * c + ch] * gv[ch];
                            d[r * c + ch] += invs[ch] * (dxh - m1 - xhat[r * c + ch] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d_cols = self.nodes[*table].value.shape()[1];
                self.acc(grads, *table, |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d_cols {
                            d[idx * d_cols + j] += gd[r * d_cols + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = &self.nodes[*logits].value;
                let (n, k) = (tl.shape()[0], tl.shape()[1]);
                let ld = tl.data();
                let gv = gd[0] / T::of(n as f64);
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * k..(r + 1) * k];
                        let mut soft = vec![T::zero(); k];
                        softmax_row(row, &mut soft);
                        for j in 0..k {
                            let delta = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += (soft[j] - delta) * gv;
                        }
                    }
                });
            }
        }
    }

    /// Accumulate into the gradient slot of node `x` (if it needs one),
    /// allocating zeros on first touch.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], x: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[x].needs_grad {
            return;
        }
        let slot = grads[x].get_or_insert_with(|| Tensor::zeros(self.nodes[x].value.shape()));
        f(slot.data_mut());
    }
}

trait AddFrom<T> {
    fn add_from(&mut self, src: &[T]);
}

impl<T: Elem> AddFrom<T> for [T] {
    fn add_from(&mut self, src: &[T]) {
        for (d, &s) in self.iter_mut().zip(src) {
            *d += s;
        }
    }
}

// ── shared numeric helpers ─────────────────────────────────────────────────

fn matmul_data<T: Elem>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row<T: Elem>(row: &[T], out: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row<T: Elem>(row: &[T], out: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn rowwise<T: Elem>(t: &Tensor<T>, f: impl Fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    let m = *t
        .shape()
        .last()
        .ok_or_else(|| Error::contract("rowwise op on rank-0 tensor".to_string()))?;
    if m == 0 {
        return Err(Error::contract("rowwise op on zero-width axis".to_string()));
    }
    let xd = t.data();
    let mut out = vec![T::zero(); xd.len()];
    for r in 0..xd.len() / m {
        f(&xd[r * m..(r + 1) * m], &mut out[r * m..(r + 1) * m]);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Mean and 1/√(var+ε) of a contiguous slice (biased variance).
fn moments<T: Elem>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, (var + T::of(NORM_EPS)).sqrt().recip())
}

fn moments_strided<T: Elem>(xd: &[T], ch: usize, c: usize, rows: usize) -> (T, T) {
    let n = T::of(rows as f64);
    let mut mean = T::zero();
    for r in 0..rows {
        mean += xd[r * c + ch];
    }
    mean /= n;
    let mut var = T::zero();
    for r in 0..rows {
        let d = xd[r * c + ch] - mean;
        var += d * d;
    }
    var /= n;
    (mean, (var + T::of(NORM_EPS)).sqrt().recip())
}
