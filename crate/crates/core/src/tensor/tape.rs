use std::sync::Arc;

use rand::Rng;

use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a batched attention call: a contiguous range
/// of query rows attending to a contiguous range of key rows under `mask`
/// (`q_len × k_len`, row-major, `true` = visible).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub q_offset: usize,
    pub q_len: usize,
    pub k_offset: usize,
    pub k_len: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionLayout {
    pub blocks: Vec<AttentionBlock>,
}

impl AttentionLayout {
    pub fn single(q_len: usize, k_len: usize, mask: Vec<bool>) -> Self {
        Self {
            blocks: vec![AttentionBlock {
                q_offset: 0,
                q_len,
                k_offset: 0,
                k_len,
                mask,
            }],
        }
    }

    fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.q_offset + blk.q_len > q_rows || blk.k_offset + blk.k_len > k_rows {
                return Err(Error::Shape(format!(
                    "attention block {b} exceeds operands ({q_rows} query rows, {k_rows} key rows)"
                )));
            }
            if blk.mask.len() != blk.q_len * blk.k_len {
                return Err(Error::Shape(format!(
                    "attention block {b} mask has {} entries, expected {}x{}",
                    blk.mask.len(),
                    blk.q_len,
                    blk.k_len
                )));
            }
            for i in 0..blk.q_len {
                if !blk.mask[i * blk.k_len..(i + 1) * blk.k_len].iter().any(|&m| m) {
                    return Err(Error::Masking(format!(
                        "query row {i} of attention block {b} has no visible key"
                    )));
                }
            }
        }
        Ok(())
    }

    fn prob_offsets(&self, heads: usize) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for blk in &self.blocks {
            offsets.push(acc);
            acc += heads * blk.q_len * blk.k_len;
        }
        offsets
    }
}

/// Activation variant for [`Tape::gelu`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeluKind {
    Erf,
    Tanh,
}

enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        scale: T,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
        /// dGELU/dx at each input, filled during the forward pass.
        slope: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Tape::cross_entropy_logits`].
#[derive(Clone, Debug)]
pub struct CrossEntropyOutput<T: Real> {
    /// Scalar loss node (weighted mean over supervised positions).
    pub loss: Var,
    /// Unweighted `-log p(target)` per row; 0 for ignored rows.
    pub per_position: Vec<T>,
    /// `p(target)` per row; 0 for ignored rows.
    pub target_prob: Vec<T>,
    pub supervised: usize,
}

impl<T: Real> CrossEntropyOutput<T> {
    pub fn no_supervised_positions(&self) -> bool {
        self.supervised == 0
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so every node comes after the
/// nodes producing its inputs. A tape is single-threaded; use one per worker.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a tensor as an input; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes are well formed")
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return shape_err(format!("{what} expects a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return shape_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "add needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "mul needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `row` (length = last dimension of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.node(row).data.len() != cols {
            return shape_err(format!(
                "add_row: row of shape {:?} does not match {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&a| a * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return shape_err(format!("slice_rows {start}..{} of {rows} rows", start + len));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows of nothing");
        }
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return shape_err(format!("concat_rows: column mismatch {c} vs {cols}"));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return shape_err(format!("slice_cols {start}..{} of {cols} columns", start + len));
        }
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols of nothing");
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return shape_err(format!("concat_cols: row mismatch {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return shape_err("gather_rows with no ids");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row id {bad} outside table of {rows} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Softmax of `scale · x` over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var, scale: T) -> Result<Var> {
        self.softmax_impl(x, scale, None)
    }

    /// Softmax over the visible entries of each last-dimension slice; hidden
    /// entries get exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, scale: T, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return shape_err(format!(
                "mask of {} entries for tensor of shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        self.softmax_impl(x, scale, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, scale: T, mask: Option<Vec<bool>>) -> Result<Var> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::Numeric(format!("softmax scale must be positive, got {scale}")));
        }
        let (_, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            return shape_err("softmax over an empty last dimension");
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for (r, (src, dst)) in xs.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let visible = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            if !(0..cols).any(visible) {
                return Err(Error::Masking(format!("softmax row {r} is fully masked")));
            }
            softmax_row(src, dst, scale, visible);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, scale }, &[x]))
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies the optional affine `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            return shape_err("layer_norm over an empty slice");
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != cols {
                return shape_err(format!(
                    "layer_norm parameter of shape {:?} for slices of {cols}",
                    self.shape(p)
                ));
            }
        }
        let n = T::of(cols as f64);
        let xs = self.value(x);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &xs[r * cols..(r + 1) * cols];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *h = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g);
            out.chunks_mut(cols)
                .for_each(|row| row.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o * gv));
        }
        if let Some(b) = bias {
            let b = self.value(b);
            out.chunks_mut(cols)
                .for_each(|row| row.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv));
        }
        let shape = self.shape(x).to_vec();
        let inputs: Vec<Var> = std::iter::once(x).chain(gain).chain(bias).collect();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &inputs,
        ))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        let (out, slope) = self.value(x).iter().map(|&v| gelu_with_grad(v, kind)).unzip();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x, slope }, &[x])
    }

    /// Inverted dropout. Returns `x` itself when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let survive = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { survive })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&a, &k)| a * k)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, keep }, &[x]))
    }

    /// Mean cross-entropy of `logits` (`n×V`) against `targets`; entries equal
    /// to `ignore_index` are excluded. With no supervised rows the loss is 0.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<CrossEntropyOutput<T>> {
        let weights = vec![T::one(); targets.len()];
        self.weighted_cross_entropy(logits, targets, ignore_index, &weights, None)
    }

    /// `Σ w_i · CE_i / denom` over supervised rows. The weights are constants
    /// (no gradient flows into them). `denom` defaults to the number of
    /// supervised rows.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
        weights: &[T],
        denom: Option<T>,
    ) -> Result<CrossEntropyOutput<T>> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return shape_err(format!(
                "cross_entropy: {n} logit rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            ));
        }
        let mut parsed = Vec::with_capacity(n);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if t < 0 || t as usize >= vocab {
                return Err(Error::Index(format!(
                    "target {t} outside [0, {vocab}) and not ignore_index {ignore_index}"
                )));
            } else {
                parsed.push(Some(t as usize));
            }
        }
        let supervised = parsed.iter().filter(|t| t.is_some()).count();
        let denom = denom.unwrap_or_else(|| T::of(supervised.max(1) as f64));
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut per_position = vec![T::zero(); n];
        let mut target_prob = vec![T::zero(); n];
        let mut total = T::zero();
        for (i, t) in parsed.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &xs[i * vocab..(i + 1) * vocab];
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            softmax_row(row, p, T::one(), |_| true);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let ce = lse - row[t];
            per_position[i] = ce;
            target_prob[i] = p[t];
            total = total + weights[i] * ce;
        }
        let value = if supervised == 0 { T::zero() } else { total / denom };
        let loss = self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: parsed,
                weights: weights.to_vec(),
                probs,
                denom,
            },
            &[logits],
        );
        Ok(CrossEntropyOutput {
            loss,
            per_position,
            target_prob,
            supervised,
        })
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// Columns of `q`, `k`, `v` (all of width `d`) are split into `heads`
    /// equal slices. Each block of `layout` computes
    /// `softmax(scale · Q Kᵀ) V` for its rows under its mask; the per-head
    /// outputs are written side by side into the block's query rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let (nq, d) = self.dims2(q, "attention")?;
        let (nk, dk_) = self.dims2(k, "attention")?;
        let (nv, dv_) = self.dims2(v, "attention")?;
        if dk_ != d || dv_ != d || nv != nk {
            return shape_err(format!(
                "attention operands disagree: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        layout.validate(nq, nk)?;
        let hd = d / heads;
        let offsets = layout.prob_offsets(heads);
        let total = offsets.last().map_or(0, |&o| {
            let b = layout.blocks.last().unwrap();
            o + heads * b.q_len * b.k_len
        });
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); nq * d];
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut scores = Vec::new();
        for (blk, &off) in layout.blocks.iter().zip(&offsets) {
            let (ql, kl) = (blk.q_len, blk.k_len);
            scores.resize(kl, T::zero());
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..ql {
                    let qrow = &qs[(blk.q_offset + i) * d + c0..][..hd];
                    let mrow = &blk.mask[i * kl..(i + 1) * kl];
                    for j in 0..kl {
                        scores[j] = if mrow[j] {
                            let krow = &ks[(blk.k_offset + j) * d + c0..][..hd];
                            dot(qrow, krow)
                        } else {
                            T::zero()
                        };
                    }
                    let p = &mut probs[off + (h * ql + i) * kl..][..kl];
                    softmax_row(&scores, p, scale, |j| mrow[j]);
                    let orow = &mut out[(blk.q_offset + i) * d + c0..][..hd];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != T::zero() {
                            let vrow = &vs[(blk.k_offset + j) * d + c0..][..hd];
                            orow.iter_mut().zip(vrow).for_each(|(o, &vv)| *o = *o + pj * vv);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities of an [`Tape::attention`] node, as
    /// `(layout, heads, per-block offsets, flat probabilities)`. Block `b`,
    /// head `h`, row `i`, column `j` lives at
    /// `offsets[b] + (h * q_len + i) * k_len + j`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionLayout, usize, Vec<usize>, &[T])> {
        match &self.node(v).op {
            Op::Attention {
                layout,
                heads,
                probs,
                ..
            } => Some((layout, *heads, layout.prob_offsets(*heads), probs)),
            _ => None,
        }
    }

    /// Reverse-mode sweep from the scalar `root`, visiting nodes in exact
    /// reverse of recording order.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let root_node = self.node(root);
        if root_node.data.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    T::gemm(m, n, k, g, false, self.value(*b), !*trans_b, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        T::gemm(n, m, k, g, true, self.value(*a), false, gb, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        T::gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let cols = gr.len();
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi * *factor);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.shape[1];
                let cols = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(w)) {
                        add_into(&mut dst[*start..*start + w], src);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut c0 = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dst, &src[c0..c0 + w]);
                        }
                    }
                    c0 += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = node.shape[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Softmax { x, scale } => {
                let cols = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, y), gy) in gx
                        .chunks_mut(cols)
                        .zip(node.data.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let s = dot(y, gy);
                        for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                            *o = *o + *scale * yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = *node.shape.last().unwrap();
                let n = T::of(cols as f64);
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for chunk in g.chunks(cols) {
                            add_into(gb, chunk);
                        }
                    }
                }
                if let Some(gn) = gain {
                    if let Some(gg) = self.slot(grads, *gn) {
                        for (gc, hc) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((o, &gi), &hi) in gg.iter_mut().zip(gc).zip(hc) {
                                *o = *o + gi * hi;
                            }
                        }
                    }
                }
                let gain_vals = gain.map(|v| self.value(v).to_vec());
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, ((dst, gc), hc)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for j in 0..cols {
                            dxhat[j] = match &gain_vals {
                                Some(gv) => gc[j] * gv[j],
                                None => gc[j],
                            };
                        }
                        let sum_d = dxhat.iter().copied().sum::<T>();
                        let sum_dh = dot(&dxhat, hc);
                        let k = inv_std[r] / n;
                        for j in 0..cols {
                            dst[j] = dst[j] + k * (n * dxhat[j] - sum_d - hc[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu { x, slope } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &si) in gx.iter_mut().zip(g).zip(slope) {
                        *o = *o + gi * si;
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &k) in gx.iter_mut().zip(g).zip(keep) {
                        *o = *o + gi * k;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                let vocab = self.shape(*logits)[1];
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let coef = g[0] * weights[i] / *denom;
                        let dst = &mut gl[i * vocab..(i + 1) * vocab];
                        for (o, &p) in dst.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                            *o = *o + coef * p;
                        }
                        dst[t] = dst[t] - coef;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                scale,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                layout,
                *heads,
                *scale,
                probs,
                g,
                grads,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        layout: &AttentionLayout,
        heads: usize,
        scale: T,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(q)[1];
        let hd = d / heads;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let nq = qs.len();
        let nk = ks.len();
        // q, k and v may alias the same node; accumulate locally first.
        let mut dq = vec![T::zero(); nq];
        let mut dk = vec![T::zero(); nk];
        let mut dv = vec![T::zero(); nk];
        let offsets = layout.prob_offsets(heads);
        let mut dp = Vec::new();
        for (blk, &off) in layout.blocks.iter().zip(&offsets) {
            let (ql, kl) = (blk.q_len, blk.k_len);
            dp.resize(kl, T::zero());
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..ql {
                    let p = &probs[off + (h * ql + i) * kl..][..kl];
                    let qi = (blk.q_offset + i) * d + c0;
                    let go = &g[qi..qi + hd];
                    for j in 0..kl {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let kj = (blk.k_offset + j) * d + c0;
                        dp[j] = dot(go, &vs[kj..kj + hd]);
                        for (o, &gc) in dv[kj..kj + hd].iter_mut().zip(go) {
                            *o = *o + p[j] * gc;
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..kl {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = scale * p[j] * (dp[j] - s);
                        let kj = (blk.k_offset + j) * d + c0;
                        for c in 0..hd {
                            dq[qi + c] = dq[qi + c] + ds * ks[kj + c];
                            dk[kj + c] = dk[kj + c] + ds * qs[qi + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                add_into(slot, &buf);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.data.len()]))
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Max-subtracted softmax of `scale · src` over the visible entries.
fn softmax_row<T: Real>(src: &[T], dst: &mut [T], scale: T, visible: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in src.iter().enumerate() {
        if visible(j) {
            max = max.max(v * scale);
        }
    }
    let mut total = T::zero();
    for (j, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
        *o = if visible(j) {
            let e = (v * scale - max).exp();
            total = total + e;
            e
        } else {
            T::zero()
        };
    }
    dst.iter_mut().for_each(|o| *o = *o / total);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_with_grad<T: Real>(x: T, kind: GeluKind) -> (T, T) {
    let half = T::of(0.5);
    match kind {
        GeluKind::Erf => {
            let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
            (x * cdf, cdf + x * pdf)
        }
        GeluKind::Tanh => {
            let c = T::of(SQRT_2_OVER_PI);
            let a = T::of(GELU_CUBIC);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            let value = half * x * (T::one() + t);
            (value, half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x))
        }
    }
}
