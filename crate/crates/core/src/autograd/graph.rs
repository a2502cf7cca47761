//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so walking
//! the tape backwards is a valid reverse topological order.

use crate::autograd::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every position sees every position.
    Full,
    /// Position `i` sees `j <= i`; the first `prefix` positions additionally
    /// see each other.
    Causal { prefix: usize },
}

impl AttnMask {
    #[inline]
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal { prefix } => key <= query || (query < prefix && key < prefix),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, factor: f64 },
    Tanh { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, width: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Concat { parts: Vec<(Var, usize)>, batch: usize, width: usize },
    Slice { x: Var, batch: usize, seq: usize, start: usize, len: usize, width: usize },
    Expand { x: Var },
    Reshape { x: Var },
    Gather { table: Var, ids: Vec<usize>, width: usize },
    Sum { x: Var },
    Mean { x: Var },
    CosineRows { a: Var, b: Var, width: usize, norms: Vec<(f64, f64, f64)> },
    BceLogits { z: Var, labels: Vec<f64> },
    DiversityLoss { logits: Var, targets: Vec<Option<usize>>, vocab: usize, lambda: f64, eps: f64, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Scalar summaries recorded alongside a diversity-loss node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub ce: f64,
    pub entropy: f64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariants")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward computes a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a tensor as a leaf with an explicit differentiability flag.
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        self.linear(a, b)
    }

    /// `[..., k] x [k, n] -> [..., n]`; leading axes are flattened into rows.
    pub fn linear(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    fn row_width(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sx.last() != Some(&sr[0]) {
            return Err(Error::dim(op, sx, sr));
        }
        Ok(sr[0])
    }

    /// Adds a `[n]` row to every trailing slice of `x: [..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_width("add_row", x, row)?;
        let r = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let ng = self.ng(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row }, ng))
    }

    /// Multiplies every trailing slice of `x: [..., n]` by a `[n]` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_width("mul_row", x, row)?;
        let r = self.value(row).to_vec();
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a * b))
            .collect();
        let ng = self.ng(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Tanh { x }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Contract("softmax of rank-0 tensor".into()))?;
        let mut out = self.value(x).to_vec();
        out.chunks_mut(width).for_each(softmax_in_place);
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, width }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.row_width("layer_norm", x, gain)?;
        self.row_width("layer_norm", x, bias)?;
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    let h = (row[i] - mean) * is;
                    xhat[r * d + i] = h;
                    out[r * d + i] = h * g[i] + b[i];
                }
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `[batch, seq, width]`
    /// query, key and value tensors. Heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::dim("attention", &s, self.shape(k)));
        }
        let (batch, seq, width) = (s[0], s[1], s[2]);
        if heads == 0 || width % heads != 0 {
            return Err(Error::Contract(format!("width {width} not divisible by {heads} heads")));
        }
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        for b in 0..batch {
            let base = b * seq * width;
            for h in 0..heads {
                let off = base + h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[off + i * width..off + i * width + hd];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask.allows(i, j) {
                            let kj = &kv[off + j * width..off + j * width + hd];
                            let sc = dot(qi, kj) * scale;
                            prow[j] = sc;
                            max = max.max(sc);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        if mask.allows(i, j) {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        } else {
                            prow[j] = 0.0;
                        }
                    }
                    let oi = off + i * width;
                    for j in 0..seq {
                        let p = prow[j] / z;
                        prow[j] = p;
                        if p != 0.0 {
                            let vj = &vv[off + j * width..off + j * width + hd];
                            for (o, &x) in out[oi..oi + hd].iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            s,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Concatenates `[batch, len_i, width]` tensors along the sequence axis.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(Error::dim("concat_seq", &s0, &[3]));
        }
        let (batch, width) = (s0[0], s0[2]);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != batch || s[2] != width {
                return Err(Error::dim("concat_seq", &s0, s));
            }
            lens.push((p, s[1]));
        }
        let total: usize = lens.iter().map(|(_, l)| l).sum();
        let mut out = Vec::with_capacity(batch * total * width);
        for b in 0..batch {
            for &(p, len) in &lens {
                let pv = self.value(p);
                out.extend_from_slice(&pv[b * len * width..(b + 1) * len * width]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            vec![batch, total, width],
            out,
            Op::Concat {
                parts: lens,
                batch,
                width,
            },
            ng,
        ))
    }

    /// Keeps sequence positions `start..start+len` of a `[batch, seq, width]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || start + len > s[1] || len == 0 {
            return Err(Error::dim("slice_seq", &s, &[start, len]));
        }
        let (batch, seq, width) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * len * width);
        for b in 0..batch {
            let from = (b * seq + start) * width;
            out.extend_from_slice(&xv[from..from + len * width]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![batch, len, width],
            out,
            Op::Slice {
                x,
                batch,
                seq,
                start,
                len,
                width,
            },
            ng,
        ))
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn expand(&mut self, x: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let out = self.value(x).repeat(batch);
        let ng = self.ng(&[x]);
        self.push(shape, out, Op::Expand { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, ng))
    }

    /// Row gather from a `[rows, width]` table; output is `[ids.len(), width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather", &s, &[2]));
        }
        let (rows, width) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    bound: rows,
                    context: "gather",
                });
            }
            out.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean { x }, ng)
    }

    /// Row-wise cosine similarity of two `[rows, width]` tensors -> `[rows, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("cosine_rows", &s, &[2]));
        }
        let (rows, width) = (s[0], s[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av[r * width..(r + 1) * width];
            let y = &bv[r * width..(r + 1) * width];
            let na = (dot(x, x) + NORM_FLOOR).sqrt();
            let nb = (dot(y, y) + NORM_FLOOR).sqrt();
            let c = dot(x, y) / (na * nb);
            out.push(c);
            norms.push((na, nb, c));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![rows, 1], out, Op::CosineRows { a, b, width, norms }, ng))
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce_with_logits", self.shape(z), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = zv
            .iter()
            .zip(labels)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum::<f64>()
            / n;
        let ng = self.ng(&[z]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceLogits {
                z,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Cross-entropy minus `lambda` times the mean predictive entropy.
    ///
    /// `logits` is `[..., vocab]`; `targets` holds one entry per logit row,
    /// `None` marking positions excluded from both terms.
    pub fn diversity_loss(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        lambda: f64,
        eps: f64,
    ) -> Result<(Var, LossParts)> {
        let vocab = *self
            .shape(logits)
            .last()
            .ok_or_else(|| Error::Contract("diversity loss on rank-0 logits".into()))?;
        let rows = self.value(logits).len() / vocab;
        if targets.len() != rows {
            return Err(Error::dim("diversity_loss", self.shape(logits), &[targets.len()]));
        }
        let zv = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut ce_sum = 0.0;
        let mut h_sum = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    bound: vocab,
                    context: "diversity_loss target",
                });
            }
            let z = &zv[r * vocab..(r + 1) * vocab];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ce_sum += lse - z[t];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut h = 0.0;
            for (pv, &zz) in p.iter_mut().zip(z) {
                *pv = (zz - lse).exp();
                h -= *pv * (*pv + eps).ln();
            }
            h_sum += h;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("diversity loss with every position masked".into()));
        }
        let ce = ce_sum / count as f64;
        let entropy = h_sum / count as f64;
        let loss = ce - lambda * entropy;
        let ng = self.ng(&[logits]);
        let v = self.push(
            vec![1],
            vec![loss],
            Op::DiversityLoss {
                logits,
                targets: targets.to_vec(),
                vocab,
                lambda,
                eps,
                probs,
                count,
            },
            ng,
        );
        Ok((v, LossParts { loss, ce, entropy }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
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

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    gemm(m, n, k, g, false, &nodes[b.0].value, true, 1.0, ga);
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, 1.0, gb);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        axpy(slot(grads, nodes, v), g, 1.0);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    axpy(slot(grads, nodes, a), g, 1.0);
                }
                if wants(b) {
                    axpy(slot(grads, nodes, b), g, -1.0);
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, nodes, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if wants(b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, nodes, b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            &Op::AddRow { x, row } => {
                if wants(x) {
                    axpy(slot(grads, nodes, x), g, 1.0);
                }
                if wants(row) {
                    let gr = slot(grads, nodes, row);
                    let n = gr.len();
                    for c in g.chunks(n) {
                        axpy(gr, c, 1.0);
                    }
                }
            }
            &Op::MulRow { x, row } => {
                let rv = &nodes[row.0].value;
                let n = rv.len();
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    for (j, gv) in g.iter().enumerate() {
                        gx[j] += gv * rv[j % n];
                    }
                }
                if wants(row) {
                    let xv = &nodes[x.0].value;
                    let gr = slot(grads, nodes, row);
                    for (j, gv) in g.iter().enumerate() {
                        gr[j % n] += gv * xv[j];
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if wants(x) {
                    axpy(slot(grads, nodes, x), g, factor);
                }
            }
            &Op::Tanh { x } => {
                if wants(x) {
                    let y = &nodes[i].value;
                    let gx = slot(grads, nodes, x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            &Op::Gelu { x } => {
                if wants(x) {
                    let xv = &nodes[x.0].value;
                    let gx = slot(grads, nodes, x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            &Op::Softmax { x, width } => {
                if wants(x) {
                    let y = &nodes[i].value;
                    let gx = slot(grads, nodes, x);
                    for ((gxr, yr), gr) in gx.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
                        let s = dot(yr, gr);
                        for j in 0..width {
                            gxr[j] += yr[j] * (gr[j] - s);
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
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = nodes[gain.0].value.len();
                if wants(gain) {
                    let gg = slot(grads, nodes, gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(bias) {
                    let gb = slot(grads, nodes, bias);
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if wants(x) {
                    let gv = &nodes[gain.0].value;
                    let gx = slot(grads, nodes, x);
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dot(&dh, hr) / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let width = nodes[q.0].shape[2];
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    let base = b * seq * width;
                    for h in 0..heads {
                        let off = base + h * hd;
                        let pbase = (b * heads + h) * seq * seq;
                        for i2 in 0..seq {
                            let prow = &probs[pbase + i2 * seq..pbase + (i2 + 1) * seq];
                            let go = &g[off + i2 * width..off + i2 * width + hd];
                            let mut s = 0.0;
                            for j in 0..seq {
                                let p = prow[j];
                                if p == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = off + j * width;
                                dp[j] = dot(go, &vv[vj..vj + hd]);
                                s += p * dp[j];
                                for (gvv, &gov) in gv[vj..vj + hd].iter_mut().zip(go) {
                                    *gvv += p * gov;
                                }
                            }
                            let qi = off + i2 * width;
                            for j in 0..seq {
                                let p = prow[j];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - s) * scale;
                                let kj = off + j * width;
                                for t in 0..hd {
                                    gq[qi + t] += ds * kv[kj + t];
                                    gk[kj + t] += ds * qv[qi + t];
                                }
                            }
                        }
                    }
                }
                for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(var) {
                        axpy(slot(grads, nodes, var), &gr, 1.0);
                    }
                }
            }
            Op::Concat { parts, batch, width } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for b in 0..*batch {
                            let src = (b * total + offset) * width;
                            axpy(
                                &mut gp[b * len * width..(b + 1) * len * width],
                                &g[src..src + len * width],
                                1.0,
                            );
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                x,
                batch,
                seq,
                start,
                len,
                width,
            } => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    for b in 0..batch {
                        let dst = (b * seq + start) * width;
                        axpy(
                            &mut gx[dst..dst + len * width],
                            &g[b * len * width..(b + 1) * len * width],
                            1.0,
                        );
                    }
                }
            }
            &Op::Expand { x } => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    let n = gx.len();
                    for c in g.chunks(n) {
                        axpy(gx, c, 1.0);
                    }
                }
            }
            &Op::Reshape { x } => {
                if wants(x) {
                    axpy(slot(grads, nodes, x), g, 1.0);
                }
            }
            Op::Gather { table, ids, width } => {
                if wants(*table) {
                    let gt = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * width..(id + 1) * width],
                            &g[r * width..(r + 1) * width],
                            1.0,
                        );
                    }
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    slot(grads, nodes, x).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean { x } => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CosineRows { a, b, width, norms } => {
                let (a, b, width) = (*a, *b, *width);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    for (r, &(na, nb, c)) in norms.iter().enumerate() {
                        for j in r * width..(r + 1) * width {
                            ga[j] += g[r] * (bv[j] / (na * nb) - c * av[j] / (na * na));
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    for (r, &(na, nb, c)) in norms.iter().enumerate() {
                        for j in r * width..(r + 1) * width {
                            gb[j] += g[r] * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                        }
                    }
                }
            }
            Op::BceLogits { z, labels } => {
                if wants(*z) {
                    let zv = &nodes[z.0].value;
                    let n = labels.len() as f64;
                    let gz = slot(grads, nodes, *z);
                    for j in 0..labels.len() {
                        gz[j] += g[0] * (sigmoid(zv[j]) - labels[j]) / n;
                    }
                }
            }
            Op::DiversityLoss {
                logits,
                targets,
                vocab,
                lambda,
                eps,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let (vocab, lambda, eps) = (*vocab, *lambda, *eps);
                    let scale = g[0] / *count as f64;
                    let gz = slot(grads, nodes, *logits);
                    let mut dh = vec![0.0; vocab];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        // dH/dp_v = -(log(p_v + eps) + p_v / (p_v + eps))
                        for j in 0..vocab {
                            dh[j] = -((p[j] + eps).ln() + p[j] / (p[j] + eps));
                        }
                        let mean_dh = dot(p, &dh);
                        let gr = &mut gz[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let dce = p[j] - if j == t { 1.0 } else { 0.0 };
                            let dent = p[j] * (dh[j] - mean_dh);
                            gr[j] += scale * (dce - lambda * dent);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
