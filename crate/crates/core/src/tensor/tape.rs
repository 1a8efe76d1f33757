use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu {
        a: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    MaskFill {
        a: Var,
        mask: Rc<Vec<bool>>,
    },
    SplitHeads {
        a: Var,
        groups: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        groups: usize,
        seq: usize,
        heads: usize,
    },
    Select {
        a: Var,
        indices: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. One forward pass, then at most one [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a tensor as a leaf; gradients are tracked if the tensor asks for them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::invalid(format!(
                "constant: shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` for untracked values.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sign pattern of every relu input, used to detect kinks in gradient checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                out.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    /// Batched product `[g,m,k] · [g,k,n]`, or `[g,m,k] · [g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for gi in 0..g {
            let ablk = &va[gi * m * k..(gi + 1) * m * k];
            let bblk = &vb[gi * k * n..(gi + 1) * k * n];
            let oblk = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(ablk, bblk, m, k, n, oblk);
            } else {
                kernels::matmul(ablk, bblk, m, k, n, oblk);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", sa, sb));
        }
        let mut out = self.value(a).to_vec();
        kernels::add_bias(&mut out, self.value(bias));
        let shape = sa.to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(shape, out, Op::AddBias { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale { a, s }, rg)
    }

    fn last_dim(&self, a: Var, op: &str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::invalid(format!(
                "{op}: needs a nonempty trailing axis, got {:?}",
                self.shape(a)
            ))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim(a, "softmax")?;
        let mut out = vec![0.0; self.value(a).len()];
        kernels::softmax_rows(self.value(a), cols, &mut out);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a }, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = self.last_dim(a, "log_softmax")?;
        let mut out = vec![0.0; self.value(a).len()];
        kernels::log_softmax_rows(self.value(a), cols, &mut out);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::LogSoftmax { a }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.last_dim(x, "layer_norm")?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).len() / cols;
        let mut out = vec![0.0; rows * cols];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_rows(
            self.value(x),
            self.value(gain),
            self.value(bias),
            eps,
            cols,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_vec();
        kernels::relu_inplace(&mut out);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Relu { a }, rg)
    }

    /// Rows of `table` `[vocab, d]` picked by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::invalid(format!("embedding: table must be 2-D, got {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "embedding: index {bad} out of range for vocab {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Dropout { a, mask }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Sets entries where `mask` is true to `value`. The mask covers the
    /// trailing elements and repeats over the leading ones.
    pub fn mask_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var> {
        let len = self.value(a).len();
        if mask.is_empty() || len % mask.len() != 0 {
            return Err(Error::invalid(format!(
                "mask_fill: mask of {} elements does not tile shape {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { value } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::MaskFill { a, mask }, rg))
    }

    /// `[groups*seq, heads*d]` → `[groups*heads, seq, d]`
    pub fn split_heads(&mut self, a: Var, groups: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != groups * seq || heads == 0 || s[1] % heads != 0 {
            return Err(Error::invalid(format!(
                "split_heads: shape {s:?} incompatible with groups={groups} seq={seq} heads={heads}"
            )));
        }
        let d = s[1] / heads;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for g in 0..groups {
            for t in 0..seq {
                let row = &src[(g * seq + t) * heads * d..(g * seq + t + 1) * heads * d];
                for h in 0..heads {
                    let dst = ((g * heads + h) * seq + t) * d;
                    out[dst..dst + d].copy_from_slice(&row[h * d..(h + 1) * d]);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![groups * heads, seq, d],
            out,
            Op::SplitHeads { a, groups, seq, heads },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, groups: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || s[0] != groups * heads || s[1] != seq {
            return Err(Error::invalid(format!(
                "merge_heads: shape {s:?} incompatible with groups={groups} seq={seq} heads={heads}"
            )));
        }
        let d = s[2];
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for g in 0..groups {
            for h in 0..heads {
                for t in 0..seq {
                    let from = ((g * heads + h) * seq + t) * d;
                    let to = (g * seq + t) * heads * d + h * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![groups * seq, heads * d],
            out,
            Op::MergeHeads { a, groups, seq, heads },
            rg,
        ))
    }

    /// `out[r] = a[r, indices[r]]` for a 2-D input.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != indices.len() || indices.iter().any(|&i| i >= s[1]) {
            return Err(Error::invalid(format!(
                "select: {} indices do not fit shape {s:?}",
                indices.len()
            )));
        }
        let c = s[1];
        let v = self.value(a);
        let out = indices.iter().enumerate().map(|(r, &i)| v[r * c + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![indices.len()],
            out,
            Op::Select {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Populates gradients of every tracked value with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_nt(g, vb, m, n, k, &mut tmp);
                    da.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |db| kernels::matmul_tn_acc(va, g, m, k, n, db));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    let mut tmp = vec![0.0; m * k];
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &vb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // b is [n,k]: da = g · b
                            kernels::matmul(gb, bb, m, n, k, &mut tmp);
                        } else {
                            kernels::matmul_nt(gb, bb, m, n, k, &mut tmp);
                        }
                        da[gi * m * k..(gi + 1) * m * k]
                            .iter_mut()
                            .zip(&tmp)
                            .for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |db| {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &va[gi * m * k..(gi + 1) * m * k];
                        let dbb = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // db [n,k] += gᵀ · a
                            kernels::matmul_tn_acc(gb, ab, m, n, k, dbb);
                        } else {
                            kernels::matmul_tn_acc(ab, gb, m, k, n, dbb);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(d.len()) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale { a, s } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Softmax { a } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gy), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += yy * (gy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((x, gy), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += gy - yy.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let cols = *node.shape.last().unwrap();
                let vx = &nodes[x.0].value;
                let vg = &nodes[gain.0].value;
                let xhat = |r: usize, c: usize| (vx[r * cols + c] - mean[r]) * rstd[r];
                acc(*x, &mut |d| {
                    for r in 0..mean.len() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * vg[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * vg[c];
                            d[r * cols + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for r in 0..mean.len() {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(cols) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Relu { a } => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        let row = &g[r * dim..(r + 1) * dim];
                        d[idx * dim..(idx + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |d| {
                    for ((x, gy), m) in d.iter_mut().zip(g).zip(mask) {
                        *x += gy * m;
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let gs = &g[offset..offset + len];
                    acc(*p, &mut |d| d.iter_mut().zip(gs).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::MaskFill { a, mask } => {
                acc(*a, &mut |d| {
                    for (i, (x, gy)) in d.iter_mut().zip(g).enumerate() {
                        if !mask[i % mask.len()] {
                            *x += gy;
                        }
                    }
                });
            }
            Op::SplitHeads { a, groups, seq, heads } => {
                let d = node.shape[2];
                acc(*a, &mut |da| {
                    for gi in 0..*groups {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let from = ((gi * heads + h) * seq + t) * d;
                                let to = (gi * seq + t) * heads * d + h * d;
                                da[to..to + d]
                                    .iter_mut()
                                    .zip(&g[from..from + d])
                                    .for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, groups, seq, heads } => {
                let d = nodes[a.0].shape[2];
                acc(*a, &mut |da| {
                    for gi in 0..*groups {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let to = ((gi * heads + h) * seq + t) * d;
                                let from = (gi * seq + t) * heads * d + h * d;
                                da[to..to + d]
                                    .iter_mut()
                                    .zip(&g[from..from + d])
                                    .for_each(|(x, y)| *x += y);
                            }
                        }
                    }
                });
            }
            Op::Select { a, indices } => {
                let c = nodes[a.0].shape[1];
                acc(*a, &mut |d| {
                    for (r, &idx) in indices.iter().enumerate() {
                        d[r * c + idx] += g[r];
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
    }
}
