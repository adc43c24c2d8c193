//! Reverse-mode computation graph covering exactly the layer set the
//! enhancement modules need: affine, layer norm, attention primitives,
//! embedding lookup, GELU, softmax, and the three loss heads.
//!
//! Nodes are appended in forward order, so creation order is already a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::{fexp, mm, mm_abt, mm_abt_acc, mm_acc, mm_atb_acc, vexp, vtanh, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    /// value = a · bᵀ with a: [m,k], b: [n,k]; used for attention scores.
    MatMulBt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows {
        x: Var,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        width: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        count: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    /// Vertical tiling: the source block repeated `times` times row-wise.
    RepeatRows {
        x: Var,
        times: usize,
    },
    /// Fused bidirectional multi-head self-attention. Rows hold `rows/seq`
    /// independent sequences of length `seq` back to back; attention never
    /// crosses a sequence boundary. Per sequence and head:
    /// softmax(q_h·k_hᵀ/√d_h)·v_h, heads re-concatenated. Caches the
    /// attention probabilities for the backward pass.
    MultiHeadAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    /// Mean of -log softmax(logits)[target] over masked positions only.
    /// logits: [L, C*D] with class blocks of width `classes` per codebook.
    MaskedCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        classes: usize,
        lse: Vec<f64>,
        masked_count: usize,
    },
    /// Mean binary cross-entropy of sigmoid(logits) vs targets over the
    /// included positions.
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        include: Vec<bool>,
        count: usize,
    },
    Mae {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Parameter leaf. Calling twice with the same id returns the same node,
    /// so gradients from every use site accumulate together.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let t = self.params.tensor(id).clone();
        let v = self.push(t, Op::Param, true);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).expect_2d("matmul lhs")?;
        let (kb, n) = self.value(b).expect_2d("matmul rhs")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: lhs shape {:?} incompatible with rhs shape {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], data)?,
            Op::MatMul { a, b },
            needs,
        ))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).expect_2d("matmul_bt lhs")?;
        let (n, kb) = self.value(b).expect_2d("matmul_bt rhs")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul_bt: lhs shape {:?} incompatible with rhs shape {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = mm_abt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], data)?,
            Op::MatMulBt { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("add_bias input")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(format!(
                "add_bias: input shape {:?} vs bias shape {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::from_vec(&[m, n], data)?,
            Op::AddBias { x, bias },
            needs,
        ))
    }

    /// x·W + b with W: [in, out], b: [out].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Op::Scale { x, c },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let mut data: Vec<f64> = xv
            .iter()
            .map(|&v| GELU_K * (v + GELU_A * v * v * v))
            .collect();
        vtanh(&mut data);
        for (t, &v) in data.iter_mut().zip(xv) {
            *t = 0.5 * v * (1.0 + *t);
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Op::Gelu { x },
            needs,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("layer_norm input")?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::shape(format!(
                "layer_norm: input shape {:?} vs gamma {:?} / beta {:?}",
                self.value(x).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = gv[j] * h + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("softmax input")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &r) in orow.iter_mut().zip(row) {
                *o = r - mx;
            }
            vexp(orow);
            let s: f64 = orow.iter().sum();
            let inv = 1.0 / s;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::SoftmaxRows { x }, needs))
    }

    /// Row `l` of the output is `table` row `tokens[l]`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let (v, h) = self.value(table).expect_2d("embedding table")?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::vocab(format!(
                "token index {bad} out of vocabulary (table has {v} rows)"
            )));
        }
        let tv = self.value(table).data();
        let mut out = vec![0.0; tokens.len() * h];
        for (l, &t) in tokens.iter().enumerate() {
            out[l * h..(l + 1) * h].copy_from_slice(&tv[t * h..(t + 1) * h]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_vec(&[tokens.len(), h], out)?,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("slice_cols input")?;
        if start + width > n {
            return Err(Error::shape(format!(
                "slice_cols: columns {start}..{} out of range for shape {:?}",
                start + width,
                self.value(x).shape()
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[m, width], out)?,
            Op::SliceCols { x, start, width },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("slice_rows input")?;
        if start + count > m {
            return Err(Error::shape(format!(
                "slice_rows: rows {start}..{} out of range for shape {:?}",
                start + count,
                self.value(x).shape()
            )));
        }
        let xv = self.value(x).data();
        let out = xv[start * n..(start + count) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[count, n], out)?,
            Op::SliceRows { x, start, count },
            needs,
        ))
    }

    /// Tile a block vertically: the result holds `times` copies of `x`
    /// stacked row-wise. The backward pass sums the gradient tiles.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.value(x).expect_2d("repeat_rows input")?;
        if times == 0 {
            return Err(Error::shape("repeat_rows: zero repetitions".to_string()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            out.extend_from_slice(xv);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[times * m, n], out)?,
            Op::RepeatRows { x, times },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no parts".to_string()));
        }
        let m = self.value(parts[0]).expect_2d("concat_cols part")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).expect_2d("concat_cols part")?;
            if mp != m {
                return Err(Error::shape(format!(
                    "concat_cols: row mismatch {} vs {}",
                    mp, m
                )));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head self-attention with `heads` heads over q/k/v of shape
    /// [B·seq, H]: rows hold B independent length-`seq` sequences back to
    /// back, and attention never crosses a sequence boundary. Head width is
    /// H/heads and scores are scaled by its inverse square root. Attention
    /// is bidirectional (no causal mask).
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
    ) -> Result<Var> {
        let (rows, h) = self.value(q).expect_2d("attention query")?;
        for (name, var) in [("key", k), ("value", v)] {
            if self.value(var).shape() != [rows, h] {
                return Err(Error::shape(format!(
                    "attention {name}: shape {:?} vs query {:?}",
                    self.value(var).shape(),
                    self.value(q).shape()
                )));
            }
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::config(format!(
                "attention: {heads} heads does not divide width {h}"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape(format!(
                "attention: {rows} rows is not a whole number of length-{seq} sequences"
            )));
        }
        let items = rows / seq;
        let l = seq;
        let hd = h / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();

        let mut probs = vec![0.0; items * heads * l * l];
        let mut out = vec![0.0; rows * h];
        let mut qh = vec![0.0; l * hd];
        let mut kt = vec![0.0; hd * l];
        let mut vh = vec![0.0; l * hd];
        for item in 0..items {
            let r0 = item * l;
            for head in 0..heads {
                let off = head * hd;
                // Scale is folded into the extracted query head.
                for i in 0..l {
                    for d in 0..hd {
                        qh[i * hd + d] = qv[(r0 + i) * h + off + d] * scale;
                        vh[i * hd + d] = vv[(r0 + i) * h + off + d];
                    }
                }
                for j in 0..l {
                    for d in 0..hd {
                        kt[d * l + j] = kv[(r0 + j) * h + off + d];
                    }
                }
                let pr = &mut probs
                    [(item * heads + head) * l * l..(item * heads + head + 1) * l * l];
                mm_acc(pr, &qh, &kt, l, hd, l);
                for i in 0..l {
                    let row = &mut pr[i * l..(i + 1) * l];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for x in row.iter_mut() {
                        *x -= mx;
                    }
                    vexp(row);
                    let inv = 1.0 / row.iter().sum::<f64>();
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
                let oh = mm(pr, &vh, l, l, hd);
                for i in 0..l {
                    out[(r0 + i) * h + off..(r0 + i) * h + off + hd]
                        .copy_from_slice(&oh[i * hd..(i + 1) * hd]);
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_vec(&[rows, h], out)?,
            Op::MultiHeadAttention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            needs,
        ))
    }

    /// Masked cross-entropy over codebook blocks. `logits` is [L, C·D] where
    /// the block for codebook `c` spans columns `c·D .. (c+1)·D`; `targets`
    /// and `mask` are row-major L×C. Returns 0 for an empty mask, and the
    /// backward pass writes exactly zero into every unmasked block.
    pub fn masked_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        classes: usize,
    ) -> Result<Var> {
        let (l, w) = self.value(logits).expect_2d("masked_ce logits")?;
        if classes == 0 || w % classes != 0 {
            return Err(Error::shape(format!(
                "masked_ce: logit width {w} not divisible by class count {classes}"
            )));
        }
        let c = w / classes;
        if targets.len() != l * c || mask.len() != l * c {
            return Err(Error::shape(format!(
                "masked_ce: targets/mask length {}/{} does not match L*C = {}",
                targets.len(),
                mask.len(),
                l * c
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::vocab(format!(
                "masked_ce: target {bad} out of range for {classes} classes"
            )));
        }
        let zv = self.value(logits).data();
        let mut lse = vec![0.0; l * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for li in 0..l {
            for ci in 0..c {
                if !mask[li * c + ci] {
                    continue;
                }
                let blk = &zv[li * w + ci * classes..li * w + (ci + 1) * classes];
                let mx = blk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut es = [0.0; 512];
                let es = &mut es[..classes];
                for (e, z) in es.iter_mut().zip(blk) {
                    *e = z - mx;
                }
                vexp(es);
                let s: f64 = es.iter().sum();
                let e = mx + s.ln();
                lse[li * c + ci] = e;
                total += e - blk[targets[li * c + ci]];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                classes,
                lse,
                masked_count: count,
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets over
    /// the included positions, in the numerically stable logits form.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64], include: &[bool]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || include.len() != n {
            return Err(Error::shape(format!(
                "bce_logits: targets/include length {}/{} vs logits {}",
                targets.len(),
                include.len(),
                n
            )));
        }
        let zv = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if !include[i] {
                continue;
            }
            let z = zv[i];
            total += z.max(0.0) - z * targets[i] + fexp(-z.abs()).ln_1p();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Mean absolute elementwise difference.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mae: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / self.value(a).numel() as f64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mae { a, b }, needs))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// tracked node; read them back with `grad` or `param_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward: expected scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).data()[0].is_finite() {
            return Err(Error::numeric("backward: loss is not finite".to_string()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = 1.0;
        } else {
            return Ok(()); // loss does not depend on any tracked node
        }

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].needs_grad {
                continue;
            }
            let (prior, rest) = grads.split_at_mut(idx);
            let gout = match rest[0].as_deref() {
                Some(g) => g,
                None => continue,
            };
            let val = |v: Var| nodes[v.0].value.data();
            macro_rules! gin {
                ($v:expr) => {
                    prior[$v.0].as_deref_mut()
                };
            }
            match &nodes[idx].op {
                Op::Input | Op::Param => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.cols();
                    if let Some(ga) = gin!(a) {
                        mm_abt_acc(ga, gout, val(*b), m, n, k);
                    }
                    if let Some(gb) = gin!(b) {
                        mm_atb_acc(gb, val(*a), gout, k, m, n);
                    }
                }
                Op::MatMulBt { a, b } => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.rows();
                    if let Some(ga) = gin!(a) {
                        mm_acc(ga, gout, val(*b), m, n, k);
                    }
                    if let Some(gb) = gin!(b) {
                        mm_atb_acc(gb, gout, val(*a), n, m, k);
                    }
                }
                Op::Add { a, b } => {
                    if let Some(ga) = gin!(a) {
                        for (g, &o) in ga.iter_mut().zip(gout) {
                            *g += o;
                        }
                    }
                    if let Some(gb) = gin!(b) {
                        for (g, &o) in gb.iter_mut().zip(gout) {
                            *g += o;
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let n = nodes[bias.0].value.numel();
                    if let Some(gx) = gin!(x) {
                        for (g, &o) in gx.iter_mut().zip(gout) {
                            *g += o;
                        }
                    }
                    if let Some(gb) = gin!(bias) {
                        for (i, &o) in gout.iter().enumerate() {
                            gb[i % n] += o;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = gin!(x) {
                        for (g, &o) in gx.iter_mut().zip(gout) {
                            *g += c * o;
                        }
                    }
                }
                Op::Gelu { x } => {
                    if let Some(gx) = gin!(x) {
                        let xv = val(*x);
                        let mut th: Vec<f64> = xv
                            .iter()
                            .map(|&v| GELU_K * (v + GELU_A * v * v * v))
                            .collect();
                        vtanh(&mut th);
                        for i in 0..xv.len() {
                            let (v, t) = (xv[i], th[i]);
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * v * v);
                            gx[i] += d * gout[i];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = nodes[gamma.0].value.numel();
                    let m = rstd.len();
                    let gv = val(*gamma);
                    if let Some(gb) = gin!(beta) {
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += gout[i * n + j];
                            }
                        }
                    }
                    if let Some(gg) = gin!(gamma) {
                        for i in 0..m {
                            for j in 0..n {
                                gg[j] += gout[i * n + j] * xhat[i * n + j];
                            }
                        }
                    }
                    if let Some(gx) = gin!(x) {
                        for i in 0..m {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..n {
                                let gy = gout[i * n + j] * gv[j];
                                mean_g += gy;
                                mean_gx += gy * xhat[i * n + j];
                            }
                            mean_g /= n as f64;
                            mean_gx /= n as f64;
                            for j in 0..n {
                                let gy = gout[i * n + j] * gv[j];
                                gx[i * n + j] +=
                                    rstd[i] * (gy - mean_g - xhat[i * n + j] * mean_gx);
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    if let Some(gx) = gin!(x) {
                        let p = &nodes[idx].value;
                        let (m, n) = (p.rows(), p.cols());
                        let pv = p.data();
                        for i in 0..m {
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += gout[i * n + j] * pv[i * n + j];
                            }
                            for j in 0..n {
                                gx[i * n + j] += pv[i * n + j] * (gout[i * n + j] - dot);
                            }
                        }
                    }
                }
                Op::Embedding { table, tokens } => {
                    if let Some(gt) = gin!(table) {
                        let h = nodes[table.0].value.cols();
                        for (l, &t) in tokens.iter().enumerate() {
                            for j in 0..h {
                                gt[t * h + j] += gout[l * h + j];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start, width } => {
                    if let Some(gx) = gin!(x) {
                        let n = nodes[x.0].value.cols();
                        let m = nodes[x.0].value.rows();
                        for i in 0..m {
                            for j in 0..*width {
                                gx[i * n + start + j] += gout[i * width + j];
                            }
                        }
                    }
                }
                Op::SliceRows { x, start, count } => {
                    if let Some(gx) = gin!(x) {
                        let n = nodes[x.0].value.cols();
                        for i in 0..*count {
                            for j in 0..n {
                                gx[(start + i) * n + j] += gout[i * n + j];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = nodes[idx].value.rows();
                    let n = nodes[idx].value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(gp) = gin!(p) {
                            for i in 0..m {
                                for j in 0..w {
                                    gp[i * w + j] += gout[i * n + off + j];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::RepeatRows { x, times } => {
                    if let Some(gx) = prior[x.0].as_deref_mut() {
                        let block = gx.len();
                        for t in 0..*times {
                            let tile = &gout[t * block..(t + 1) * block];
                            for (g, &d) in gx.iter_mut().zip(tile) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::MultiHeadAttention {
                    q,
                    k,
                    v,
                    heads,
                    seq,
                    probs,
                } => {
                    let h = nodes[q.0].value.cols();
                    let items = nodes[q.0].value.rows() / seq;
                    let l = *seq;
                    let hd = h / *heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let qv = val(*q);
                    let kv = val(*k);
                    let vv = val(*v);
                    let mut gouth = vec![0.0; l * hd];
                    let mut xh = vec![0.0; l * hd];
                    let mut ghead = vec![0.0; l * hd];
                    let mut gsc = vec![0.0; l * l];
                    for item in 0..items {
                        let r0 = item * l;
                        for head in 0..*heads {
                            let off = head * hd;
                            let pr = &probs[(item * heads + head) * l * l
                                ..(item * heads + head + 1) * l * l];
                            for i in 0..l {
                                gouth[i * hd..(i + 1) * hd].copy_from_slice(
                                    &gout[(r0 + i) * h + off..(r0 + i) * h + off + hd],
                                );
                            }
                            // Value head: Pᵀ·gout_h.
                            if prior[v.0].is_some() {
                                ghead.iter_mut().for_each(|g| *g = 0.0);
                                mm_atb_acc(&mut ghead, pr, &gouth, l, l, hd);
                                let gv = prior[v.0].as_deref_mut().unwrap();
                                for i in 0..l {
                                    for d in 0..hd {
                                        gv[(r0 + i) * h + off + d] += ghead[i * hd + d];
                                    }
                                }
                            }
                            if prior[q.0].is_none() && prior[k.0].is_none() {
                                continue;
                            }
                            // Probability gradient gout_h·v_hᵀ, then the
                            // row-wise softmax backward to score space.
                            for i in 0..l {
                                for d in 0..hd {
                                    xh[i * hd + d] = vv[(r0 + i) * h + off + d];
                                }
                            }
                            gsc.iter_mut().for_each(|g| *g = 0.0);
                            mm_abt_acc(&mut gsc, &gouth, &xh, l, hd, l);
                            for i in 0..l {
                                let prow = &pr[i * l..(i + 1) * l];
                                let grow = &mut gsc[i * l..(i + 1) * l];
                                let mut dot = 0.0;
                                for j in 0..l {
                                    dot += grow[j] * prow[j];
                                }
                                for j in 0..l {
                                    grow[j] = prow[j] * (grow[j] - dot);
                                }
                            }
                            if prior[q.0].is_some() {
                                // dL/dq_h = (gscores·k_h)·scale.
                                for i in 0..l {
                                    for d in 0..hd {
                                        xh[i * hd + d] = kv[(r0 + i) * h + off + d];
                                    }
                                }
                                ghead.iter_mut().for_each(|g| *g = 0.0);
                                mm_acc(&mut ghead, &gsc, &xh, l, l, hd);
                                let gq = prior[q.0].as_deref_mut().unwrap();
                                for i in 0..l {
                                    for d in 0..hd {
                                        gq[(r0 + i) * h + off + d] += ghead[i * hd + d] * scale;
                                    }
                                }
                            }
                            if prior[k.0].is_some() {
                                // dL/dk_h = gscoresᵀ·(q_h·scale).
                                for i in 0..l {
                                    for d in 0..hd {
                                        xh[i * hd + d] = qv[(r0 + i) * h + off + d] * scale;
                                    }
                                }
                                ghead.iter_mut().for_each(|g| *g = 0.0);
                                mm_atb_acc(&mut ghead, &gsc, &xh, l, l, hd);
                                let gk = prior[k.0].as_deref_mut().unwrap();
                                for i in 0..l {
                                    for d in 0..hd {
                                        gk[(r0 + i) * h + off + d] += ghead[i * hd + d];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaskedCe {
                    logits,
                    targets,
                    mask,
                    classes,
                    lse,
                    masked_count,
                } => {
                    if *masked_count == 0 {
                        continue;
                    }
                    if let Some(gz) = gin!(logits) {
                        let zv = val(*logits);
                        let w = nodes[logits.0].value.cols();
                        let c = w / classes;
                        let l = nodes[logits.0].value.rows();
                        let scale = gout[0] / *masked_count as f64;
                        for li in 0..l {
                            for ci in 0..c {
                                if !mask[li * c + ci] {
                                    continue;
                                }
                                let base = li * w + ci * classes;
                                let e = lse[li * c + ci];
                                let tgt = targets[li * c + ci];
                                let mut ps = [0.0; 512];
                                let ps = &mut ps[..*classes];
                                for (p, z) in ps.iter_mut().zip(&zv[base..base + classes]) {
                                    *p = z - e;
                                }
                                vexp(ps);
                                for d in 0..*classes {
                                    let ind = ((d == tgt) as u64) as f64;
                                    gz[base + d] += (ps[d] - ind) * scale;
                                }
                            }
                        }
                    }
                }
                Op::BceLogits {
                    logits,
                    targets,
                    include,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    if let Some(gz) = gin!(logits) {
                        let zv = val(*logits);
                        let scale = gout[0] / *count as f64;
                        for i in 0..zv.len() {
                            if !include[i] {
                                continue;
                            }
                            let z = zv[i];
                            let sig = if z >= 0.0 {
                                1.0 / (1.0 + fexp(-z))
                            } else {
                                let e = fexp(z);
                                e / (1.0 + e)
                            };
                            gz[i] += (sig - targets[i]) * scale;
                        }
                    }
                }
                Op::Mae { a, b } => {
                    let n = nodes[a.0].value.numel() as f64;
                    let scale = gout[0] / n;
                    let av = val(*a);
                    let bv = val(*b);
                    if let Some(ga) = gin!(a) {
                        for i in 0..av.len() {
                            ga[i] += (av[i] - bv[i]).signum_zero() * scale;
                        }
                    }
                    if let Some(gb) = gin!(b) {
                        for i in 0..av.len() {
                            gb[i] -= (av[i] - bv[i]).signum_zero() * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients for every parameter actually used in this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| {
                v.and_then(|var| self.grads[var.0].as_deref().map(|g| (id, g)))
            })
            .collect()
    }
}

trait SignumZero {
    fn signum_zero(self) -> f64;
}

impl SignumZero for f64 {
    /// signum with sign(0) = 0, the MAE subgradient convention.
    fn signum_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn pset(entries: &[(&str, &[usize], &[f64])]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, shape, data) in entries {
            ps.add(*name, Tensor::from_vec(shape, data.to_vec()).unwrap())
                .unwrap();
        }
        ps
    }

    #[test]
    fn matmul_forward_and_grads() {
        let ps = pset(&[
            ("a", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b", &[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
        ]);
        let mut g = Graph::new(&ps);
        let a = g.param(0);
        let b = g.param(1);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 10.0, 11.0]);
        // Reduce to scalar via MAE against zeros: d|y|/dy = sign(y) = 1 here.
        let z = g.input(Tensor::zeros(&[2, 2]));
        let loss = g.mae(y, z).unwrap();
        g.backward(loss).unwrap();
        // dL/da = (1/4) * ones(2,2) . b^T
        let ga = g.grad(a).unwrap();
        for (got, want) in ga.iter().zip([0.25, 0.25, 0.5, 0.25, 0.25, 0.5]) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
        // dL/db = (1/4) * a^T . ones(2,2)
        let gb = g.grad(b).unwrap();
        for (got, want) in gb.iter().zip([1.25, 1.25, 1.75, 1.75, 2.25, 2.25]) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let ps = pset(&[
            ("a", &[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]),
            ("b", &[4, 3], &[0.1, 0.2, 0.3, 1.0, 0.0, -1.0, 2.0, 2.0, 2.0, -0.5, 0.5, 0.0]),
        ]);
        let mut g = Graph::new(&ps);
        let a = g.param(0);
        let b = g.param(1);
        let y = g.matmul_bt(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4]);
        let av = g.value(a).data().to_vec();
        let bv = g.value(b).data().to_vec();
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| av[i * 3 + k] * bv[j * 3 + k]).sum();
                assert!(close(g.value(y).data()[i * 4 + j], want, 1e-12));
            }
        }
    }

    #[test]
    fn embedding_gathers_rows_and_scatters_grads() {
        let ps = pset(&[(
            "table",
            &[3, 2],
            &[10.0, 11.0, 20.0, 21.0, 30.0, 31.0],
        )]);
        let mut g = Graph::new(&ps);
        let t = g.param(0);
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[30.0, 31.0, 10.0, 11.0, 30.0, 31.0]);
        let z = g.input(Tensor::zeros(&[3, 2]));
        let loss = g.mae(e, z).unwrap();
        g.backward(loss).unwrap();
        // Row 2 used twice: grads accumulate; row 1 unused: zero.
        let gt = g.grad(t).unwrap();
        assert!(close(gt[0], 1.0 / 6.0, 1e-12));
        assert!(close(gt[2], 0.0, 1e-15));
        assert!(close(gt[4], 2.0 / 6.0, 1e-12));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let ps = pset(&[("table", &[3, 2], &[0.0; 6])]);
        let mut g = Graph::new(&ps);
        let t = g.param(0);
        let err = g.embedding(t, &[3]).unwrap_err();
        assert_eq!(err.category(), "vocab");
    }

    #[test]
    fn shared_param_accumulates_across_uses() {
        // Same table used twice: param() must return the same node.
        let ps = pset(&[("table", &[2, 2], &[1.0, 2.0, 3.0, 4.0])]);
        let mut g = Graph::new(&ps);
        let t1 = g.param(0);
        let t2 = g.param(0);
        assert_eq!(t1, t2);
        let e1 = g.embedding(t1, &[0]).unwrap();
        let e2 = g.embedding(t2, &[0]).unwrap();
        let s = g.add(e1, e2).unwrap();
        let z = g.input(Tensor::zeros(&[1, 2]));
        let loss = g.mae(s, z).unwrap();
        g.backward(loss).unwrap();
        let gt = g.grad(t1).unwrap();
        // d/dx |2x|/2 means each use contributes sign/2, twice.
        assert!(close(gt[0], 1.0, 1e-12));
        assert!(close(gt[1], 1.0, 1e-12));
        assert!(close(gt[2], 0.0, 1e-15));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ps = pset(&[
            ("x", &[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 10.0]),
            ("gamma", &[4], &[1.0, 1.0, 1.0, 1.0]),
            ("beta", &[4], &[0.0, 0.0, 0.0, 0.0]),
        ]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let ga = g.param(1);
        let be = g.param(2);
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        for i in 0..2 {
            let row = &g.value(y).data()[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {i} var {var}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant() {
        let ps = pset(&[("x", &[1, 3], &[1000.0, 1001.0, 1002.0])]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let p = g.softmax_rows(x).unwrap();
        let pv = g.value(p).data();
        assert!(close(pv.iter().sum::<f64>(), 1.0, 1e-12));
        // Same as softmax of [0,1,2].
        let e: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in pv.iter().zip(e.iter().map(|v| v / s)) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn masked_ce_ignores_unmasked_positions() {
        // L=2, C=1, D=3. Only row 0 is masked.
        let ps = pset(&[(
            "z",
            &[2, 3],
            &[1.0, 2.0, 3.0, -5.0, 50.0, 0.0],
        )]);
        let mut g = Graph::new(&ps);
        let z = g.param(0);
        let loss = g.masked_ce(z, &[2, 0], &[true, false], 3).unwrap();
        // -log softmax([1,2,3])[2]
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let want = -(e[2] / e.iter().sum::<f64>()).ln();
        assert!(close(g.value(loss).data()[0], want, 1e-12));
        g.backward(loss).unwrap();
        let gz = g.grad(z).unwrap();
        // Unmasked row must receive exactly zero gradient.
        assert_eq!(&gz[3..6], &[0.0, 0.0, 0.0]);
        // Masked row: softmax - onehot.
        let s: f64 = e.iter().sum();
        for (j, &gv) in gz[0..3].iter().enumerate() {
            let want = e[j] / s - if j == 2 { 1.0 } else { 0.0 };
            assert!(close(gv, want, 1e-12));
        }
    }

    #[test]
    fn masked_ce_empty_mask_is_zero_loss_zero_grad() {
        let ps = pset(&[("z", &[1, 3], &[1.0, 2.0, 3.0])]);
        let mut g = Graph::new(&ps);
        let z = g.param(0);
        let loss = g.masked_ce(z, &[0], &[false], 3).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_logits_is_stable_at_extreme_logits() {
        let ps = pset(&[("z", &[1, 4], &[-800.0, 800.0, 0.0, 800.0])]);
        let mut g = Graph::new(&ps);
        let z = g.param(0);
        let loss = g
            .bce_logits(z, &[0.0, 1.0, 1.0, 0.0], &[true; 4])
            .unwrap();
        let lv = g.value(loss).data()[0];
        assert!(lv.is_finite());
        // Entries: 0 (confident right), 0, ln 2, 800 (confident wrong).
        assert!(close(lv, (2.0f64.ln() + 800.0) / 4.0, 1e-12));
        g.backward(loss).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gelu_matches_reference_points() {
        let ps = pset(&[("x", &[1, 3], &[0.0, 1.0, -1.0])]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let y = g.gelu(x);
        let yv = g.value(y).data();
        assert_eq!(yv[0], 0.0);
        // tanh-approximation reference values.
        assert!(close(yv[1], 0.841192, 1e-5));
        assert!(close(yv[2], -0.158808, 1e-5));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let ps = pset(&[(
            "x",
            &[2, 4],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let left = g.slice_cols(x, 0, 2).unwrap();
        let right = g.slice_cols(x, 2, 2).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let z = g.input(Tensor::zeros(&[2, 4]));
        let loss = g.mae(back, z).unwrap();
        g.backward(loss).unwrap();
        // Every element passes through exactly once: uniform |.|-grad.
        for &gv in g.grad(x).unwrap() {
            assert!(close(gv, 1.0 / 8.0, 1e-12));
        }
    }

    #[test]
    fn slice_rows_selects_block() {
        let ps = pset(&[("x", &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let mid = g.slice_rows(x, 1, 2).unwrap();
        assert_eq!(g.value(mid).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn fused_attention_matches_primitive_composition() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let (l, h, heads) = (5usize, 8usize, 2usize);
        let hd = h / heads;
        let mut ps = ParamSet::new();
        ps.add("q", Tensor::randn(&[l, h], 1.0, &mut rng)).unwrap();
        ps.add("k", Tensor::randn(&[l, h], 1.0, &mut rng)).unwrap();
        ps.add("v", Tensor::randn(&[l, h], 1.0, &mut rng)).unwrap();
        let target = Tensor::randn(&[l, h], 1.0, &mut rng);

        // Fused path.
        let mut g1 = Graph::new(&ps);
        let (q1, k1, v1) = (g1.param(0), g1.param(1), g1.param(2));
        let y1 = g1.multi_head_attention(q1, k1, v1, heads, l).unwrap();
        let t1 = g1.input(target.clone());
        let l1 = g1.mae(y1, t1).unwrap();
        g1.backward(l1).unwrap();

        // Same computation from slice/matmul/softmax primitives.
        let mut g2 = Graph::new(&ps);
        let (q2, k2, v2) = (g2.param(0), g2.param(1), g2.param(2));
        let mut parts = Vec::new();
        for head in 0..heads {
            let qh = g2.slice_cols(q2, head * hd, hd).unwrap();
            let kh = g2.slice_cols(k2, head * hd, hd).unwrap();
            let vh = g2.slice_cols(v2, head * hd, hd).unwrap();
            let sc = g2.matmul_bt(qh, kh).unwrap();
            let sc = g2.scale(sc, 1.0 / (hd as f64).sqrt());
            let pr = g2.softmax_rows(sc).unwrap();
            parts.push(g2.matmul(pr, vh).unwrap());
        }
        let y2 = g2.concat_cols(&parts).unwrap();
        let t2 = g2.input(target.clone());
        let l2 = g2.mae(y2, t2).unwrap();
        g2.backward(l2).unwrap();

        for (a, b) in g1.value(y1).data().iter().zip(g2.value(y2).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for var in [(q1, q2), (k1, k2), (v1, v2)] {
            for (a, b) in g1.grad(var.0).unwrap().iter().zip(g2.grad(var.1).unwrap()) {
                assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rejects_bad_heads_and_shapes() {
        let ps = pset(&[
            ("q", &[3, 8], &[0.0; 24]),
            ("k", &[3, 8], &[0.0; 24]),
            ("v", &[4, 8], &[0.0; 32]),
        ]);
        let mut g = Graph::new(&ps);
        let (q, k, v) = (g.param(0), g.param(1), g.param(2));
        assert_eq!(
            g.multi_head_attention(q, k, k, 3, 3).unwrap_err().category(),
            "config"
        );
        assert_eq!(
            g.multi_head_attention(q, k, v, 2, 3).unwrap_err().category(),
            "shape"
        );
        // 3 rows cannot be split into length-2 sequences.
        assert_eq!(
            g.multi_head_attention(q, k, k, 2, 2).unwrap_err().category(),
            "shape"
        );
    }

    #[test]
    fn batched_attention_matches_per_item_runs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let (items, l, h, heads) = (3usize, 4usize, 6usize, 2usize);
        let mut ps = ParamSet::new();
        ps.add("q", Tensor::randn(&[items * l, h], 1.0, &mut rng))
            .unwrap();
        ps.add("k", Tensor::randn(&[items * l, h], 1.0, &mut rng))
            .unwrap();
        ps.add("v", Tensor::randn(&[items * l, h], 1.0, &mut rng))
            .unwrap();
        let target = Tensor::randn(&[items * l, h], 1.0, &mut rng);

        // One fused node over all items.
        let mut g1 = Graph::new(&ps);
        let (q1, k1, v1) = (g1.param(0), g1.param(1), g1.param(2));
        let y1 = g1.multi_head_attention(q1, k1, v1, heads, l).unwrap();
        let t1 = g1.input(target.clone());
        let l1 = g1.mae(y1, t1).unwrap();
        g1.backward(l1).unwrap();

        // One fused node per item over sliced rows.
        let mut g2 = Graph::new(&ps);
        let (q2, k2, v2) = (g2.param(0), g2.param(1), g2.param(2));
        let mut outs = Vec::new();
        for it in 0..items {
            let qi = g2.slice_rows(q2, it * l, l).unwrap();
            let ki = g2.slice_rows(k2, it * l, l).unwrap();
            let vi = g2.slice_rows(v2, it * l, l).unwrap();
            let yi = g2.multi_head_attention(qi, ki, vi, heads, l).unwrap();
            outs.push(g2.value(yi).data().to_vec());
        }
        let flat: Vec<f64> = outs.concat();
        for (a, b) in g1.value(y1).data().iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // backward() can only run once per graph, so redo g2 as one loss.
        let mut g3 = Graph::new(&ps);
        let (q3, k3, v3) = (g3.param(0), g3.param(1), g3.param(2));
        let mut losses = Vec::new();
        for it in 0..items {
            let qi = g3.slice_rows(q3, it * l, l).unwrap();
            let ki = g3.slice_rows(k3, it * l, l).unwrap();
            let vi = g3.slice_rows(v3, it * l, l).unwrap();
            let yi = g3.multi_head_attention(qi, ki, vi, heads, l).unwrap();
            let ti = g3.input(Tensor::from_vec(
                &[l, h],
                target.data()[it * l * h..(it + 1) * l * h].to_vec(),
            ).unwrap());
            losses.push(g3.mae(yi, ti).unwrap());
        }
        let mut total = losses[0];
        for &li in &losses[1..] {
            total = g3.add(total, li).unwrap();
        }
        let total = g3.scale(total, 1.0 / items as f64);
        g3.backward(total).unwrap();
        for var in [(q1, q3), (k1, k3), (v1, v3)] {
            for (a, b) in g1.grad(var.0).unwrap().iter().zip(g3.grad(var.1).unwrap()) {
                assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
            }
        }
    }

    #[test]
    fn repeat_rows_tiles_and_sums_gradients() {
        let ps = pset(&[("x", &[2, 2], &[1.0, 2.0, 3.0, 4.0])]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        let tiled = g.repeat_rows(x, 3).unwrap();
        assert_eq!(g.value(tiled).shape(), [6, 2]);
        assert_eq!(
            g.value(tiled).data(),
            &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]
        );
        let t = g.input(Tensor::zeros(&[6, 2]));
        let loss = g.mae(tiled, t).unwrap();
        g.backward(loss).unwrap();
        // d|x|/dx = sign/12 per tile element, summed over the 3 tiles.
        for &gv in g.grad(x).unwrap() {
            assert!((gv - 3.0 / 12.0).abs() < 1e-12, "{gv}");
        }
        assert_eq!(g.repeat_rows(x, 0).unwrap_err().category(), "shape");
    }

    #[test]
    fn shape_mismatch_is_reported_with_both_shapes() {
        let ps = pset(&[
            ("a", &[2, 3], &[0.0; 6]),
            ("b", &[2, 2], &[0.0; 4]),
        ]);
        let mut g = Graph::new(&ps);
        let a = g.param(0);
        let b = g.param(1);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert_eq!(err.category(), "shape");
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let ps = pset(&[("x", &[1, 2], &[1.0, 2.0])]);
        let mut g = Graph::new(&ps);
        let x = g.param(0);
        assert_eq!(g.backward(x).unwrap_err().category(), "shape");

        let mut g2 = Graph::new(&ps);
        let x2 = g2.param(0);
        let y = g2.scale(x2, f64::INFINITY);
        let z = g2.input(Tensor::zeros(&[1, 2]));
        let loss = g2.mae(y, z).unwrap();
        assert_eq!(g2.backward(loss).unwrap_err().category(), "numeric");
    }

    #[test]
    fn inputs_do_not_collect_gradients() {
        let ps = pset(&[("w", &[2, 2], &[1.0, 0.0, 0.0, 1.0])]);
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.param(0);
        let y = g.matmul(x, w).unwrap();
        let z = g.input(Tensor::zeros(&[1, 2]));
        let loss = g.mae(y, z).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(w).is_some());
    }
}
