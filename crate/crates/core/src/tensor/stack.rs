//! Pre-norm transformer stack: the shared trunk shape behind the discrete,
//! continuous, and semantic encoders.
//!
//! Each block is `x + attn(ln(x))` followed by `x + ffn(ln(x))`, with
//! multi-head self-attention over the full (bidirectional) sequence, a GELU
//! feed-forward, and a final layer norm after the last block. Positional
//! information comes from a learned absolute embedding table added before
//! the first block; it can be switched off, which makes the stack exactly
//! permutation-equivariant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    /// Add learned absolute positional embeddings before the first block.
    pub positional: bool,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.ffn_mult == 0 || self.max_len == 0 {
            return Err(Error::config(format!(
                "stack: dim/blocks/ffn_mult/max_len must be positive, got {}/{}/{}/{}",
                self.dim, self.blocks, self.ffn_mult, self.max_len
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "stack: {} heads does not divide width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles for one stack; the tensors live in the shared
/// `ParamSet` under `<prefix>.`-qualified names.
#[derive(Clone, Debug)]
pub struct StackParams {
    cfg: StackConfig,
    pos: Option<ParamId>,
    blocks: Vec<BlockParams>,
    lnf_gamma: ParamId,
    lnf_beta: ParamId,
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n]).expect("length matches")
}

impl StackParams {
    pub fn init(
        prefix: &str,
        cfg: StackConfig,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.dim;
        let f = cfg.ffn_mult * h;
        let pos = if cfg.positional {
            Some(ps.add(
                format!("{prefix}.pos"),
                Tensor::randn(&[cfg.max_len, h], INIT_STD, rng),
            )?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = |suffix: &str| format!("{prefix}.block{b}.{suffix}");
            blocks.push(BlockParams {
                ln1_gamma: ps.add(p("ln1.gamma"), ones(h))?,
                ln1_beta: ps.add(p("ln1.beta"), Tensor::zeros(&[h]))?,
                wq: ps.add(p("attn.wq"), Tensor::randn(&[h, h], INIT_STD, rng))?,
                bq: ps.add(p("attn.bq"), Tensor::zeros(&[h]))?,
                wk: ps.add(p("attn.wk"), Tensor::randn(&[h, h], INIT_STD, rng))?,
                bk: ps.add(p("attn.bk"), Tensor::zeros(&[h]))?,
                wv: ps.add(p("attn.wv"), Tensor::randn(&[h, h], INIT_STD, rng))?,
                bv: ps.add(p("attn.bv"), Tensor::zeros(&[h]))?,
                wo: ps.add(p("attn.wo"), Tensor::randn(&[h, h], INIT_STD, rng))?,
                bo: ps.add(p("attn.bo"), Tensor::zeros(&[h]))?,
                ln2_gamma: ps.add(p("ln2.gamma"), ones(h))?,
                ln2_beta: ps.add(p("ln2.beta"), Tensor::zeros(&[h]))?,
                w1: ps.add(p("ffn.w1"), Tensor::randn(&[h, f], INIT_STD, rng))?,
                b1: ps.add(p("ffn.b1"), Tensor::zeros(&[f]))?,
                w2: ps.add(p("ffn.w2"), Tensor::randn(&[f, h], INIT_STD, rng))?,
                b2: ps.add(p("ffn.b2"), Tensor::zeros(&[h]))?,
            });
        }
        let lnf_gamma = ps.add(format!("{prefix}.lnf.gamma"), ones(h))?;
        let lnf_beta = ps.add(format!("{prefix}.lnf.beta"), Tensor::zeros(&[h]))?;
        Ok(StackParams {
            cfg,
            pos,
            blocks,
            lnf_gamma,
            lnf_beta,
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.cfg
    }

    /// Run the stack on an L×H input already containing whatever content
    /// embeddings the caller assembled.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (len, _) = g.value(x).expect_2d("stack input")?;
        self.forward_batch(g, x, len)
    }

    /// Run the stack on several same-length sequences at once: `x` holds
    /// B·seq rows, sequence after sequence. Attention and positional
    /// embeddings treat each length-`seq` block independently; every other
    /// sublayer is row-local, so batching changes nothing but throughput.
    pub fn forward_batch(&self, g: &mut Graph, x: Var, seq: usize) -> Result<Var> {
        let (rows, width) = g.value(x).expect_2d("stack input")?;
        if width != self.cfg.dim {
            return Err(Error::shape(format!(
                "stack: input width {width} does not match configured width {}",
                self.cfg.dim
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape(format!(
                "stack: {rows} rows is not a whole number of length-{seq} sequences"
            )));
        }
        if seq > self.cfg.max_len {
            return Err(Error::shape(format!(
                "stack: sequence length {seq} exceeds positional capacity {}",
                self.cfg.max_len
            )));
        }
        let items = rows / seq;
        let mut x = x;
        if let Some(pos) = self.pos {
            let table = g.param(pos);
            let rows_v = g.slice_rows(table, 0, seq)?;
            let tiled = g.repeat_rows(rows_v, items)?;
            x = g.add(x, tiled)?;
        }
        for blk in &self.blocks {
            // Attention sublayer.
            let ln1g = g.param(blk.ln1_gamma);
            let ln1b = g.param(blk.ln1_beta);
            let h = g.layer_norm(x, ln1g, ln1b, LN_EPS)?;
            let (wq, bq) = (g.param(blk.wq), g.param(blk.bq));
            let (wk, bk) = (g.param(blk.wk), g.param(blk.bk));
            let (wv, bv) = (g.param(blk.wv), g.param(blk.bv));
            let q = g.affine(h, wq, bq)?;
            let k = g.affine(h, wk, bk)?;
            let v = g.affine(h, wv, bv)?;
            let merged = g.multi_head_attention(q, k, v, self.cfg.heads, seq)?;
            let (wo, bo) = (g.param(blk.wo), g.param(blk.bo));
            let attn = g.affine(merged, wo, bo)?;
            x = g.add(x, attn)?;

            // Feed-forward sublayer.
            let ln2g = g.param(blk.ln2_gamma);
            let ln2b = g.param(blk.ln2_beta);
            let h = g.layer_norm(x, ln2g, ln2b, LN_EPS)?;
            let (w1, b1) = (g.param(blk.w1), g.param(blk.b1));
            let (w2, b2) = (g.param(blk.w2), g.param(blk.b2));
            let mid = g.affine(h, w1, b1)?;
            let act = g.gelu(mid);
            let out = g.affine(act, w2, b2)?;
            x = g.add(x, out)?;
        }
        let lg = g.param(self.lnf_gamma);
        let lb = g.param(self.lnf_beta);
        g.layer_norm(x, lg, lb, LN_EPS)
    }
}
