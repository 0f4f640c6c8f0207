//! The attribute-conditioned model: a causal transformer base, a frozen
//! output head shared by every branch, an attribute embedding table, one
//! projection block that maps tagged hidden states into an
//! attribute-discriminative space, and a linear discriminator over the
//! pooled projection.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::util::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_base_layers: usize,
    pub n_heads: usize,
    pub block_size: usize,
    pub n_attributes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            d_model: 64,
            n_base_layers: 2,
            n_heads: 4,
            block_size: 64,
            n_attributes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::corpus::N_RESERVED {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if self.block_size == 0 || self.n_base_layers == 0 {
            return Err(Error::Config("block_size and n_base_layers must be > 0".into()));
        }
        if self.n_attributes < 2 {
            return Err(Error::Config("n_attributes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Partition {
    Base,
    Head,
    AttrEmbed,
    ProjBlock,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Phase1,
    Phase2,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Phase1 => "phase1",
            Stage::Phase2 => "phase2",
        }
    }
}

/// Which partitions receive gradients and optimizer updates.
#[derive(Clone, Copy, Debug)]
pub struct TrainScope {
    pub stage: Option<Stage>,
    pub freeze_all_base: bool,
}

impl TrainScope {
    pub fn stage(stage: Stage, freeze_all_base: bool) -> Self {
        TrainScope {
            stage: Some(stage),
            freeze_all_base,
        }
    }

    pub fn inference() -> Self {
        TrainScope {
            stage: None,
            freeze_all_base: true,
        }
    }

    pub fn trains(&self, p: Partition) -> bool {
        match self.stage {
            None => false,
            Some(Stage::Base) => matches!(p, Partition::Base | Partition::Head),
            Some(Stage::Phase1) => match p {
                Partition::AttrEmbed | Partition::ProjBlock => true,
                Partition::Base | Partition::Head => !self.freeze_all_base,
                Partition::Disc => false,
            },
            Some(Stage::Phase2) => match p {
                Partition::AttrEmbed | Partition::ProjBlock | Partition::Disc => true,
                Partition::Base | Partition::Head => !self.freeze_all_base,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineParams {
            w: Tensor::randn(&[in_dim, out_dim], INIT_STD, rng).with_grad(),
            b: Tensor::zeros(&[out_dim]).with_grad(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl BlockParams {
    /// Residual out-projections start at zero so a fresh block is an exact
    /// identity map; everything else uses the usual Gaussian init.
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            ln1_gamma: Tensor::full(&[d], 1.0).with_grad(),
            ln1_beta: Tensor::zeros(&[d]).with_grad(),
            wq: Tensor::randn(&[d, d], INIT_STD, rng).with_grad(),
            bq: Tensor::zeros(&[d]).with_grad(),
            wk: Tensor::randn(&[d, d], INIT_STD, rng).with_grad(),
            bk: Tensor::zeros(&[d]).with_grad(),
            wv: Tensor::randn(&[d, d], INIT_STD, rng).with_grad(),
            bv: Tensor::zeros(&[d]).with_grad(),
            wo: Tensor::zeros(&[d, d]).with_grad(),
            bo: Tensor::zeros(&[d]).with_grad(),
            ln2_gamma: Tensor::full(&[d], 1.0).with_grad(),
            ln2_beta: Tensor::zeros(&[d]).with_grad(),
            w_fc: Tensor::randn(&[d, 4 * d], INIT_STD, rng).with_grad(),
            b_fc: Tensor::zeros(&[4 * d]).with_grad(),
            w_out: Tensor::zeros(&[4 * d, d]).with_grad(),
            b_out: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub const FIELD_NAMES: [&'static str; 16] = [
        "ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gamma",
        "ln2_beta", "w_fc", "b_fc", "w_out", "b_out",
    ];

    pub fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn l2_distance(&self, other: &BlockParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
}

/// Per-tensor curvature estimate congruent with `BlockParams::tensors()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<Tensor>,
}

impl FisherDiagonal {
    pub fn zeros_like(block: &BlockParams) -> Self {
        FisherDiagonal {
            values: block
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(&t.shape))
                .collect(),
        }
    }

    pub fn congruent_with(&self, block: &BlockParams) -> bool {
        self.values.len() == 16
            && self
                .values
                .iter()
                .zip(block.tensors().iter())
                .all(|(f, (_, t))| f.shape == t.shape)
    }

    pub fn all_nonnegative(&self) -> bool {
        self.values
            .iter()
            .all(|t| t.data.iter().all(|&v| v >= 0.0))
    }
}

#[derive(Clone, Debug)]
pub struct AdlmParams {
    pub config: ModelConfig,
    pub base: BaseParams,
    pub head: AffineParams,
    pub attr_embed: Tensor,
    pub proj_block: BlockParams,
    pub disc: AffineParams,
    /// Snapshot of the projection block after its first training round.
    pub proj_anchor: Option<BlockParams>,
    pub fisher: Option<FisherDiagonal>,
}

impl AdlmParams {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
        let base = BaseParams {
            tok_embed: Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng).with_grad(),
            pos_embed: Tensor::randn(&[config.block_size, d], INIT_STD, &mut rng).with_grad(),
            blocks: (0..config.n_base_layers)
                .map(|_| BlockParams::init(d, &mut rng))
                .collect(),
            lnf_gamma: Tensor::full(&[d], 1.0).with_grad(),
            lnf_beta: Tensor::zeros(&[d]).with_grad(),
        };
        let head = AffineParams::init(d, config.vocab_size, &mut rng);
        let attr_embed = Tensor::randn(&[config.n_attributes, d], INIT_STD, &mut rng).with_grad();
        let proj_block = BlockParams::init(d, &mut rng);
        let disc = AffineParams::init(d, config.n_attributes, &mut rng);
        Ok(AdlmParams {
            config,
            base,
            head,
            attr_embed,
            proj_block,
            disc,
            proj_anchor: None,
            fisher: None,
        })
    }

    /// Fresh discriminator weights, used when the joint phase starts.
    pub fn reinit_disc(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "disc-init", 0));
        self.disc = AffineParams::init(self.config.d_model, self.config.n_attributes, &mut rng);
    }

    pub fn param_list(&self) -> Vec<(Partition, String, &Tensor)> {
        let mut out = Vec::with_capacity(16 * self.base.blocks.len() + 25);
        out.push((Partition::Base, "base.tok_embed".to_string(), &self.base.tok_embed));
        out.push((Partition::Base, "base.pos_embed".to_string(), &self.base.pos_embed));
        for (i, blk) in self.base.blocks.iter().enumerate() {
            for (name, t) in blk.tensors() {
                out.push((Partition::Base, format!("base.block{i}.{name}"), t));
            }
        }
        out.push((Partition::Base, "base.lnf_gamma".to_string(), &self.base.lnf_gamma));
        out.push((Partition::Base, "base.lnf_beta".to_string(), &self.base.lnf_beta));
        out.push((Partition::Head, "head.w".to_string(), &self.head.w));
        out.push((Partition::Head, "head.b".to_string(), &self.head.b));
        out.push((Partition::AttrEmbed, "attr_embed".to_string(), &self.attr_embed));
        for (name, t) in self.proj_block.tensors() {
            out.push((Partition::ProjBlock, format!("proj.{name}"), t));
        }
        out.push((Partition::Disc, "disc.w".to_string(), &self.disc.w));
        out.push((Partition::Disc, "disc.b".to_string(), &self.disc.b));
        out
    }

    pub fn param_list_mut(&mut self) -> Vec<(Partition, String, &mut Tensor)> {
        let mut out: Vec<(Partition, String, &mut Tensor)> = Vec::new();
        out.push((Partition::Base, "base.tok_embed".to_string(), &mut self.base.tok_embed));
        out.push((Partition::Base, "base.pos_embed".to_string(), &mut self.base.pos_embed));
        for (i, blk) in self.base.blocks.iter_mut().enumerate() {
            for (name, t) in blk.tensors_mut() {
                out.push((Partition::Base, format!("base.block{i}.{name}"), t));
            }
        }
        out.push((Partition::Base, "base.lnf_gamma".to_string(), &mut self.base.lnf_gamma));
        out.push((Partition::Base, "base.lnf_beta".to_string(), &mut self.base.lnf_beta));
        out.push((Partition::Head, "head.w".to_string(), &mut self.head.w));
        out.push((Partition::Head, "head.b".to_string(), &mut self.head.b));
        out.push((Partition::AttrEmbed, "attr_embed".to_string(), &mut self.attr_embed));
        for (name, t) in self.proj_block.tensors_mut() {
            out.push((Partition::ProjBlock, format!("proj.{name}"), t));
        }
        out.push((Partition::Disc, "disc.w".to_string(), &mut self.disc.w));
        out.push((Partition::Disc, "disc.b".to_string(), &mut self.disc.b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_list().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn n_params_in(&self, p: Partition) -> usize {
        self.param_list()
            .iter()
            .filter(|(q, _, _)| *q == p)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Binds every parameter into the graph; partitions outside the scope
    /// become untracked leaves and can never receive gradients.
    pub fn bind(&self, g: &mut Graph, scope: &TrainScope) -> BoundParams {
        let list = self.param_list();
        let flat: Vec<Var> = list
            .iter()
            .map(|(p, _, t)| g.leaf_tracked(t, scope.trains(*p)))
            .collect();
        BoundParams::from_vars(&self.config, &flat).expect("param order is fixed")
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind(g, &TrainScope::inference())
    }

    /// Copies gradients for in-scope partitions out of the graph.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &BoundParams, scope: &TrainScope) {
        let grads: Vec<Option<Vec<f64>>> = bound
            .flat
            .iter()
            .map(|&v| g.grad(v).map(|s| s.to_vec()))
            .collect();
        for ((p, _, t), grad) in self.param_list_mut().into_iter().zip(grads) {
            if scope.trains(p) {
                t.grad = grad;
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, _, t) in self.param_list_mut() {
            t.grad = None;
        }
    }

    /// Bitwise equality of the frozen partitions (base and head).
    pub fn frozen_bitwise_eq(&self, other: &AdlmParams) -> bool {
        let a = self.param_list();
        let b = other.param_list();
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((pa, _, ta), (pb, _, tb))| {
                if *pa != *pb {
                    return false;
                }
                match pa {
                    Partition::Base | Partition::Head => ta.bitwise_eq(tb),
                    _ => true,
                }
            })
    }
}

pub struct BoundAffine {
    pub w: Var,
    pub b: Var,
}

pub struct BoundBlock {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_out: Var,
    pub b_out: Var,
}

pub struct BoundBase {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub lnf_gamma: Var,
    pub lnf_beta: Var,
}

pub struct BoundParams {
    pub flat: Vec<Var>,
    pub base: BoundBase,
    pub head: BoundAffine,
    pub attr_embed: Var,
    pub proj: BoundBlock,
    pub disc: BoundAffine,
}

pub fn expected_tensor_count(config: &ModelConfig) -> usize {
    16 * config.n_base_layers + 25
}

impl BoundParams {
    /// Reassembles named handles from the flat variable list, in the same
    /// order `param_list` produces.
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        if vars.len() != expected_tensor_count(config) {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected_tensor_count(config),
                vars.len()
            )));
        }
        let mut cur = 0usize;
        let mut next = || {
            let v = vars[cur];
            cur += 1;
            v
        };
        let take_block = |next: &mut dyn FnMut() -> Var| BoundBlock {
            ln1_gamma: next(),
            ln1_beta: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            w_fc: next(),
            b_fc: next(),
            w_out: next(),
            b_out: next(),
        };
        let tok_embed = next();
        let pos_embed = next();
        let blocks: Vec<BoundBlock> = (0..config.n_base_layers)
            .map(|_| take_block(&mut next))
            .collect();
        let lnf_gamma = next();
        let lnf_beta = next();
        let head = BoundAffine {
            w: next(),
            b: next(),
        };
        let attr_embed = next();
        let proj = take_block(&mut next);
        let disc = BoundAffine {
            w: next(),
            b: next(),
        };
        Ok(BoundParams {
            flat: vars.to_vec(),
            base: BoundBase {
                tok_embed,
                pos_embed,
                blocks,
                lnf_gamma,
                lnf_beta,
            },
            head,
            attr_embed,
            proj,
            disc,
        })
    }
}

// ── Forward passes ──────────────────────────────────────────────────────

/// Additive causal mask: zero on and below the diagonal, a large negative
/// constant above, which underflows to exactly zero attention weight.
pub fn causal_mask(g: &mut Graph, t: usize) -> Var {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    g.constant(&[t, t], data).expect("mask shape is consistent")
}

pub fn block_forward(
    g: &mut Graph,
    blk: &BoundBlock,
    config: &ModelConfig,
    x: Var,
    mask: Var,
) -> Result<Var> {
    let t = g.shape(x)[0];
    let d = config.d_model;
    let hd = d / config.n_heads;

    let a = g.layer_norm(x, blk.ln1_gamma, blk.ln1_beta)?;
    let q0 = g.matmul(a, blk.wq)?;
    let q = g.add(q0, blk.bq)?;
    let k0 = g.matmul(a, blk.wk)?;
    let k = g.add(k0, blk.bk)?;
    let v0 = g.matmul(a, blk.wv)?;
    let v = g.add(v0, blk.bv)?;

    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let (s, e) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let masked = g.add(scaled, mask)?;
        let attn = g.softmax(masked)?;
        let oh = g.matmul(attn, vh)?;
        heads.push(oh);
    }
    let cat = g.concat_cols(&heads)?;
    let o0 = g.matmul(cat, blk.wo)?;
    let o = g.add(o0, blk.bo)?;
    let x1 = g.add(x, o)?;

    let m = g.layer_norm(x1, blk.ln2_gamma, blk.ln2_beta)?;
    let f0 = g.matmul(m, blk.w_fc)?;
    let f1 = g.add(f0, blk.b_fc)?;
    let f2 = g.gelu(f1);
    let f3 = g.matmul(f2, blk.w_out)?;
    let ff = g.add(f3, blk.b_out)?;
    let x2 = g.add(x1, ff)?;
    debug_assert_eq!(g.shape(x2), [t, d]);
    Ok(x2)
}

/// Base hidden states: token + position embeddings through the causal
/// blocks and the final layer norm. Shape [t, d_model].
pub fn base_hidden(
    g: &mut Graph,
    base: &BoundBase,
    config: &ModelConfig,
    ids: &[usize],
) -> Result<Var> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::invalid("base_hidden: empty sequence"));
    }
    if t > config.block_size {
        return Err(Error::invalid(format!(
            "sequence length {t} exceeds block_size {}",
            config.block_size
        )));
    }
    let tok = g.embedding(base.tok_embed, ids)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.embedding(base.pos_embed, &positions)?;
    let mut x = g.add(tok, pos)?;
    let mask = causal_mask(g, t);
    for blk in &base.blocks {
        x = block_forward(g, blk, config, x, mask)?;
    }
    let h = g.layer_norm(x, base.lnf_gamma, base.lnf_beta)?;
    Ok(h)
}

/// Attribute embedding row as a [1, d_model] tensor.
pub fn attribute_embed(g: &mut Graph, table: Var, attribute: usize) -> Result<Var> {
    let n = g.shape(table)[0];
    if attribute >= n {
        return Err(Error::IndexOutOfRange {
            op: "attribute_embed",
            index: attribute,
            size: n,
        });
    }
    g.embedding(table, &[attribute])
}

/// Tags every row of `h` with the attribute vector, then applies the
/// projection block. Shape-preserving.
pub fn project(
    g: &mut Graph,
    proj: &BoundBlock,
    config: &ModelConfig,
    h: Var,
    z: Var,
    mask: Var,
) -> Result<Var> {
    let tagged = g.add(h, z)?;
    block_forward(g, proj, config, tagged, mask)
}

/// Vocabulary logits for every position. Shape [t, vocab].
pub fn head_logits_all(g: &mut Graph, head: &BoundAffine, hidden: Var) -> Result<Var> {
    let logits = g.matmul(hidden, head.w)?;
    g.add(logits, head.b)
}

/// Vocabulary logits of the last position only. Shape [vocab].
pub fn head_logits_last(g: &mut Graph, head: &BoundAffine, hidden: Var) -> Result<Var> {
    let t = g.shape(hidden)[0];
    let last = g.slice_rows(hidden, t - 1, t)?;
    let logits = g.matmul(last, head.w)?;
    let logits = g.add(logits, head.b)?;
    let v = g.shape(logits)[1];
    g.reshape(logits, &[v])
}

/// Attribute logits from the position-averaged projection. Shape [n_attributes].
pub fn discriminate(g: &mut Graph, disc: &BoundAffine, hbar: Var) -> Result<Var> {
    let pooled = g.mean_axis(hbar, 0)?;
    let d = g.shape(pooled)[0];
    let row = g.reshape(pooled, &[1, d])?;
    let logits = g.matmul(row, disc.w)?;
    let logits = g.add(logits, disc.b)?;
    let a = g.shape(logits)[1];
    g.reshape(logits, &[a])
}

/// Convenience inference pass: hidden states plus a full forward through
/// the projection for one attribute, returning last-position logits.
pub fn conditional_logits(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    ids: &[usize],
    attribute: usize,
) -> Result<Var> {
    let h = base_hidden(g, &bound.base, config, ids)?;
    let mask = causal_mask(g, ids.len());
    let z = attribute_embed(g, bound.attr_embed, attribute)?;
    let hbar = project(g, &bound.proj, config, h, z, mask)?;
    head_logits_last(g, &bound.head, hbar)
}
