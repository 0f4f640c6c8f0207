//! Loss construction and the staged training drivers.
//!
//! The recipe has three rounds. `train_base` fits an unconditional language
//! model. `train_phase1` freezes it and fits the attribute embedding plus
//! the projection block on conditional likelihood alone, then records the
//! block's resting point and a curvature estimate. `train_phase2` adds the
//! discriminator and trains the joint objective while an elastic penalty
//! holds the block near its recorded anchor.

use crate::corpus::LabeledSequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    attribute_embed, base_hidden, causal_mask, discriminate, head_logits_all, project,
    AdlmParams, BlockParams, BoundBlock, BoundParams, FisherDiagonal, Stage, TrainScope,
};
use crate::optim::{adamw_step, linear_schedule, OptimizerState};
use crate::tensor::Tensor;
use crate::util::{argmax_tie_low, derive_seed};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub weight_decay: f64,
    pub freeze_all_base: bool,
    /// Sequences used for the curvature estimate; 0 means the whole set.
    pub fisher_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            batch_size: 32,
            epochs: 1,
            lambda: 0.1,
            weight_decay: 0.01,
            freeze_all_base: true,
            fisher_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be > 0".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config("lr0 must be finite and non-negative".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProgressEvent {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub lm_loss: f64,
    pub disc_loss: Option<f64>,
    pub penalty: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Which terms the batch objective carries.
pub enum LossMode<'a> {
    /// Unconditional next-token likelihood.
    BaseLm,
    /// Attribute-tagged next-token likelihood.
    ConditionalLm,
    /// Tagged likelihood + discriminator + anchored quadratic penalty.
    Joint {
        lambda: f64,
        anchor: &'a BlockParams,
        fisher: &'a FisherDiagonal,
    },
}

pub struct BatchLoss {
    pub total: Var,
    pub lm_value: f64,
    pub disc_value: Option<f64>,
    pub penalty_value: Option<f64>,
}

/// Per-sequence language-model loss: mean cross-entropy of each next token
/// given its prefix. Needs at least two tokens.
fn sequence_lm_loss(
    g: &mut Graph,
    logits_source: Var,
    ids: &[usize],
) -> Result<Var> {
    let t = ids.len();
    if t < 2 {
        return Err(Error::invalid("language-model loss needs at least 2 tokens"));
    }
    let prefix = g.slice_rows(logits_source, 0, t - 1)?;
    let nll = g.cross_entropy_logits(prefix, &ids[1..])?;
    Ok(g.mean_all(nll))
}

/// Forward one sequence through the base, and through the projection when
/// an attribute is given. Returns the representation the head reads from.
fn sequence_repr(
    g: &mut Graph,
    bound: &BoundParams,
    config: &crate::model::ModelConfig,
    ids: &[usize],
    attribute: Option<usize>,
) -> Result<Var> {
    let h = base_hidden(g, &bound.base, config, ids)?;
    match attribute {
        None => Ok(h),
        Some(a) => {
            let mask = causal_mask(g, ids.len());
            let z = attribute_embed(g, bound.attr_embed, a)?;
            project(g, &bound.proj, config, h, z, mask)
        }
    }
}

/// Quadratic penalty tying the projection block to its anchor, weighted by
/// the curvature diagonal: (lambda / 2) * sum_j F_j * (theta_j - anchor_j)^2.
pub fn anchored_penalty(
    g: &mut Graph,
    proj: &BoundBlock,
    anchor: &BlockParams,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<Var> {
    if !fisher.congruent_with(anchor) {
        return Err(Error::invalid("curvature diagonal does not match the anchor shapes"));
    }
    let vars = [
        proj.ln1_gamma, proj.ln1_beta, proj.wq, proj.bq, proj.wk, proj.bk, proj.wv, proj.bv,
        proj.wo, proj.bo, proj.ln2_gamma, proj.ln2_beta, proj.w_fc, proj.b_fc, proj.w_out,
        proj.b_out,
    ];
    let mut acc: Option<Var> = None;
    for (i, (_, anchor_t)) in anchor.tensors().iter().enumerate() {
        let a = g.constant(&anchor_t.shape, anchor_t.data.clone())?;
        let f = g.constant(&fisher.values[i].shape, fisher.values[i].data.clone())?;
        let diff = g.sub(vars[i], a)?;
        let sq = g.mul(diff, diff)?;
        let weighted = g.mul(f, sq)?;
        let s = g.sum_all(weighted);
        acc = Some(match acc {
            None => s,
            Some(prev) => g.add(prev, s)?,
        });
    }
    let total = acc.expect("sixteen block tensors");
    Ok(g.scale(total, lambda / 2.0))
}

/// Same penalty computed directly on the parameter structs.
pub fn anchored_penalty_value(
    proj: &BlockParams,
    anchor: &BlockParams,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, ((_, p), (_, a))) in proj.tensors().iter().zip(anchor.tensors().iter()).enumerate() {
        for j in 0..p.data.len() {
            let d = p.data[j] - a.data[j];
            total += fisher.values[i].data[j] * d * d;
        }
    }
    lambda / 2.0 * total
}

/// Builds the batch objective in one graph so a single backward pass covers
/// every term. Component values are read back for logging.
pub fn batch_loss(
    g: &mut Graph,
    bound: &BoundParams,
    config: &crate::model::ModelConfig,
    batch: &[&LabeledSequence],
    mode: &LossMode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mut lm_acc: Option<Var> = None;
    let mut disc_acc: Option<Var> = None;
    for seq in batch {
        let attribute = match mode {
            LossMode::BaseLm => None,
            _ => Some(seq.attribute),
        };
        let repr = sequence_repr(g, bound, config, &seq.ids, attribute)?;
        let logits = head_logits_all(g, &bound.head, repr)?;
        let lm = sequence_lm_loss(g, logits, &seq.ids)?;
        lm_acc = Some(match lm_acc {
            None => lm,
            Some(prev) => g.add(prev, lm)?,
        });
        if matches!(mode, LossMode::Joint { .. }) {
            let attr_logits = discriminate(g, &bound.disc, repr)?;
            let a = g.shape(attr_logits)[0];
            let row = g.reshape(attr_logits, &[1, a])?;
            let nll = g.cross_entropy_logits(row, &[seq.attribute])?;
            let d = g.mean_all(nll);
            disc_acc = Some(match disc_acc {
                None => d,
                Some(prev) => g.add(prev, d)?,
            });
        }
    }
    let lm_mean = g.scale(lm_acc.expect("non-empty batch"), 1.0 / n);
    let lm_value = g.value(lm_mean);

    let mut total = lm_mean;
    let mut disc_value = None;
    let mut penalty_value = None;
    if let Some(dsum) = disc_acc {
        let dmean = g.scale(dsum, 1.0 / n);
        disc_value = Some(g.value(dmean));
        total = g.add(total, dmean)?;
    }
    if let LossMode::Joint {
        lambda,
        anchor,
        fisher,
    } = mode
    {
        let pen = anchored_penalty(g, &bound.proj, anchor, fisher, *lambda)?;
        penalty_value = Some(g.value(pen));
        total = g.add(total, pen)?;
    }
    Ok(BatchLoss {
        total,
        lm_value,
        disc_value,
        penalty_value,
    })
}

/// Mean per-token language-model loss of one sequence under frozen weights.
pub fn lm_loss_value(
    params: &AdlmParams,
    ids: &[usize],
    attribute: Option<usize>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let repr = sequence_repr(&mut g, &bound, &params.config, ids, attribute)?;
    let logits = head_logits_all(&mut g, &bound.head, repr)?;
    let loss = sequence_lm_loss(&mut g, logits, ids)?;
    Ok(g.value(loss))
}

/// Mean language-model loss over a whole set.
pub fn mean_lm_loss(
    params: &AdlmParams,
    data: &[LabeledSequence],
    conditional: bool,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for seq in data {
        let attr = if conditional { Some(seq.attribute) } else { None };
        total += lm_loss_value(params, &seq.ids, attr)?;
    }
    Ok(total / data.len() as f64)
}

/// Predicted attribute for one sequence, ties to the lowest index.
pub fn classify(params: &AdlmParams, ids: &[usize], attribute_for_tag: usize) -> Result<usize> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let repr = sequence_repr(&mut g, &bound, &params.config, ids, Some(attribute_for_tag))?;
    let logits = discriminate(&mut g, &bound.disc, repr)?;
    Ok(argmax_tie_low(g.data(logits)))
}

/// Discriminator accuracy over a labeled set. Each example is projected
/// under its own attribute tag, matching how the discriminator was trained.
pub fn disc_accuracy(params: &AdlmParams, data: &[LabeledSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut correct = 0usize;
    for seq in data {
        if classify(params, &seq.ids, seq.attribute)? == seq.attribute {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Elementwise mean of squared gradients: the curvature estimate for one
/// tensor given one gradient sample per row.
pub fn mean_squared_grads(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("curvature estimate needs at least one sample"));
    }
    let len = samples[0].len();
    let mut out = vec![0.0; len];
    for s in samples {
        if s.len() != len {
            return Err(Error::invalid("gradient samples differ in length"));
        }
        for (o, g) in out.iter_mut().zip(s) {
            *o += g * g;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// Diagonal curvature of the projection block: for each parameter, the mean
/// over sequences of the squared gradient of that sequence's token-mean
/// conditional language-model loss.
pub fn fisher_diag(
    params: &AdlmParams,
    data: &[LabeledSequence],
    n_samples: usize,
    seed: u64,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::invalid("curvature estimate needs data"));
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let take = if n_samples == 0 || n_samples >= data.len() {
        data.len()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fisher", 0));
        indices.shuffle(&mut rng);
        n_samples
    };
    let scope = TrainScope::stage(Stage::Phase1, true);
    let mut acc = FisherDiagonal::zeros_like(&params.proj_block);
    let mut used = 0usize;
    for &i in indices.iter().take(take) {
        let seq = &data[i];
        if seq.ids.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g, &scope);
        let repr = sequence_repr(&mut g, &bound, &params.config, &seq.ids, Some(seq.attribute))?;
        let logits = head_logits_all(&mut g, &bound.head, repr)?;
        let loss = sequence_lm_loss(&mut g, logits, &seq.ids)?;
        g.backward(loss)?;
        let proj_vars = [
            bound.proj.ln1_gamma, bound.proj.ln1_beta, bound.proj.wq, bound.proj.bq,
            bound.proj.wk, bound.proj.bk, bound.proj.wv, bound.proj.bv, bound.proj.wo,
            bound.proj.bo, bound.proj.ln2_gamma, bound.proj.ln2_beta, bound.proj.w_fc,
            bound.proj.b_fc, bound.proj.w_out, bound.proj.b_out,
        ];
        for (slot, var) in acc.values.iter_mut().zip(proj_vars) {
            if let Some(grad) = g.grad(var) {
                for (o, gv) in slot.data.iter_mut().zip(grad) {
                    *o += gv * gv;
                }
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("no usable sequences for the curvature estimate"));
    }
    for t in &mut acc.values {
        for v in &mut t.data {
            *v /= used as f64;
        }
    }
    Ok(acc)
}

fn minibatches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn run_stage(
    params: &mut AdlmParams,
    data: &[LabeledSequence],
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
    sink: &mut dyn FnMut(&ProgressEvent),
) -> Result<TrainReport> {
    cfg.validate()?;
    params.config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let scope = TrainScope::stage(stage, cfg.freeze_all_base);
    let n_batches = minibatches(data.len(), cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let mut opt = OptimizerState::new(cfg.lr0, cfg.weight_decay);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let anchor_fisher = if matches!(stage, Stage::Phase2) {
        let anchor = params
            .proj_anchor
            .clone()
            .ok_or_else(|| Error::StageOrder("joint phase needs the recorded anchor; run the conditioning phase first".into()))?;
        let fisher = params
            .fisher
            .clone()
            .ok_or_else(|| Error::StageOrder("joint phase needs the curvature estimate; run the conditioning phase first".into()))?;
        Some((anchor, fisher))
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = linear_schedule(step as u64, total_steps as u64, cfg.lr0)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, &scope);
            let mode = match (&stage, &anchor_fisher) {
                (Stage::Base, _) => LossMode::BaseLm,
                (Stage::Phase1, _) => LossMode::ConditionalLm,
                (Stage::Phase2, Some((anchor, fisher))) => LossMode::Joint {
                    lambda: cfg.lambda,
                    anchor,
                    fisher,
                },
                (Stage::Phase2, None) => unreachable!("checked above"),
            };
            let loss = batch_loss(&mut g, &bound, &params.config, &batch, &mode)?;
            let loss_value = g.value(loss.total);
            g.backward(loss.total)?;
            params.absorb_grads(&g, &bound, &scope);
            {
                let scoped = params
                    .param_list_mut()
                    .into_iter()
                    .filter(|(p, _, _)| scope.trains(*p))
                    .map(|(_, name, t)| (name, t));
                adamw_step(&mut opt, scoped, lr);
            }
            params.clear_grads();
            step += 1;
            epoch_loss += loss_value;
            sink(&ProgressEvent {
                stage: stage.name(),
                epoch,
                step,
                total_steps,
                lr,
                loss: loss_value,
                lm_loss: loss.lm_value,
                disc_loss: loss.disc_value,
                penalty: loss.penalty_value,
            });
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }
    Ok(TrainReport {
        steps: step,
        epoch_losses,
    })
}

/// Fits the unconditional language model (base plus head).
pub fn train_base(
    params: &mut AdlmParams,
    data: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&ProgressEvent),
) -> Result<TrainReport> {
    run_stage(params, data, cfg, Stage::Base, seed, sink)
}

/// Fits the attribute embedding and projection block on conditional
/// likelihood, then records the anchor and curvature for the next round.
pub fn train_phase1(
    params: &mut AdlmParams,
    data: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&ProgressEvent),
) -> Result<TrainReport> {
    let report = run_stage(params, data, cfg, Stage::Phase1, seed, sink)?;
    params.proj_anchor = Some(params.proj_block.clone());
    params.fisher = Some(fisher_diag(params, data, cfg.fisher_samples, seed)?);
    Ok(report)
}

/// Fits the joint objective with a freshly initialized discriminator while
/// the anchored penalty restrains the projection block.
pub fn train_phase2(
    params: &mut AdlmParams,
    data: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&ProgressEvent),
) -> Result<TrainReport> {
    if params.proj_anchor.is_none() || params.fisher.is_none() {
        return Err(Error::StageOrder(
            "joint phase needs the anchor and curvature from the conditioning phase".into(),
        ));
    }
    params.reinit_disc(derive_seed(seed, "disc", 0));
    run_stage(params, data, cfg, Stage::Phase2, seed, sink)
}

/// Clones of the tensors a scope trains, in flat order.
pub fn trainable_tensors(params: &AdlmParams, scope: &TrainScope) -> Vec<Tensor> {
    params
        .param_list()
        .into_iter()
        .filter(|(p, _, _)| scope.trains(*p))
        .map(|(_, _, t)| t.clone())
        .collect()
}

/// Rebuilds the full bound parameter set where the scope's trainable slots
/// come from supplied variables and everything else binds frozen. Used to
/// compare analytic gradients of the objective against finite differences.
pub fn bind_mixed(
    g: &mut Graph,
    params: &AdlmParams,
    scope: &TrainScope,
    trained: &[Var],
) -> Result<BoundParams> {
    let list = params.param_list();
    let expected = list.iter().filter(|(p, _, _)| scope.trains(*p)).count();
    if trained.len() != expected {
        return Err(Error::invalid(format!(
            "expected {expected} trainable tensors, got {}",
            trained.len()
        )));
    }
    let mut cursor = 0usize;
    let flat: Vec<Var> = list
        .iter()
        .map(|(p, _, t)| {
            if scope.trains(*p) {
                let v = trained[cursor];
                cursor += 1;
                v
            } else {
                g.leaf_tracked(t, false)
            }
        })
        .collect();
    BoundParams::from_vars(&params.config, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledSequence;
    use crate::graph::grad_check;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_base_layers: 1,
            n_heads: 2,
            block_size: 10,
            n_attributes: 2,
            seed: 7,
        }
    }

    fn tiny_data() -> Vec<LabeledSequence> {
        vec![
            LabeledSequence { ids: vec![1, 4, 5, 6, 4], attribute: 0 },
            LabeledSequence { ids: vec![1, 7, 8, 9, 7], attribute: 1 },
            LabeledSequence { ids: vec![1, 4, 6, 4, 6], attribute: 0 },
            LabeledSequence { ids: vec![1, 9, 7, 9, 8], attribute: 1 },
        ]
    }

    #[test]
    fn mean_squared_grads_hand_case() {
        let f = mean_squared_grads(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(f, vec![5.0]);
        assert!(mean_squared_grads(&[]).is_err());
    }

    #[test]
    fn penalty_is_zero_at_the_anchor_and_grows_quadratically() {
        let params = AdlmParams::init(tiny_config()).unwrap();
        let anchor = params.proj_block.clone();
        let mut fisher = FisherDiagonal::zeros_like(&anchor);
        for t in &mut fisher.values {
            for v in &mut t.data {
                *v = 3.0;
            }
        }
        assert_eq!(
            anchored_penalty_value(&params.proj_block, &anchor, &fisher, 0.1),
            0.0
        );
        let mut moved = params.proj_block.clone();
        moved.wq.data[0] += 2.0;
        // (0.1 / 2) * 3 * 2^2
        let want = 0.1 / 2.0 * 3.0 * 4.0;
        let got = anchored_penalty_value(&moved, &anchor, &fisher, 0.1);
        assert!((got - want).abs() < 1e-12);
        let doubled = anchored_penalty_value(&moved, &anchor, &fisher, 0.2);
        assert!((doubled - 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn graph_penalty_matches_direct_computation() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let anchor = params.proj_block.clone();
        params.proj_block.wq.data[3] += 0.5;
        params.proj_block.b_fc.data[1] -= 0.25;
        let fisher = fisher_diag(&params, &tiny_data(), 0, 11).unwrap();
        let direct = anchored_penalty_value(&params.proj_block, &anchor, &fisher, 0.7);
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let pen = anchored_penalty(&mut g, &bound.proj, &anchor, &fisher, 0.7).unwrap();
        assert!((g.value(pen) - direct).abs() < 1e-12);
    }

    #[test]
    fn curvature_is_nonnegative_and_congruent() {
        let params = AdlmParams::init(tiny_config()).unwrap();
        let fisher = fisher_diag(&params, &tiny_data(), 0, 3).unwrap();
        assert!(fisher.congruent_with(&params.proj_block));
        assert!(fisher.all_nonnegative());
        let sub = fisher_diag(&params, &tiny_data(), 2, 3).unwrap();
        assert!(sub.congruent_with(&params.proj_block));
    }

    #[test]
    fn base_training_reduces_the_loss() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let data = tiny_data();
        let before = mean_lm_loss(&params, &data, false).unwrap();
        let cfg = TrainConfig {
            lr0: 1e-2,
            batch_size: 2,
            epochs: 10,
            ..TrainConfig::default()
        };
        train_base(&mut params, &data, &cfg, 5, &mut |_| {}).unwrap();
        let after = mean_lm_loss(&params, &data, false).unwrap();
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn phase1_freezes_the_base_and_records_anchor_and_curvature() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let frozen = params.clone();
        let cfg = TrainConfig {
            lr0: 1e-2,
            batch_size: 2,
            epochs: 3,
            ..TrainConfig::default()
        };
        train_phase1(&mut params, &tiny_data(), &cfg, 5, &mut |_| {}).unwrap();
        assert!(params.frozen_bitwise_eq(&frozen));
        let anchor = params.proj_anchor.as_ref().unwrap();
        assert_eq!(anchor, &params.proj_block);
        assert!(params.fisher.as_ref().unwrap().congruent_with(anchor));
    }

    #[test]
    fn phase2_without_phase1_is_rejected() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let cfg = TrainConfig::default();
        let err = train_phase2(&mut params, &tiny_data(), &cfg, 5, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::StageOrder(_)));
    }

    #[test]
    fn phase2_moves_the_block_but_not_the_base() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let cfg = TrainConfig {
            lr0: 1e-2,
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        train_phase1(&mut params, &tiny_data(), &cfg, 5, &mut |_| {}).unwrap();
        let frozen = params.clone();
        train_phase2(&mut params, &tiny_data(), &cfg, 6, &mut |_| {}).unwrap();
        assert!(params.frozen_bitwise_eq(&frozen));
        assert!(params.proj_block.l2_distance(frozen.proj_anchor.as_ref().unwrap()) > 0.0);
    }

    #[test]
    fn progress_events_cover_every_step() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let cfg = TrainConfig {
            lr0: 1e-3,
            batch_size: 3,
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut events = Vec::new();
        let report = train_base(&mut params, &tiny_data(), &cfg, 5, &mut |e| {
            events.push((e.step, e.lr, e.loss))
        })
        .unwrap();
        // 4 sequences in batches of 3 -> 2 batches per epoch, 2 epochs.
        assert_eq!(report.steps, 4);
        assert_eq!(events.len(), 4);
        assert!(events.windows(2).all(|w| w[0].1 >= w[1].1), "lr must decay");
        assert_eq!(report.epoch_losses.len(), 2);
    }

    #[test]
    fn joint_objective_gradients_match_finite_differences() {
        let mut params = AdlmParams::init(tiny_config()).unwrap();
        let cfg = TrainConfig {
            lr0: 5e-3,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        train_phase1(&mut params, &tiny_data(), &cfg, 5, &mut |_| {}).unwrap();
        let anchor = params.proj_anchor.clone().unwrap();
        let fisher = params.fisher.clone().unwrap();
        let scope = TrainScope::stage(Stage::Phase2, true);
        let tensors = trainable_tensors(&params, &scope);
        let data = tiny_data();
        let score = grad_check(
            &tensors,
            |g, vars| {
                let bound = bind_mixed(g, &params, &scope, vars)?;
                let batch: Vec<&LabeledSequence> = data.iter().collect();
                let mode = LossMode::Joint {
                    lambda: 0.1,
                    anchor: &anchor,
                    fisher: &fisher,
                };
                Ok(batch_loss(g, &bound, &params.config, &batch, &mode)?.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(score < 1e-4, "max relative gradient error {score}");
    }

    #[test]
    fn batch_loss_rejects_empty_batches_and_short_sequences() {
        let params = AdlmParams::init(tiny_config()).unwrap();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        assert!(batch_loss(&mut g, &bound, &params.config, &[], &LossMode::BaseLm).is_err());
        let short = LabeledSequence { ids: vec![1], attribute: 0 };
        assert!(
            batch_loss(&mut g, &bound, &params.config, &[&short], &LossMode::BaseLm).is_err()
        );
    }
}
