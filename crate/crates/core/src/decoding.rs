//! Decoding: contrastive suppression over two attribute branches that share
//! one base forward pass, nucleus sampling, and a small interactive loop.

use crate::checkpoint::Checkpoint;
use crate::corpus::{detokenize, tokenize, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{softmax_vec, Graph, Var};
use crate::model::{
    attribute_embed, base_hidden, causal_mask, head_logits_last, project, AdlmParams,
    BoundParams,
};
use crate::util::argmax_tie_low;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Suppression strength applied to tokens the undesired branch prefers.
    pub alpha: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub n_samples_per_prompt: usize,
    pub seed: u64,
    /// Attribute the output should carry.
    pub desired: usize,
    /// Attribute whose preferences get suppressed.
    pub undesired: usize,
    /// Take the argmax instead of sampling.
    pub greedy: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            alpha: 4.0,
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 20,
            n_samples_per_prompt: 25,
            seed: 0,
            desired: 0,
            undesired: 1,
            greedy: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.desired == self.undesired {
            return Err(Error::Config(
                "desired and undesired attributes must differ".into(),
            ));
        }
        Ok(())
    }
}

/// Last-position vocabulary logits under both attribute branches. The base
/// hidden states are computed once and shared; only the projection and head
/// run twice.
pub fn dual_logits_in(
    g: &mut Graph,
    bound: &BoundParams,
    config: &crate::model::ModelConfig,
    ids: &[usize],
    desired: usize,
    undesired: usize,
) -> Result<(Var, Var)> {
    let h = base_hidden(g, &bound.base, config, ids)?;
    let mask = causal_mask(g, ids.len());
    let z_d = attribute_embed(g, bound.attr_embed, desired)?;
    let z_u = attribute_embed(g, bound.attr_embed, undesired)?;
    let hbar_d = project(g, &bound.proj, config, h, z_d, mask)?;
    let hbar_u = project(g, &bound.proj, config, h, z_u, mask)?;
    let o_d = head_logits_last(g, &bound.head, hbar_d)?;
    let o_u = head_logits_last(g, &bound.head, hbar_u)?;
    Ok((o_d, o_u))
}

pub fn dual_logits(
    params: &AdlmParams,
    ids: &[usize],
    desired: usize,
    undesired: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let (o_d, o_u) = dual_logits_in(&mut g, &bound, &params.config, ids, desired, undesired)?;
    Ok((g.data(o_d).to_vec(), g.data(o_u).to_vec()))
}

/// Pushes down exactly the tokens the contrast branch likes better: where
/// the gap `observed - contrast` is negative the observed logit moves by
/// `alpha` times the gap, everywhere else it is untouched.
pub fn suppress(observed: &[f64], contrast: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if observed.len() != contrast.len() {
        return Err(Error::ShapeMismatch {
            op: "suppress",
            lhs: vec![observed.len()],
            rhs: vec![contrast.len()],
        });
    }
    Ok(observed
        .iter()
        .zip(contrast)
        .map(|(&o, &c)| {
            let gap = o - c;
            if gap < 0.0 {
                o + alpha * gap
            } else {
                o
            }
        })
        .collect())
}

/// Samples from the smallest set of most-probable tokens whose mass reaches
/// `top_p`, after temperature scaling. Ties in probability go to the lower
/// token id, and tokens outside the nucleus have exactly zero chance.
pub fn nucleus_sample(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::invalid("nucleus_sample: empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("nucleus_sample: non-finite logit"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("nucleus_sample: temperature must be positive"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::invalid("nucleus_sample: top_p must be in (0, 1]"));
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let probs = softmax_vec(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    let mut nucleus_len = order.len();
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= top_p {
            nucleus_len = k + 1;
            break;
        }
    }
    let nucleus = &order[..nucleus_len];
    let mass: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in nucleus {
        acc += probs[i];
        if u < acc {
            return Ok(i);
        }
    }
    Ok(nucleus[nucleus_len - 1])
}

fn pick(logits: &[f64], gcfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    if gcfg.greedy {
        Ok(argmax_tie_low(logits))
    } else {
        nucleus_sample(logits, gcfg.temperature, gcfg.top_p, rng)
    }
}

fn ensure_prompt(prompt: &[usize]) -> Vec<usize> {
    if prompt.is_empty() {
        vec![BOS]
    } else {
        prompt.to_vec()
    }
}

/// Attribute-conditioned generation with contrastive suppression. Returns
/// the prompt plus the continuation; generation stops at the end marker
/// (which is not kept) or when the context window fills.
pub fn generate(
    params: &AdlmParams,
    prompt: &[usize],
    gcfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    gcfg.validate()?;
    let n_attr = params.config.n_attributes;
    if gcfg.desired >= n_attr || gcfg.undesired >= n_attr {
        return Err(Error::invalid("attribute index out of range for this model"));
    }
    let mut ids = ensure_prompt(prompt);
    for _ in 0..gcfg.max_new_tokens {
        if ids.len() >= params.config.block_size {
            break;
        }
        let (observed, contrast) = dual_logits(params, &ids, gcfg.desired, gcfg.undesired)?;
        let shaped = suppress(&observed, &contrast, gcfg.alpha)?;
        let next = pick(&shaped, gcfg, rng)?;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    Ok(ids)
}

/// Unconditional generation straight from the base model, same sampler.
pub fn generate_base(
    params: &AdlmParams,
    prompt: &[usize],
    gcfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    gcfg.validate()?;
    let mut ids = ensure_prompt(prompt);
    for _ in 0..gcfg.max_new_tokens {
        if ids.len() >= params.config.block_size {
            break;
        }
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let h = base_hidden(&mut g, &bound.base, &params.config, &ids)?;
        let logits = head_logits_last(&mut g, &bound.head, h)?;
        let next = pick(g.data(logits), gcfg, rng)?;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    Ok(ids)
}

/// Interactive loop over any reader/writer pair. Plain lines are prompts;
/// commands start with a colon: `:alpha X`, `:topp X`, `:temp X`,
/// `:attr NAME`, `:seed N`, `:quit`.
pub fn repl<R: BufRead, W: Write>(
    ckpt: &Checkpoint,
    mut gcfg: GenerationConfig,
    input: R,
    mut output: W,
) -> Result<()> {
    use rand::SeedableRng;
    gcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    writeln!(
        output,
        "attribute={} alpha={} top_p={} temperature={}",
        ckpt.vocab.attribute_names[gcfg.desired], gcfg.alpha, gcfg.top_p, gcfg.temperature
    )?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(':') {
            let mut parts = rest.splitn(2, char::is_whitespace);
            let cmd = parts.next().unwrap_or("");
            let arg = parts.next().unwrap_or("").trim();
            match cmd {
                "quit" => break,
                "alpha" => match arg.parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => {
                        gcfg.alpha = v;
                        writeln!(output, "alpha = {v}")?;
                    }
                    _ => writeln!(output, "bad alpha: {arg}")?,
                },
                "topp" => match arg.parse::<f64>() {
                    Ok(v) if v > 0.0 && v <= 1.0 => {
                        gcfg.top_p = v;
                        writeln!(output, "top_p = {v}")?;
                    }
                    _ => writeln!(output, "bad top_p: {arg}")?,
                },
                "temp" => match arg.parse::<f64>() {
                    Ok(v) if v.is_finite() && v > 0.0 => {
                        gcfg.temperature = v;
                        writeln!(output, "temperature = {v}")?;
                    }
                    _ => writeln!(output, "bad temperature: {arg}")?,
                },
                "attr" => match ckpt.vocab.attribute_index(arg) {
                    Ok(i) => {
                        gcfg.desired = i;
                        if ckpt.vocab.attribute_names.len() == 2 {
                            gcfg.undesired = 1 - i;
                        }
                        writeln!(output, "attribute = {arg}")?;
                    }
                    Err(_) => writeln!(output, "unknown attribute: {arg}")?,
                },
                "seed" => match arg.parse::<u64>() {
                    Ok(v) => {
                        gcfg.seed = v;
                        rng = ChaCha8Rng::seed_from_u64(v);
                        writeln!(output, "seed = {v}")?;
                    }
                    _ => writeln!(output, "bad seed: {arg}")?,
                },
                _ => writeln!(output, "unknown command: {cmd}")?,
            }
            continue;
        }
        let prompt = tokenize(line, &ckpt.vocab);
        let ids = generate(&ckpt.params, &prompt, &gcfg, &mut rng)?;
        let continuation = &ids[prompt.len()..];
        writeln!(
            output,
            "{}\ttoxicity={:.4}",
            detokenize(continuation, &ckpt.vocab),
            crate::evalsuite::toxicity_score(continuation, &ckpt.vocab)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn small_params() -> AdlmParams {
        AdlmParams::init(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_base_layers: 2,
            n_heads: 2,
            block_size: 12,
            n_attributes: 2,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn suppress_hand_case() {
        let out = suppress(&[2.0, 0.0, -1.0], &[0.0, 1.0, -3.0], 4.0).unwrap();
        assert_eq!(out, vec![2.0, -4.0, -1.0]);
    }

    #[test]
    fn suppress_at_zero_alpha_is_identity() {
        let o = [1.5, -0.25, 3.0];
        let out = suppress(&o, &[9.0, -9.0, 0.0], 0.0).unwrap();
        assert_eq!(out, o.to_vec());
    }

    #[test]
    fn suppress_rejects_length_mismatch() {
        assert!(suppress(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn suppressed_logits_never_increase_and_decrease_monotonically_in_alpha() {
        let o = [0.3, -1.2, 2.0, 0.0];
        let c = [0.5, -2.0, 2.0, 1.0];
        let a1 = suppress(&o, &c, 1.0).unwrap();
        let a2 = suppress(&o, &c, 2.0).unwrap();
        for v in 0..o.len() {
            assert!(a1[v] <= o[v]);
            assert!(a2[v] <= a1[v]);
            if o[v] - c[v] >= 0.0 {
                assert_eq!(a1[v], o[v]);
                assert_eq!(a2[v], o[v]);
            }
        }
    }

    #[test]
    fn nucleus_keeps_exactly_the_smallest_covering_prefix() {
        // softmax of ln(p) reproduces p, so the distribution is explicit.
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let n = 4000;
        for _ in 0..n {
            counts[nucleus_sample(&logits, 1.0, 0.7, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0, "outside the nucleus must never be drawn");
        let f0 = counts[0] as f64 / n as f64;
        // renormalized nucleus is [5/8, 3/8]
        assert!((f0 - 0.625).abs() < 0.03, "f0 = {f0}");
    }

    #[test]
    fn nucleus_tie_break_prefers_lower_ids() {
        let logits = [0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            assert_eq!(nucleus_sample(&logits, 1.0, 0.5, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn nucleus_with_full_mass_reaches_every_token() {
        let logits = [0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 3];
        for _ in 0..500 {
            seen[nucleus_sample(&logits, 1.0, 1.0, &mut rng).unwrap()] = true;
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn nucleus_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(nucleus_sample(&[f64::NAN, 0.0], 1.0, 0.9, &mut rng).is_err());
        assert!(nucleus_sample(&[0.0], 0.0, 0.9, &mut rng).is_err());
        assert!(nucleus_sample(&[0.0], 1.0, 0.0, &mut rng).is_err());
        assert!(nucleus_sample(&[0.0], 1.0, 1.5, &mut rng).is_err());
        assert!(nucleus_sample(&[], 1.0, 0.9, &mut rng).is_err());
    }

    #[test]
    fn temperature_sharpens_the_distribution() {
        let logits = [1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = |temp: f64, rng: &mut ChaCha8Rng| {
            let mut hits = 0;
            for _ in 0..2000 {
                if nucleus_sample(&logits, temp, 1.0, rng).unwrap() == 0 {
                    hits += 1;
                }
            }
            hits as f64 / 2000.0
        };
        let cold = draw(0.25, &mut rng);
        let hot = draw(4.0, &mut rng);
        assert!(cold > hot + 0.1, "cold {cold} vs hot {hot}");
    }

    #[test]
    fn dual_logits_share_one_base_forward() {
        let params = small_params();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let ids = [1usize, 5, 7];
        dual_logits_in(&mut g, &bound, &params.config, &ids, 0, 1).unwrap();
        let counts = g.op_counts();
        // token + position lookups once, one attribute row per branch
        assert_eq!(counts.get("embedding"), Some(&4));
        // per block: q,k,v,o plus two per head plus two mlp matmuls
        let per_block = 6 + 2 * params.config.n_heads;
        let want = (params.config.n_base_layers + 2) * per_block + 2;
        assert_eq!(counts.get("matmul"), Some(&want));
    }

    #[test]
    fn dual_logits_agree_with_single_branch_forwards() {
        let params = small_params();
        let ids = [1usize, 5, 7, 6];
        let (o_d, o_u) = dual_logits(&params, &ids, 0, 1).unwrap();
        let single = |attr: usize| {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let v = crate::model::conditional_logits(&mut g, &bound, &params.config, &ids, attr)
                .unwrap();
            g.data(v).to_vec()
        };
        assert_eq!(o_d, single(0));
        assert_eq!(o_u, single(1));
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_respects_the_budget() {
        let params = small_params();
        let gcfg = GenerationConfig {
            max_new_tokens: 5,
            seed: 11,
            ..GenerationConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
            generate(&params, &[1, 4], &gcfg, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.len() <= 2 + gcfg.max_new_tokens);
        assert_eq!(&a[..2], &[1, 4]);
    }

    #[test]
    fn generation_stops_cleanly_at_the_context_edge() {
        let params = small_params();
        let gcfg = GenerationConfig {
            max_new_tokens: 50,
            ..GenerationConfig::default()
        };
        let prompt: Vec<usize> = (0..params.config.block_size).map(|i| 1 + i % 4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = generate(&params, &prompt, &gcfg, &mut rng).unwrap();
        assert_eq!(out, prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shorter = &prompt[..prompt.len() - 1];
        let out = generate(&params, shorter, &gcfg, &mut rng).unwrap();
        assert!(out.len() <= params.config.block_size);
    }

    #[test]
    fn an_end_marker_halts_generation_and_is_not_kept() {
        let mut params = small_params();
        params.head.w = Tensor::zeros(&[params.config.d_model, params.config.vocab_size]);
        let mut bias = vec![0.0; params.config.vocab_size];
        bias[EOS] = 50.0;
        params.head.b = Tensor::new(vec![params.config.vocab_size], bias).unwrap();
        let gcfg = GenerationConfig {
            greedy: true,
            ..GenerationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = generate(&params, &[1, 4], &gcfg, &mut rng).unwrap();
        assert_eq!(out, vec![1, 4]);
    }

    #[test]
    fn empty_prompts_start_from_the_beginning_marker() {
        let params = small_params();
        let gcfg = GenerationConfig {
            max_new_tokens: 3,
            ..GenerationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate(&params, &[], &gcfg, &mut rng).unwrap();
        assert_eq!(out[0], BOS);
    }

    #[test]
    fn zero_alpha_generation_equals_plain_conditional_decoding() {
        // An alpha of zero must reproduce sampling from the observed branch
        // untouched, token for token.
        let params = small_params();
        let gcfg = GenerationConfig {
            alpha: 0.0,
            max_new_tokens: 6,
            ..GenerationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let suppressed = generate(&params, &[1, 5], &gcfg, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ids = vec![1usize, 5];
        for _ in 0..gcfg.max_new_tokens {
            if ids.len() >= params.config.block_size {
                break;
            }
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let v = crate::model::conditional_logits(
                &mut g,
                &bound,
                &params.config,
                &ids,
                gcfg.desired,
            )
            .unwrap();
            let next =
                nucleus_sample(g.data(v), gcfg.temperature, gcfg.top_p, &mut rng).unwrap();
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        assert_eq!(suppressed, ids);
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut gcfg = GenerationConfig { top_p: 0.0, ..GenerationConfig::default() };
        assert!(gcfg.validate().is_err());
        gcfg = GenerationConfig { temperature: -1.0, ..GenerationConfig::default() };
        assert!(gcfg.validate().is_err());
        gcfg = GenerationConfig { desired: 1, undesired: 1, ..GenerationConfig::default() };
        assert!(gcfg.validate().is_err());
        gcfg = GenerationConfig { alpha: f64::NAN, ..GenerationConfig::default() };
        assert!(gcfg.validate().is_err());
    }

    #[test]
    fn scripted_repl_session_is_deterministic() {
        use crate::corpus::{build_vocab, CorpusSpec};
        let params = small_params();
        let spec = CorpusSpec {
            vocab_size: params.config.vocab_size,
            lexicon_size: 3,
            ..CorpusSpec::default()
        };
        let vocab = build_vocab(&spec).unwrap();
        let ckpt = Checkpoint {
            params,
            vocab,
            stage: crate::model::Stage::Phase2,
            seed: 0,
            lambda: 0.1,
        };
        let script = ":alpha 2.5\n:topp 0.8\n:attr toxic\n:nope\nw0 w1\n:quit\n";
        let run = || {
            let mut out = Vec::new();
            repl(
                &ckpt,
                GenerationConfig { max_new_tokens: 4, seed: 3, ..GenerationConfig::default() },
                script.as_bytes(),
                &mut out,
            )
            .unwrap();
            String::from_utf8(out).unwrap()
        };
        let text = run();
        assert!(text.contains("alpha = 2.5"));
        assert!(text.contains("top_p = 0.8"));
        assert!(text.contains("attribute = toxic"));
        assert!(text.contains("unknown command: nope"));
        assert_eq!(text, run());
    }
}
