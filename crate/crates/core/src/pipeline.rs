//! Run configuration and the filesystem-facing stage drivers that the
//! command-line tool wraps: corpus materialization, staged training against
//! checkpoint files, batch generation, benchmarking, and the trade-off
//! sweep. One `seed` in the run config fans out to every stage, so a config
//! file pins the whole pipeline bit for bit.

use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{
    balance, build_vocab, load_jsonl, make_corpus, save_jsonl, CorpusSpec, LabeledSequence,
    Vocab,
};
use crate::decoding::{generate, GenerationConfig};
use crate::error::{Error, Result};
use crate::evalsuite::{
    run_benchmark, sweep_alpha_lambda, toxicity_score, DecoderKind, EvalReport, SweepRow,
};
use crate::model::{AdlmParams, ModelConfig, Stage};
use crate::training::{train_base, train_phase1, train_phase2, ProgressEvent, TrainConfig};
use crate::util::{derive_seed, prompt_stream_seed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "ADLM_SEED";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Held-out prompts per prompt set (lexicon-bearing and clean).
    pub n_prompts: usize,
    /// Prompt length in tokens, counting the leading begin marker.
    pub prompt_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_per_class: 200,
            test_per_class: 200,
            n_prompts: 100,
            prompt_len: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: PathBuf::from("out/corpus"),
            checkpoint_dir: PathBuf::from("out/checkpoints"),
            report_dir: PathBuf::from("out/reports"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub balance: bool,
    pub corpus: CorpusSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            balance: true,
            corpus: CorpusSpec::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            base_train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                lr0: 3e-3,
                ..TrainConfig::default()
            },
            generation: GenerationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies the environment seed override, then fans the run seed out to
    /// every sub-config. Idempotent: resolving a resolved config changes
    /// nothing, so the config echo reproduces the run exactly.
    pub fn resolve(self) -> Result<RunConfig> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(raw) => Some(raw.parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))
            })?),
            Err(_) => None,
        };
        self.resolve_with_seed(env_seed)
    }

    /// Same fan-out with an explicit override instead of the environment.
    pub fn resolve_with_seed(mut self, seed_override: Option<u64>) -> Result<RunConfig> {
        if let Some(seed) = seed_override {
            self.seed = seed;
        }
        self.corpus.seed = derive_seed(self.seed, "corpus", 0);
        self.model.seed = derive_seed(self.seed, "model", 0);
        self.generation.seed = derive_seed(self.seed, "generation", 0);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.base_train.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match corpus vocab_size {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.model.n_attributes != self.corpus.attribute_names.len() {
            return Err(Error::Config(format!(
                "model n_attributes {} does not match the {} attribute names",
                self.model.n_attributes,
                self.corpus.attribute_names.len()
            )));
        }
        if self.split.prompt_len < 2 || self.split.prompt_len > self.model.block_size {
            return Err(Error::Config(
                "prompt_len must be at least 2 and fit the context window".into(),
            ));
        }
        if self.split.n_prompts == 0 {
            return Err(Error::Config("n_prompts must be > 0".into()));
        }
        if self.corpus.max_len + 1 + self.generation.max_new_tokens > self.model.block_size {
            return Err(Error::Config(format!(
                "block_size {} cannot hold max_len {} + BOS + {} new tokens",
                self.model.block_size, self.corpus.max_len, self.generation.max_new_tokens
            )));
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
    cfg.resolve()
}

#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub prompts_toxic: PathBuf,
    pub prompts_nontoxic: PathBuf,
}

impl CorpusFiles {
    pub fn under(dir: &Path) -> CorpusFiles {
        CorpusFiles {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            test: dir.join("test.jsonl"),
            prompts_toxic: dir.join("prompts_toxic.jsonl"),
            prompts_nontoxic: dir.join("prompts_nontoxic.jsonl"),
        }
    }
}

/// Materializes train/val/test splits plus the two held-out prompt sets.
/// One pool is generated and sliced per class, so every split speaks the
/// same class-conditional language and held-out data is truly held out.
/// Prompts are sequence prefixes, routed by whether the prefix itself
/// contains a lexicon token.
pub fn stage_make_corpus(cfg: &RunConfig) -> Result<CorpusFiles> {
    cfg.validate()?;
    let n_classes = cfg.corpus.attribute_names.len();
    let marked = cfg.corpus.validate()?;
    let clean_attr = (0..n_classes)
        .find(|&a| a != marked)
        .expect("at least two attributes");

    // oversized prompt share so both prompt sets fill even after routing
    let extra = cfg.split.val_per_class + cfg.split.test_per_class + 4 * cfg.split.n_prompts;
    let pool_spec = CorpusSpec {
        n_per_class: cfg.corpus.n_per_class.iter().map(|&n| n + extra).collect(),
        ..cfg.corpus.clone()
    };
    let (vocab, pool) = make_corpus(&pool_spec)?;

    let mut train_data = Vec::new();
    let mut val_data = Vec::new();
    let mut test_data = Vec::new();
    let mut prompt_pool = Vec::new();
    let mut offset = 0;
    for &n_train in &cfg.corpus.n_per_class {
        let class = &pool[offset..offset + n_train + extra];
        let (a, b, c) = (
            n_train,
            n_train + cfg.split.val_per_class,
            n_train + cfg.split.val_per_class + cfg.split.test_per_class,
        );
        train_data.extend_from_slice(&class[..a]);
        val_data.extend_from_slice(&class[a..b]);
        test_data.extend_from_slice(&class[b..c]);
        prompt_pool.extend_from_slice(&class[c..]);
        offset += n_train + extra;
    }

    let mut toxic_prompts = Vec::with_capacity(cfg.split.n_prompts);
    let mut clean_prompts = Vec::with_capacity(cfg.split.n_prompts);
    for seq in &prompt_pool {
        if seq.ids.len() < cfg.split.prompt_len {
            continue;
        }
        let prefix = seq.ids[..cfg.split.prompt_len].to_vec();
        let has_lexicon = prefix.iter().any(|&id| vocab.is_lexicon(id));
        if has_lexicon && toxic_prompts.len() < cfg.split.n_prompts {
            toxic_prompts.push(LabeledSequence { ids: prefix, attribute: marked });
        } else if !has_lexicon && clean_prompts.len() < cfg.split.n_prompts {
            clean_prompts.push(LabeledSequence { ids: prefix, attribute: clean_attr });
        }
        if toxic_prompts.len() == cfg.split.n_prompts
            && clean_prompts.len() == cfg.split.n_prompts
        {
            break;
        }
    }
    if toxic_prompts.len() < cfg.split.n_prompts || clean_prompts.len() < cfg.split.n_prompts {
        return Err(Error::Corpus(format!(
            "prompt pool too small: collected {} lexicon-bearing and {} clean prompts of {} wanted",
            toxic_prompts.len(),
            clean_prompts.len(),
            cfg.split.n_prompts
        )));
    }

    std::fs::create_dir_all(&cfg.paths.corpus_dir)?;
    let files = CorpusFiles::under(&cfg.paths.corpus_dir);
    save_jsonl(&files.train, &train_data, &vocab)?;
    save_jsonl(&files.val, &val_data, &vocab)?;
    save_jsonl(&files.test, &test_data, &vocab)?;
    save_jsonl(&files.prompts_toxic, &toxic_prompts, &vocab)?;
    save_jsonl(&files.prompts_nontoxic, &clean_prompts, &vocab)?;
    Ok(files)
}

fn load_checkpoint_for_stage(path: &Path, wanted: Stage) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.stage != wanted {
        return Err(Error::StageOrder(format!(
            "checkpoint at {} is from stage {}, expected {}",
            path.display(),
            ckpt.stage.name(),
            wanted.name()
        )));
    }
    Ok(ckpt)
}

/// Runs one training stage from JSONL corpus files to a checkpoint
/// directory. Stage order is enforced through the checkpoint manifests.
pub fn stage_train(
    cfg: &RunConfig,
    stage: Stage,
    init: Option<&Path>,
    out: &Path,
    sink: &mut dyn FnMut(&ProgressEvent),
) -> Result<()> {
    cfg.validate()?;
    let files = CorpusFiles::under(&cfg.paths.corpus_dir);
    let stage_seed = derive_seed(cfg.seed, stage.name(), 0);

    let (mut params, vocab, train_cfg) = match stage {
        Stage::Base => {
            if init.is_some() {
                return Err(Error::StageOrder(
                    "the base stage starts from scratch and takes no --init".into(),
                ));
            }
            let vocab = build_vocab(&cfg.corpus)?;
            (AdlmParams::init(cfg.model)?, vocab, cfg.base_train)
        }
        Stage::Phase1 => {
            let path = init.ok_or_else(|| {
                Error::StageOrder("phase1 needs --init pointing at a base checkpoint".into())
            })?;
            let ckpt = load_checkpoint_for_stage(path, Stage::Base)?;
            (ckpt.params, ckpt.vocab, cfg.train)
        }
        Stage::Phase2 => {
            let path = init.ok_or_else(|| {
                Error::StageOrder("phase2 needs --init pointing at a phase1 checkpoint".into())
            })?;
            let ckpt = load_checkpoint_for_stage(path, Stage::Phase1)?;
            (ckpt.params, ckpt.vocab, cfg.train)
        }
    };

    let raw = load_jsonl(&files.train, &vocab)?;
    let data = match stage {
        // the unconditional model sees the corpus as-is
        Stage::Base => raw,
        Stage::Phase1 | Stage::Phase2 => {
            if cfg.balance {
                balance(&raw, vocab.attribute_names.len(), derive_seed(cfg.seed, "balance", 0))?
            } else {
                raw
            }
        }
    };

    match stage {
        Stage::Base => train_base(&mut params, &data, &train_cfg, stage_seed, sink)?,
        Stage::Phase1 => train_phase1(&mut params, &data, &train_cfg, stage_seed, sink)?,
        Stage::Phase2 => train_phase2(&mut params, &data, &train_cfg, stage_seed, sink)?,
    };

    checkpoint::save(
        &Checkpoint {
            params,
            vocab,
            stage,
            seed: cfg.seed,
            lambda: train_cfg.lambda,
        },
        out,
    )
}

/// Prompt token lists from a JSONL prompt file.
pub fn load_prompts(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    Ok(load_jsonl(path, vocab)?.into_iter().map(|s| s.ids).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenRecord {
    pub prompt: String,
    pub continuation: String,
    pub attribute: String,
    pub alpha: f64,
    pub seed: u64,
    pub toxicity: f64,
}

/// Batch generation: `n_samples_per_prompt` continuations per prompt, each
/// prompt on its own seeded stream.
pub fn stage_generate(
    ckpt: &Checkpoint,
    prompts: &[Vec<usize>],
    gcfg: &GenerationConfig,
) -> Result<Vec<GenRecord>> {
    gcfg.validate()?;
    let vocab = &ckpt.vocab;
    let attribute = vocab
        .attribute_names
        .get(gcfg.desired)
        .ok_or_else(|| Error::invalid("desired attribute out of range"))?
        .clone();
    let mut records = Vec::with_capacity(prompts.len() * gcfg.n_samples_per_prompt);
    for (i, prompt) in prompts.iter().enumerate() {
        let stream_seed = prompt_stream_seed(gcfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        for _ in 0..gcfg.n_samples_per_prompt {
            let full = generate(&ckpt.params, prompt, gcfg, &mut rng)?;
            let continuation = &full[prompt.len()..];
            records.push(GenRecord {
                prompt: crate::corpus::detokenize(prompt, vocab),
                continuation: crate::corpus::detokenize(continuation, vocab),
                attribute: attribute.clone(),
                alpha: gcfg.alpha,
                seed: stream_seed,
                toxicity: toxicity_score(continuation, vocab),
            });
        }
    }
    Ok(records)
}

pub fn write_gen_records(path: &Path, records: &[GenRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub toxic_prompts: EvalReport,
    pub nontoxic_prompts: EvalReport,
}

/// Benchmarks one checkpoint on both held-out prompt sets.
pub fn stage_eval(
    ckpt: &Checkpoint,
    toxic_prompts: &[Vec<usize>],
    nontoxic_prompts: &[Vec<usize>],
    gcfg: &GenerationConfig,
) -> Result<EvalOutput> {
    Ok(EvalOutput {
        toxic_prompts: run_benchmark(
            &ckpt.params,
            &ckpt.vocab,
            toxic_prompts,
            gcfg,
            DecoderKind::Conditional,
        )?,
        nontoxic_prompts: run_benchmark(
            &ckpt.params,
            &ckpt.vocab,
            nontoxic_prompts,
            gcfg,
            DecoderKind::Conditional,
        )?,
    })
}

/// Loads the λ-tagged checkpoints and runs the α×λ grid.
pub fn stage_sweep(
    checkpoint_paths: &[PathBuf],
    prompts: &[Vec<usize>],
    alphas: &[f64],
    gcfg: &GenerationConfig,
) -> Result<Vec<SweepRow>> {
    let mut checkpoints = Vec::with_capacity(checkpoint_paths.len());
    let mut vocab: Option<Vocab> = None;
    for path in checkpoint_paths {
        let ckpt = checkpoint::load(path)?;
        match &vocab {
            None => vocab = Some(ckpt.vocab.clone()),
            Some(v) => {
                if *v != ckpt.vocab {
                    return Err(Error::invalid(format!(
                        "checkpoint {} uses a different vocabulary",
                        path.display()
                    )));
                }
            }
        }
        checkpoints.push((ckpt.lambda, ckpt.params));
    }
    let vocab = vocab.ok_or_else(|| Error::invalid("sweep needs at least one checkpoint"))?;
    sweep_alpha_lambda(&checkpoints, &vocab, prompts, alphas, gcfg)
}
