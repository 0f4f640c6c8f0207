//! Command-line entry point for the attribute-discriminative language
//! model pipeline: corpus creation, staged training, generation,
//! benchmarking, sweeps, and an interactive loop.
//!
//! Every command echoes its fully resolved run configuration to standard
//! error as JSON; that echo is itself a valid `--config` file.

use adlm_core::checkpoint;
use adlm_core::corpus::tokenize;
use adlm_core::decoding::{repl, GenerationConfig};
use adlm_core::pipeline::{
    load_prompts, read_config, stage_eval, stage_generate, stage_make_corpus, stage_sweep,
    stage_train, write_gen_records, CorpusFiles, RunConfig,
};
use adlm_core::Stage;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "adlm", about = "Attribute-controlled text generation, desk scale")]
struct Cli {
    /// JSON run configuration; defaults reproduce the toy pipeline.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Phase1,
    Phase2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Base => Stage::Base,
            StageArg::Phase1 => Stage::Phase1,
            StageArg::Phase2 => Stage::Phase2,
        }
    }
}

#[derive(Args, Clone)]
struct GenFlags {
    /// Suppression strength.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "top-p")]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long = "max-new-tokens")]
    max_new_tokens: Option<usize>,
    /// Samples per prompt.
    #[arg(long = "n")]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attribute to generate under; its complement is suppressed.
    #[arg(long)]
    attr: Option<String>,
}

impl GenFlags {
    fn apply(&self, mut gcfg: GenerationConfig, vocab: &adlm_core::corpus::Vocab)
        -> anyhow::Result<GenerationConfig>
    {
        if let Some(v) = self.alpha {
            gcfg.alpha = v;
        }
        if let Some(v) = self.top_p {
            gcfg.top_p = v;
        }
        if let Some(v) = self.temperature {
            gcfg.temperature = v;
        }
        if let Some(v) = self.max_new_tokens {
            gcfg.max_new_tokens = v;
        }
        if let Some(v) = self.n_samples {
            gcfg.n_samples_per_prompt = v;
        }
        if let Some(v) = self.seed {
            gcfg.seed = v;
        }
        if let Some(name) = &self.attr {
            let i = vocab.attribute_index(name)?;
            gcfg.desired = i;
            if vocab.attribute_names.len() == 2 {
                gcfg.undesired = 1 - i;
            }
        }
        gcfg.validate()?;
        Ok(gcfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test splits and the held-out prompt sets.
    MakeCorpus {
        /// Output directory; defaults to the config's corpus_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Checkpoint of the previous stage (required after base).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint directory to write; defaults under checkpoint_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate continuations for a prompt file (or - for stdin lines).
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL prompt file, or - to read plain text lines from stdin.
        #[arg(long, default_value = "-")]
        prompts: String,
        /// Output JSONL path, or - for stdout.
        #[arg(long, default_value = "-")]
        out: String,
        #[command(flatten)]
        flags: GenFlags,
    },
    /// Benchmark a checkpoint on both held-out prompt sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "prompts-toxic")]
        prompts_toxic: Option<PathBuf>,
        #[arg(long = "prompts-nontoxic")]
        prompts_nontoxic: Option<PathBuf>,
        /// Report path; defaults to report_dir/report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: GenFlags,
    },
    /// Trade-off grid over suppression strengths and penalty checkpoints.
    Sweep {
        /// One checkpoint per penalty setting (repeat the flag).
        #[arg(long = "checkpoints", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated suppression strengths.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// CSV output path; defaults to report_dir/sweep.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: GenFlags,
    },
    /// Interactive prompt loop on a checkpoint.
    Repl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: GenFlags,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => read_config(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default().resolve()?,
    };
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("{}", cfg.echo());
}

fn progress_sink() -> impl FnMut(&adlm_core::training::ProgressEvent) {
    |e: &adlm_core::training::ProgressEvent| {
        eprintln!("{}", serde_json::to_string(e).expect("event serializes"));
    }
}

fn read_prompt_arg(
    prompts: &str,
    vocab: &adlm_core::corpus::Vocab,
) -> anyhow::Result<Vec<Vec<usize>>> {
    if prompts == "-" {
        let stdin = std::io::stdin();
        let mut out = Vec::new();
        for line in stdin.lock().lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(tokenize(line.trim(), vocab));
            }
        }
        if out.is_empty() {
            bail!("no prompts on stdin");
        }
        Ok(out)
    } else {
        Ok(load_prompts(Path::new(prompts), vocab)?)
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.config)?;

    match cli.command {
        Command::MakeCorpus { out } => {
            if let Some(dir) = out {
                cfg.paths.corpus_dir = dir;
            }
            echo_config(&cfg);
            let files = stage_make_corpus(&cfg)?;
            println!("corpus written under {}", cfg.paths.corpus_dir.display());
            for p in [
                &files.train,
                &files.val,
                &files.test,
                &files.prompts_toxic,
                &files.prompts_nontoxic,
            ] {
                println!("  {}", p.display());
            }
        }
        Command::Train { stage, init, out } => {
            echo_config(&cfg);
            let stage: Stage = stage.into();
            let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(stage.name()));
            let mut sink = progress_sink();
            stage_train(&cfg, stage, init.as_deref(), &out, &mut sink)?;
            println!("{} checkpoint written to {}", stage.name(), out.display());
        }
        Command::Generate {
            checkpoint,
            prompts,
            out,
            flags,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            cfg.generation = flags.apply(cfg.generation, &ckpt.vocab)?;
            echo_config(&cfg);
            let prompt_ids = read_prompt_arg(&prompts, &ckpt.vocab)?;
            let records = stage_generate(&ckpt, &prompt_ids, &cfg.generation)?;
            if out == "-" {
                let stdout = std::io::stdout();
                let mut w = stdout.lock();
                for r in &records {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
            } else {
                write_gen_records(Path::new(&out), &records)?;
                println!("{} generations written to {out}", records.len());
            }
        }
        Command::Eval {
            checkpoint,
            prompts_toxic,
            prompts_nontoxic,
            out,
            flags,
        } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            cfg.generation = flags.apply(cfg.generation, &ckpt.vocab)?;
            echo_config(&cfg);
            let files = CorpusFiles::under(&cfg.paths.corpus_dir);
            let toxic_path = prompts_toxic.unwrap_or(files.prompts_toxic);
            let clean_path = prompts_nontoxic.unwrap_or(files.prompts_nontoxic);
            let toxic = load_prompts(&toxic_path, &ckpt.vocab)?;
            let clean = load_prompts(&clean_path, &ckpt.vocab)?;
            let report = stage_eval(&ckpt, &toxic, &clean, &cfg.generation)?;
            let out = out.unwrap_or_else(|| cfg.paths.report_dir.join("report.json"));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "nontoxic prompts: toxicity_prob={:.4} exp_max_toxicity={:.4} ppl={:.2}",
                report.nontoxic_prompts.toxicity_prob,
                report.nontoxic_prompts.exp_max_toxicity,
                report.nontoxic_prompts.perplexity
            );
            println!("report written to {}", out.display());
        }
        Command::Sweep {
            checkpoints,
            alphas,
            prompts,
            out,
            flags,
        } => {
            let first = checkpoint::load(&checkpoints[0])?;
            cfg.generation = flags.apply(cfg.generation, &first.vocab)?;
            echo_config(&cfg);
            let files = CorpusFiles::under(&cfg.paths.corpus_dir);
            let prompts_path = prompts.unwrap_or(files.prompts_nontoxic);
            let prompt_ids = load_prompts(&prompts_path, &first.vocab)?;
            let rows = stage_sweep(&checkpoints, &prompt_ids, &alphas, &cfg.generation)?;
            let csv = adlm_core::evalsuite::sweep_csv(&rows);
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    std::fs::write(&path, &csv)?;
                    println!("{} sweep rows written to {}", rows.len(), path.display());
                }
                None => {
                    let out = cfg.paths.report_dir.join("sweep.csv");
                    if let Some(dir) = out.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    std::fs::write(&out, &csv)?;
                    println!("{} sweep rows written to {}", rows.len(), out.display());
                }
            }
        }
        Command::Repl { checkpoint, flags } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            cfg.generation = flags.apply(cfg.generation, &ckpt.vocab)?;
            echo_config(&cfg);
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            repl(&ckpt, cfg.generation, stdin.lock(), stdout.lock())?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
