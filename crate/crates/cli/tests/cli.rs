//! End-to-end tests that drive the compiled binary the way a user would:
//! spawned processes, config files, flags, stdin, and environment seeds.

use adlm_core::pipeline::RunConfig;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adlm"));
    c.env_remove("ADLM_SEED");
    c
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_fails(out: &Output, what: &str, needle: &str) {
    assert!(!out.status.success(), "{what} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "{what}: stderr missing {needle:?}:\n{err}");
}

/// A configuration small enough to run the whole pipeline in seconds.
fn tiny_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.corpus.vocab_size = 48;
    cfg.corpus.lexicon_size = 6;
    cfg.corpus.n_per_class = vec![40, 40];
    cfg.corpus.min_len = 5;
    cfg.corpus.max_len = 8;
    cfg.corpus.toxic_token_rate = 0.5;
    cfg.split.val_per_class = 5;
    cfg.split.test_per_class = 5;
    cfg.split.n_prompts = 4;
    cfg.split.prompt_len = 3;
    cfg.model.vocab_size = 48;
    cfg.model.d_model = 16;
    cfg.model.n_base_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.block_size = 32;
    cfg.base_train.lr0 = 1e-3;
    cfg.base_train.batch_size = 16;
    cfg.base_train.epochs = 1;
    cfg.train.lr0 = 1e-3;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 1;
    cfg.generation.max_new_tokens = 4;
    cfg.generation.n_samples_per_prompt = 2;
    cfg.paths.corpus_dir = root.join("corpus");
    cfg.paths.checkpoint_dir = root.join("ckpt");
    cfg.paths.report_dir = root.join("reports");
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_end_to_end_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, 7);
    let cfg_path = write_config(root, "run.json", &cfg);
    let cfg_arg = cfg_path.to_str().unwrap();

    let out = bin().args(["make-corpus", "--config", cfg_arg]).output().unwrap();
    assert_ok(&out, "make-corpus");
    for f in ["train", "val", "test", "prompts_toxic", "prompts_nontoxic"] {
        assert!(cfg.paths.corpus_dir.join(format!("{f}.jsonl")).exists(), "missing {f}.jsonl");
    }

    let base = root.join("ckpt/base");
    let phase1 = root.join("ckpt/phase1");
    let phase2 = root.join("ckpt/phase2");
    let ckpt = |p: &PathBuf| p.to_str().unwrap().to_string();

    let out = bin()
        .args(["train", "--config", cfg_arg, "--stage", "base", "--out", &ckpt(&base)])
        .output()
        .unwrap();
    assert_ok(&out, "train base");
    assert!(base.join("manifest.json").exists());
    let progress = String::from_utf8_lossy(&out.stderr);
    let events: Vec<&str> = progress.lines().filter(|l| l.contains("\"loss\"")).collect();
    assert!(!events.is_empty(), "no progress events on stderr:\n{progress}");
    let first: serde_json::Value = serde_json::from_str(events[0]).unwrap();
    assert_eq!(first["stage"], "base");

    // stage order is enforced with a clear message and a nonzero exit
    let out = bin()
        .args(["train", "--config", cfg_arg, "--stage", "phase1", "--out", &ckpt(&phase1)])
        .output()
        .unwrap();
    assert_fails(&out, "phase1 without --init", "phase1 needs --init");
    let out = bin()
        .args([
            "train", "--config", cfg_arg, "--stage", "phase2",
            "--init", &ckpt(&base), "--out", &ckpt(&phase2),
        ])
        .output()
        .unwrap();
    assert_fails(&out, "phase2 from a base checkpoint", "expected phase1");
    let out = bin()
        .args([
            "train", "--config", cfg_arg, "--stage", "base",
            "--init", &ckpt(&base), "--out", &ckpt(&base),
        ])
        .output()
        .unwrap();
    assert_fails(&out, "base with --init", "takes no --init");

    let out = bin()
        .args([
            "train", "--config", cfg_arg, "--stage", "phase1",
            "--init", &ckpt(&base), "--out", &ckpt(&phase1),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "train phase1");
    let out = bin()
        .args([
            "train", "--config", cfg_arg, "--stage", "phase2",
            "--init", &ckpt(&phase1), "--out", &ckpt(&phase2),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "train phase2");

    let clean_prompts = cfg.paths.corpus_dir.join("prompts_nontoxic.jsonl");
    let gens = root.join("gens.jsonl");
    let out = bin()
        .args([
            "generate", "--config", cfg_arg, "--checkpoint", &ckpt(&phase2),
            "--prompts", clean_prompts.to_str().unwrap(),
            "--out", gens.to_str().unwrap(),
            "--alpha", "4.0", "--n", "2", "--attr", "nontoxic",
        ])
        .output()
        .unwrap();
    assert_ok(&out, "generate to file");
    let text = std::fs::read_to_string(&gens).unwrap();
    let records: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4 * 2, "one record per prompt per sample");
    for r in &records {
        assert!(r["continuation"].is_string());
        assert_eq!(r["alpha"], 4.0);
        assert_eq!(r["attribute"], "nontoxic");
    }

    // prompts can also arrive as plain text lines on stdin
    let mut child = bin()
        .args(["generate", "--config", cfg_arg, "--checkpoint", &ckpt(&phase2), "--n", "1"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.as_mut().unwrap().write_all(b"w0 w1\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_ok(&out, "generate from stdin");
    let line = String::from_utf8_lossy(&out.stdout);
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(rec["prompt"].as_str().unwrap().contains("w0"));

    let report_path = root.join("reports/report.json");
    let out = bin()
        .args([
            "eval", "--config", cfg_arg, "--checkpoint", &ckpt(&phase2),
            "--out", report_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "eval");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for side in ["toxic_prompts", "nontoxic_prompts"] {
        let ppl = report[side]["perplexity"].as_f64().unwrap();
        assert!(ppl.is_finite() && ppl > 1.0, "{side} perplexity {ppl}");
        let prob = report[side]["toxicity_prob"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&prob));
    }

    let sweep_path = root.join("reports/sweep.csv");
    let out = bin()
        .args([
            "sweep", "--config", cfg_arg, "--checkpoints", &ckpt(&phase2),
            "--alphas", "0.0,4.0",
            "--prompts", clean_prompts.to_str().unwrap(),
            "--out", sweep_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "sweep");
    let csv = std::fs::read_to_string(&sweep_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "alpha,lambda,toxicity_prob,exp_max_toxicity,perplexity,dist1,dist2,dist3"
    );
    assert_eq!(lines.count(), 2, "one row per (checkpoint, alpha) cell");

    let mut child = bin()
        .args(["repl", "--config", cfg_arg, "--checkpoint", &ckpt(&phase2)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(b":alpha 2\nw0 w1\n:quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_ok(&out, "repl");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("toxicity="), "repl output missing score:\n{stdout}");
}

#[test]
fn seed_env_var_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let make = |seed: u64, out: &str, env_seed: Option<&str>| {
        let cfg = tiny_config(root, seed);
        let cfg_path = write_config(root, &format!("cfg{seed}-{out}.json"), &cfg);
        let mut cmd = bin();
        cmd.args([
            "make-corpus",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            root.join(out).to_str().unwrap(),
        ]);
        if let Some(s) = env_seed {
            cmd.env("ADLM_SEED", s);
        }
        let res = cmd.output().unwrap();
        assert_ok(&res, "make-corpus");
        std::fs::read(root.join(out).join("train.jsonl")).unwrap()
    };

    let a = make(1, "a", Some("99"));
    let b = make(2, "b", Some("99"));
    let c = make(2, "c", None);
    assert_eq!(a, b, "same ADLM_SEED must erase the config seed difference");
    assert_ne!(b, c, "dropping ADLM_SEED must fall back to the config seed");
}

#[test]
fn echoed_config_reproduces_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, 21);
    let cfg_path = write_config(root, "run.json", &cfg);

    let out = bin()
        .args(["make-corpus", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_ok(&out, "first make-corpus");
    let echoed: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    let echo_path = root.join("echoed.json");
    std::fs::write(&echo_path, serde_json::to_string(&echoed).unwrap()).unwrap();

    let out = bin()
        .args([
            "make-corpus",
            "--config",
            echo_path.to_str().unwrap(),
            "--out",
            root.join("replay").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_ok(&out, "replayed make-corpus");

    let original = std::fs::read(cfg.paths.corpus_dir.join("train.jsonl")).unwrap();
    let replayed = std::fs::read(root.join("replay/train.jsonl")).unwrap();
    assert_eq!(original, replayed, "the echoed config must reproduce the run");
}
