use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use streamlm::bench::run_bench;
use streamlm::checkpoint;
use streamlm::densedata::{self, GenConfig, Vocab};
use streamlm::model::{Frame, GateKind, Model, ModelConfig, ParamSharing};
use streamlm::stream::{
    decode_offline_oracle, decode_streaming, freshness_report, save_transcript, ContextMode,
    DecodeOptions, ScheduleProducer, Transcript,
};
use streamlm::train::{symbol_accuracy, train, TrainOptions};
use streamlm::verify::{run_suite, SUITES};

const SEED_ENV: &str = "STREAMLM_SEED";

#[derive(Parser)]
#[command(name = "streamlm", version, about = "Streaming multimodal toy model: data, training, decoding, benchmarks")]
struct Cli {
    /// Base RNG seed; the STREAMLM_SEED environment variable overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Where to write the run manifest (JSON). Defaults next to the main output.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic timed-symbol corpus (JSONL).
    GenData(GenDataArgs),
    /// Train a model on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Decode an answer against a frame schedule.
    Decode(DecodeArgs),
    /// FLOP/wall scaling benchmark: cross-attention vs concatenation.
    Bench(BenchArgs),
    /// Run a self-check suite.
    Verify(VerifyArgs),
    /// Print a model configuration as TOML (template for --config).
    PrintConfig(PrintConfigArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of items (one clip + one question each).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 150)]
    duration: usize,
    /// Per-second probability that the on-screen symbol changes.
    #[arg(long, default_value_t = 0.04)]
    change_prob: f64,
    #[arg(long, default_value_t = 1)]
    min_words: usize,
    #[arg(long, default_value_t = 1)]
    max_words: usize,
    /// Seconds added to each answer-token time when naming the symbol
    /// (future-probe control corpora use a positive value).
    #[arg(long, default_value_t = 0.0)]
    probe_offset: f64,
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum ModelPreset {
    Tiny,
    Toy,
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum GateKindArg {
    Linear,
    Tanh,
    None,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with the full model configuration; overrides --model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelPreset::Tiny)]
    model: ModelPreset,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    decode_rate: f64,
    /// Frames per item: last N seconds sampled at 1 fps.
    #[arg(long, default_value_t = 32)]
    frame_cap: usize,
    /// CSV loss curve output.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    /// Evaluate teacher-forced symbol accuracy on this fraction of the
    /// corpus tail, held out from training.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long, value_enum)]
    gate_kind: Option<GateKindArg>,
    /// Give cross-attention its own projections instead of sharing the
    /// host layer's.
    #[arg(long)]
    no_reuse_params: bool,
    #[arg(long)]
    no_vffn: bool,
}

#[derive(Copy, Clone, PartialEq, ValueEnum)]
enum DecodeMode {
    Streaming,
    OfflineOracle,
    FixedContext,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = DecodeMode::Streaming)]
    mode: DecodeMode,
    /// Frame schedule file: one "time symbol_id" pair per line.
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    question: String,
    /// Question timestamp in seconds.
    #[arg(long, default_value_t = 0.0)]
    t_q: f64,
    #[arg(long, default_value_t = 1.0)]
    decode_rate: f64,
    #[arg(long, default_value_t = 16)]
    max_tokens: usize,
    #[arg(long, default_value_t = 32)]
    queue_capacity: usize,
    /// Transcript output (JSONL with per-step attended-frame audit).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated frame counts.
    #[arg(long, default_value = "8,16,32,64")]
    frames: String,
    #[arg(long, default_value_t = 32)]
    text_len: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = ModelPreset::Toy)]
    model: ModelPreset,
    /// Machine-readable JSON report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name or "all".
    #[arg(long, default_value = "all")]
    suite: String,
}

#[derive(Args)]
struct PrintConfigArgs {
    #[arg(long, value_enum, default_value_t = ModelPreset::Tiny)]
    model: ModelPreset,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    seed: u64,
    crate_version: String,
    wall_s: f64,
    result: serde_json::Value,
}

fn write_manifest(path: &Path, command: &str, seed: u64, wall_s: f64, result: serde_json::Value) {
    let m = Manifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        seed,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_s,
        result,
    };
    if let Err(e) = std::fs::write(path, serde_json::to_string_pretty(&m).expect("manifest json")) {
        eprintln!("warning: could not write manifest {}: {e}", path.display());
    }
}

fn manifest_path(cli_path: &Option<PathBuf>, main_out: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = cli_path {
        return p.clone();
    }
    match main_out {
        Some(out) => out.with_extension("manifest.json"),
        None => PathBuf::from(format!("{command}.manifest.json")),
    }
}

fn preset_config(p: ModelPreset, vocab: usize) -> ModelConfig {
    match p {
        ModelPreset::Tiny => ModelConfig::tiny(vocab),
        ModelPreset::Toy => ModelConfig::toy(vocab),
    }
}

enum CmdError {
    /// Bad input: exit code 2.
    Input(String),
    /// A verification failed: exit code 1.
    Failed(String),
}

impl CmdError {
    fn input(e: impl std::fmt::Display) -> Self {
        Self::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = match std::env::var(SEED_ENV) {
        Ok(s) => match s.parse() {
            Ok(v) => v,
            Err(_) => {
                eprintln!("error: {SEED_ENV}={s} is not a valid seed");
                return ExitCode::from(2);
            }
        },
        Err(_) => cli.seed,
    };
    let t0 = Instant::now();
    let res = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a, seed, &cli.manifest),
        Cmd::Train(a) => cmd_train(a, seed, &cli.manifest),
        Cmd::Decode(a) => cmd_decode(a, seed, &cli.manifest),
        Cmd::Bench(a) => cmd_bench(a, seed, &cli.manifest),
        Cmd::Verify(a) => cmd_verify(a, seed, &cli.manifest),
        Cmd::PrintConfig(a) => cmd_print_config(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Failed(msg)) => {
            eprintln!("FAIL: {msg}");
            let _ = t0;
            ExitCode::from(1)
        }
        Err(CmdError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_data(a: &GenDataArgs, seed: u64, manifest: &Option<PathBuf>) -> Result<(), CmdError> {
    let t0 = Instant::now();
    if a.min_words == 0 || a.min_words > a.max_words {
        return Err(CmdError::Input(format!(
            "invalid word range {}..{}",
            a.min_words, a.max_words
        )));
    }
    let cfg = GenConfig {
        n_items: a.n,
        duration_s: a.duration,
        change_prob: a.change_prob,
        min_answer_words: a.min_words,
        max_answer_words: a.max_words,
        probe_offset: a.probe_offset,
    };
    let items = densedata::generate(&cfg, seed).map_err(CmdError::input)?;
    let vocab = Vocab::new();
    for item in &items {
        densedata::verify_item(&vocab, item).map_err(CmdError::input)?;
    }
    densedata::save_corpus(&a.out, seed, &items).map_err(CmdError::input)?;
    println!("wrote {} items to {}", items.len(), a.out.display());
    write_manifest(
        &manifest_path(manifest, Some(&a.out), "gen-data"),
        "gen-data",
        seed,
        t0.elapsed().as_secs_f64(),
        serde_json::json!({ "items": items.len(), "out": a.out }),
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64, manifest: &Option<PathBuf>) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let vocab = Vocab::new();
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(CmdError::input)?;
            toml::from_str(&text).map_err(CmdError::input)?
        }
        None => preset_config(a.model, vocab.len()),
    };
    if cfg.vocab != vocab.len() {
        return Err(CmdError::Input(format!(
            "config vocab {} does not match tokenizer vocabulary {}",
            cfg.vocab,
            vocab.len()
        )));
    }
    if let Some(g) = a.gate_kind {
        cfg.gate_kind = match g {
            GateKindArg::Linear => GateKind::Linear,
            GateKindArg::Tanh => GateKind::Tanh,
            GateKindArg::None => GateKind::None,
        };
    }
    if a.no_reuse_params {
        cfg.reuse_params = ParamSharing::Independent;
    }
    if a.no_vffn {
        cfg.use_vffn = false;
    }
    cfg.symbol_table_size = cfg.symbol_table_size.max(densedata::N_SYMBOLS);
    let items = densedata::load_corpus(&a.corpus).map_err(CmdError::input)?;
    if items.is_empty() {
        return Err(CmdError::Input("corpus is empty".into()));
    }
    let n_holdout = ((items.len() as f64) * a.holdout) as usize;
    let n_train = items.len() - n_holdout;
    let mut model: Model<f32> = Model::init(cfg, seed).map_err(CmdError::input)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        lr: a.lr,
        decode_rate: a.decode_rate,
        frame_cap: a.frame_cap,
        shuffle_seed: seed,
        log_every: 200,
    };
    let curve = train(&mut model, &vocab, &items[..n_train], &opts).map_err(CmdError::input)?;
    for p in &curve {
        println!("step {:>6}  loss {:.4}", p.step, p.loss);
    }
    let acc = if n_holdout > 0 {
        let r = symbol_accuracy(&model, &vocab, &items[n_train..], a.decode_rate, a.frame_cap)
            .map_err(CmdError::input)?;
        println!(
            "held-out symbol accuracy {:.4} ({}/{})",
            r.accuracy(),
            r.correct,
            r.total
        );
        Some(r)
    } else {
        None
    };
    checkpoint::save(&a.out, &model).map_err(CmdError::input)?;
    println!("checkpoint written to {}", a.out.display());
    if let Some(path) = &a.loss_curve {
        let mut s = String::from("step,loss\n");
        for p in &curve {
            s.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        std::fs::write(path, s).map_err(CmdError::input)?;
    }
    write_manifest(
        &manifest_path(manifest, Some(&a.out), "train"),
        "train",
        seed,
        t0.elapsed().as_secs_f64(),
        serde_json::json!({
            "items": items.len(),
            "train_items": n_train,
            "final_loss": curve.last().map(|p| p.loss),
            "holdout_accuracy": acc.map(|r| r.accuracy()),
            "checkpoint": a.out,
        }),
    );
    Ok(())
}

fn read_schedule(path: &Path) -> Result<Vec<(Frame, f64)>, CmdError> {
    let text = std::fs::read_to_string(path).map_err(CmdError::input)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(t), Some(sym)) = (parts.next(), parts.next()) else {
            return Err(CmdError::Input(format!(
                "{}:{}: expected \"time symbol_id\"",
                path.display(),
                n + 1
            )));
        };
        let t: f64 = t.parse().map_err(|_| {
            CmdError::Input(format!("{}:{}: bad time {t:?}", path.display(), n + 1))
        })?;
        let sym: u32 = sym.parse().map_err(|_| {
            CmdError::Input(format!("{}:{}: bad symbol id {sym:?}", path.display(), n + 1))
        })?;
        out.push((Frame::Symbolic(sym), t));
    }
    Ok(out)
}

fn cmd_decode(a: &DecodeArgs, seed: u64, manifest: &Option<PathBuf>) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let vocab = Vocab::new();
    let model: Model<f32> = checkpoint::load(&a.checkpoint, seed).map_err(CmdError::input)?;
    let question = vocab.encode(&a.question).map_err(CmdError::input)?;
    if question.is_empty() {
        return Err(CmdError::Input("question has no tokens".into()));
    }
    let schedule = read_schedule(&a.schedule)?;
    let opts = DecodeOptions {
        decode_rate: a.decode_rate,
        max_tokens: a.max_tokens,
        eos: densedata::EOS,
        queue_capacity: a.queue_capacity,
        context: if a.mode == DecodeMode::FixedContext {
            ContextMode::FixedContext
        } else {
            ContextMode::Streaming
        },
    };
    let transcript: Transcript = match a.mode {
        DecodeMode::OfflineOracle => {
            decode_offline_oracle(&model, &question, a.t_q, &schedule, &opts)
                .map_err(CmdError::input)?
        }
        _ => {
            let mut prod = ScheduleProducer::new(schedule.clone());
            decode_streaming(&model, &question, a.t_q, &mut prod, &opts).map_err(CmdError::input)?
        }
    };
    let words: Vec<&str> = transcript
        .tokens
        .iter()
        .map(|t| vocab.word(t.id))
        .collect();
    println!("answer: {}", words.join(" "));
    for t in &transcript.tokens {
        println!("  <{:>6.2}s> {}", t.time, vocab.word(t.id));
    }
    let fresh = freshness_report(&transcript, &schedule);
    match &fresh {
        Some(f) => println!(
            "freshness: mean lag {:.2}s, max lag {:.2}s, newest-frame fraction {:.2}",
            f.mean_lag, f.max_lag, f.newest_fraction
        ),
        None => println!("freshness: no frames attended"),
    }
    if let Some(e) = &transcript.error {
        eprintln!("warning: producer stopped early: {e}");
    }
    if let Some(out) = &a.out {
        save_transcript(out, &transcript).map_err(CmdError::input)?;
        println!("transcript written to {}", out.display());
    }
    write_manifest(
        &manifest_path(manifest, a.out.as_deref(), "decode"),
        "decode",
        seed,
        t0.elapsed().as_secs_f64(),
        serde_json::json!({
            "answer": words.join(" "),
            "tokens": transcript.tokens.len(),
            "freshness": fresh,
            "producer_error": transcript.error,
        }),
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64, manifest: &Option<PathBuf>) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let frames: Vec<usize> = a
        .frames
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CmdError::Input(format!("bad frame count {s:?}"))))
        .collect::<Result<_, _>>()?;
    if frames.len() < 2 {
        return Err(CmdError::Input("need at least two frame counts".into()));
    }
    let cfg = preset_config(a.model, 24);
    let model: Model<f32> = Model::init(cfg, seed).map_err(CmdError::input)?;
    let report = run_bench(&model, &frames, a.text_len, a.repeats).map_err(CmdError::input)?;
    print!("{}", report.summary());
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report).expect("report json"))
            .map_err(CmdError::input)?;
    }
    write_manifest(
        &manifest_path(manifest, a.out.as_deref(), "bench"),
        "bench",
        seed,
        t0.elapsed().as_secs_f64(),
        serde_json::to_value(&report).expect("report json"),
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, seed: u64, manifest: &Option<PathBuf>) -> Result<(), CmdError> {
    let t0 = Instant::now();
    let names: Vec<&str> = if a.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&a.suite.as_str()) {
        vec![a.suite.as_str()]
    } else {
        return Err(CmdError::Input(format!(
            "unknown suite {:?}; available: all, {}",
            a.suite,
            SUITES.join(", ")
        )));
    };
    let mut failures = 0usize;
    let mut rows = Vec::new();
    for name in names {
        let results = run_suite(name, seed).expect("suite name validated");
        for r in results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            println!("[{status}] {name}: {} ({})", r.name, r.detail);
            if !r.passed {
                failures += 1;
            }
            rows.push(serde_json::json!({
                "suite": name,
                "check": r.name,
                "passed": r.passed,
                "detail": r.detail,
            }));
        }
    }
    write_manifest(
        &manifest_path(manifest, None, "verify"),
        "verify",
        seed,
        t0.elapsed().as_secs_f64(),
        serde_json::json!({ "checks": rows, "failures": failures }),
    );
    if failures > 0 {
        Err(CmdError::Failed(format!("{failures} checks failed")))
    } else {
        Ok(())
    }
}

fn cmd_print_config(a: &PrintConfigArgs) -> Result<(), CmdError> {
    let cfg = preset_config(a.model, Vocab::new().len());
    print!("{}", toml::to_string_pretty(&cfg).expect("config toml"));
    Ok(())
}
