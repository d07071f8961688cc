use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::info;

use rekv_core::config::{RetrievalMode, RunConfig};
use rekv_core::encoder::StreamEncoder;
use rekv_core::harness::{self, Sweep, SyntheticTraceSpec, Trace, VerifyOptions};
use rekv_core::model::init_model;
use rekv_core::qa::{self, AnswerRecord, QaOptions};
use rekv_core::serving::{self, WorkerPoolConfig};
use rekv_core::store::KvStore;

#[derive(Parser, Debug)]
#[command(name = "rekv", version, about = "Streaming video QA over a retrievable KV cache")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fps: Option<f64>,
    /// Local attention window in tokens.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Frames to retrieve; `bench` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    r: Vec<usize>,
    /// Frames per block; `bench` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    b: Vec<usize>,
    /// internal, external, uniform, oracle or all; `bench` takes a list.
    #[arg(long, global = true, value_delimiter = ',')]
    mode: Vec<RetrievalMode>,
    /// Output file (or directory for `encode`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-needle trace.
    Gen {
        #[arg(long, default_value_t = 200)]
        frames: u64,
        /// Full trace spec as JSON, overriding --frames.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Encode a trace and persist every frame's KV to --out.
    Encode {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Answer questions against an encoded trace.
    Ask {
        #[arg(long)]
        trace: PathBuf,
        /// Only this question; every question in the trace otherwise.
        #[arg(long)]
        question: Option<u64>,
        /// Ad-hoc question tokens, asked at --at.
        #[arg(long, value_delimiter = ',', conflicts_with = "question")]
        tokens: Vec<u32>,
        /// Admission frame for --tokens; the last frame by default.
        #[arg(long, requires = "tokens")]
        at: Option<u64>,
    },
    /// Stream a trace through the encoder and worker pool.
    Serve {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sweep r, b and retrieval mode over a trace.
    Bench {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check streamed encoding, answers and the store against dense references.
    Verify {
        /// A generated trace of --frames frames is used when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        frames: u64,
        /// Corrupt this frame's block before reloading it.
        #[arg(long)]
        corrupt: Option<u64>,
    },
}

impl Global {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(f) = self.fps {
            config.fps = f;
        }
        if let Some(w) = self.window {
            config.model.local_window = w;
        }
        if let Some(&r) = self.r.first() {
            config.retrieval.r = r;
        }
        if let Some(&b) = self.b.first() {
            config.retrieval.b = b;
        }
        if let Some(&m) = self.mode.first() {
            config.retrieval.mode = m;
        }
        config.validate()?;
        Ok(config)
    }

    fn sweep(&self, config: &RunConfig) -> Sweep {
        let or = |v: &[usize], d: Vec<usize>| if v.is_empty() { d } else { v.to_vec() };
        Sweep {
            r: or(&self.r, vec![8, 16, 32, 64]),
            b: or(&self.b, vec![config.retrieval.b]),
            modes: if self.mode.is_empty() {
                vec![RetrievalMode::Internal, RetrievalMode::External, RetrievalMode::Uniform]
            } else {
                self.mode.clone()
            },
        }
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                std::io::stdout().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}

fn load_trace(path: &Path) -> Result<Trace> {
    Trace::load(path).with_context(|| format!("reading trace {}", path.display()))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn gen(global: &Global, config: &RunConfig, frames: u64, spec: Option<&Path>) -> Result<()> {
    let spec: SyntheticTraceSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticTraceSpec::single_needle(&config.model, config.seed, frames, config.fps),
    };
    let trace = harness::gen_trace(&spec)?;
    info!(frames = trace.frames.len(), questions = trace.questions.len(), "generated trace");
    global.emit(&trace.to_jsonl())
}

fn encode(global: &Global, config: &RunConfig, trace: &Path) -> Result<()> {
    let Some(dir) = &global.out else {
        bail!("encode needs --out <dir>");
    };
    let trace = load_trace(trace)?;
    let model = Arc::new(init_model(&config.model, config.seed)?);
    let (writer, store) = KvStore::create(harness::store_config(config, Some(dir)))?;
    let mut enc = StreamEncoder::new(model, writer, config.sink_frames)?;
    enc.encode_all(trace.input_frames(config.fps))?;
    let mut writer = enc.finish()?;
    let files = writer.persist_all()?;
    writer.close()?;
    info!(files = files.len(), dir = %dir.display(), "persisted store");
    println!("{}", serde_json::to_string(&store.stats())?);
    Ok(())
}

fn ask(global: &Global, config: &RunConfig, trace: &Path, question: Option<u64>, tokens: &[u32], at: Option<u64>) -> Result<()> {
    let trace = load_trace(trace)?;
    let encoded = harness::encode_trace(&trace, config, None)?;
    let options = QaOptions::from_config(config);
    let mut records = Vec::new();
    if !tokens.is_empty() {
        let frame = at.or(encoded.store.len().checked_sub(1));
        let snap = encoded.store.snapshot_at(frame)?;
        let result = qa::answer_question(&encoded.model, encoded.sources(&snap, None), 0, tokens, &options)?;
        records.push(AnswerRecord::new(&result, frame));
    } else {
        let picked: Vec<_> = trace.questions.iter().filter(|q| question.is_none_or(|id| id == q.question_id)).collect();
        if picked.is_empty() {
            bail!("no matching question in the trace");
        }
        for q in picked {
            let snap = encoded.store.snapshot_at(Some(q.admission_frame))?;
            let result = qa::answer_question(
                &encoded.model,
                encoded.sources(&snap, Some(&q.relevant)),
                q.question_id,
                &q.tokens,
                &options,
            )?;
            records.push(AnswerRecord::new(&result, Some(q.admission_frame)));
        }
    }
    global.emit(&jsonl(&records)?)
}

fn serve(global: &Global, config: &RunConfig, trace: &Path, workers: Option<usize>) -> Result<()> {
    let trace = load_trace(trace)?;
    let model = Arc::new(init_model(&config.model, config.seed)?);
    let (writer, _) = KvStore::create(harness::store_config(config, None))?;
    let mut pool = WorkerPoolConfig::from_config(config);
    if let Some(w) = workers {
        pool.workers = w;
    }
    let session = serving::run_stream(trace.input_frames(config.fps), model, writer, pool)?;
    let handles = trace
        .requests(config.fps)
        .into_iter()
        .map(|r| session.submit(r))
        .collect::<rekv_core::Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for h in handles {
        records.push(h.wait()?.record());
    }
    let metrics = session.finish()?;
    global.emit(&(jsonl(&records)? + &metrics.to_jsonl()))?;
    eprint!("{}", metrics.summary_table());
    Ok(())
}

fn bench(global: &Global, config: &RunConfig, trace: &Path) -> Result<()> {
    let trace = load_trace(trace)?;
    let report = harness::run_bench(&trace, config, &global.sweep(config))?;
    global.emit(&report.to_jsonl())?;
    eprint!("{}", report.summary_table());
    Ok(())
}

fn verify(global: &Global, config: &RunConfig, trace: Option<&Path>, frames: u64, corrupt: Option<u64>) -> Result<bool> {
    let trace = match trace {
        Some(p) => load_trace(p)?,
        None => harness::gen_trace(&SyntheticTraceSpec::single_needle(&config.model, config.seed, frames, config.fps))?,
    };
    let report = harness::verify_oracle(&trace, config, &VerifyOptions { corrupt_frame: corrupt })?;
    global.emit(&report.to_jsonl())?;
    eprint!("{}", report.summary_table());
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let config = cli.global.run_config()?;
    let g = &cli.global;
    match &cli.command {
        Command::Gen { frames, spec } => gen(g, &config, *frames, spec.as_deref())?,
        Command::Encode { trace } => encode(g, &config, trace)?,
        Command::Ask { trace, question, tokens, at } => ask(g, &config, trace, *question, tokens, *at)?,
        Command::Serve { trace, workers } => serve(g, &config, trace, *workers)?,
        Command::Bench { trace } => bench(g, &config, trace)?,
        Command::Verify { trace, frames, corrupt } => return verify(g, &config, trace.as_deref(), *frames, *corrupt),
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
