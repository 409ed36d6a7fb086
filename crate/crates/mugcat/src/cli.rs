//! `mugcat` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mugcat_core::bench::{
    self, AccuracyTable, BenchReport, ClipInput, FidReport, ReportFormat, SweepSpec, TopkReport,
    DEFAULT_SWEEP_PROMPT,
};
use mugcat_core::config::{validate, PipelineConfig, StageEndpoints, ValidatedConfig};
use mugcat_core::domain::{Clip, ConversationTurn, Frame, GeneratedImage, Resolution};
use mugcat_core::ingest::{self, FrameSource, SourceMode};
use mugcat_core::pipeline::{Clock, Conversation, Engine, FrozenClock, MonotonicClock, NullSink};
use mugcat_core::protocol::{self, Backends, Stage};
use mugcat_core::stubs::StubLatency;

use crate::conformance::{run_conformance, HintPolicy};
use crate::gateway::{self, Gateway, GatewayOptions};
use crate::http::{backends_for, HttpTransport};
use crate::stub_server;

pub const CONFIG_ENV: &str = "MUGCAT_CONFIG";
const DEADLINE: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(name = "mugcat", version, about = "Sign keywords to a captioned picture, plus benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the REST + WebSocket gateway.
    Serve(ServeArgs),
    /// Recognize clip files and run turns over the keywords.
    Run(RunArgs),
    /// Stub backend servers.
    Stubs {
        #[command(subcommand)]
        command: StubsCommand,
    },
    /// Check a backend against the stage protocol.
    Conformance(ConformanceArgs),
    /// Benchmarks and report rendering.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Config file (key = value); defaults to $MUGCAT_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output format.
    #[arg(long, default_value = "text", value_parser = parse_format)]
    pub format: ReportFormat,
    /// Shorthand for --format json.
    #[arg(long)]
    pub json: bool,
}

impl OutputArgs {
    fn format(&self) -> ReportFormat {
        if self.json {
            ReportFormat::Json
        } else {
            self.format
        }
    }
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse()
}

fn parse_resolution(s: &str) -> Result<Resolution, String> {
    s.parse().map_err(|e: mugcat_core::DomainError| e.to_string())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Start without contacting backends; handshake on first use.
    #[arg(long)]
    pub lazy: bool,
    /// Write each session's event log here as `<session>.json`.
    #[arg(long)]
    pub transcript_dir: Option<PathBuf>,
    /// Directory of bench report `.json` files served at /v1/bench/reports.
    #[arg(long)]
    pub reports_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `.mclip` files or frame directories, processed in order.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    /// End the utterance after each input instead of once at the end.
    #[arg(long)]
    pub flush_per_file: bool,
    /// Record every stage timing as 0 ms, for reproducible output.
    #[arg(long)]
    pub freeze_clock: bool,
    /// Print each turn as canonical JSON, one per line.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    #[arg(long)]
    pub stage: Stage,
    /// Base URL of the backend, e.g. http://127.0.0.1:7300.
    #[arg(long)]
    pub url: String,
    /// Require predictions to ignore `debug_label_hint` (real models).
    #[arg(long)]
    pub hint_ignored: bool,
    #[arg(long, default_value_t = 30_000)]
    pub deadline_ms: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum StubsCommand {
    /// Serve all five stub stages on consecutive ports.
    Up(StubsUpArgs),
}

#[derive(Debug, Args)]
pub struct StubsUpArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// First port; stages follow in protocol order. 0 picks free ports.
    #[arg(long, default_value_t = 7300)]
    pub port_base: u16,
    #[command(flatten)]
    pub latency: LatencyArgs,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct LatencyArgs {
    /// Simulated model load added to the capabilities handshake.
    #[arg(long, default_value_t = 0)]
    pub load_ms: u64,
    /// Delay added to every stage call.
    #[arg(long, default_value_t = 0)]
    pub call_ms: u64,
    /// Extra synthesize delay per sampling step.
    #[arg(long, default_value_t = 0)]
    pub step_ms: u64,
}

impl From<LatencyArgs> for StubLatency {
    fn from(a: LatencyArgs) -> Self {
        StubLatency {
            handshake: Duration::from_millis(a.load_ms),
            per_call: Duration::from_millis(a.call_ms),
            per_step: Duration::from_millis(a.step_ms),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Recognizer throughput, inference-only and including load.
    Fps(FpsArgs),
    /// FID and seconds per batch across sampling steps.
    Sweep(SweepArgs),
    /// Synthesis latency across resolutions and batch sizes.
    Batch(BatchArgs),
    /// FID between two directories of PNG images.
    Fid(FidArgs),
    /// Top-1/top-5 accuracy of ranked predictions.
    Accuracy(AccuracyArgs),
    /// Render a saved JSON report.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct FpsArgs {
    /// Clip files; without any, synthetic clips are generated.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub synthetic_clips: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[command(flatten)]
    pub latency: LatencyArgs,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP_STEPS)]
    pub steps: Vec<u32>,
    #[arg(long, default_value = "512x512", value_parser = parse_resolution)]
    pub resolution: Resolution,
    #[arg(long, default_value_t = 8)]
    pub k: u32,
    #[arg(long, default_value = DEFAULT_SWEEP_PROMPT)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub latency: LatencyArgs,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_resolution, default_values = ["512x512", "512x448", "448x448", "512x384", "448x384", "512x320", "384x384"])]
    pub resolutions: Vec<Resolution>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 4, 8, 16])]
    pub k: Vec<u32>,
    #[arg(long, default_value_t = 20)]
    pub steps: u32,
    #[arg(long, default_value = DEFAULT_SWEEP_PROMPT)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub latency: LatencyArgs,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    /// Directory of reference `.png` images.
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of generated `.png` images.
    #[arg(long)]
    pub generated: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    /// One sample per line: ranked labels, comma-separated, best first.
    #[arg(long)]
    pub predictions: PathBuf,
    /// One true label per line.
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A bench report as written by `--format json`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

type CliResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

/// Reads `path`, or `$MUGCAT_CONFIG` when no path is given.
pub fn load_config(path: Option<&Path>) -> CliResult<ValidatedConfig> {
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let Some(path) = path.map(Path::to_path_buf).or(env_path) else {
        return Ok(ValidatedConfig::default());
    };
    let text = std::fs::read_to_string(&path).map_err(err(&path.display().to_string()))?;
    let parsed: PipelineConfig = text.parse().map_err(err(&path.display().to_string()))?;
    validate(&parsed).map_err(err(&path.display().to_string()))
}

fn emit(bytes: &[u8]) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes).map_err(err("stdout"))?;
    if !bytes.ends_with(b"\n") {
        out.write_all(b"\n").map_err(err("stdout"))?;
    }
    out.flush().map_err(err("stdout"))
}

fn emit_report(report: &BenchReport, output: &OutputArgs) -> CliResult<()> {
    emit(&bench::render_report(report, output.format()))
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match runtime.block_on(dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

async fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Serve(a) => serve(a).await,
        Command::Run(a) => run(a).await,
        Command::Stubs { command: StubsCommand::Up(a) } => stubs_up(a).await,
        Command::Conformance(a) => conformance(a).await,
        Command::Bench { command } => match command {
            BenchCommand::Fps(a) => bench_fps(a).await,
            BenchCommand::Sweep(a) => bench_sweep(a).await,
            BenchCommand::Batch(a) => bench_batch(a).await,
            BenchCommand::Fid(a) => bench_fid(a).await,
            BenchCommand::Accuracy(a) => bench_accuracy(a),
            BenchCommand::Render(a) => bench_render(a),
        },
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn load_reports(dir: &Path) -> CliResult<Vec<BenchReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(err(&dir.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(err(&p.display().to_string()))?;
            protocol::decode(&bytes).map_err(err(&p.display().to_string()))
        })
        .collect()
}

async fn serve(a: ServeArgs) -> CliResult<()> {
    let config = load_config(a.config.config.as_deref())?;
    let reports = match &a.reports_dir {
        Some(d) => load_reports(d)?,
        None => Vec::new(),
    };
    if let Some(d) = &a.transcript_dir {
        std::fs::create_dir_all(d).map_err(err(&d.display().to_string()))?;
    }
    let addr = format!("{}:{}", a.host, a.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| {
        gateway::GatewayError::Bind { addr: addr.clone(), source: e }.to_string()
    })?;
    let engine = Arc::new(Engine::new(backends_for(&config.endpoints, StubLatency::default())));
    let options = GatewayOptions { config, lazy: a.lazy, transcript_dir: a.transcript_dir, reports };
    let gw = Gateway::new(engine, options).await.map_err(|e| e.to_string())?;
    let local = listener.local_addr().map_err(err("listener"))?;
    eprintln!("listening on http://{local}");
    gateway::serve(listener, gw, shutdown_signal()).await.map_err(|e| e.to_string())
}

async fn run(a: RunArgs) -> CliResult<()> {
    let config = load_config(a.config.config.as_deref())?;
    let clock: Arc<dyn Clock> = if a.freeze_clock { Arc::new(FrozenClock::default()) } else { Arc::new(MonotonicClock) };
    let engine = Arc::new(Engine::with_clock(backends_for(&config.endpoints, StubLatency::default()), clock));
    engine.handshake(DEADLINE).await.map_err(|e| e.to_string())?;

    let mut clips_per_file: Vec<(FrameSource, Vec<Clip>)> = Vec::new();
    for path in &a.input {
        let clip = ingest::load_clip_container(path).map_err(err(&path.display().to_string()))?;
        let source = FrameSource::new(clip.source_id(), SourceMode::File, clip.fps()).map_err(|e| e.to_string())?;
        let windows = ingest::segment(&source, clip.frames(), config.window_len, config.stride)
            .map_err(err(&path.display().to_string()))?;
        clips_per_file.push((source, windows));
    }
    let first = clips_per_file[0].0.clone();
    let mut conversation = Conversation::new(engine, config, first).map_err(|e| e.to_string())?;
    let mut turns: Vec<ConversationTurn> = Vec::new();
    let n_files = clips_per_file.len();
    for (i, (_, windows)) in clips_per_file.into_iter().enumerate() {
        for clip in windows {
            conversation.push_clip(clip, None, &mut NullSink).await;
        }
        if a.flush_per_file || i + 1 == n_files {
            let turn = conversation.flush(&mut NullSink).await.map_err(|e| e.to_string())?;
            print_turn(&turn, a.json)?;
            turns.push(turn);
        }
    }
    // idle-gap turns happen inside push_clip; report them too
    for turn in conversation.turns().iter().filter(|t| !turns.iter().any(|u| u.turn_id() == t.turn_id())) {
        print_turn(turn, a.json)?;
    }
    Ok(())
}

fn print_turn(turn: &ConversationTurn, json: bool) -> CliResult<()> {
    if json {
        emit(&protocol::encode(turn))
    } else {
        let s = turn.selection();
        emit(
            format!(
                "turn {}: \"{}\" -> [{}] {} (score {:.4})",
                turn.turn_id(),
                turn.query_text(),
                s.selected_index(),
                s.selected_caption(),
                s.best_score()
            )
            .as_bytes(),
        )
    }
}

async fn stubs_up(a: StubsUpArgs) -> CliResult<()> {
    let servers = stub_server::serve_stubs(&a.host, a.port_base, a.latency.into()).await.map_err(err("bind"))?;
    let url = |s: Stage| Some(format!("http://{}", servers.addr(s)));
    let endpoints = StageEndpoints {
        recognize: url(Stage::Recognize),
        synthesize: url(Stage::Synthesize),
        caption: url(Stage::Caption),
        embed: url(Stage::Embed),
        image_features: url(Stage::ImageFeatures),
    };
    emit(&protocol::encode(&endpoints))?;
    shutdown_signal().await;
    servers.shutdown().await;
    Ok(())
}

async fn conformance(a: ConformanceArgs) -> CliResult<()> {
    let policy = if a.hint_ignored { HintPolicy::Ignored } else { HintPolicy::Honored };
    let results =
        run_conformance(a.stage, Arc::new(HttpTransport::new(&a.url)), policy, Duration::from_millis(a.deadline_ms)).await;
    if a.json {
        emit(&protocol::encode(&results))?;
    } else {
        let lines: Vec<String> = results.iter().map(ToString::to_string).collect();
        emit(lines.join("\n").as_bytes())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(format!("{failed} of {} conformance checks failed", results.len()));
    }
    Ok(())
}

/// Distinct grey clips, encoded so decoding is part of the load scope.
fn synthetic_clips(count: usize, frames: usize) -> CliResult<Vec<ClipInput>> {
    (0..count)
        .map(|c| {
            let fr = (0..frames as u64)
                .map(|i| Frame::new(i, ingest::timestamp_for(i, 25.0), 32, 32, vec![(c * 7 + i as usize) as u8; 32 * 32 * 3]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let clip = Clip::new(format!("synthetic{c}#0"), format!("synthetic{c}"), 25.0, fr).map_err(|e| e.to_string())?;
            let bytes = ingest::encode_mclip(&clip).map_err(|e| e.to_string())?;
            Ok(ClipInput::Bytes { source_id: format!("synthetic{c}"), bytes })
        })
        .collect()
}

async fn bench_fps(a: FpsArgs) -> CliResult<()> {
    if a.frames == 0 {
        return Err("--frames must be at least 1".into());
    }
    let config = load_config(a.config.config.as_deref())?;
    let backends = backends_for(&config.endpoints, a.latency.into());
    let clips = if a.input.is_empty() {
        synthetic_clips(a.synthetic_clips, a.frames)?
    } else {
        a.input.iter().cloned().map(ClipInput::Container).collect()
    };
    let run = bench::measure_fps(clips, &backends.recognize, DEADLINE).await.map_err(|e| e.to_string())?;
    emit_report(&BenchReport::Fps(run), &a.output)
}

async fn bench_sweep(a: SweepArgs) -> CliResult<()> {
    let config = load_config(a.config.config.as_deref())?;
    let backends = backends_for(&config.endpoints, a.latency.into());
    let spec = SweepSpec { steps: a.steps, resolution: a.resolution, k: a.k, prompt: a.prompt, seed: a.seed };
    let report = bench::run_sweep(&spec, &backends, Duration::from_secs(600)).await.map_err(|e| e.to_string())?;
    emit_report(&BenchReport::Sweep(report), &a.output)
}

async fn bench_batch(a: BatchArgs) -> CliResult<()> {
    let config = load_config(a.config.config.as_deref())?;
    let backends = backends_for(&config.endpoints, a.latency.into());
    let report =
        bench::run_batch_sweep(&a.resolutions, &a.k, a.steps, &a.prompt, a.seed, &backends, Duration::from_secs(600))
            .await
            .map_err(|e| e.to_string())?;
    emit_report(&BenchReport::BatchSweep(report), &a.output)
}

fn png_images(dir: &Path, tag: &str) -> CliResult<Vec<GeneratedImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(err(&dir.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let bytes = std::fs::read(p).map_err(err(&p.display().to_string()))?;
            let id = format!("{tag}/{}", p.file_name().unwrap_or_default().to_string_lossy());
            GeneratedImage::new(id, tag, i as u32, bytes).map_err(err(&p.display().to_string()))
        })
        .collect()
}

async fn features(backends: &Backends, images: Vec<GeneratedImage>) -> CliResult<Vec<Vec<f64>>> {
    let client = &backends.image_features;
    let calls = images.into_iter().map(|img| async move { client.image_features(img, DEADLINE).await });
    let out = futures::future::try_join_all(calls).await.map_err(|e| e.to_string())?;
    Ok(out.into_iter().map(|t| t.value.into_vec()).collect())
}

async fn bench_fid(a: FidArgs) -> CliResult<()> {
    let config = load_config(a.config.config.as_deref())?;
    let backends = backends_for(&config.endpoints, StubLatency::default());
    backends.image_features.handshake(DEADLINE).await.map_err(|e| e.to_string())?;
    let real = features(&backends, png_images(&a.real, "real")?).await?;
    let generated = features(&backends, png_images(&a.generated, "generated")?).await?;
    let fid = bench::fid_from_features::<f64, _>(&real, &generated).map_err(|e| e.to_string())?;
    let report = FidReport {
        // round off eigensolver noise so identical sets print exactly 0
        fid: (fid * 1e9).round() / 1e9,
        n_real: real.len(),
        n_generated: generated.len(),
        dim: real[0].len(),
    };
    emit_report(&BenchReport::Fid(report), &a.output)
}

fn non_empty_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(err(&path.display().to_string()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn bench_accuracy(a: AccuracyArgs) -> CliResult<()> {
    let preds: Vec<Vec<String>> = non_empty_lines(&a.predictions)?
        .iter()
        .map(|l| l.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .collect();
    let labels = non_empty_lines(&a.labels)?;
    let top1 = bench::topk_accuracy(&preds, &labels, 1).map_err(|e| e.to_string())?;
    let top5 = bench::topk_accuracy(&preds, &labels, 5).map_err(|e| e.to_string())?;
    emit_report(&BenchReport::Topk(TopkReport { samples: labels.len(), top1, top5 }), &a.output)
}

fn bench_render(a: RenderArgs) -> CliResult<()> {
    let bytes = std::fs::read(&a.input).map_err(err(&a.input.display().to_string()))?;
    let report: BenchReport = protocol::decode(&bytes).map_err(err(&a.input.display().to_string()))?;
    emit_report(&report, &a.output)
}

/// Loads the recorded recognizer comparison table shipped with the repo.
pub fn parse_accuracy_table(bytes: &[u8]) -> CliResult<AccuracyTable> {
    match protocol::decode::<BenchReport>(bytes).map_err(|e| e.to_string())? {
        BenchReport::AccuracyTable(t) => Ok(t),
        other => Err(format!("expected an accuracy table, got {other:?}")),
    }
}
