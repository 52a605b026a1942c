//! `cogedit` command line. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cogedit_core::backends::BackendEndpoint;
use cogedit_core::eval::{
    emit_report, load_dataset, run_benchmark, BenchEnv, BenchOptions, ReportFormat, ReportOptions,
};
use cogedit_core::image::{decode_image, decode_mask, BinaryMask, ImageBuf, DEFAULT_MASK_THRESHOLD};
use cogedit_core::metrics::{masked_psnr, masked_ssim, HttpMetricBackend, KeepRegion, MetricBackend, MetricFlags, MetricReport};
use cogedit_core::mocks::fixtures::make_fixture_dataset;
use cogedit_core::mocks::{MockScenario, MockSuite};
use cogedit_core::pipeline::{
    load_session, run_session, save_session, Backends, PipelineConfig, PipelineError, PipelineMode,
    ReasonerProtocol, SessionState,
};
use cogedit_core::prompt::{Instruction, PromptTemplates};
use tracing::info;

use crate::api::{self, AppState, GatewayConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cogedit", version, about = "Localize-then-modify image editing with reflective selection")]
pub struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply one instruction to an image.
    Edit(EditArgs),
    /// Run ablation configurations over a dataset and write a report.
    Bench(BenchArgs),
    /// Start the HTTP session API.
    Serve(ServeArgs),
    /// Multi-round sessions on disk.
    #[command(subcommand)]
    Session(SessionCommand),
    /// Masked PSNR/SSIM between two images.
    Metrics(MetricsArgs),
    /// Generate the synthetic fixture dataset and its mock scenario.
    Fixtures(FixturesArgs),
    /// Serve the backend wire protocol from a mock scenario.
    MockBackend(MockBackendArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Answer every backend call from this scenario file instead of the network.
    #[arg(long, value_name = "FILE")]
    pub mock_scenario: Option<PathBuf>,
    /// Base URL for all three services (overridden by the specific flags).
    #[arg(long, value_name = "URL")]
    pub backend: Option<String>,
    #[arg(long, value_name = "URL")]
    pub reasoner: Option<String>,
    #[arg(long, value_name = "URL")]
    pub segmenter: Option<String>,
    #[arg(long, value_name = "URL")]
    pub inpainter: Option<String>,
    /// Talk to the reasoner through an OpenAI-compatible chat API with this model.
    #[arg(long, value_name = "MODEL")]
    pub chat_model: Option<String>,
    /// JSON file with `localization`, `modification` and `reflection` system messages.
    #[arg(long, value_name = "FILE")]
    pub templates: Option<PathBuf>,
    #[arg(long, value_name = "SECS")]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Pipeline configuration JSON; flags below override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<PipelineMode>,
    /// Candidates per selection point.
    #[arg(long = "n", value_name = "N")]
    pub n_reflect: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PX")]
    pub radius: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(short, long, value_name = "PNG")]
    pub input: PathBuf,
    #[arg(short = 'c', long, value_name = "TEXT")]
    pub instruction: String,
    #[arg(short, long, value_name = "PNG")]
    pub output: PathBuf,
    /// Ground-truth edit mask, required by `no_reasoning_gt_mask`.
    #[arg(long, value_name = "PNG")]
    pub gt_mask: Option<PathBuf>,
    /// Also save the one-round session here.
    #[arg(long, value_name = "DIR")]
    pub session_dir: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Comma-separated modes, first one is the timing baseline.
    #[arg(long, default_value = "full", value_delimiter = ',')]
    pub mode: Vec<PipelineMode>,
    #[arg(long = "n", value_name = "N")]
    pub n_reflect: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: String,
    #[arg(long, default_value_t = cogedit_core::eval::DEFAULT_PARALLELISM)]
    pub parallel: usize,
    #[arg(long, default_value = "psnr,ssim")]
    pub metrics: String,
    /// Leave wall-clock fields out of the report.
    #[arg(long)]
    pub no_timings: bool,
    /// LPIPS/CLIP service.
    #[arg(long, value_name = "URL")]
    pub metric_endpoint: Option<String>,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Where sessions are persisted.
    #[arg(long, value_name = "DIR", default_value = "sessions")]
    pub data_dir: PathBuf,
    /// Keep sessions in memory only.
    #[arg(long, conflicts_with = "data_dir")]
    pub ephemeral: bool,
    #[arg(long, default_value_t = 32)]
    pub max_upload_mib: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Apply instructions in order and save the session.
    Run(SessionRunArgs),
    /// Print a saved session document.
    Show {
        dir: PathBuf,
        #[arg(long)]
        no_timings: bool,
    },
}

#[derive(Debug, Args)]
pub struct SessionRunArgs {
    #[arg(short, long, value_name = "PNG")]
    pub input: PathBuf,
    /// Repeat for each round.
    #[arg(short = 'c', long = "instruction", value_name = "TEXT", required = true)]
    pub instructions: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long = "a", value_name = "PNG")]
    pub a: PathBuf,
    #[arg(long = "b", value_name = "PNG")]
    pub b: PathBuf,
    /// White pixels are compared; defaults to the whole image.
    #[arg(long, value_name = "PNG", conflicts_with = "edit_mask")]
    pub keep: Option<PathBuf>,
    /// White pixels are excluded.
    #[arg(long, value_name = "PNG")]
    pub edit_mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockBackendArgs {
    #[arg(long, value_name = "FILE")]
    pub scenario: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 9090)]
    pub port: u16,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime { message: String, stage: Option<String> },
}

impl CliError {
    fn runtime(message: impl std::fmt::Display) -> Self {
        CliError::Runtime {
            message: message.to_string(),
            stage: None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime { .. } => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime { message, stage: Some(s) } => write!(f, "failed at stage {s}: {message}"),
            CliError::Runtime { message, stage: None } => write!(f, "{message}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(m) => CliError::Usage(m),
            PipelineError::MissingGtMask | PipelineError::UnexpectedGtMask | PipelineError::GtMaskDims { .. } => {
                CliError::Usage(e.to_string())
            }
            PipelineError::Stage(se) => CliError::Runtime {
                stage: Some(se.step.as_str().to_owned()),
                message: se.source.to_string(),
            },
            other => CliError::runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(&cli);
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("cogedit: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.verbose, &cli.command) {
        (0, Command::Serve(_) | Command::MockBackend(_)) => tracing::Level::INFO,
        (0, _) => tracing::Level::WARN,
        (1, _) => tracing::Level::INFO,
        (2, _) => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Edit(a) => edit(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Session(SessionCommand::Run(a)) => session_run(a),
        Command::Session(SessionCommand::Show { dir, no_timings }) => {
            let state = load_session(&dir).map_err(CliError::runtime)?;
            println!("{}", state.to_json(!no_timings));
            Ok(())
        }
        Command::Metrics(a) => metrics(a),
        Command::Fixtures(a) => {
            if a.n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            let set = make_fixture_dataset(a.n, a.seed, &a.out).map_err(|e| match e {
                cogedit_core::mocks::fixtures::FixtureError::TooMany(_) => CliError::Usage(e.to_string()),
                other => CliError::runtime(other),
            })?;
            println!("wrote {} samples to {}", set.samples.len(), a.out.display());
            Ok(())
        }
        Command::MockBackend(a) => mock_backend(a),
    }
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn read_image(path: &Path) -> CliResult<ImageBuf> {
    decode_image(&read_file(path)?).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> CliResult<BinaryMask> {
    decode_mask(&read_file(path)?, DEFAULT_MASK_THRESHOLD)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

impl PipelineArgs {
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut c = load_config(self.config.as_deref())?;
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(n) = self.n_reflect {
            c.n_reflect = n;
        }
        if let Some(s) = self.seed {
            c.base_seed = s;
        }
        if let Some(r) = self.radius {
            c.dilation_radius = r;
        }
        c.validate()?;
        Ok(c)
    }
}

/// What a command runs against: mocks or network services.
pub struct Resolved {
    pub backends: Backends,
    pub suite: Option<Arc<MockSuite>>,
}

impl BackendArgs {
    pub fn resolve(&self, config: &PipelineConfig) -> CliResult<Resolved> {
        if let Some(path) = &self.mock_scenario {
            let scenario = MockScenario::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let suite = Arc::new(MockSuite::new(scenario).map_err(|e| CliError::Usage(e.to_string()))?);
            return Ok(Resolved {
                backends: Backends::from_mocks(&suite),
                suite: Some(suite),
            });
        }
        let mut endpoints = config.endpoints.clone();
        let pick = |specific: &Option<String>, current: &mut Option<BackendEndpoint>| {
            if let Some(url) = specific.as_ref().or(self.backend.as_ref()) {
                *current = Some(BackendEndpoint::new(url.clone()));
            }
            if let Some(ep) = current.as_mut() {
                if let Some(t) = self.timeout_secs {
                    ep.timeout_secs = t;
                }
                if let Some(r) = self.retries {
                    ep.retries = r;
                }
            }
        };
        pick(&self.reasoner, &mut endpoints.reasoner);
        pick(&self.segmenter, &mut endpoints.segmenter);
        pick(&self.inpainter, &mut endpoints.inpainter);
        let templates = match &self.templates {
            None => PromptTemplates::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
        };
        let protocol = match &self.chat_model {
            Some(model) => ReasonerProtocol::Chat { model: model.clone() },
            None => ReasonerProtocol::Native,
        };
        let backends = Backends::from_endpoints(&endpoints, protocol, templates).map_err(|e| {
            CliError::Usage(format!("{e} (use --mock-scenario or --backend/--reasoner/--segmenter/--inpainter)"))
        })?;
        Ok(Resolved { backends, suite: None })
    }
}

fn edit(a: EditArgs) -> CliResult {
    let config = a.pipeline.resolve()?;
    let resolved = a.backends.resolve(&config)?;
    let image = read_image(&a.input)?;
    let gt = a.gt_mask.as_deref().map(read_mask).transpose()?;
    let instruction = Instruction::new(a.instruction).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut state = SessionState::new(image, config);
    let record = state.edit_once(&instruction, gt.as_ref(), &resolved.backends)?.clone();
    let png = state
        .artifacts()
        .get(state.current_hash())
        .expect("output artifact stored");
    std::fs::write(&a.output, png.as_slice())
        .map_err(|e| CliError::runtime(format!("{}: {e}", a.output.display())))?;
    if let Some(dir) = &a.session_dir {
        save_session(&state, dir).map_err(CliError::runtime)?;
    }
    if let Some(p) = &record.localization.selected_prompt {
        println!("localization: {p}");
    }
    println!("modification: {}", record.modification.selected_plan);
    println!("output: {} ({})", a.output.display(), record.output_hash);
    Ok(())
}

fn session_run(a: SessionRunArgs) -> CliResult {
    let config = a.pipeline.resolve()?;
    let resolved = a.backends.resolve(&config)?;
    let image = read_image(&a.input)?;
    let instructions: Vec<Instruction> = a
        .instructions
        .into_iter()
        .map(|t| Instruction::new(t).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    match run_session(image, &instructions, config, &resolved.backends) {
        Ok(state) => {
            save_session(&state, &a.out).map_err(CliError::runtime)?;
            println!("{} rounds, final image {}", state.records().len(), state.current_hash());
            Ok(())
        }
        Err(abort) => {
            // keep the completed rounds around for inspection
            save_session(&abort.state, &a.out).map_err(CliError::runtime)?;
            Err(abort.error.into())
        }
    }
}

fn bench(a: BenchArgs) -> CliResult {
    let format: ReportFormat = a.format.parse().map_err(|e: cogedit_core::eval::EvalError| CliError::Usage(e.to_string()))?;
    let flags = MetricFlags::parse_list(&a.metrics).map_err(CliError::Usage)?;
    if a.parallel == 0 {
        return Err(CliError::Usage("--parallel must be at least 1".into()));
    }
    let mut base = load_config(a.config.as_deref())?;
    if let Some(n) = a.n_reflect {
        base.n_reflect = n;
    }
    if let Some(s) = a.seed {
        base.base_seed = s;
    }
    let configs: Vec<PipelineConfig> = a
        .mode
        .iter()
        .map(|m| PipelineConfig { mode: *m, ..base.clone() })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let resolved = a.backends.resolve(&base)?;
    let metrics: Option<Arc<dyn MetricBackend>> = match (&a.metric_endpoint, &resolved.suite) {
        (Some(url), _) => Some(Arc::new(
            HttpMetricBackend::new(BackendEndpoint::new(url.clone())).map_err(|e| CliError::Usage(e.to_string()))?,
        )),
        (None, Some(suite)) => Some(suite.metrics.clone()),
        (None, None) => None,
    };
    if (flags.lpips || flags.clip) && metrics.is_none() {
        return Err(CliError::Usage("lpips/clip need --metric-endpoint".into()));
    }
    let samples = load_dataset(&a.dataset).map_err(|e| CliError::Usage(e.to_string()))?;
    let env = BenchEnv {
        backends: resolved.backends,
        metrics,
    };
    let started = Instant::now();
    let result = run_benchmark(
        &samples,
        &configs,
        flags,
        &env,
        &BenchOptions {
            parallel: a.parallel,
            baseline: 0,
        },
    )
    .map_err(CliError::runtime)?;
    info!(elapsed_ms = started.elapsed().as_millis() as u64, "benchmark finished");
    let bytes = emit_report(
        &result,
        format,
        ReportOptions {
            include_timings: !a.no_timings,
        },
    )
    .map_err(CliError::runtime)?;
    match &a.out {
        Some(path) => std::fs::write(path, &bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> CliResult {
    let x = read_image(&a.a)?;
    let y = read_image(&a.b)?;
    let keep = match (&a.keep, &a.edit_mask) {
        (Some(p), _) => KeepRegion::Mask(read_mask(p)?),
        (None, Some(p)) => KeepRegion::outside(&read_mask(p)?),
        (None, None) => KeepRegion::Full,
    };
    let mut report = MetricReport::new("cli");
    report.psnr_db = Some(masked_psnr(&x, &y, &keep).map_err(CliError::runtime)?);
    report.ssim = Some(masked_ssim(&x, &y, &keep).map_err(CliError::runtime)?);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)
}

fn bind_addr(host: &str, port: u16) -> CliResult<SocketAddr> {
    format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("{host}:{port}: {e}")))
}

fn serve(a: ServeArgs) -> CliResult {
    let config = a.pipeline.resolve()?;
    let resolved = a.backends.resolve(&config)?;
    let addr = bind_addr(&a.host, a.port)?;
    let gateway = GatewayConfig {
        pipeline: config,
        max_upload: a.max_upload_mib * 1024 * 1024,
        data_dir: (!a.ephemeral).then_some(a.data_dir),
    };
    let state = AppState::new(resolved.backends, gateway);
    let restored = state.restore().map_err(CliError::runtime)?;
    if restored > 0 {
        info!(restored, "sessions restored");
    }
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime(format!("bind {addr}: {e}")))?;
        info!(%addr, "gateway listening");
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(CliError::runtime)
    })
}

fn mock_backend(a: MockBackendArgs) -> CliResult {
    let scenario = MockScenario::load(&a.scenario).map_err(|e| CliError::Usage(format!("{}: {e}", a.scenario.display())))?;
    let suite = Arc::new(MockSuite::new(scenario).map_err(|e| CliError::Usage(e.to_string()))?);
    let addr = bind_addr(&a.host, a.port)?;
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime(format!("bind {addr}: {e}")))?;
        info!(%addr, "mock backend listening");
        axum::serve(listener, crate::mock_server::router(suite))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(CliError::runtime)
    })
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
