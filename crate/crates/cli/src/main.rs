//! `rise`: runs experiments, replays measurement logs and emits logs.
//!
//! Every command is a request to the estimation service. Without
//! `--server` a private service is started on a loopback port for the
//! duration of the command.
//!
//! Exit status: 0 on success, 1 on any error, 2 on bad usage, 3 when the
//! oracle check finds an estimate off the dense batch solution.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use rise_client::{Client, ClientError, ErrorKind};
use rise_core::config::ExperimentConfig;
use rise_core::experiment::ExperimentReport;
use rise_core::pipeline::{BackendMode, EstimatorKind};
use rise_core::simulator::GroundTruth;

#[derive(Parser)]
#[command(name = "rise", version, about = "Square-root inverse Schmidt estimation experiments")]
struct Cli {
    /// Service to send requests to; a private one is started when absent.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,

    /// More log output on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured Monte Carlo experiment and write its reports.
    Run {
        #[command(flatten)]
        setup: Setup,
        /// Output directory for telemetry.csv, metrics.csv, summary.json and factor.ckpt.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Replay a recorded measurement log.
    Replay {
        /// Measurement log in JSON lines.
        #[arg(short, long)]
        log: PathBuf,
        /// Ground truth written by `emit`; enables accuracy and NEES metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        setup: Setup,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write the measurement log of one experiment run.
    Emit {
        #[command(flatten)]
        setup: Setup,
        /// Run index within the experiment.
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Log file to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the ground truth as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: SocketAddr,
    },
    /// Print the default configuration.
    Defaults,
}

#[derive(Args)]
struct Setup {
    /// TOML configuration; defaults apply to everything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Master noise seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Backend execution, overriding the configuration.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Estimator, overriding the configuration.
    #[arg(long, value_enum)]
    estimator: Option<Estimator>,
    /// Number of Monte Carlo runs, overriding the configuration.
    #[arg(long)]
    runs: Option<usize>,
    /// Check estimates against the dense batch solution and the pipeline
    /// invariants after every step.
    #[arg(long)]
    oracle_check: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SingleContext,
    Concurrent,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Rise,
    Optimal,
    PerfectMap,
}

impl Setup {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.pipeline.backend = match m {
                Mode::SingleContext => BackendMode::Inline,
                Mode::Concurrent => BackendMode::Threaded,
            };
        }
        if let Some(e) = self.estimator {
            cfg.pipeline.estimator = match e {
                Estimator::Rise => EstimatorKind::Rise,
                Estimator::Optimal => EstimatorKind::Optimal,
                Estimator::PerfectMap => EstimatorKind::PerfectMap,
            };
        }
        if let Some(n) = self.runs {
            cfg.run.n_runs = n;
        }
        cfg.run.oracle_check |= self.oracle_check;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (_, 0) => "warn",
        (_, 1) => "info",
        (_, 2) => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn write_report(report: &ExperimentReport, out: &Path) -> anyhow::Result<()> {
    report.write(out).with_context(|| format!("writing reports to {}", out.display()))?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

async fn execute(client: &Client, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run { setup, out } => {
            let report = client.run_experiment(&setup.config()?).await?;
            write_report(&report, &out)
        }
        Command::Replay { log, truth, setup, out } => {
            let cfg = setup.config()?;
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let truth: Option<GroundTruth> = match truth {
                Some(p) => {
                    let s = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))?)
                }
                None => None,
            };
            let report = client.replay(&cfg, text, truth).await.with_context(|| format!("replaying {}", log.display()))?;
            write_report(&report, &out)
        }
        Command::Emit { setup, run, out, truth } => {
            let (log, gt) = client.emit(&setup.config()?, run).await?;
            std::fs::write(&out, log.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = truth {
                std::fs::write(&p, serde_json::to_string(&gt)?).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Serve { .. } | Command::Defaults => unreachable!("handled without a client"),
    }
}

async fn serve(bind: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    eprintln!("listening on http://{}", listener.local_addr()?);
    rise_service::serve(listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

async fn main_async(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve { bind } => return serve(bind).await,
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_toml());
            return Ok(());
        }
        _ => {}
    }
    match cli.server {
        Some(url) => execute(&Client::new(url), cli.command).await,
        None => {
            let server = rise_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
            let result = execute(&Client::new(server.url()), cli.command).await;
            server.shutdown().await?;
            result
        }
    }
}

fn exit_code(err: &anyhow::Error) -> ExitCode {
    let oracle = err.chain().any(|e| {
        e.downcast_ref::<ClientError>().and_then(ClientError::kind) == Some(ErrorKind::OracleCheck)
            || matches!(e.downcast_ref::<rise_core::Error>(), Some(rise_core::Error::OracleCheck { .. }))
    });
    ExitCode::from(if oracle { 3 } else { 1 })
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match main_async(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
