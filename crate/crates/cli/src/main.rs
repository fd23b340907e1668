//! `uqseg` — phantom generation, batch uncertainty runs, analysis and the
//! review server.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 predictor error.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use uqseg_core::phantom::{self, DatasetConfig};
use uqseg_core::pipeline::{self, FailureKind, PipelineError, RunConfig, RunOptions};
use uqseg_core::{Modality, Provenance};
use uqseg_review::{ServeConfig, Server};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PREDICTOR: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "uqseg", version, about = "Segmentation uncertainty toolkit for fetal biometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Head,
    Femur,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Baseline,
    Tta,
    Mcd,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with ground truth.
    Phantom {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian noise standard deviation added to intensities.
        #[arg(long, value_parser = non_negative)]
        noise: Option<f64>,
        /// 3x3 box-blur passes applied before the noise.
        #[arg(long)]
        blur: Option<u32>,
        #[arg(long, value_parser = positive)]
        pixel_size: Option<f64>,
    },
    /// Run baseline, TTA or MC-dropout inference over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Samples per image (ignored by baseline).
        #[arg(long, default_value_t = pipeline::DEFAULT_SAMPLES as u64, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (overrides the config file).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        workers: Option<u64>,
    },
    /// Summarize a result tree: reports, uncertainty/error histogram, heatmaps.
    Analyze {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a result tree to the review UI.
    Serve {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Decision log; defaults to `<results>/decisions.ndjson`.
        #[arg(long)]
        decisions: Option<PathBuf>,
        /// Directory with the built UI bundle, served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: error.into(),
        }
    }

    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure::usage(e),
        other => Failure::data(other),
    }
}

fn cmd_phantom(
    kind: Kind,
    count: u64,
    seed: u64,
    out: &Path,
    noise: Option<f64>,
    blur: Option<u32>,
    pixel_size: Option<f64>,
) -> Result<(), Failure> {
    let modality = match kind {
        Kind::Head => Modality::Head,
        Kind::Femur => Modality::Femur,
    };
    let defaults = DatasetConfig::default();
    let config = DatasetConfig {
        noise_sigma: noise.unwrap_or(defaults.noise_sigma),
        blur_passes: blur.unwrap_or(defaults.blur_passes),
        pixel_size_mm: pixel_size.unwrap_or(defaults.pixel_size_mm),
        ..defaults
    };
    let metas = phantom::generate_dataset(modality, count as usize, seed, &config, out).map_err(Failure::data)?;
    println!("wrote {} {modality} phantoms to {}", metas.len(), out.display());
    Ok(())
}

fn cmd_run(
    dataset: &Path,
    method: Method,
    samples: u64,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
    workers: Option<u64>,
) -> Result<(), Failure> {
    let mut run_config = match config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            PipelineError::Io { .. } => Failure::data(e),
            other => Failure::usage(other),
        })?,
        None => RunConfig::default(),
    };
    if let Some(w) = workers {
        run_config.workers = Some(w as usize);
    }
    let options = RunOptions {
        method: match method {
            Method::Baseline => Provenance::Baseline,
            Method::Tta => Provenance::Tta,
            Method::Mcd => Provenance::Mcd,
        },
        samples: samples as usize,
        seed,
    };
    let summary = pipeline::run(dataset, out, &run_config, &options).map_err(pipeline_failure)?;
    let done = summary.cases.len() - summary.failures.len();
    println!("processed {done}/{} cases into {}", summary.cases.len(), out.display());
    for f in &summary.failures {
        eprintln!("case {} failed ({:?}): {}", f.case_id, f.kind, f.message);
    }
    if summary.has_failures(FailureKind::Predictor) {
        return Err(Failure {
            code: EXIT_PREDICTOR,
            error: anyhow::anyhow!("predictor failed on {} case(s); see summary.json", summary.failures.len()),
        });
    }
    if summary.has_failures(FailureKind::Data) {
        return Err(Failure::data(anyhow::anyhow!(
            "{} case(s) had unreadable inputs; see summary.json",
            summary.failures.len()
        )));
    }
    Ok(())
}

fn cmd_analyze(results: &Path, bin_width: f64, out: &Path) -> Result<(), Failure> {
    if !(bin_width > 0.0 && bin_width <= 0.5) {
        return Err(Failure::usage(anyhow::anyhow!("--bin-width must lie in (0, 0.5], got {bin_width}")));
    }
    let output = pipeline::analyze(results, out, bin_width).map_err(pipeline_failure)?;
    print!("{}", uqseg_core::analysis::report_csv(&output.rows));
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn cmd_serve(results: PathBuf, host: IpAddr, port: u16, decisions: Option<PathBuf>, ui: Option<PathBuf>) -> Result<(), Failure> {
    let decision_log = decisions.unwrap_or_else(|| results.join(uqseg_review::DEFAULT_DECISION_LOG));
    let config = ServeConfig {
        results_dir: results,
        decision_log,
        addr: SocketAddr::new(host, port),
        ui_dir: ui,
    };
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| Failure::data(anyhow::anyhow!("starting async runtime: {e}")))?;
    runtime.block_on(async {
        let server = Server::bind(&config).await.map_err(Failure::data)?;
        let addr = server
            .local_addr()
            .map_err(|e| Failure::data(anyhow::anyhow!("reading bound address: {e}")))?;
        println!("listening on http://{addr} ({} cases)", server.case_count());
        server
            .run(shutdown_signal())
            .await
            .map_err(|e| Failure::data(anyhow::anyhow!("serving: {e}")))?;
        println!("shut down");
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom {
            kind,
            count,
            seed,
            out,
            noise,
            blur,
            pixel_size,
        } => cmd_phantom(kind, count, seed, &out, noise, blur, pixel_size),
        Command::Run {
            dataset,
            method,
            samples,
            seed,
            config,
            out,
            workers,
        } => cmd_run(&dataset, method, samples, seed, config.as_deref(), &out, workers),
        Command::Analyze { results, bin_width, out } => cmd_analyze(&results, bin_width, &out),
        Command::Serve {
            results,
            port,
            host,
            decisions,
            ui,
        } => cmd_serve(results, host, port, decisions, ui),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            // messages already embed their causes
            eprintln!("error: {error}");
            ExitCode::from(code)
        }
    }
}
