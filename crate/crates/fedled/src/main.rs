//! Command-line front end: run one training method, sweep a generator
//! knob, or audit a recorded transcript.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedled::harness::{
    load_config, prepare_data, run_experiment, run_sweep, Method, SweepAxis, TransportChoice,
};
use fedled::protocol::{privacy_audit, AuditContext, Transcript};
use fedled::{FedError, Result};

#[derive(Parser)]
#[command(
    name = "fedled",
    version,
    about = "Federated transfer diagnosis across heterogeneous feature spaces"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one method and report target accuracy.
    Run {
        /// Experiment config, .toml or .json.
        #[arg(long)]
        config: PathBuf,
        /// fedled, baseline, abl1_align_only, or abl2_adversarial_only.
        #[arg(long, default_value = "fedled")]
        method: String,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// How the three parties exchange messages.
        #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
        transport: TransportArg,
        /// Coordinator listen address for --transport tcp. Port 0 picks
        /// a free port.
        #[arg(long, default_value = "127.0.0.1:0")]
        server_addr: String,
        /// Where the source agent dials, if not the listen address.
        #[arg(long)]
        source_addr: Option<String>,
        /// Where the target agent dials, if not the listen address.
        #[arg(long)]
        target_addr: Option<String>,
        /// Directory for report.json, trend.csv, transcript, checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun methods across an overlap grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// feature_overlap or sample_overlap.
        #[arg(long)]
        axis: String,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', default_value = "fedled,baseline")]
        methods: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a recorded transcript for privacy violations.
    Audit {
        /// transcript.jsonl from an earlier run.
        #[arg(long)]
        transcript: PathBuf,
        /// The run's config; enables the raw-width and raw-row checks.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn cmd_run(
    config: PathBuf,
    method: String,
    seed: Option<u64>,
    transport: TransportArg,
    server_addr: String,
    source_addr: Option<String>,
    target_addr: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let method = Method::parse(&method)?;
    let choice = match transport {
        TransportArg::Inproc => TransportChoice::InProc,
        TransportArg::Tcp => TransportChoice::Tcp {
            listen: server_addr,
            source_dial: source_addr,
            target_dial: target_addr,
        },
    };
    let report = run_experiment(&cfg, method, &choice, out.as_deref())?;
    println!(
        "method={} seed={} epochs={} final_accuracy={:.2} best_accuracy={:.2}",
        report.method.name(),
        report.seed,
        report.epochs,
        report.final_accuracy,
        report.best_accuracy
    );
    if let Some(h) = &report.transcript_hash {
        println!("transcript_hash={h}");
    }
    if let Some(a) = &report.audit {
        println!(
            "audit={} violations={} warnings={}",
            if a.passed { "passed" } else { "FAILED" },
            a.violations.len(),
            a.warnings.len()
        );
    }
    if let Some(zf) = report.zero_fill_fraction {
        println!("zero_fill_fraction={zf:.3}");
    }
    if let Some(dir) = &out {
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(
    config: PathBuf,
    axis: String,
    methods: Vec<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let axis = SweepAxis::parse(&axis)?;
    let methods: Vec<Method> = methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_>>()?;
    let points = run_sweep(&cfg, axis, &methods, out.as_deref())?;
    println!("axis={} seed={}", axis.name(), cfg.seed);
    for p in &points {
        println!(
            "  {}={:<6} method={:<22} final={:.2} best={:.2}",
            axis.name(),
            p.axis_value,
            p.method.name(),
            p.final_accuracy,
            p.best_accuracy
        );
    }
    if let Some(dir) = &out {
        println!("sweep table written to {}", dir.display());
    }
    Ok(())
}

fn cmd_audit(transcript: PathBuf, config: Option<PathBuf>) -> Result<()> {
    let t = Transcript::read_jsonl(&transcript)?;
    let ctx = match &config {
        Some(path) => {
            let cfg = load_config(path)?;
            let data = prepare_data(&cfg)?;
            Some(AuditContext::from_datasets(
                cfg.net.latent_dim,
                &[&data.source_raw, &data.target_raw],
            ))
        }
        None => None,
    };
    let report = privacy_audit(&t, ctx.as_ref());
    println!(
        "entries={} violations={} warnings={}",
        t.entries.len(),
        report.violations.len(),
        report.warnings.len()
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for v in &report.violations {
        println!("violation at seq {}: [{}] {}", v.seq, v.rule, v.detail);
    }
    if report.passed {
        println!("audit passed");
        Ok(())
    } else {
        Err(FedError::Audit(format!(
            "{} violation(s) found",
            report.violations.len()
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            method,
            seed,
            transport,
            server_addr,
            source_addr,
            target_addr,
            out,
        } => cmd_run(
            config,
            method,
            seed,
            transport,
            server_addr,
            source_addr,
            target_addr,
            out,
        ),
        Cmd::Sweep { config, axis, methods, out } => cmd_sweep(config, axis, methods, out),
        Cmd::Audit { transcript, config } => cmd_audit(transcript, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
