//! Campaign runner: executes one fault-injection campaign over a benchmark
//! kernel and writes the report as JSON or CSV.

use clap::Parser;
use redthreads::Strength;
use redthreads_bench::harness::{
    run_campaign, write_report, CampaignConfig, InjectionKind, InjectionPlan, ReportFormat,
};
use redthreads_bench::kernels::build_kernel;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "redbench",
    about = "Run fault-injection campaigns over redundancy-protected benchmark kernels"
)]
struct Cli {
    /// Kernel to run: dgemm | spmv | cg | sscg | multigrid
    #[arg(long)]
    kernel: String,

    /// Problem size (kernel-specific; defaults per kernel)
    #[arg(long)]
    size: Option<usize>,

    /// Redundancy strength: off | detect | correct
    #[arg(long, default_value = "off")]
    strength: Strength,

    /// Enable the dynamic (event-driven) redundancy policy
    #[arg(long)]
    dynamic: bool,

    /// Defer detection-mode comparison to the detection thread
    #[arg(long)]
    lazy: bool,

    /// Cluster duplicate threads on dedicated cores at lowered priority
    #[arg(long)]
    cluster: bool,

    /// Cores per clustering island
    #[arg(long)]
    islands: Option<usize>,

    /// Injected events per run (expected value; may be fractional)
    #[arg(long, default_value_t = 0.0)]
    rate: f64,

    /// Injection kind: notify | corrupt
    #[arg(long, default_value = "notify")]
    kind: InjectionKind,

    /// Independent runs in the campaign
    #[arg(long, default_value_t = 1000)]
    runs: u32,

    /// Seed for injection schedules
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Report path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Report format: json | csv
    #[arg(long, default_value = "json")]
    format: ReportFormat,

    /// Matrix Market file for the spmv/cg kernels
    #[arg(long)]
    matrix: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if cli.rate < 0.0 {
        eprintln!("error: --rate must be nonnegative");
        return ExitCode::from(2);
    }

    let kernel = match build_kernel(&cli.kernel, cli.size, cli.matrix.as_deref(), cli.seed) {
        Ok(k) => k,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let mut cfg = CampaignConfig::new(
        cli.strength,
        InjectionPlan::new(cli.seed, cli.rate, cli.kind),
        cli.runs,
    );
    cfg.dynamic = cli.dynamic;
    cfg.lazy = cli.lazy;
    cfg.cluster = cli.cluster;
    cfg.island_size = cli.islands;

    let report = run_campaign(kernel.as_ref(), &cfg);
    eprintln!(
        "{}: {} runs, mean normalized time {:.4}, failure rate {:.4}, {} detections, {} corrections",
        report.kernel,
        report.n_runs,
        report.aggregates.mean_normalized_time,
        report.aggregates.failure_rate,
        report.aggregates.total_detections,
        report.aggregates.total_corrections,
    );
    if let Err(e) = write_report(&report, cli.format, cli.out.as_deref()) {
        eprintln!("error: failed to write report: {e}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
