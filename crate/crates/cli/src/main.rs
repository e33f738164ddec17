use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gdi_core::config::{Mode, RunConfig};
use gdi_core::metrics::{load_score_table, score_report, write_report_csv, Bundled};
use gdi_core::orchestrator::{ablate, run, RunSummary};
use gdi_core::theory::{faulty_coupling, run_suite, uttc_coupling, SuiteSizes};
use gdi_core::GdiError;

#[derive(Parser)]
#[command(name = "gdi", version, about = "Behavior-policy search with bandit meta-control on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write training_log.csv, losses.csv and summary.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "GDI_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gdi_i3, gdi_i1 and fixed_lambda over the config's seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace the config's seed list with 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized theory checks and write theory.json.
    VerifyTheory {
        #[arg(long, env = "GDI_SEED", default_value_t = 0)]
        seed: u64,
        /// Swap in a coupling that ignores the order of g; the run must then fail.
        #[arg(long)]
        inject_faulty_coupling: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized scores for one score table.
    Metrics {
        #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
        scores: Option<PathBuf>,
        #[arg(long, value_enum)]
        bundled: Option<BundledTable>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the summaries of several training runs into one table.
    Report {
        #[arg(long = "run", num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BundledTable {
    GdiI3,
    GdiH3,
}

#[derive(Debug)]
enum Failure {
    /// Bad input or a failed check.
    Invalid(String),
    /// The command could not finish.
    Runtime(String),
}

impl From<GdiError> for Failure {
    fn from(e: GdiError) -> Self {
        match e {
            GdiError::Io(_) => Failure::Runtime(e.to_string()),
            GdiError::Json(_) => Failure::Invalid(e.to_string()),
            GdiError::NonFinite(_) | GdiError::NoSnapshot => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            GdiError::Io(io) => Failure::Runtime(format!("{}: {io}", p.display())),
            other => Failure::Invalid(format!("{}: {other}", p.display())),
        }),
        None => Ok(RunConfig::default()),
    }
}

fn train(config: Option<&Path>, seed: Option<u64>, mode: Option<&str>, out: &Path) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    fs::create_dir_all(out)?;
    let log = run(&cfg)?;
    log.write_csv(create(out, "training_log.csv")?)?;
    log.write_losses_csv(create(out, "losses.csv")?)?;
    let summary = log.summary();
    write_json(out, "summary.json", &summary)?;
    println!(
        "{}: {} episodes, final mean return {}, coverage {:.3}",
        summary.mode,
        summary.episodes,
        summary.final_mean_return.map_or("NA".to_string(), |r| format!("{r:.3}")),
        summary.coverage
    );
    Ok(())
}

fn ablation(config: Option<&Path>, seeds: Option<u64>, out: &Path) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(n) = seeds {
        cfg.seeds = (0..n).collect();
    }
    fs::create_dir_all(out)?;
    let ab = ablate(&cfg)?;
    ab.write_groups_csv(create(out, "ablation.csv")?)?;
    ab.write_runs_csv(create(out, "ablation_runs.csv")?)?;
    write_json(out, "ablation.json", &ab)?;
    for g in &ab.groups {
        let norm = g.normalized_return.map_or("NA".to_string(), |r| format!("{r:.3}"));
        println!("{:<13} return {:.3} (x{norm})  coverage {:.3}", g.mode, g.mean_final_return, g.median_coverage);
    }
    Ok(())
}

fn verify_theory(seed: u64, faulty: bool, out: &Path) -> CmdResult {
    fs::create_dir_all(out)?;
    let build = if faulty { faulty_coupling } else { uttc_coupling };
    let report = run_suite(seed, &SuiteSizes::default(), build)?;
    write_json(out, "theory.json", &report)?;
    println!(
        "couplings {}: max residual {:.3e}, max violating mass {:.3e}",
        report.couplings, report.max_marginal_residual, report.max_violating_mass
    );
    println!("tilt {}: {} violations, min gap {:.3e}", report.tilt_instances, report.tilt_violations, report.min_tilt_gap);
    println!(
        "superior target {}: {} violations, min gap {:.3e}",
        report.superior_instances, report.superior_violations, report.min_superior_gap
    );
    println!("performance difference {}: max residual {:.3e}", report.perf_diff_instances, report.max_perf_diff_residual);
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Invalid("theory checks failed".into()))
    }
}

fn metrics(scores: Option<&Path>, bundled: Option<BundledTable>, out: &Path) -> CmdResult {
    let table = match (scores, bundled) {
        (Some(p), _) => load_score_table(p).map_err(|e| match e {
            GdiError::Io(io) => Failure::Runtime(format!("{}: {io}", p.display())),
            other => Failure::Invalid(format!("{}: {other}", p.display())),
        })?,
        (None, Some(BundledTable::GdiI3)) => Bundled::GdiI3.table(),
        (None, Some(BundledTable::GdiH3)) => Bundled::GdiH3.table(),
        (None, None) => return Err(Failure::Invalid("need --scores or --bundled".into())),
    };
    fs::create_dir_all(out)?;
    let report = score_report(&table)?;
    write_report_csv(&report, create(out, "metrics.csv")?)?;
    write_json(out, "metrics_summary.json", &report.summary)?;
    let s = report.summary;
    println!(
        "{} games: mean HNS {:.2}, median HNS {:.2}, mean HWRNS {:.2}, median SABER {:.2}, HWRB {}",
        s.games, s.mean_hns, s.median_hns, s.mean_hwrns, s.median_saber, s.hwrb
    );
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> CmdResult {
    if runs.is_empty() {
        return Err(Failure::Invalid("report needs at least one --run directory".into()));
    }
    let mut summaries = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        let s: RunSummary =
            serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
        summaries.push((dir, s));
    }
    fs::create_dir_all(out)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let mut w = csv::Writer::from_writer(create(out, "report.csv")?);
    w.write_record([
        "run", "mode", "seed", "frames", "episodes", "final_mean_return", "mean_return", "coverage", "updates",
        "param_version",
    ])?;
    for (dir, s) in &summaries {
        w.write_record([
            dir.display().to_string(),
            s.mode.to_string(),
            s.seed.to_string(),
            s.frames.to_string(),
            s.episodes.to_string(),
            opt(s.final_mean_return),
            opt(s.mean_return),
            s.coverage.to_string(),
            s.updates.to_string(),
            s.param_version.to_string(),
        ])?;
    }
    w.flush()?;
    let merged: Vec<&RunSummary> = summaries.iter().map(|(_, s)| s).collect();
    write_json(out, "report.json", &merged)?;
    println!("merged {} runs", merged.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { config, seed, mode, out } => train(config.as_deref(), *seed, mode.as_deref(), out),
        Command::Ablate { config, seeds, out } => ablation(config.as_deref(), *seeds, out),
        Command::VerifyTheory { seed, inject_faulty_coupling, out } => verify_theory(*seed, *inject_faulty_coupling, out),
        Command::Metrics { scores, bundled, out } => metrics(scores.as_deref(), *bundled, out),
        Command::Report { runs, out } => report(runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
