use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use edgeflip::metrics::{csv_row, csv_summary_rows, evaluate, report_text, CSV_HEADER};
use edgeflip::perception::{adapt, load_dataset, write_regressor, DEFAULT_LAMBDA};
use edgeflip::pipeline::{ablation_csv, run_ablation, run_scenario, RunOptions};
use edgeflip::runtime::{parse_trace, write_trace};
use edgeflip::scenario::{load_scenario, load_suite};

/// Desk-scale simulator for perception-guided pivot flipping of flat parts.
#[derive(Parser)]
#[command(name = "edgeflip", version)]
struct Cli {
    /// Directory for traces, reports and tables (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Seed overriding the scenario or suite seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario end to end and write `<name>.trace`, `<name>.report`
    /// and `<name>.csv`. Exit status 0 on task success, 2 on task failure.
    Run {
        /// Scenario file.
        scenario: PathBuf,
    },
    /// Fit the anchor head on `n` randomly drawn annotated samples, score it
    /// on the rest and write the weights.
    Adapt {
        /// Annotation file (`mask_path target_x_px target_y_px cls` lines).
        annotations: PathBuf,
        /// Number of training samples.
        n: usize,
        /// Output path for the fitted weights.
        out: PathBuf,
        /// Ridge regularization.
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Run the Sync / GlobalCentroid / Direct / Full grid over a suite and
    /// write `ablation.csv` and `ablation_episodes.csv`.
    Ablate {
        /// Suite file listing `scenario [seed ...]` lines.
        suite: PathBuf,
    },
    /// Recompute metrics from trace files and print per-episode rows plus
    /// mean and sd rows as CSV.
    Report {
        /// Trace files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

enum Outcome {
    Done,
    TaskFailed,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(&cli.out_dir)
}

fn run(cli: &Cli, scenario: &Path) -> Result<Outcome> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let o = run_scenario(&cfg, &RunOptions::default()).with_context(|| format!("running {}", scenario.display()))?;
    let dir = out_dir(cli)?;
    let text = report_text(&o.report);
    write(&dir.join(format!("{}.trace", cfg.name)), &write_trace(&o.trace))?;
    write(&dir.join(format!("{}.report", cfg.name)), &text)?;
    write(&dir.join(format!("{}.csv", cfg.name)), &format!("{CSV_HEADER}\n{}\n", csv_row(&cfg.name, &o.report)))?;
    if !cli.quiet {
        print!("scenario={}\nseed={}\nprimitive={}\n{text}", cfg.name, cfg.seed, o.primitive.as_str());
    }
    Ok(if o.report.success { Outcome::Done } else { Outcome::TaskFailed })
}

fn adapt_cmd(cli: &Cli, annotations: &Path, n: usize, out: &Path, lambda: f64) -> Result<Outcome> {
    let data = load_dataset(annotations)?;
    let (reg, r) = adapt(&data, n, cli.seed.unwrap_or(0), lambda)?;
    write(out, &write_regressor(&reg))?;
    if !cli.quiet {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!("n={}", r.n);
        println!("held_out={}", r.held_out);
        println!("pixel_error_px={}", opt(r.pixel_error));
        println!("class_accuracy={}", opt(r.accuracy));
        println!("fit_time_s={:.6}", r.fit_s);
    }
    Ok(Outcome::Done)
}

fn ablate(cli: &Cli, suite: &Path) -> Result<Outcome> {
    let mut entries = load_suite(suite)?;
    if let Some(s) = cli.seed {
        for e in &mut entries {
            e.seeds = vec![s];
        }
    }
    let rows = run_ablation(&entries, &RunOptions::default())?;
    let dir = out_dir(cli)?;
    let table = ablation_csv(&rows);
    let mut cells = format!("row,seed,{CSV_HEADER},error\n");
    for r in &rows {
        for c in &r.cells {
            let body = match &c.result {
                Ok(rep) => format!("{},", csv_row(&c.scenario, rep)),
                Err(e) => format!("{}{},{}", c.scenario, ",".repeat(CSV_HEADER.matches(',').count()), e.replace(',', ";")),
            };
            cells.push_str(&format!("{},{},{body}\n", r.ablation.as_str(), c.seed));
        }
    }
    write(&dir.join("ablation.csv"), &table)?;
    write(&dir.join("ablation_episodes.csv"), &cells)?;
    if !cli.quiet {
        print!("{table}");
    }
    Ok(Outcome::Done)
}

fn report(cli: &Cli, traces: &[PathBuf]) -> Result<Outcome> {
    let mut out = format!("{CSV_HEADER}\n");
    let mut reports = Vec::new();
    for p in traces {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let tr = parse_trace(&text).with_context(|| format!("parsing {}", p.display()))?;
        let r = evaluate(&tr).with_context(|| format!("scoring {}", p.display()))?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        out.push_str(&csv_row(&name, &r));
        out.push('\n');
        reports.push(r);
    }
    out.push_str(&csv_summary_rows(&reports));
    if !cli.quiet {
        print!("{out}");
    }
    if cli.out_dir != Path::new(".") {
        write(&out_dir(cli)?.join("report.csv"), &out)?;
    }
    Ok(Outcome::Done)
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.cmd {
        Cmd::Run { scenario } => run(cli, scenario),
        Cmd::Adapt { annotations, n, out, lambda } => {
            if !(lambda.is_finite() && *lambda >= 0.0) {
                bail!("--lambda must be finite and non-negative");
            }
            adapt_cmd(cli, annotations, *n, out, *lambda)
        }
        Cmd::Ablate { suite } => ablate(cli, suite),
        Cmd::Report { traces } => report(cli, traces),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::TaskFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
