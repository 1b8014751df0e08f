//! `dmae` command line: generate synthetic datasets, run clustering
//! experiments from TOML configs, verify gradients, and tabulate reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmae::data;
use dmae::gradcheck;
use dmae::pipeline::{self, ExperimentConfig, ExperimentOutcome, GridBounds};

mod output;

use output::{render_table, write_atomic};

#[derive(Parser)]
#[command(name = "dmae", version, about = "Dissimilarity mixture model clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV plus a metadata sidecar
    Generate(GenerateArgs),
    /// Run a multi-trial experiment from a TOML config
    Run(RunArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Tabulate ACC/NMI of one or more report JSON files
    Table(TableArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// pinwheel, toroidal, moons or circles
    dataset: String,
    /// Total sample count
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; metadata goes to the same stem with .meta.json
    #[arg(short, long)]
    out: PathBuf,
    /// Gaussian noise (moons, circles)
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Inner/outer radius ratio (circles)
    #[arg(long, default_value_t = 0.1)]
    radius_factor: f64,
    /// Blob standard deviation (toroidal)
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 4)]
    blobs: usize,
    #[arg(long, default_value_t = 5)]
    arms: usize,
    #[arg(long, default_value_t = 0.3)]
    radial_std: f64,
    #[arg(long, default_value_t = 0.05)]
    angular_std: f64,
    /// Spiral distortion rate (pinwheel)
    #[arg(long, default_value_t = 0.25)]
    rate: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment TOML
    config: PathBuf,
    /// Also export a decision-grid CSV at this per-axis resolution
    #[arg(long)]
    grid: Option<usize>,
    /// Run trials on this many threads
    #[arg(long, default_value_t = 1)]
    parallel_trials: usize,
    /// Output directory (default: $DMAE_OUT_DIR or ./runs)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// dissim, dmm, deepnet or all
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt the analytic gradients (test hook)
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct TableArgs {
    /// Report JSON files produced by `dmae run`
    reports: Vec<PathBuf>,
}

/// Failures that should surface as a usage/config problem (exit 2) rather
/// than a runtime one (exit 1).
fn is_usage_error(e: &dmae::Error) -> bool {
    matches!(
        e,
        dmae::Error::Config(_) | dmae::Error::InvalidParameter(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Run(args) => cmd_run(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Table(args) => cmd_table(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err
                .downcast_ref::<dmae::Error>()
                .map(is_usage_error)
                .unwrap_or(false);
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let ds = match args.dataset.as_str() {
        "pinwheel" => data::gen_pinwheel(
            args.n / args.arms.max(1),
            args.arms,
            args.radial_std,
            args.angular_std,
            args.rate,
            args.seed,
        )?,
        "toroidal" => data::gen_toroidal(
            args.n / args.blobs.max(1),
            args.blobs,
            args.sigma,
            args.seed,
        )?,
        "moons" => data::gen_moons(args.n, args.noise_std, args.seed)?,
        "circles" => data::gen_circles(args.n, args.noise_std, args.radius_factor, args.seed)?,
        other => {
            eprintln!("error: unknown dataset {other:?}");
            eprintln!("usage: dmae generate <pinwheel|toroidal|moons|circles> --n N --seed S -o FILE.csv");
            return Ok(ExitCode::from(2));
        }
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let meta = data::save_with_metadata(&ds, &args.out)?;
    println!(
        "wrote {} samples to {} (metadata: {})",
        ds.len(),
        args.out.display(),
        meta.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn out_dir_for(args_dir: Option<PathBuf>, name: &str) -> PathBuf {
    let base = args_dir
        .or_else(|| std::env::var_os("DMAE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(name)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let config = ExperimentConfig::from_path(&args.config)?;
    for warning in config.validate()? {
        eprintln!("warning: {warning}");
    }
    let dir = out_dir_for(args.out_dir, &config.display_name());
    std::fs::create_dir_all(&dir)?;

    let ExperimentOutcome { mut report, models } =
        pipeline::run_experiment_with(&config, args.parallel_trials.max(1))?;

    // checkpoints per completed trial
    for (trial, model) in report.trials.iter_mut().zip(models.iter()) {
        let Some(model) = model else { continue };
        let trial_dir = dir.join(format!("trial_{}", trial.seed));
        std::fs::create_dir_all(&trial_dir)?;
        let dmm_path = trial_dir.join("dmm.json");
        write_atomic(
            &dmm_path,
            serde_json::to_string_pretty(&model.dmm.to_checkpoint())?.as_bytes(),
        )?;
        let mut ck = pipeline::TrialCheckpoints {
            dmm: dmm_path.display().to_string(),
            encoder: None,
            decoder: None,
        };
        if let Some(encoder) = &model.encoder {
            let path = trial_dir.join("encoder.json");
            write_atomic(
                &path,
                serde_json::to_string_pretty(&encoder.to_checkpoint())?.as_bytes(),
            )?;
            ck.encoder = Some(path.display().to_string());
        }
        if let Some(decoder) = &model.decoder {
            let path = trial_dir.join("decoder.json");
            write_atomic(
                &path,
                serde_json::to_string_pretty(&decoder.to_checkpoint())?.as_bytes(),
            )?;
            ck.decoder = Some(path.display().to_string());
        }
        trial.checkpoints = Some(ck);
    }

    let report_path = dir.join("report.json");
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;

    if let Some(resolution) = args.grid {
        let dataset = config.dataset.build()?;
        let best = report
            .trials
            .iter()
            .zip(models.iter())
            .filter_map(|(t, m)| m.as_ref().map(|m| (t, m)))
            .max_by(|(a, _), (b, _)| {
                let av = a.acc.unwrap_or(f64::NEG_INFINITY);
                let bv = b.acc.unwrap_or(f64::NEG_INFINITY);
                av.total_cmp(&bv).then(b.seed.cmp(&a.seed))
            });
        if let Some((_, model)) = best {
            let bounds = GridBounds::from_data(dataset.x.view(), 0.05)?;
            let grid = pipeline::decision_grid(model, bounds, resolution)?;
            let mut csv = String::from("x,y,label,responsibility\n");
            for p in &grid {
                csv.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.label, p.responsibility));
            }
            write_atomic(&dir.join("grid.csv"), csv.as_bytes())?;
        } else {
            eprintln!("warning: no completed trial, skipping the decision grid");
        }
    }

    match (report.mean_acc, report.mean_nmi) {
        (Some(acc), Some(nmi)) => println!(
            "{}: ACC {:.3} +/- {:.3}, NMI {:.3} +/- {:.3} over {} trials ({} completed)",
            report.name,
            acc,
            report.std_acc.unwrap_or(0.0),
            nmi,
            report.std_nmi.unwrap_or(0.0),
            report.n_trials,
            report.completed_trials,
        ),
        _ => println!(
            "{}: {} of {} trials completed (no labels, metrics skipped)",
            report.name, report.completed_trials, report.n_trials
        ),
    }
    println!("report: {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let rows = match args.component.as_str() {
        "all" => {
            let mut rows = gradcheck::check_dissim(args.seed, args.inject_fault)?;
            rows.extend(gradcheck::check_dmm(args.seed, args.inject_fault)?);
            rows.extend(gradcheck::check_deepnet(args.seed, args.inject_fault)?);
            rows
        }
        component => gradcheck::check_component(component, args.seed, args.inject_fault)?,
    };
    let mut all_ok = true;
    println!("{:<40} {:>12} {:>9} result", "check", "rel_err", "tol");
    for row in &rows {
        let ok = row.passed();
        all_ok &= ok;
        println!(
            "{:<40} {:>12.3e} {:>9.0e} {}",
            row.name,
            row.rel_err,
            row.tol,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_table(args: TableArgs) -> anyhow::Result<ExitCode> {
    if args.reports.is_empty() {
        eprintln!("error: no report files given");
        return Ok(ExitCode::from(2));
    }
    let mut reports = Vec::new();
    for path in &args.reports {
        let report = read_report(path)?;
        reports.push(report);
    }
    print!("{}", render_table(&reports));
    Ok(ExitCode::SUCCESS)
}

fn read_report(path: &Path) -> anyhow::Result<pipeline::ExperimentReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("cannot parse {}: {e}", path.display()))?)
}
