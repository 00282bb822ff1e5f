mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hotspot_core::eval::{
    ablate, ablation_text, evaluate, standard_subsets, write_ablation_csv, write_cdf_csv,
    write_detection_csv, write_summary_csv,
};
use hotspot_core::kpi::{read_kpis, write_kpis};
use hotspot_core::localizer::{localize, read_weights_column, smooth};
use hotspot_core::radio::{read_radio_csv, RadioMap};
use hotspot_core::traffic::{run_simulation, GroundTruth};

use config::RunConfig;

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flags or input file contents.
    #[error("{0}")]
    Validation(String),
    /// Anything the environment caused: missing files, I/O failures.
    #[error("{0}")]
    Runtime(String),
}

impl From<hotspot_core::Error> for CliError {
    fn from(e: hotspot_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hotspot",
    version,
    about = "Traffic hotspot localization from per-cell KPIs"
)]
struct Cli {
    /// TOML run configuration; the bundled desk-scale scenario if omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `paths.out_dir`
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the radio map and simulate traffic; writes KPI, truth and radio-map files
    Simulate,
    /// Estimate the traffic map from the KPI and radio-map files
    Localize(FusionFlags),
    /// Score the weight-map file against the truth file
    Evaluate(FusionFlags),
    /// Simulate once, then localize and score every standard KPI subset
    Ablate(FusionFlags),
    /// Print the bundled default configuration
    DefaultConfig,
}

#[derive(Args)]
struct FusionFlags {
    /// Overrides `fusion.alpha`: five comma-separated coefficients
    /// (TA, AoA, NB, LOAD, THR)
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,

    /// Overrides `fusion.lambda_m`
    #[arg(long)]
    lambda: Option<f64>,
}

impl FusionFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(a) = &self.alpha {
            cfg.fusion.alpha = a.as_slice().try_into().map_err(|_| {
                CliError::Validation(format!(
                    "--alpha takes 5 comma-separated values, got {}",
                    a.len()
                ))
            })?;
        }
        if let Some(l) = self.lambda {
            cfg.fusion.lambda_m = l;
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes are validation failures.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", config::DEFAULT_CONFIG);
        return Ok(());
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.paths.out_dir = d;
    }
    match &cli.command {
        Command::Localize(f) | Command::Evaluate(f) | Command::Ablate(f) => f.apply(&mut cfg)?,
        _ => {}
    }
    cfg.validate()?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Localize(_) => cmd_localize(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::DefaultConfig => unreachable!(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(path, e))
}

/// Writes through `f` into `path`, creating parent directories.
fn write_file<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), Box<dyn std::error::Error>>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    f(&mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let radio = cfg.radio_map()?;
    let scenario = cfg.scenario(&radio)?;
    let out = run_simulation(&scenario, &radio)?;
    let p = &cfg.paths;
    write_file(&p.radio_map(), |w| Ok(radio.write_csv(w)?))?;
    write_file(&p.kpis(), |w| Ok(write_kpis(&out.kpis, w)?))?;
    write_file(&p.truth(), |w| Ok(out.truth.write_csv(w)?))?;
    println!(
        "simulated {} cells x {} periods: {} sessions ({} blocked, {} handovers), seed {}",
        radio.n_cells(),
        scenario.n_periods,
        out.stats.sessions,
        out.stats.blocked,
        out.stats.handovers,
        cfg.seed
    );
    Ok(())
}

/// Rebuilds the radio map from the configuration and checks it against
/// the radio-map file so that KPIs are never projected on a different
/// network than the one that produced them.
fn load_radio(cfg: &RunConfig) -> Result<RadioMap, CliError> {
    let radio = cfg.radio_map()?;
    let path = cfg.paths.radio_map();
    let rows = read_radio_csv(open(&path)?, &path.display().to_string())?;
    radio
        .check_rows(&rows)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(radio)
}

fn load_kpis(
    cfg: &RunConfig,
    radio: &RadioMap,
) -> Result<Vec<hotspot_core::kpi::KpiRecord>, CliError> {
    let path = cfg.paths.kpis();
    Ok(read_kpis(
        open(&path)?,
        &path.display().to_string(),
        Some(&radio.cell_ids()),
    )?)
}

fn load_truth(
    cfg: &RunConfig,
    grid: hotspot_core::geometry::PixelGrid,
) -> Result<GroundTruth, CliError> {
    let path = cfg.paths.truth();
    Ok(GroundTruth::read_csv(
        open(&path)?,
        &path.display().to_string(),
        grid,
    )?)
}

fn cmd_localize(cfg: &RunConfig) -> Result<(), CliError> {
    let radio = load_radio(cfg)?;
    let kpis = load_kpis(cfg, &radio)?;
    let loc = localize(&kpis, &radio, &cfg.fusion)?;
    let path = cfg.paths.weights();
    write_file(&path, |w| Ok(loc.write_csv(w)?))?;
    let d = loc.diagnostics;
    println!(
        "localized {} records on {} pixels -> {} (unplaced mass: TA {:.3}, AoA {:.3}, NB {:.3} sessions)",
        kpis.len(),
        radio.grid().len(),
        path.display(),
        d.ta_unplaced,
        d.aoa_unplaced,
        d.neighbor_unplaced
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let truth = load_truth(cfg, grid)?;
    let wpath = cfg.paths.weights();
    let name = wpath.display().to_string();
    let est = read_weights_column(open(&wpath)?, &name, grid, "smoothed")?;
    let w1 = read_weights_column(open(&wpath)?, &name, grid, "w1")?;
    let ta_only = smooth(&w1.normalized(), cfg.fusion.lambda_m);
    let report = evaluate(
        &est,
        &ta_only,
        &truth,
        &cfg.evaluation.thresholds,
        cfg.evaluation.cdf_kind.into(),
    )?;
    let p = &cfg.paths;
    let text = report.to_text();
    write_file(&p.report(), |w| Ok(w.write_all(text.as_bytes())?))?;
    write_file(&p.eval_table("detection_access.csv"), |w| {
        Ok(write_detection_csv(&report.detection_access, w)?)
    })?;
    write_file(&p.eval_table("detection_elapsed.csv"), |w| {
        Ok(write_detection_csv(&report.detection_elapsed, w)?)
    })?;
    write_file(&p.eval_table("cdf_real_access.csv"), |w| {
        Ok(write_cdf_csv(&report.cdf_real_access, w)?)
    })?;
    write_file(&p.eval_table("cdf_real_elapsed.csv"), |w| {
        Ok(write_cdf_csv(&report.cdf_real_elapsed, w)?)
    })?;
    write_file(&p.eval_table("cdf_est.csv"), |w| {
        Ok(write_cdf_csv(&report.cdf_est, w)?)
    })?;
    write_file(&p.eval_table("summary.csv"), |w| {
        Ok(write_summary_csv(&report, w)?)
    })?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let radio = cfg.radio_map()?;
    let scenario = cfg.scenario(&radio)?;
    let out = run_simulation(&scenario, &radio)?;
    let rows = ablate(
        &out.kpis,
        &radio,
        &out.truth,
        &cfg.fusion,
        &standard_subsets(),
    )?;
    write_file(&cfg.paths.ablation(), |w| Ok(write_ablation_csv(&rows, w)?))?;
    print!("{}", ablation_text(&rows));
    Ok(())
}
