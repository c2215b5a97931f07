//! `drift-search`: run missions, fit flows to recorded drifters, export
//! plot-ready artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};

use drift_search::fitting::{pso_fit_with_basis, quasi_steady_schedule, FitTemplate};
use drift_search::geometry::ScalarField;
use drift_search::io::{
    read_drifter_csv, read_snapshot, write_matrix_csv, write_snapshot, SnapshotHeader,
};
use drift_search::lagrangian::sanitize_observations;
use drift_search::mission::{Mission, MissionConfig};
use drift_search::surrogate::SurrogateModel;

const LOCK_NAME: &str = ".drift-search.lock";

#[derive(Parser)]
#[command(
    name = "drift-search",
    version,
    about = "Drift-aware multi-UAV maritime search simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a mission and write its log directory.
    Simulate(RunArgs),
    /// Run a mission driven by a recorded drifter CSV.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        /// Drifter CSV; overrides `drifters.csv` in the config.
        #[arg(long)]
        drifters: Option<PathBuf>,
    },
    /// Fit one flow per update window to a drifter CSV.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// Drifter CSV; overrides `drifters.csv` in the config.
        #[arg(long)]
        drifters: Option<PathBuf>,
    },
    /// Convert a log directory into plot-ready files.
    Export {
        /// Log directory written by simulate, replay or fit.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Destination directory; defaults to `<log>/export`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; the built-in replica scenario when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Wall-clock budget per flow fit, s.
    #[arg(long)]
    budget_seconds: Option<f64>,
    /// Fixed PSO iteration count per fit; reproducible regardless of speed.
    #[arg(long)]
    deterministic_iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Field,
    Tracks,
    Metrics,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

/// A problem with what the user supplied; exit status 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn is_input(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<InputError>()
            || c.downcast_ref::<drift_search::Error>()
                .is_some_and(drift_search::Error::is_input_error)
    })
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "output directory {} is in use (remove {} if no other run is active)",
                    dir.display(),
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(OutputLock(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Loads the scenario and applies command-line overrides. Returns the
/// directory relative drifter paths resolve against.
fn load_config(args: &RunArgs) -> anyhow::Result<(MissionConfig, Option<PathBuf>)> {
    let (mut cfg, base) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| input(format!("cannot read config {}: {e}", path.display())))?;
            let cfg = MissionConfig::from_toml_str(&text)
                .with_context(|| format!("in {}", path.display()))?;
            (cfg, path.parent().map(Path::to_path_buf))
        }
        None => (MissionConfig::default(), None),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let pso = &mut cfg.flow.pso;
    match (args.budget_seconds, args.deterministic_iters) {
        (None, None) => {}
        (budget, iters) => {
            pso.time_budget = budget;
            pso.max_iterations = iters;
        }
    }
    Ok((cfg, base))
}

fn with_drifters(cfg: &mut MissionConfig, drifters: Option<&Path>) -> anyhow::Result<()> {
    if let Some(p) = drifters {
        cfg.drifters.csv = Some(std::path::absolute(p)?);
    }
    if cfg.drifters.csv.is_none() {
        bail!(input(
            "no drifter CSV: pass --drifters or set drifters.csv in the config"
        ));
    }
    Ok(())
}

fn run(cfg: &MissionConfig, base: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mission = Mission::prepare(cfg, base)?;
    let _lock = OutputLock::acquire(out)?;
    log::info!(
        "mission prepared: {} drifter reports",
        mission.observations().len()
    );
    let outcome = mission.run();
    outcome
        .log
        .write_dir(out)
        .with_context(|| format!("cannot write log to {}", out.display()))?;
    log::info!(
        "mission finished in {:.1} s, log in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    match outcome.error {
        Some(e) => Err(anyhow::Error::from(e)
            .context(format!("mission aborted; partial log in {}", out.display()))),
        None => Ok(()),
    }
}

fn cmd_fit(cfg: &MissionConfig, base: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    cfg.validate(base)?;
    let grid = cfg.grid()?;
    let path = cfg.drifter_path(base).expect("drifter path checked");
    let stream = sanitize_observations(read_drifter_csv(&path, &cfg.projection(), cfg.epoch()?)?)?;
    let spec = cfg.boundary_spec(&grid);
    let basis = SurrogateModel::new(spec.clone(), Arc::clone(&grid))?.basis()?;
    let mut pso = cfg.flow.pso.clone();
    pso.seed = pso.seed.wrapping_add(cfg.seed);
    let template = FitTemplate {
        spec,
        grid: Arc::clone(&grid),
        bounds: (cfg.flow.bounds[0], cfg.flow.bounds[1]),
        pso,
        reduction: cfg.flow.reduction,
    };
    let windows = quasi_steady_schedule(&stream, cfg.flow.update_interval, &template, None, None)?;
    let _lock = OutputLock::acquire(out)?;
    let snaps = out.join("snapshots");
    fs::create_dir_all(&snaps)?;

    let mut rows = csv::Writer::from_path(out.join("fit.csv"))?;
    rows.write_record([
        "window",
        "start",
        "end",
        "observations",
        "carried_over",
        "e_d_best",
        "e_d_zero",
        "iterations",
        "evaluations",
    ])?;
    let mut history = csv::Writer::from_path(out.join("e_d_history.csv"))?;
    history.write_record(["window", "iteration", "e_d"])?;
    let mut vectors = csv::Writer::from_path(out.join("fit_vectors.csv"))?;
    let mut head = vec!["window".to_string()];
    head.extend((0..basis.dim()).map(|k| format!("b_{k}")));
    vectors.write_record(&head)?;
    let mut timings = csv::Writer::from_path(out.join("timings.csv"))?;
    timings.write_record(["window", "wall_clock_s", "evaluations"])?;

    let mut warm: Option<Vec<f64>> = None;
    for w in &windows {
        let Some(problem) = &w.problem else {
            rows.write_record([
                &w.index.to_string(),
                &w.start.to_string(),
                &w.end.to_string(),
                "0",
                "true",
                "",
                "",
                "0",
                "0",
            ])?;
            continue;
        };
        let mut problem = problem.clone();
        problem.warm_start = warm.take();
        let fit = pso_fit_with_basis(&problem, &basis)?;
        log::info!(
            "window {}: E_d {:.4} m/s (still water {:.4}) after {} iterations",
            w.index,
            fit.e_d_best,
            fit.e_d_zero,
            fit.iterations
        );
        rows.write_record([
            w.index.to_string(),
            w.start.to_string(),
            w.end.to_string(),
            problem.observations.len().to_string(),
            "false".into(),
            fit.e_d_best.to_string(),
            fit.e_d_zero.to_string(),
            fit.iterations.to_string(),
            fit.evaluations.to_string(),
        ])?;
        for (it, e) in fit.e_d_history.iter().enumerate() {
            history.write_record([w.index.to_string(), it.to_string(), e.to_string()])?;
        }
        let mut rec = vec![w.index.to_string()];
        rec.extend(fit.best.values.iter().map(|v| v.to_string()));
        vectors.write_record(&rec)?;
        timings.write_record([
            w.index.to_string(),
            fit.wall_clock.as_secs_f64().to_string(),
            fit.evaluations.to_string(),
        ])?;

        let flow = basis.flow(&fit.best.values)?;
        for (name, pick) in [("flow_u", 0usize), ("flow_v", 1)] {
            let vals: Vec<f64> = flow
                .fused
                .values()
                .iter()
                .map(|v| if pick == 0 { v.x } else { v.y })
                .collect();
            let field = ScalarField::from_values(Arc::clone(&grid), vals)?;
            let header = SnapshotHeader::for_field(name, &field, w.start);
            write_snapshot(
                &snaps,
                &format!("{name}_{:03}", w.index),
                &header,
                field.values(),
            )?;
        }
        warm = Some(fit.best.values);
    }
    for w in [&mut rows, &mut history, &mut vectors, &mut timings] {
        w.flush()?;
    }
    Ok(())
}

/// Numeric CSV table → row-major f64 grid with a column sidecar. Blank
/// cells become NaN, booleans 0/1.
fn table_to_bin(src: &Path, dir: &Path) -> anyhow::Result<()> {
    let mut r =
        csv::Reader::from_path(src).with_context(|| format!("cannot read {}", src.display()))?;
    let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (line, rec) in r.records().enumerate() {
        for (cell, col) in rec?.iter().zip(&columns) {
            let v = match cell {
                "" => f64::NAN,
                "true" => 1.0,
                "false" => 0.0,
                s => s.parse().map_err(|_| {
                    input(format!(
                        "{} row {}: column {col} is not numeric ({s})",
                        src.display(),
                        line + 1
                    ))
                })?,
            };
            data.push(v);
        }
        rows += 1;
    }
    let stem = src
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let mut f = File::create(dir.join(format!("{stem}.bin")))?;
    for v in &data {
        f.write_all(&v.to_le_bytes())?;
    }
    fs::write(
        dir.join(format!("{stem}.hdr")),
        format!(
            "name = {stem}\nrows = {rows}\ncolumns = {}\n",
            columns.join(",")
        ),
    )?;
    Ok(())
}

fn cmd_export(log_dir: &Path, what: What, format: Format, out: &Path) -> anyhow::Result<()> {
    if !log_dir.is_dir() {
        bail!(input(format!(
            "log directory {} does not exist",
            log_dir.display()
        )));
    }
    let _lock = OutputLock::acquire(out)?;
    let mut written = 0;
    match what {
        What::Field => {
            let snaps = log_dir.join("snapshots");
            let mut bins: Vec<PathBuf> = fs::read_dir(&snaps)
                .map_err(|e| input(format!("no snapshots in {}: {e}", snaps.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            bins.sort();
            for bin in bins {
                let (header, values) = read_snapshot(&bin)?;
                let stem = bin
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                match format {
                    Format::Csv => {
                        write_matrix_csv(&out.join(format!("{stem}.csv")), &header, &values)?
                    }
                    Format::Bin => {
                        write_snapshot(out, &stem, &header, &values)?;
                    }
                }
                written += 1;
            }
        }
        What::Tracks | What::Metrics => {
            let names: &[&str] = match what {
                What::Tracks => &["uav_tracks.csv", "drifter_tracks.csv", "detections.csv"],
                _ => &[
                    "metrics.csv",
                    "windows.csv",
                    "targets.csv",
                    "fit.csv",
                    "e_d_history.csv",
                ],
            };
            for name in names {
                let src = log_dir.join(name);
                if !src.is_file() {
                    continue;
                }
                match format {
                    Format::Csv => {
                        fs::copy(&src, out.join(name))?;
                    }
                    // drifter ids are free text
                    Format::Bin if *name == "drifter_tracks.csv" => continue,
                    Format::Bin => table_to_bin(&src, out)?,
                }
                written += 1;
            }
        }
    }
    if written == 0 {
        bail!(input(format!(
            "nothing to export from {}",
            log_dir.display()
        )));
    }
    log::info!("exported {written} file(s) to {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (cfg, base) = load_config(&args)?;
            run(&cfg, base.as_deref(), &args.out)
        }
        Command::Replay {
            run: args,
            drifters,
        } => {
            let (mut cfg, base) = load_config(&args)?;
            with_drifters(&mut cfg, drifters.as_deref())?;
            run(&cfg, base.as_deref(), &args.out)
        }
        Command::Fit {
            run: args,
            drifters,
        } => {
            let (mut cfg, base) = load_config(&args)?;
            with_drifters(&mut cfg, drifters.as_deref())?;
            cmd_fit(&cfg, base.as_deref(), &args.out)
        }
        Command::Export {
            log,
            what,
            format,
            out,
        } => {
            let out = out.unwrap_or_else(|| log.join("export"));
            cmd_export(&log, what, format, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("DRIFT_SEARCH_LOG_LEVEL", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_input(&e) { 2 } else { 1 })
        }
    }
}
