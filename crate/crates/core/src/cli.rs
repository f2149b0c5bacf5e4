//! Command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::bounds::{check_envelopes, NormalizedConstants};
use crate::error::{Error, Result};
use crate::metrics::{allan_variance_with, fit_exponential, log_spaced_taus, settling_time, AllanMode};
use crate::sim::config::load_scenarios;
use crate::sim::scenarios::{
    scenario_e1, scenario_e2, scenario_e3, ExperimentSettings, SummaryRow, E1_OMEGA_C,
};
use crate::sim::{run_batch, CsvTable, ScenarioConfig, SimulationTrace};

#[derive(Debug, Parser)]
#[command(name = "adrc-lab", version, about = "Dual-loop ADRC simulation and analysis")]
pub struct Cli {
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Override the RNG seed of every run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    E1,
    E2,
    E3,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenarios in a config file and write one trace CSV each.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, or a .csv path when the file holds one scenario.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print decay constants, or check envelopes for the scenarios in a config.
    Bounds {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Run one of the comparison experiments and write a summary CSV.
    Experiment {
        which: Experiment,
        /// TOML file overriding experiment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// E2 only: run every setpoint on the nominal plant.
        #[arg(long)]
        no_mismatch: bool,
    },
    /// Allan variance of one trace column.
    Allan {
        csv: PathBuf,
        #[arg(long, default_value = "y_plant")]
        column: String,
        /// Discard samples before this time (s).
        #[arg(long, default_value_t = 0.0)]
        warmup: f64,
        #[arg(long, default_value_t = 10)]
        per_decade: usize,
        #[arg(long)]
        overlapping: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exponential fit and settling time of an error column.
    Fit {
        csv: PathBuf,
        #[arg(long, default_value = "e")]
        column: String,
        /// Fit only samples with |e| at or above this fraction of |e(0)|.
        #[arg(long, default_value_t = 0.02)]
        floor: f64,
        #[arg(long, default_value_t = 0.05)]
        band: f64,
    },
}

fn create(path: &Path, force: bool) -> Result<BufWriter<File>> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn io_err(path: &str) -> impl Fn(io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_string(), source }
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(["scenario", "metric", "tau_or_param", "value"])?;
    for r in rows {
        wr.write_record([r.scenario.as_str(), r.metric.as_str(), r.tau_or_param.as_str(), &format!("{}", r.value)])?;
    }
    wr.flush().map_err(io_err("<summary>"))?;
    Ok(())
}

fn load_settings(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentSettings> {
    let mut s = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.display().to_string(), source })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentSettings::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn simulate(cli: &Cli, config: &Path, out: &Path) -> Result<()> {
    let mut scenarios = load_scenarios(config)?;
    if let Some(seed) = cli.seed {
        scenarios.iter_mut().for_each(|s| s.seed = seed);
    }
    let single_file = out.extension().is_some_and(|e| e == "csv");
    if single_file && scenarios.len() != 1 {
        return Err(Error::Config("a .csv output path needs exactly one scenario".into()));
    }
    let paths: Vec<PathBuf> = scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if single_file {
                out.to_path_buf()
            } else {
                let stem = if s.name.is_empty() { format!("scenario{i}") } else { s.name.clone() };
                out.join(format!("{stem}.csv"))
            }
        })
        .collect();
    // Fail before spending time on simulation.
    if !cli.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    let summary_path = (!single_file).then(|| out.join(format!("{stem}_summary.csv")));
    if let Some(p) = summary_path.as_ref().filter(|p| p.exists() && !cli.force) {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
    }
    if !single_file {
        std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
    }
    let traces = run_batch(&scenarios, cli.jobs)?;
    let mut rows = Vec::new();
    for ((trace, path), s) in traces.iter().zip(&paths).zip(&scenarios) {
        trace.write_csv_to(create(path, cli.force)?)?;
        let e = trace.e.last().copied().unwrap_or(f64::NAN);
        println!("{}: {} rows, final e = {e:e} -> {}", s.name, trace.len(), path.display());
        rows.extend(trace_summary(s, trace));
    }
    match summary_path {
        Some(p) => write_summary(create(&p, cli.force)?, &rows),
        None => Ok(()),
    }
}

/// Final error, peak error, and for a reference with steps a fit of the
/// error after the last one.
fn trace_summary(s: &ScenarioConfig, trace: &SimulationTrace) -> Vec<SummaryRow> {
    let name = s.name.as_str();
    let peak = trace.e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rows = vec![
        SummaryRow::new(name, "final_error", "", trace.e.last().copied().unwrap_or(f64::NAN)),
        SummaryRow::new(name, "max_abs_error", "", peak),
    ];
    let Some(last) = s.reference.steps.last() else { return rows };
    let steps = &s.reference.steps;
    let before = steps.len().checked_sub(2).map_or(s.reference.initial, |i| steps[i].value);
    let amp = last.value - before;
    if amp == 0.0 {
        return rows;
    }
    let start = trace.index_at(last.time);
    let (t, e) = (&trace.t[start..], &trace.e[start..]);
    let cut = e.iter().position(|v| v.abs() < 0.02 * amp.abs()).unwrap_or(e.len());
    match fit_exponential(&t[..cut], &e[..cut]) {
        Ok(f) => {
            rows.push(SummaryRow::new(name, "decay_rate", amp, f.rate));
            rows.push(SummaryRow::new(name, "r_squared", amp, f.r_squared));
        }
        Err(err) => info!("{name}: no fit ({err})"),
    }
    let settle = settling_time(t, e, 0.05, amp).map_or(f64::NAN, |ts| ts - last.time);
    rows.push(SummaryRow::new(name, "settling_time", amp, settle));
    rows
}

fn bounds(cli: &Cli, config: Option<&Path>, n: usize) -> Result<()> {
    let Some(config) = config else {
        let obs = NormalizedConstants::observer(n)?;
        let ctl = NormalizedConstants::control(n)?;
        println!("n = {n}");
        for (name, k) in [("observer", &obs), ("control", &ctl)] {
            let c = &k.certificate;
            println!(
                "{name:>8}: m = {:.6e}, M = {:.6e}, c1 = {:.6e}, gamma = {:.6e}, c3 = {:.6e}, c4 = {:.6e}, c5 = {:.6e}, residual = {:.2e}",
                c.m_p, c.big_m_p, c.c1, c.gamma, k.c3, k.c4, k.c5, c.residual
            );
        }
        return Ok(());
    };
    let mut scenarios = load_scenarios(config)?;
    if let Some(seed) = cli.seed {
        scenarios.iter_mut().for_each(|s| s.seed = seed);
    }
    let traces = run_batch(&scenarios, cli.jobs)?;
    let mut worst: Option<(String, f64)> = None;
    for (s, tr) in scenarios.iter().zip(&traces) {
        let checks = check_envelopes(tr)?;
        if checks.is_empty() {
            println!("{}: no envelopes for {}", s.name, s.controller);
        }
        for c in checks {
            if !c.holds() && worst.as_ref().is_none_or(|w| c.worst_ratio > w.1) {
                worst = Some((format!("{}/{}", s.name, c.signal), c.worst_ratio));
            }
            println!(
                "{}: {:<5} worst |signal|/envelope = {:.3e} (margin {:.3e} at t = {:.4}) {}",
                s.name,
                c.signal,
                c.worst_ratio,
                c.worst_margin,
                c.at_t,
                if c.holds() { "ok" } else { "VIOLATED" }
            );
        }
    }
    if let Some((signal, ratio)) = worst {
        return Err(Error::EnvelopeViolated { signal, ratio });
    }
    Ok(())
}

fn experiment(cli: &Cli, which: Experiment, config: Option<&Path>, out: Option<&Path>, no_mismatch: bool) -> Result<()> {
    let settings = load_settings(config, cli.seed)?;
    if let Some(p) = out {
        if p.exists() && !cli.force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    info!("experiment {which:?} with {settings:?}");
    let rows = match which {
        Experiment::E1 => {
            let r = scenario_e1(&settings, &E1_OMEGA_C, cli.jobs)?;
            println!("{:<22} {:>10} {:>8} {:>10}", "step", "rate", "R2", "settle_s");
            for s in &r.steps {
                let (rate, r2) = s.fit.as_ref().map_or((f64::NAN, f64::NAN), |f| (f.rate, f.r_squared));
                println!(
                    "{:<22} {rate:>10.4} {r2:>8.4} {:>10.4}",
                    s.label(),
                    s.settling_time.unwrap_or(f64::NAN)
                );
                if let Err(e) = &s.fit {
                    println!("  fit failed: {e}");
                }
            }
            for wc in E1_OMEGA_C {
                println!("omega_c {wc}: +/- rate mismatch {:.3}%", r.rate_mismatch(wc).unwrap_or(f64::NAN) * 100.0);
            }
            r.summary()
        }
        Experiment::E2 => {
            let r = scenario_e2(&settings, !no_mismatch, cli.jobs)?;
            println!("{:>8} {:>12} {:>12} {:>12}", "P_W", "SADRC_%", "DLADRC_%", "improve_%");
            for row in &r.rows {
                println!(
                    "{:>8.2} {:>12.5} {:>12.5} {:>12.2}",
                    row.setpoint,
                    row.sadrc,
                    row.dladrc,
                    row.improvement()
                );
            }
            r.summary()
        }
        Experiment::E3 => {
            let r = scenario_e3(&settings, cli.jobs)?;
            let (lo, hi) = r.long_window;
            println!("long-tau window {lo:.3}-{hi:.3} s simulated");
            println!("{:<16} {:>14} {:>14}", "run", "instab_%", "long_tau_avar");
            for q in &r.points {
                println!("{:<16} {:>14.6} {:>14.4e}", q.name, q.instability, q.long_tau_allan);
            }
            for p in 1..=3 {
                println!(
                    "p={p}: mean instability {:.6}%, mean long-tau avar {:.4e}, spread {:.4}",
                    r.mean_instability(p),
                    r.mean_long_tau_allan(p),
                    r.allan_spread(p)
                );
            }
            r.summary()
        }
    };
    match out {
        Some(p) => write_summary(create(p, cli.force)?, &rows),
        None => Ok(()),
    }
}

fn allan(cli: &Cli, csv: &Path, column: &str, warmup: f64, per_decade: usize, overlapping: bool, out: Option<&Path>) -> Result<()> {
    let table = CsvTable::read(csv)?;
    let t = table.column("t")?;
    let y = table.column(column)?;
    let start = t.partition_point(|&s| s < warmup);
    let (t, y) = (&t[start..], &y[start..]);
    if t.len() < 4 {
        return Err(Error::invalid("csv", "need at least 4 samples after warm-up"));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    let taus = log_spaced_taus(dt, y.len(), per_decade.max(1), 2);
    let mode = if overlapping { AllanMode::Overlapping } else { AllanMode::NonOverlapping };
    let curve = allan_variance_with(y, dt, &taus, mode)?;
    let rows: Vec<SummaryRow> = curve
        .taus
        .iter()
        .zip(&curve.sigma2)
        .map(|(tau, s2)| SummaryRow {
            scenario: csv.display().to_string(),
            metric: format!("allan_{column}"),
            tau_or_param: format!("{tau}"),
            value: *s2,
        })
        .collect();
    match out {
        Some(p) => write_summary(create(p, cli.force)?, &rows),
        None => write_summary(io::stdout().lock(), &rows),
    }
}

fn fit(csv: &Path, column: &str, floor: f64, band: f64) -> Result<()> {
    let table = CsvTable::read(csv)?;
    let t = table.column("t")?;
    let e = table.column(column)?;
    let e0 = e.first().copied().ok_or_else(|| Error::invalid("csv", "no samples"))?;
    let cut = e.iter().position(|v| v.abs() < floor * e0.abs()).unwrap_or(e.len());
    let f = fit_exponential(&t[..cut], &e[..cut])?;
    println!("amplitude {:.6e}", f.amplitude);
    println!("rate {:.6e}", f.rate);
    println!("r_squared {:.6}", f.r_squared);
    println!("points {}", f.points);
    match settling_time(t, e, band, e0) {
        Some(ts) => println!("settling_time {ts}"),
        None => println!("settling_time none"),
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { config, out } => simulate(cli, config, out),
        Command::Bounds { config, n } => bounds(cli, config.as_deref(), *n),
        Command::Experiment { which, config, out, no_mismatch } => {
            experiment(cli, *which, config.as_deref(), out.as_deref(), *no_mismatch)
        }
        Command::Allan { csv, column, warmup, per_decade, overlapping, out } => {
            allan(cli, csv, column, *warmup, *per_decade, *overlapping, out.as_deref())
        }
        Command::Fit { csv, column, floor, band } => fit(csv, column, *floor, *band),
    }
}

/// Parse arguments, run, and map failures to exit codes (1 usage/config,
/// 2 numerical).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
