//! `rrcusum`: bounds, simulations and the reference studies from the command
//! line. Output is CSV with a header row; exit status is 0 on success, 1 on
//! runtime or numerical failure and 2 on usage or configuration errors.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rrcusum::bounds::{BoundsCalculator, BoundsReport};
use rrcusum::model::validate_model;
use rrcusum::montecarlo::{
    estimate_arl, estimate_delay, format_summary, run_study, StudyId, StudyRow,
};
use rrcusum::stats::format_significant;

use config::{Config, Preset};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<rrcusum::Error> for CliError {
    fn from(e: rrcusum::Error) -> Self {
        match e {
            rrcusum::Error::InvalidConfig(_) | rrcusum::Error::InvalidInput(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rrcusum", version, about = "Round robin CUSUM under an m-of-K sampling constraint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analytic bounds and per-unit statistics for a scenario.
    Bounds(Common),
    /// Monte Carlo detection delay, run length, or a study without bounds.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Estimate the pre-change run length instead of the delay.
        #[arg(long)]
        arl: bool,
        /// Run-length cap for --arl (default 100 gamma).
        #[arg(long)]
        arl_cap: Option<u64>,
        /// Run a reference study's delay sweep (1, 2 or 3).
        #[arg(long)]
        study: Option<u8>,
    },
    /// A reference study with delays and bounds (1, 2 or 3).
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        study: u8,
    },
    /// Monte Carlo check of the drift conditions.
    Validate(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration with [scenario], [run] and [bounds] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long = "K")]
    num_sources: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    /// Number of affected sources.
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    mu: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    reps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nu: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    drift_reps: Option<u64>,
    #[arg(long)]
    ladder_reps: Option<u64>,
    #[arg(long)]
    constant_c: Option<f64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

impl Common {
    fn effective(&self) -> Result<Config, CliError> {
        let mut c = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.preset => c.scenario.preset);
        set!(self.num_sources => c.scenario.num_sources);
        set!(self.m => c.scenario.m);
        set!(self.rho => c.scenario.rho);
        set!(self.mu => c.scenario.mu);
        set!(self.delta => c.scenario.delta);
        set!(self.gamma => c.run.gamma);
        set!(self.reps => c.run.reps);
        set!(self.seed => c.run.seed);
        set!(self.nu => c.run.nu);
        set!(self.threads => c.run.threads);
        set!(self.max_steps => c.run.max_steps);
        set!(self.drift_reps => c.bounds.drift_reps);
        set!(self.ladder_reps => c.bounds.ladder_reps);
        set!(self.constant_c => c.bounds.constant_c);
        if self.s.is_some() {
            c.scenario.s = self.s;
        }
        Ok(c)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Runtime(format!("cannot write output: {e}"))),
    }
}

fn num(x: f64) -> String {
    format_significant(x, 6)
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn configure_threads(threads: usize) -> Result<(), CliError> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot configure threads: {e}")))?;
    }
    Ok(())
}

/// Parses the common flags; `None` means the configuration was dumped.
fn prepare(common: &Common) -> Result<Option<Config>, CliError> {
    let config = common.effective()?;
    if common.dump_config {
        write_output(common.out.as_deref(), &config.to_toml())?;
        return Ok(None);
    }
    config.validate()?;
    configure_threads(config.run.threads)?;
    Ok(Some(config))
}

fn cmd_bounds(common: &Common) -> Result<(), CliError> {
    let Some(config) = prepare(common)? else {
        return Ok(());
    };
    let model = config.build_model()?;
    let calculator = BoundsCalculator::new(&model, config.bounds_settings())?;
    let reports = model
        .hypotheses()
        .iter()
        .map(|h| calculator.report(h, config.run.gamma))
        .collect::<rrcusum::Result<Vec<BoundsReport>>>()?;
    let preset = config.scenario.preset.name();
    let rows = reports.iter().map(|r| format!("{preset},{}", r.csv_row()));
    let table = csv(&format!("preset,{}", BoundsReport::CSV_HEADER), rows);
    write_output(common.out.as_deref(), &table)?;
    let record: String = reports.iter().map(|r| r.to_record()).collect();
    match &common.out {
        Some(path) => {
            let mut p = path.clone().into_os_string();
            p.push(".record");
            write_output(Some(Path::new(&p)), &record)?;
        }
        None => eprint!("{record}"),
    }
    Ok(())
}

const DELAY_HEADER: &str =
    "preset,hypothesis,K,m,gamma,nu,replications,mean_delay,stderr,truncations,discarded,stderr_warning";
const ARL_HEADER: &str =
    "preset,K,m,gamma,cap,replications,mean_run_length,stderr,truncations,meets_gamma_99,stderr_warning";

fn cmd_simulate(
    common: &Common,
    arl: bool,
    arl_cap: Option<u64>,
    study: Option<u8>,
) -> Result<(), CliError> {
    let Some(mut config) = prepare(common)? else {
        return Ok(());
    };
    if let Some(cap) = arl_cap {
        config.run.arl_cap = Some(cap);
    }
    if let Some(id) = study {
        let id = StudyId::from_number(id).map_err(|e| CliError::Usage(e.to_string()))?;
        let rows = run_study(id, config.run.reps, config.run.seed, None)?;
        eprint!("{}", format_summary(&rows));
        let table = csv(StudyRow::CSV_HEADER, rows.iter().map(StudyRow::csv_row));
        return write_output(common.out.as_deref(), &table);
    }
    let model = config.build_model()?;
    let study = config.study_config();
    let preset = config.scenario.preset.name();
    let (k, m) = (model.num_sources(), model.unit_size());
    let table = if arl {
        let cap = config
            .run
            .arl_cap
            .unwrap_or((100.0 * config.run.gamma).ceil() as u64);
        let e = estimate_arl(&model, &study, cap)?;
        // one-sided 99% lower confidence limit
        let meets = e.mean_delay - 2.326 * e.stderr >= config.run.gamma;
        let row = format!(
            "{preset},{k},{m},{},{cap},{},{},{},{},{meets},{}",
            num(config.run.gamma),
            e.replications,
            num(e.mean_delay),
            num(e.stderr),
            e.truncation_count,
            e.stderr_warning
        );
        csv(ARL_HEADER, [row])
    } else {
        let mut rows = Vec::new();
        for h in model.hypotheses() {
            let e = estimate_delay(&model, h, &study)?;
            rows.push(format!(
                "{preset},{},{k},{m},{},{},{},{},{},{},{},{}",
                h.label(),
                num(config.run.gamma),
                config.run.nu,
                e.replications,
                num(e.mean_delay),
                num(e.stderr),
                e.truncation_count,
                e.discarded,
                e.stderr_warning
            ));
        }
        csv(DELAY_HEADER, rows)
    };
    write_output(common.out.as_deref(), &table)
}

fn cmd_study(common: &Common, study: u8) -> Result<(), CliError> {
    let id = StudyId::from_number(study).map_err(|e| CliError::Usage(e.to_string()))?;
    let Some(config) = prepare(common)? else {
        return Ok(());
    };
    let rows = run_study(id, config.run.reps, config.run.seed, Some(config.bounds_settings()))?;
    eprint!("{}", format_summary(&rows));
    let table = csv(StudyRow::CSV_HEADER, rows.iter().map(StudyRow::csv_row));
    write_output(common.out.as_deref(), &table)
}

const VALIDATE_HEADER: &str = "hypothesis,unit,singleton_family,pre_drift,pre_drift_stderr,\
pre_drift_negative,post_drift,post_drift_stderr,post_drift_positive";

fn cmd_validate(common: &Common) -> Result<(), CliError> {
    let Some(config) = prepare(common)? else {
        return Ok(());
    };
    let model = config.build_model()?;
    let mut rows = Vec::new();
    for h in model.hypotheses() {
        let report = validate_model(&model, h, config.bounds.drift_reps, config.run.seed)?;
        eprintln!(
            "{}: assumptions {}",
            report.hypothesis,
            if report.assumptions_hold() { "hold" } else { "violated" }
        );
        for u in &report.units {
            let (post, post_se) = u
                .post_drift
                .map_or(("".to_string(), "".to_string()), |e| (num(e.value), num(e.stderr)));
            rows.push(format!(
                "{},\"{}\",{},{},{},{},{post},{post_se},{}",
                report.hypothesis,
                u.unit,
                u.singleton_family,
                num(u.pre_drift.value),
                num(u.pre_drift.stderr),
                u.pre_drift_negative,
                u.post_drift_positive.map_or(String::new(), |b| b.to_string())
            ));
        }
    }
    write_output(common.out.as_deref(), &csv(VALIDATE_HEADER, rows))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bounds(c) => cmd_bounds(c),
        Command::Simulate {
            common,
            arl,
            arl_cap,
            study,
        } => cmd_simulate(common, *arl, *arl_cap, *study),
        Command::Study { common, study } => cmd_study(common, *study),
        Command::Validate(c) => cmd_validate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
