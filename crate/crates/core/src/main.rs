use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfmimo::harness::{
    run_experiment, run_validation, write_aggregates_csv, write_antenna_profile_csv, write_metadata,
    write_records_csv, ExperimentKind, ExperimentSpec, MonteCarloResult,
};
use cfmimo::scenario::SystemConfig;

#[derive(Parser)]
#[command(name = "cfmimo", version, about = "Consumption-optimal cell-free massive MIMO precoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-antenna powers of one realization for every method.
    AntennaProfile(RunArgs),
    /// PA consumption of the statistical solution against the optimum over Q.
    SubcarrierSweep(RunArgs),
    /// Network power gain over the number of users and APs.
    LoadSweep(RunArgs),
    /// Randomized invariant suite.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        realizations: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML system configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `rng_seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Main CSV; `.records.csv` and `.meta.txt` sidecars are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Q ≤ 64 and at most 20 realizations.
    #[arg(long)]
    quick: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Q values of the subcarrier sweep.
    #[arg(long, value_delimiter = ',')]
    subcarriers: Option<Vec<usize>>,
    /// K values of the load sweep.
    #[arg(long, value_delimiter = ',')]
    users: Option<Vec<usize>>,
    /// L values of the load sweep.
    #[arg(long, value_delimiter = ',')]
    aps: Option<Vec<usize>>,
}

impl RunArgs {
    fn spec(&self, kind: ExperimentKind) -> cfmimo::Result<ExperimentSpec> {
        let base = match &self.config {
            Some(path) => SystemConfig::from_toml_str(&std::fs::read_to_string(path)?)?,
            None => SystemConfig::default(),
        };
        let seed = self.seed.unwrap_or(base.rng_seed);
        let mut spec = ExperimentSpec::default_for(kind, base, seed);
        if let Some(q) = &self.subcarriers {
            spec.subcarriers = q.clone();
        }
        if let Some(k) = &self.users {
            spec.users = k.clone();
        }
        if let Some(l) = &self.aps {
            spec.aps = l.clone();
        }
        if let Some(r) = self.realizations {
            spec.realizations = r;
        }
        if self.quick {
            spec = spec.quick();
        }
        Ok(spec.with_workers(self.workers))
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cfmimo::Result<()>) -> cfmimo::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(kind: ExperimentKind, args: &RunArgs) -> cfmimo::Result<MonteCarloResult> {
    let spec = args.spec(kind)?;
    let result = run_experiment(&spec)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{kind}.csv")));
    write_file(&out, |w| match kind {
        ExperimentKind::AntennaProfile => write_antenna_profile_csv(&result, w),
        _ => write_aggregates_csv(&result, w),
    })?;
    if kind == ExperimentKind::AntennaProfile {
        write_file(&sidecar(&out, ".summary.csv"), |w| write_aggregates_csv(&result, w))?;
    }
    write_file(&sidecar(&out, ".records.csv"), |w| write_records_csv(&result, w))?;
    write_file(&sidecar(&out, ".meta.txt"), |w| write_metadata(&spec, &result, w))?;
    for p in &result.skipped {
        eprintln!("skipped K={} L={}: K >= N", p.users, p.aps);
    }
    eprintln!("wrote {}", out.display());
    Ok(result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::AntennaProfile(a) => (ExperimentKind::AntennaProfile, a),
        Command::SubcarrierSweep(a) => (ExperimentKind::SubcarrierSweep, a),
        Command::LoadSweep(a) => (ExperimentKind::LoadSweep, a),
        Command::Validate { seed, realizations } => {
            let checks = run_validation(*seed, *realizations);
            for c in &checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {:<26} worst {:.3e} bound {:.1e}", c.name, c.worst, c.bound);
            }
            return if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match run(kind, args) {
        Ok(result) => {
            let mut violated = false;
            for r in result.violations() {
                violated = true;
                eprintln!("invariant violation at realization {}: {:?}", r.realization, r.status);
            }
            if violated {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
