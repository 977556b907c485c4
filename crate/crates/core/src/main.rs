use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use robust_grape::experiments::{
    min_time_scan, omega_sweep, penalty_comparison, run_and_sweep, worst_error_vs_time, ExperimentKind,
    ExperimentRecord, ResultsStore, RunSpec, SweepPoint, TargetSpec, TimeRange, DEFAULT_SWEEP_RESOLUTION,
};
use robust_grape::fidelity::FidelityKind;
use robust_grape::grape::ConvergenceReason;
use robust_grape::io::{read_pulse, read_toml};
use robust_grape::lie::larc_check;
use robust_grape::systems::{lift_ensemble, SystemBVariant, SystemId};
use robust_grape::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_LARC: u8 = 3;
const EXIT_UNREACHED: u8 = 4;

#[derive(Parser)]
#[command(name = "robust-grape", version, about = "Robust ensemble pulse optimization for parameter-uncertain qubit systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    A,
    B,
    Qubit,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Cnot,
    Generic,
    File,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value = "a")]
    system: SystemArg,
    #[arg(long, default_value = "eq4")]
    variant: SystemBVariant,
    /// Custom drift as a Pauli sum, e.g. "w*XI + XX + YY + ZZ"; overrides --system.
    #[arg(long)]
    drift: Option<String>,
    /// Custom control Pauli sum; repeat for several controls.
    #[arg(long = "control")]
    controls: Vec<String>,
    #[arg(long, value_enum, default_value = "cnot")]
    target: TargetArg,
    /// TOML file with `re` and `im` matrices, for --target file.
    #[arg(long)]
    target_file: Option<PathBuf>,
    /// Ensemble size.
    #[arg(long, default_value_t = 12)]
    n: usize,
    /// Control time.
    #[arg(long, default_value_t = 8.0)]
    t: f64,
    /// Segment count; defaults to the recommended count for the ensemble.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    omega0: f64,
    #[arg(long, default_value_t = 2.0)]
    omega1: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 2000)]
    max_evals: usize,
    /// Half-width of the uniform initial amplitudes.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long, default_value = "psu")]
    fidelity: FidelityKind,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

impl Common {
    fn system(&self) -> SystemId {
        if let Some(drift) = &self.drift {
            return SystemId::Custom {
                drift: drift.clone(),
                controls: self.controls.clone(),
            };
        }
        match self.system {
            SystemArg::A => SystemId::A,
            SystemArg::B => SystemId::B { variant: self.variant },
            SystemArg::Qubit => SystemId::Qubit,
        }
    }

    fn target(&self) -> Result<TargetSpec, Error> {
        Ok(match self.target {
            TargetArg::Cnot => TargetSpec::Cnot,
            TargetArg::Generic => TargetSpec::GenericU,
            TargetArg::File => {
                let path = self
                    .target_file
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("--target file needs --target-file".into()))?;
                TargetSpec::from_file(path).map_err(|e| unreadable(path, e))?
            }
        })
    }

    fn spec(&self) -> Result<RunSpec, Error> {
        let mut s = RunSpec::new(self.system(), self.n, self.target()?, self.t);
        s.omega_0 = self.omega0;
        s.omega_1 = self.omega1;
        s.n_segments = self.m;
        s.epsilon = self.eps;
        s.max_evaluations = self.max_evals;
        s.restarts = self.restarts;
        s.seed = self.seed;
        s.scale = self.scale;
        s.amplitude_bound = self.bound;
        s.kind = self.fidelity;
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one pulse and sweep it over the interval.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// TOML run specification; replaces the ensemble and target flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Penalty points per re-optimization when --alpha is positive.
        #[arg(long, default_value_t = 2)]
        points: usize,
    },
    /// Lie-algebra rank of the ensemble.
    Larc {
        #[command(flatten)]
        common: Common,
    },
    /// Minimum control time for each ensemble size.
    ScanTmin {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        t_lo: f64,
        #[arg(long, default_value_t = 60.0)]
        t_hi: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long, default_value_t = 0.1)]
        resolution: f64,
    },
    /// Error over the interval for a stored pulse, or for a freshly optimized one.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pulse: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SWEEP_RESOLUTION)]
        resolution: usize,
    },
    /// Worst error over the interval against control time.
    WorstVsTime {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "6,8,10,12,14")]
        times: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_SWEEP_RESOLUTION)]
        resolution: usize,
    },
    /// Penalty re-optimization against the unpenalized baseline.
    Penalty {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        points: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        larger_n: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_SWEEP_RESOLUTION)]
        resolution: usize,
    },
}

fn print_record(path: &std::path::Path, r: &ExperimentRecord) {
    println!(
        "{} {} N={} T={} M={} alpha={} infidelity={:.4e} worst={:.4e} reason={:?} -> {}",
        r.spec.system.label(),
        match r.kind {
            ExperimentKind::Penalty if r.alpha > 0.0 => "penalized",
            _ => "run",
        },
        r.n,
        r.total_time,
        r.n_segments,
        r.alpha,
        r.mean_infidelity,
        r.worst_error,
        r.reason,
        path.display()
    );
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Optimize { common, config, points } => {
            let mut spec = match &config {
                Some(path) => read_toml::<RunSpec>(path).map_err(|e| unreadable(path, e))?,
                None => common.spec()?,
            };
            if config.is_none() && common.alpha > 0.0 {
                let grid = spec.grid()?;
                spec.penalty = Some(robust_grape::experiments::PenaltySpec {
                    alpha: common.alpha,
                    points: robust_grape::experiments::penalty_points(&grid, points),
                });
            }
            let store = ResultsStore::open(&common.out)?;
            let (record, outcome) = run_and_sweep(&spec, ExperimentKind::Optimize, DEFAULT_SWEEP_RESOLUTION)?;
            let dir = store.save(&record, Some(&outcome.result.pulse))?;
            print_record(&dir, &record);
            Ok(if record.reason == ConvergenceReason::TargetReached { 0 } else { EXIT_UNREACHED })
        }
        Command::Larc { common } => {
            let spec = common.spec()?;
            let sys = spec.system.build()?;
            let report = larc_check(&lift_ensemble(&sys, &spec.grid()?))?;
            println!(
                "{} N={}: rank {} of {} ({})",
                spec.system.label(),
                spec.n,
                report.rank,
                report.expected,
                if report.satisfied { "controllable" } else { "not controllable" }
            );
            Ok(if report.satisfied { 0 } else { EXIT_LARC })
        }
        Command::ScanTmin {
            common,
            ns,
            t_lo,
            t_hi,
            step,
            resolution,
        } => {
            let spec = common.spec()?;
            let range = TimeRange {
                t_lo,
                t_hi,
                coarse_step: step,
                resolution,
            };
            let results = min_time_scan(&spec, &ns, range)?;
            let mut all = true;
            let mut text = String::from("n,t_min\n");
            let mut attempts = String::from("n,total_time,mean_infidelity,reached\n");
            for r in &results {
                match r.t_min {
                    Some(t) => println!("N={}: T_min = {t}", r.n),
                    None => {
                        println!("N={}: target not reached in [{t_lo}, {t_hi}]", r.n);
                        all = false;
                    }
                }
                text.push_str(&format!("{},{}\n", r.n, r.t_min.map_or(String::new(), |t| format!("{t}"))));
                for a in &r.attempts {
                    attempts.push_str(&format!("{},{},{:e},{}\n", a.n, a.total_time, a.mean_infidelity, a.reached));
                }
            }
            std::fs::create_dir_all(&common.out)?;
            robust_grape::io::atomic_write(&common.out.join("tmin.csv"), text.as_bytes())?;
            robust_grape::io::atomic_write(&common.out.join("tmin_attempts.csv"), attempts.as_bytes())?;
            Ok(if all { 0 } else { EXIT_UNREACHED })
        }
        Command::Sweep {
            common,
            pulse,
            resolution,
        } => {
            let spec = common.spec()?;
            let store = ResultsStore::open(&common.out)?;
            match pulse {
                Some(path) => {
                    let (p, meta) = read_pulse(&path).map_err(|e| unreadable(&path, e))?;
                    let system = meta.system.unwrap_or_else(|| spec.system.clone());
                    let sys = system.build()?;
                    let target = spec.target.resolve()?;
                    let extra = meta.grid.map(|g| g.points).unwrap_or_default();
                    let sweep = omega_sweep(&sys, &p, (spec.omega_0, spec.omega_1), resolution, &extra, &target.matrix, spec.kind)?;
                    let rows: Vec<(f64, f64)> = sweep.points.iter().map(|SweepPoint { omega, error }| (*omega, *error)).collect();
                    let out = common.out.join("sweep.csv");
                    robust_grape::io::atomic_write(&out, &robust_grape::io::sweep_csv(&rows)?)?;
                    println!("worst={:.4e} median={:.4e} -> {}", sweep.worst, sweep.median, out.display());
                    Ok(0)
                }
                None => {
                    let (record, outcome) = run_and_sweep(&spec, ExperimentKind::Sweep, resolution)?;
                    let dir = store.save(&record, Some(&outcome.result.pulse))?;
                    print_record(&dir, &record);
                    Ok(0)
                }
            }
        }
        Command::WorstVsTime {
            common,
            times,
            resolution,
        } => {
            let spec = common.spec()?;
            let store = ResultsStore::open(&common.out)?;
            for r in worst_error_vs_time(&spec, &times, resolution)? {
                let dir = store.save(&r, None)?;
                print_record(&dir, &r);
            }
            Ok(0)
        }
        Command::Penalty {
            common,
            alphas,
            points,
            larger_n,
            resolution,
        } => {
            let spec = common.spec()?;
            let store = ResultsStore::open(&common.out)?;
            let cmp = penalty_comparison(&spec, &alphas, &points, &larger_n, resolution)?;
            for r in std::iter::once(&cmp.baseline).chain(&cmp.reoptimized).chain(&cmp.larger_ensembles) {
                let dir = store.save(r, None)?;
                print_record(&dir, r);
            }
            Ok(0)
        }
    }
}

/// Input files that cannot be read or parsed count as invalid configuration.
fn unreadable(path: &std::path::Path, e: Error) -> Error {
    Error::InvalidConfig(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidConfig(_) | Error::InvalidGrid(_) | Error::InvalidPulse(_) | Error::Parse { .. } | Error::TomlDe(_) => {
                    EXIT_INVALID
                }
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
