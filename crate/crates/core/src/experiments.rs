//! Numerical studies: minimum control time, ω sweeps, worst error against
//! control time, and penalty re-optimization.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{ensemble_fidelity, FidelityKind};
use crate::grape::{grape_optimize, reoptimize_with_penalty, ConvergenceReason, OptimizeConfig, OptimizeResult};
use crate::io::{atomic_write, format_f64, read_toml, sweep_csv, write_pulse, write_toml, PulseMetadata};
use crate::linalg::{CMatrix, C64};
use crate::propagation::PiecewiseConstantPulse;
use crate::systems::{discretize, OmegaGrid, ParameterizedSystem, SystemId};
use crate::targets::{cnot_gate, custom, generic_u, TargetGate};

pub const DEFAULT_SWEEP_RESOLUTION: usize = 201;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Cnot,
    GenericU,
    /// Row-major real and imaginary parts.
    Matrix { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl TargetSpec {
    pub fn resolve(&self) -> Result<TargetGate> {
        match self {
            TargetSpec::Cnot => Ok(cnot_gate()),
            TargetSpec::GenericU => generic_u(),
            TargetSpec::Matrix { re, im } => {
                let n = re.len();
                if im.len() != n || re.iter().chain(im).any(|r| r.len() != n) {
                    return Err(Error::InvalidConfig("target matrix must be square with matching parts".into()));
                }
                custom(CMatrix::from_fn(n, n, |r, c| C64::new(re[r][c], im[r][c])))
            }
        }
    }

    /// Reads `re = [[…]]`, `im = [[…]]` from a TOML file.
    pub fn from_file(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Parts {
            re: Vec<Vec<f64>>,
            im: Vec<Vec<f64>>,
        }
        let p: Parts = read_toml(path)?;
        Ok(TargetSpec::Matrix { re: p.re, im: p.im })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub alpha: f64,
    pub points: Vec<f64>,
}

/// Everything needed to regenerate one optimized pulse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub system: SystemId,
    pub omega_0: f64,
    pub omega_1: f64,
    pub n: usize,
    pub target: TargetSpec,
    pub total_time: f64,
    /// Defaults to the recommended count for the ensemble.
    pub n_segments: Option<usize>,
    pub epsilon: f64,
    pub max_evaluations: usize,
    pub restarts: usize,
    pub seed: u64,
    pub scale: f64,
    pub amplitude_bound: Option<f64>,
    pub kind: FidelityKind,
    /// Re-optimize the result under this penalty.
    pub penalty: Option<PenaltySpec>,
}

impl RunSpec {
    pub fn new(system: SystemId, n: usize, target: TargetSpec, total_time: f64) -> Self {
        Self {
            system,
            omega_0: 1.0,
            omega_1: 2.0,
            n,
            target,
            total_time,
            n_segments: None,
            epsilon: 1e-3,
            max_evaluations: 2000,
            restarts: 5,
            seed: 0,
            scale: 1.0,
            amplitude_bound: None,
            kind: FidelityKind::default(),
            penalty: None,
        }
    }

    /// `N = 1` sits at `ω₀`.
    pub fn grid(&self) -> Result<OmegaGrid> {
        discretize(self.omega_0, self.omega_1, self.n)
    }

    pub fn config(&self) -> Result<OptimizeConfig> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::InvalidConfig(format!("seed {} does not fit in 63 bits", self.seed)));
        }
        let target = self.target.resolve()?;
        let mut cfg = OptimizeConfig::new(self.system.clone(), self.grid()?, target.matrix, self.total_time)?;
        if let Some(m) = self.n_segments {
            cfg.n_segments = m;
        }
        cfg.epsilon = self.epsilon;
        cfg.max_evaluations = self.max_evaluations;
        cfg.restarts = self.restarts;
        cfg.seed = self.seed;
        cfg.initial = crate::grape::InitialPulse::Random { scale: self.scale };
        cfg.amplitude_bound = self.amplitude_bound;
        cfg.kind = self.kind;
        Ok(cfg)
    }
}

/// The optimization a spec describes, plus the unpenalized stage if any.
pub struct RunOutcome {
    pub config: OptimizeConfig,
    pub base: OptimizeResult,
    pub result: OptimizeResult,
}

pub fn run(spec: &RunSpec) -> Result<RunOutcome> {
    let config = spec.config()?;
    let base = grape_optimize(&config)?;
    let result = match &spec.penalty {
        Some(p) => reoptimize_with_penalty(&base, &config, p.alpha, &p.points)?,
        None => base.clone(),
    };
    Ok(RunOutcome { config, base, result })
}

/// Penalty points among the grid: endpoints for `n = 2`, otherwise `n`
/// points at equally spaced indices.
pub fn penalty_points(grid: &OmegaGrid, n: usize) -> Vec<f64> {
    let len = grid.len();
    if n == 0 || len == 0 {
        return Vec::new();
    }
    if n >= len {
        return grid.points.clone();
    }
    if n == 1 {
        return vec![grid.points[(len - 1) / 2]];
    }
    (0..n)
        .map(|i| grid.points[(i * (len - 1) + (n - 1) / 2) / (n - 1)])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub omega: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    pub worst: f64,
    pub median: f64,
}

/// `1 − f(ω)` over `resolution` uniform points plus the given extra points.
pub fn omega_sweep(
    sys: &ParameterizedSystem,
    pulse: &PiecewiseConstantPulse,
    interval: (f64, f64),
    resolution: usize,
    extra_points: &[f64],
    target: &crate::linalg::Unitary,
    kind: FidelityKind,
) -> Result<Sweep> {
    if resolution < 2 {
        return Err(Error::InvalidGrid(format!("sweep resolution must be at least 2, got {resolution}")));
    }
    let uniform = discretize(interval.0, interval.1, resolution)?;
    let mut omegas = uniform.points;
    omegas.extend_from_slice(extra_points);
    omegas.sort_by(f64::total_cmp);
    omegas.dedup();
    let grid = OmegaGrid::from_points(omegas)?;
    let report = ensemble_fidelity(sys, &grid, pulse, target, kind)?;
    let points: Vec<SweepPoint> = grid
        .points
        .iter()
        .zip(&report.members)
        .map(|(&omega, f)| SweepPoint { omega, error: 1.0 - f })
        .collect();
    let mut errors: Vec<f64> = points.iter().map(|p| p.error).collect();
    errors.sort_by(f64::total_cmp);
    let worst = *errors.last().expect("non-empty sweep");
    let mid = errors.len() / 2;
    let median = if errors.len() % 2 == 1 {
        errors[mid]
    } else {
        0.5 * (errors[mid - 1] + errors[mid])
    };
    Ok(Sweep { points, worst, median })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Optimize,
    MinTimeScan,
    Sweep,
    WorstVsTime,
    Penalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub kind: ExperimentKind,
    pub system: String,
    pub spec: RunSpec,
    pub n: usize,
    pub total_time: f64,
    pub n_segments: usize,
    pub alpha: f64,
    pub penalty_points: Vec<f64>,
    pub seed: u64,
    /// Seed of the restart whose pulse was kept.
    pub pulse_seed: u64,
    pub reason: ConvergenceReason,
    pub iterations: usize,
    pub mean_infidelity: f64,
    pub worst_error: f64,
    pub median_error: f64,
    pub optimized_errors: Vec<SweepPoint>,
    pub sweep: Vec<SweepPoint>,
    pub penalty_term: f64,
    pub wall_clock_seconds: f64,
}

impl ExperimentRecord {
    /// Equality of everything except timing.
    pub fn same_results(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = other.wall_clock_seconds;
        a == *other
    }
}

/// Optimizes the spec, then sweeps the resulting pulse.
pub fn run_and_sweep(spec: &RunSpec, kind: ExperimentKind, resolution: usize) -> Result<(ExperimentRecord, RunOutcome)> {
    let start = Instant::now();
    let outcome = run(spec)?;
    let sys = spec.system.build()?;
    let res = &outcome.result;
    let sweep = omega_sweep(
        &sys,
        &res.pulse,
        (spec.omega_0, spec.omega_1),
        resolution,
        &outcome.config.grid.points,
        &outcome.config.target,
        spec.kind,
    )?;
    let optimized_errors = outcome
        .config
        .grid
        .points
        .iter()
        .zip(&res.member_infidelities)
        .map(|(&omega, &error)| SweepPoint { omega, error })
        .collect();
    let (alpha, penalty_points) = spec
        .penalty
        .as_ref()
        .map_or((0.0, Vec::new()), |p| (p.alpha, p.points.clone()));
    let record = ExperimentRecord {
        kind,
        system: spec.system.label(),
        spec: spec.clone(),
        n: spec.n,
        total_time: spec.total_time,
        n_segments: res.pulse.n_segments(),
        alpha,
        penalty_points,
        seed: spec.seed,
        pulse_seed: res.seed,
        reason: res.reason,
        iterations: res.iterations,
        mean_infidelity: res.mean_infidelity,
        worst_error: sweep.worst,
        median_error: sweep.median,
        optimized_errors,
        sweep: sweep.points,
        penalty_term: res.penalty_term,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanAttempt {
    pub n: usize,
    pub total_time: f64,
    pub mean_infidelity: f64,
    pub reached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub n: usize,
    /// Smallest lattice time reaching the target, if any.
    pub t_min: Option<f64>,
    pub attempts: Vec<ScanAttempt>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeRange {
    pub t_lo: f64,
    pub t_hi: f64,
    pub coarse_step: f64,
    pub resolution: f64,
}

impl Default for TimeRange {
    fn default() -> Self {
        Self {
            t_lo: 1.0,
            t_hi: 60.0,
            coarse_step: 1.0,
            resolution: 0.1,
        }
    }
}

/// Rounds to the resolution lattice so that repeated scans hit identical times.
fn lattice_time(t_lo: f64, index: i64, resolution: f64) -> f64 {
    let t = t_lo + index as f64 * resolution;
    (t / resolution).round() * resolution
}

/// For one ensemble size: first coarse time that reaches `ε`, then bisection
/// on the resolution lattice between it and the previous coarse time.
pub fn min_time_scan_one(template: &RunSpec, n: usize, range: TimeRange) -> Result<ScanResult> {
    if !(range.resolution > 0.0) || !(range.coarse_step >= range.resolution) || !(range.t_hi >= range.t_lo) {
        return Err(Error::InvalidConfig(format!("invalid time range {range:?}")));
    }
    let mut attempts = Vec::new();
    let attempt = |t: f64, attempts: &mut Vec<ScanAttempt>| -> Result<bool> {
        let mut spec = template.clone();
        spec.n = n;
        spec.total_time = t;
        let res = run(&spec)?.result;
        let reached = res.reason == ConvergenceReason::TargetReached;
        info!("scan N={n} T={t}: infidelity {:.3e} reached={reached}", res.mean_infidelity);
        attempts.push(ScanAttempt {
            n,
            total_time: t,
            mean_infidelity: res.mean_infidelity,
            reached,
        });
        Ok(reached)
    };
    let per_step = (range.coarse_step / range.resolution).round() as i64;
    let last = ((range.t_hi - range.t_lo) / range.resolution).round() as i64;
    let mut hit = None;
    let mut idx = 0;
    while idx <= last {
        if attempt(lattice_time(range.t_lo, idx, range.resolution), &mut attempts)? {
            hit = Some(idx);
            break;
        }
        idx += per_step;
    }
    let Some(mut hi) = hit else {
        return Ok(ScanResult { n, t_min: None, attempts });
    };
    let mut lo = hi - per_step;
    if lo >= 0 {
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if attempt(lattice_time(range.t_lo, mid, range.resolution), &mut attempts)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok(ScanResult {
        n,
        t_min: Some(lattice_time(range.t_lo, hi, range.resolution)),
        attempts,
    })
}

/// Runs [`min_time_scan_one`] for each ensemble size in parallel.
pub fn min_time_scan(template: &RunSpec, ns: &[usize], range: TimeRange) -> Result<Vec<ScanResult>> {
    ns.par_iter().map(|&n| min_time_scan_one(template, n, range)).collect()
}

/// Optimizes and sweeps at each time.
pub fn worst_error_vs_time(template: &RunSpec, times: &[f64], resolution: usize) -> Result<Vec<ExperimentRecord>> {
    times
        .par_iter()
        .map(|&t| {
            let mut spec = template.clone();
            spec.total_time = t;
            Ok(run_and_sweep(&spec, ExperimentKind::WorstVsTime, resolution)?.0)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PenaltyComparison {
    pub baseline: ExperimentRecord,
    pub reoptimized: Vec<ExperimentRecord>,
    /// Unpenalized runs with a larger ensemble at the same time.
    pub larger_ensembles: Vec<ExperimentRecord>,
}

/// Baseline at `α = 0`, then each `(α, n points)` re-optimization, then the
/// baselines for each larger `N`.
pub fn penalty_comparison(
    base: &RunSpec,
    alphas: &[f64],
    point_counts: &[usize],
    larger_ns: &[usize],
    resolution: usize,
) -> Result<PenaltyComparison> {
    let mut plain = base.clone();
    plain.penalty = None;
    let (baseline, _) = run_and_sweep(&plain, ExperimentKind::Penalty, resolution)?;
    let grid = plain.grid()?;
    let combos: Vec<(f64, usize)> = alphas
        .iter()
        .flat_map(|&a| point_counts.iter().map(move |&n| (a, n)))
        .collect();
    let reoptimized = combos
        .par_iter()
        .map(|&(alpha, n)| {
            let mut spec = plain.clone();
            spec.penalty = Some(PenaltySpec {
                alpha,
                points: penalty_points(&grid, n),
            });
            Ok(run_and_sweep(&spec, ExperimentKind::Penalty, resolution)?.0)
        })
        .collect::<Result<_>>()?;
    let larger_ensembles = larger_ns
        .par_iter()
        .map(|&n| {
            let mut spec = plain.clone();
            spec.n = n;
            Ok(run_and_sweep(&spec, ExperimentKind::Penalty, resolution)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(PenaltyComparison {
        baseline,
        reoptimized,
        larger_ensembles,
    })
}

/// A results directory: one subdirectory per run and an `index.csv`.
pub struct ResultsStore {
    root: PathBuf,
}

const INDEX_HEADER: &str = "run,kind,system,n,total_time,alpha,worst_error,mean_infidelity,reason,path";

impl ResultsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.csv")
    }

    fn index_text(&self) -> Result<String> {
        match fs::read_to_string(self.index_path()) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(format!("{INDEX_HEADER}\n")),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes `record.toml`, `sweep.csv` and, if given, `pulse.csv` with its
    /// sidecar into a fresh run directory, then appends to the index.
    pub fn save(&self, record: &ExperimentRecord, pulse: Option<&PiecewiseConstantPulse>) -> Result<PathBuf> {
        let mut index = self.index_text()?;
        let run = index.lines().count() - 1;
        let name = format!("{run:04}-{:?}-{}-n{}-t{}", record.kind, record.system, record.n, record.total_time).to_lowercase();
        let dir = self.root.join(&name);
        fs::create_dir_all(&dir)?;
        write_toml(&dir.join("record.toml"), record)?;
        let sweep: Vec<(f64, f64)> = record.sweep.iter().map(|p| (p.omega, p.error)).collect();
        atomic_write(&dir.join("sweep.csv"), &sweep_csv(&sweep)?)?;
        if let Some(p) = pulse {
            let meta = PulseMetadata {
                system: Some(record.spec.system.clone()),
                grid: Some(record.spec.grid()?),
                seed: Some(record.pulse_seed),
                ..PulseMetadata::for_pulse(p)
            };
            write_pulse(&dir.join("pulse.csv"), p, &meta)?;
        }
        index.push_str(&format!(
            "{run},{:?},{},{},{},{},{},{},{:?},{name}\n",
            record.kind,
            record.system,
            record.n,
            format_f64(record.total_time),
            format_f64(record.alpha),
            format_f64(record.worst_error),
            format_f64(record.mean_infidelity),
            record.reason,
        ));
        atomic_write(&self.index_path(), index.as_bytes())?;
        Ok(dir)
    }

    pub fn load(&self, dir: &Path) -> Result<ExperimentRecord> {
        read_toml(&dir.join("record.toml"))
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.index_text()?.lines().count() - 1)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}
