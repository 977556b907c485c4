//! Gate fidelities and their exact gradients.
//!
//! With `g = tr(U_targ† U(T)) / d`, the phase-sensitive fidelity is `Re g`
//! and the phase-insensitive one is `|g|`. Derivatives of a segment
//! propagator `X_k = e^{A}` along a direction `B` are evaluated in the
//! eigenbasis of `A`, where
//!
//! ```text
//! ⟨l| ∂/∂x e^{A + xB} |m⟩ = ⟨l|B|m⟩ · (e^{λ_l} − e^{λ_m}) / (λ_l − λ_m)    (λ_l ≠ λ_m)
//!                         = ⟨l|B|m⟩ · e^{λ_l}                              (λ_l = λ_m)
//! ```
//!
//! and the fidelity gradient is the sum over segments of
//! `Re tr[e^{−iφ_g} Λ†_{M+1:k+1} (∂X_k) X_{k−1:0}] / d` with `e^{−iφ_g} = g*/|g|`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_same_shape, trace_of_product, CMatrix, EigenDecomposition, Tolerances, Unitary, C64};
use crate::propagation::{backward_products, propagate, segment, PiecewiseConstantPulse, PropagationTrace};
use crate::systems::{OmegaGrid, ParameterizedSystem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityKind {
    /// Phase-sensitive, `Re tr(U_targ† U) / d`.
    Su,
    /// Phase-insensitive, `|tr(U_targ† U)| / d`.
    #[default]
    Psu,
}

impl FidelityKind {
    pub fn from_overlap(self, g: C64) -> f64 {
        match self {
            FidelityKind::Su => g.re,
            FidelityKind::Psu => g.norm(),
        }
    }

    /// Real derivative of the fidelity given the overlap and its derivative.
    pub fn derivative(self, g: C64, dg: C64) -> f64 {
        match self {
            FidelityKind::Su => dg.re,
            FidelityKind::Psu => {
                let mag = g.norm();
                if mag <= Tolerances::DEFAULT.phase {
                    0.0
                } else {
                    (g.conj() * dg).re / mag
                }
            }
        }
    }
}

impl std::str::FromStr for FidelityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "su" => Ok(Self::Su),
            "psu" => Ok(Self::Psu),
            _ => Err(Error::InvalidConfig(format!("unknown fidelity kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub kind: FidelityKind,
    pub value: f64,
    /// `g = tr(U_targ† U) / d`; for ensembles, the mean overlap.
    pub overlap: C64,
    /// `φ_g` with `e^{−iφ_g} = g*/|g|`, absent when `|g|` is below tolerance.
    pub phase: Option<f64>,
    /// Per-member fidelities (a single entry for one system).
    pub members: Vec<f64>,
}

/// `tr(U_targ† U) / d`.
pub fn overlap(u_targ: &Unitary, u: &CMatrix) -> Result<C64> {
    ensure_same_shape(u_targ.matrix(), u)?;
    let d = u.nrows() as f64;
    // tr(A† B) = Σ conj(a_ij) b_ij
    let t: C64 = u_targ.matrix().iter().zip(u.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(t / d)
}

fn phase_of(g: C64) -> Option<f64> {
    (g.norm() > Tolerances::DEFAULT.phase).then(|| g.arg())
}

pub fn fidelity(kind: FidelityKind, u_targ: &Unitary, u: &CMatrix) -> Result<FidelityReport> {
    let g = overlap(u_targ, u)?;
    let value = kind.from_overlap(g);
    Ok(FidelityReport {
        kind,
        value,
        overlap: g,
        phase: phase_of(g),
        members: vec![value],
    })
}

pub fn fidelity_su(u_targ: &Unitary, u: &CMatrix) -> Result<FidelityReport> {
    fidelity(FidelityKind::Su, u_targ, u)
}

pub fn fidelity_psu(u_targ: &Unitary, u: &CMatrix) -> Result<FidelityReport> {
    fidelity(FidelityKind::Psu, u_targ, u)
}

/// A normal matrix `A = V diag(μ) V†` with unitary `V`.
#[derive(Clone, Debug)]
pub struct NormalDecomposition {
    pub eigenvalues: Vec<C64>,
    pub eigenvectors: CMatrix,
}

impl NormalDecomposition {
    /// `A = −i·scale·H` from the eigendecomposition of Hermitian `H`.
    pub fn skew_from_hermitian(eig: &EigenDecomposition, scale: f64) -> Self {
        Self {
            eigenvalues: eig.eigenvalues.iter().map(|&l| C64::new(0.0, -scale * l)).collect(),
            eigenvectors: eig.eigenvectors.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn exp(&self) -> CMatrix {
        let mut vd = self.eigenvectors.clone();
        for (j, mu) in self.eigenvalues.iter().enumerate() {
            let e = mu.exp();
            vd.column_mut(j).iter_mut().for_each(|z| *z *= e);
        }
        vd * self.eigenvectors.adjoint()
    }
}

/// `sinh(z)/z`, accurate near zero.
fn sinhc(z: C64) -> C64 {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        C64::new(1.0, 0.0) + z2 / 6.0 + z2 * z2 / 120.0 + z2 * z2 * z2 / 5040.0
    } else {
        z.sinh() / z
    }
}

/// `(e^a − e^b)/(a − b)`, or `e^a` when the gap is below the degeneracy tolerance.
///
/// The non-degenerate branch is evaluated as `e^{(a+b)/2}·sinh(δ)/δ`, `δ = (a−b)/2`,
/// which avoids cancellation for small gaps.
pub fn exp_divided_difference(a: C64, b: C64) -> C64 {
    let gap = (a - b).norm();
    if gap <= Tolerances::DEFAULT.degeneracy * a.norm().max(1.0) {
        a.exp()
    } else {
        ((a + b) * 0.5).exp() * sinhc((a - b) * 0.5)
    }
}

fn divided_differences(eigenvalues: &[C64]) -> CMatrix {
    let n = eigenvalues.len();
    CMatrix::from_fn(n, n, |l, m| exp_divided_difference(eigenvalues[l], eigenvalues[m]))
}

/// `∂/∂x e^{A + xB}` at `x = 0`.
pub fn spectral_derivative(a: &NormalDecomposition, b: &CMatrix) -> Result<CMatrix> {
    let n = a.dim();
    if b.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: (n, n),
            found: b.shape(),
        });
    }
    let v = &a.eigenvectors;
    let phi = divided_differences(&a.eigenvalues);
    let in_basis = v.adjoint() * b * v;
    Ok(v * in_basis.component_mul(&phi) * v.adjoint())
}

/// Per-segment data shared by all gradient directions.
struct SegmentGradientBasis {
    /// `V† X_{k−1:0} Λ†_{M+1:k+1} V`.
    w: CMatrix,
    /// Divided differences of the eigenvalues of `−iΔt H_u`.
    phi: CMatrix,
}

impl SegmentGradientBasis {
    /// `tr(Λ† ∂X F) / d` for the direction `H` (so `B = −iΔt H`).
    fn directional(&self, v: &CMatrix, h: &CMatrix, dt: f64, d: f64) -> C64 {
        let h_basis = v.adjoint() * h * v;
        let mut acc = C64::new(0.0, 0.0);
        let n = h_basis.nrows();
        for l in 0..n {
            for m in 0..n {
                acc += self.w[(m, l)] * h_basis[(l, m)] * self.phi[(l, m)];
            }
        }
        acc * C64::new(0.0, -dt) / d
    }
}

/// Overlap of one ensemble member and its derivatives.
#[derive(Clone, Debug)]
pub(crate) struct MemberGradient {
    pub g: C64,
    /// `∂g/∂ω` contribution of each segment.
    pub dg_domega: Vec<C64>,
    /// `∂g/∂u_j(t_k)`, segment-major.
    pub dg_du: Vec<C64>,
}

pub(crate) fn member_gradient(
    sys: &ParameterizedSystem,
    omega: f64,
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
    want_omega: bool,
    want_controls: bool,
) -> Result<MemberGradient> {
    let trace = propagate(sys, omega, pulse)?;
    let back = backward_products(&trace, u_targ)?;
    let g = overlap(u_targ, trace.final_matrix())?;
    let d = sys.dim() as f64;
    let dt = trace.dt;
    let m = trace.n_segments();
    let nc = sys.n_controls();
    let mut dg_domega = Vec::with_capacity(if want_omega { m } else { 0 });
    let mut dg_du = Vec::with_capacity(if want_controls { m * nc } else { 0 });
    for k in 0..m {
        let seg = &trace.segments[k];
        let v = &seg.eig.eigenvectors;
        let basis = SegmentGradientBasis {
            w: v.adjoint() * (&trace.forward[k] * &back[k]) * v,
            phi: divided_differences(&NormalDecomposition::skew_from_hermitian(&seg.eig, dt).eigenvalues),
        };
        if want_omega {
            dg_domega.push(basis.directional(v, sys.h1().matrix(), dt, d));
        }
        if want_controls {
            for h in sys.controls() {
                dg_du.push(basis.directional(v, h.matrix(), dt, d));
            }
        }
    }
    Ok(MemberGradient { g, dg_domega, dg_du })
}

/// `∂f_PSU/∂ω` and its per-segment terms.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaGradient {
    pub value: f64,
    pub per_segment: Vec<f64>,
}

fn require_phase(g: C64) -> Result<C64> {
    let mag = g.norm();
    if mag <= Tolerances::DEFAULT.phase {
        return Err(Error::UndefinedPhase { magnitude: mag });
    }
    Ok(g.conj() / mag)
}

pub fn grad_fidelity_omega(
    sys: &ParameterizedSystem,
    omega: f64,
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
) -> Result<OmegaGradient> {
    let mg = member_gradient(sys, omega, pulse, u_targ, true, false)?;
    let phase = require_phase(mg.g)?;
    let per_segment: Vec<f64> = mg.dg_domega.iter().map(|dg| (phase * dg).re).collect();
    Ok(OmegaGradient {
        value: per_segment.iter().sum(),
        per_segment,
    })
}

/// Exact gradient of the chosen fidelity with respect to every amplitude,
/// laid out like [`PiecewiseConstantPulse::amplitudes`].
pub fn grad_fidelity_controls(
    sys: &ParameterizedSystem,
    omega: f64,
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
    kind: FidelityKind,
) -> Result<Vec<f64>> {
    let mg = member_gradient(sys, omega, pulse, u_targ, false, true)?;
    match kind {
        FidelityKind::Su => Ok(mg.dg_du.iter().map(|dg| dg.re).collect()),
        FidelityKind::Psu => {
            let phase = require_phase(mg.g)?;
            Ok(mg.dg_du.iter().map(|dg| (phase * dg).re).collect())
        }
    }
}

/// Fidelity of the block-diagonal lift, `kind(mean_k g_k)`, with per-member values.
///
/// For SU this is the mean member fidelity. For PSU all members share one
/// global phase, so the value is at most the mean of the member PSU fidelities.
/// Per-member phases would let neighbouring members settle on different
/// branches `e^{iπ(2j+1)/4}·CNOT` of a det = −1 target, and the pulse would
/// then have to interpolate between them.
pub fn ensemble_fidelity(
    sys: &ParameterizedSystem,
    grid: &OmegaGrid,
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
    kind: FidelityKind,
) -> Result<FidelityReport> {
    let overlaps: Vec<C64> = grid
        .points
        .par_iter()
        .map(|&w| {
            let trace = propagate(sys, w, pulse)?;
            overlap(u_targ, trace.final_matrix())
        })
        .collect::<Result<_>>()?;
    let members: Vec<f64> = overlaps.iter().map(|&g| kind.from_overlap(g)).collect();
    let n = members.len() as f64;
    let g = overlaps.iter().sum::<C64>() / n;
    Ok(FidelityReport {
        kind,
        value: kind.from_overlap(g),
        overlap: g,
        phase: phase_of(g),
        members,
    })
}

/// Forward-mode ω-sensitivities of one propagation, for cheap re-evaluation
/// of `∂f_PSU/∂ω` after changing a single segment.
///
/// With `F_k = X_{k−1:0}` and `P_k = Λ†_{M+1:k+1}`, replacing segment `k`
/// by `X'` (with ω-derivative `D'`) gives `g = tr(F_k P_k X')/d` and
/// `∂g/∂ω = [tr((∂F_k P_k + F_k ∂P_k) X') + tr(F_k P_k D')]/d`.
pub struct OmegaSensitivity {
    omega: f64,
    dt: f64,
    dim: f64,
    /// `F_k P_k`.
    fp: Vec<CMatrix>,
    /// `∂F_k P_k + F_k ∂P_k`.
    dfp: Vec<CMatrix>,
    g: C64,
    dg: C64,
}

fn omega_derivative_of_segment(
    sys: &ParameterizedSystem,
    eig: &EigenDecomposition,
    dt: f64,
) -> CMatrix {
    let a = NormalDecomposition::skew_from_hermitian(eig, dt);
    let b = sys.h1().matrix() * C64::new(0.0, -dt);
    spectral_derivative(&a, &b).expect("dimensions agree by construction")
}

impl OmegaSensitivity {
    pub fn new(
        sys: &ParameterizedSystem,
        omega: f64,
        pulse: &PiecewiseConstantPulse,
        u_targ: &Unitary,
    ) -> Result<Self> {
        let trace: PropagationTrace = propagate(sys, omega, pulse)?;
        let back = backward_products(&trace, u_targ)?;
        let m = trace.n_segments();
        let d = sys.dim();
        let dt = trace.dt;
        let derivs: Vec<CMatrix> = trace
            .segments
            .iter()
            .map(|s| omega_derivative_of_segment(sys, &s.eig, dt))
            .collect();

        let mut df = Vec::with_capacity(m);
        df.push(CMatrix::zeros(d, d));
        for k in 0..m - 1 {
            let next = &trace.segments[k].propagator * &df[k] + &derivs[k] * &trace.forward[k];
            df.push(next);
        }
        let mut dp = vec![CMatrix::zeros(d, d); m];
        for k in (1..m).rev() {
            dp[k - 1] = &dp[k] * &trace.segments[k].propagator + &back[k] * &derivs[k];
        }
        let fp: Vec<CMatrix> = (0..m).map(|k| &trace.forward[k] * &back[k]).collect();
        let dfp: Vec<CMatrix> = (0..m)
            .map(|k| &df[k] * &back[k] + &trace.forward[k] * &dp[k])
            .collect();

        let dim = d as f64;
        let x0 = &trace.segments[0].propagator;
        let g = trace_of_product(&fp[0], x0) / dim;
        let dg = (trace_of_product(&dfp[0], x0) + trace_of_product(&fp[0], &derivs[0])) / dim;
        Ok(Self {
            omega,
            dt,
            dim,
            fp,
            dfp,
            g,
            dg,
        })
    }

    pub fn overlap(&self) -> C64 {
        self.g
    }

    /// `∂f_PSU/∂ω` of the unperturbed pulse (0 when the phase is undefined).
    pub fn psu_gradient(&self) -> f64 {
        FidelityKind::Psu.derivative(self.g, self.dg)
    }

    /// `∂f_PSU/∂ω` after replacing the amplitudes of segment `k`.
    pub fn psu_gradient_with_segment(
        &self,
        sys: &ParameterizedSystem,
        k: usize,
        amps: &[f64],
    ) -> Result<f64> {
        let seg = segment(sys, self.omega, amps, self.dt)?;
        let deriv = omega_derivative_of_segment(sys, &seg.eig, self.dt);
        let g = trace_of_product(&self.fp[k], &seg.propagator) / self.dim;
        let dg = (trace_of_product(&self.dfp[k], &seg.propagator) + trace_of_product(&self.fp[k], &deriv))
            / self.dim;
        Ok(FidelityKind::Psu.derivative(g, dg))
    }
}

/// `f' = f − α · mean_p |∂f_PSU/∂ω (p)|` and its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PenalizedFidelity {
    pub value: f64,
    /// Ensemble fidelity, see [`ensemble_fidelity`].
    pub fidelity_term: f64,
    /// `α · mean |∂f/∂ω|`, subtracted from the fidelity term.
    pub penalty_term: f64,
    /// `∂f_PSU/∂ω` at each penalty point.
    pub point_gradients: Vec<f64>,
    pub report: FidelityReport,
}

pub fn check_penalty_points(grid: &OmegaGrid, points: &[f64]) -> Result<()> {
    if let Some(p) = points.iter().find(|&&p| !grid.contains(p)) {
        return Err(Error::InvalidConfig(format!(
            "penalty point {p} lies outside [{}, {}]",
            grid.omega_0, grid.omega_1
        )));
    }
    Ok(())
}

/// The PSU ω-gradient at each point; undefined phases contribute zero.
pub fn omega_gradients_at(
    sys: &ParameterizedSystem,
    points: &[f64],
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
) -> Result<Vec<f64>> {
    points
        .par_iter()
        .map(|&w| {
            let mg = member_gradient(sys, w, pulse, u_targ, true, false)?;
            let dg: C64 = mg.dg_domega.iter().sum();
            Ok(FidelityKind::Psu.derivative(mg.g, dg))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn penalized_fidelity(
    sys: &ParameterizedSystem,
    grid: &OmegaGrid,
    penalty_points: &[f64],
    pulse: &PiecewiseConstantPulse,
    u_targ: &Unitary,
    alpha: f64,
    kind: FidelityKind,
) -> Result<PenalizedFidelity> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be non-negative, got {alpha}")));
    }
    check_penalty_points(grid, penalty_points)?;
    let report = ensemble_fidelity(sys, grid, pulse, u_targ, kind)?;
    let point_gradients = if alpha > 0.0 && !penalty_points.is_empty() {
        omega_gradients_at(sys, penalty_points, pulse, u_targ)?
    } else {
        Vec::new()
    };
    let penalty_term = if point_gradients.is_empty() {
        0.0
    } else {
        alpha * point_gradients.iter().map(|g| g.abs()).sum::<f64>() / point_gradients.len() as f64
    };
    Ok(PenalizedFidelity {
        value: report.value - penalty_term,
        fidelity_term: report.value,
        penalty_term,
        point_gradients,
        report,
    })
}

/// Gradient matrix view (`M × controls`) of a segment-major gradient.
pub fn as_segment_matrix(grad: &[f64], n_controls: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(grad.len() / n_controls, n_controls, grad)
}
