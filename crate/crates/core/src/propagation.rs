//! Piecewise-constant time evolution.
//!
//! Segment `k` (1-based in the formulas, 0-based in code) evolves under the
//! constant Hamiltonian `H_u(t_k, ω)` for `Δt = T/M`, giving the propagator
//! `X_k = exp(−iΔt H_u)`. The trace keeps each segment's eigendecomposition
//! because the gradient formulas work in that eigenbasis.

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::linalg::{ensure_same_shape, CMatrix, EigenDecomposition, Unitary};
use crate::systems::ParameterizedSystem;

/// `M` equal-length segments of control amplitudes, stored segment-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstantPulse {
    total_time: f64,
    n_segments: usize,
    n_controls: usize,
    amplitudes: Vec<f64>,
}

impl PiecewiseConstantPulse {
    pub fn new(total_time: f64, n_segments: usize, n_controls: usize, amplitudes: Vec<f64>) -> Result<Self> {
        if !(total_time > 0.0) || !total_time.is_finite() {
            return Err(Error::InvalidPulse(format!("total time must be positive, got {total_time}")));
        }
        if n_segments == 0 {
            return Err(Error::InvalidPulse("pulse needs at least one segment".into()));
        }
        if amplitudes.len() != n_segments * n_controls {
            return Err(Error::InvalidPulse(format!(
                "expected {} amplitudes, got {}",
                n_segments * n_controls,
                amplitudes.len()
            )));
        }
        if amplitudes.iter().any(|u| !u.is_finite()) {
            return Err(Error::InvalidPulse("amplitudes must be finite".into()));
        }
        Ok(Self {
            total_time,
            n_segments,
            n_controls,
            amplitudes,
        })
    }

    pub fn zeros(total_time: f64, n_segments: usize, n_controls: usize) -> Result<Self> {
        Self::new(total_time, n_segments, n_controls, vec![0.0; n_segments * n_controls])
    }

    /// Same amplitudes in every segment.
    pub fn constant(total_time: f64, n_segments: usize, amps: &[f64]) -> Result<Self> {
        let amplitudes = amps.iter().copied().cycle().take(n_segments * amps.len()).collect();
        Self::new(total_time, n_segments, amps.len(), amplitudes)
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    pub fn dt(&self) -> f64 {
        self.total_time / self.n_segments as f64
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Amplitudes of segment `k` (0-based).
    pub fn segment(&self, k: usize) -> &[f64] {
        &self.amplitudes[k * self.n_controls..(k + 1) * self.n_controls]
    }

    /// A pulse with the same timing and new amplitudes.
    pub fn with_amplitudes(&self, amplitudes: Vec<f64>) -> Result<Self> {
        Self::new(self.total_time, self.n_segments, self.n_controls, amplitudes)
    }

    /// Splits every segment into `factor` equal pieces with the same amplitude.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidPulse("refinement factor must be positive".into()));
        }
        let amplitudes = (0..self.n_segments)
            .flat_map(|k| std::iter::repeat_n(self.segment(k), factor).flatten().copied())
            .collect();
        Self::new(self.total_time, self.n_segments * factor, self.n_controls, amplitudes)
    }

    /// Segments in reverse order.
    pub fn reversed(&self) -> Self {
        let amplitudes = (0..self.n_segments)
            .rev()
            .flat_map(|k| self.segment(k).iter().copied())
            .collect();
        Self {
            amplitudes,
            ..self.clone()
        }
    }

    /// Clips every amplitude to `[-bound, bound]`.
    pub fn clamp(&mut self, bound: f64) {
        self.amplitudes.iter_mut().for_each(|u| *u = u.clamp(-bound, bound));
    }

    pub fn max_abs_amplitude(&self) -> f64 {
        self.amplitudes.iter().fold(0.0, |m, u| m.max(u.abs()))
    }
}

/// Default segment count `ceil(4T)`, so that `Δt ≤ 0.25`.
pub fn default_segment_count(total_time: f64) -> usize {
    ((4.0 * total_time).ceil() as usize).max(1)
}

/// Uniform amplitudes on `[-scale, scale]` drawn from `rng`.
///
/// Each draw takes the top 53 bits of one `next_u64` output, so the result is
/// platform-independent for a given generator state.
pub fn random_pulse(
    rng: &mut impl RngCore,
    total_time: f64,
    n_segments: usize,
    n_controls: usize,
    scale: f64,
) -> PiecewiseConstantPulse {
    let amplitudes = (0..n_segments * n_controls)
        .map(|_| {
            let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            scale * (2.0 * unit - 1.0)
        })
        .collect();
    PiecewiseConstantPulse::new(total_time, n_segments, n_controls, amplitudes)
        .expect("random pulse is well-formed")
}

/// One time slice: its propagator and the eigendecomposition it came from.
#[derive(Clone, Debug)]
pub struct Segment {
    pub propagator: CMatrix,
    pub eig: EigenDecomposition,
}

/// Segment propagators and the forward products `X_{k:0}`.
#[derive(Clone, Debug)]
pub struct PropagationTrace {
    pub dt: f64,
    pub segments: Vec<Segment>,
    /// `forward[k] = X_k ⋯ X_1`, with `forward[0] = I`.
    pub forward: Vec<CMatrix>,
}

impl PropagationTrace {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn dim(&self) -> usize {
        self.forward[0].nrows()
    }

    pub fn final_matrix(&self) -> &CMatrix {
        self.forward.last().expect("trace has the identity entry")
    }

    pub fn final_unitary(&self) -> Unitary {
        Unitary::new_unchecked(self.final_matrix().clone())
    }
}

/// `exp(−i·dt·H_u(ω))` together with the eigendecomposition of `H_u`.
pub fn segment_propagator(
    sys: &ParameterizedSystem,
    omega: f64,
    amps: &[f64],
    dt: f64,
) -> Result<(Unitary, EigenDecomposition)> {
    let seg = segment(sys, omega, amps, dt)?;
    Ok((Unitary::new_unchecked(seg.propagator), seg.eig))
}

pub(crate) fn segment(
    sys: &ParameterizedSystem,
    omega: f64,
    amps: &[f64],
    dt: f64,
) -> Result<Segment> {
    if amps.len() != sys.n_controls() {
        return Err(Error::InvalidPulse(format!(
            "system has {} controls, segment has {} amplitudes",
            sys.n_controls(),
            amps.len()
        )));
    }
    let eig = sys.hamiltonian(omega, amps).eigh()?;
    Ok(Segment {
        propagator: eig.exp_neg_i(dt),
        eig,
    })
}

fn check_pulse(sys: &ParameterizedSystem, pulse: &PiecewiseConstantPulse) -> Result<()> {
    if pulse.n_controls() != sys.n_controls() {
        return Err(Error::InvalidPulse(format!(
            "system has {} controls, pulse has {}",
            sys.n_controls(),
            pulse.n_controls()
        )));
    }
    Ok(())
}

pub fn propagate(
    sys: &ParameterizedSystem,
    omega: f64,
    pulse: &PiecewiseConstantPulse,
) -> Result<PropagationTrace> {
    check_pulse(sys, pulse)?;
    let dt = pulse.dt();
    let d = sys.dim();
    let mut segments = Vec::with_capacity(pulse.n_segments());
    let mut forward = Vec::with_capacity(pulse.n_segments() + 1);
    forward.push(CMatrix::identity(d, d));
    for k in 0..pulse.n_segments() {
        let seg = segment(sys, omega, pulse.segment(k), dt)?;
        let next = &seg.propagator * forward.last().unwrap();
        forward.push(next);
        segments.push(seg);
    }
    Ok(PropagationTrace {
        dt,
        segments,
        forward,
    })
}

/// `U(t)` for `0 ≤ t ≤ T`, including the partial segment containing `t`.
pub fn propagate_until(
    sys: &ParameterizedSystem,
    omega: f64,
    pulse: &PiecewiseConstantPulse,
    t: f64,
) -> Result<CMatrix> {
    check_pulse(sys, pulse)?;
    if !(0.0..=pulse.total_time() * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::InvalidPulse(format!(
            "time {t} outside [0, {}]",
            pulse.total_time()
        )));
    }
    let dt = pulse.dt();
    let d = sys.dim();
    let mut u = CMatrix::identity(d, d);
    let mut elapsed = 0.0;
    for k in 0..pulse.n_segments() {
        let step = dt.min(t - elapsed);
        if step <= 0.0 {
            break;
        }
        let eig = sys.hamiltonian(omega, pulse.segment(k)).eigh()?;
        u = eig.exp_neg_i(step) * u;
        elapsed = (k + 1) as f64 * dt;
    }
    Ok(u)
}

/// `Λ†_{M+1:k+1} = U_targ† X_M ⋯ X_{k+1}` for `k = 1..M`; the last entry is `U_targ†`.
pub fn backward_products(trace: &PropagationTrace, u_targ: &Unitary) -> Result<Vec<CMatrix>> {
    ensure_same_shape(u_targ.matrix(), &trace.forward[0])?;
    let m = trace.n_segments();
    let mut out = vec![CMatrix::zeros(0, 0); m];
    let mut acc = u_targ.matrix().adjoint();
    for k in (0..m).rev() {
        if k + 1 < m {
            acc = &acc * &trace.segments[k + 1].propagator;
        }
        out[k] = acc.clone();
    }
    Ok(out)
}
