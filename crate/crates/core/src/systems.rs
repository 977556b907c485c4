//! Model systems with an uncertain drift coefficient and their ensembles.
//!
//! A [`ParameterizedSystem`] splits the drift as `H_d(ω) = ω·h1 + h2`, which is
//! the form every ω-derivative in [`crate::fidelity`] differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pauli, spectral_norm, CMatrix, Hermitian, C64};
use crate::propagation::{propagate_until, PiecewiseConstantPulse};

/// Bilinear system `H(t, ω) = ω·h1 + h2 + Σ_j u_j(t)·H_j`.
#[derive(Clone, Debug)]
pub struct ParameterizedSystem {
    label: String,
    h1: Hermitian,
    h2: Hermitian,
    controls: Vec<Hermitian>,
}

impl ParameterizedSystem {
    pub fn new(
        label: impl Into<String>,
        h1: Hermitian,
        h2: Hermitian,
        controls: Vec<Hermitian>,
    ) -> Result<Self> {
        let d = h1.dim();
        for m in std::iter::once(&h2).chain(controls.iter()) {
            if m.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: (d, d),
                    found: (m.dim(), m.dim()),
                });
            }
        }
        Ok(Self {
            label: label.into(),
            h1,
            h2,
            controls,
        })
    }

    /// Builds a system from Pauli-string descriptions, see [`parse_operator`].
    pub fn from_description(label: impl Into<String>, drift: &str, controls: &[&str]) -> Result<Self> {
        let parsed = parse_operator(drift)?;
        let mut hs = Vec::with_capacity(controls.len());
        for c in controls {
            let p = parse_operator(c)?;
            if p.n_qubits != parsed.n_qubits {
                return Err(Error::Parse {
                    input: c.to_string(),
                    message: format!("expected {} qubits", parsed.n_qubits),
                });
            }
            if p.h1.matrix().iter().any(|z| *z != C64::new(0.0, 0.0)) {
                return Err(Error::Parse {
                    input: c.to_string(),
                    message: "control operators cannot depend on w".into(),
                });
            }
            hs.push(p.h2);
        }
        Self::new(label, parsed.h1, parsed.h2, hs)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.h1.dim()
    }

    pub fn h1(&self) -> &Hermitian {
        &self.h1
    }

    pub fn h2(&self) -> &Hermitian {
        &self.h2
    }

    pub fn controls(&self) -> &[Hermitian] {
        &self.controls
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    /// `ω·h1 + h2`.
    pub fn drift(&self, omega: f64) -> Hermitian {
        &self.h1.scaled(omega) + &self.h2
    }

    /// Segment Hamiltonian `ω·h1 + h2 + Σ_j u_j H_j`.
    pub fn hamiltonian(&self, omega: f64, amps: &[f64]) -> Hermitian {
        debug_assert_eq!(amps.len(), self.controls.len());
        let mut m = self.h1.matrix() * C64::new(omega, 0.0) + self.h2.matrix();
        for (h, &u) in self.controls.iter().zip(amps) {
            m += h.matrix() * C64::new(u, 0.0);
        }
        Hermitian::new_unchecked(m)
    }
}

/// Which ω-coupling to use for system B.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemBVariant {
    /// `h1 = X⊗I + I⊗X`.
    #[default]
    Eq4,
    /// `h1 = X⊗X + I⊗X`.
    Sec2,
}

impl std::str::FromStr for SystemBVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq4" => Ok(Self::Eq4),
            "sec2" => Ok(Self::Sec2),
            _ => Err(Error::InvalidConfig(format!("unknown system B variant `{s}`"))),
        }
    }
}

/// Serializable name of a system, enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemId {
    A,
    B { variant: SystemBVariant },
    Qubit,
    Custom { drift: String, controls: Vec<String> },
}

impl SystemId {
    pub fn build(&self) -> Result<ParameterizedSystem> {
        Ok(match self {
            SystemId::A => system_a(),
            SystemId::B { variant } => system_b(*variant),
            SystemId::Qubit => single_qubit(),
            SystemId::Custom { drift, controls } => {
                let refs: Vec<&str> = controls.iter().map(String::as_str).collect();
                ParameterizedSystem::from_description("custom", drift, &refs)?
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            SystemId::A => "a".into(),
            SystemId::B { variant: SystemBVariant::Eq4 } => "b-eq4".into(),
            SystemId::B { variant: SystemBVariant::Sec2 } => "b-sec2".into(),
            SystemId::Qubit => "qubit".into(),
            SystemId::Custom { .. } => "custom".into(),
        }
    }
}

fn pauli_sum(terms: &[&str]) -> Hermitian {
    let mut acc: Option<CMatrix> = None;
    for t in terms {
        let m = pauli::string(t).expect("static Pauli string");
        acc = Some(match acc {
            None => m,
            Some(a) => a + m,
        });
    }
    Hermitian::new_unchecked(acc.expect("at least one term"))
}

/// `H_d = ω X⊗I + X⊗X + Y⊗Y + Z⊗Z`, `H_c = Z⊗I`.
pub fn system_a() -> ParameterizedSystem {
    ParameterizedSystem::new(
        "a",
        pauli_sum(&["XI"]),
        pauli_sum(&["XX", "YY", "ZZ"]),
        vec![pauli_sum(&["ZI"])],
    )
    .expect("system A dimensions agree")
}

/// `H_d = ω h1 + Z⊗I + Y⊗Y + Z⊗Z`, `H_c = X⊗I`, with `h1` chosen by `variant`.
pub fn system_b(variant: SystemBVariant) -> ParameterizedSystem {
    let (label, h1) = match variant {
        SystemBVariant::Eq4 => ("b-eq4", pauli_sum(&["XI", "IX"])),
        SystemBVariant::Sec2 => ("b-sec2", pauli_sum(&["XX", "IX"])),
    };
    ParameterizedSystem::new(
        label,
        h1,
        pauli_sum(&["ZI", "YY", "ZZ"]),
        vec![pauli_sum(&["XI"])],
    )
    .expect("system B dimensions agree")
}

/// Single qubit `H_d = ω X`, `H_c = Z`.
pub fn single_qubit() -> ParameterizedSystem {
    ParameterizedSystem::new(
        "qubit",
        pauli_sum(&["X"]),
        Hermitian::zeros(2),
        vec![pauli_sum(&["Z"])],
    )
    .expect("single-qubit dimensions agree")
}

/// Sampled values of the uncertain parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaGrid {
    pub omega_0: f64,
    pub omega_1: f64,
    pub points: Vec<f64>,
}

impl OmegaGrid {
    pub fn single(omega: f64) -> Self {
        Self {
            omega_0: omega,
            omega_1: omega,
            points: vec![omega],
        }
    }

    /// Arbitrary non-decreasing sample points; the interval is their hull.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidGrid("grid points must be non-decreasing".into()));
        }
        Ok(Self {
            omega_0: points[0],
            omega_1: *points.last().unwrap(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, omega: f64) -> bool {
        omega >= self.omega_0 && omega <= self.omega_1
    }
}

/// `n` equally spaced points on `[omega_0, omega_1]`, both endpoints included.
pub fn discretize(omega_0: f64, omega_1: f64, n: usize) -> Result<OmegaGrid> {
    if n == 0 {
        return Err(Error::InvalidGrid("grid size must be positive".into()));
    }
    if !omega_0.is_finite() || !omega_1.is_finite() {
        return Err(Error::InvalidGrid("interval endpoints must be finite".into()));
    }
    if n == 1 {
        return Ok(OmegaGrid::single(omega_0));
    }
    if omega_0 >= omega_1 {
        return Err(Error::InvalidGrid(format!(
            "need omega_0 < omega_1, got [{omega_0}, {omega_1}]"
        )));
    }
    let step = (omega_1 - omega_0) / (n - 1) as f64;
    let mut points: Vec<f64> = (0..n).map(|i| omega_0 + i as f64 * step).collect();
    points[n - 1] = omega_1;
    Ok(OmegaGrid {
        omega_0,
        omega_1,
        points,
    })
}

/// Block-diagonal lift of a parameterized system over a grid.
#[derive(Clone, Debug)]
pub struct EnsembleSystem {
    pub base: ParameterizedSystem,
    pub grid: OmegaGrid,
    pub lifted_drift: Hermitian,
    pub lifted_controls: Vec<Hermitian>,
}

fn block_diagonal(blocks: &[&CMatrix]) -> CMatrix {
    let d = blocks[0].nrows();
    let n = blocks.len();
    let mut out = CMatrix::zeros(n * d, n * d);
    for (b, m) in blocks.iter().enumerate() {
        out.view_mut((b * d, b * d), (d, d)).copy_from(*m);
    }
    out
}

pub fn lift_ensemble(sys: &ParameterizedSystem, grid: &OmegaGrid) -> EnsembleSystem {
    let drifts: Vec<Hermitian> = grid.points.iter().map(|&w| sys.drift(w)).collect();
    let refs: Vec<&CMatrix> = drifts.iter().map(Hermitian::matrix).collect();
    let lifted_drift = Hermitian::new_unchecked(block_diagonal(&refs));
    let lifted_controls = sys
        .controls()
        .iter()
        .map(|h| {
            let refs = vec![h.matrix(); grid.len()];
            Hermitian::new_unchecked(block_diagonal(&refs))
        })
        .collect();
    EnsembleSystem {
        base: sys.clone(),
        grid: grid.clone(),
        lifted_drift,
        lifted_controls,
    }
}

impl EnsembleSystem {
    pub fn block_dim(&self) -> usize {
        self.base.dim()
    }

    pub fn members(&self) -> usize {
        self.grid.len()
    }

    /// Diagonal block `n` of the lifted drift.
    pub fn drift_block(&self, n: usize) -> CMatrix {
        let d = self.block_dim();
        self.lifted_drift.matrix().view((n * d, n * d), (d, d)).into_owned()
    }
}

/// Both sides of the propagator-distance bound at the final pulse time.
pub fn duhamel_gap(
    sys: &ParameterizedSystem,
    pulse: &PiecewiseConstantPulse,
    omega: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    duhamel_gap_at(sys, pulse, omega, sigma, pulse.total_time())
}

/// `(‖U_ω(t) − U_σ(t)‖, t·|ω − σ|·‖h1‖)` at an intermediate time `t ∈ [0, T]`.
pub fn duhamel_gap_at(
    sys: &ParameterizedSystem,
    pulse: &PiecewiseConstantPulse,
    omega: f64,
    sigma: f64,
    t: f64,
) -> Result<(f64, f64)> {
    let uw = propagate_until(sys, omega, pulse, t)?;
    let us = propagate_until(sys, sigma, pulse, t)?;
    let lhs = spectral_norm(&(uw - us));
    let rhs = t * (omega - sigma).abs() * spectral_norm(sys.h1().matrix());
    Ok((lhs, rhs))
}

/// Result of parsing a Pauli-sum description.
#[derive(Clone, Debug)]
pub struct ParsedOperator {
    pub n_qubits: usize,
    /// Terms carrying the `w*` marker.
    pub h1: Hermitian,
    /// All other terms.
    pub h2: Hermitian,
}

/// Parses sums like `"w*XI + XX + YY - 0.5*ZZ"`.
///
/// Terms are separated by `+` or `-`. Each term is an optional real
/// coefficient (optionally followed by `*`), an optional `w*` marker that
/// assigns the term to the ω-dependent part, and a Pauli string over
/// `{I, X, Y, Z}`. All Pauli strings must have the same length.
pub fn parse_operator(text: &str) -> Result<ParsedOperator> {
    let err = |message: String| Error::Parse {
        input: text.to_string(),
        message,
    };
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(err("empty operator".into()));
    }

    // Split into signed terms, treating a sign after `e`/`E` inside a number as part of it.
    let chars: Vec<char> = compact.chars().collect();
    let mut terms: Vec<(f64, String)> = Vec::new();
    let mut sign = 1.0;
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let in_exponent = i > 0
            && matches!(chars[i - 1], 'e' | 'E')
            && i > 1
            && chars[i - 2].is_ascii_digit();
        if (c == '+' || c == '-') && !in_exponent {
            if !current.is_empty() {
                terms.push((sign, std::mem::take(&mut current)));
                sign = 1.0;
            } else if i > 0 && !terms.is_empty() && !matches!(chars[i - 1], '+' | '-') {
                return Err(err("dangling operator".into()));
            }
            if c == '-' {
                sign = -sign;
            }
        } else {
            current.push(c);
        }
    }
    if current.is_empty() {
        return Err(err("trailing operator".into()));
    }
    terms.push((sign, current));

    let mut n_qubits: Option<usize> = None;
    let mut h1: Option<CMatrix> = None;
    let mut h2: Option<CMatrix> = None;
    for (sign, term) in terms {
        let pauli_start = term
            .rfind(|c: char| !matches!(c, 'I' | 'X' | 'Y' | 'Z'))
            .map_or(0, |p| p + 1);
        let (prefix, letters) = term.split_at(pauli_start);
        if letters.is_empty() {
            return Err(err(format!("term `{term}` has no Pauli string")));
        }
        let mut prefix = prefix.strip_suffix('*').unwrap_or(prefix);
        let mut omega_term = false;
        if let Some(rest) = prefix.strip_suffix('w') {
            omega_term = true;
            prefix = rest.strip_suffix('*').unwrap_or(rest);
        }
        let coef = if prefix.is_empty() {
            1.0
        } else {
            prefix
                .parse::<f64>()
                .map_err(|_| err(format!("bad coefficient `{prefix}` in term `{term}`")))?
        };
        if !coef.is_finite() {
            return Err(err(format!("non-finite coefficient in term `{term}`")));
        }
        match n_qubits {
            None => n_qubits = Some(letters.len()),
            Some(n) if n != letters.len() => {
                return Err(err(format!("term `{term}` has {} qubits, expected {n}", letters.len())))
            }
            _ => {}
        }
        let m = pauli::string(letters)? * C64::new(sign * coef, 0.0);
        let slot = if omega_term { &mut h1 } else { &mut h2 };
        *slot = Some(match slot.take() {
            None => m,
            Some(a) => a + m,
        });
    }
    let n = n_qubits.expect("at least one term");
    let d = 1usize << n;
    let zero = || CMatrix::zeros(d, d);
    Ok(ParsedOperator {
        n_qubits: n,
        h1: Hermitian::new_unchecked(h1.unwrap_or_else(zero)),
        h2: Hermitian::new_unchecked(h2.unwrap_or_else(zero)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{commutator, testutil::uniform, Tolerances};
    use crate::propagation::random_pulse;
    use rand_core::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn p(s: &str) -> CMatrix {
        pauli::string(s).unwrap()
    }

    #[test]
    fn system_a_terms() {
        let a = system_a();
        assert_eq!(a.dim(), 4);
        assert_eq!(a.drift(0.0).matrix(), &(p("XX") + p("YY") + p("ZZ")));
        for w in [1.0, 2.0] {
            let diff = a.drift(w).matrix() - a.drift(0.0).matrix();
            assert_eq!(diff, p("XI") * C64::new(w, 0.0));
        }
        let d = a.drift(1.5);
        assert!(Hermitian::new(d.matrix().clone()).is_ok());
        assert_eq!(d.trace(), 0.0);
    }

    #[test]
    fn system_a_conjugation_by_control() {
        let a = system_a();
        let zi = p("ZI");
        for w in [-3.0, 0.5, 1.0, 1.7] {
            let conj = &zi * a.drift(w).matrix() * &zi;
            let expect = -a.drift(w).matrix() + p("ZZ") * C64::new(2.0, 0.0);
            assert!((conj - expect).norm() <= 1e-12);
        }
    }

    #[test]
    fn system_b_terms_and_conjugation() {
        let b = system_b(SystemBVariant::Eq4);
        assert_eq!(b.drift(0.0).matrix(), &(p("ZI") + p("YY") + p("ZZ")));
        assert_eq!(b.h1().matrix(), &(p("XI") + p("IX")));
        let s = system_b(SystemBVariant::Sec2);
        assert_eq!(s.h1().matrix(), &(p("XX") + p("IX")));
        let xi = p("XI");
        for sys in [b, s] {
            assert!(commutator(sys.h1().matrix(), &xi).unwrap().norm() <= 1e-12);
            for w in [0.3, 1.0, 2.0] {
                let conj = &xi * sys.drift(w).matrix() * &xi;
                let expect = sys.h1().matrix() * C64::new(w, 0.0) - sys.h2().matrix();
                assert!((conj - expect).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn drifts_are_hermitian_over_range() {
        for sys in [system_a(), system_b(SystemBVariant::Eq4), system_b(SystemBVariant::Sec2)] {
            for i in 0..=40 {
                let w = -10.0 + 0.5 * i as f64;
                let d = sys.drift(w).into_matrix();
                Hermitian::with_tolerance(d, Tolerances::DEFAULT.hermitian).unwrap();
            }
        }
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(1.0, 2.0, 2).unwrap().points, vec![1.0, 2.0]);
        assert_eq!(discretize(1.0, 2.0, 3).unwrap().points, vec![1.0, 1.5, 2.0]);
        let g = discretize(1.0, 2.0, 12).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g.points[0], 1.0);
        assert_eq!(g.points[11], 2.0);
        for w in g.points.windows(2) {
            assert!((w[1] - w[0] - 1.0 / 11.0).abs() < 1e-15);
        }
        assert_eq!(discretize(1.0, 1.0, 1).unwrap().points, vec![1.0]);
        assert!(discretize(1.0, 2.0, 0).is_err());
        assert!(discretize(2.0, 1.0, 3).is_err());
    }

    #[test]
    fn lift_blocks() {
        let a = system_a();
        let single = lift_ensemble(&a, &OmegaGrid::single(1.0));
        assert_eq!(single.lifted_drift.matrix(), a.drift(1.0).matrix());

        let grid = discretize(1.0, 2.0, 3).unwrap();
        let ens = lift_ensemble(&a, &grid);
        assert_eq!(ens.lifted_drift.dim(), 12);
        assert_eq!(ens.lifted_drift.trace(), 0.0);
        for n in 0..3 {
            assert_eq!(&ens.drift_block(n), a.drift(grid.points[n]).matrix());
        }
        let zero = C64::new(0.0, 0.0);
        for i in 0..12 {
            for j in 0..12 {
                if i / 4 != j / 4 {
                    assert_eq!(ens.lifted_drift.matrix()[(i, j)], zero);
                    assert_eq!(ens.lifted_controls[0].matrix()[(i, j)], zero);
                } else {
                    assert_eq!(
                        ens.lifted_controls[0].matrix()[(i, j)],
                        a.controls()[0].matrix()[(i % 4, j % 4)]
                    );
                }
            }
        }
    }

    #[test]
    fn duhamel_trivial_cases() {
        let a = system_a();
        let mut rng = SplitMix64::seed_from_u64(5);
        let pulse = random_pulse(&mut rng, 5.0, 20, 1, 1.0);
        assert_eq!(duhamel_gap(&a, &pulse, 1.3, 1.3).unwrap(), (0.0, 0.0));
        let (lhs, rhs) = duhamel_gap_at(&a, &pulse, 1.0, 1.1, 0.0).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
    }

    #[test]
    fn duhamel_bound_holds() {
        let a = system_a();
        let mut rng = SplitMix64::seed_from_u64(6);
        let pulse = random_pulse(&mut rng, 5.0, 20, 1, 1.0);
        let (lhs, rhs) = duhamel_gap(&a, &pulse, 1.0, 1.1).unwrap();
        assert!(lhs > 0.0 && lhs <= rhs + 1e-9, "{lhs} {rhs}");
        for _ in 0..20 {
            let t = 5.0 * (0.5 + 0.5 * uniform(&mut rng));
            let (lhs, rhs) = duhamel_gap_at(&a, &pulse, 1.0, 1.1, t).unwrap();
            assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn parse_builtin_descriptions() {
        let a = parse_operator("w*XI + XX + YY + ZZ").unwrap();
        assert_eq!(a.n_qubits, 2);
        assert_eq!(&a.h1, system_a().h1());
        assert_eq!(&a.h2, system_a().h2());

        let b = parse_operator("w*XI + w*IX + ZI + YY + ZZ").unwrap();
        assert_eq!(&b.h1, system_b(SystemBVariant::Eq4).h1());
        assert_eq!(&b.h2, system_b(SystemBVariant::Eq4).h2());

        let c = parse_operator("-0.5*ZZ + 2 w*XI - 1e-1XX").unwrap();
        let expect_h2 = p("ZZ") * C64::new(-0.5, 0.0) + p("XX") * C64::new(-0.1, 0.0);
        assert!((c.h2.matrix() - expect_h2).norm() < 1e-15);
        assert_eq!(c.h1.matrix(), &(p("XI") * C64::new(2.0, 0.0)));

        let sys = ParameterizedSystem::from_description("a", "w*XI + XX + YY + ZZ", &["ZI"]).unwrap();
        assert_eq!(sys.controls()[0].matrix(), &p("ZI"));
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in ["", "XI +", "XI + XYZ", "2*", "XQ", "a*XI", "XI ++ w"] {
            assert!(parse_operator(bad).is_err(), "accepted `{bad}`");
        }
        assert!(ParameterizedSystem::from_description("x", "XI", &["w*ZI"]).is_err());
        assert!(ParameterizedSystem::from_description("x", "XI", &["Z"]).is_err());
    }
}
