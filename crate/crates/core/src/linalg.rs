//! Dense complex matrix primitives.
//!
//! Everything here operates on small dense matrices (two-qubit systems and
//! their block-diagonal ensembles, so at most a few dozen rows). Matrices are
//! `nalgebra::DMatrix<Complex64>`; the [`Hermitian`] and [`Unitary`] newtypes
//! carry the structural invariants the rest of the crate relies on.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// The imaginary unit.
pub const IM: C64 = C64::new(0.0, 1.0);

/// Numerical tolerances shared by the structural checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Relative Frobenius bound on `M - M†`.
    pub hermitian: f64,
    /// Bound on `‖U†U - I‖_F / √d`.
    pub unitary: f64,
    /// Relative bound on `‖VΛV† - H‖_F`.
    pub reconstruction: f64,
    /// Relative eigenvalue gap below which two eigenvalues count as equal.
    pub degeneracy: f64,
    /// Relative residual above which a Lie-algebra candidate is independent.
    pub independence: f64,
    /// Overlap magnitude below which the polar phase is undefined.
    pub phase: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        hermitian: 1e-12,
        unitary: 1e-9,
        reconstruction: 1e-9,
        degeneracy: 1e-10,
        independence: 1e-8,
        phase: 1e-12,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Matrix norm used by the limit-formula and bound checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Norm {
    /// Largest singular value.
    #[default]
    Spectral,
    Frobenius,
}

impl Norm {
    pub fn of(self, m: &CMatrix) -> f64 {
        match self {
            Norm::Spectral => spectral_norm(m),
            Norm::Frobenius => m.norm(),
        }
    }
}

pub fn spectral_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub(crate) fn ensure_square(m: &CMatrix) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

pub(crate) fn ensure_same_shape(a: &CMatrix, b: &CMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    Ok(())
}

fn ensure_finite(m: &CMatrix) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Trace of `a * b` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// A square matrix equal to its conjugate transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct Hermitian(CMatrix);

impl Hermitian {
    pub fn new(m: CMatrix) -> Result<Self> {
        Self::with_tolerance(m, Tolerances::DEFAULT.hermitian)
    }

    pub fn with_tolerance(m: CMatrix, tol: f64) -> Result<Self> {
        ensure_square(&m)?;
        ensure_finite(&m)?;
        let scale = m.norm();
        let dev = (&m - m.adjoint()).norm();
        if dev > tol * scale {
            return Err(Error::NotHermitian {
                deviation: dev / scale,
            });
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self(CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Real trace (the imaginary part of a Hermitian trace vanishes).
    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// The matrix with its identity component removed.
    pub fn traceless(&self) -> Hermitian {
        let d = self.dim();
        let shift = self.trace() / d as f64;
        let mut m = self.0.clone();
        for i in 0..d {
            m[(i, i)] -= C64::new(shift, 0.0);
        }
        Hermitian(m)
    }

    pub fn scaled(&self, s: f64) -> Hermitian {
        Hermitian(self.0.map(|z| z * s))
    }

    pub fn eigh(&self) -> Result<EigenDecomposition> {
        EigenDecomposition::of(self)
    }

    /// Frobenius inner product `Re tr(A† B)`.
    pub fn inner(&self, other: &Hermitian) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }
}

impl Add<&Hermitian> for &Hermitian {
    type Output = Hermitian;
    fn add(self, rhs: &Hermitian) -> Hermitian {
        Hermitian(&self.0 + &rhs.0)
    }
}

impl Sub<&Hermitian> for &Hermitian {
    type Output = Hermitian;
    fn sub(self, rhs: &Hermitian) -> Hermitian {
        Hermitian(&self.0 - &rhs.0)
    }
}

impl Neg for &Hermitian {
    type Output = Hermitian;
    fn neg(self) -> Hermitian {
        Hermitian(-&self.0)
    }
}

impl Mul<f64> for &Hermitian {
    type Output = Hermitian;
    fn mul(self, rhs: f64) -> Hermitian {
        self.scaled(rhs)
    }
}

/// A square matrix with `U†U = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct Unitary(CMatrix);

impl Unitary {
    pub fn new(m: CMatrix) -> Result<Self> {
        Self::with_tolerance(m, Tolerances::DEFAULT.unitary)
    }

    pub fn with_tolerance(m: CMatrix, tol: f64) -> Result<Self> {
        ensure_square(&m)?;
        ensure_finite(&m)?;
        let dev = unitarity_deviation(&m);
        if dev > tol * (m.nrows() as f64).sqrt() {
            return Err(Error::NotUnitary { deviation: dev });
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn adjoint(&self) -> Unitary {
        Unitary(self.0.adjoint())
    }

    /// `‖U†U − I‖_F`.
    pub fn deviation(&self) -> f64 {
        unitarity_deviation(&self.0)
    }
}

/// `‖M†M − I‖_F` for any square matrix.
pub fn unitarity_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    (m.adjoint() * m - CMatrix::identity(n, n)).norm()
}

/// Eigendecomposition `H = V diag(λ) V†` of a Hermitian matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMatrix,
}

impl EigenDecomposition {
    pub fn of(h: &Hermitian) -> Result<Self> {
        let d = h.dim();
        let eig = SymmetricEigen::try_new(h.matrix().clone(), f64::EPSILON, 10_000)
            .ok_or(Error::EigenNonConvergence)?;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigenvectors = CMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(f(λ)) V†`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> CMatrix {
        let mut vd = self.eigenvectors.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            let s = f(lambda);
            vd.column_mut(j).iter_mut().for_each(|z| *z *= s);
        }
        vd * self.eigenvectors.adjoint()
    }

    pub fn reconstruct(&self) -> CMatrix {
        self.apply_fn(|l| C64::new(l, 0.0))
    }

    /// `exp(−i·scale·H)`.
    pub fn exp_neg_i(&self, scale: f64) -> CMatrix {
        self.apply_fn(|l| C64::from_polar(1.0, -scale * l))
    }
}

pub mod pauli {
    use super::{CMatrix, C64};
    use crate::error::{Error, Result};

    fn m2(a: [[C64; 2]; 2]) -> CMatrix {
        CMatrix::from_fn(2, 2, |i, j| a[i][j])
    }

    const O: C64 = C64::new(0.0, 0.0);
    const L: C64 = C64::new(1.0, 0.0);
    const J: C64 = C64::new(0.0, 1.0);

    pub fn i() -> CMatrix {
        m2([[L, O], [O, L]])
    }

    pub fn x() -> CMatrix {
        m2([[O, L], [L, O]])
    }

    pub fn y() -> CMatrix {
        m2([[O, -J], [J, O]])
    }

    pub fn z() -> CMatrix {
        m2([[L, O], [O, -L]])
    }

    pub fn by_letter(c: char) -> Option<CMatrix> {
        match c {
            'I' => Some(i()),
            'X' => Some(x()),
            'Y' => Some(y()),
            'Z' => Some(z()),
            _ => None,
        }
    }

    /// Tensor product of single-qubit Paulis, leftmost letter is the first factor.
    pub fn string(s: &str) -> Result<CMatrix> {
        let mut out: Option<CMatrix> = None;
        for c in s.chars() {
            let p = by_letter(c).ok_or_else(|| Error::Parse {
                input: s.to_string(),
                message: format!("unknown Pauli letter `{c}`"),
            })?;
            out = Some(match out {
                None => p,
                Some(acc) => super::kron(&acc, &p),
            });
        }
        out.ok_or_else(|| Error::Parse {
            input: s.to_string(),
            message: "empty Pauli string".into(),
        })
    }
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// `AB − BA`.
pub fn commutator(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    ensure_square(a)?;
    ensure_square(b)?;
    ensure_same_shape(a, b)?;
    Ok(a * b - b * a)
}

/// `exp(−i·scale·h)` through the eigendecomposition of `h`.
pub fn expm_hermitian(h: &Hermitian, scale: f64) -> Result<Unitary> {
    let eig = h.eigh()?;
    Unitary::new(eig.exp_neg_i(scale))
}

pub(crate) fn mat_pow(m: &CMatrix, mut n: u64) -> CMatrix {
    let d = m.nrows();
    let mut result = CMatrix::identity(d, d);
    let mut base = m.clone();
    while n > 0 {
        if n & 1 == 1 {
            result = &result * &base;
        }
        n >>= 1;
        if n > 0 {
            base = &base * &base;
        }
    }
    result
}

fn ensure_same_hermitian_dims(a: &Hermitian, b: &Hermitian) -> Result<()> {
    ensure_same_shape(a.matrix(), b.matrix())
}

/// Distance between the `n`-step Trotter product and the exact evolution,
/// `‖(e^{−iAt/n} e^{−iBt/n})ⁿ − e^{−i(A+B)t}‖`.
pub fn trotter_error(a: &Hermitian, b: &Hermitian, t: f64, n: usize) -> Result<f64> {
    trotter_error_in(Norm::Spectral, a, b, t, n)
}

pub fn trotter_error_in(norm: Norm, a: &Hermitian, b: &Hermitian, t: f64, n: usize) -> Result<f64> {
    ensure_same_hermitian_dims(a, b)?;
    if n == 0 {
        return Err(Error::InvalidConfig("Trotter step count must be positive".into()));
    }
    let s = t / n as f64;
    let step = a.eigh()?.exp_neg_i(s) * b.eigh()?.exp_neg_i(s);
    let approx = mat_pow(&step, n as u64);
    let exact = (a + b).eigh()?.exp_neg_i(t);
    Ok(norm.of(&(approx - exact)))
}

/// Distance between the `n²`-fold group commutator and its limit,
/// `‖(e^{−iAs} e^{−iBs} e^{iAs} e^{iBs})^{n²} − e^{−[A,B]t²}‖` with `s = t/n`.
pub fn commutator_limit_error(a: &Hermitian, b: &Hermitian, t: f64, n: usize) -> Result<f64> {
    commutator_limit_error_in(Norm::Spectral, a, b, t, n)
}

pub fn commutator_limit_error_in(
    norm: Norm,
    a: &Hermitian,
    b: &Hermitian,
    t: f64,
    n: usize,
) -> Result<f64> {
    ensure_same_hermitian_dims(a, b)?;
    if n == 0 {
        return Err(Error::InvalidConfig("commutator step count must be positive".into()));
    }
    let s = t / n as f64;
    let ea = a.eigh()?;
    let eb = b.eigh()?;
    let group = ea.exp_neg_i(s) * eb.exp_neg_i(s) * ea.exp_neg_i(-s) * eb.exp_neg_i(-s);
    let approx = mat_pow(&group, (n as u64) * (n as u64));
    // [A,B] is anti-Hermitian; K = i[A,B] is Hermitian and e^{−[A,B]t²} = e^{iKt²}.
    let k = commutator(a.matrix(), b.matrix())?.map(|z| z * IM);
    let k = Hermitian::with_tolerance(k, 1e-10)?;
    let exact = k.eigh()?.exp_neg_i(-t * t);
    Ok(norm.of(&(approx - exact)))
}

/// `‖I − e^{−iHt}‖` in spectral norm, evaluated on the spectrum.
pub fn recurrence_deviation(eig: &EigenDecomposition, t: f64) -> f64 {
    eig.eigenvalues
        .iter()
        .map(|&l| (C64::new(1.0, 0.0) - C64::from_polar(1.0, -l * t)).norm())
        .fold(0.0, f64::max)
}

/// Smallest lattice time `t_min + k·step ≤ t_max` at which `e^{−iHt}` is
/// within `eps` of the identity.
pub fn recurrence_scan(
    h: &Hermitian,
    eps: f64,
    t_min: f64,
    t_max: f64,
    step: f64,
) -> Result<Option<f64>> {
    if !(eps > 0.0) || !(t_min >= 0.0) || !(step > 0.0) {
        return Err(Error::InvalidConfig(
            "recurrence scan needs eps > 0, t_min >= 0 and step > 0".into(),
        ));
    }
    // Every unitary lies within spectral distance 2 of the identity.
    if eps >= 2.0 {
        return Ok((t_min <= t_max).then_some(t_min));
    }
    let eig = h.eigh()?;
    let mut k: u64 = 0;
    loop {
        let t = t_min + k as f64 * step;
        if t > t_max {
            return Ok(None);
        }
        if recurrence_deviation(&eig, t) < eps {
            return Ok(Some(t));
        }
        k += 1;
    }
}
