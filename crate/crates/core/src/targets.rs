//! Target gates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, Unitary, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Cnot,
    GenericU,
    Custom,
}

#[derive(Clone, Debug)]
pub struct TargetGate {
    pub name: TargetKind,
    pub matrix: Unitary,
    /// The matrix as given, before projection onto the unitary group.
    pub raw: CMatrix,
    /// `‖raw − matrix‖_F`.
    pub projection_distance: f64,
}

/// Projections further than this from the input are rejected.
pub const MAX_PROJECTION_DISTANCE: f64 = 1e-2;

/// CNOT with the first qubit as control: swaps `|10⟩` and `|11⟩`.
pub fn cnot() -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    for (r, c) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        m[(r, c)] = C64::new(1.0, 0.0);
    }
    m
}

#[rustfmt::skip]
const GENERIC_U: [[(f64, f64); 4]; 4] = [
    [( 0.56608,  0.00933), ( 0.09906,  0.05347), (-0.02898, -0.30192), ( 0.20154,  0.73087)],
    [( 0.17824,  0.01578), ( 0.88373, -0.03802), ( 0.17237,  0.38526), (-0.02653, -0.08195)],
    [( 0.57611, -0.27732), (-0.41590,  0.07183), ( 0.20749,  0.58112), (-0.14760, -0.10256)],
    [( 0.24404,  0.42318), (-0.06879,  0.14844), ( 0.53465, -0.25151), ( 0.46820, -0.40776)],
];

pub fn generic_u_raw() -> CMatrix {
    CMatrix::from_fn(4, 4, |r, c| C64::new(GENERIC_U[r][c].0, GENERIC_U[r][c].1))
}

/// Nearest unitary in Frobenius norm (`W V†` from `M = W Σ V†`).
pub fn polar_unitary(m: &CMatrix) -> Result<(Unitary, f64)> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let svd = m.clone().svd(true, true);
    let (w, vt) = match (svd.u, svd.v_t) {
        (Some(w), Some(vt)) => (w, vt),
        _ => return Err(Error::EigenNonConvergence),
    };
    let p = w * vt;
    let dist = (m - &p).norm();
    Ok((Unitary::new(p)?, dist))
}

fn projected(name: TargetKind, raw: CMatrix) -> Result<TargetGate> {
    let (matrix, projection_distance) = polar_unitary(&raw)?;
    if projection_distance > MAX_PROJECTION_DISTANCE {
        return Err(Error::NotUnitary {
            deviation: projection_distance,
        });
    }
    Ok(TargetGate {
        name,
        matrix,
        raw,
        projection_distance,
    })
}

pub fn generic_u() -> Result<TargetGate> {
    projected(TargetKind::GenericU, generic_u_raw())
}

pub fn cnot_gate() -> TargetGate {
    let m = cnot();
    TargetGate {
        name: TargetKind::Cnot,
        matrix: Unitary::new(m.clone()).expect("permutation matrix"),
        raw: m,
        projection_distance: 0.0,
    }
}

/// A user-supplied matrix, projected onto the unitary group.
pub fn custom(raw: CMatrix) -> Result<TargetGate> {
    projected(TargetKind::Custom, raw)
}
