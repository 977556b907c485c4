//! Dynamical Lie algebra rank.
//!
//! The real span of Hermitian generators is closed under `(A, B) ↦ i[A, B]`.
//! A system of dimension `d` is fully controllable on `SU(d)` exactly when
//! the closure has dimension `d² − 1`; a block-diagonal ensemble of `N`
//! members needs `N(d² − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_square, CMatrix, Hermitian, Tolerances, C64, IM};
use crate::systems::{lift_ensemble, EnsembleSystem, OmegaGrid, ParameterizedSystem};

pub const DEFAULT_MAX_DEPTH: usize = 20;

/// Orthonormal basis (in `⟨A, B⟩ = Re tr(A†B)`) of the generated algebra.
#[derive(Clone, Debug)]
pub struct LieAlgebraBasis {
    pub dim: usize,
    pub basis: Vec<CMatrix>,
    pub rank: usize,
    /// Number of bracket levels explored before the span stopped growing.
    pub depth: usize,
}

fn inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Adds `m` to the basis if its residual after two passes of modified
/// Gram–Schmidt exceeds the independence tolerance times `reference`.
fn try_extend(basis: &mut Vec<CMatrix>, mut m: CMatrix, reference: f64) -> bool {
    for _ in 0..2 {
        for b in basis.iter() {
            let c = inner(b, &m);
            m -= b * C64::new(c, 0.0);
        }
    }
    let residual = m.norm();
    if residual <= Tolerances::DEFAULT.independence * reference || residual == 0.0 {
        return false;
    }
    basis.push(m / C64::new(residual, 0.0));
    true
}

/// Closure of the generators under `i[·,·]`, brackets taken with the generators.
pub fn generate_dla(generators: &[CMatrix], max_depth: usize) -> Result<LieAlgebraBasis> {
    let dim = match generators.first() {
        Some(g) => ensure_square(g)?,
        None => {
            return Ok(LieAlgebraBasis {
                dim: 0,
                basis: Vec::new(),
                rank: 0,
                depth: 0,
            })
        }
    };
    let mut gens = Vec::with_capacity(generators.len());
    for g in generators {
        if g.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch {
                expected: (dim, dim),
                found: g.shape(),
            });
        }
        gens.push(Hermitian::new(g.clone())?.traceless().into_matrix());
    }
    let max_rank = dim * dim - 1;
    let mut basis = Vec::new();
    let mut frontier = Vec::new();
    for g in &gens {
        if try_extend(&mut basis, g.clone(), g.norm()) {
            frontier.push(basis.len() - 1);
        }
    }
    let mut depth = 0;
    while !frontier.is_empty() && depth < max_depth && basis.len() < max_rank {
        depth += 1;
        let mut next = Vec::new();
        for &idx in &frontier {
            for g in &gens {
                let x = &basis[idx];
                let bracket = (x * g - g * x) * IM;
                // Basis elements have unit norm, so ‖[x, g]‖ ≤ 2‖g‖.
                if try_extend(&mut basis, bracket, g.norm()) {
                    next.push(basis.len() - 1);
                }
            }
        }
        frontier = next;
    }
    Ok(LieAlgebraBasis {
        dim,
        rank: basis.len(),
        basis,
        depth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LarcReport {
    pub rank: usize,
    pub expected: usize,
    pub satisfied: bool,
    pub depth: usize,
}

/// LARC for the block-diagonal ensemble.
///
/// When every member generates all of `su(d)`, which is simple, the ensemble
/// algebra is a direct sum of diagonal copies of `su(d)`, one per class of
/// linked members, and two members are linked exactly when their pair
/// ensemble falls short of `2(d² − 1)`. This needs only `d`- and
/// `2d`-dimensional closures, which stay well conditioned for closely spaced
/// ω where nested brackets of the full lift do not. Otherwise the full lift
/// is closed directly, capped at the sum of the member ranks.
pub fn larc_check(ens: &EnsembleSystem) -> Result<LarcReport> {
    let d = ens.block_dim();
    let full = d * d - 1;
    let expected = ens.members() * full;
    let controls: Vec<CMatrix> = ens.base.controls().iter().map(|h| h.matrix().clone()).collect();
    let mut member_ranks = Vec::with_capacity(ens.members());
    let mut depth = 0;
    for k in 0..ens.members() {
        let mut gens = vec![ens.drift_block(k)];
        gens.extend(controls.iter().cloned());
        let a = generate_dla(&gens, DEFAULT_MAX_DEPTH)?;
        depth = depth.max(a.depth);
        member_ranks.push(a.rank);
    }
    let rank = if ens.members() == 1 {
        member_ranks[0]
    } else if member_ranks.iter().all(|&r| r == full) {
        let points = &ens.grid.points;
        let mut class: Vec<usize> = (0..points.len()).collect();
        for j in 0..points.len() {
            if class[j] != j {
                continue;
            }
            for k in (j + 1)..points.len() {
                if class[k] != k {
                    continue;
                }
                let pair = lift_ensemble(&ens.base, &OmegaGrid::from_points(vec![points[j], points[k]])?);
                let mut gens = vec![pair.lifted_drift.matrix().clone()];
                gens.extend(pair.lifted_controls.iter().map(|h| h.matrix().clone()));
                let a = generate_dla(&gens, DEFAULT_MAX_DEPTH)?;
                depth = depth.max(a.depth);
                if a.rank < 2 * full {
                    class[k] = class[j];
                }
            }
        }
        let classes = class.iter().enumerate().filter(|&(i, &c)| i == c).count();
        classes * full
    } else {
        let mut gens = vec![ens.lifted_drift.matrix().clone()];
        gens.extend(ens.lifted_controls.iter().map(|h| h.matrix().clone()));
        let a = generate_dla(&gens, DEFAULT_MAX_DEPTH)?;
        depth = depth.max(a.depth);
        a.rank.min(member_ranks.iter().sum())
    };
    Ok(LarcReport {
        rank,
        expected,
        satisfied: rank == expected,
        depth,
    })
}

pub fn larc_check_at(sys: &ParameterizedSystem, omega: f64) -> Result<LarcReport> {
    larc_check(&lift_ensemble(sys, &OmegaGrid::single(omega)))
}
