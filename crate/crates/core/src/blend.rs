//! Gradient-domain compositing of two overlapping local fields: solve a
//! discrete Poisson equation on the interior of the overlap with Dirichlet
//! data from the surrounding target so the inserted content joins seamlessly.
//!
//! For blend region Omega the unknown I satisfies, at every node s in Omega,
//! `|N_s| I(s) - sum_{s' in N_s ∩ Omega} I(s') =
//!  sum_{s' in N_s ∩ dOmega} I*(s') + sum_{s' in N_s} (B(s) - B(s'))`
//! with N_s the 4-neighborhood, I* the target and B the source.

use crate::error::{Error, Result};
use crate::grid::{Axis, Field, Grid, NodeLine, Subdomain};
use crate::linalg::BandMatrix;

/// Discrete blending problem on a global grid.
#[derive(Debug, Clone)]
pub struct BlendProblem {
    pub grid: Grid,
    /// Inclusive overlap node box (i0, i1, j0, j1).
    pub overlap: (usize, usize, usize, usize),
    /// Target values on every node outside Omega (Omega entries unused).
    pub target: Vec<f64>,
    /// Source values on the closed overlap box (entries elsewhere unused).
    pub source: Vec<f64>,
}

impl BlendProblem {
    /// Direct construction from a target and a source; the blend region is
    /// the strict interior of `overlap`.
    pub fn from_parts(
        grid: Grid,
        overlap: (usize, usize, usize, usize),
        target: Vec<f64>,
        source: Vec<f64>,
    ) -> Result<Self> {
        let (i0, i1, j0, j1) = overlap;
        if i1 >= grid.nx || j1 >= grid.ny || i0 >= i1 || j0 >= j1 {
            return Err(Error::ShapeMismatch(format!(
                "overlap box {overlap:?} does not fit the grid"
            )));
        }
        if i1 - i0 < 2 || j1 - j0 < 2 {
            return Err(Error::NonOverlapping);
        }
        if target.len() != grid.n_nodes() || source.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_nodes(),
                got: target.len().min(source.len()),
            });
        }
        Ok(BlendProblem {
            grid,
            overlap,
            target,
            source,
        })
    }

    #[inline]
    pub fn in_omega(&self, i: usize, j: usize) -> bool {
        let (i0, i1, j0, j1) = self.overlap;
        i > i0 && i < i1 && j > j0 && j < j1
    }

    /// Blend-region nodes in grid flat order.
    pub fn omega_nodes(&self) -> Vec<(usize, usize)> {
        let (i0, i1, j0, j1) = self.overlap;
        let mut v = Vec::new();
        for j in j0 + 1..j1 {
            for i in i0 + 1..i1 {
                v.push((i, j));
            }
        }
        v
    }
}

/// Builds the blend problem for two local fields on an overlapping pair of
/// subdomains: source is the average of the two fields on the overlap; the
/// target takes each field on its exclusive region and cross-fades linearly
/// between the interface lines inside the overlap, so each interface column
/// carries its owner's values.
pub fn build_blend_problem(
    x1: &Field,
    x2: &Field,
    subs: &[Subdomain],
    parent: &Grid,
) -> Result<BlendProblem> {
    if subs.len() != 2 {
        return Err(Error::UnsupportedDecomposition(format!(
            "blending requires exactly two subdomains, got {}",
            subs.len()
        )));
    }
    let (a, b) = (&subs[0], &subs[1]);
    for (f, s) in [(x1, a), (x2, b)] {
        if f.grid.nx != s.local_nx() || f.grid.ny != s.local_ny() {
            return Err(Error::GridMismatch(format!(
                "local field shape {}x{} does not match subdomain {}",
                f.grid.nx, f.grid.ny, s.index
            )));
        }
    }
    let (ai0, ai1, aj0, aj1) = a.node_range;
    let (bi0, bi1, bj0, bj1) = b.node_range;
    let i0 = ai0.max(bi0);
    let i1 = ai1.min(bi1);
    let j0 = aj0.max(bj0);
    let j1 = aj1.min(bj1);
    if i0 > i1 || j0 > j1 {
        return Err(Error::NonOverlapping);
    }

    // axis along which the subdomains are offset (cross-fade direction)
    let offset_axis = if ai0 != bi0 || ai1 != bi1 {
        Axis::S1
    } else {
        Axis::S2
    };
    // does subdomain 1 own the low side of the overlap?
    let first_low = match offset_axis {
        Axis::S1 => ai0 <= bi0,
        Axis::S2 => aj0 <= bj0,
    };

    let n = parent.n_nodes();
    let mut target = vec![0.0; n];
    let mut source = vec![0.0; n];
    for j in 0..parent.ny {
        for i in 0..parent.nx {
            let g = parent.idx(i, j);
            let in1 = a.contains_node(i, j);
            let in2 = b.contains_node(i, j);
            let v1 = if in1 {
                Some(x1.at(i - ai0, j - aj0))
            } else {
                None
            };
            let v2 = if in2 {
                Some(x2.at(i - bi0, j - bj0))
            } else {
                None
            };
            match (v1, v2) {
                (Some(v), None) => target[g] = v,
                (None, Some(v)) => target[g] = v,
                (Some(u), Some(v)) => {
                    source[g] = 0.5 * (u + v);
                    let t = match offset_axis {
                        Axis::S1 => (i - i0) as f64 / (i1 - i0) as f64,
                        Axis::S2 => (j - j0) as f64 / (j1 - j0) as f64,
                    };
                    let w_first = if first_low { 1.0 - t } else { t };
                    target[g] = w_first * u + (1.0 - w_first) * v;
                }
                (None, None) => return Err(Error::UncoveredRegion(i, j)),
            }
        }
    }
    BlendProblem::from_parts(parent.clone(), (i0, i1, j0, j1), target, source)
}

const RESIDUAL_TOL: f64 = 1e-10;

/// Solves the discrete Poisson system on Omega and embeds the result into the
/// target; the returned field equals the target everywhere outside Omega.
pub fn blend(problem: &BlendProblem) -> Result<Field> {
    let grid = &problem.grid;
    let (i0, i1, j0, j1) = problem.overlap;
    let wx = i1 - i0 - 1;
    let wy = j1 - j0 - 1;
    let n = wx * wy;
    // number nodes with the shorter box side varying fastest
    let (fast_is_x, bw) = if wx <= wy { (true, wx) } else { (false, wy) };
    let rank = |i: usize, j: usize| -> usize {
        let li = i - i0 - 1;
        let lj = j - j0 - 1;
        if fast_is_x {
            lj * wx + li
        } else {
            li * wy + lj
        }
    };

    let mut mat = BandMatrix::new(n, bw.max(1));
    let mut rhs = vec![0.0; n];
    for (i, j) in problem.omega_nodes() {
        let r = rank(i, j);
        mat.add(r, r, 4.0);
        let g = grid.idx(i, j);
        let bs = problem.source[g];
        let neighbors = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)];
        for (ni, nj) in neighbors {
            let ng = grid.idx(ni, nj);
            rhs[r] += bs - problem.source[ng];
            if problem.in_omega(ni, nj) {
                let rn = rank(ni, nj);
                if rn <= r {
                    mat.add(r, rn, -1.0);
                }
            } else {
                rhs[r] += problem.target[ng];
            }
        }
    }

    let x = mat.cholesky()?.solve(&rhs);
    let ax = mat.matvec(&x);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in ax.iter().zip(&rhs) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den > 0.0 && num.sqrt() > RESIDUAL_TOL * den.sqrt() {
        return Err(Error::SolverFailure(format!(
            "blend residual {:.3e} exceeds {RESIDUAL_TOL:.1e}",
            num.sqrt() / den.sqrt()
        )));
    }

    let mut values = problem.target.clone();
    for (i, j) in problem.omega_nodes() {
        values[grid.idx(i, j)] = x[rank(i, j)];
    }
    Field::new(grid.clone(), values)
}

/// Builds and solves the blend for one pair of posterior samples.
pub fn blend_posterior_sample(
    x1: &Field,
    x2: &Field,
    subs: &[Subdomain],
    parent: &Grid,
) -> Result<Field> {
    let problem = build_blend_problem(x1, x2, subs, parent)?;
    blend(&problem)
}

/// Largest absolute first difference straddling an interface node line:
/// for a vertical line at column c this is
/// `max_j max(|f(c,j) - f(c-1,j)|, |f(c+1,j) - f(c,j)|)`.
pub fn seam_metric(field: &Field, line: &NodeLine) -> f64 {
    let grid = &field.grid;
    let mut worst = 0.0f64;
    for (i, j) in line.nodes() {
        match line.axis {
            Axis::S2 => {
                if i > 0 {
                    worst = worst.max((field.at(i, j) - field.at(i - 1, j)).abs());
                }
                if i + 1 < grid.nx {
                    worst = worst.max((field.at(i + 1, j) - field.at(i, j)).abs());
                }
            }
            Axis::S1 => {
                if j > 0 {
                    worst = worst.max((field.at(i, j) - field.at(i, j - 1)).abs());
                }
                if j + 1 < grid.ny {
                    worst = worst.max((field.at(i, j + 1) - field.at(i, j)).abs());
                }
            }
        }
    }
    worst
}
