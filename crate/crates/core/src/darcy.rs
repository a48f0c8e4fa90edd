//! Bilinear finite elements for the Darcy pressure equation
//! `-div(exp(x) grad u) = f` with mixed Dirichlet/Neumann boundaries, on the
//! global grid and on subdomains with Dirichlet interface traces.

use crate::error::{Error, Result};
use crate::grid::{Axis, Field, Grid, NodeLine, Sensor, Subdomain};
use crate::linalg::{cg_solve, BandMatrix};
use std::collections::HashMap;
use std::sync::Arc;

/// Gaussian source `3 * exp(-|s_sr - s|^2)` centered at the contaminant site.
pub fn source_term(s: (f64, f64), s_sr: (f64, f64)) -> f64 {
    let d2 = (s_sr.0 - s.0).powi(2) + (s_sr.1 - s.1).powi(2);
    3.0 * (-d2).exp()
}

/// Dirichlet data on a boundary segment.
#[derive(Clone)]
pub enum BoundaryValue {
    Constant(f64),
    Fn(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl BoundaryValue {
    fn eval(&self, s: (f64, f64)) -> f64 {
        match self {
            BoundaryValue::Constant(c) => *c,
            BoundaryValue::Fn(f) => f(s.0, s.1),
        }
    }
}

impl std::fmt::Debug for BoundaryValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryValue::Constant(c) => write!(f, "Constant({c})"),
            BoundaryValue::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

/// Boundary side of a rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Full-edge node line for one side of a grid.
pub fn edge_line(grid: &Grid, side: Side) -> NodeLine {
    match side {
        Side::Left => NodeLine {
            axis: Axis::S2,
            fixed: 0,
            span: (0, grid.ny - 1),
        },
        Side::Right => NodeLine {
            axis: Axis::S2,
            fixed: grid.nx - 1,
            span: (0, grid.ny - 1),
        },
        Side::Bottom => NodeLine {
            axis: Axis::S1,
            fixed: 0,
            span: (0, grid.nx - 1),
        },
        Side::Top => NodeLine {
            axis: Axis::S1,
            fixed: grid.ny - 1,
            span: (0, grid.nx - 1),
        },
    }
}

/// Boundary conditions for one solve. Node lines are in the solve grid's own
/// node indices. Interface segments carry nodal Dirichlet values in span order.
#[derive(Debug, Clone, Default)]
pub struct BoundarySpec {
    pub dirichlet: Vec<(NodeLine, BoundaryValue)>,
    pub neumann: Vec<(NodeLine, f64)>,
    pub interface: Vec<(NodeLine, Vec<f64>)>,
}

impl BoundarySpec {
    pub fn with_dirichlet(mut self, line: NodeLine, value: BoundaryValue) -> Self {
        self.dirichlet.push((line, value));
        self
    }

    pub fn with_neumann(mut self, line: NodeLine, flux: f64) -> Self {
        self.neumann.push((line, flux));
        self
    }

    fn has_constraint(&self) -> bool {
        !self.dirichlet.is_empty() || !self.interface.is_empty()
    }

    /// Resolves all Dirichlet-type constraints into a node -> value map,
    /// rejecting conflicting values at shared nodes (corners may coincide).
    fn constraints(&self, grid: &Grid) -> Result<HashMap<usize, f64>> {
        let mut fixed: HashMap<usize, f64> = HashMap::new();
        let mut put = |flat: usize, v: f64| -> Result<()> {
            if let Some(&old) = fixed.get(&flat) {
                if (old - v).abs() > 1e-12 * (1.0 + old.abs().max(v.abs())) {
                    return Err(Error::ShapeMismatch(format!(
                        "conflicting Dirichlet values {old} vs {v} at node {flat}"
                    )));
                }
            } else {
                fixed.insert(flat, v);
            }
            Ok(())
        };
        for (line, value) in &self.dirichlet {
            for (i, j) in line.nodes() {
                let v = value.eval(grid.loc(i, j));
                put(grid.idx(i, j), v)?;
            }
        }
        for (line, values) in &self.interface {
            if values.len() != line.len() {
                return Err(Error::DimensionMismatch {
                    expected: line.len(),
                    got: values.len(),
                });
            }
            for ((i, j), &v) in line.nodes().iter().zip(values) {
                put(grid.idx(*i, *j), v)?;
            }
        }
        Ok(fixed)
    }
}

/// 4x4 element stiffness for a bilinear quad of size h1 x h2 with constant
/// coefficient; node order (0,0), (1,0), (1,1), (0,1).
pub fn element_stiffness(h1: f64, h2: f64, coeff: f64) -> [[f64; 4]; 4] {
    const KX: [[f64; 4]; 4] = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    const KY: [[f64; 4]; 4] = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    let ax = coeff * h2 / (6.0 * h1);
    let ay = coeff * h1 / (6.0 * h2);
    let mut ke = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            ke[a][b] = ax * KX[a][b] + ay * KY[a][b];
        }
    }
    ke
}

// 2x2 Gauss points on the unit square.
fn gauss_points() -> [(f64, f64); 4] {
    let lo = 0.5 - 0.5 / 3.0f64.sqrt();
    let hi = 0.5 + 0.5 / 3.0f64.sqrt();
    [(lo, lo), (hi, lo), (lo, hi), (hi, hi)]
}

#[inline]
fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        (1.0 - xi) * (1.0 - eta),
        xi * (1.0 - eta),
        xi * eta,
        (1.0 - xi) * eta,
    ]
}

/// Assembled stiffness and load over all nodes, before boundary conditions.
/// Nodes are ranked so the shorter grid direction varies fastest, keeping the
/// matrix band tight.
pub struct Assembly {
    pub grid: Grid,
    pub stiffness: BandMatrix,
    pub load: Vec<f64>,
    order: NodeOrder,
}

#[derive(Clone, Copy)]
enum NodeOrder {
    RowMajor,
    ColMajor,
}

impl Assembly {
    #[inline]
    fn rank(&self, i: usize, j: usize) -> usize {
        match self.order {
            NodeOrder::RowMajor => j * self.grid.nx + i,
            NodeOrder::ColMajor => i * self.grid.ny + j,
        }
    }

    /// Stiffness entry between two nodes (symmetric, zero outside the stencil).
    pub fn stiffness_at(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        self.stiffness.get(self.rank(a.0, a.1), self.rank(b.0, b.1))
    }

    pub fn load_at(&self, i: usize, j: usize) -> f64 {
        self.load[self.rank(i, j)]
    }
}

/// Assembles the bilinear FEM stiffness for `-div(exp(x) grad u)` with the
/// coefficient evaluated at element centers, plus the 2x2 Gauss load vector.
pub fn assemble(
    grid: &Grid,
    log_perm: &Field,
    source: &(impl Fn(f64, f64) -> f64 + ?Sized),
) -> Result<Assembly> {
    if log_perm.grid != *grid {
        return Err(Error::GridMismatch(
            "log-permeability grid differs from solve grid".into(),
        ));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let order = if nx <= ny {
        NodeOrder::RowMajor
    } else {
        NodeOrder::ColMajor
    };
    let bw = nx.min(ny) + 1;
    let n = grid.n_nodes();
    let mut k = BandMatrix::new(n, bw);
    let mut load = vec![0.0; n];
    let rank = |i: usize, j: usize| -> usize {
        match order {
            NodeOrder::RowMajor => j * nx + i,
            NodeOrder::ColMajor => i * ny + j,
        }
    };

    let gauss = gauss_points();
    let wq = grid.h1 * grid.h2 / 4.0;
    for ej in 0..ny - 1 {
        for ei in 0..nx - 1 {
            let corners = [(ei, ej), (ei + 1, ej), (ei + 1, ej + 1), (ei, ej + 1)];
            let xc: f64 = corners.iter().map(|&(i, j)| log_perm.at(i, j)).sum::<f64>() / 4.0;
            let ke = element_stiffness(grid.h1, grid.h2, xc.exp());
            let ranks = [
                rank(corners[0].0, corners[0].1),
                rank(corners[1].0, corners[1].1),
                rank(corners[2].0, corners[2].1),
                rank(corners[3].0, corners[3].1),
            ];
            for a in 0..4 {
                for b in 0..4 {
                    if ranks[a] >= ranks[b] {
                        k.add(ranks[a], ranks[b], ke[a][b]);
                    }
                }
            }
            let (x0, y0) = grid.loc(ei, ej);
            for &(xi, eta) in &gauss {
                let s = (x0 + xi * grid.h1, y0 + eta * grid.h2);
                let f = source(s.0, s.1);
                let nvals = shape(xi, eta);
                for a in 0..4 {
                    load[ranks[a]] += wq * f * nvals[a];
                }
            }
        }
    }
    Ok(Assembly {
        grid: grid.clone(),
        stiffness: k,
        load,
        order,
    })
}

/// Reduced SPD system over free (non-Dirichlet) nodes.
pub struct LinearSystem {
    pub matrix: BandMatrix,
    pub rhs: Vec<f64>,
    pub free_of_rank: Vec<Option<usize>>,
    pub rank_of_free: Vec<usize>,
    fixed_values: Vec<f64>,
    grid: Grid,
}

/// Linear solver selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    /// Band Cholesky factorization (default).
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    Cg { tol: f64, max_iter: usize },
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Direct
    }
}

const RESIDUAL_TOL: f64 = 1e-10;

/// Applies boundary conditions to an assembly, producing the reduced system.
pub fn reduce_system(assembly: &Assembly, bcs: &BoundarySpec) -> Result<LinearSystem> {
    if !bcs.has_constraint() {
        return Err(Error::NoDirichlet);
    }
    let grid = &assembly.grid;
    let constraints = bcs.constraints(grid)?;
    let n = grid.n_nodes();

    // Neumann flux contributions (linear edge elements, constant flux)
    let mut load = assembly.load.clone();
    for (line, flux) in &bcs.neumann {
        let nodes = line.nodes();
        let h = match line.axis {
            Axis::S1 => grid.h1,
            Axis::S2 => grid.h2,
        };
        for w in nodes.windows(2) {
            for &(i, j) in w {
                load[assembly.rank(i, j)] += flux * h / 2.0;
            }
        }
    }

    let mut fixed_by_rank: HashMap<usize, f64> = HashMap::new();
    for (&flat, &v) in &constraints {
        let (i, j) = grid.node(flat);
        fixed_by_rank.insert(assembly.rank(i, j), v);
    }
    let mut free_of_rank = vec![None; n];
    let mut rank_of_free = Vec::with_capacity(n - fixed_by_rank.len());
    let mut next = 0usize;
    for r in 0..n {
        if !fixed_by_rank.contains_key(&r) {
            free_of_rank[r] = Some(next);
            rank_of_free.push(r);
            next += 1;
        }
    }
    let n_free = next;
    if n_free == 0 {
        return Err(Error::SolverFailure("all nodes constrained".into()));
    }

    let bw = assembly.stiffness.bandwidth();
    let mut a = BandMatrix::new(n_free, bw);
    let mut rhs = vec![0.0; n_free];
    for r in 0..n {
        let fr = match free_of_rank[r] {
            Some(fr) => fr,
            None => continue,
        };
        rhs[fr] = load[r];
        let c0 = r.saturating_sub(bw);
        let c1 = (r + bw).min(n - 1);
        for c in c0..=c1 {
            let v = assembly.stiffness.get(r, c);
            if v == 0.0 {
                continue;
            }
            match free_of_rank[c] {
                Some(fc) => {
                    if fc <= fr {
                        a.set(fr, fc, v);
                    }
                }
                None => {
                    rhs[fr] -= v * fixed_by_rank[&c];
                }
            }
        }
    }

    let mut fixed_values = vec![0.0; n];
    for (&r, &v) in &fixed_by_rank {
        fixed_values[r] = v;
    }
    Ok(LinearSystem {
        matrix: a,
        rhs,
        free_of_rank,
        rank_of_free,
        fixed_values,
        grid: grid.clone(),
    })
}

impl LinearSystem {
    /// Solves the reduced system, embeds fixed values and checks the relative
    /// residual of the reduced equations.
    pub fn solve(&self, assembly: &Assembly, kind: SolverKind) -> Result<Field> {
        let x = match kind {
            SolverKind::Direct => self.matrix.cholesky()?.solve(&self.rhs),
            SolverKind::Cg { tol, max_iter } => cg_solve(&self.matrix, &self.rhs, tol, max_iter)?.0,
        };
        let r = self.matrix.matvec(&x);
        let mut num = 0.0;
        let mut den = 0.0;
        for (ri, bi) in r.iter().zip(&self.rhs) {
            num += (ri - bi) * (ri - bi);
            den += bi * bi;
        }
        if den > 0.0 && num.sqrt() > RESIDUAL_TOL * den.sqrt() {
            return Err(Error::SolverFailure(format!(
                "relative residual {:.3e} exceeds {RESIDUAL_TOL:.1e}",
                num.sqrt() / den.sqrt()
            )));
        }

        let grid = &self.grid;
        let mut values = vec![0.0; grid.n_nodes()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let r = assembly.rank(i, j);
                values[grid.idx(i, j)] = match self.free_of_rank[r] {
                    Some(fr) => x[fr],
                    None => self.fixed_values[r],
                };
            }
        }
        Field::new(grid.clone(), values)
    }
}

/// Assembles and solves the pressure equation on a grid.
pub fn solve_forward(
    grid: &Grid,
    log_perm: &Field,
    bcs: &BoundarySpec,
    source: &(impl Fn(f64, f64) -> f64 + ?Sized),
) -> Result<Field> {
    solve_forward_with(grid, log_perm, bcs, source, SolverKind::Direct)
}

pub fn solve_forward_with(
    grid: &Grid,
    log_perm: &Field,
    bcs: &BoundarySpec,
    source: &(impl Fn(f64, f64) -> f64 + ?Sized),
    kind: SolverKind,
) -> Result<Field> {
    let assembly = assemble(grid, log_perm, source)?;
    let sys = reduce_system(&assembly, bcs)?;
    sys.solve(&assembly, kind)
}

/// Solves the local problem on a subdomain: external conditions from
/// `external_bcs` (local node indices) plus Dirichlet traces on every
/// interface, supplied per neighbor index.
pub fn solve_local_forward(
    sub: &Subdomain,
    parent: &Grid,
    local_log_perm: &Field,
    interface_values: &[(usize, Vec<f64>)],
    external_bcs: &BoundarySpec,
    source: &(impl Fn(f64, f64) -> f64 + ?Sized),
) -> Result<Field> {
    solve_local_forward_with(
        sub,
        parent,
        local_log_perm,
        interface_values,
        external_bcs,
        source,
        SolverKind::Direct,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn solve_local_forward_with(
    sub: &Subdomain,
    parent: &Grid,
    local_log_perm: &Field,
    interface_values: &[(usize, Vec<f64>)],
    external_bcs: &BoundarySpec,
    source: &(impl Fn(f64, f64) -> f64 + ?Sized),
    kind: SolverKind,
) -> Result<Field> {
    let local = sub.local_grid(parent);
    if local_log_perm.grid != local {
        return Err(Error::GridMismatch(
            "local log-permeability grid does not match the subdomain".into(),
        ));
    }
    let mut bcs = external_bcs.clone();
    for (nbr, line) in &sub.interfaces {
        let values = interface_values
            .iter()
            .find(|(j, _)| j == nbr)
            .map(|(_, v)| v.clone())
            .ok_or(Error::MissingInterfaceData(*nbr))?;
        bcs.interface.push((to_local_line(line, sub), values));
    }
    solve_forward_with(&local, local_log_perm, &bcs, source, kind)
}

/// Converts a node line from global to subdomain-local node indices.
pub fn to_local_line(line: &NodeLine, sub: &Subdomain) -> NodeLine {
    let (i0, _, j0, _) = sub.node_range;
    match line.axis {
        Axis::S1 => NodeLine {
            axis: Axis::S1,
            fixed: line.fixed - j0,
            span: (line.span.0 - i0, line.span.1 - i0),
        },
        Axis::S2 => NodeLine {
            axis: Axis::S2,
            fixed: line.fixed - i0,
            span: (line.span.0 - j0, line.span.1 - j0),
        },
    }
}

/// Reads nodal state values at sensor nodes, in sensor order.
pub fn observe(state: &Field, sensors: &[Sensor]) -> Result<Vec<f64>> {
    let grid = &state.grid;
    let mut out = Vec::with_capacity(sensors.len());
    for s in sensors {
        let (i, j) = s.node;
        if i >= grid.nx || j >= grid.ny {
            return Err(Error::SensorOffGrid(s.loc.0, s.loc.1));
        }
        let loc = grid.loc(i, j);
        if (loc.0 - s.loc.0).abs() > 1e-9 || (loc.1 - s.loc.1).abs() > 1e-9 {
            return Err(Error::SensorOffGrid(s.loc.0, s.loc.1));
        }
        out.push(state.at(i, j));
    }
    Ok(out)
}

/// Discrete L2 norm of `u_h - exact` via 2x2 Gauss quadrature per element,
/// with `u_h` the bilinear interpolant of the nodal field.
pub fn l2_error(field: &Field, exact: &(impl Fn(f64, f64) -> f64 + ?Sized)) -> f64 {
    let grid = &field.grid;
    let gauss = gauss_points();
    let wq = grid.h1 * grid.h2 / 4.0;
    let mut acc = 0.0;
    for ej in 0..grid.ny - 1 {
        for ei in 0..grid.nx - 1 {
            let u = [
                field.at(ei, ej),
                field.at(ei + 1, ej),
                field.at(ei + 1, ej + 1),
                field.at(ei, ej + 1),
            ];
            let (x0, y0) = grid.loc(ei, ej);
            for &(xi, eta) in &gauss {
                let nvals = shape(xi, eta);
                let uh: f64 = (0..4).map(|a| nvals[a] * u[a]).sum();
                let ue = exact(x0 + xi * grid.h1, y0 + eta * grid.h2);
                acc += wq * (uh - ue) * (uh - ue);
            }
        }
    }
    acc.sqrt()
}
