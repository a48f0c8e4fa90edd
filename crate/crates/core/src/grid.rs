//! Uniform rectangular grids, overlapping rectangular decompositions, nodal
//! fields and sensor sets.
//!
//! Field values are stored row-major by s2 then s1: `values[j * nx + i]` holds
//! the value at node `(i, j)`, i.e. at location
//! `(s1_min + i*h1, s2_min + j*h2)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Relative tolerance for deciding whether a coordinate sits on a grid line.
const ALIGN_TOL: f64 = 1e-9;

/// Axis-aligned rectangle (s1_min, s1_max, s2_min, s2_max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub s1_min: f64,
    pub s1_max: f64,
    pub s2_min: f64,
    pub s2_max: f64,
}

impl Extent {
    pub fn new(s1_min: f64, s1_max: f64, s2_min: f64, s2_max: f64) -> Self {
        Extent {
            s1_min,
            s1_max,
            s2_min,
            s2_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.s1_max - self.s1_min
    }

    pub fn height(&self) -> f64 {
        self.s2_max - self.s2_min
    }

    pub fn contains(&self, s: (f64, f64)) -> bool {
        let tol1 = ALIGN_TOL * self.width().abs().max(1.0);
        let tol2 = ALIGN_TOL * self.height().abs().max(1.0);
        s.0 >= self.s1_min - tol1
            && s.0 <= self.s1_max + tol1
            && s.1 >= self.s2_min - tol2
            && s.1 <= self.s2_max + tol2
    }
}

/// Uniform rectangular node lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub extent: Extent,
    pub h1: f64,
    pub h2: f64,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn node(&self, flat: usize) -> (usize, usize) {
        (flat % self.nx, flat / self.nx)
    }

    #[inline]
    pub fn loc(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.extent.s1_min + i as f64 * self.h1,
            self.extent.s2_min + j as f64 * self.h2,
        )
    }

    /// Nearest node index pair for a location that must lie on the lattice.
    pub fn node_at(&self, s: (f64, f64)) -> Result<(usize, usize)> {
        let fi = (s.0 - self.extent.s1_min) / self.h1;
        let fj = (s.1 - self.extent.s2_min) / self.h2;
        let i = fi.round();
        let j = fj.round();
        let on1 = (fi - i).abs() <= ALIGN_TOL * (self.nx as f64);
        let on2 = (fj - j).abs() <= ALIGN_TOL * (self.ny as f64);
        if !on1 || !on2 || i < 0.0 || j < 0.0 || i as usize >= self.nx || j as usize >= self.ny {
            return Err(Error::SensorOffGrid(s.0, s.1));
        }
        Ok((i as usize, j as usize))
    }

    /// Grid-line index for a coordinate along the given axis, if node-aligned.
    fn line_index(&self, axis: Axis, coord: f64) -> Option<usize> {
        let (origin, h, count) = match axis {
            Axis::S1 => (self.extent.s1_min, self.h1, self.nx),
            Axis::S2 => (self.extent.s2_min, self.h2, self.ny),
        };
        let f = (coord - origin) / h;
        let r = f.round();
        if (f - r).abs() <= ALIGN_TOL * (count as f64) && r >= 0.0 && (r as usize) < count {
            Some(r as usize)
        } else {
            None
        }
    }
}

/// Builds a uniform grid with `nx * ny` nodes over `extent`.
pub fn build_grid(nx: usize, ny: usize, extent: Extent) -> Result<Grid> {
    if nx < 2 || ny < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2 nodes per direction, got {nx} x {ny}"
        )));
    }
    if !(extent.width() > 0.0) || !(extent.height() > 0.0) {
        return Err(Error::DegenerateGrid(format!(
            "extent must have positive area, got {extent:?}"
        )));
    }
    Ok(Grid {
        nx,
        ny,
        h1: extent.width() / (nx - 1) as f64,
        h2: extent.height() / (ny - 1) as f64,
        extent,
    })
}

/// Grid axes. `S1` runs along the first spatial coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    S1,
    S2,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::S1 => Axis::S2,
            Axis::S2 => Axis::S1,
        }
    }
}

/// A straight node line: `axis` is the direction the line runs along, `fixed`
/// the node index on the perpendicular axis, `span` the inclusive node range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLine {
    pub axis: Axis,
    pub fixed: usize,
    pub span: (usize, usize),
}

impl NodeLine {
    /// Global (i, j) node indices along the line, in span order.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        (self.span.0..=self.span.1)
            .map(|t| match self.axis {
                Axis::S1 => (t, self.fixed),
                Axis::S2 => (self.fixed, t),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.span.1 - self.span.0 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One member of an overlapping rectangular decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subdomain {
    /// 1-based index within the decomposition.
    pub index: usize,
    pub extent: Extent,
    /// Inclusive global node box (i0, i1, j0, j1).
    pub node_range: (usize, usize, usize, usize),
    /// Portions of this subdomain's boundary lying on the global boundary.
    pub external_boundary: Vec<NodeLine>,
    /// Neighbor index -> interface node line (this subdomain's boundary inside
    /// the neighbor).
    pub interfaces: Vec<(usize, NodeLine)>,
}

impl Subdomain {
    pub fn neighbors(&self) -> Vec<usize> {
        self.interfaces.iter().map(|(j, _)| *j).collect()
    }

    pub fn local_nx(&self) -> usize {
        self.node_range.1 - self.node_range.0 + 1
    }

    pub fn local_ny(&self) -> usize {
        self.node_range.3 - self.node_range.2 + 1
    }

    /// Grid covering exactly this subdomain's node box.
    pub fn local_grid(&self, parent: &Grid) -> Grid {
        Grid {
            nx: self.local_nx(),
            ny: self.local_ny(),
            extent: self.extent,
            h1: parent.h1,
            h2: parent.h2,
        }
    }

    pub fn contains_node(&self, i: usize, j: usize) -> bool {
        let (i0, i1, j0, j1) = self.node_range;
        i >= i0 && i <= i1 && j >= j0 && j <= j1
    }
}

/// Nodal values of a scalar function bound to a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_nodes(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("field contains non-finite values".into()));
        }
        Ok(Field { grid, values })
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        let n = grid.n_nodes();
        Field {
            grid,
            values: vec![c; n],
        }
    }

    /// Builds a field by evaluating `f` at every node location.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.loc(i, j);
                values.push(f(x, y));
            }
        }
        Field { grid, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Writes the documented little-endian binary format (`FLD1` magic).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"FLD1")?;
        w.write_all(&(self.grid.nx as u64).to_le_bytes())?;
        w.write_all(&(self.grid.ny as u64).to_le_bytes())?;
        for v in [
            self.grid.extent.s1_min,
            self.grid.extent.s1_max,
            self.grid.extent.s2_min,
            self.grid.extent.s2_max,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FLD1" {
            return Err(Error::BadFormat("missing FLD1 magic".into()));
        }
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let nx = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let ny = u64::from_le_bytes(u) as usize;
        let mut ext = [0.0f64; 4];
        for e in ext.iter_mut() {
            r.read_exact(&mut u)?;
            *e = f64::from_le_bytes(u);
        }
        let grid = build_grid(nx, ny, Extent::new(ext[0], ext[1], ext[2], ext[3]))?;
        let mut values = Vec::with_capacity(nx * ny);
        for _ in 0..nx * ny {
            r.read_exact(&mut u)?;
            values.push(f64::from_le_bytes(u));
        }
        Field::new(grid, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Field::read_from(&mut f)
    }
}

/// A sensor pinned to a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub node: (usize, usize),
    pub loc: (f64, f64),
}

/// Observed data: distinct sensors, their readings and the noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    pub sensors: Vec<Sensor>,
    pub values: Vec<f64>,
    pub noise_std: f64,
}

impl ObservationSet {
    pub fn new(sensors: Vec<Sensor>, values: Vec<f64>, noise_std: f64) -> Result<Self> {
        if values.len() != sensors.len() {
            return Err(Error::DimensionMismatch {
                expected: sensors.len(),
                got: values.len(),
            });
        }
        if !(noise_std > 0.0) {
            return Err(Error::NonPositive {
                name: "noise_std",
                value: noise_std,
            });
        }
        for (a, s) in sensors.iter().enumerate() {
            for t in sensors.iter().skip(a + 1) {
                if s.node == t.node {
                    return Err(Error::ShapeMismatch(format!(
                        "duplicate sensor at node {:?}",
                        s.node
                    )));
                }
            }
        }
        Ok(ObservationSet {
            sensors,
            values,
            noise_std,
        })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }
}

/// Splits `grid` into overlapping rectangular subdomains given node-aligned
/// sub-extents. Neighbor sets and interface node lines are derived.
pub fn decompose(grid: &Grid, cuts: &[Extent]) -> Result<Vec<Subdomain>> {
    if cuts.is_empty() {
        return Err(Error::EmptyInput("cuts"));
    }
    // node boxes, with alignment checks
    let mut boxes = Vec::with_capacity(cuts.len());
    for (m, c) in cuts.iter().enumerate() {
        let i0 = grid
            .line_index(Axis::S1, c.s1_min)
            .ok_or_else(|| Error::MisalignedCut(format!("cut {}: s1_min={}", m + 1, c.s1_min)))?;
        let i1 = grid
            .line_index(Axis::S1, c.s1_max)
            .ok_or_else(|| Error::MisalignedCut(format!("cut {}: s1_max={}", m + 1, c.s1_max)))?;
        let j0 = grid
            .line_index(Axis::S2, c.s2_min)
            .ok_or_else(|| Error::MisalignedCut(format!("cut {}: s2_min={}", m + 1, c.s2_min)))?;
        let j1 = grid
            .line_index(Axis::S2, c.s2_max)
            .ok_or_else(|| Error::MisalignedCut(format!("cut {}: s2_max={}", m + 1, c.s2_max)))?;
        if i1 <= i0 || j1 <= j0 {
            return Err(Error::DegenerateGrid(format!("cut {} is degenerate", m + 1)));
        }
        boxes.push((i0, i1, j0, j1));
    }

    // coverage check
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if !boxes
                .iter()
                .any(|&(i0, i1, j0, j1)| i >= i0 && i <= i1 && j >= j0 && j <= j1)
            {
                return Err(Error::UncoveredRegion(i, j));
            }
        }
    }

    // pairwise overlap sanity: touching without overlapping is rejected
    let m = cuts.len();
    for a in 0..m {
        for b in a + 1..m {
            let (ai0, ai1, aj0, aj1) = boxes[a];
            let (bi0, bi1, bj0, bj1) = boxes[b];
            let oi0 = ai0.max(bi0);
            let oi1 = ai1.min(bi1);
            let oj0 = aj0.max(bj0);
            let oj1 = aj1.min(bj1);
            if oi0 <= oi1 && oj0 <= oj1 {
                // closed boxes intersect; demand positive overlap width
                if oi0 == oi1 || oj0 == oj1 {
                    return Err(Error::ZeroWidthOverlap(a + 1, b + 1));
                }
            }
        }
    }

    let mut subs = Vec::with_capacity(m);
    for a in 0..m {
        let (i0, i1, j0, j1) = boxes[a];
        let ce = cuts[a];
        let mut interfaces: Vec<(usize, NodeLine)> = Vec::new();
        // edges of subdomain a: (axis the edge runs along, fixed index, fixed coord)
        let edges = [
            (Axis::S2, i0, ce.s1_min), // left
            (Axis::S2, i1, ce.s1_max), // right
            (Axis::S1, j0, ce.s2_min), // bottom
            (Axis::S1, j1, ce.s2_max), // top
        ];
        for b in 0..m {
            if b == a {
                continue;
            }
            let (bi0, bi1, bj0, bj1) = boxes[b];
            let cb = cuts[b];
            let mut found: Option<NodeLine> = None;
            for &(axis, fixed, coord) in &edges {
                let strictly_inside = match axis {
                    Axis::S2 => coord > cb.s1_min && coord < cb.s1_max,
                    Axis::S1 => coord > cb.s2_min && coord < cb.s2_max,
                };
                if !strictly_inside {
                    continue;
                }
                let (span0, span1) = match axis {
                    Axis::S2 => (j0.max(bj0), j1.min(bj1)),
                    Axis::S1 => (i0.max(bi0), i1.min(bi1)),
                };
                if span0 >= span1 {
                    continue;
                }
                let line = NodeLine {
                    axis,
                    fixed,
                    span: (span0, span1),
                };
                if found.is_some() {
                    return Err(Error::UnsupportedDecomposition(format!(
                        "subdomain {} has multiple interface edges inside subdomain {}",
                        a + 1,
                        b + 1
                    )));
                }
                found = Some(line);
            }
            if let Some(line) = found {
                interfaces.push((b + 1, line));
            }
        }
        interfaces.sort_by_key(|(j, _)| *j);

        // external boundary: edge portions lying on the global boundary
        let mut external = Vec::new();
        let on_global = |axis: Axis, coord: f64| -> bool {
            match axis {
                Axis::S2 => {
                    (coord - grid.extent.s1_min).abs() <= ALIGN_TOL
                        || (coord - grid.extent.s1_max).abs() <= ALIGN_TOL
                }
                Axis::S1 => {
                    (coord - grid.extent.s2_min).abs() <= ALIGN_TOL
                        || (coord - grid.extent.s2_max).abs() <= ALIGN_TOL
                }
            }
        };
        for &(axis, fixed, coord) in &edges {
            if on_global(axis, coord) {
                let span = match axis {
                    Axis::S2 => (j0, j1),
                    Axis::S1 => (i0, i1),
                };
                external.push(NodeLine { axis, fixed, span });
            }
        }

        subs.push(Subdomain {
            index: a + 1,
            extent: ce,
            node_range: (i0, i1, j0, j1),
            external_boundary: external,
            interfaces,
        });
    }

    // every boundary node must be covered by an external segment or an interface
    for sub in &subs {
        let (i0, i1, j0, j1) = sub.node_range;
        for j in j0..=j1 {
            for i in i0..=i1 {
                let on_boundary = i == i0 || i == i1 || j == j0 || j == j1;
                if !on_boundary {
                    continue;
                }
                let covered = sub
                    .external_boundary
                    .iter()
                    .chain(sub.interfaces.iter().map(|(_, l)| l))
                    .any(|line| line.nodes().contains(&(i, j)));
                if !covered {
                    return Err(Error::UnsupportedDecomposition(format!(
                        "subdomain {} boundary node ({i}, {j}) is neither external nor an interface",
                        sub.index
                    )));
                }
            }
        }
    }

    Ok(subs)
}

/// Copies a global field onto a subdomain's node box.
pub fn restrict_field(field: &Field, sub: &Subdomain, parent: &Grid) -> Result<Field> {
    if field.grid != *parent {
        return Err(Error::GridMismatch(
            "field grid does not match the decomposition's parent grid".into(),
        ));
    }
    let local = sub.local_grid(parent);
    let (i0, _, j0, _) = sub.node_range;
    let mut values = Vec::with_capacity(local.n_nodes());
    for j in 0..local.ny {
        for i in 0..local.nx {
            values.push(field.at(i0 + i, j0 + j));
        }
    }
    Ok(Field {
        grid: local,
        values,
    })
}

/// Combines local fields into a global one with overlap averaging: each node
/// takes the mean of the values from every subdomain whose closed extent
/// contains it (weight 1 outside overlaps, 1/k on a node shared by k).
pub fn stitch_fields(locals: &[Field], subs: &[Subdomain], parent: &Grid) -> Result<Field> {
    if locals.len() != subs.len() {
        return Err(Error::DimensionMismatch {
            expected: subs.len(),
            got: locals.len(),
        });
    }
    for (f, s) in locals.iter().zip(subs) {
        if f.grid.nx != s.local_nx() || f.grid.ny != s.local_ny() {
            return Err(Error::GridMismatch(format!(
                "local field shape {}x{} does not match subdomain {} box {}x{}",
                f.grid.nx,
                f.grid.ny,
                s.index,
                s.local_nx(),
                s.local_ny()
            )));
        }
    }
    let mut sum = vec![0.0; parent.n_nodes()];
    let mut count = vec![0u32; parent.n_nodes()];
    for (f, s) in locals.iter().zip(subs) {
        let (i0, _, j0, _) = s.node_range;
        for j in 0..f.grid.ny {
            for i in 0..f.grid.nx {
                let g = parent.idx(i0 + i, j0 + j);
                sum[g] += f.at(i, j);
                count[g] += 1;
            }
        }
    }
    let mut values = Vec::with_capacity(parent.n_nodes());
    for (g, &c) in count.iter().enumerate() {
        if c == 0 {
            let (i, j) = parent.node(g);
            return Err(Error::UncoveredRegion(i, j));
        }
        values.push(sum[g] / c as f64);
    }
    Ok(Field {
        grid: parent.clone(),
        values,
    })
}

/// Splits observations into per-subdomain sets; a sensor inside an overlap is
/// a member of every containing set.
pub fn partition_observations(obs: &ObservationSet, subs: &[Subdomain]) -> Vec<ObservationSet> {
    subs.iter()
        .map(|s| {
            let mut sensors = Vec::new();
            let mut values = Vec::new();
            for (sen, &v) in obs.sensors.iter().zip(&obs.values) {
                if s.contains_node(sen.node.0, sen.node.1) {
                    sensors.push(*sen);
                    values.push(v);
                }
            }
            ObservationSet {
                sensors,
                values,
                noise_std: obs.noise_std,
            }
        })
        .collect()
}
