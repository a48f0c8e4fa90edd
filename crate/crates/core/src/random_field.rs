//! Gaussian random fields with exponential covariance via truncated
//! Karhunen-Loeve expansion, plus training-set generation and restriction.
//!
//! The discrete KL problem is the weighted eigenproblem
//! `W^{1/2} K W^{1/2} phi = lambda phi` with trapezoidal quadrature weights W;
//! eigenfunctions are `psi = W^{-1/2} phi`, so they are orthonormal in the
//! weighted inner product and `x = m + sum sqrt(lambda_r) psi_r kappa_r`
//! reproduces the nodal covariance.

use crate::error::{Error, Result};
use crate::grid::{restrict_field, Extent, Field, Grid, Subdomain};
use crate::linalg::lanczos_top_energy;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Node-count guard for the KL eigensolve.
pub const DEFAULT_MAX_KL_NODES: usize = 20_000;

/// Default number of cache bins for correlation lengths drawn from a range.
pub const DEFAULT_TAU_BINS: usize = 64;

/// Exponential covariance `sigma_f^2 * exp(-|s - s2| / tau)`.
pub fn exp_covariance(s: (f64, f64), s2: (f64, f64), sigma_f: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::NonPositive {
            name: "tau",
            value: tau,
        });
    }
    let d = ((s.0 - s2.0).powi(2) + (s.1 - s2.1).powi(2)).sqrt();
    Ok(sigma_f * sigma_f * (-d / tau).exp())
}

/// Mean function of the field: constant or nodal.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldMean {
    Constant(f64),
    Nodal(Field),
}

impl FieldMean {
    fn value_at(&self, flat: usize) -> f64 {
        match self {
            FieldMean::Constant(c) => *c,
            FieldMean::Nodal(f) => f.values[flat],
        }
    }
}

/// Truncated discrete KL basis of the exponential covariance on a grid.
#[derive(Debug, Clone)]
pub struct KlBasis {
    pub grid: Grid,
    pub mean: FieldMean,
    pub sigma_f: f64,
    pub tau: f64,
    pub energy_frac: f64,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Field>,
}

impl KlBasis {
    pub fn n_kl(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Total spectral mass: trace of the weighted covariance matrix, which for
    /// trapezoidal weights equals `sigma_f^2 * |D|` exactly.
    pub fn total_variance(&self) -> f64 {
        self.sigma_f * self.sigma_f * trapezoid_weights(&self.grid).iter().sum::<f64>()
    }

    pub fn retained_fraction(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance()
    }
}

/// Trapezoidal (cell-area) quadrature weights: full cells inside, halved on
/// edges, quartered at corners.
pub fn trapezoid_weights(grid: &Grid) -> Vec<f64> {
    let mut w = Vec::with_capacity(grid.n_nodes());
    for j in 0..grid.ny {
        let cj = if j == 0 || j == grid.ny - 1 { 0.5 } else { 1.0 };
        for i in 0..grid.nx {
            let ci = if i == 0 || i == grid.nx - 1 { 0.5 } else { 1.0 };
            w.push(grid.h1 * grid.h2 * ci * cj);
        }
    }
    w
}

/// Dense weighted covariance matrix `W^{1/2} K W^{1/2}` (test/oracle path;
/// quadratic storage).
pub fn dense_weighted_covariance(grid: &Grid, sigma_f: f64, tau: f64) -> Result<Array2<f64>> {
    let n = grid.n_nodes();
    let w = trapezoid_weights(grid);
    let sq: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let mut b = Array2::<f64>::zeros((n, n));
    for p in 0..n {
        let (ip, jp) = grid.node(p);
        let sp = grid.loc(ip, jp);
        for q in p..n {
            let (iq, jq) = grid.node(q);
            let sq_loc = grid.loc(iq, jq);
            let c = exp_covariance(sp, sq_loc, sigma_f, tau)? * sq[p] * sq[q];
            b[[p, q]] = c;
            b[[q, p]] = c;
        }
    }
    Ok(b)
}

// Stationary-kernel matvec on a uniform grid via circulant embedding and 2D FFT.
struct BttbMatvec {
    nx: usize,
    ny: usize,
    p: usize,
    q: usize,
    kfft: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl BttbMatvec {
    fn new(grid: &Grid, sigma_f: f64, tau: f64) -> Result<Self> {
        let nx = grid.nx;
        let ny = grid.ny;
        let p = (2 * nx - 1).next_power_of_two();
        let q = (2 * ny - 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let row_fwd = planner.plan_fft_forward(q);
        let row_inv = planner.plan_fft_inverse(q);
        let col_fwd = planner.plan_fft_forward(p);
        let col_inv = planner.plan_fft_inverse(p);

        let mut kernel = vec![Complex64::new(0.0, 0.0); p * q];
        for di in -(nx as i64 - 1)..=(nx as i64 - 1) {
            let ip = (((di % p as i64) + p as i64) % p as i64) as usize;
            for dj in -(ny as i64 - 1)..=(ny as i64 - 1) {
                let jq = (((dj % q as i64) + q as i64) % q as i64) as usize;
                let c = exp_covariance(
                    (0.0, 0.0),
                    (di as f64 * grid.h1, dj as f64 * grid.h2),
                    sigma_f,
                    tau,
                )?;
                kernel[ip * q + jq] = Complex64::new(c, 0.0);
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); p * q];
        fft2(&mut kernel, p, q, &row_fwd, &col_fwd, &mut scratch);
        Ok(BttbMatvec {
            nx,
            ny,
            p,
            q,
            kfft: kernel,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            buf: vec![Complex64::new(0.0, 0.0); p * q],
            scratch,
        })
    }

    /// y = K v where K couples nodes through cov(distance). Input/output are
    /// nx*ny nodal vectors in the grid's row-major layout.
    fn apply(&mut self, v: &[f64]) -> Vec<f64> {
        let (nx, ny, p, q) = (self.nx, self.ny, self.p, self.q);
        self.buf
            .iter_mut()
            .for_each(|c| *c = Complex64::new(0.0, 0.0));
        for j in 0..ny {
            for i in 0..nx {
                self.buf[i * q + j] = Complex64::new(v[j * nx + i], 0.0);
            }
        }
        fft2(
            &mut self.buf,
            p,
            q,
            &self.row_fwd,
            &self.col_fwd,
            &mut self.scratch,
        );
        for (b, k) in self.buf.iter_mut().zip(&self.kfft) {
            *b *= *k;
        }
        fft2(
            &mut self.buf,
            p,
            q,
            &self.row_inv,
            &self.col_inv,
            &mut self.scratch,
        );
        let scale = 1.0 / (p * q) as f64;
        let mut y = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                y[j * nx + i] = self.buf[i * q + j].re * scale;
            }
        }
        y
    }
}

// In-place 2D FFT of a p x q row-major buffer (rows of length q first, then
// columns through a transpose round-trip).
fn fft2(
    data: &mut [Complex64],
    p: usize,
    q: usize,
    row_fft: &Arc<dyn Fft<f64>>,
    col_fft: &Arc<dyn Fft<f64>>,
    scratch: &mut [Complex64],
) {
    for r in 0..p {
        row_fft.process(&mut data[r * q..(r + 1) * q]);
    }
    for r in 0..p {
        for c in 0..q {
            scratch[c * p + r] = data[r * q + c];
        }
    }
    for c in 0..q {
        col_fft.process(&mut scratch[c * p..(c + 1) * p]);
    }
    for r in 0..p {
        for c in 0..q {
            data[r * q + c] = scratch[c * p + r];
        }
    }
}

/// Discrete KL decomposition keeping the smallest leading set of eigenpairs
/// whose energy reaches `energy_frac` of the total variance.
pub fn kl_decompose(
    grid: &Grid,
    sigma_f: f64,
    tau: f64,
    energy_frac: f64,
    mean: FieldMean,
) -> Result<KlBasis> {
    kl_decompose_with_limit(grid, sigma_f, tau, energy_frac, mean, DEFAULT_MAX_KL_NODES)
}

pub fn kl_decompose_with_limit(
    grid: &Grid,
    sigma_f: f64,
    tau: f64,
    energy_frac: f64,
    mean: FieldMean,
    max_nodes: usize,
) -> Result<KlBasis> {
    if !(tau > 0.0) {
        return Err(Error::NonPositive {
            name: "tau",
            value: tau,
        });
    }
    if !(energy_frac > 0.0 && energy_frac < 1.0) {
        return Err(Error::Config(format!(
            "energy_frac must lie in (0, 1), got {energy_frac}"
        )));
    }
    let n = grid.n_nodes();
    if n > max_nodes {
        return Err(Error::GridTooLarge {
            nodes: n,
            limit: max_nodes,
        });
    }
    if let FieldMean::Nodal(f) = &mean {
        if f.grid != *grid {
            return Err(Error::GridMismatch("mean field grid mismatch".into()));
        }
    }

    let w = trapezoid_weights(grid);
    let sqw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let trace = sigma_f * sigma_f * w.iter().sum::<f64>();

    let mut kernel = BttbMatvec::new(grid, sigma_f, tau)?;
    // deterministic start vector; the seed ties to the problem instance
    let seed = 0x4b4c_0001u64 ^ ((grid.nx as u64) << 32) ^ ((grid.ny as u64) << 16) ^ tau.to_bits();
    let res = lanczos_top_energy(
        n,
        |v| {
            let scaled: Vec<f64> = v.iter().zip(&sqw).map(|(x, s)| x * s).collect();
            let mut y = kernel.apply(&scaled);
            for (yi, s) in y.iter_mut().zip(&sqw) {
                *yi *= s;
            }
            y
        },
        trace,
        energy_frac,
        seed,
    )?;

    let mut eigenvalues = Vec::with_capacity(res.eigenvalues.len());
    let mut eigenfunctions = Vec::with_capacity(res.eigenvalues.len());
    for (lam, phi) in res.eigenvalues.into_iter().zip(res.eigenvectors) {
        if !(lam > 0.0) {
            return Err(Error::EigenFailure(format!(
                "non-positive retained eigenvalue {lam:.3e}"
            )));
        }
        let mut psi: Vec<f64> = phi.iter().zip(&sqw).map(|(x, s)| x / s).collect();
        // sign convention: largest-magnitude entry positive
        let mut amax = 0.0;
        let mut sign = 1.0;
        for &v in &psi {
            if v.abs() > amax {
                amax = v.abs();
                sign = if v >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        if sign < 0.0 {
            for v in psi.iter_mut() {
                *v = -*v;
            }
        }
        eigenvalues.push(lam);
        eigenfunctions.push(Field::new(grid.clone(), psi)?);
    }

    Ok(KlBasis {
        grid: grid.clone(),
        mean,
        sigma_f,
        tau,
        energy_frac,
        eigenvalues,
        eigenfunctions,
    })
}

/// Synthesizes the nodal field `m + sum sqrt(lambda_r) psi_r kappa_r`.
pub fn sample_field(basis: &KlBasis, kappa: &[f64]) -> Result<Field> {
    if kappa.len() != basis.n_kl() {
        return Err(Error::DimensionMismatch {
            expected: basis.n_kl(),
            got: kappa.len(),
        });
    }
    let n = basis.grid.n_nodes();
    let mut values: Vec<f64> = (0..n).map(|p| basis.mean.value_at(p)).collect();
    for ((lam, psi), k) in basis
        .eigenvalues
        .iter()
        .zip(&basis.eigenfunctions)
        .zip(kappa)
    {
        let a = lam.sqrt() * k;
        for (v, p) in values.iter_mut().zip(&psi.values) {
            *v += a * p;
        }
    }
    Field::new(basis.grid.clone(), values)
}

/// Per-sample bookkeeping for generated/augmented datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Correlation length drawn for the sample.
    pub tau: f64,
    /// Quantized correlation length whose cached basis produced the sample.
    pub tau_used: f64,
    /// RNG stream index within the dataset seed.
    pub stream: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<usize>,
}

/// A collection of nodal fields sharing one grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: Grid,
    pub samples: Vec<Field>,
    pub meta: Vec<SampleMeta>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn quantize_tau(tau: f64, range: (f64, f64), bins: usize) -> f64 {
    if range.1 <= range.0 {
        return range.0;
    }
    let t = ((tau - range.0) / (range.1 - range.0)).clamp(0.0, 1.0);
    let b = ((t * bins as f64).floor() as usize).min(bins - 1);
    range.0 + (b as f64 + 0.5) * (range.1 - range.0) / bins as f64
}

/// Draws `count` fields from the KL prior with correlation lengths sampled
/// uniformly from `tau_range`. Bases are cached per quantized tau; every
/// sample uses its own counter-based RNG stream, so results are independent
/// of evaluation order.
pub fn generate_dataset(
    grid: &Grid,
    tau_range: (f64, f64),
    sigma_f: f64,
    count: usize,
    energy_frac: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(
        grid,
        tau_range,
        sigma_f,
        count,
        energy_frac,
        seed,
        FieldMean::Constant(1.0),
        DEFAULT_TAU_BINS,
        DEFAULT_MAX_KL_NODES,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn generate_dataset_with(
    grid: &Grid,
    tau_range: (f64, f64),
    sigma_f: f64,
    count: usize,
    energy_frac: f64,
    seed: u64,
    mean: FieldMean,
    tau_bins: usize,
    max_nodes: usize,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::EmptyInput("dataset count"));
    }
    if !(tau_range.0 > 0.0) || tau_range.1 < tau_range.0 {
        return Err(Error::Config(format!("bad tau range {tau_range:?}")));
    }
    let bins = tau_bins.max(1);

    // pass 1: draw every tau to learn which bases are needed
    let needed: BTreeMap<u64, f64> = (0..count)
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let tau = tau_range.0 + (tau_range.1 - tau_range.0) * rng.random::<f64>();
            let used = quantize_tau(tau, tau_range, bins);
            (used.to_bits(), used)
        })
        .collect();
    let built: Result<Vec<(u64, Arc<KlBasis>)>> = needed
        .par_iter()
        .map(|(&bits, &tau)| {
            kl_decompose_with_limit(grid, sigma_f, tau, energy_frac, mean.clone(), max_nodes)
                .map(|b| (bits, Arc::new(b)))
        })
        .collect();
    let bases: BTreeMap<u64, Arc<KlBasis>> = built?.into_iter().collect();

    // pass 2: synthesize samples, re-deriving each sample's stream
    let samples: Result<Vec<(Field, SampleMeta)>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let tau = tau_range.0 + (tau_range.1 - tau_range.0) * rng.random::<f64>();
            let used = quantize_tau(tau, tau_range, bins);
            let basis = &bases[&used.to_bits()];
            let kappa: Vec<f64> = (0..basis.n_kl())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let field = sample_field(basis, &kappa)?;
            Ok((
                field,
                SampleMeta {
                    tau,
                    tau_used: used,
                    stream: k as u64,
                    source_sample: None,
                    subdomain: None,
                },
            ))
        })
        .collect();
    let mut fields = Vec::with_capacity(count);
    let mut meta = Vec::with_capacity(count);
    for (f, m) in samples? {
        fields.push(f);
        meta.push(m);
    }
    Ok(Dataset {
        grid: grid.clone(),
        samples: fields,
        meta,
        seed,
    })
}

pub(crate) fn sample_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng
}

/// Restricts every global sample to every subdomain, yielding `M * K` local
/// fields. All subdomain node boxes must share one shape; the result is bound
/// to the first subdomain's local grid (samples are treated as same-size
/// images, their origin recorded in the metadata).
pub fn augment_dataset(ds: &Dataset, subs: &[Subdomain]) -> Result<Dataset> {
    if subs.is_empty() {
        return Err(Error::EmptyInput("subdomains"));
    }
    let shape = (subs[0].local_nx(), subs[0].local_ny());
    for s in subs {
        if (s.local_nx(), s.local_ny()) != shape {
            return Err(Error::ShapeMismatch(format!(
                "subdomain {} box {}x{} differs from {}x{}",
                s.index,
                s.local_nx(),
                s.local_ny(),
                shape.0,
                shape.1
            )));
        }
    }
    let canonical = subs[0].local_grid(&ds.grid);
    let mut samples = Vec::with_capacity(subs.len() * ds.len());
    let mut meta = Vec::with_capacity(subs.len() * ds.len());
    for s in subs {
        for (k, (f, m)) in ds.samples.iter().zip(&ds.meta).enumerate() {
            let local = restrict_field(f, s, &ds.grid)?;
            samples.push(Field {
                grid: canonical.clone(),
                values: local.values,
            });
            meta.push(SampleMeta {
                tau: m.tau,
                tau_used: m.tau_used,
                stream: m.stream,
                source_sample: Some(k),
                subdomain: Some(s.index),
            });
        }
    }
    Ok(Dataset {
        grid: canonical,
        samples,
        meta,
        seed: ds.seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    nx: usize,
    ny: usize,
    extent: Extent,
    seed: u64,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    #[serde(flatten)]
    meta: SampleMeta,
}

/// Writes the dataset as a directory of field binaries plus `manifest.json`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (k, (f, m)) in ds.samples.iter().zip(&ds.meta).enumerate() {
        let name = format!("sample_{k:05}.fld");
        f.save(dir.join(&name))?;
        entries.push(ManifestEntry {
            file: name,
            meta: m.clone(),
        });
    }
    let manifest = Manifest {
        nx: ds.grid.nx,
        ny: ds.grid.ny,
        extent: ds.grid.extent,
        seed: ds.seed,
        entries,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(f))?;
    let grid = crate::grid::build_grid(manifest.nx, manifest.ny, manifest.extent)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut meta = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let field = Field::load(dir.join(&e.file))?;
        if field.grid != grid {
            return Err(Error::GridMismatch(format!(
                "sample {} grid differs from manifest grid",
                e.file
            )));
        }
        samples.push(field);
        meta.push(e.meta);
    }
    Ok(Dataset {
        grid,
        samples,
        meta,
        seed: manifest.seed,
    })
}
