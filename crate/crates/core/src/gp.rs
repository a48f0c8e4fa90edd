//! Gaussian-process regression of interface functions over 2D sensor
//! locations: RBF kernel with zero prior mean, marginal-likelihood
//! hyperparameter fitting, and the adaptive max-variance acquisition loop.

use crate::error::{Error, Result};
use crate::grid::ObservationSet;
use crate::linalg::{dense_chol_solve, dense_cholesky, dense_forward_solve};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Squared-exponential kernel `exp(-|s - s2|^2 / (2 sigma_gp^2))`.
pub fn rbf_kernel(s: (f64, f64), s2: (f64, f64), sigma_gp: f64) -> Result<f64> {
    if !(sigma_gp > 0.0) {
        return Err(Error::NonPositive {
            name: "sigma_gp",
            value: sigma_gp,
        });
    }
    let d2 = (s.0 - s2.0).powi(2) + (s.1 - s2.1).powi(2);
    Ok((-d2 / (2.0 * sigma_gp * sigma_gp)).exp())
}

/// Search range for the kernel length-scale.
const SIGMA_RANGE: (f64, f64) = (1e-2, 1e1);
const SIGMA_GRID: usize = 64;

/// Fitted GP posterior for one interface.
#[derive(Debug, Clone)]
pub struct GpInterfaceModel {
    pub train_locations: Vec<(f64, f64)>,
    pub train_values: Vec<f64>,
    pub kernel_scale: f64,
    pub noise_var: f64,
    chol: Array2<f64>,
    alpha: Vec<f64>,
}

impl GpInterfaceModel {
    /// Factorizes `K + noise_var I` for the given hyperparameter.
    pub fn fit(
        locations: Vec<(f64, f64)>,
        values: Vec<f64>,
        kernel_scale: f64,
        noise_var: f64,
    ) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::EmptyInput("GP training set"));
        }
        if locations.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: locations.len(),
                got: values.len(),
            });
        }
        if noise_var < 0.0 {
            return Err(Error::NonPositive {
                name: "noise_var",
                value: noise_var,
            });
        }
        let n = locations.len();
        let mut k = Array2::<f64>::zeros((n, n));
        for a in 0..n {
            for b in a..n {
                let v = rbf_kernel(locations[a], locations[b], kernel_scale)?;
                k[[a, b]] = v;
                k[[b, a]] = v;
            }
            k[[a, a]] += noise_var;
        }
        let chol = dense_cholesky(&k)
            .map_err(|e| Error::SolverFailure(format!("GP Gram factorization failed: {e}")))?;
        let alpha = dense_chol_solve(&chol, &values);
        Ok(GpInterfaceModel {
            train_locations: locations,
            train_values: values,
            kernel_scale,
            noise_var,
            chol,
            alpha,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_locations.len()
    }

    /// Log marginal likelihood of the training data under the current
    /// hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n_train() as f64;
        let data: f64 = self
            .train_values
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| d * a)
            .sum();
        let logdet: f64 = (0..self.n_train())
            .map(|i| self.chol[[i, i]].ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * data - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Posterior mean and variance at query points (zero prior mean). Variances
/// are clamped at zero; the largest clamped magnitude is also returned.
pub fn gp_posterior_with_clamp(
    model: &GpInterfaceModel,
    queries: &[(f64, f64)],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = model.n_train();
    let mut means = Vec::with_capacity(queries.len());
    let mut vars = Vec::with_capacity(queries.len());
    let mut worst = 0.0f64;
    for &q in queries {
        let mut kstar = Vec::with_capacity(n);
        for &t in &model.train_locations {
            kstar.push(rbf_kernel(q, t, model.kernel_scale)?);
        }
        let mean: f64 = kstar.iter().zip(&model.alpha).map(|(k, a)| k * a).sum();
        let w = dense_forward_solve(&model.chol, &kstar);
        let reduction: f64 = w.iter().map(|x| x * x).sum();
        let raw = 1.0 - reduction;
        if raw < -worst {
            worst = -raw;
        }
        means.push(mean);
        vars.push(raw.max(0.0));
    }
    Ok((means, vars, worst))
}

/// Posterior mean and variance at query points.
pub fn gp_posterior(
    model: &GpInterfaceModel,
    queries: &[(f64, f64)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, v, _) = gp_posterior_with_clamp(model, queries)?;
    Ok((m, v))
}

fn bbox_diagonal(locations: &[(f64, f64)]) -> f64 {
    let mut min = (f64::MAX, f64::MAX);
    let mut max = (f64::MIN, f64::MIN);
    for &(a, b) in locations {
        min.0 = min.0.min(a);
        min.1 = min.1.min(b);
        max.0 = max.0.max(a);
        max.1 = max.1.max(b);
    }
    ((max.0 - min.0).powi(2) + (max.1 - min.1).powi(2)).sqrt()
}

fn lml_at(locations: &[(f64, f64)], values: &[f64], noise_var: f64, sigma: f64) -> f64 {
    match GpInterfaceModel::fit(locations.to_vec(), values.to_vec(), sigma, noise_var) {
        Ok(m) => m.log_marginal_likelihood(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Maximizes the log marginal likelihood over the kernel scale: log-spaced
/// grid search followed by golden-section refinement. Degenerate training
/// sets (single point, or all points coincident) fall back to a quarter of
/// the training bounding-box diagonal (0.25 when that is zero).
pub fn fit_hyperparameter(
    locations: &[(f64, f64)],
    values: &[f64],
    noise_var: f64,
) -> Result<f64> {
    if locations.is_empty() {
        return Err(Error::EmptyInput("GP training set"));
    }
    let diag = bbox_diagonal(locations);
    if locations.len() == 1 || diag <= 1e-12 {
        let fallback = if diag > 1e-12 { diag / 4.0 } else { 0.25 };
        return Ok(fallback.clamp(SIGMA_RANGE.0, SIGMA_RANGE.1));
    }

    let (lo, hi) = SIGMA_RANGE;
    let grid: Vec<f64> = (0..SIGMA_GRID)
        .map(|i| lo * (hi / lo).powf(i as f64 / (SIGMA_GRID - 1) as f64))
        .collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&s| lml_at(locations, values, noise_var, s))
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap();
    if scores[best] == f64::NEG_INFINITY {
        return Err(Error::SolverFailure(
            "marginal likelihood undefined across the whole scale grid".into(),
        ));
    }

    // golden-section refinement in log space around the best bracket
    let mut a = grid[best.saturating_sub(1)].ln();
    let mut b = grid[(best + 1).min(SIGMA_GRID - 1)].ln();
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| lml_at(locations, values, noise_var, x.exp());
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..48 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// One acquisition-loop record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub iteration: usize,
    /// Test point with the largest posterior variance.
    pub sbar: (f64, f64),
    /// Sensor pulled into the training set this round (none on the final row).
    pub chosen: Option<(f64, f64)>,
    pub max_variance: f64,
}

/// Trace of an adaptive fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionTrace {
    pub records: Vec<AcquisitionRecord>,
    /// Whether the loop stopped by reaching the tolerance (false: sensors ran out).
    pub reached_tol: bool,
    /// Largest magnitude of negative posterior variance clamped to zero.
    pub variance_clamp: f64,
}

impl AcquisitionTrace {
    pub fn final_max_variance(&self) -> f64 {
        self.records
            .last()
            .map(|r| r.max_variance)
            .unwrap_or(f64::NAN)
    }

    /// Writes the trace as CSV (iteration, sbar, chosen sensor, max variance).
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iteration",
            "sbar_s1",
            "sbar_s2",
            "star_s1",
            "star_s2",
            "max_variance",
        ])?;
        for r in &self.records {
            let (c1, c2) = match r.chosen {
                Some((a, b)) => (format!("{a}"), format!("{b}")),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.iteration.to_string(),
                r.sbar.0.to_string(),
                r.sbar.1.to_string(),
                c1,
                c2,
                format!("{:e}", r.max_variance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// Deterministic ordering: distance first, then lexicographic location.
fn closer(
    best: Option<(f64, (f64, f64), usize)>,
    cand_d: f64,
    cand_loc: (f64, f64),
    cand_idx: usize,
) -> Option<(f64, (f64, f64), usize)> {
    match best {
        None => Some((cand_d, cand_loc, cand_idx)),
        Some((bd, bl, bi)) => {
            let better = cand_d < bd - 1e-15
                || ((cand_d - bd).abs() <= 1e-15 && (cand_loc.0, cand_loc.1) < (bl.0, bl.1));
            if better {
                Some((cand_d, cand_loc, cand_idx))
            } else {
                Some((bd, bl, bi))
            }
        }
    }
}

/// Adaptive interface fit: start from the observation closest to the test-set
/// midpoint, then repeatedly refit the hyperparameter and pull in the unused
/// sensor nearest to the highest-variance test point until the maximum
/// posterior variance over the test set drops below `delta_tol` (or sensors
/// run out, which is flagged, not an error).
pub fn adaptive_fit(
    local_obs: &ObservationSet,
    test_set: &[(f64, f64)],
    delta_tol: f64,
    noise_var: f64,
) -> Result<(GpInterfaceModel, AcquisitionTrace)> {
    if local_obs.is_empty() {
        return Err(Error::EmptyInput("local observations"));
    }
    if test_set.is_empty() {
        return Err(Error::EmptyInput("interface test set"));
    }
    let n_obs = local_obs.len();
    let mut used = vec![false; n_obs];

    // midpoint of the test-set bounding box
    let mut min = (f64::MAX, f64::MAX);
    let mut max = (f64::MIN, f64::MIN);
    for &(a, b) in test_set {
        min.0 = min.0.min(a);
        min.1 = min.1.min(b);
        max.0 = max.0.max(a);
        max.1 = max.1.max(b);
    }
    let midpoint = ((min.0 + max.0) / 2.0, (min.1 + max.1) / 2.0);

    let mut first = None;
    for (i, s) in local_obs.sensors.iter().enumerate() {
        let d = dist(s.loc, midpoint);
        first = closer(first, d, s.loc, i);
    }
    let first = first.unwrap().2;
    used[first] = true;
    let mut locations = vec![local_obs.sensors[first].loc];
    let mut values = vec![local_obs.values[first]];

    let mut records = Vec::new();
    let mut variance_clamp = 0.0f64;
    let mut iteration = 0usize;
    loop {
        let sigma = fit_hyperparameter(&locations, &values, noise_var)?;
        let model = GpInterfaceModel::fit(locations.clone(), values.clone(), sigma, noise_var)?;
        let (_, vars, clamp) = gp_posterior_with_clamp(&model, test_set)?;
        variance_clamp = variance_clamp.max(clamp);
        let (mut argmax, mut max_var) = (0usize, f64::MIN);
        for (i, &v) in vars.iter().enumerate() {
            if v > max_var {
                max_var = v;
                argmax = i;
            }
        }
        let sbar = test_set[argmax];

        if max_var < delta_tol {
            records.push(AcquisitionRecord {
                iteration,
                sbar,
                chosen: None,
                max_variance: max_var,
            });
            return Ok((
                model,
                AcquisitionTrace {
                    records,
                    reached_tol: true,
                    variance_clamp,
                },
            ));
        }

        let mut next = None;
        for (i, s) in local_obs.sensors.iter().enumerate() {
            if used[i] {
                continue;
            }
            next = closer(next, dist(s.loc, sbar), s.loc, i);
        }
        match next {
            None => {
                records.push(AcquisitionRecord {
                    iteration,
                    sbar,
                    chosen: None,
                    max_variance: max_var,
                });
                return Ok((
                    model,
                    AcquisitionTrace {
                        records,
                        reached_tol: false,
                        variance_clamp,
                    },
                ));
            }
            Some((_, loc, idx)) => {
                used[idx] = true;
                records.push(AcquisitionRecord {
                    iteration,
                    sbar,
                    chosen: Some(loc),
                    max_variance: max_var,
                });
                locations.push(loc);
                values.push(local_obs.values[idx]);
            }
        }
        iteration += 1;
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Posterior mean at every interface node, the Dirichlet data for local solves.
pub fn interface_values(model: &GpInterfaceModel, nodes: &[(f64, f64)]) -> Result<Vec<f64>> {
    Ok(gp_posterior(model, nodes)?.0)
}

#[derive(Serialize, Deserialize)]
struct GpModelFile {
    train_locations: Vec<(f64, f64)>,
    train_values: Vec<f64>,
    kernel_scale: f64,
    noise_var: f64,
}

/// Saves the model (training set + hyperparameters) as JSON.
pub fn save_gp_model(model: &GpInterfaceModel, path: impl AsRef<Path>) -> Result<()> {
    let file = GpModelFile {
        train_locations: model.train_locations.clone(),
        train_values: model.train_values.clone(),
        kernel_scale: model.kernel_scale,
        noise_var: model.noise_var,
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &file)?;
    Ok(())
}

/// Loads and refactorizes a saved model.
pub fn load_gp_model(path: impl AsRef<Path>) -> Result<GpInterfaceModel> {
    let f = std::fs::File::open(path)?;
    let file: GpModelFile = serde_json::from_reader(std::io::BufReader::new(f))?;
    GpInterfaceModel::fit(
        file.train_locations,
        file.train_values,
        file.kernel_scale,
        file.noise_var,
    )
}
