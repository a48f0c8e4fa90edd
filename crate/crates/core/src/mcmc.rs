//! Preconditioned Crank-Nicolson MCMC over latent vectors with a Gaussian
//! prior: proposals mix the current state with a fresh prior draw, so the
//! acceptance ratio reduces to a likelihood ratio.

use crate::error::{Error, Result};
use crate::random_field::sample_rng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Prior covariance structure.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Identity,
    Diagonal(Vec<f64>),
}

/// Gaussian prior N(mean, C).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianPrior {
    pub fn standard(dim: usize) -> Self {
        GaussianPrior {
            mean: vec![0.0; dim],
            cov: Covariance::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn std_dev(&self, i: usize) -> f64 {
        match &self.cov {
            Covariance::Identity => 1.0,
            Covariance::Diagonal(d) => d[i].sqrt(),
        }
    }

    /// Draws zeta ~ N(mean, C).
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                self.mean[i] + self.std_dev(i) * z
            })
            .collect()
    }
}

/// Unnormalized Gaussian log-likelihood `-|predicted - observed|^2 / (2 sigma^2)`.
pub fn log_likelihood(predicted: &[f64], observed: &[f64], noise_std: f64) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    if !(noise_std > 0.0) {
        return Err(Error::NonPositive {
            name: "noise_std",
            value: noise_std,
        });
    }
    let ss: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok(-ss / (2.0 * noise_std * noise_std))
}

/// pCN proposal `x* = sqrt(1 - gamma^2) (x - mu) + gamma zeta + mu`.
pub fn pcn_propose(
    current: &[f64],
    gamma: f64,
    prior: &GaussianPrior,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "pCN step size must lie in (0, 1], got {gamma}"
        )));
    }
    if current.len() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            got: current.len(),
        });
    }
    let zeta = prior.sample(rng);
    let contraction = (1.0 - gamma * gamma).sqrt();
    Ok(current
        .iter()
        .zip(&zeta)
        .zip(&prior.mean)
        .map(|((x, z), mu)| contraction * (x - mu) + gamma * z + mu)
        .collect())
}

/// `min(1, exp(ll_proposed - ll_current))`.
pub fn acceptance_prob(ll_current: f64, ll_proposed: f64) -> f64 {
    if ll_proposed >= ll_current {
        1.0
    } else {
        (ll_proposed - ll_current).exp()
    }
}

/// Realized Markov chain over latent vectors.
#[derive(Debug, Clone)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub log_likelihoods: Vec<f64>,
    pub accepted: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map(|s| s.len()).unwrap_or(0)
    }

    /// Fraction of accepted transitions.
    pub fn acceptance_rate(&self) -> f64 {
        if self.len() <= 1 {
            0.0
        } else {
            self.accepted as f64 / (self.len() - 1) as f64
        }
    }

    /// Samples after discarding the leading burn-in fraction.
    pub fn post_burn_in(&self, burn_in_frac: f64) -> &[Vec<f64>] {
        let skip = ((self.len() as f64) * burn_in_frac).floor() as usize;
        let skip = skip.min(self.len().saturating_sub(1));
        &self.samples[skip..]
    }
}

/// Runs pCN: prior initial state, one forward evaluation per step, accept
/// with the likelihood ratio against a uniform draw. Deterministic under
/// `seed`.
pub fn run_chain<F>(
    mut forward: F,
    observed: &[f64],
    noise_std: f64,
    prior: &GaussianPrior,
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Chain>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n_steps == 0 {
        return Err(Error::EmptyInput("chain length"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "pCN step size must lie in (0, 1], got {gamma}"
        )));
    }
    let mut rng = sample_rng(seed, 0);
    let mut samples = Vec::with_capacity(n_steps);
    let mut lls = Vec::with_capacity(n_steps);

    let x0 = prior.sample(&mut rng);
    let p0 = forward(&x0).map_err(|e| Error::ChainAborted {
        step: 0,
        source: Box::new(e),
    })?;
    let mut ll = log_likelihood(&p0, observed, noise_std)?;
    samples.push(x0);
    lls.push(ll);

    let mut accepted = 0usize;
    for step in 1..n_steps {
        let current = samples.last().unwrap().clone();
        let proposal = pcn_propose(&current, gamma, prior, &mut rng)?;
        let pred = forward(&proposal).map_err(|e| Error::ChainAborted {
            step,
            source: Box::new(e),
        })?;
        let ll_prop = log_likelihood(&pred, observed, noise_std)?;
        let ar = acceptance_prob(ll, ll_prop);
        let nu: f64 = rng.random();
        if nu < ar {
            samples.push(proposal);
            ll = ll_prop;
            accepted += 1;
        } else {
            samples.push(current);
        }
        lls.push(ll);
    }
    Ok(Chain {
        samples,
        log_likelihoods: lls,
        accepted,
        gamma,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct ChainSummary {
    gamma: f64,
    n_steps: usize,
    dim: usize,
    accepted: usize,
    acceptance_rate: f64,
    seed: u64,
}

/// Writes the latent-sample matrix (`CHN1` binary) and a JSON summary.
pub fn save_chain(
    chain: &Chain,
    bin_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    w.write_all(b"CHN1")?;
    w.write_all(&(chain.len() as u64).to_le_bytes())?;
    w.write_all(&(chain.dim() as u64).to_le_bytes())?;
    for s in &chain.samples {
        for v in s {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &chain.log_likelihoods {
        w.write_all(&v.to_le_bytes())?;
    }
    let summary = ChainSummary {
        gamma: chain.gamma,
        n_steps: chain.len(),
        dim: chain.dim(),
        accepted: chain.accepted,
        acceptance_rate: chain.acceptance_rate(),
        seed: chain.seed,
    };
    let f = std::fs::File::create(json_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &summary)?;
    Ok(())
}

pub fn load_chain(bin_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<Chain> {
    let f = std::fs::File::open(json_path)?;
    let summary: ChainSummary = serde_json::from_reader(std::io::BufReader::new(f))?;
    let mut r = std::io::BufReader::new(std::fs::File::open(bin_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"CHN1" {
        return Err(Error::BadFormat("missing CHN1 magic".into()));
    }
    let mut u = [0u8; 8];
    r.read_exact(&mut u)?;
    let n = u64::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let dim = u64::from_le_bytes(u) as usize;
    if n != summary.n_steps || dim != summary.dim {
        return Err(Error::BadFormat(
            "chain binary and summary disagree on shape".into(),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u)?;
            s.push(f64::from_le_bytes(u));
        }
        samples.push(s);
    }
    let mut lls = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u)?;
        lls.push(f64::from_le_bytes(u));
    }
    Ok(Chain {
        samples,
        log_likelihoods: lls,
        accepted: summary.accepted,
        gamma: summary.gamma,
        seed: summary.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn log_likelihood_reference_values() {
        assert_abs_diff_eq!(
            log_likelihood(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(),
            0.0,
            epsilon = 0.0
        );
        let s = 0.4;
        assert_abs_diff_eq!(
            log_likelihood(&[s, 0.0], &[0.0, 0.0], s).unwrap(),
            -0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            log_likelihood(&[1.0, 2.0], &[0.0, 0.0], 1.0).unwrap(),
            -2.5,
            epsilon = 1e-15
        );
        assert!(log_likelihood(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(log_likelihood(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn pcn_propose_limit_behavior() {
        let prior = GaussianPrior::standard(4);
        let x = vec![0.5, -1.0, 2.0, 0.1];

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tiny = pcn_propose(&x, 1e-12, &prior, &mut rng).unwrap();
        for (a, b) in tiny.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }

        // gamma = 1 redraws from the prior independently of the current state
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a = pcn_propose(&x, 1.0, &prior, &mut r1).unwrap();
        let b = pcn_propose(&vec![9.0; 4], 1.0, &prior, &mut r2).unwrap();
        assert_eq!(a, b);

        // 3-4-5 coefficients: recover zeta by proposing from the origin
        let mut r1 = ChaCha12Rng::seed_from_u64(3);
        let from_zero = pcn_propose(&vec![0.0; 4], 0.6, &prior, &mut r1).unwrap();
        let zeta: Vec<f64> = from_zero.iter().map(|v| v / 0.6).collect();
        let mut r2 = ChaCha12Rng::seed_from_u64(3);
        let prop = pcn_propose(&x, 0.6, &prior, &mut r2).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(prop[i], 0.8 * x[i] + 0.6 * zeta[i], epsilon = 1e-12);
        }

        assert!(pcn_propose(&x, 0.0, &prior, &mut rng).is_err());
        assert!(pcn_propose(&x, 1.5, &prior, &mut rng).is_err());
    }

    #[test]
    fn acceptance_prob_reference_values() {
        assert_eq!(acceptance_prob(-3.0, -1.0), 1.0);
        assert_eq!(acceptance_prob(-1.0, -1.0), 1.0);
        assert_abs_diff_eq!(acceptance_prob(0.0, -(2.0f64.ln())), 0.5, epsilon = 1e-15);
        assert_eq!(acceptance_prob(0.0, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn flat_target_accepts_everything() {
        let prior = GaussianPrior::standard(3);
        let observed = vec![1.0, 2.0];
        let chain = run_chain(
            |_z| Ok(observed.clone()),
            &observed,
            0.5,
            &prior,
            0.4,
            500,
            11,
        )
        .unwrap();
        assert_eq!(chain.accepted, 499);
        assert_eq!(chain.acceptance_rate(), 1.0);
    }

    #[test]
    fn one_forward_evaluation_per_step() {
        let prior = GaussianPrior::standard(2);
        let observed = vec![0.0, 0.0];
        let mut count = 0usize;
        let n = 137;
        let _ = run_chain(
            |z: &[f64]| {
                count += 1;
                Ok(z.to_vec())
            },
            &observed,
            1.0,
            &prior,
            0.3,
            n,
            5,
        )
        .unwrap();
        assert_eq!(count, n);
    }

    #[test]
    fn chains_are_deterministic_under_seed() {
        let prior = GaussianPrior::standard(3);
        let observed = vec![0.2, -0.1, 0.5];
        let run = |seed| {
            run_chain(
                |z: &[f64]| Ok(z.to_vec()),
                &observed,
                0.3,
                &prior,
                0.5,
                200,
                seed,
            )
            .unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.accepted, b.accepted);
        let c = run(43);
        assert!(a.samples != c.samples);
    }

    #[test]
    fn forward_failure_reports_step() {
        let prior = GaussianPrior::standard(1);
        let mut calls = 0;
        let r = run_chain(
            |z: &[f64]| {
                calls += 1;
                if calls > 3 {
                    Err(Error::EmptyInput("forward"))
                } else {
                    Ok(z.to_vec())
                }
            },
            &[0.0],
            1.0,
            &prior,
            0.5,
            100,
            1,
        );
        match r {
            Err(Error::ChainAborted { step, .. }) => assert_eq!(step, 3),
            other => panic!("expected ChainAborted, got {other:?}"),
        }
    }

    #[test]
    fn conjugate_linear_gaussian_posterior_mean() {
        // forward = identity in 2D: posterior N(d / (1 + s^2), s^2/(1+s^2) I)
        let sigma = 0.5;
        let d = vec![1.0, -0.6];
        let prior = GaussianPrior::standard(2);
        let n = 100_000;
        let chain = run_chain(|z: &[f64]| Ok(z.to_vec()), &d, sigma, &prior, 0.5, n, 17).unwrap();
        let want: Vec<f64> = d.iter().map(|v| v / (1.0 + sigma * sigma)).collect();
        let post_var = sigma * sigma / (1.0 + sigma * sigma);

        // batch-means standard error to account for autocorrelation
        let burn = &chain.samples[n / 5..];
        for c in 0..2 {
            let vals: Vec<f64> = burn.iter().map(|s| s[c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let nb = 20;
            let bs = vals.len() / nb;
            let bmeans: Vec<f64> = (0..nb)
                .map(|b| vals[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
                .collect();
            let bvar: f64 =
                bmeans.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (nb - 1) as f64;
            let se = (bvar / nb as f64).sqrt();
            assert!(
                (mean - want[c]).abs() < 3.0 * se.max(1e-4),
                "component {c}: mean {mean:.5} vs analytic {:.5} (se {se:.5})",
                want[c]
            );
            // variance sanity within 10%
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((var - post_var).abs() / post_var < 0.1);
        }
    }

    // diagonal multivariate normal log density (test-only oracle)
    fn mvn_logpdf_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
        x.iter()
            .zip(mean)
            .zip(var)
            .map(|((xi, mi), vi)| {
                -0.5 * ((xi - mi) * (xi - mi) / vi + vi.ln() + (2.0 * std::f64::consts::PI).ln())
            })
            .sum()
    }

    #[test]
    fn proposal_satisfies_prior_reversibility() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for dim in 2..=8usize {
            let mean: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let var: Vec<f64> = (0..dim).map(|_| 0.5 + rng.random::<f64>()).collect();
            let prior = GaussianPrior {
                mean: mean.clone(),
                cov: Covariance::Diagonal(var.clone()),
            };
            let gamma = 0.3 + 0.5 * rng.random::<f64>();
            let c = (1.0 - gamma * gamma).sqrt();
            for _ in 0..150 {
                let x = prior.sample(&mut rng);
                let y = pcn_propose(&x, gamma, &prior, &mut rng).unwrap();
                let q_mean_fwd: Vec<f64> = x
                    .iter()
                    .zip(&mean)
                    .map(|(xi, mi)| mi + c * (xi - mi))
                    .collect();
                let q_mean_bwd: Vec<f64> = y
                    .iter()
                    .zip(&mean)
                    .map(|(yi, mi)| mi + c * (yi - mi))
                    .collect();
                let q_var: Vec<f64> = var.iter().map(|v| gamma * gamma * v).collect();
                let lhs =
                    mvn_logpdf_diag(&y, &q_mean_fwd, &q_var) + mvn_logpdf_diag(&x, &mean, &var);
                let rhs =
                    mvn_logpdf_diag(&x, &q_mean_bwd, &q_var) + mvn_logpdf_diag(&y, &mean, &var);
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn acceptance_rate_arithmetic() {
        let mk = |n: usize, accepted: usize| Chain {
            samples: vec![vec![0.0]; n],
            log_likelihoods: vec![0.0; n],
            accepted,
            gamma: 0.1,
            seed: 0,
        };
        assert_eq!(mk(11, 10).acceptance_rate(), 1.0);
        assert_eq!(mk(11, 0).acceptance_rate(), 0.0);
        assert_abs_diff_eq!(mk(11, 3).acceptance_rate(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn chain_dump_round_trip() {
        let prior = GaussianPrior::standard(3);
        let chain = run_chain(
            |z: &[f64]| Ok(z.to_vec()),
            &[0.1, 0.2, 0.3],
            0.7,
            &prior,
            0.4,
            50,
            9,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("chain.bin");
        let json = dir.path().join("chain.json");
        save_chain(&chain, &bin, &json).unwrap();
        let back = load_chain(&bin, &json).unwrap();
        assert_eq!(back.samples, chain.samples);
        assert_eq!(back.log_likelihoods, chain.log_likelihoods);
        assert_eq!(back.accepted, chain.accepted);
        assert_eq!(back.gamma, chain.gamma);
        assert_eq!(back.seed, chain.seed);
    }

    #[test]
    fn post_burn_in_slicing() {
        let chain = Chain {
            samples: (0..10).map(|i| vec![i as f64]).collect(),
            log_likelihoods: vec![0.0; 10],
            accepted: 0,
            gamma: 0.1,
            seed: 0,
        };
        assert_eq!(chain.post_burn_in(0.2).len(), 8);
        assert_eq!(chain.post_burn_in(0.0).len(), 10);
        assert_eq!(chain.post_burn_in(1.0).len(), 1);
    }
}
