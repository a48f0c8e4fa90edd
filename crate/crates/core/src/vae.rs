//! Fully-connected variational autoencoder built from scratch: factorized
//! Gaussian encoder, Gaussian decoder with identity covariance, single-sample
//! reparameterized ELBO, manual reverse-mode gradients and Adam.
//!
//! The training objective per batch is
//! `sum_k [ ||dec(alpha_k) - x_k||^2 - L_KL(x_k) ]` with
//! `alpha_k = mu(x_k) + sigma(x_k) .* eps_k` and the analytic Gaussian KL term.

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::random_field::sample_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const LOGVAR_CLAMP: f64 = 20.0;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }
}

/// One affine layer, weights stored as (out, in).
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn xavier(out_dim: usize, in_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            (rng.random::<f64>() * 2.0 - 1.0) * bound
        });
        Layer {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w.t());
        for mut row in z.rows_mut() {
            row += &self.b;
        }
        z
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// A stack of affine layers with the activation applied after each one
/// except, optionally, the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    /// Whether the final layer output is passed through the activation.
    pub activate_last: bool,
}

impl Mlp {
    // Returns (pre-activations per layer, activations with the input at 0).
    fn forward_cached(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(act.last().unwrap());
            let is_last = l + 1 == self.layers.len();
            let a = if is_last && !self.activate_last {
                z.clone()
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
            pre.push(z);
            act.push(a);
        }
        (pre, act)
    }

    // Backpropagates d(loss)/d(output); returns d(loss)/d(input) and grads.
    fn backward(
        &self,
        pre: &[Array2<f64>],
        act: &[Array2<f64>],
        dout: Array2<f64>,
    ) -> (Array2<f64>, Vec<LayerGrad>) {
        let mut grads = vec![LayerGrad::default(); self.layers.len()];
        let mut da = dout;
        for l in (0..self.layers.len()).rev() {
            let is_last = l + 1 == self.layers.len();
            let dz = if is_last && !self.activate_last {
                da
            } else {
                let mut dz = da;
                dz.zip_mut_with(&pre[l], |d, &z| *d *= self.activation.derivative(z));
                dz
            };
            grads[l] = LayerGrad {
                w: dz.t().dot(&act[l]),
                b: dz.sum_axis(ndarray::Axis(0)),
            };
            da = dz.dot(&self.layers[l].w);
        }
        (da, grads)
    }
}

/// Gradient for one layer, same shapes as the layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Default for LayerGrad {
    fn default() -> Self {
        LayerGrad {
            w: Array2::zeros((0, 0)),
            b: Array1::zeros(0),
        }
    }
}

/// Gradients for the whole model in canonical layer order
/// (encoder trunk, mu head, logvar head, decoder).
#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub layers: Vec<LayerGrad>,
}

/// Encoder trunk + Gaussian heads + decoder.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder_trunk: Mlp,
    pub mu_head: Layer,
    pub logvar_head: Layer,
    pub decoder: Mlp,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Optional scalar input standardization (shift, scale) learned at
    /// training time; `generate` undoes it.
    pub standardize: Option<(f64, f64)>,
}

impl VaeModel {
    /// Builds a model with Xavier-uniform weights and zero biases.
    pub fn new(
        input_dim: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::Config("zero model dimension".into()));
        }
        if encoder_hidden.is_empty() || decoder_hidden.is_empty() {
            return Err(Error::Config("need at least one hidden layer".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut trunk = Vec::new();
        let mut din = input_dim;
        for &h in encoder_hidden {
            trunk.push(Layer::xavier(h, din, &mut rng));
            din = h;
        }
        let mu_head = Layer::xavier(latent_dim, din, &mut rng);
        let logvar_head = Layer::xavier(latent_dim, din, &mut rng);
        let mut dec = Vec::new();
        let mut dd = latent_dim;
        for &h in decoder_hidden {
            dec.push(Layer::xavier(h, dd, &mut rng));
            dd = h;
        }
        dec.push(Layer::xavier(input_dim, dd, &mut rng));
        Ok(VaeModel {
            encoder_trunk: Mlp {
                layers: trunk,
                activation,
                activate_last: true,
            },
            mu_head,
            logvar_head,
            decoder: Mlp {
                layers: dec,
                activation,
                activate_last: false,
            },
            input_dim,
            latent_dim,
            standardize: None,
        })
    }

    /// All parameter-carrying layers in canonical order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.encoder_trunk.layers.iter().collect();
        v.push(&self.mu_head);
        v.push(&self.logvar_head);
        v.extend(self.decoder.layers.iter());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.encoder_trunk.layers.iter_mut().collect();
        v.push(&mut self.mu_head);
        v.push(&mut self.logvar_head);
        v.extend(self.decoder.layers.iter_mut());
        v
    }

    pub fn n_parameters(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn apply_standardize(&self, x: &mut Array2<f64>) {
        if let Some((shift, scale)) = self.standardize {
            x.mapv_inplace(|v| (v - shift) / scale);
        }
    }

    /// Encoder pass: mean and clamped log-variance of the latent posterior.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        self.apply_standardize(&mut xa);
        let (_, act) = self.encoder_trunk.forward_cached(&xa);
        let h = act.last().unwrap();
        let mu = self.mu_head.forward(h);
        let lv = self
            .logvar_head
            .forward(h)
            .mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        Ok((mu.row(0).to_vec(), lv.row(0).to_vec()))
    }

    /// Deterministic generator: decoder mean for a latent vector.
    pub fn generate(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                got: latent.len(),
            });
        }
        let za = Array2::from_shape_vec((1, latent.len()), latent.to_vec()).unwrap();
        let (_, act) = self.decoder.forward_cached(&za);
        let mut out = act.last().unwrap().row(0).to_vec();
        if let Some((shift, scale)) = self.standardize {
            for v in out.iter_mut() {
                *v = *v * scale + shift;
            }
        }
        Ok(out)
    }
}

/// `alpha = mu + exp(logvar / 2) .* eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: logvar.len().max(eps.len()),
        });
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Analytic Gaussian regularizer `0.5 * sum(1 + logvar - mu^2 - exp(logvar))`;
/// non-positive, zero exactly at the prior.
pub fn kl_term(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum()
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            standardize: false,
        }
    }
}

/// Negative batch ELBO and its gradients for a batch with given noise draws.
pub fn elbo_batch(model: &VaeModel, batch: &[&[f64]], eps: &[&[f64]]) -> Result<(f64, VaeGrads)> {
    if batch.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: eps.len(),
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let b = batch.len();
    let d = model.input_dim;
    let m = model.latent_dim;
    let mut x = Array2::<f64>::zeros((b, d));
    let mut e = Array2::<f64>::zeros((b, m));
    for (k, (xi, ei)) in batch.iter().zip(eps).enumerate() {
        if xi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: xi.len(),
            });
        }
        if ei.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: ei.len(),
            });
        }
        x.row_mut(k).assign(&Array1::from_vec(xi.to_vec()));
        e.row_mut(k).assign(&Array1::from_vec(ei.to_vec()));
    }
    elbo_batch_arrays(model, &x, &e)
}

pub(crate) fn elbo_batch_arrays(
    model: &VaeModel,
    x_raw: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<(f64, VaeGrads)> {
    let mut x = x_raw.clone();
    model.apply_standardize(&mut x);

    // forward
    let (pre_t, act_t) = model.encoder_trunk.forward_cached(&x);
    let h = act_t.last().unwrap().clone();
    let mu = model.mu_head.forward(&h);
    let lv_raw = model.logvar_head.forward(&h);
    let lv = lv_raw.mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let alpha = &mu + &(&sigma * eps);
    let (pre_d, act_d) = model.decoder.forward_cached(&alpha);
    let xhat = act_d.last().unwrap();
    let resid = xhat - &x;

    let recon: f64 = resid.iter().map(|r| r * r).sum();
    let dkl: f64 = mu
        .iter()
        .zip(lv.iter())
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum();
    let loss = recon + dkl;

    // backward
    let dxhat = resid.mapv(|r| 2.0 * r);
    let (dalpha, grads_dec) = model.decoder.backward(&pre_d, &act_d, dxhat);

    let dmu = &dalpha + &mu;
    let mut dlv = &dalpha * &(0.5 * &sigma * eps);
    dlv.zip_mut_with(&lv, |dst, &l| *dst += 0.5 * (l.exp() - 1.0));
    // clamp gate
    dlv.zip_mut_with(&lv_raw, |dst, &raw| {
        if raw.abs() >= LOGVAR_CLAMP {
            *dst = 0.0;
        }
    });

    let g_mu = LayerGrad {
        w: dmu.t().dot(&h),
        b: dmu.sum_axis(ndarray::Axis(0)),
    };
    let g_lv = LayerGrad {
        w: dlv.t().dot(&h),
        b: dlv.sum_axis(ndarray::Axis(0)),
    };
    let dh = dmu.dot(&model.mu_head.w) + dlv.dot(&model.logvar_head.w);
    let (_, grads_trunk) = model.encoder_trunk.backward(&pre_t, &act_t, dh);

    let mut layers = grads_trunk;
    layers.push(g_mu);
    layers.push(g_lv);
    layers.extend(grads_dec);
    Ok((loss, VaeGrads { layers }))
}

/// Adam first/second-moment state in canonical layer order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &VaeModel) -> Self {
        let zero = |l: &Layer| LayerGrad {
            w: Array2::zeros(l.w.dim()),
            b: Array1::zeros(l.b.len()),
        };
        AdamState {
            m: model.layers().iter().map(|l| zero(l)).collect(),
            v: model.layers().iter().map(|l| zero(l)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    model: &mut VaeModel,
    grads: &VaeGrads,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    state.t += 1;
    let t = state.t;
    let (b1, b2, lr, eps) = (
        config.adam_beta1,
        config.adam_beta2,
        config.learning_rate,
        config.adam_eps,
    );
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for ((layer, grad), (m, v)) in model
        .layers_mut()
        .into_iter()
        .zip(&grads.layers)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        };
        for ((p, g), (mm, vv)) in layer
            .w
            .iter_mut()
            .zip(grad.w.iter())
            .zip(m.w.iter_mut().zip(v.w.iter_mut()))
        {
            upd(p, *g, mm, vv);
        }
        for ((p, g), (mm, vv)) in layer
            .b
            .iter_mut()
            .zip(grad.b.iter())
            .zip(m.b.iter_mut().zip(v.b.iter_mut()))
        {
            upd(p, *g, mm, vv);
        }
    }
}

/// Mini-batch training loop: shuffle, draw one noise vector per sample,
/// accumulate the negative-ELBO gradients, Adam-update. Returns per-epoch
/// mean loss; deterministic under the config seed.
pub fn train(samples: &[Field], model: &mut VaeModel, config: &TrainConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let d = model.input_dim;
    for f in samples {
        if f.values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: f.values.len(),
            });
        }
    }
    if config.batch_size == 0 || config.batch_size > samples.len() {
        return Err(Error::Config(format!(
            "batch size {} out of range 1..={}",
            config.batch_size,
            samples.len()
        )));
    }
    if config.standardize && model.standardize.is_none() {
        let n = (samples.len() * d) as f64;
        let mean: f64 = samples.iter().flat_map(|f| &f.values).sum::<f64>() / n;
        let var: f64 = samples
            .iter()
            .flat_map(|f| &f.values)
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        model.standardize = Some((mean, var.sqrt().max(1e-12)));
    }

    let k = samples.len();
    let m = model.latent_dim;
    let mut rng = sample_rng(config.seed, 0);
    let mut state = AdamState::new(model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..k).collect();

    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = chunk.len();
            let mut x = Array2::<f64>::zeros((b, d));
            for (row, &idx) in chunk.iter().enumerate() {
                x.row_mut(row)
                    .assign(&Array1::from_vec(samples[idx].values.clone()));
            }
            let mut eps = Array2::<f64>::zeros((b, m));
            for row in 0..b {
                for col in 0..m {
                    eps[[row, col]] = StandardNormal.sample(&mut rng);
                }
            }
            let (loss, grads) = elbo_batch_arrays(model, &x, &eps)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            adam_step(model, &grads, &mut state, config);
            epoch_loss += loss;
        }
        history.push(epoch_loss / k as f64);
    }
    Ok(history)
}

// --- checkpoint format: "VAE1", u64 header length, JSON header, then f64 LE
// parameters in canonical layer order (each layer: W row-major, then b) ---

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    input_dim: usize,
    latent_dim: usize,
    encoder_hidden: Vec<usize>,
    decoder_hidden: Vec<usize>,
    activation: Activation,
    standardize: Option<(f64, f64)>,
}

/// Writes the model checkpoint.
pub fn save_model(model: &VaeModel, path: impl AsRef<Path>) -> Result<()> {
    let header = CheckpointHeader {
        input_dim: model.input_dim,
        latent_dim: model.latent_dim,
        encoder_hidden: model
            .encoder_trunk
            .layers
            .iter()
            .map(|l| l.out_dim())
            .collect(),
        decoder_hidden: model.decoder.layers[..model.decoder.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect(),
        activation: model.encoder_trunk.activation,
        standardize: model.standardize,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"VAE1")?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for layer in model.layers() {
        for v in layer.w.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in layer.b.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<VaeModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"VAE1" {
        return Err(Error::BadFormat("missing VAE1 magic".into()));
    }
    let mut u = [0u8; 8];
    r.read_exact(&mut u)?;
    let hlen = u64::from_le_bytes(u) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let mut model = VaeModel::new(
        header.input_dim,
        &header.encoder_hidden,
        &header.decoder_hidden,
        header.latent_dim,
        header.activation,
        0,
    )?;
    model.standardize = header.standardize;
    for layer in model.layers_mut() {
        for v in layer.w.iter_mut() {
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        for v in layer.b.iter_mut() {
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Extent};
    use approx::assert_abs_diff_eq;

    fn tiny_model(seed: u64) -> VaeModel {
        VaeModel::new(2, &[3], &[3], 1, Activation::default(), seed).unwrap()
    }

    #[test]
    fn encode_zero_heads_gives_standard_posterior() {
        let mut m = tiny_model(1);
        m.mu_head.w.fill(0.0);
        m.mu_head.b.fill(0.0);
        m.logvar_head.w.fill(0.0);
        m.logvar_head.b.fill(0.0);
        let (mu, lv) = m.encode(&[0.3, -0.8]).unwrap();
        assert_eq!(mu, vec![0.0]);
        assert_eq!(lv, vec![0.0]);
    }

    #[test]
    fn encode_hand_computed_composition() {
        // one hidden unit, hand-set weights, x = [1]
        let mut m =
            VaeModel::new(1, &[1], &[1], 1, Activation::LeakyRelu { slope: 0.2 }, 0).unwrap();
        m.encoder_trunk.layers[0].w[[0, 0]] = 0.5;
        m.encoder_trunk.layers[0].b[0] = 0.1;
        m.mu_head.w[[0, 0]] = 2.0;
        m.mu_head.b[0] = -0.1;
        m.logvar_head.w[[0, 0]] = 1.0;
        m.logvar_head.b[0] = 0.5;
        let (mu, lv) = m.encode(&[1.0]).unwrap();
        // h = leaky(0.5*1 + 0.1) = 0.6; mu = 2*0.6 - 0.1 = 1.1; lv = 0.6 + 0.5
        assert_abs_diff_eq!(mu[0], 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(lv[0], 1.1, epsilon = 1e-15);

        // negative pre-activation path: z = -0.9, h = -0.18
        m.encoder_trunk.layers[0].w[[0, 0]] = -1.0;
        let (mu, _) = m.encode(&[1.0]).unwrap();
        assert_abs_diff_eq!(mu[0], 2.0 * (-0.18) - 0.1, epsilon = 1e-15);
    }

    #[test]
    fn encode_rejects_bad_dimension() {
        let m = tiny_model(2);
        assert!(m.encode(&[1.0]).is_err());
    }

    #[test]
    fn reparameterize_reference_cases() {
        let a = reparameterize(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(a, vec![1.0, 2.0]);
        let a = reparameterize(&[0.0, 0.0], &[0.0, 0.0], &[0.7, -1.1]).unwrap();
        assert_eq!(a, vec![0.7, -1.1]);
        let a = reparameterize(&[1.0, 2.0], &[0.0, 4.0f64.ln()], &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(a[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 0.0, epsilon = 1e-15);
        assert!(reparameterize(&[0.0], &[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn reparameterize_distributional_check() {
        let n = 100_000;
        let mu = [0.7, -0.4];
        let lv = [2.0 * 0.3f64.ln(), 0.0]; // sigma = 0.3, 1.0
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut sum = [0.0; 2];
        let mut sumsq = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a = reparameterize(&mu, &lv, &e).unwrap();
            for c in 0..2 {
                sum[c] += a[c];
                sumsq[c] += a[c] * a[c];
            }
        }
        let sigmas = [0.3, 1.0];
        for c in 0..2 {
            let mean = sum[c] / n as f64;
            let sd = (sumsq[c] / n as f64 - mean * mean).sqrt();
            let se_mean = sigmas[c] / (n as f64).sqrt();
            let se_sd = sigmas[c] / (2.0 * n as f64).sqrt();
            assert!((mean - mu[c]).abs() < 3.0 * se_mean);
            assert!((sd - sigmas[c]).abs() < 3.0 * se_sd);
        }
    }

    #[test]
    fn kl_term_reference_and_oracle() {
        assert_abs_diff_eq!(kl_term(&[0.0, 0.0], &[0.0, 0.0]), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(kl_term(&[1.0], &[0.0]), -0.5, epsilon = 1e-15);

        // independent route: D_KL(N(mu, s^2) || N(0,1)) = -log(s) + (s^2 + mu^2 - 1)/2
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mu: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let lv: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let dkl_oracle: f64 = mu
            .iter()
            .zip(&lv)
            .map(|(m, l)| {
                let s = (0.5 * l).exp();
                -s.ln() + (s * s + m * m - 1.0) / 2.0
            })
            .sum();
        assert_abs_diff_eq!(kl_term(&mu, &lv), -dkl_oracle, epsilon = 1e-12);

        // non-positivity over random draws
        for _ in 0..100 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert!(kl_term(&mu, &lv) <= 1e-15);
        }
    }

    #[test]
    fn elbo_degenerate_model_recovers_squared_norm() {
        let mut m = tiny_model(4);
        for l in m.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let x = [1.5, -2.0];
        let eps = [0.0];
        let (loss, _) = elbo_batch(&m, &[&x], &[&eps]).unwrap();
        assert_abs_diff_eq!(loss, 1.5 * 1.5 + 4.0, epsilon = 1e-15);
    }

    #[test]
    fn elbo_additivity_over_identical_samples() {
        let m = tiny_model(5);
        let x = [0.4, 0.9];
        let eps = [0.3];
        let (l1, _) = elbo_batch(&m, &[&x], &[&eps]).unwrap();
        let (l2, _) = elbo_batch(&m, &[&x, &x], &[&eps, &eps]).unwrap();
        assert_eq!(l2, 2.0 * l1);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let model = tiny_model(7);
        let x1 = [0.8, -0.3];
        let x2 = [-0.2, 0.5];
        let e1 = [0.4];
        let e2 = [-0.9];
        let batch: Vec<&[f64]> = vec![&x1, &x2];
        let eps: Vec<&[f64]> = vec![&e1, &e2];
        let (_, grads) = elbo_batch(&model, &batch, &eps).unwrap();

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        let n_layers = model.layers().len();
        for li in 0..n_layers {
            let (rows, cols) = model.layers()[li].w.dim();
            for r in 0..rows {
                for c in 0..cols + 1 {
                    // c == cols probes the bias entry r
                    let read = |m: &VaeModel| -> f64 {
                        if c < cols {
                            m.layers()[li].w[[r, c]]
                        } else {
                            m.layers()[li].b[r]
                        }
                    };
                    let write = |m: &mut VaeModel, v: f64| {
                        if c < cols {
                            m.layers_mut()[li].w[[r, c]] = v;
                        } else {
                            m.layers_mut()[li].b[r] = v;
                        }
                    };
                    let base = read(&model);
                    let mut mp = model.clone();
                    write(&mut mp, base + h);
                    let (lp, _) = elbo_batch(&mp, &batch, &eps).unwrap();
                    let mut mm = model.clone();
                    write(&mut mm, base - h);
                    let (lm, _) = elbo_batch(&mm, &batch, &eps).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let ana = if c < cols {
                        grads.layers[li].w[[r, c]]
                    } else {
                        grads.layers[li].b[r]
                    };
                    let denom = ana.abs().max(fd.abs()).max(1e-6);
                    max_rel = max_rel.max((ana - fd).abs() / denom);
                }
            }
        }
        assert!(max_rel < 1e-5, "max relative gradient error {max_rel:.3e}");
    }

    #[test]
    fn adam_reference_steps() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ..TrainConfig::default()
        };
        let mut m = tiny_model(8);
        let before = m.layers()[0].w[[0, 0]];
        let mut state = AdamState::new(&m);

        // zero gradient leaves parameters unchanged
        let zeros = VaeGrads {
            layers: m
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
        };
        adam_step(&mut m, &zeros, &mut state, &cfg);
        assert_eq!(m.layers()[0].w[[0, 0]], before);

        // unit gradient at t=1 moves by ~lr
        let mut ones = zeros.clone();
        ones.layers[0].w[[0, 0]] = 1.0;
        let mut m2 = tiny_model(8);
        let mut st2 = AdamState::new(&m2);
        let p0 = m2.layers()[0].w[[0, 0]];
        adam_step(&mut m2, &ones, &mut st2, &cfg);
        let step1 = p0 - m2.layers()[0].w[[0, 0]];
        assert_abs_diff_eq!(step1, 0.1 / (1.0 + 1e-8), epsilon = 1e-12);

        // two identical gradients match the hand recursion
        adam_step(&mut m2, &ones, &mut st2, &cfg);
        let (b1, b2) = (0.9f64, 0.999f64);
        let m1 = 1.0 - b1;
        let v1 = 1.0 - b2;
        let m2h = b1 * m1 + (1.0 - b1);
        let v2h = b2 * v1 + (1.0 - b2);
        let mhat = m2h / (1.0 - b1 * b1);
        let vhat = v2h / (1.0 - b2 * b2);
        let step2 = 0.1 * mhat / (vhat.sqrt() + 1e-8);
        let got = p0 - step1 - m2.layers()[0].w[[0, 0]];
        assert_abs_diff_eq!(got, step2, epsilon = 1e-12);
    }

    fn toy_fields(n: usize, dim_x: usize, dim_y: usize, seed: u64) -> Vec<Field> {
        let g = build_grid(dim_x, dim_y, Extent::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let b: f64 = rng.random::<f64>() * 2.0 - 1.0;
                Field::from_fn(g.clone(), |x, y| {
                    a * (std::f64::consts::PI * x).sin() + b * y
                })
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy_fields(50, 5, 4, 13);
        let mk = || VaeModel::new(20, &[16], &[16], 2, Activation::default(), 99).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 10,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut m1 = mk();
        let h1 = train(&data, &mut m1, &cfg).unwrap();
        assert!(
            h1.last().unwrap() < &(0.5 * h1[0]),
            "initial {}, final {}",
            h1[0],
            h1.last().unwrap()
        );
        let mut m2 = mk();
        let h2 = train(&data, &mut m2, &cfg).unwrap();
        assert_eq!(h1, h2);
        for (a, b) in m1.layers().iter().zip(m2.layers().iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn trained_model_reconstructs_training_samples() {
        let data = toy_fields(50, 5, 4, 17);
        let mut model = VaeModel::new(20, &[32], &[32], 2, Activation::default(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 800,
            batch_size: 10,
            learning_rate: 2e-3,
            seed: 6,
            ..TrainConfig::default()
        };
        train(&data, &mut model, &cfg).unwrap();
        let x = &data[7].values;
        let (mu, _) = model.encode(x).unwrap();
        let rec = model.generate(&mu).unwrap();
        let num: f64 = rec
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            num / den < 0.2,
            "relative reconstruction error {}",
            num / den
        );
    }

    #[test]
    fn generate_reference_cases() {
        let mut m = tiny_model(11);
        for l in m.decoder.layers.iter_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        assert_eq!(m.generate(&[0.7]).unwrap(), vec![0.0, 0.0]);

        let m2 = tiny_model(12);
        let a = m2.generate(&[0.3]).unwrap();
        let b = m2.generate(&[0.3]).unwrap();
        assert_eq!(a, b);
        assert!(m2.generate(&[0.3, 0.4]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = toy_fields(20, 4, 3, 1);
        let mut model = VaeModel::new(12, &[8], &[8], 2, Activation::default(), 42).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 5,
            learning_rate: 1e-3,
            seed: 2,
            standardize: true,
            ..TrainConfig::default()
        };
        train(&data, &mut model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.input_dim, model.input_dim);
        assert_eq!(back.standardize, model.standardize);
        for (a, b) in back.layers().iter().zip(model.layers().iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        let z = [0.2, -0.5];
        assert_eq!(back.generate(&z).unwrap(), model.generate(&z).unwrap());
    }
}
