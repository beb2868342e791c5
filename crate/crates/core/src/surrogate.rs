//! Probabilistic structure-property surrogate: a small convolutional network
//! with a heteroscedastic diagonal Gaussian output, trained by maximum
//! likelihood.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error as ThisError;

use crate::io::{read_f64_blob, read_json, write_f64_blob, write_json};
use crate::optim::Adam;
use crate::seed::derive_seed;
use crate::tensorad::{Graph, Tensor, TensorError, Var};
use crate::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_p: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub d_kappa: usize,
    pub slope: f64,
}

impl Architecture {
    pub fn new(n_p: usize, d_kappa: usize) -> Self {
        Self {
            n_p,
            channels: vec![4, 8, 12, 16],
            hidden: 30,
            d_kappa,
            slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let f = 1usize << self.channels.len();
        if self.channels.is_empty() || self.n_p % f != 0 || self.n_p < f {
            return Err(Error::Config(format!(
                "N_p = {} must be a positive multiple of {f} for {} pooling blocks",
                self.n_p,
                self.channels.len()
            )));
        }
        if self.hidden == 0 || self.d_kappa == 0 {
            return Err(Error::Config("hidden width and property dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        let side = self.n_p >> self.channels.len();
        side * side * self.channels.last().copied().unwrap_or(1)
    }

    /// Parameter tensor shapes in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cin = 1;
        for &c in &self.channels {
            out.push(vec![c, cin, 3, 3]);
            out.push(vec![1, c, 1, 1]);
            cin = c;
        }
        out.push(vec![self.features(), self.hidden]);
        out.push(vec![self.hidden]);
        out.push(vec![self.hidden, self.d_kappa]);
        out.push(vec![self.d_kappa]);
        out.push(vec![self.hidden, self.d_kappa]);
        out.push(vec![self.d_kappa]);
        out
    }

    /// Fan-in of each parameter tensor (biases share their layer's fan-in).
    fn fan_ins(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cin = 1;
        for &c in &self.channels {
            out.push(cin * 9);
            out.push(cin * 9);
            cin = c;
        }
        out.extend([self.features(), self.features(), self.hidden, self.hidden, self.hidden, self.hidden]);
        out
    }
}

/// Per-dimension affine standardization of property vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn fit(ys: &[Vec<f64>]) -> Self {
        let d = ys[0].len();
        let n = ys.len() as f64;
        let mut mean = vec![0.0; d];
        for y in ys {
            for j in 0..d {
                mean[j] += y[j] / n;
            }
        }
        let mut var = vec![0.0; d];
        for y in ys {
            for j in 0..d {
                var[j] += (y[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

/// Diagonal Gaussian `N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDensity {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PredictiveDensity {
    pub fn log_density(&self, kappa: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(kappa)
            .map(|((m, s), k)| -0.5 * (LN_2PI + s.ln() + (k - m).powi(2) / s))
            .sum()
    }
}

/// Axis-aligned box; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, Error> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("box bounds differ in dimension".into()));
        }
        if let Some(j) = (0..lo.len()).find(|&j| !(lo[j] < hi[j])) {
            return Err(Error::Config(format!("box is empty in dimension {j}: lo {} >= hi {}", lo[j], hi[j])));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, k: &[f64]) -> bool {
        k.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v >= l && v <= h)
    }

    /// Linear interpolation between `self` (t = 0) and `other` (t = 1).
    pub fn lerp(&self, other: &BoxDomain, t: f64) -> BoxDomain {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect();
        BoxDomain {
            lo: f(&self.lo, &other.lo),
            hi: f(&self.hi, &other.hi),
        }
    }

    pub fn standardized(&self, st: &Standardizer) -> BoxDomain {
        BoxDomain {
            lo: st.standardize(&self.lo),
            hi: st.standardize(&self.hi),
        }
    }
}

/// `Pr(kappa in K)` under a diagonal Gaussian.
pub fn prob_in_box(pd: &PredictiveDensity, k: &BoxDomain) -> Result<f64, Error> {
    if let Some(j) = (0..k.lo.len()).find(|&j| !(k.lo[j] < k.hi[j])) {
        return Err(Error::Config(format!("box is empty in dimension {j}")));
    }
    let mut p = 1.0;
    for j in 0..pd.mean.len() {
        let s = pd.var[j].sqrt();
        p *= norm_cdf((k.hi[j] - pd.mean[j]) / s) - norm_cdf((k.lo[j] - pd.mean[j]) / s);
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Graph handles for one forward pass (standardized units).
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub mean: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            weight_decay: 1e-5,
            dropout: 0.05,
            lr: 1e-3,
            decay: 0.5,
            epochs: 200,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.lr >= 0.0 && self.decay >= 0.0) {
            return Err(Error::Config("training rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("dropout and holdout fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Step size after decaying by `decay` at each third of training.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let stage = (3 * epoch / self.epochs).min(2);
        self.lr * self.decay.powi(stage as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub holdout_nll: Option<f64>,
    /// Constant-Gaussian fit to training moments, scored on the holdout split.
    pub baseline_nll: Option<f64>,
    pub n_train: usize,
    pub n_holdout: usize,
}

#[derive(Debug, ThisError)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, last_finite: Box<Surrogate> },
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Error::Numerical(e.to_string()),
            TrainError::Other(e) => e,
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Other(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub arch: Architecture,
    pub params: Vec<Tensor>,
    pub stats: Standardizer,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: Architecture,
    stats: Standardizer,
    seed: u64,
    param_shapes: Vec<Vec<usize>>,
}

impl Surrogate {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init(arch: Architecture, stats: Standardizer, seed: u64) -> Result<Self, Error> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "surrogate-init"));
        let params = arch
            .param_shapes()
            .iter()
            .zip(arch.fan_ins())
            .map(|(shape, fan)| {
                let b = 1.0 / (fan as f64).sqrt();
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("shape")
            })
            .collect();
        Ok(Self { arch, params, stats, seed })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn d_kappa(&self) -> usize {
        self.arch.d_kappa
    }

    /// Adds the parameters to `g`, tracked or constant.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| if tracked { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Network on `x: [n, N_p^2]` with values in `[0, 1]`; dropout mask drawn from `dropout` if given.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Heads, TensorError> {
        let n_p = self.arch.n_p;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != n_p * n_p {
            return Err(TensorError::Shape {
                op: "surrogate input",
                lhs: shape,
                rhs: vec![0, n_p * n_p],
            });
        }
        let n = shape[0];
        let enc = g.mul_scalar(x, 2.0);
        let enc = g.add_scalar(enc, -1.0);
        let mut h = g.reshape(enc, &[n, 1, n_p, n_p])?;
        let slope = self.arch.slope;
        for b in 0..self.arch.channels.len() {
            let c = g.conv2d_same(h, params[2 * b])?;
            let c = g.add(c, params[2 * b + 1])?;
            let a = g.leaky_relu(c, slope);
            h = g.avgpool2x2(a)?;
        }
        let k = 2 * self.arch.channels.len();
        let mut flat = g.reshape(h, &[n, self.arch.features()])?;
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..n * self.arch.features())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = g.constant(Tensor::new(&[n, self.arch.features()], mask)?);
                flat = g.mul(flat, m)?;
            }
        }
        let d = g.matmul(flat, params[k])?;
        let d = g.add(d, params[k + 1])?;
        let hidden = g.leaky_relu(d, slope);
        let m = g.matmul(hidden, params[k + 2])?;
        let mean = g.add(m, params[k + 3])?;
        let lv = g.matmul(hidden, params[k + 4])?;
        let logvar = g.add(lv, params[k + 5])?;
        Ok(Heads { mean, logvar })
    }

    /// Mean Gaussian NLL of standardized targets `y: [n, d]`.
    pub fn nll_graph(g: &mut Graph, heads: Heads, y: Var) -> Result<Var, TensorError> {
        let diff = g.sub(y, heads.mean)?;
        let sq = g.square(diff);
        let nlv = g.neg(heads.logvar);
        let prec = g.exp(nlv);
        let quad = g.mul(sq, prec)?;
        let t = g.add(quad, heads.logvar)?;
        let t = g.add_scalar(t, LN_2PI);
        let s = g.sum(t);
        let n = g.shape(y)[0] as f64;
        Ok(g.mul_scalar(s, 0.5 / n))
    }

    /// `wd/2 * |theta|^2` over all bound parameters.
    pub fn penalty_graph(g: &mut Graph, params: &[Var], wd: f64) -> Result<Var, TensorError> {
        let mut acc = g.scalar(0.0);
        for &p in params {
            let sq = g.square(p);
            let s = g.sum(sq);
            acc = g.add(acc, s)?;
        }
        Ok(g.mul_scalar(acc, 0.5 * wd))
    }

    /// Training loss on one minibatch (inputs in `[0,1]`, standardized targets).
    pub fn loss(&self, xs: &[&[f64]], ys_std: &[&[f64]], wd: f64) -> Result<f64, Error> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let (x, y) = batch_vars(&mut g, xs, ys_std)?;
        let heads = self.forward_graph(&mut g, &params, x, None)?;
        let nll = Self::nll_graph(&mut g, heads, y)?;
        let pen = Self::penalty_graph(&mut g, &params, wd)?;
        let l = g.add(nll, pen)?;
        Ok(g.value(l).item().expect("scalar"))
    }

    /// Gradient of [`Surrogate::loss`] with respect to every parameter, flattened in storage order.
    pub fn loss_gradient(&self, xs: &[&[f64]], ys_std: &[&[f64]], wd: f64) -> Result<(f64, Vec<Vec<f64>>), Error> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, true);
        let (x, y) = batch_vars(&mut g, xs, ys_std)?;
        let heads = self.forward_graph(&mut g, &params, x, None)?;
        let nll = Self::nll_graph(&mut g, heads, y)?;
        let pen = Self::penalty_graph(&mut g, &params, wd)?;
        let l = g.add(nll, pen)?;
        let value = g.value(l).item().expect("scalar");
        let grads = g.backward(l)?;
        Ok((value, params.iter().map(|&p| grads.flat(&g, p)).collect()))
    }

    fn predict_chunk(&self, xs: &[Vec<f64>]) -> Result<Vec<PredictiveDensity>, Error> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let npix = self.arch.n_p * self.arch.n_p;
        let mut data = Vec::with_capacity(xs.len() * npix);
        for x in xs {
            if x.len() != npix {
                return Err(Error::Shape(format!("input has {} pixels, surrogate expects {npix}", x.len())));
            }
            data.extend_from_slice(x);
        }
        let x = g.constant(Tensor::new(&[xs.len(), npix], data)?);
        let heads = self.forward_graph(&mut g, &params, x, None)?;
        let d = self.arch.d_kappa;
        let m = g.value(heads.mean).data();
        let lv = g.value(heads.logvar).data();
        Ok((0..xs.len())
            .map(|i| {
                let mean = self.stats.destandardize(&m[i * d..(i + 1) * d]);
                let var = (0..d).map(|j| lv[i * d + j].exp() * self.stats.std[j].powi(2)).collect();
                PredictiveDensity { mean, var }
            })
            .collect())
    }

    /// Predictive densities in physical units; chunks are evaluated in parallel.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<PredictiveDensity>, Error> {
        let chunks: Vec<Result<Vec<PredictiveDensity>, Error>> =
            xs.par_chunks(64).map(|c| self.predict_chunk(c)).collect();
        let mut out = Vec::with_capacity(xs.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<PredictiveDensity, Error> {
        Ok(self.predict_chunk(&[x.to_vec()])?.remove(0))
    }

    pub fn prob_in_box(&self, x: &[f64], k: &BoxDomain) -> Result<f64, Error> {
        prob_in_box(&self.predict_one(x)?, k)
    }

    /// `log p_M(kappa | x)` in physical units.
    pub fn log_density(&self, kappa: &[f64], x: &[f64]) -> Result<f64, Error> {
        Ok(self.predict_one(x)?.log_density(kappa))
    }

    /// Gradient of the physical-unit predictive mean component `j` with respect to the pixels.
    pub fn mean_input_gradient(&self, x: &[f64], j: usize) -> Result<Vec<f64>, Error> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.param(Tensor::new(&[1, x.len()], x.to_vec())?);
        let heads = self.forward_graph(&mut g, &params, xv, None)?;
        let mj = g.slice(heads.mean, 1, j, j + 1)?;
        let mj = g.sum(mj);
        let mj = g.mul_scalar(mj, self.stats.std[j]);
        let grads = g.backward(mj)?;
        Ok(grads.flat(&g, xv))
    }

    /// Gradient of `log p_M(kappa | x)` (physical units) with respect to the pixels.
    pub fn log_density_input_gradient(&self, kappa: &[f64], x: &[f64]) -> Result<Vec<f64>, Error> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.param(Tensor::new(&[1, x.len()], x.to_vec())?);
        let heads = self.forward_graph(&mut g, &params, xv, None)?;
        let ks = g.constant(Tensor::new(&[1, kappa.len()], self.stats.standardize(kappa))?);
        let nll = Self::nll_graph(&mut g, heads, ks)?;
        let ll = g.neg(nll);
        let grads = g.backward(ll)?;
        Ok(grads.flat(&g, xv))
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            arch: self.arch.clone(),
            stats: self.stats.clone(),
            seed: self.seed,
            param_shapes: self.params.iter().map(|t| t.shape().to_vec()).collect(),
        };
        write_json(&dir.join("surrogate.json"), &manifest)?;
        let flat: Vec<f64> = self.params.iter().flat_map(|t| t.data().iter().copied()).collect();
        write_f64_blob(&dir.join("surrogate.bin"), &flat)
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let m: Manifest = read_json(&dir.join("surrogate.json"))?;
        m.arch.validate()?;
        if m.param_shapes != m.arch.param_shapes() {
            return Err(Error::Format("surrogate manifest shapes disagree with architecture".into()));
        }
        let flat = read_f64_blob(&dir.join("surrogate.bin"))?;
        let total: usize = m.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::Format(format!("surrogate blob holds {} values, expected {total}", flat.len())));
        }
        let mut off = 0;
        let params = m
            .param_shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s, flat[off..off + n].to_vec()).expect("shape");
                off += n;
                t
            })
            .collect();
        Ok(Self {
            arch: m.arch,
            params,
            stats: m.stats,
            seed: m.seed,
        })
    }
}

fn batch_vars(g: &mut Graph, xs: &[&[f64]], ys: &[&[f64]]) -> Result<(Var, Var), TensorError> {
    let npix = xs[0].len();
    let d = ys[0].len();
    let xd: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    let yd: Vec<f64> = ys.iter().flat_map(|y| y.iter().copied()).collect();
    let x = g.constant(Tensor::new(&[xs.len(), npix], xd)?);
    let y = g.constant(Tensor::new(&[ys.len(), d], yd)?);
    Ok((x, y))
}

fn gaussian_nll(ys: &[Vec<f64>], mean: &[f64], var: &[f64]) -> f64 {
    let pd = PredictiveDensity {
        mean: mean.to_vec(),
        var: var.to_vec(),
    };
    -ys.iter().map(|y| pd.log_density(y)).sum::<f64>() / ys.len() as f64
}

/// Maximum-likelihood training from scratch with Adam and minibatch dropout.
pub fn train(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Surrogate, TrainLog), TrainError> {
    cfg.validate()?;
    arch.validate()?;
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape(format!("{} inputs but {} labels", xs.len(), ys.len())).into());
    }
    if ys.iter().any(|y| y.len() != arch.d_kappa) {
        return Err(Error::Shape(format!("labels must have dimension {}", arch.d_kappa)).into());
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split")));
    let n_hold = (cfg.holdout * xs.len() as f64).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    if train_idx.len() < cfg.batch.min(xs.len()) {
        return Err(Error::Config("training split smaller than one batch".into()).into());
    }
    let train_y: Vec<Vec<f64>> = train_idx.iter().map(|&i| ys[i].clone()).collect();
    let stats = Standardizer::fit(&train_y);
    let ys_std: Vec<Vec<f64>> = ys.iter().map(|y| stats.standardize(y)).collect();

    let mut model = Surrogate::init(arch.clone(), stats.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.params.iter().map(Tensor::len).collect::<Vec<_>>());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut idx = train_idx.to_vec();
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        holdout_nll: None,
        baseline_nll: None,
        n_train: train_idx.len(),
        n_holdout: n_hold,
    };

    for epoch in 0..cfg.epochs {
        let last_finite = model.clone();
        idx.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<&[f64]> = chunk.iter().map(|&i| ys_std[i].as_slice()).collect();
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let (x, y) = batch_vars(&mut g, &bx, &by)?;
            let heads = model.forward_graph(&mut g, &params, x, Some((cfg.dropout, &mut drop_rng)))?;
            let nll = Surrogate::nll_graph(&mut g, heads, y)?;
            let pen = Surrogate::penalty_graph(&mut g, &params, cfg.weight_decay)?;
            let l = g.add(nll, pen)?;
            let lv = g.value(l).item().expect("scalar");
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(last_finite),
                });
            }
            let grads = g.backward(l)?;
            let gs: Vec<Vec<f64>> = params.iter().map(|&p| grads.flat(&g, p)).collect();
            let gref: Vec<&[f64]> = gs.iter().map(Vec::as_slice).collect();
            let mut pref: Vec<&mut [f64]> = model.params.iter_mut().map(Tensor::data_mut).collect();
            adam.step(&mut pref, &gref, lr);
            total += lv;
            batches += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    if n_hold > 0 {
        let hx: Vec<Vec<f64>> = hold_idx.iter().map(|&i| xs[i].clone()).collect();
        let hy: Vec<Vec<f64>> = hold_idx.iter().map(|&i| ys[i].clone()).collect();
        let preds = model.predict(&hx)?;
        let nll = -preds.iter().zip(&hy).map(|(p, y)| p.log_density(y)).sum::<f64>() / n_hold as f64;
        let var: Vec<f64> = stats.std.iter().map(|s| s * s).collect();
        log.holdout_nll = Some(nll);
        log.baseline_nll = Some(gaussian_nll(&hy, &stats.mean, &var));
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_for_32_and_64_grids() {
        let a = Architecture::new(32, 2);
        assert_eq!(a.features(), 64);
        assert_eq!(Architecture::new(64, 2).features(), 256);
        assert!(Architecture::new(24, 2).validate().is_err());
        let s = Surrogate::init(a, Standardizer::identity(2), 1).unwrap();
        assert_eq!(s.params.len(), 14);
    }

    #[test]
    fn lr_schedule_thirds() {
        let c = TrainConfig { epochs: 9, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(3), 5e-4);
        assert_eq!(c.lr_at(8), 2.5e-4);
    }

    #[test]
    fn box_validation() {
        assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        let b = BoxDomain::new(vec![0.0], vec![2.0]).unwrap();
        assert!(b.contains(&[1.0]) && !b.contains(&[3.0]));
        let pd = PredictiveDensity { mean: vec![0.0], var: vec![1.0] };
        let bad = BoxDomain { lo: vec![1.0], hi: vec![0.0] };
        assert!(prob_in_box(&pd, &bad).is_err());
    }

    #[test]
    fn lower_edge_gives_half_factor() {
        let pd = PredictiveDensity { mean: vec![1.0], var: vec![0.3] };
        let b = BoxDomain::new(vec![1.0], vec![f64::INFINITY]).unwrap();
        assert!((prob_in_box(&pd, &b).unwrap() - 0.5).abs() < 1e-15);
    }
}
