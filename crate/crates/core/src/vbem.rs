//! Stochastic variational EM over process parameters.
//!
//! The variational density `q(z)` is a low-rank-plus-diagonal Gaussian over
//! the latent vector `z = [kappa, Psi_t]` (O1) or over `Psi_t` alone per
//! target sample (O2). Gradients come from reparametrized draws pushed
//! through a [`Link`], which maps latents and process parameters to a
//! diagonal Gaussian over properties.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::optim::Adam;
use crate::randfield::FieldSynth;
use crate::seed::derive_seed;
use crate::surrogate::{prob_in_box, BoxDomain, Heads, PredictiveDensity, Surrogate};
use crate::tensorad::{Graph, Tensor, TensorError, Var};
use crate::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Stand-in for an infinite box edge inside the smoothed indicator.
const FAR: f64 = 1e6;

/// Maps process parameters and latent phases to a diagonal Gaussian over properties.
pub trait Link: Sync {
    fn d_kappa(&self) -> usize;
    fn d_latent(&self) -> usize;
    fn d_phi(&self) -> usize;
    /// Mean and log-variance heads, each `[n, d_kappa]`, for `latent: [n, d_latent]`.
    fn heads(&self, g: &mut Graph, phi: Var, latent: Var) -> Result<Heads, TensorError>;
}

/// Random field, smooth threshold and surrogate chained into one link
/// (properties in the surrogate's standardized units).
#[derive(Debug, Clone)]
pub struct SurrogateLink {
    pub synth: Arc<FieldSynth>,
    pub surrogate: Arc<Surrogate>,
    pub x0: f64,
    pub eps: f64,
}

impl Link for SurrogateLink {
    fn d_kappa(&self) -> usize {
        self.surrogate.d_kappa()
    }

    fn d_latent(&self) -> usize {
        self.synth.d_psi()
    }

    fn d_phi(&self) -> usize {
        self.synth.q()
    }

    fn heads(&self, g: &mut Graph, phi: Var, latent: Var) -> Result<Heads, TensorError> {
        let x = self.synth.smooth_microstructure_graph(g, phi, latent, self.x0, self.eps)?;
        let params = self.surrogate.bind(g, false);
        self.surrogate.forward_graph(g, &params, x, None)
    }
}

/// Two-dimensional toy: `kappa | psi, phi ~ N(a psi + phi, s^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyLink {
    pub a: f64,
    pub s: f64,
}

impl Link for ToyLink {
    fn d_kappa(&self) -> usize {
        1
    }

    fn d_latent(&self) -> usize {
        1
    }

    fn d_phi(&self) -> usize {
        1
    }

    fn heads(&self, g: &mut Graph, phi: Var, latent: Var) -> Result<Heads, TensorError> {
        let m = g.mul_scalar(latent, self.a);
        let mean = g.add(m, phi)?;
        let n = g.shape(latent)[0];
        let logvar = g.constant(Tensor::full(&[n, 1], 2.0 * self.s.ln()));
        Ok(Heads { mean, logvar })
    }
}

/// Predictive densities of a link at fixed parameters (link units).
pub fn link_predict(link: &dyn Link, phi: &[f64], latents: &[Vec<f64>]) -> Result<Vec<PredictiveDensity>, Error> {
    let d = link.d_latent();
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(128) {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(phi.to_vec()));
        let data: Vec<f64> = chunk.iter().flat_map(|v| v.iter().copied()).collect();
        let lat = g.constant(Tensor::new(&[chunk.len(), d], data)?);
        let h = link.heads(&mut g, p, lat)?;
        let k = link.d_kappa();
        let m = g.value(h.mean).data();
        let lv = g.value(h.logvar).data();
        for i in 0..chunk.len() {
            out.push(PredictiveDensity {
                mean: m[i * k..(i + 1) * k].to_vec(),
                var: lv[i * k..(i + 1) * k].iter().map(|v| v.exp()).collect(),
            });
        }
    }
    Ok(out)
}

/// Gaussian `N(mu, diag(d) + L L^T)` with `d` stored as `log d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankGaussian {
    pub mu: Vec<f64>,
    pub log_d: Vec<f64>,
    /// `d_z x rank`, row-major.
    pub l: Vec<f64>,
    pub rank: usize,
}

/// Standard-normal noise for `n` reparametrized draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub e1: Tensor,
    pub e2: Tensor,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, d_z: usize, rank: usize) -> Self {
        let e1 = (0..n * rank).map(|_| rng.sample(StandardNormal)).collect();
        let e2 = (0..n * d_z).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            e1: Tensor::new(&[n, rank], e1).expect("shape"),
            e2: Tensor::new(&[n, d_z], e2).expect("shape"),
        }
    }

    pub fn n(&self) -> usize {
        self.e2.shape()[0]
    }
}

/// Graph handles of a bound variational factor.
#[derive(Debug, Clone, Copy)]
pub struct QVars {
    pub mu: Var,
    pub log_d: Var,
    pub l: Var,
}

impl LowRankGaussian {
    /// `mu = 0, d = 1, L = 0`.
    pub fn standard(d_z: usize, rank: usize) -> Self {
        Self {
            mu: vec![0.0; d_z],
            log_d: vec![0.0; d_z],
            l: vec![0.0; d_z * rank],
            rank,
        }
    }

    pub fn d_z(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Vec<f64> {
        let (n, m) = (self.d_z(), self.rank);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = (0..m).map(|k| self.l[i * m + k] * self.l[j * m + k]).sum();
            }
            c[i * n + i] += self.log_d[i].exp();
        }
        c
    }

    pub fn bind(&self, g: &mut Graph, tracked: bool) -> QVars {
        let mk = |g: &mut Graph, t: Tensor| if tracked { g.param(t) } else { g.constant(t) };
        QVars {
            mu: mk(g, Tensor::from_vec(self.mu.clone())),
            log_d: mk(g, Tensor::from_vec(self.log_d.clone())),
            l: mk(g, Tensor::new(&[self.d_z(), self.rank], self.l.clone()).expect("shape")),
        }
    }

    /// `n` draws with their log-densities.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<f64>), Error> {
        let noise = Noise::draw(rng, n, self.d_z(), self.rank);
        let mut g = Graph::new();
        let qv = self.bind(&mut g, false);
        let (z, lq) = q_sample_graph(&mut g, qv, &noise)?;
        let d = self.d_z();
        let zs = g.value(z).data().chunks(d).map(<[f64]>::to_vec).collect();
        Ok((zs, g.value(lq).data().to_vec()))
    }

    pub fn log_density(&self, zs: &[Vec<f64>]) -> Result<Vec<f64>, Error> {
        let mut g = Graph::new();
        let qv = self.bind(&mut g, false);
        let data: Vec<f64> = zs.iter().flat_map(|z| z.iter().copied()).collect();
        let z = g.constant(Tensor::new(&[zs.len(), self.d_z()], data)?);
        let lq = log_q_graph(&mut g, qv, z)?;
        Ok(g.value(lq).data().to_vec())
    }

    /// Applies `z_j -> scale_j z_j + shift_j` to the leading coordinates.
    pub fn affine_prefix(&mut self, scale: &[f64], shift: &[f64]) {
        let m = self.rank;
        for j in 0..scale.len() {
            self.mu[j] = scale[j] * self.mu[j] + shift[j];
            self.log_d[j] += 2.0 * scale[j].abs().ln();
            for k in 0..m {
                self.l[j * m + k] *= scale[j];
            }
        }
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.mu, &mut self.log_d, &mut self.l]
    }

    fn lens(&self) -> [usize; 3] {
        [self.mu.len(), self.log_d.len(), self.l.len()]
    }
}

/// Reparametrized draws `z = mu + L e1 + sqrt(d) e2` and their log-densities.
pub fn q_sample_graph(g: &mut Graph, q: QVars, noise: &Noise) -> Result<(Var, Var), TensorError> {
    let e1 = g.constant(noise.e1.clone());
    let e2 = g.constant(noise.e2.clone());
    let lt = g.transpose(q.l)?;
    let low = g.matmul(e1, lt)?;
    let half = g.mul_scalar(q.log_d, 0.5);
    let sd = g.exp(half);
    let diag = g.mul(e2, sd)?;
    let r = g.add(low, diag)?;
    let z = g.add(r, q.mu)?;
    let lq = log_q_graph(g, q, z)?;
    Ok((z, lq))
}

/// Per-row `log q(z)` via the Woodbury identity and determinant lemma.
pub fn log_q_graph(g: &mut Graph, q: QVars, z: Var) -> Result<Var, TensorError> {
    let d_z = g.shape(q.mu)[0];
    let m = g.shape(q.l)[1];
    let r = g.sub(z, q.mu)?;
    let nld = g.neg(q.log_d);
    let dinv = g.exp(nld);
    let rd = g.mul(r, dinv)?;
    let rr = g.mul(r, rd)?;
    let t1 = g.sum_axis(rr, 1)?;
    let dcol = g.reshape(dinv, &[d_z, 1])?;
    let dl = g.mul(q.l, dcol)?;
    let lt = g.transpose(q.l)?;
    let ltdl = g.matmul(lt, dl)?;
    let eye = g.constant(identity(m));
    let cap = g.add(ltdl, eye)?;
    let u = g.matmul(rd, q.l)?;
    let ut = g.transpose(u)?;
    let sol = g.spd_solve(cap, ut)?;
    let prod = g.mul(ut, sol)?;
    let t2 = g.sum_axis(prod, 0)?;
    let quad = g.sub(t1, t2)?;
    let ld_cap = g.spd_logdet(cap)?;
    let ld_diag = g.sum(q.log_d);
    let logdet = g.add(ld_cap, ld_diag)?;
    let t = g.add(quad, logdet)?;
    let t = g.add_scalar(t, d_z as f64 * LN_2PI);
    Ok(g.mul_scalar(t, -0.5))
}

fn identity(m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[m, m]);
    for i in 0..m {
        t.data_mut()[i * m + i] = 1.0;
    }
    t
}

/// Per-row diagonal Gaussian log-density of `kappa: [n, d]` under the heads.
pub fn gauss_loglik_graph(g: &mut Graph, heads: Heads, kappa: Var) -> Result<Var, TensorError> {
    let diff = g.sub(kappa, heads.mean)?;
    let sq = g.square(diff);
    let nlv = g.neg(heads.logvar);
    let prec = g.exp(nlv);
    let quad = g.mul(sq, prec)?;
    let t = g.add(quad, heads.logvar)?;
    let t = g.add_scalar(t, LN_2PI);
    let s = g.sum_axis(t, 1)?;
    Ok(g.mul_scalar(s, -0.5))
}

/// Per-row standard-normal log-density.
fn std_normal_graph(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let d = g.shape(x)[1] as f64;
    let sq = g.square(x);
    let s = g.sum_axis(sq, 1)?;
    let s = g.add_scalar(s, d * LN_2PI);
    Ok(g.mul_scalar(s, -0.5))
}

/// Log-utility in link units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Utility {
    /// `sum_j logsigmoid(beta (k_j - lo_j)) + logsigmoid(beta (hi_j - k_j))`.
    SmoothBox { lo: Vec<f64>, hi: Vec<f64>, beta: f64 },
    /// `-sum_j w_j (k_j - t_j)^2`.
    Quadratic { target: Vec<f64>, weight: Vec<f64> },
    Constant,
}

impl Utility {
    pub fn log_value(&self, kappa: &[f64]) -> f64 {
        let ls = |x: f64| -crate::tensorad::softplus(-x);
        match self {
            Utility::SmoothBox { lo, hi, beta } => (0..kappa.len())
                .map(|j| ls(beta * (kappa[j] - lo[j].max(-FAR))) + ls(beta * (hi[j].min(FAR) - kappa[j])))
                .sum(),
            Utility::Quadratic { target, weight } => {
                -(0..kappa.len()).map(|j| weight[j] * (kappa[j] - target[j]).powi(2)).sum::<f64>()
            }
            Utility::Constant => 0.0,
        }
    }

    pub fn graph(&self, g: &mut Graph, kappa: Var) -> Result<Var, TensorError> {
        let n = g.shape(kappa)[0];
        match self {
            Utility::SmoothBox { lo, hi, beta } => {
                let lo = g.constant(Tensor::from_vec(lo.iter().map(|v| v.max(-FAR)).collect()));
                let hi = g.constant(Tensor::from_vec(hi.iter().map(|v| v.min(FAR)).collect()));
                let a = g.sub(kappa, lo)?;
                let a = g.mul_scalar(a, *beta);
                let a = g.log_sigmoid(a);
                let b = g.sub(hi, kappa)?;
                let b = g.mul_scalar(b, *beta);
                let b = g.log_sigmoid(b);
                let s = g.add(a, b)?;
                g.sum_axis(s, 1)
            }
            Utility::Quadratic { target, weight } => {
                let t = g.constant(Tensor::from_vec(target.clone()));
                let w = g.constant(Tensor::from_vec(weight.clone()));
                let d = g.sub(kappa, t)?;
                let sq = g.square(d);
                let ws = g.mul(sq, w)?;
                let s = g.sum_axis(ws, 1)?;
                Ok(g.neg(s))
            }
            Utility::Constant => Ok(g.constant(Tensor::zeros(&[n]))),
        }
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Q,
    Phi,
    Both,
    None,
}

impl Track {
    fn q(self) -> bool {
        matches!(self, Track::Q | Track::Both)
    }

    fn phi(self) -> bool {
        matches!(self, Track::Phi | Track::Both)
    }
}

/// Monte Carlo ELBO estimate with optional gradients (ascent direction).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEval {
    pub value: f64,
    /// Standard error of the mean over draws.
    pub stderr: f64,
    pub per_draw: Vec<f64>,
    /// Per factor: gradients for `(mu, log_d, L)`.
    pub grad_q: Vec<[Vec<f64>; 3]>,
    pub grad_phi: Vec<f64>,
}

fn finish(g: &mut Graph, per: Var, qvars: &[QVars], phi: Var, track: Track) -> Result<ElboEval, Error> {
    let per_draw = g.value(per).data().to_vec();
    if let Some(i) = per_draw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite ELBO integrand at draw {i}")));
    }
    let n = per_draw.len() as f64;
    let value = per_draw.iter().sum::<f64>() / n;
    let var = per_draw.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let stderr = (var / n).sqrt();
    let mut out = ElboEval {
        value,
        stderr,
        per_draw,
        grad_q: Vec::new(),
        grad_phi: Vec::new(),
    };
    if track != Track::None {
        let f = g.mean(per);
        let grads = g.backward(f)?;
        if track.q() {
            out.grad_q = qvars
                .iter()
                .map(|q| [grads.flat(g, q.mu), grads.flat(g, q.log_d), grads.flat(g, q.l)])
                .collect();
        }
        if track.phi() {
            out.grad_phi = grads.flat(g, phi);
        }
        let all_finite = out.grad_phi.iter().chain(out.grad_q.iter().flatten().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Numerical("non-finite ELBO gradient".into()));
        }
    }
    Ok(out)
}

/// O1 ELBO: mean over draws of `log u(k) + log p(k | x) + log N(Psi) - log q(k, Psi)`.
pub fn elbo_o1(
    link: &dyn Link,
    q: &LowRankGaussian,
    phi: &[f64],
    utility: &Utility,
    noise: &Noise,
    track: Track,
) -> Result<ElboEval, Error> {
    let dk = link.d_kappa();
    if q.d_z() != dk + link.d_latent() || phi.len() != link.d_phi() {
        return Err(Error::Shape("variational or process dimension does not match the link".into()));
    }
    let mut g = Graph::new();
    let qv = q.bind(&mut g, track.q());
    let p = phi_var(&mut g, phi, track.phi());
    let (z, lq) = q_sample_graph(&mut g, qv, noise)?;
    let kappa = g.slice(z, 1, 0, dk)?;
    let psi = g.slice(z, 1, dk, q.d_z())?;
    let heads = link.heads(&mut g, p, psi)?;
    let ll = gauss_loglik_graph(&mut g, heads, kappa)?;
    let lp = std_normal_graph(&mut g, psi)?;
    let lu = utility.graph(&mut g, kappa)?;
    let s = g.add(lu, ll)?;
    let s = g.add(s, lp)?;
    let per = g.sub(s, lq)?;
    finish(&mut g, per, &[qv], p, track)
}

/// O2 ELBO averaged over the target samples in `active`, each with its own factor over `Psi`.
pub fn elbo_o2(
    link: &dyn Link,
    qs: &[LowRankGaussian],
    phi: &[f64],
    samples: &[Vec<f64>],
    active: &[usize],
    noises: &[Noise],
    track: Track,
) -> Result<ElboEval, Error> {
    let dk = link.d_kappa();
    if qs.len() != samples.len() || active.is_empty() || noises.len() != active.len() {
        return Err(Error::Shape("one factor and one noise block per active target sample".into()));
    }
    let mut g = Graph::new();
    let p = phi_var(&mut g, phi, track.phi());
    let mut qvars = Vec::with_capacity(active.len());
    let mut zs = Vec::with_capacity(active.len());
    let mut lqs = Vec::with_capacity(active.len());
    let mut kd = Vec::new();
    for (a, &s) in active.iter().enumerate() {
        if qs[s].d_z() != link.d_latent() {
            return Err(Error::Shape("O2 factors live on the latent phases only".into()));
        }
        let qv = qs[s].bind(&mut g, track.q());
        let (z, lq) = q_sample_graph(&mut g, qv, &noises[a])?;
        for _ in 0..noises[a].n() {
            kd.extend_from_slice(&samples[s]);
        }
        qvars.push(qv);
        zs.push(z);
        lqs.push(lq);
    }
    let psi = g.concat(&zs, 0)?;
    let lq = g.concat(&lqs, 0)?;
    let rows = g.shape(psi)[0];
    let kappa = g.constant(Tensor::new(&[rows, dk], kd)?);
    let heads = link.heads(&mut g, p, psi)?;
    let ll = gauss_loglik_graph(&mut g, heads, kappa)?;
    let lp = std_normal_graph(&mut g, psi)?;
    let s = g.add(ll, lp)?;
    let per = g.sub(s, lq)?;
    finish(&mut g, per, &qvars, p, track)
}

fn phi_var(g: &mut Graph, phi: &[f64], tracked: bool) -> Var {
    let t = Tensor::from_vec(phi.to_vec());
    if tracked {
        g.param(t)
    } else {
        g.constant(t)
    }
}

/// Normalized effective sample size `(sum w)^2 / (N sum w^2)`.
pub fn ess(w: &[f64]) -> Result<f64, Error> {
    if w.is_empty() || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Numerical("ESS weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(Error::Numerical("all ESS weights are zero: tempered domain unreachable".into()));
    }
    Ok(s * s / (w.len() as f64 * s2))
}

/// ESS of `prob_in_box` weights; an all-zero weight set counts as zero ESS.
pub fn ess_for_box(preds: &[PredictiveDensity], k: &BoxDomain) -> Result<f64, Error> {
    let w: Vec<f64> = preds.iter().map(|p| prob_in_box(p, k)).collect::<Result<_, _>>()?;
    match ess(&w) {
        Ok(v) => Ok(v),
        Err(_) if w.iter().all(|&v| v == 0.0) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Box tempering state: the current domain is `lerp(k0, target, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperState {
    pub t: f64,
    pub k0: BoxDomain,
    pub target: BoxDomain,
    pub stalls: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperOutcome {
    pub t: f64,
    pub ess: f64,
    pub moved: bool,
}

impl TemperState {
    /// Hull of the target box and the predictive-mean range widened by `margin`.
    pub fn new(target: BoxDomain, preds: &[PredictiveDensity], margin: f64) -> Self {
        let mut k0 = target.clone();
        for p in preds {
            for j in 0..k0.lo.len() {
                k0.lo[j] = k0.lo[j].min(p.mean[j] - margin);
                k0.hi[j] = k0.hi[j].max(p.mean[j] + margin);
            }
        }
        Self {
            t: 0.0,
            k0,
            target,
            stalls: 0,
            stalled: false,
        }
    }

    pub fn domain(&self) -> BoxDomain {
        self.domain_at(self.t)
    }

    pub fn domain_at(&self, t: f64) -> BoxDomain {
        if t >= 1.0 {
            self.target.clone()
        } else {
            self.k0.lerp(&self.target, t)
        }
    }

    pub fn finished(&self) -> bool {
        self.t >= 1.0
    }

    /// Bisection for the largest admissible `t` in `(self.t, 1]` with ESS above `floor`.
    pub fn step(&mut self, preds: &[PredictiveDensity], floor: f64, stall_limit: usize) -> Result<TemperOutcome, Error> {
        if self.finished() {
            return Ok(TemperOutcome {
                t: 1.0,
                ess: ess_for_box(preds, &self.target)?,
                moved: false,
            });
        }
        let at_one = ess_for_box(preds, &self.target)?;
        if at_one >= floor {
            self.t = 1.0;
            self.stalls = 0;
            return Ok(TemperOutcome { t: 1.0, ess: at_one, moved: true });
        }
        let (mut lo, mut hi) = (self.t, 1.0);
        let mut lo_ess = None;
        while hi - lo > 0.02 {
            let mid = 0.5 * (lo + hi);
            let e = ess_for_box(preds, &self.domain_at(mid))?;
            if e >= floor {
                lo = mid;
                lo_ess = Some(e);
            } else {
                hi = mid;
            }
        }
        match lo_ess {
            Some(e) => {
                self.t = lo;
                self.stalls = 0;
                Ok(TemperOutcome { t: lo, ess: e, moved: true })
            }
            None => {
                self.stalls += 1;
                if self.stalls >= stall_limit {
                    self.stalled = true;
                }
                Ok(TemperOutcome {
                    t: self.t,
                    ess: ess_for_box(preds, &self.domain())?,
                    moved: false,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VbemConfig {
    pub rank: usize,
    pub n_mc: usize,
    pub lr_q: f64,
    pub lr_phi: f64,
    pub k_e: usize,
    pub k_m: usize,
    pub max_iters: usize,
    pub window: usize,
    pub patience: usize,
    pub rel_tol: f64,
    pub ess_floor: f64,
    pub n_w: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub stall_limit: usize,
    pub hull_margin: f64,
    /// Target-sample factors updated per O2 step; 0 updates all.
    pub o2_active: usize,
}

impl Default for VbemConfig {
    fn default() -> Self {
        Self {
            rank: 50,
            n_mc: 32,
            lr_q: 1e-2,
            lr_phi: 5e-3,
            k_e: 50,
            k_m: 10,
            max_iters: 2000,
            window: 20,
            patience: 50,
            rel_tol: 1e-3,
            ess_floor: 0.5,
            n_w: 256,
            beta0: 2.0,
            beta1: 50.0,
            stall_limit: 3,
            hull_margin: 1.0,
            o2_active: 0,
        }
    }
}

impl VbemConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.rank == 0 || self.n_mc < 2 || self.max_iters == 0 || self.k_e + self.k_m == 0 || self.n_w == 0 || self.window == 0 {
            return Err(Error::Config("VB-EM counts must be positive (n_mc >= 2)".into()));
        }
        if !(self.ess_floor > 0.0 && self.ess_floor <= 1.0) {
            return Err(Error::Config("ESS floor must lie in (0, 1]".into()));
        }
        if !(self.beta0 > 0.0 && self.beta1 >= self.beta0) {
            return Err(Error::Config("smoothing sharpness must satisfy 0 < beta0 <= beta1".into()));
        }
        Ok(())
    }

    /// Geometric sharpness ramp over the temper parameter.
    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta0 * (self.beta1 / self.beta0).powf(t.clamp(0.0, 1.0))
    }
}

/// What the optimizer maximizes (link units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Probability of landing in a box, tempered from a hull.
    Box(BoxDomain),
    /// Expected `exp(-sum w_j (k_j - t_j)^2)`.
    Quadratic { target: Vec<f64>, weight: Vec<f64> },
    /// Unit utility: the bound reduces to the log-evidence of the link itself.
    Constant,
    /// Match a target density given by fixed samples.
    Density { samples: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub step: char,
    pub elbo: f64,
    pub stderr: f64,
    pub temper_t: f64,
    pub beta: f64,
    pub phi_norm: f64,
    /// O2 only: mean integrand per target-sample factor (`None` when not updated).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_factor: Vec<Option<f64>>,
}

/// Complete optimizer state; serializable for checkpoint and resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbemState {
    pub phi: Vec<f64>,
    pub qs: Vec<LowRankGaussian>,
    adam_q: Vec<Adam>,
    adam_phi: Adam,
    pub temper: Option<TemperState>,
    pub trace: Vec<TraceRecord>,
    pub alternation: u64,
    pub converged: bool,
    /// Trace index from which convergence may be declared (final stage reached).
    final_from: Option<usize>,
    pub seed: u64,
}

impl VbemState {
    pub fn q(&self) -> &LowRankGaussian {
        &self.qs[0]
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Resets the optimizer moments, e.g. after the link changed.
    pub fn reset_moments(&mut self) {
        self.adam_q = self.qs.iter().map(|q| Adam::new(&q.lens())).collect();
        self.adam_phi = Adam::new(&[self.phi.len()]);
        self.converged = false;
        self.final_from = if self.temper.as_ref().is_none_or(TemperState::finished) {
            Some(self.trace.len())
        } else {
            None
        };
    }
}

/// Stochastic VB-EM driver.
pub struct Vbem<'a> {
    pub link: &'a dyn Link,
    pub cfg: &'a VbemConfig,
    pub objective: &'a Objective,
}

impl<'a> Vbem<'a> {
    pub fn new(link: &'a dyn Link, cfg: &'a VbemConfig, objective: &'a Objective) -> Result<Self, Error> {
        cfg.validate()?;
        Ok(Self { link, cfg, objective })
    }

    fn d_z(&self) -> usize {
        match self.objective {
            Objective::Density { .. } => self.link.d_latent(),
            _ => self.link.d_kappa() + self.link.d_latent(),
        }
    }

    /// Prior-matching initial state at `phi0`.
    pub fn init(&self, phi0: Vec<f64>, seed: u64) -> Result<VbemState, Error> {
        if phi0.len() != self.link.d_phi() {
            return Err(Error::Shape(format!("phi has length {}, link needs {}", phi0.len(), self.link.d_phi())));
        }
        let factors = match self.objective {
            Objective::Density { samples } => {
                if samples.is_empty() {
                    return Err(Error::Config("target density needs at least one sample".into()));
                }
                samples.len()
            }
            _ => 1,
        };
        let qs = vec![LowRankGaussian::standard(self.d_z(), self.cfg.rank); factors];
        let mut state = VbemState {
            adam_q: Vec::new(),
            adam_phi: Adam::new(&[phi0.len()]),
            phi: phi0,
            qs,
            temper: None,
            trace: Vec::new(),
            alternation: 0,
            converged: false,
            final_from: None,
            seed,
        };
        state.adam_q = state.qs.iter().map(|q| Adam::new(&q.lens())).collect();
        if let Objective::Box(target) = self.objective {
            let preds = self.latent_predictions(&state, derive_seed(seed, "temper-init"))?;
            state.temper = Some(TemperState::new(target.clone(), &preds, self.cfg.hull_margin));
        } else {
            state.final_from = Some(0);
        }
        Ok(state)
    }

    /// Prepares a state carried over from another link: fresh moments, and for
    /// box objectives a fresh tempering schedule.
    pub fn rebind(&self, state: &mut VbemState) -> Result<(), Error> {
        state.converged = false;
        if let Objective::Box(target) = self.objective {
            let label = format!("temper-rebind/{}", state.alternation);
            let preds = self.latent_predictions(state, derive_seed(state.seed, &label))?;
            state.temper = Some(TemperState::new(target.clone(), &preds, self.cfg.hull_margin));
        } else {
            state.temper = None;
        }
        state.reset_moments();
        Ok(())
    }

    /// Link predictions at `N_w` latent draws from the current variational marginal.
    pub fn latent_predictions(&self, state: &VbemState, seed: u64) -> Result<Vec<PredictiveDensity>, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = sample_latents(self.objective, &state.qs, self.link.d_kappa(), self.cfg.n_w, &mut rng)?;
        link_predict(self.link, &state.phi, &lat)
    }

    pub fn utility(&self, state: &VbemState) -> Utility {
        match self.objective {
            Objective::Box(target) => match &state.temper {
                Some(ts) => {
                    let k = ts.domain();
                    Utility::SmoothBox { lo: k.lo, hi: k.hi, beta: self.cfg.beta_at(ts.t) }
                }
                None => Utility::SmoothBox {
                    lo: target.lo.clone(),
                    hi: target.hi.clone(),
                    beta: self.cfg.beta1,
                },
            },
            Objective::Quadratic { target, weight } => Utility::Quadratic {
                target: target.clone(),
                weight: weight.clone(),
            },
            Objective::Constant | Objective::Density { .. } => Utility::Constant,
        }
    }

    fn noise_for(&self, state: &VbemState, k: usize, block: usize) -> Noise {
        let label = format!("noise/{}/{k}/{block}", state.alternation);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &label));
        Noise::draw(&mut rng, self.cfg.n_mc, self.d_z(), self.cfg.rank)
    }

    /// One ELBO evaluation with the `k`-th noise block of the current alternation.
    pub fn evaluate(&self, state: &VbemState, k: usize, track: Track) -> Result<ElboEval, Error> {
        match self.objective {
            Objective::Density { samples } => {
                let active = self.active_factors(state, k);
                let noises: Vec<Noise> = active.iter().map(|&s| self.noise_for(state, k, s)).collect();
                elbo_o2(self.link, &state.qs, &state.phi, samples, &active, &noises, track)
            }
            _ => {
                let noise = self.noise_for(state, k, 0);
                elbo_o1(self.link, &state.qs[0], &state.phi, &self.utility(state), &noise, track)
            }
        }
    }

    fn active_factors(&self, state: &VbemState, k: usize) -> Vec<usize> {
        let s = state.qs.len();
        let m = self.cfg.o2_active;
        if m == 0 || m >= s {
            return (0..s).collect();
        }
        let start = ((state.alternation as usize) * (self.cfg.k_e + self.cfg.k_m) + k) * m;
        let mut v: Vec<usize> = (0..m).map(|i| (start + i) % s).collect();
        v.sort_unstable();
        v
    }

    fn record(&self, state: &mut VbemState, step: char, k: usize, ev: &ElboEval) {
        let mut per_factor = Vec::new();
        if let Objective::Density { .. } = self.objective {
            per_factor = vec![None; state.qs.len()];
            let n = self.cfg.n_mc;
            for (a, &s) in self.active_factors(state, k).iter().enumerate() {
                per_factor[s] = Some(ev.per_draw[a * n..(a + 1) * n].iter().sum::<f64>() / n as f64);
            }
        }
        let (t, beta) = match &state.temper {
            Some(ts) => (ts.t, self.cfg.beta_at(ts.t)),
            None => (1.0, self.cfg.beta1),
        };
        let iter = state.trace.len();
        state.trace.push(TraceRecord {
            iter,
            step,
            elbo: ev.value,
            stderr: ev.stderr,
            temper_t: t,
            beta,
            phi_norm: state.phi.iter().map(|v| v * v).sum::<f64>().sqrt(),
            per_factor,
        });
    }

    /// `k_E` ascent steps on the variational parameters.
    pub fn e_step(&self, state: &mut VbemState) -> Result<(), Error> {
        for k in 0..self.cfg.k_e {
            let ev = self.evaluate(state, k, Track::Q)?;
            let active = match self.objective {
                Objective::Density { .. } => self.active_factors(state, k),
                _ => vec![0],
            };
            for (a, &s) in active.iter().enumerate() {
                let neg: Vec<Vec<f64>> = ev.grad_q[a].iter().map(|g| g.iter().map(|v| -v).collect()).collect();
                let gref: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
                let mut blocks = state.qs[s].blocks_mut();
                let mut pref: Vec<&mut [f64]> = blocks.iter_mut().map(|b| &mut **b).collect();
                state.adam_q[s].step(&mut pref, &gref, self.cfg.lr_q);
            }
            self.record(state, 'E', k, &ev);
        }
        Ok(())
    }

    /// `k_M` ascent steps on the process parameters.
    pub fn m_step(&self, state: &mut VbemState) -> Result<(), Error> {
        for k in 0..self.cfg.k_m {
            let ev = self.evaluate(state, k, Track::Phi)?;
            let neg: Vec<f64> = ev.grad_phi.iter().map(|v| -v).collect();
            state.adam_phi.step(&mut [&mut state.phi], &[&neg], self.cfg.lr_phi);
            self.record(state, 'M', k, &ev);
        }
        Ok(())
    }

    /// Advances the tempered domain using fresh latent draws.
    pub fn temper(&self, state: &mut VbemState) -> Result<Option<TemperOutcome>, Error> {
        let Some(ts) = &state.temper else { return Ok(None) };
        if ts.finished() {
            return Ok(None);
        }
        let label = format!("temper/{}", state.alternation);
        let preds = self.latent_predictions(state, derive_seed(state.seed, &label))?;
        let ts = state.temper.as_mut().expect("checked above");
        let out = ts.step(&preds, self.cfg.ess_floor, self.cfg.stall_limit)?;
        if (ts.finished() || ts.stalled) && state.final_from.is_none() {
            state.final_from = Some(state.trace.len());
        }
        Ok(Some(out))
    }

    /// Window-averaged ELBO has stopped improving on the final stage.
    pub fn has_converged(&self, state: &VbemState) -> bool {
        let Some(from) = state.final_from else { return false };
        let tr = &state.trace[from.min(state.trace.len())..];
        let (w, p) = (self.cfg.window, self.cfg.patience);
        if tr.len() < w + p {
            return false;
        }
        let avg = |s: &[TraceRecord]| s.iter().map(|r| r.elbo).sum::<f64>() / s.len() as f64;
        let now = avg(&tr[tr.len() - w..]);
        let before = avg(&tr[tr.len() - w - p..tr.len() - p]);
        (now - before) / before.abs().max(1e-12) < self.cfg.rel_tol
    }

    /// Alternates E, M and temper steps until convergence or `max_iters` trace entries.
    pub fn run(&self, state: &mut VbemState, mut on_alternation: impl FnMut(&VbemState)) -> Result<(), Error> {
        while !state.converged && state.trace.len() < self.cfg.max_iters {
            self.e_step(state)?;
            self.m_step(state)?;
            self.temper(state)?;
            state.alternation += 1;
            state.converged = self.has_converged(state);
            on_alternation(state);
        }
        Ok(())
    }
}

/// Latent (phase) draws from the variational marginal; O2 draws from the uniform factor mixture.
pub fn sample_latents<R: Rng + ?Sized>(
    objective: &Objective,
    qs: &[LowRankGaussian],
    d_kappa: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, Error> {
    match objective {
        Objective::Density { .. } => {
            let mut out = Vec::with_capacity(n);
            let mut counts = vec![0usize; qs.len()];
            for _ in 0..n {
                counts[rng.random_range(0..qs.len())] += 1;
            }
            for (q, &c) in qs.iter().zip(&counts) {
                if c > 0 {
                    out.extend(q.sample(c, rng)?.0);
                }
            }
            Ok(out)
        }
        _ => Ok(qs[0].sample(n, rng)?.0.into_iter().map(|z| z[d_kappa..].to_vec()).collect()),
    }
}
