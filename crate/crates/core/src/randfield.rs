//! Process-structure link: spectral-mixture SDF, spectral-representation
//! synthesis of a unit-variance Gaussian field and thresholding into a
//! two-phase microstructure.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::tensorad::{erf_approx, gemm_acc, Graph, Tensor, TensorError, Var};
use crate::Error;

/// RBF spectral-mixture configuration. Centers sit on a uniform square grid in
/// `[0, w_max]^2`; all RBFs share one bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdfConfig {
    pub q: usize,
    pub w_max: f64,
    pub sigma: f64,
}

impl SdfConfig {
    pub fn new(q: usize, w_max: f64, sigma: f64) -> Result<Self, Error> {
        let cfg = Self { q, w_max, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let side = (self.q as f64).sqrt().round() as usize;
        if self.q == 0 || side * side != self.q {
            return Err(Error::Config(format!("Q = {} is not a positive perfect square", self.q)));
        }
        if !(self.sigma > 0.0) || !(self.w_max > 0.0) {
            return Err(Error::Config("sigma and w_max must be positive".into()));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        (self.q as f64).sqrt().round() as usize
    }

    /// RBF centers in row-major order over `(w1, w2)`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let side = self.side();
        let coord = |i: usize| {
            if side == 1 {
                0.5 * self.w_max
            } else {
                self.w_max * i as f64 / (side - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.q);
        for a in 0..side {
            for b in 0..side {
                out.push([coord(a), coord(b)]);
            }
        }
        out
    }
}

/// Pre-softmax RBF weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams(pub Vec<f64>);

impl ProcessParams {
    pub fn zeros(q: usize) -> Self {
        Self(vec![0.0; q])
    }

    pub fn sample<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Self {
        Self((0..q).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Softmax of the process parameters.
pub fn sdf_weights(phi: &[f64]) -> Vec<f64> {
    let m = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = phi.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Normalized 2-D Gaussian RBF.
fn rbf(w: [f64; 2], mu: [f64; 2], sigma: f64) -> f64 {
    let r2 = (w[0] - mu[0]).powi(2) + (w[1] - mu[1]).powi(2);
    (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

/// Spectral density `G(w) = sum_i gamma_i h(w; mu_i, sigma)`.
pub fn sdf_eval(cfg: &SdfConfig, gamma: &[f64], w: [f64; 2]) -> f64 {
    cfg.centers()
        .iter()
        .zip(gamma)
        .map(|(&mu, &g)| g * rbf(w, mu, cfg.sigma))
        .sum()
}

/// Discrete wavenumber grid: `k x k` cell midpoints on `[0, w_max]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    pub k: usize,
    pub w_max: f64,
}

impl SpectralGrid {
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        let dw = self.w_max / self.k as f64;
        let mut out = Vec::with_capacity(self.k * self.k);
        for a in 0..self.k {
            for b in 0..self.k {
                out.push([(a as f64 + 0.5) * dw, (b as f64 + 0.5) * dw]);
            }
        }
        out
    }

    /// Number of phase angles: one per node and cosine family.
    pub fn d_psi(&self) -> usize {
        2 * self.k * self.k
    }
}

/// Maps a standard-normal latent to a phase angle uniform on `[0, 2pi]`.
pub fn phase_transform(psi_t: f64) -> f64 {
    PI * (1.0 + erf_approx(psi_t * FRAC_1_SQRT_2))
}

/// Threshold `x0` with `Pr(x_g > x0) = vf` for a standard normal `x_g`.
pub fn cutoff_from_vf(vf: f64) -> Result<f64, Error> {
    if !(vf > 0.0 && vf < 1.0) {
        return Err(Error::Config(format!("volume fraction {vf} outside (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - vf))
}

/// `(tanh(eps (x_g - x0)) + 1) / 2`.
pub fn smooth_threshold(xg: &[f64], x0: f64, eps: f64) -> Vec<f64> {
    xg.iter().map(|&v| 0.5 * ((eps * (v - x0)).tanh() + 1.0)).collect()
}

/// Heaviside threshold into `{0, 1}`.
pub fn hard_threshold(xg: &[f64], x0: f64) -> Vec<f64> {
    xg.iter().map(|&v| if v > x0 { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Binary,
    Smooth,
}

/// Pixel field of phase indicators, row-major with row index along `s2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Microstructure {
    pub n_p: usize,
    pub mode: Mode,
    pub values: Vec<f64>,
    pub vf: f64,
    pub x0: f64,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n_p: usize,
    mode: Mode,
    vf: f64,
    x0: f64,
    seed: Option<u64>,
}

impl Microstructure {
    pub fn binary(n_p: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n_p * n_p);
        Self {
            n_p,
            mode: Mode::Binary,
            values,
            vf: f64::NAN,
            x0: f64::NAN,
            seed: None,
        }
    }

    pub fn phase_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Rotation by 90 degrees: the `s1` axis becomes the `s2` axis.
    pub fn rotated(&self) -> Self {
        let n = self.n_p;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[j * n + (n - 1 - i)] = self.values[i * n + j];
            }
        }
        Self {
            values: v,
            ..self.clone()
        }
    }

    /// Writes `<stem>.bin` (little-endian f64, row-major) and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<(), Error> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(stem.with_extension("bin"), bytes)?;
        let side = Sidecar {
            n_p: self.n_p,
            mode: self.mode,
            vf: self.vf,
            x0: self.x0,
            seed: self.seed,
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self, Error> {
        let side: Sidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let values = crate::io::read_f64_blob(&stem.with_extension("bin"))?;
        if values.len() != side.n_p * side.n_p {
            return Err(Error::Format(format!(
                "{}: expected {} values, found {}",
                stem.display(),
                side.n_p * side.n_p,
                values.len()
            )));
        }
        Ok(Self {
            n_p: side.n_p,
            mode: side.mode,
            values,
            vf: side.vf,
            x0: side.x0,
            seed: side.seed,
        })
    }
}

/// Spectral-representation synthesizer for a fixed SDF family, spectral grid
/// and pixel resolution. Holds the precomputed cosine/sine bases.
#[derive(Debug, Clone)]
pub struct FieldSynth {
    sdf: SdfConfig,
    grid: SpectralGrid,
    n_p: usize,
    /// `[2K^2, Q]`: RBF values at each node, duplicated for both families.
    rbf: Arc<Tensor>,
    /// `[2K^2, N_p^2]`: `cos(w_t . s_p)`.
    cos_basis: Arc<Tensor>,
    /// `[2K^2, N_p^2]`: `sin(w_t . s_p)`.
    sin_basis: Arc<Tensor>,
}

impl FieldSynth {
    pub fn new(sdf: SdfConfig, grid: SpectralGrid, n_p: usize) -> Result<Self, Error> {
        sdf.validate()?;
        if grid.k == 0 || n_p == 0 {
            return Err(Error::Config("spectral grid and pixel grid must be non-empty".into()));
        }
        let nodes = grid.nodes();
        let centers = sdf.centers();
        let kk = nodes.len();
        let terms = 2 * kk;
        let mut rbf_m = vec![0.0; terms * sdf.q];
        for (t, row) in rbf_m.chunks_mut(sdf.q).enumerate() {
            let w = nodes[t % kk];
            for (i, v) in row.iter_mut().enumerate() {
                *v = rbf(w, centers[i], sdf.sigma);
            }
        }
        let npix = n_p * n_p;
        let mut cb = vec![0.0; terms * npix];
        let mut sb = vec![0.0; terms * npix];
        for t in 0..terms {
            let w = nodes[t % kk];
            let sign = if t < kk { 1.0 } else { -1.0 };
            for i in 0..n_p {
                let s2 = (i as f64 + 0.5) / n_p as f64;
                for j in 0..n_p {
                    let s1 = (j as f64 + 0.5) / n_p as f64;
                    let phase = w[0] * s1 + sign * w[1] * s2;
                    cb[t * npix + i * n_p + j] = phase.cos();
                    sb[t * npix + i * n_p + j] = phase.sin();
                }
            }
        }
        Ok(Self {
            rbf: Arc::new(Tensor::new(&[terms, sdf.q], rbf_m).expect("shape")),
            cos_basis: Arc::new(Tensor::new(&[terms, npix], cb).expect("shape")),
            sin_basis: Arc::new(Tensor::new(&[terms, npix], sb).expect("shape")),
            sdf,
            grid,
            n_p,
        })
    }

    pub fn sdf(&self) -> &SdfConfig {
        &self.sdf
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn d_psi(&self) -> usize {
        self.grid.d_psi()
    }

    pub fn q(&self) -> usize {
        self.sdf.q
    }

    /// Cosine amplitudes, one per term, with `sum A^2 / 2 = 1`.
    pub fn amplitudes(&self, phi: &[f64]) -> Vec<f64> {
        let gamma = sdf_weights(phi);
        let q = self.sdf.q;
        let g: Vec<f64> = self
            .rbf
            .data()
            .chunks(q)
            .map(|row| row.iter().zip(&gamma).map(|(a, b)| a * b).sum())
            .collect();
        let total: f64 = g.iter().sum();
        g.into_iter().map(|v| (2.0 * v / total).sqrt()).collect()
    }

    /// Lag covariance `C(tau) = sum_t A_t^2/2 cos(w_t . tau)` of the discrete spectrum.
    pub fn covariance(&self, phi: &[f64], tau: [f64; 2]) -> f64 {
        let nodes = self.grid.nodes();
        let kk = nodes.len();
        self.amplitudes(phi)
            .iter()
            .enumerate()
            .map(|(t, a)| {
                let w = nodes[t % kk];
                let sign = if t < kk { 1.0 } else { -1.0 };
                0.5 * a * a * (w[0] * tau[0] + sign * w[1] * tau[1]).cos()
            })
            .sum()
    }

    fn check_psi(&self, len: usize) -> Result<(), Error> {
        if len != self.d_psi() {
            return Err(Error::Shape(format!(
                "phase-angle vector has length {len}, spectral grid needs {}",
                self.d_psi()
            )));
        }
        Ok(())
    }

    /// Gaussian field `x_g` on the pixel grid for latent phases `psi_t`.
    pub fn synthesize(&self, phi: &[f64], psi_t: &[f64]) -> Result<Vec<f64>, Error> {
        self.check_psi(psi_t.len())?;
        if phi.len() != self.q() {
            return Err(Error::Shape(format!("phi has length {}, expected {}", phi.len(), self.q())));
        }
        let amp = self.amplitudes(phi);
        let terms = amp.len();
        let mut u = vec![0.0; terms];
        let mut v = vec![0.0; terms];
        for t in 0..terms {
            let psi = phase_transform(psi_t[t]);
            u[t] = amp[t] * psi.cos();
            v[t] = -amp[t] * psi.sin();
        }
        let npix = self.n_p * self.n_p;
        let mut out = vec![0.0; npix];
        gemm_acc(&u, self.cos_basis.data(), &mut out, 1, terms, npix);
        gemm_acc(&v, self.sin_basis.data(), &mut out, 1, terms, npix);
        Ok(out)
    }

    /// Draws `psi_t ~ N(0, I)` and returns the binary microstructure.
    pub fn sample_binary<R: Rng + ?Sized>(&self, phi: &[f64], x0: f64, rng: &mut R) -> Result<Vec<f64>, Error> {
        let psi_t: Vec<f64> = (0..self.d_psi()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(hard_threshold(&self.synthesize(phi, &psi_t)?, x0))
    }

    /// Differentiable amplitudes, shape `[1, 2K^2]`.
    pub fn amplitudes_graph(&self, g: &mut Graph, phi: Var) -> Result<Var, TensorError> {
        let q = self.q();
        let gamma = g.softmax(phi);
        let gamma = g.reshape(gamma, &[q, 1])?;
        let h = g.constant_shared(self.rbf.clone());
        let dens = g.matmul(h, gamma)?;
        let total = g.sum(dens);
        let ratio = g.div(dens, total)?;
        let ratio = g.mul_scalar(ratio, 2.0);
        let amp = g.sqrt(ratio);
        g.reshape(amp, &[1, self.d_psi()])
    }

    /// Differentiable batch synthesis: `phi: [Q]`, `psi_t: [n, 2K^2]` to `[n, N_p^2]`.
    pub fn synthesize_graph(&self, g: &mut Graph, phi: Var, psi_t: Var) -> Result<Var, TensorError> {
        let amp = self.amplitudes_graph(g, phi)?;
        let half = g.mul_scalar(psi_t, FRAC_1_SQRT_2);
        let e = g.erf(half);
        let e = g.add_scalar(e, 1.0);
        let psi = g.mul_scalar(e, PI);
        let c = g.cos(psi);
        let shifted = g.add_scalar(psi, -0.5 * PI);
        let s = g.cos(shifted);
        let u = g.mul(c, amp)?;
        let v = g.mul(s, amp)?;
        let cb = g.constant_shared(self.cos_basis.clone());
        let sb = g.constant_shared(self.sin_basis.clone());
        let xc = g.matmul(u, cb)?;
        let xs = g.matmul(v, sb)?;
        g.sub(xc, xs)
    }

    /// Field followed by the tanh relaxation, `[n, N_p^2]`.
    pub fn smooth_microstructure_graph(
        &self,
        g: &mut Graph,
        phi: Var,
        psi_t: Var,
        x0: f64,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xg = self.synthesize_graph(g, phi, psi_t)?;
        let shifted = g.add_scalar(xg, -x0);
        let scaled = g.mul_scalar(shifted, eps);
        let t = g.tanh(scaled);
        let t = g.add_scalar(t, 1.0);
        Ok(g.mul_scalar(t, 0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> FieldSynth {
        FieldSynth::new(
            SdfConfig::new(36, 65.0, 12.0).unwrap(),
            SpectralGrid { k: 16, w_max: 65.0 },
            32,
        )
        .unwrap()
    }

    #[test]
    fn softmax_weights() {
        let g = sdf_weights(&[0.0; 100]);
        assert!(g.iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let g = sdf_weights(&[2f64.ln(), 0.0]);
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15 && (g[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn peak_of_single_rbf() {
        let cfg = SdfConfig::new(4, 65.0, 12.0).unwrap();
        let gamma = [0.0, 0.0, 1.0, 0.0];
        let c = cfg.centers()[2];
        let expect = 1.0 / (2.0 * PI * 144.0);
        assert!((sdf_eval(&cfg, &gamma, c) - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_sdf_symmetric_under_swap() {
        let cfg = SdfConfig::new(36, 65.0, 12.0).unwrap();
        let gamma = sdf_weights(&[0.0; 36]);
        let grid = SpectralGrid { k: 16, w_max: 65.0 };
        for w in grid.nodes() {
            let a = sdf_eval(&cfg, &gamma, w);
            let b = sdf_eval(&cfg, &gamma, [w[1], w[0]]);
            assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
        }
    }

    #[test]
    fn bad_q_rejected() {
        assert!(SdfConfig::new(35, 65.0, 12.0).is_err());
        assert!(SdfConfig::new(36, 65.0, 0.0).is_err());
    }

    #[test]
    fn amplitudes_give_unit_variance() {
        let s = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = ProcessParams::sample(36, &mut rng);
        let var: f64 = s.amplitudes(&phi.0).iter().map(|a| a * a / 2.0).sum();
        assert!((var - 1.0).abs() < 1e-12);
        assert!((s.covariance(&phi.0, [0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_deterministic_and_checks_length() {
        let s = desk();
        let psi: Vec<f64> = (0..s.d_psi()).map(|i| (i as f64 * 0.7).sin()).collect();
        let phi = vec![0.1; 36];
        let a = s.synthesize(&phi, &psi).unwrap();
        let b = s.synthesize(&phi, &psi).unwrap();
        assert_eq!(a, b);
        assert!(matches!(s.synthesize(&phi, &psi[1..]), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_and_direct_paths_agree() {
        let s = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = ProcessParams::sample(36, &mut rng).0;
        let psi: Vec<f64> = (0..s.d_psi()).map(|_| rng.sample(StandardNormal)).collect();
        let direct = s.synthesize(&phi, &psi).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(phi));
        let z = g.constant(Tensor::new(&[1, s.d_psi()], psi).unwrap());
        let x = s.synthesize_graph(&mut g, p, z).unwrap();
        for (a, b) in direct.iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_values() {
        assert!(cutoff_from_vf(0.5).unwrap().abs() < 1e-12);
        assert!(cutoff_from_vf(0.0).is_err());
        assert!(cutoff_from_vf(1.2).is_err());
    }

    #[test]
    fn thresholds() {
        assert_eq!(smooth_threshold(&[0.3], 0.3, 25.0), vec![0.5]);
        let v = smooth_threshold(&[0.2], 0.0, 25.0)[0];
        assert!((v - 0.5 * (5f64.tanh() + 1.0)).abs() < 1e-15);
        assert!((v - 0.999_954_6).abs() < 1e-7);
        assert!(smooth_threshold(&[1.0], 0.0, 1e6)[0] > 1.0 - 1e-12);
        assert_eq!(hard_threshold(&[1.0, 2.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(hard_threshold(&[-1.0, 0.2], 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let m = Microstructure::binary(3, vec![1., 0., 0., 1., 1., 0., 0., 0., 1.]);
        let r = m.rotated().rotated().rotated().rotated();
        assert_eq!(r.values, m.values);
        assert_ne!(m.rotated().values, m.values);
    }
}
