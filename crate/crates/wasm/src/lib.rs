//! Browser bindings: sample a microstructure for a process parameter vector,
//! draw its spectral density, and homogenize it.

use pspinv::homog::{Homogenizer, MaterialConfig, PropertyCase};
use pspinv::randfield::{cutoff_from_vf, sdf_eval, sdf_weights, FieldSynth, SdfConfig, SpectralGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js(e: pspinv::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    synth: FieldSynth,
    oracle: Homogenizer,
}

#[wasm_bindgen]
impl Demo {
    /// `n_p` pixels per side (multiple of 16), 36 spectral kernels.
    #[wasm_bindgen(constructor)]
    pub fn new(n_p: usize) -> Result<Demo, JsError> {
        let sdf = SdfConfig::new(36, 65.0, 12.0).map_err(js)?;
        let synth = FieldSynth::new(sdf, SpectralGrid { k: 16, w_max: 65.0 }, n_p).map_err(js)?;
        let oracle = Homogenizer::new(n_p, MaterialConfig::default()).map_err(js)?;
        Ok(Demo { synth, oracle })
    }

    #[wasm_bindgen(getter)]
    pub fn q(&self) -> usize {
        self.synth.q()
    }

    #[wasm_bindgen(getter)]
    pub fn n_p(&self) -> usize {
        self.synth.n_p()
    }

    /// Standard-normal process parameters.
    pub fn random_phi(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.synth.q()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Row-major 0/1 image at target volume fraction `vf`.
    pub fn microstructure(&self, phi: Vec<f64>, vf: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        let x0 = cutoff_from_vf(vf).map_err(js)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.synth.sample_binary(&phi, x0, &mut rng).map_err(js)
    }

    /// `res x res` samples of the spectral density over `[0, w_max]^2`, row-major.
    pub fn sdf_heatmap(&self, phi: Vec<f64>, res: usize) -> Vec<f64> {
        let cfg = self.synth.sdf();
        let gamma = sdf_weights(&phi);
        let step = cfg.w_max / res.max(1) as f64;
        let mut out = Vec::with_capacity(res * res);
        for i in 0..res {
            for j in 0..res {
                out.push(sdf_eval(cfg, &gamma, [(j as f64 + 0.5) * step, (i as f64 + 0.5) * step]));
            }
        }
        out
    }

    /// Case 1: `[a_11, (C_1111 + C_2222) / 2]`; case 2: `[a_11, a_22]`.
    pub fn properties(&self, x: Vec<f64>, case: u8) -> Result<Vec<f64>, JsError> {
        let case = match case {
            1 => PropertyCase::Case1,
            2 => PropertyCase::Case2,
            c => return Err(JsError::new(&format!("unknown property case {c}"))),
        };
        Ok(self.oracle.properties(case, &x).map_err(js)?.to_vec())
    }
}
