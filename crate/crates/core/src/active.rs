//! Objective-aware data acquisition and the labeled data store.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::homog::{Homogenizer, MaterialConfig, PropertyCase};
use crate::io::{read_f64_blob, read_json, write_f64_blob, write_json};
use crate::randfield::{hard_threshold, FieldSynth};
use crate::seed::{derive_seed, grid_hash};
use crate::surrogate::{prob_in_box, BoxDomain, PredictiveDensity, Standardizer};
use crate::vbem::{sample_latents, LowRankGaussian, Objective};
use crate::Error;

pub use crate::pipeline::outer_loop;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMeta {
    /// Acquisition step that produced the shard; `None` for ancestral data.
    pub step: Option<usize>,
    pub seed: u64,
    /// Process parameters the candidates were generated at, when shared.
    pub phi: Option<Vec<f64>>,
    pub count: usize,
    pub inputs: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_p: usize,
    pub d_kappa: usize,
    pub case: PropertyCase,
    pub material: MaterialConfig,
    pub count: usize,
    pub stats: Standardizer,
    pub shards: Vec<ShardMeta>,
    /// Fully resolved run configuration, if the store was produced by a run.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

/// Labeled `(microstructure, property)` pairs without duplicate grids.
#[derive(Debug, Clone, PartialEq)]
pub struct DataStore {
    pub manifest: Manifest,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    hashes: HashSet<u64>,
}

impl DataStore {
    pub fn new(n_p: usize, d_kappa: usize, case: PropertyCase, material: MaterialConfig) -> Self {
        Self {
            manifest: Manifest {
                n_p,
                d_kappa,
                case,
                material,
                count: 0,
                stats: Standardizer::identity(d_kappa),
                shards: Vec::new(),
                config: None,
            },
            xs: Vec::new(),
            ys: Vec::new(),
            hashes: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn contains_hash(&self, h: u64) -> bool {
        self.hashes.contains(&h)
    }

    pub fn hashes(&self) -> &HashSet<u64> {
        &self.hashes
    }

    /// Appends a shard; rejects duplicates (within the shard or against the store).
    pub fn append(&mut self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, step: Option<usize>, seed: u64, phi: Option<Vec<f64>>) -> Result<(), Error> {
        let npix = self.manifest.n_p * self.manifest.n_p;
        if xs.len() != ys.len() {
            return Err(Error::Shape("shard inputs and labels differ in count".into()));
        }
        let mut fresh = HashSet::new();
        for (x, y) in xs.iter().zip(&ys) {
            if x.len() != npix || y.len() != self.manifest.d_kappa {
                return Err(Error::Shape("shard entry does not match store dimensions".into()));
            }
            let h = grid_hash(x);
            if self.hashes.contains(&h) || !fresh.insert(h) {
                return Err(Error::Config(format!("duplicate microstructure {h:016x}")));
            }
        }
        let idx = self.manifest.shards.len();
        self.manifest.shards.push(ShardMeta {
            step,
            seed,
            phi,
            count: xs.len(),
            inputs: format!("shard{idx:03}_inputs.bin"),
            labels: format!("shard{idx:03}_labels.bin"),
        });
        self.hashes.extend(fresh);
        self.xs.extend(xs);
        self.ys.extend(ys);
        self.manifest.count = self.xs.len();
        self.manifest.stats = Standardizer::fit(&self.ys);
        Ok(())
    }

    /// Entries belonging to the first `n` shards.
    pub fn prefix_shards(&self, n: usize) -> Result<DataStore, Error> {
        let mut out = DataStore::new(self.manifest.n_p, self.manifest.d_kappa, self.manifest.case, self.manifest.material.clone());
        out.manifest.config = self.manifest.config.clone();
        let mut start = 0;
        for s in self.manifest.shards.iter().take(n) {
            let end = start + s.count;
            out.append(self.xs[start..end].to_vec(), self.ys[start..end].to_vec(), s.step, s.seed, s.phi.clone())?;
            start = end;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        let mut start = 0;
        for s in &self.manifest.shards {
            let end = start + s.count;
            let xs: Vec<f64> = self.xs[start..end].iter().flatten().copied().collect();
            let ys: Vec<f64> = self.ys[start..end].iter().flatten().copied().collect();
            write_f64_blob(&dir.join(&s.inputs), &xs)?;
            write_f64_blob(&dir.join(&s.labels), &ys)?;
            start = end;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let mut out = DataStore::new(manifest.n_p, manifest.d_kappa, manifest.case, manifest.material.clone());
        out.manifest.config = manifest.config.clone();
        let npix = manifest.n_p * manifest.n_p;
        for s in &manifest.shards {
            let xs = read_f64_blob(&dir.join(&s.inputs))?;
            let ys = read_f64_blob(&dir.join(&s.labels))?;
            if xs.len() != s.count * npix || ys.len() != s.count * manifest.d_kappa {
                return Err(Error::Format(format!("shard {} has the wrong size", s.inputs)));
            }
            out.append(
                xs.chunks(npix).map(<[f64]>::to_vec).collect(),
                ys.chunks(manifest.d_kappa).map(<[f64]>::to_vec).collect(),
                s.step,
                s.seed,
                s.phi.clone(),
            )?;
        }
        if out.manifest.stats != manifest.stats || out.len() != manifest.count {
            return Err(Error::Format("manifest statistics disagree with the shards".into()));
        }
        Ok(out)
    }
}

/// Labels each input with the oracle; failures are skipped and reported by index.
pub fn label_all(h: &Homogenizer, case: PropertyCase, xs: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let labels = h.label_batch(case, &xs);
    let mut kx = Vec::with_capacity(xs.len());
    let mut ky = Vec::with_capacity(xs.len());
    let mut failed = Vec::new();
    for (i, (x, y)) in xs.into_iter().zip(labels).enumerate() {
        match y {
            Ok(y) => {
                kx.push(x);
                ky.push(y.to_vec());
            }
            Err(e) => {
                log::warn!("oracle failed on candidate {i}: {e}");
                failed.push(i);
            }
        }
    }
    (kx, ky, failed)
}

/// Ancestral draws: `phi ~ N(0, I)` then one microstructure per `phi`, without duplicates.
pub fn ancestral_inputs(synth: &FieldSynth, x0: f64, n: usize, exclude: &HashSet<u64>, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 10 * n.max(1) {
        tries += 1;
        let phi: Vec<f64> = (0..synth.q()).map(|_| rng.sample(StandardNormal)).collect();
        let x = synth.sample_binary(&phi, x0, &mut rng).expect("dimensions fixed by the synthesizer");
        let h = grid_hash(&x);
        if !exclude.contains(&h) && seen.insert(h) {
            out.push(x);
        }
    }
    if out.len() < n {
        log::warn!("only {} unique ancestral microstructures after {tries} draws", out.len());
    }
    out
}

/// Candidate microstructures from the variational latent marginal, unique and unseen.
pub fn propose_pool(
    synth: &FieldSynth,
    objective: &Objective,
    qs: &[LowRankGaussian],
    d_kappa: usize,
    phi: &[f64],
    x0: f64,
    n_pool: usize,
    exclude: &HashSet<u64>,
    seed: u64,
) -> Result<Vec<Vec<f64>>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_pool);
    let mut drawn = 0;
    while out.len() < n_pool && drawn < 10 * n_pool {
        let batch = (n_pool - out.len()).min(10 * n_pool - drawn);
        drawn += batch;
        for psi in sample_latents(objective, qs, d_kappa, batch, &mut rng)? {
            let x = hard_threshold(&synth.synthesize(phi, &psi)?, x0);
            let h = grid_hash(&x);
            if !exclude.contains(&h) && seen.insert(h) {
                out.push(x);
            }
        }
    }
    if out.len() < n_pool {
        log::warn!("pool holds {} unique candidates after {drawn} draws", out.len());
    }
    Ok(out)
}

/// Utility whose predictive variance drives O1 acquisition (physical units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AcqUtility {
    Box(BoxDomain),
    Quadratic { target: Vec<f64>, tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcqVariant {
    O1Variance,
    O2LogScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub variant: AcqVariant,
    pub alpha: Vec<f64>,
}

/// `Var[u(kappa)]` under each predictive density; `hashes` seed the Monte Carlo draws.
pub fn acquisition_o1(preds: &[PredictiveDensity], utility: &AcqUtility, hashes: &[u64]) -> Result<AcquisitionScore, Error> {
    let alpha = preds
        .iter()
        .zip(hashes)
        .map(|(p, &h)| match utility {
            AcqUtility::Box(k) => prob_in_box(p, k).map(|v| v * (1.0 - v)),
            AcqUtility::Quadratic { target, tau } => {
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                Ok(quadratic_variance_mc(p, target, *tau, 256, &mut rng))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AcquisitionScore { variant: AcqVariant::O1Variance, alpha })
}

/// Sample variance of `exp(-tau |k - t|^2)` over `n` predictive draws.
pub fn quadratic_variance_mc<R: Rng + ?Sized>(p: &PredictiveDensity, target: &[f64], tau: f64, n: usize, rng: &mut R) -> f64 {
    let us: Vec<f64> = (0..n)
        .map(|_| {
            let d2: f64 = (0..p.mean.len())
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    (p.mean[j] + p.var[j].sqrt() * z - target[j]).powi(2)
                })
                .sum();
            (-tau * d2).exp()
        })
        .collect();
    let m = us.iter().sum::<f64>() / n as f64;
    us.iter().map(|u| (u - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}

/// Mean predictive log-score of the target samples.
pub fn acquisition_o2(preds: &[PredictiveDensity], samples: &[Vec<f64>]) -> AcquisitionScore {
    let alpha = preds
        .iter()
        .map(|p| samples.iter().map(|k| p.log_density(k)).sum::<f64>() / samples.len() as f64)
        .collect();
    AcquisitionScore { variant: AcqVariant::O2LogScore, alpha }
}

/// Candidate indices ranked by score (descending), ties by ascending hash.
pub fn rank(scores: &[f64], hashes: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(hashes[a].cmp(&hashes[b])));
    idx
}

/// Top-`n_add` candidates labeled by the oracle; failed labels are backfilled down the ranking.
pub fn select_and_label(
    pool: &[Vec<f64>],
    scores: &[f64],
    n_add: usize,
    oracle: &Homogenizer,
    case: PropertyCase,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), Error> {
    if n_add > pool.len() || scores.len() != pool.len() {
        return Err(Error::Config(format!("cannot select {n_add} of {} candidates", pool.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite acquisition score".into()));
    }
    let hashes: Vec<u64> = pool.iter().map(|x| grid_hash(x)).collect();
    let order = rank(scores, &hashes);
    let (mut xs, mut ys) = (Vec::with_capacity(n_add), Vec::with_capacity(n_add));
    let mut next = 0;
    while xs.len() < n_add && next < order.len() {
        let take = (n_add - xs.len()).min(order.len() - next);
        let batch: Vec<Vec<f64>> = order[next..next + take].iter().map(|&i| pool[i].clone()).collect();
        next += take;
        let (bx, by, _) = label_all(oracle, case, batch);
        xs.extend(bx);
        ys.extend(by);
    }
    if xs.len() < n_add {
        log::warn!("labeled {} of {n_add} requested candidates", xs.len());
    }
    Ok((xs, ys))
}

/// Seed for candidate generation at acquisition step `l`.
pub fn pool_seed(master: u64, l: usize) -> u64 {
    derive_seed(master, &format!("pool/{l}"))
}
