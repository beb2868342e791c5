//! End-to-end runs: data generation, the acquisition outer loop, the
//! random-acquisition baseline, Monte Carlo evaluation and plot export.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::active::{
    acquisition_o1, acquisition_o2, ancestral_inputs, label_all, pool_seed, propose_pool, rank, AcqUtility, AcquisitionScore,
    DataStore,
};
use crate::homog::{Homogenizer, MaterialConfig, PropertyCase};
use crate::io::{read_json, write_json};
use crate::randfield::{cutoff_from_vf, FieldSynth, SdfConfig, SpectralGrid};
use crate::seed::{derive_seed, grid_hash};
use crate::surrogate::{prob_in_box, train, Architecture, BoxDomain, PredictiveDensity, Standardizer, Surrogate, TrainConfig};
use crate::vbem::{Objective, SurrogateLink, TraceRecord, Vbem, VbemConfig, VbemState};
use crate::Error;

/// How the design target is specified; data-dependent forms resolve against `D^(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Box spanning the given label percentiles in every property.
    PercentileBox { lo: f64, hi: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Utility `exp(-tau |kappa - target|^2)`.
    Quadratic { target: Vec<f64>, tau: f64 },
    /// Gaussian at the label mean shifted by `shift` label standard deviations,
    /// covariance `cov_scale` times the label covariance.
    ShiftedGaussian { shift: Vec<f64>, cov_scale: f64 },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// Target in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvedTarget {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Quadratic { target: Vec<f64>, tau: f64 },
    Density { mean: Vec<f64>, cov: Vec<Vec<f64>>, samples: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `full`; only consulted when loading from JSON.
    pub preset: String,
    pub case: PropertyCase,
    pub target: TargetSpec,
    pub n_p: usize,
    pub vf: f64,
    /// Sharpness of the smooth threshold used inside the optimizer.
    pub eps: f64,
    pub sdf: SdfConfig,
    pub k: usize,
    pub material: MaterialConfig,
    pub train: TrainConfig,
    pub vbem: VbemConfig,
    pub n0: usize,
    pub n_pool: usize,
    pub n_add: usize,
    pub steps: usize,
    pub s_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(PropertyCase::Case1)
    }
}

impl RunConfig {
    pub fn desk(case: PropertyCase) -> Self {
        // one alternation per window, three per patience span
        let base = VbemConfig { window: 60, patience: 180, ..VbemConfig::default() };
        let (target, vbem) = match case {
            PropertyCase::Case1 => (TargetSpec::PercentileBox { lo: 70.0, hi: 90.0 }, base),
            PropertyCase::Case2 => (
                TargetSpec::ShiftedGaussian { shift: vec![1.0, -1.0], cov_scale: 0.25 },
                VbemConfig { n_mc: 4, ..base },
            ),
        };
        Self {
            preset: "desk".into(),
            case,
            target,
            n_p: 32,
            vf: 0.5,
            eps: 25.0,
            sdf: SdfConfig { q: 36, w_max: 65.0, sigma: 12.0 },
            k: 16,
            material: MaterialConfig::default(),
            train: TrainConfig { batch: 32, epochs: 100, lr: 3e-3, ..TrainConfig::default() },
            vbem,
            n0: 512,
            n_pool: 512,
            n_add: 128,
            steps: 3,
            s_samples: 8,
            eval_samples: 256,
            seed: 0,
            out: PathBuf::from("run"),
        }
    }

    pub fn full(case: PropertyCase) -> Self {
        let base = Self::desk(case);
        let (n0, steps, vbem) = match case {
            PropertyCase::Case1 => (2048, 4, VbemConfig::default()),
            PropertyCase::Case2 => (4096, 6, VbemConfig::default()),
        };
        Self {
            preset: "full".into(),
            n_p: 64,
            sdf: SdfConfig { q: 100, w_max: 65.0, sigma: 12.0 },
            k: 32,
            n0,
            n_pool: 4096,
            n_add: 1024,
            steps,
            s_samples: 20,
            eval_samples: 1024,
            train: TrainConfig::default(),
            vbem,
            ..base
        }
    }

    /// Reads a JSON config and overlays it on the preset it names.
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let case: PropertyCase = match obj.get("case") {
            Some(c) => serde_json::from_value(c.clone()).map_err(|e| Error::Config(format!("case: {e}")))?,
            None => PropertyCase::Case1,
        };
        let base = match obj.get("preset").and_then(Value::as_str).unwrap_or("desk") {
            "desk" => Self::desk(case),
            "full" => Self::full(case),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        let mut merged = serde_json::to_value(&base)?;
        if !obj.contains_key("target") {
            merge(&mut merged, &v);
        } else {
            let mut v = v.clone();
            let target = v.as_object_mut().expect("object").remove("target").expect("present");
            merge(&mut merged, &v);
            merged["target"] = target;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.n_p == 0 || self.n_p % 16 != 0 {
            return Err(Error::Config(format!("N_p = {} must be a positive multiple of 16", self.n_p)));
        }
        if self.n0 == 0 || self.n_pool == 0 || self.n_add == 0 || self.k == 0 || self.s_samples == 0 {
            return Err(Error::Config("all counts must be positive".into()));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("evaluation needs at least two samples".into()));
        }
        if self.n_add > self.n_pool {
            return Err(Error::Config(format!("N_add = {} exceeds N_pool = {}", self.n_add, self.n_pool)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("threshold sharpness must be positive".into()));
        }
        cutoff_from_vf(self.vf)?;
        self.sdf.validate()?;
        self.material.validate()?;
        self.train.validate()?;
        self.vbem.validate()?;
        match &self.target {
            TargetSpec::PercentileBox { lo, hi } if !(0.0 <= *lo && lo < hi && *hi <= 100.0) => {
                Err(Error::Config("percentile box needs 0 <= lo < hi <= 100".into()))
            }
            TargetSpec::Box { lo, hi } => BoxDomain::new(lo.clone(), hi.clone()).map(|_| ()),
            TargetSpec::Quadratic { tau, .. } if !(*tau > 0.0) => Err(Error::Config("tau must be positive".into())),
            TargetSpec::ShiftedGaussian { cov_scale, .. } if !(*cov_scale > 0.0) => {
                Err(Error::Config("covariance scale must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Linear-interpolation percentile of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + f * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

fn label_moments(ys: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = ys[0].len();
    let n = ys.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| ys.iter().map(|y| y[j]).sum::<f64>() / n).collect();
    let cov = (0..d)
        .map(|a| (0..d).map(|b| ys.iter().map(|y| (y[a] - mean[a]) * (y[b] - mean[b])).sum::<f64>() / (n - 1.0)).collect())
        .collect();
    (mean, cov)
}

fn cholesky(c: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, Error> {
    let n = c.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s = c[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Config("target covariance is not positive definite".into()));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Resolves the target against initial labels; Gaussian targets draw `s` samples.
pub fn resolve_target(spec: &TargetSpec, labels: &[Vec<f64>], s: usize, seed: u64) -> Result<ResolvedTarget, Error> {
    if labels.len() < 2 {
        return Err(Error::Config("target resolution needs at least two labels".into()));
    }
    let d = labels[0].len();
    let gaussian = |mean: Vec<f64>, cov: Vec<Vec<f64>>| -> Result<ResolvedTarget, Error> {
        let l = cholesky(&cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "target-samples"));
        let samples = (0..s)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (0..d).map(|i| mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()).collect()
            })
            .collect();
        Ok(ResolvedTarget::Density { mean, cov, samples })
    };
    match spec {
        TargetSpec::PercentileBox { lo, hi } => {
            let col = |j: usize| labels.iter().map(|y| y[j]).collect::<Vec<_>>();
            Ok(ResolvedTarget::Box {
                lo: (0..d).map(|j| percentile(&col(j), *lo)).collect(),
                hi: (0..d).map(|j| percentile(&col(j), *hi)).collect(),
            })
        }
        TargetSpec::Box { lo, hi } => Ok(ResolvedTarget::Box { lo: lo.clone(), hi: hi.clone() }),
        TargetSpec::Quadratic { target, tau } => Ok(ResolvedTarget::Quadratic { target: target.clone(), tau: *tau }),
        TargetSpec::ShiftedGaussian { shift, cov_scale } => {
            let (m, c) = label_moments(labels);
            if shift.len() != d {
                return Err(Error::Config("shift needs one entry per property".into()));
            }
            let mean = (0..d).map(|j| m[j] + shift[j] * c[j][j].sqrt()).collect();
            let cov = c.iter().map(|r| r.iter().map(|v| v * cov_scale).collect()).collect();
            gaussian(mean, cov)
        }
        TargetSpec::Gaussian { mean, cov } => gaussian(mean.clone(), cov.clone()),
    }
}

impl ResolvedTarget {
    /// Optimizer objective in the standardized units of `st`.
    pub fn objective(&self, st: &Standardizer) -> Result<Objective, Error> {
        Ok(match self {
            ResolvedTarget::Box { lo, hi } => Objective::Box(BoxDomain::new(lo.clone(), hi.clone())?.standardized(st)),
            ResolvedTarget::Quadratic { target, tau } => Objective::Quadratic {
                target: st.standardize(target),
                weight: st.std.iter().map(|s| tau * s * s).collect(),
            },
            ResolvedTarget::Density { samples, .. } => Objective::Density {
                samples: samples.iter().map(|k| st.standardize(k)).collect(),
            },
        })
    }

    pub fn acquisition(&self, preds: &[PredictiveDensity], hashes: &[u64]) -> Result<AcquisitionScore, Error> {
        match self {
            ResolvedTarget::Box { lo, hi } => acquisition_o1(preds, &AcqUtility::Box(BoxDomain::new(lo.clone(), hi.clone())?), hashes),
            ResolvedTarget::Quadratic { target, tau } => {
                acquisition_o1(preds, &AcqUtility::Quadratic { target: target.clone(), tau: *tau }, hashes)
            }
            ResolvedTarget::Density { samples, .. } => Ok(acquisition_o2(preds, samples)),
        }
    }

    /// Objective value implied by predictive densities of draws from `p(x | phi)`.
    pub fn predicted_value(&self, preds: &[PredictiveDensity]) -> Result<f64, Error> {
        let n = preds.len() as f64;
        Ok(match self {
            ResolvedTarget::Box { lo, hi } => {
                let k = BoxDomain::new(lo.clone(), hi.clone())?;
                preds.iter().map(|p| prob_in_box(p, &k)).sum::<Result<f64, _>>()? / n
            }
            ResolvedTarget::Quadratic { target, tau } => {
                preds
                    .iter()
                    .map(|p| {
                        (0..target.len())
                            .map(|j| {
                                let c = 1.0 + 2.0 * tau * p.var[j];
                                (-tau * (p.mean[j] - target[j]).powi(2) / c).exp() / c.sqrt()
                            })
                            .product::<f64>()
                    })
                    .sum::<f64>()
                    / n
            }
            ResolvedTarget::Density { samples, .. } => {
                samples
                    .iter()
                    .map(|k| log_mean_exp(&preds.iter().map(|p| p.log_density(k)).collect::<Vec<_>>()))
                    .sum::<f64>()
                    / samples.len() as f64
            }
        })
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Mean log Gaussian-KDE density of `points` over `cloud` (Silverman bandwidth).
pub fn kde_mean_log_density(cloud: &[Vec<f64>], points: &[Vec<f64>]) -> f64 {
    let d = cloud[0].len();
    let n = cloud.len() as f64;
    let factor = (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0));
    let h: Vec<f64> = (0..d)
        .map(|j| {
            let m = cloud.iter().map(|c| c[j]).sum::<f64>() / n;
            let sd = (cloud.iter().map(|c| (c[j] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (sd * factor).max(1e-12)
        })
        .collect();
    let norm: f64 = h.iter().map(|hj| -0.5 * (2.0 * std::f64::consts::PI).ln() - hj.ln()).sum();
    points
        .iter()
        .map(|k| {
            let terms: Vec<f64> = cloud
                .iter()
                .map(|c| norm - 0.5 * (0..d).map(|j| ((k[j] - c[j]) / h[j]).powi(2)).sum::<f64>())
                .collect();
            log_mean_exp(&terms)
        })
        .sum::<f64>()
        / points.len() as f64
}

/// Monte Carlo estimate of the true objective at `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub phi: Vec<f64>,
    pub n: usize,
    pub value: f64,
    pub stderr: f64,
    #[serde(skip)]
    pub kappa: Vec<Vec<f64>>,
}

impl ResolvedTarget {
    /// Objective value and standard error from an oracle property cloud.
    pub fn score_cloud(&self, kappa: &[Vec<f64>]) -> Result<(f64, f64), Error> {
        let n = kappa.len() as f64;
        let mean_se = |u: &[f64]| {
            let m = u.iter().sum::<f64>() / n;
            let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (var / n).sqrt())
        };
        Ok(match self {
            ResolvedTarget::Box { lo, hi } => {
                let k = BoxDomain::new(lo.clone(), hi.clone())?;
                let p = kappa.iter().filter(|y| k.contains(y)).count() as f64 / n;
                (p, (p * (1.0 - p) / n).sqrt())
            }
            ResolvedTarget::Quadratic { target, tau } => {
                let u: Vec<f64> = kappa
                    .iter()
                    .map(|y| (-tau * y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp())
                    .collect();
                mean_se(&u)
            }
            ResolvedTarget::Density { samples, .. } => {
                let full = kde_mean_log_density(kappa, samples);
                // jackknife over the cloud
                let loo: Vec<f64> = (0..kappa.len())
                    .map(|i| {
                        let sub: Vec<Vec<f64>> = kappa.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
                        kde_mean_log_density(&sub, samples)
                    })
                    .collect();
                let m = loo.iter().sum::<f64>() / n;
                let var = (n - 1.0) / n * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>();
                (full, var.sqrt())
            }
        })
    }
}

/// Shared machinery of a configured run.
pub struct Problem {
    pub cfg: RunConfig,
    pub synth: Arc<FieldSynth>,
    pub oracle: Homogenizer,
    pub x0: f64,
    pub arch: Architecture,
    /// Stop with [`Error::Interrupted`] after this many outer-loop stages.
    pub stop_after: Option<usize>,
}

impl Problem {
    pub fn new(cfg: RunConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let synth = FieldSynth::new(cfg.sdf.clone(), SpectralGrid { k: cfg.k, w_max: cfg.sdf.w_max }, cfg.n_p)?;
        let oracle = Homogenizer::new(cfg.n_p, cfg.material.clone())?;
        let x0 = cutoff_from_vf(cfg.vf)?;
        let arch = Architecture::new(cfg.n_p, 2);
        Ok(Self { synth: Arc::new(synth), oracle, x0, arch, cfg, stop_after: None })
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    /// Initial process parameters `phi^(0) ~ N(0, I)`.
    pub fn phi0(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("phi0"));
        (0..self.synth.q()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Labeled ancestral samples, `n` of them, avoiding `exclude`.
    pub fn ancestral(&self, store: &mut DataStore, n: usize, label: &str) -> Result<(), Error> {
        let seed = self.seed(label);
        let xs = ancestral_inputs(&self.synth, self.x0, n, store.hashes(), seed);
        let (xs, ys, failed) = label_all(&self.oracle, self.cfg.case, xs);
        if !failed.is_empty() {
            log::warn!("{} ancestral samples failed to label", failed.len());
        }
        store.append(xs, ys, None, seed, None)
    }

    /// `D^(0)` plus the resolved target.
    pub fn initial_data(&self) -> Result<(DataStore, ResolvedTarget), Error> {
        let mut store = DataStore::new(self.cfg.n_p, 2, self.cfg.case, self.cfg.material.clone());
        store.manifest.config = Some(serde_json::to_value(&self.cfg)?);
        self.ancestral(&mut store, self.cfg.n0, "d0")?;
        let target = resolve_target(&self.cfg.target, &store.ys, self.cfg.s_samples, self.cfg.seed)?;
        Ok((store, target))
    }

    pub fn train_surrogate(&self, store: &DataStore, l: usize) -> Result<(Surrogate, Option<f64>), Error> {
        let cfg = TrainConfig { seed: self.seed(&format!("train/{l}")), ..self.cfg.train.clone() };
        let (s, log) = train(&store.xs, &store.ys, &self.arch, &cfg).map_err(|e| match e {
            crate::surrogate::TrainError::Diverged { epoch, .. } => Error::Numerical(format!("surrogate training diverged at epoch {epoch}")),
            crate::surrogate::TrainError::Other(e) => e,
        })?;
        Ok((s, log.holdout_nll))
    }

    pub fn link(&self, surrogate: Surrogate) -> SurrogateLink {
        SurrogateLink { synth: self.synth.clone(), surrogate: Arc::new(surrogate), x0: self.x0, eps: self.cfg.eps }
    }

    /// Oracle Monte Carlo evaluation with common random numbers across `phi`.
    pub fn evaluate(&self, target: &ResolvedTarget, phi: &[f64], n: usize) -> Result<Evaluation, Error> {
        if n < 2 {
            return Err(Error::Config("evaluation needs at least two samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("evaluate"));
        let xs: Vec<Vec<f64>> = (0..n).map(|_| self.synth.sample_binary(phi, self.x0, &mut rng)).collect::<Result<_, _>>()?;
        let (_, kappa, failed) = label_all(&self.oracle, self.cfg.case, xs);
        if !failed.is_empty() {
            return Err(Error::Numerical(format!("oracle failed on {} evaluation samples", failed.len())));
        }
        let (value, stderr) = target.score_cloud(&kappa)?;
        Ok(Evaluation { phi: phi.to_vec(), n, value, stderr, kappa })
    }

    /// Surrogate estimate of the objective from `N_w` draws of `p(x | phi)`.
    pub fn surrogate_value(&self, surrogate: &Surrogate, target: &ResolvedTarget, phi: &[f64], label: &str) -> Result<f64, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(label));
        let xs: Vec<Vec<f64>> = (0..self.cfg.vbem.n_w)
            .map(|_| self.synth.sample_binary(phi, self.x0, &mut rng))
            .collect::<Result<_, _>>()?;
        target.predicted_value(&surrogate.predict(&xs)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub n_data: usize,
    pub holdout_nll: Option<f64>,
    pub phi: Vec<f64>,
    pub elbo: f64,
    pub elbo_stderr: f64,
    pub iterations: usize,
    pub converged: bool,
    pub temper_t: Option<f64>,
    pub temper_stalled: bool,
    /// Surrogate-predicted objective at this step's optimum.
    pub surrogate_objective: f64,
    pub acquired: usize,
    pub selected_min_alpha: Option<f64>,
    pub rejected_max_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub value: f64,
    pub stderr: f64,
}

impl From<&Evaluation> for EvalSummary {
    fn from(e: &Evaluation) -> Self {
        Self { n: e.n, value: e.value, stderr: e.stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub case: PropertyCase,
    pub target: ResolvedTarget,
    /// Total oracle labels consumed.
    pub budget: usize,
    pub phi0: Vec<f64>,
    pub phi_star: Vec<f64>,
    pub steps: Vec<StepReport>,
    pub initial: EvalSummary,
    pub fin: EvalSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stage {
    Train,
    Optimize,
    Acquire,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    step: usize,
    stage: Stage,
    shards: usize,
    vbem: Option<VbemState>,
    /// Standardization the variational state is expressed in.
    link_stats: Option<Standardizer>,
    holdout_nll: Option<f64>,
    steps: Vec<StepReport>,
}

/// Locations of a run's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }
    pub fn surrogate(&self) -> PathBuf {
        self.root.join("surrogate")
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn write_run_log(dir: &RunDir, steps: usize) -> Result<(), Error> {
    let mut out = String::new();
    for l in 0..steps {
        let trace: Vec<TraceRecord> = read_json(&dir.traces().join(format!("step{l}.json")))?;
        for r in trace {
            let mut v = serde_json::to_value(&r)?;
            v["outer_step"] = Value::from(l);
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
    }
    std::fs::write(dir.root.join("run_log.jsonl"), out)?;
    Ok(())
}

/// Warm start: re-express the property block of `q` in the new standardization.
fn restandardize(state: &mut VbemState, old: &Standardizer, new: &Standardizer, has_kappa: bool) {
    if !has_kappa {
        return;
    }
    let scale: Vec<f64> = old.std.iter().zip(&new.std).map(|(a, b)| a / b).collect();
    let shift: Vec<f64> = (0..old.mean.len()).map(|j| (old.mean[j] - new.mean[j]) / new.std[j]).collect();
    for q in &mut state.qs {
        q.affine_prefix(&scale, &shift);
    }
}

/// Outer loop: `steps` acquisition rounds, each preceded by a surrogate
/// fit and an inner VB-EM solve, followed by a final fit-and-solve.
pub fn outer_loop(
    p: &Problem,
    mut store: DataStore,
    target: &ResolvedTarget,
    steps: usize,
    dir: &RunDir,
    resume: Option<&Path>,
    timing: &mut Vec<(String, f64)>,
) -> Result<(Vec<f64>, DataStore, Vec<StepReport>), Error> {
    std::fs::create_dir_all(dir.traces())?;
    let mut ck = match resume {
        Some(path) => {
            let ck: Checkpoint = read_json(path)?;
            store = DataStore::load(&dir.data())?.prefix_shards(ck.shards)?;
            ck
        }
        None => {
            store.save(&dir.data())?;
            Checkpoint {
                step: 0,
                stage: Stage::Train,
                shards: store.manifest.shards.len(),
                vbem: None,
                link_stats: None,
                holdout_nll: None,
                steps: Vec::new(),
            }
        }
    };
    let save = |ck: &Checkpoint| write_json(&dir.checkpoint(), ck);
    let has_kappa = !matches!(target, ResolvedTarget::Density { .. });
    let mut surrogate = if ck.stage == Stage::Train { None } else { Some(Surrogate::load(&dir.surrogate())?) };
    let mut done_stages = 0;
    while ck.stage != Stage::Done {
        if p.stop_after.is_some_and(|n| done_stages >= n) {
            return Err(Error::Interrupted(format!("stopped before stage {:?} of step {}", ck.stage, ck.step)));
        }
        done_stages += 1;
        let l = ck.step;
        match ck.stage {
            Stage::Train => {
                let t = Instant::now();
                let (s, nll) = p.train_surrogate(&store, l)?;
                timing.push((format!("train/{l}"), t.elapsed().as_secs_f64()));
                s.save(&dir.surrogate())?;
                let link = p.link(s.clone());
                let obj = target.objective(&s.stats)?;
                let vb = Vbem::new(&link, &p.cfg.vbem, &obj)?;
                let state = match ck.vbem.take() {
                    None => vb.init(p.phi0(), p.seed(&format!("vbem/{l}")))?,
                    Some(mut st) => {
                        restandardize(&mut st, ck.link_stats.as_ref().expect("stats accompany state"), &s.stats, has_kappa);
                        st.trace.clear();
                        st.seed = p.seed(&format!("vbem/{l}"));
                        vb.rebind(&mut st)?;
                        st
                    }
                };
                ck.link_stats = Some(s.stats.clone());
                ck.vbem = Some(state);
                ck.holdout_nll = nll;
                ck.stage = Stage::Optimize;
                surrogate = Some(s);
                save(&ck)?;
            }
            Stage::Optimize => {
                let t = Instant::now();
                let s = surrogate.clone().expect("trained");
                let link = p.link(s.clone());
                let obj = target.objective(&s.stats)?;
                let vb = Vbem::new(&link, &p.cfg.vbem, &obj)?;
                let mut state = ck.vbem.take().expect("state present");
                let mut err = None;
                vb.run(&mut state, |st| {
                    if err.is_none() && st.alternation % 10 == 0 {
                        let snap = Checkpoint { vbem: Some(st.clone()), ..ck.clone() };
                        err = save(&snap).err();
                    }
                })?;
                if let Some(e) = err {
                    return Err(e);
                }
                write_json(&dir.traces().join(format!("step{l}.json")), &state.trace)?;
                let last = state.trace.last().cloned();
                let sv = p.surrogate_value(&s, target, &state.phi, &format!("surrogate-value/{l}"))?;
                let ts = state.temper.as_ref();
                ck.steps.push(StepReport {
                    step: l,
                    n_data: store.len(),
                    holdout_nll: ck.holdout_nll,
                    phi: state.phi.clone(),
                    elbo: last.as_ref().map_or(f64::NAN, |r| r.elbo),
                    elbo_stderr: last.as_ref().map_or(f64::NAN, |r| r.stderr),
                    iterations: state.trace.len(),
                    converged: state.converged,
                    temper_t: ts.map(|t| t.t),
                    temper_stalled: ts.is_some_and(|t| t.stalled),
                    surrogate_objective: sv,
                    acquired: 0,
                    selected_min_alpha: None,
                    rejected_max_alpha: None,
                });
                ck.vbem = Some(state);
                ck.stage = if l < steps { Stage::Acquire } else { Stage::Done };
                timing.push((format!("optimize/{l}"), t.elapsed().as_secs_f64()));
                save(&ck)?;
            }
            Stage::Acquire => {
                let t = Instant::now();
                let s = surrogate.as_ref().expect("trained");
                let state = ck.vbem.as_ref().expect("state present");
                let obj = target.objective(&s.stats)?;
                let seed = pool_seed(p.cfg.seed, l);
                let pool = propose_pool(&p.synth, &obj, &state.qs, 2, &state.phi, p.x0, p.cfg.n_pool, store.hashes(), seed)?;
                let hashes: Vec<u64> = pool.iter().map(|x| grid_hash(x)).collect();
                let preds = s.predict(&pool)?;
                let score = target.acquisition(&preds, &hashes)?;
                let n_add = p.cfg.n_add.min(pool.len());
                let (xs, ys) = crate::active::select_and_label(&pool, &score.alpha, n_add, &p.oracle, p.cfg.case)?;
                let order = rank(&score.alpha, &hashes);
                let acquired = xs.len();
                store.append(xs, ys, Some(l), seed, Some(state.phi.clone()))?;
                store.save(&dir.data())?;
                let rep = ck.steps.last_mut().expect("optimize precedes acquire");
                rep.acquired = acquired;
                rep.selected_min_alpha = order.get(n_add.saturating_sub(1)).map(|&i| score.alpha[i]);
                rep.rejected_max_alpha = order.get(n_add).map(|&i| score.alpha[i]);
                ck.shards = store.manifest.shards.len();
                ck.step += 1;
                ck.stage = Stage::Train;
                timing.push((format!("acquire/{l}"), t.elapsed().as_secs_f64()));
                save(&ck)?;
            }
            Stage::Done => unreachable!(),
        }
    }
    write_run_log(dir, ck.steps.len())?;
    let phi = ck.vbem.as_ref().expect("final state").phi.clone();
    Ok((phi, store, ck.steps))
}

/// Writes the property cloud as `kappa_1,kappa_2` rows.
pub fn write_cloud(path: &Path, kappa: &[Vec<f64>]) -> Result<(), Error> {
    let mut s = String::from("kappa_1,kappa_2\n");
    for k in kappa {
        s.push_str(&format!("{:e},{:e}\n", k[0], k[1]));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_timing(dir: &Path, timing: &[(String, f64)]) -> Result<(), Error> {
    let v: serde_json::Map<String, Value> = timing.iter().map(|(k, t)| (k.clone(), Value::from(*t))).collect();
    write_json(&dir.join("timing.json"), &v)
}

/// Command: `D^(0)` and the resolved target under `cfg.out`.
pub fn generate_data(p: &Problem) -> Result<(DataStore, ResolvedTarget), Error> {
    let (store, target) = p.initial_data()?;
    let out = &p.cfg.out;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &p.cfg)?;
    store.save(&out.join("data"))?;
    write_json(&out.join("target.json"), &target)?;
    Ok((store, target))
}

fn initial_or_generate(p: &Problem) -> Result<(DataStore, ResolvedTarget), Error> {
    let out = &p.cfg.out;
    if out.join("data/manifest.json").exists() && out.join("target.json").exists() {
        let store = DataStore::load(&out.join("data"))?;
        let target = read_json(&out.join("target.json"))?;
        Ok((store, target))
    } else {
        generate_data(p)
    }
}

fn finish_run(p: &Problem, dir: &RunDir, mode: &str, target: ResolvedTarget, budget: usize, phi: Vec<f64>, steps: Vec<StepReport>, timing: &mut Vec<(String, f64)>) -> Result<RunReport, Error> {
    let t = Instant::now();
    let phi0 = p.phi0();
    let initial = p.evaluate(&target, &phi0, p.cfg.eval_samples)?;
    let fin = p.evaluate(&target, &phi, p.cfg.eval_samples)?;
    timing.push(("evaluate".into(), t.elapsed().as_secs_f64()));
    write_cloud(&dir.root.join("kappa_initial.csv"), &initial.kappa)?;
    write_cloud(&dir.root.join("kappa_final.csv"), &fin.kappa)?;
    let report = RunReport {
        mode: mode.into(),
        seed: p.cfg.seed,
        case: p.cfg.case,
        target,
        budget,
        phi0,
        phi_star: phi,
        steps,
        initial: (&initial).into(),
        fin: (&fin).into(),
    };
    write_json(&dir.report(), &report)?;
    write_timing(&dir.root, timing)?;
    write_comparison(&p.cfg.out)?;
    Ok(report)
}

/// Command: objective-aware optimization under `cfg.out/active`.
pub fn optimize(p: &Problem, resume: Option<&Path>) -> Result<RunReport, Error> {
    let (store, target) = initial_or_generate(p)?;
    let dir = RunDir { root: p.cfg.out.join("active") };
    std::fs::create_dir_all(&dir.root)?;
    write_json(&dir.root.join("config.json"), &p.cfg)?;
    let mut timing = Vec::new();
    let (phi, store, steps) = outer_loop(p, store, &target, p.cfg.steps, &dir, resume, &mut timing)?;
    finish_run(p, &dir, "active", target, store.len(), phi, steps, &mut timing)
}

/// Command: same label budget drawn ancestrally, then a single fit-and-solve.
pub fn baseline(p: &Problem, resume: Option<&Path>) -> Result<RunReport, Error> {
    let (mut store, target) = initial_or_generate(p)?;
    let dir = RunDir { root: p.cfg.out.join("baseline") };
    std::fs::create_dir_all(&dir.root)?;
    write_json(&dir.root.join("config.json"), &p.cfg)?;
    let mut timing = Vec::new();
    if resume.is_none() {
        let t = Instant::now();
        p.ancestral(&mut store, p.cfg.n_add * p.cfg.steps, "baseline-extra")?;
        timing.push(("label".into(), t.elapsed().as_secs_f64()));
    }
    let (phi, store, steps) = outer_loop(p, store, &target, 0, &dir, resume, &mut timing)?;
    let budget = store.len();
    let expected = p.cfg.n0 + p.cfg.n_add * p.cfg.steps;
    if budget != expected {
        log::warn!("baseline budget {budget} differs from {expected}");
    }
    finish_run(p, &dir, "baseline", target, budget, phi, steps, &mut timing)
}

/// Paired active/baseline table once both reports exist.
fn write_comparison(out: &Path) -> Result<(), Error> {
    let (a, b) = (out.join("active/report.json"), out.join("baseline/report.json"));
    if !(a.exists() && b.exists()) {
        return Ok(());
    }
    let a: RunReport = read_json(&a)?;
    let b: RunReport = read_json(&b)?;
    let s = format!(
        "seed,budget_active,budget_baseline,initial,initial_se,active,active_se,baseline,baseline_se\n{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
        a.seed, a.budget, b.budget, a.initial.value, a.initial.stderr, a.fin.value, a.fin.stderr, b.fin.value, b.fin.stderr
    );
    std::fs::write(out.join("comparison.csv"), s)?;
    Ok(())
}

/// Command: oracle evaluation of `phi` (default: the active optimum) under `cfg.out/evaluate`.
pub fn evaluate(p: &Problem, phi: Option<Vec<f64>>, n: usize) -> Result<Evaluation, Error> {
    let out = &p.cfg.out;
    let target: ResolvedTarget = read_json(&out.join("target.json"))
        .map_err(|e| Error::Config(format!("no resolved target under {}: {e}", out.display())))?;
    let phi = match phi {
        Some(v) => v,
        None => read_json::<RunReport>(&out.join("active/report.json"))
            .map_err(|e| Error::Config(format!("no phi given and no active report: {e}")))?
            .phi_star,
    };
    if phi.len() != p.synth.q() {
        return Err(Error::Config(format!("phi has length {}, expected {}", phi.len(), p.synth.q())));
    }
    let ev = p.evaluate(&target, &phi, n)?;
    let dir = out.join("evaluate");
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("evaluation.json"), &ev)?;
    write_cloud(&dir.join("kappa.csv"), &ev.kappa)?;
    Ok(ev)
}

/// Command: plot-ready series from a run directory (the directory holding `report.json`).
pub fn export_plots(run: &Path) -> Result<Vec<PathBuf>, Error> {
    let needed = ["report.json", "run_log.jsonl", "kappa_final.csv", "kappa_initial.csv"];
    let missing: Vec<&str> = needed.iter().copied().filter(|f| !run.join(f).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing inputs in {}: {}", run.display(), missing.join(", "))));
    }
    let report: RunReport = read_json(&run.join("report.json"))?;
    let out = run.join("plots");
    std::fs::create_dir_all(&out)?;

    let mut elbo = String::from("outer_step,iter,step,elbo,stderr,temper_t,beta\n");
    for line in std::fs::read_to_string(run.join("run_log.jsonl"))?.lines() {
        let v: Value = serde_json::from_str(line)?;
        let f = |k: &str| v[k].as_f64().map_or(String::new(), |x| format!("{x:e}"));
        elbo.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v["outer_step"],
            v["iter"],
            v["step"].as_str().unwrap_or(""),
            f("elbo"),
            f("stderr"),
            f("temper_t"),
            f("beta")
        ));
    }
    let mut budget = String::from("step,n_data,surrogate_objective,elbo\n");
    for s in &report.steps {
        budget.push_str(&format!("{},{},{:e},{:e}\n", s.step, s.n_data, s.surrogate_objective, s.elbo));
    }
    let mut scatter = String::from("which,kappa_1,kappa_2\n");
    for (tag, file) in [("initial", "kappa_initial.csv"), ("final", "kappa_final.csv")] {
        for line in std::fs::read_to_string(run.join(file))?.lines().skip(1) {
            scatter.push_str(&format!("{tag},{line}\n"));
        }
    }
    let files = [
        (out.join("elbo_trace.csv"), elbo),
        (out.join("objective_vs_budget.csv"), budget),
        (out.join("kappa_scatter.csv"), scatter),
    ];
    let mut written = Vec::new();
    for (path, body) in files {
        std::fs::write(&path, body)?;
        written.push(path);
    }
    let tpath = out.join("target.json");
    write_json(&tpath, &report.target)?;
    written.push(tpath);
    Ok(written)
}
