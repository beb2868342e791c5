use std::sync::Arc;

use pspinv::randfield::{FieldSynth, SdfConfig, SpectralGrid};
use pspinv::surrogate::{Architecture, Standardizer, Surrogate};
use pspinv::vbem::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_link() -> SurrogateLink {
    let synth = FieldSynth::new(SdfConfig::new(4, 65.0, 12.0).unwrap(), SpectralGrid { k: 2, w_max: 65.0 }, 16).unwrap();
    let sur = Surrogate::init(Architecture::new(16, 2), Standardizer::identity(2), 3).unwrap();
    SurrogateLink { synth: Arc::new(synth), surrogate: Arc::new(sur), x0: 0.0, eps: 0.3 }
}

fn random_q(d: usize, m: usize, rng: &mut ChaCha8Rng) -> LowRankGaussian {
    LowRankGaussian {
        mu: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        log_d: (0..d).map(|_| rng.random_range(-1.0..0.0)).collect(),
        l: (0..d * m).map(|_| rng.random_range(-0.3..0.3)).collect(),
        rank: m,
    }
}

fn fd(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-6;
    (f(h) - f(-h)) / (2.0 * h)
}

fn close(fd: f64, ad: f64) -> bool {
    (fd - ad).abs() <= 1e-4 * ad.abs().max(1e-2)
}

#[test]
fn o1_gradients_through_field_and_network() {
    let link = small_link();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d_z = 2 + link.d_latent();
    let q = random_q(d_z, 3, &mut rng);
    let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = Noise::draw(&mut rng, 8, d_z, 3);
    let util = Utility::SmoothBox { lo: vec![-0.5, f64::NEG_INFINITY], hi: vec![0.5, 0.2], beta: 4.0 };
    let ev = elbo_o1(&link, &q, &phi, &util, &noise, Track::Both).unwrap();
    let val = |q: &LowRankGaussian, p: &[f64]| elbo_o1(&link, q, p, &util, &noise, Track::None).unwrap().value;
    for i in 0..4 {
        let g = fd(|h| {
            let mut p = phi.clone();
            p[i] += h;
            val(&q, &p)
        });
        assert!(close(g, ev.grad_phi[i]), "phi {i}: {g} vs {}", ev.grad_phi[i]);
    }
    for i in (0..d_z).step_by(3) {
        for block in 0..2 {
            let g = fd(|h| {
                let mut p = q.clone();
                [&mut p.mu, &mut p.log_d][block][i] += h;
                val(&p, &phi)
            });
            assert!(close(g, ev.grad_q[0][block][i]), "block {block} idx {i}: {g} vs {}", ev.grad_q[0][block][i]);
        }
    }
    for i in (0..q.l.len()).step_by(5) {
        let g = fd(|h| {
            let mut p = q.clone();
            p.l[i] += h;
            val(&p, &phi)
        });
        assert!(close(g, ev.grad_q[0][2][i]), "L idx {i}: {g} vs {}", ev.grad_q[0][2][i]);
    }
}

#[test]
fn o2_gradients_through_field_and_network() {
    let link = small_link();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = link.d_latent();
    let qs: Vec<LowRankGaussian> = (0..3).map(|_| random_q(d, 2, &mut rng)).collect();
    let samples = vec![vec![0.1, -0.3], vec![0.4, 0.2], vec![-0.2, 0.0]];
    let noises: Vec<Noise> = (0..3).map(|_| Noise::draw(&mut rng, 6, d, 2)).collect();
    let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let all = [0, 1, 2];
    let ev = elbo_o2(&link, &qs, &phi, &samples, &all, &noises, Track::Both).unwrap();
    let val = |qs: &[LowRankGaussian], p: &[f64]| elbo_o2(&link, qs, p, &samples, &all, &noises, Track::None).unwrap().value;
    for i in 0..4 {
        let g = fd(|h| {
            let mut p = phi.clone();
            p[i] += h;
            val(&qs, &p)
        });
        assert!(close(g, ev.grad_phi[i]), "phi {i}: {g} vs {}", ev.grad_phi[i]);
    }
    for s in 0..3 {
        for i in (0..d).step_by(4) {
            let g = fd(|h| {
                let mut p = qs.clone();
                p[s].mu[i] += h;
                val(&p, &phi)
            });
            assert!(close(g, ev.grad_q[s][0][i]), "factor {s} mu {i}: {g} vs {}", ev.grad_q[s][0][i]);
        }
    }
}

#[test]
fn box_run_keeps_a_finite_trace_and_temper_schedule() {
    let link = small_link();
    let cfg = VbemConfig { rank: 4, n_mc: 8, n_w: 64, k_e: 10, k_m: 5, max_iters: 60, ..VbemConfig::default() };
    let obj = Objective::Box(pspinv::surrogate::BoxDomain::new(vec![0.0, 0.0], vec![0.3, 0.3]).unwrap());
    let vb = Vbem::new(&link, &cfg, &obj).unwrap();
    let mut st = vb.init(vec![0.0; 4], 5).unwrap();
    let mut ts = Vec::new();
    vb.run(&mut st, |s| ts.push(s.temper.as_ref().unwrap().t)).unwrap();
    assert_eq!(st.trace.len(), 60);
    assert!(st.trace.iter().all(|r| r.elbo.is_finite()));
    assert!(ts.windows(2).all(|w| w[1] >= w[0]));
}
