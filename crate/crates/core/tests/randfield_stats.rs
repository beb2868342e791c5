use pspinv::randfield::*;
use pspinv::tensorad::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn synth(n_p: usize, k: usize) -> FieldSynth {
    FieldSynth::new(SdfConfig::new(36, 65.0, 12.0).unwrap(), SpectralGrid { k, w_max: 65.0 }, n_p).unwrap()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn pixel_variance_is_one() {
    let s = synth(16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let phi = ProcessParams::sample(36, &mut rng).0;
    let pixels = [0usize, 37, 120, 201, 255];
    let mut vals = Vec::new();
    for _ in 0..2000 {
        let x = s.synthesize(&phi, &normals(&mut rng, s.d_psi())).unwrap();
        vals.extend(pixels.iter().map(|&p| x[p]));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(vals.len() >= 10_000);
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn autocovariance_matches_discrete_spectrum() {
    let n_p = 16;
    let s = synth(n_p, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let phi = ProcessParams::sample(36, &mut rng).0;
    let lags: [(usize, usize); 5] = [(1, 0), (0, 1), (1, 1), (2, 0), (3, 2)];
    let fields = 1500;
    let mut per_field = vec![Vec::with_capacity(fields); lags.len()];
    for _ in 0..fields {
        let x = s.synthesize(&phi, &normals(&mut rng, s.d_psi())).unwrap();
        for (l, &(dj, di)) in lags.iter().enumerate() {
            // interior pairs only: the spectral sum is not periodic on the pixel grid
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for i in 0..n_p - di {
                for j in 0..n_p - dj {
                    acc += x[i * n_p + j] * x[(i + di) * n_p + j + dj];
                    cnt += 1.0;
                }
            }
            per_field[l].push(acc / cnt);
        }
    }
    for (l, &(dj, di)) in lags.iter().enumerate() {
        let v = &per_field[l];
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let tau = [dj as f64 / n_p as f64, di as f64 / n_p as f64];
        let exact = s.covariance(&phi, tau);
        assert!((m - exact).abs() < 3.0 * sd / n.sqrt(), "lag {:?}: {m} vs {exact}", (dj, di));
    }
}

#[test]
fn cutoff_matches_bisection_oracle() {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < 0.7 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x0 = cutoff_from_vf(0.3).unwrap();
    assert!((x0 - 0.5 * (lo + hi)).abs() < 1e-9);
    assert!((x0 - 0.524_400_5).abs() < 1e-6);
}

#[test]
fn volume_fraction_hits_target() {
    let s = synth(32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &vf in &[0.3, 0.5] {
        let x0 = cutoff_from_vf(vf).unwrap();
        let mut ones = 0.0;
        let mut total = 0.0;
        for _ in 0..100 {
            let phi = ProcessParams::sample(36, &mut rng).0;
            let x = s.sample_binary(&phi, x0, &mut rng).unwrap();
            ones += x.iter().sum::<f64>();
            total += x.len() as f64;
        }
        let got = ones / total;
        assert!((got - vf).abs() < 0.02, "vf {vf}: got {got}");
    }
}

#[test]
fn smooth_rounds_to_hard() {
    let s = synth(32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let phi = ProcessParams::sample(36, &mut rng).0;
    let x0 = cutoff_from_vf(0.5).unwrap();
    for _ in 0..10 {
        let xg = s.synthesize(&phi, &normals(&mut rng, s.d_psi())).unwrap();
        let soft = smooth_threshold(&xg, x0, 25.0);
        let hard = hard_threshold(&xg, x0);
        for i in 0..xg.len() {
            if (xg[i] - x0).abs() < 1e-6 {
                continue;
            }
            assert_eq!(if soft[i] > 0.5 { 1.0 } else { 0.0 }, hard[i]);
        }
    }
}

#[test]
fn pixel_marginals_are_homogeneous() {
    let s = synth(16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let phi = ProcessParams::sample(36, &mut rng).0;
    let n = 2000;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let x = s.synthesize(&phi, &normals(&mut rng, s.d_psi())).unwrap();
        a.push(x[0]);
        b.push(x[7 * 16 + 11]);
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // two-sample Kolmogorov-Smirnov statistic
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < n {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 - j as f64).abs() / n as f64);
    }
    let crit = 1.63 * (2.0 / n as f64).sqrt();
    assert!(d < crit, "KS {d} vs {crit}");
}

#[test]
fn smooth_microstructure_gradient_matches_finite_differences() {
    let s = synth(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let phi = ProcessParams::sample(36, &mut rng).0;
    let psi = normals(&mut rng, 2 * s.d_psi());
    let x0 = 0.2;
    let f = |phi: &[f64], psi: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(phi.to_vec()));
        let z = g.param(Tensor::new(&[2, s.d_psi()], psi.to_vec()).unwrap());
        let x = s.smooth_microstructure_graph(&mut g, p, z, x0, 25.0).unwrap();
        let m = g.mean(x);
        let v = g.value(m).item().unwrap();
        let gr = g.backward(m).unwrap();
        (v, gr.flat(&g, p), gr.flat(&g, z))
    };
    let (_, gphi, gpsi) = f(&phi, &psi);
    let h = 1e-5;
    let close = |an: f64, fd: f64| (an - fd).abs() <= 1e-7 + 1e-3 * fd.abs();
    for i in 0..phi.len() {
        let mut p = phi.clone();
        p[i] += h;
        let fp = f(&p, &psi).0;
        p[i] -= 2.0 * h;
        let fm = f(&p, &psi).0;
        let fd = (fp - fm) / (2.0 * h);
        assert!(close(gphi[i], fd), "phi[{i}]: {} vs {fd}", gphi[i]);
    }
    for i in (0..psi.len()).step_by(3) {
        let mut q = psi.clone();
        q[i] += h;
        let fp = f(&phi, &q).0;
        q[i] -= 2.0 * h;
        let fm = f(&phi, &q).0;
        let fd = (fp - fm) / (2.0 * h);
        assert!(close(gpsi[i], fd), "psi[{i}]: {} vs {fd}", gpsi[i]);
    }
}

#[test]
fn microstructure_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Microstructure::binary(2, vec![1.0, 0.0, 0.0, 1.0]);
    m.vf = 0.5;
    m.x0 = 0.0;
    m.seed = Some(42);
    let stem = dir.path().join("x0001");
    m.write(&stem).unwrap();
    assert_eq!(std::fs::read(stem.with_extension("bin")).unwrap().len(), 32);
    assert_eq!(Microstructure::read(&stem).unwrap(), m);
}

proptest! {
    #[test]
    fn weights_on_simplex(phi in prop::collection::vec(-30.0f64..30.0, 1..120)) {
        let g = sdf_weights(&phi);
        prop_assert!(g.iter().all(|&v| v > 0.0));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sdf_nonnegative(phi in prop::collection::vec(-5.0f64..5.0, 36), w1 in 0.0f64..65.0, w2 in 0.0f64..65.0) {
        let cfg = SdfConfig::new(36, 65.0, 12.0).unwrap();
        prop_assert!(sdf_eval(&cfg, &sdf_weights(&phi), [w1, w2]) >= 0.0);
    }

    #[test]
    fn phase_in_range(t in -40.0f64..40.0) {
        let p = phase_transform(t);
        prop_assert!((0.0..=2.0 * std::f64::consts::PI).contains(&p));
    }

    #[test]
    fn smooth_threshold_in_unit_interval(x in -10.0f64..10.0, x0 in -2.0f64..2.0) {
        let v = smooth_threshold(&[x], x0, 25.0)[0];
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
