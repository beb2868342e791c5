use pspinv::homog::*;
use pspinv::randfield::{cutoff_from_vf, FieldSynth, Microstructure, ProcessParams, SdfConfig, SpectralGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Layers stacked along s2: phase depends on the row only.
fn horizontal_laminate(n: usize) -> Vec<f64> {
    (0..n * n).map(|k| if k / n < n / 2 { 1.0 } else { 0.0 }).collect()
}

fn random_fields(n_p: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let s = FieldSynth::new(SdfConfig::new(36, 65.0, 12.0).unwrap(), SpectralGrid { k: 16, w_max: 65.0 }, n_p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = cutoff_from_vf(0.5).unwrap();
    (0..count)
        .map(|_| {
            let phi = ProcessParams::sample(36, &mut rng).0;
            s.sample_binary(&phi, x0, &mut rng).unwrap()
        })
        .collect()
}

fn rotate(n: usize, x: &[f64]) -> Vec<f64> {
    Microstructure::binary(n, x.to_vec()).rotated().values
}

/// Effective stiffness of a stack of layers with normal e2 (equal thickness fractions).
fn laminate_stiffness_oracle(layers: &[([[f64; 3]; 3], f64)]) -> [[f64; 3]; 3] {
    // parallel component {11}, normal components {22, 12}
    let inv2 = |m: [[f64; 2]; 2]| {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
    };
    let mut nn_inv = [[0.0; 2]; 2];
    let mut nn_inv_np = [0.0; 2];
    let mut pn_nn_inv = [0.0; 2];
    let mut schur = 0.0;
    for (c, w) in layers {
        let nn = [[c[1][1], c[1][2]], [c[2][1], c[2][2]]];
        let np = [c[1][0], c[2][0]];
        let pn = [c[0][1], c[0][2]];
        let ni = inv2(nn);
        let ni_np = [ni[0][0] * np[0] + ni[0][1] * np[1], ni[1][0] * np[0] + ni[1][1] * np[1]];
        let pn_ni = [pn[0] * ni[0][0] + pn[1] * ni[1][0], pn[0] * ni[0][1] + pn[1] * ni[1][1]];
        for r in 0..2 {
            for k in 0..2 {
                nn_inv[r][k] += w * ni[r][k];
            }
            nn_inv_np[r] += w * ni_np[r];
            pn_nn_inv[r] += w * pn_ni[r];
        }
        schur += w * (c[0][0] - pn[0] * ni_np[0] - pn[1] * ni_np[1]);
    }
    let eff_nn = inv2(nn_inv);
    let eff_np = [
        eff_nn[0][0] * nn_inv_np[0] + eff_nn[0][1] * nn_inv_np[1],
        eff_nn[1][0] * nn_inv_np[0] + eff_nn[1][1] * nn_inv_np[1],
    ];
    let eff_pp = schur + pn_nn_inv[0] * eff_np[0] + pn_nn_inv[1] * eff_np[1];
    [
        [eff_pp, eff_np[0], eff_np[1]],
        [eff_np[0], eff_nn[0][0], eff_nn[0][1]],
        [eff_np[1], eff_nn[1][0], eff_nn[1][1]],
    ]
}

#[test]
fn homogeneous_media_reproduce_phase_tensors() {
    let mat = MaterialConfig::default();
    let h = Homogenizer::new(8, mat.clone()).unwrap();
    for phase in 0..2 {
        let x = vec![phase as f64; 64];
        let a = h.effective_conductivity(&x).unwrap();
        let c = h.effective_elasticity(&x).unwrap();
        let ap = mat.conductivity(phase);
        let cp = mat.stiffness(phase);
        assert!(rel(a[0][0], ap) < 1e-8 && rel(a[1][1], ap) < 1e-8);
        assert!(a[0][1].abs() < 1e-8 * ap);
        for r in 0..3 {
            for k in 0..3 {
                assert!((c[r][k] - cp[r][k]).abs() <= 1e-8 * cp[0][0], "C[{r}][{k}]");
            }
        }
    }
    let k0 = h.properties_case1(&[0.0; 64]).unwrap();
    assert!(rel(k0[0], 1.0) < 1e-8 && rel(k0[1], mat.stiffness(0)[0][0]) < 1e-8);
    let k1 = h.properties_case2(&[1.0; 64]).unwrap();
    assert!(rel(k1[0], 50.0) < 1e-8 && rel(k1[1], 50.0) < 1e-8);
}

#[test]
fn conductivity_laminate_is_mesh_exact() {
    for n in [2, 4, 8, 32] {
        let h = Homogenizer::new(n, MaterialConfig::default()).unwrap();
        let x = horizontal_laminate(n);
        let k = h.properties_case2(&x).unwrap();
        assert!(rel(k[0], 25.5) < 1e-6, "n={n}: {}", k[0]);
        assert!(rel(k[1], 100.0 / 51.0) < 1e-6, "n={n}: {}", k[1]);
        let kr = h.properties_case2(&rotate(n, &x)).unwrap();
        assert!(rel(kr[0], 100.0 / 51.0) < 1e-6 && rel(kr[1], 25.5) < 1e-6);
    }
}

#[test]
fn elastic_laminate_matches_layered_medium_formula() {
    let mat = MaterialConfig::default();
    let oracle = laminate_stiffness_oracle(&[(mat.stiffness(0), 0.5), (mat.stiffness(1), 0.5)]);
    let n = 16;
    let h = Homogenizer::new(n, mat).unwrap();
    let x = horizontal_laminate(n);
    let c = h.effective_elasticity(&x).unwrap();
    for r in 0..3 {
        for k in 0..3 {
            assert!((c[r][k] - oracle[r][k]).abs() <= 1e-6 * oracle[0][0], "C[{r}][{k}] {} vs {}", c[r][k], oracle[r][k]);
        }
    }
    // vertical laminate: the same stack seen after a quarter turn
    let cv = h.effective_elasticity(&rotate(n, &x)).unwrap();
    assert!(rel(cv[0][0], oracle[1][1]) < 1e-6);
    assert!(rel(cv[1][1], oracle[0][0]) < 1e-6);
    assert!(rel(cv[2][2], oracle[2][2]) < 1e-6);
}

fn checkerboard(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|k| if ((k / n) < n / 2) ^ ((k % n) < n / 2) { 1.0 } else { 0.0 })
        .collect()
}

#[test]
fn checkerboard_converges_to_duality_value_from_above() {
    let exact = 50f64.sqrt();
    let mut seq = Vec::new();
    for n in [16, 32, 64] {
        let h = Homogenizer::new(n, MaterialConfig::default()).unwrap();
        let a = h.effective_conductivity(&checkerboard(n)).unwrap();
        assert!(rel(a[0][0], a[1][1]) < 1e-10);
        assert!(a[0][0] > exact);
        seq.push(a[0][0]);
    }
    assert!(seq[0] > seq[1] && seq[1] > seq[2]);
    // Aitken delta-squared limit of the refinement sequence
    let (d1, d2) = (seq[1] - seq[0], seq[2] - seq[1]);
    let limit = seq[2] - d2 * d2 / (d2 - d1);
    assert!(rel(limit, exact) < 0.1, "extrapolated {limit}, raw {seq:?}");
}

#[test]
fn solver_diagnostics_symmetry_and_bounds() {
    let mat = MaterialConfig::default();
    let n = 16;
    let h = Homogenizer::new(n, mat.clone()).unwrap();
    for x in random_fields(n, 12, 21) {
        let vf = x.iter().sum::<f64>() / x.len() as f64;
        let b = bounds(&mat, vf);
        let th = h.solve_conductivity(&x).unwrap();
        let el = h.solve_elasticity(&x).unwrap();
        for s in [&th, &el] {
            assert!(s.residual.iter().all(|&r| r < 1e-10), "{:?}", s.residual);
            assert!(s.hill_error.iter().all(|&e| e < 1e-8), "{:?}", s.hill_error);
            let scale = s.effective[0][0].abs();
            for m in &s.multiplier {
                assert!(m.iter().all(|v| v.abs() < 1e-10 * scale.max(1.0)));
            }
            for v in &s.fluctuations {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                assert!(mean.abs() < 1e-12);
            }
        }
        let a = h.effective_conductivity(&x).unwrap();
        assert!((a[0][1] - a[1][0]).abs() < 1e-10 * a[0][0]);
        let ev = eig_sym2(a);
        assert!(ev[0] >= b.a_reuss * (1.0 - 1e-10) && ev[1] <= b.a_voigt * (1.0 + 1e-10));
        let c = h.effective_elasticity(&x).unwrap();
        let mut lo = [[0.0; 3]; 3];
        let mut hi = [[0.0; 3]; 3];
        for r in 0..3 {
            for k in 0..3 {
                assert!((c[r][k] - c[k][r]).abs() < 1e-10 * c[0][0]);
                lo[r][k] = c[r][k] - b.c_reuss[r][k];
                hi[r][k] = b.c_voigt[r][k] - c[r][k];
            }
        }
        assert!(min_eig_sym3(c) > 0.0);
        assert!(min_eig_sym3(lo) > -1e-10 * c[0][0]);
        assert!(min_eig_sym3(hi) > -1e-10 * c[0][0]);
    }
}

#[test]
fn quarter_turn_equivariance() {
    let n = 16;
    let h = Homogenizer::new(n, MaterialConfig::default()).unwrap();
    for x in random_fields(n, 5, 22) {
        let xr = rotate(n, &x);
        let a = h.effective_conductivity(&x).unwrap();
        let ar = h.effective_conductivity(&xr).unwrap();
        assert!((ar[0][0] - a[1][1]).abs() < 1e-8 * a[0][0]);
        assert!((ar[1][1] - a[0][0]).abs() < 1e-8 * a[0][0]);
        assert!((ar[0][1] + a[1][0]).abs() < 1e-8 * a[0][0]);
        let k = h.properties_case1(&x).unwrap();
        let kr = h.properties_case1(&xr).unwrap();
        assert!(rel(kr[1], k[1]) < 1e-8);
    }
}

#[test]
fn batch_labels_match_sequential() {
    let n = 16;
    let h = Homogenizer::new(n, MaterialConfig::default()).unwrap();
    let xs = random_fields(n, 6, 23);
    let batch = h.label_batch(PropertyCase::Case1, &xs);
    for (x, b) in xs.iter().zip(batch) {
        assert_eq!(b.unwrap(), h.properties_case1(x).unwrap());
    }
}

#[test]
fn invalid_material_rejected() {
    let mat = MaterialConfig { nu: 0.5, ..MaterialConfig::default() };
    assert!(Homogenizer::new(8, mat).is_err());
}
