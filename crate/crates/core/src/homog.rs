//! Structure-property oracle: periodic FEM homogenization of binary pixel
//! microstructures for effective conductivity and plane elasticity.
//!
//! One bilinear quadrilateral per pixel on the unit square, periodic
//! fluctuations by node identification, one node pinned to remove the
//! constant mode and the solution shifted to zero mean afterwards.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneModel {
    Strain,
    Stress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub e0: f64,
    pub e1: f64,
    pub nu: f64,
    pub a0: f64,
    pub a1: f64,
    pub plane: PlaneModel,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            e0: 1.0,
            e1: 50.0,
            nu: 0.3,
            a0: 1.0,
            a1: 50.0,
            plane: PlaneModel::Strain,
        }
    }
}

impl MaterialConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.e0 > 0.0 && self.e1 > 0.0 && self.a0 > 0.0 && self.a1 > 0.0) {
            return Err(Error::Config("moduli and conductivities must be positive".into()));
        }
        if !(self.nu > -1.0 && self.nu < 0.5) {
            return Err(Error::Config(format!("Poisson ratio {} outside (-1, 0.5)", self.nu)));
        }
        Ok(())
    }

    pub fn conductivity(&self, phase: usize) -> f64 {
        if phase == 0 {
            self.a0
        } else {
            self.a1
        }
    }

    /// Isotropic 3x3 Voigt stiffness with engineering shear strain.
    pub fn stiffness(&self, phase: usize) -> [[f64; 3]; 3] {
        let e = if phase == 0 { self.e0 } else { self.e1 };
        let nu = self.nu;
        match self.plane {
            PlaneModel::Strain => {
                let f = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
                [
                    [f * (1.0 - nu), f * nu, 0.0],
                    [f * nu, f * (1.0 - nu), 0.0],
                    [0.0, 0.0, f * (1.0 - 2.0 * nu) / 2.0],
                ]
            }
            PlaneModel::Stress => {
                let f = e / (1.0 - nu * nu);
                [[f, f * nu, 0.0], [f * nu, f, 0.0], [0.0, 0.0, f * (1.0 - nu) / 2.0]]
            }
        }
    }
}

/// Which property pair the oracle reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyCase {
    /// `([a]_11, ([C]_1111 + [C]_2222) / 2)`.
    Case1,
    /// `([a]_11, [a]_22)`.
    Case2,
}

/// N_p x N_p periodic mesh; element `(i, j)` covers row `i` along `s2` and column `j` along `s1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicMesh {
    pub n: usize,
}

impl PeriodicMesh {
    pub fn node(&self, i: usize, j: usize) -> usize {
        (i % self.n) * self.n + (j % self.n)
    }

    /// Counter-clockwise element nodes starting at the lower-left corner.
    pub fn element_nodes(&self, i: usize, j: usize) -> [usize; 4] {
        [
            self.node(i, j),
            self.node(i, j + 1),
            self.node(i + 1, j + 1),
            self.node(i + 1, j),
        ]
    }

    pub fn node_count(&self) -> usize {
        self.n * self.n
    }

    pub fn element_area(&self) -> f64 {
        1.0 / (self.n * self.n) as f64
    }
}

/// 1-D folded order `0, n-1, 1, n-2, ...` keeping periodic neighbours close.
fn fold_positions(n: usize) -> Vec<usize> {
    let mut pos = vec![0; n];
    let (mut lo, mut hi, mut k) = (0usize, n, 0usize);
    while lo < hi {
        pos[lo] = k;
        k += 1;
        lo += 1;
        if lo < hi {
            hi -= 1;
            pos[hi] = k;
            k += 1;
        }
    }
    pos
}

/// Symmetric positive definite band matrix, lower band stored row by row.
#[derive(Debug, Clone)]
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place Cholesky; returns the index of the first non-positive pivot on failure.
    fn factor(&mut self) -> Result<(), usize> {
        let w = self.bw + 1;
        for j in 0..self.n {
            let j0 = j.saturating_sub(self.bw);
            let rj = j * w;
            let mut d = self.data[rj];
            for k in j0..j {
                let l = self.data[rj + j - k];
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(j);
            }
            let djj = d.sqrt();
            self.data[rj] = djj;
            let iend = (j + self.bw + 1).min(self.n);
            for i in j + 1..iend {
                let ri = i * w;
                let k0 = i.saturating_sub(self.bw);
                let mut s = self.data[ri + i - j];
                for k in k0..j {
                    s -= self.data[ri + i - k] * self.data[rj + j - k];
                }
                self.data[ri + i - j] = s / djj;
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let ri = i * w;
            let k0 = i.saturating_sub(self.bw);
            let mut s = b[i];
            for k in k0..i {
                s -= self.data[ri + i - k] * b[k];
            }
            b[i] = s / self.data[ri];
        }
        for i in (0..self.n).rev() {
            let iend = (i + self.bw + 1).min(self.n);
            let mut s = b[i];
            for k in i + 1..iend {
                s -= self.data[k * w + k - i] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
    }
}

/// Per-physics element data: strain-displacement matrices at the four Gauss
/// points and the two phase constitutive matrices.
#[derive(Debug, Clone)]
struct Physics {
    ndof: usize,
    nstrain: usize,
    /// `[gp][nstrain x 4*ndof]`
    b: Vec<Vec<f64>>,
    /// `[phase][nstrain x nstrain]`
    d: [Vec<f64>; 2],
    /// `[phase][4*ndof x 4*ndof]`
    ke: [Vec<f64>; 2],
    weight: f64,
}

impl Physics {
    fn new(n: usize, ndof: usize, d: [Vec<f64>; 2]) -> Self {
        let h = 1.0 / n as f64;
        let g = 1.0 / 3f64.sqrt();
        let nat = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        let nstrain = if ndof == 1 { 2 } else { 3 };
        let ne = 4 * ndof;
        let mut b = Vec::with_capacity(4);
        for &(xi, eta) in &[(-g, -g), (g, -g), (g, g), (-g, g)] {
            let mut bm = vec![0.0; nstrain * ne];
            for (a, &(xa, ya)) in nat.iter().enumerate() {
                let dn1 = 0.25 * xa * (1.0 + ya * eta) * 2.0 / h;
                let dn2 = 0.25 * ya * (1.0 + xa * xi) * 2.0 / h;
                if ndof == 1 {
                    bm[a] = dn1;
                    bm[ne + a] = dn2;
                } else {
                    bm[2 * a] = dn1;
                    bm[ne + 2 * a + 1] = dn2;
                    bm[2 * ne + 2 * a] = dn2;
                    bm[2 * ne + 2 * a + 1] = dn1;
                }
            }
            b.push(bm);
        }
        let weight = h * h / 4.0;
        let ke_for = |dm: &[f64]| {
            let mut ke = vec![0.0; ne * ne];
            for bm in &b {
                for p in 0..ne {
                    for q in 0..ne {
                        let mut s = 0.0;
                        for r in 0..nstrain {
                            for c in 0..nstrain {
                                s += bm[r * ne + p] * dm[r * nstrain + c] * bm[c * ne + q];
                            }
                        }
                        ke[p * ne + q] += weight * s;
                    }
                }
            }
            ke
        };
        let ke = [ke_for(&d[0]), ke_for(&d[1])];
        Self {
            ndof,
            nstrain,
            b,
            d,
            ke,
            weight,
        }
    }

    /// `-int B^T D E` for a unit macroscopic load in strain component `c`.
    fn load(&self, phase: usize, c: usize) -> Vec<f64> {
        let ne = 4 * self.ndof;
        let ns = self.nstrain;
        let dm = &self.d[phase];
        let mut f = vec![0.0; ne];
        for bm in &self.b {
            for p in 0..ne {
                let mut s = 0.0;
                for r in 0..ns {
                    s += bm[r * ne + p] * dm[r * ns + c];
                }
                f[p] -= self.weight * s;
            }
        }
        f
    }
}

/// Result of one homogenization problem (all load cases).
#[derive(Debug, Clone)]
pub struct FemSolution {
    /// Effective tensor, column `c` = mean flux/stress under unit load `c`.
    pub effective: Vec<Vec<f64>>,
    /// Zero-mean periodic fluctuation per load case, node-major.
    pub fluctuations: Vec<Vec<f64>>,
    /// Relative residual of the full periodic system per load case.
    pub residual: Vec<f64>,
    /// `|<s:e> - <s>:<e>| / |<s:e>|` per load case.
    pub hill_error: Vec<f64>,
    /// Net reaction at the pinned node (the mean-fixing multiplier) per load case.
    pub multiplier: Vec<Vec<f64>>,
}

/// Periodic homogenization solver for a fixed resolution and material.
#[derive(Debug, Clone)]
pub struct Homogenizer {
    mesh: PeriodicMesh,
    material: MaterialConfig,
    thermal: Physics,
    elastic: Physics,
    /// Band position of each node (folded order); node 0 sits at position 0.
    position: Vec<usize>,
}

fn matrix_flat(m: [[f64; 3]; 3]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

impl Homogenizer {
    pub fn new(n_p: usize, material: MaterialConfig) -> Result<Self, Error> {
        material.validate()?;
        if n_p < 2 {
            return Err(Error::Config("homogenization needs N_p >= 2".into()));
        }
        let mesh = PeriodicMesh { n: n_p };
        let thermal = Physics::new(
            n_p,
            1,
            [
                vec![material.a0, 0.0, 0.0, material.a0],
                vec![material.a1, 0.0, 0.0, material.a1],
            ],
        );
        let elastic = Physics::new(
            n_p,
            2,
            [matrix_flat(material.stiffness(0)), matrix_flat(material.stiffness(1))],
        );
        let fold = fold_positions(n_p);
        let mut position = vec![0; n_p * n_p];
        for i in 0..n_p {
            for j in 0..n_p {
                position[mesh.node(i, j)] = fold[i] * n_p + fold[j];
            }
        }
        Ok(Self {
            mesh,
            material,
            thermal,
            elastic,
            position,
        })
    }

    pub fn n_p(&self) -> usize {
        self.mesh.n
    }

    pub fn material(&self) -> &MaterialConfig {
        &self.material
    }

    fn check_input(&self, x: &[f64]) -> Result<(), Error> {
        let n = self.mesh.n;
        if x.len() != n * n {
            return Err(Error::Shape(format!("microstructure has {} pixels, expected {}", x.len(), n * n)));
        }
        if x.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("oracle input must be binary".into()));
        }
        Ok(())
    }

    fn element_dofs(&self, ph: &Physics, i: usize, j: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(4 * ph.ndof);
        for node in self.mesh.element_nodes(i, j) {
            for c in 0..ph.ndof {
                out.push(node * ph.ndof + c);
            }
        }
        out
    }

    fn solve(&self, ph: &Physics, x: &[f64]) -> Result<FemSolution, Error> {
        self.check_input(x)?;
        let n = self.mesh.n;
        let nd = ph.ndof;
        let ne = 4 * nd;
        let total = self.mesh.node_count() * nd;
        // band position of a dof; pinned node dofs map below zero
        let band_pos = |dof: usize| -> Option<usize> {
            let node = dof / nd;
            let p = self.position[node] * nd + dof % nd;
            p.checked_sub(nd)
        };
        let m = total - nd;
        let mut bw = 0;
        let mut elem = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dofs = self.element_dofs(ph, i, j);
                let bp: Vec<Option<usize>> = dofs.iter().map(|&d| band_pos(d)).collect();
                for a in bp.iter().flatten() {
                    for b in bp.iter().flatten() {
                        bw = bw.max(a.abs_diff(*b));
                    }
                }
                elem.push((dofs, bp, usize::from(x[i * n + j] > 0.5)));
            }
        }
        let mut k = BandMatrix::zeros(m, bw);
        for (_, bp, phase) in &elem {
            let ke = &ph.ke[*phase];
            for p in 0..ne {
                let Some(gp) = bp[p] else { continue };
                for q in 0..=p {
                    let Some(gq) = bp[q] else { continue };
                    k.add(gp, gq, ke[p * ne + q]);
                }
            }
        }
        k.factor().map_err(|pivot| {
            Error::Numerical(format!(
                "stiffness singular at pivot {pivot}: null space of dimension >= 1 beyond the pinned constant mode"
            ))
        })?;

        let nload = ph.nstrain;
        let loads: [Vec<Vec<f64>>; 2] = [
            (0..nload).map(|c| ph.load(0, c)).collect(),
            (0..nload).map(|c| ph.load(1, c)).collect(),
        ];
        let mut sol = FemSolution {
            effective: vec![vec![0.0; nload]; nload],
            fluctuations: Vec::with_capacity(nload),
            residual: Vec::with_capacity(nload),
            hill_error: Vec::with_capacity(nload),
            multiplier: Vec::with_capacity(nload),
        };
        for c in 0..nload {
            let mut f_full = vec![0.0; total];
            let mut f_scale = 0.0;
            for (dofs, _, phase) in &elem {
                let fe = &loads[*phase][c];
                for p in 0..ne {
                    f_full[dofs[p]] += fe[p];
                    f_scale += fe[p] * fe[p];
                }
            }
            let mut rhs = vec![0.0; m];
            for (dof, &v) in f_full.iter().enumerate() {
                if let Some(p) = band_pos(dof) {
                    rhs[p] = v;
                }
            }
            k.solve(&mut rhs);
            let mut v = vec![0.0; total];
            for (dof, val) in v.iter_mut().enumerate() {
                if let Some(p) = band_pos(dof) {
                    *val = rhs[p];
                }
            }
            for comp in 0..nd {
                let mean = v.iter().skip(comp).step_by(nd).sum::<f64>() / self.mesh.node_count() as f64;
                v.iter_mut().skip(comp).step_by(nd).for_each(|a| *a -= mean);
            }
            // full periodic residual, mean stress/flux and energy
            let mut r = f_full.clone();
            let mut mean_s = vec![0.0; nload];
            let mut energy = 0.0;
            let area = self.mesh.element_area();
            for (dofs, _, phase) in &elem {
                let ke = &ph.ke[*phase];
                let ve: Vec<f64> = dofs.iter().map(|&d| v[d]).collect();
                for p in 0..ne {
                    let s: f64 = (0..ne).map(|q| ke[p * ne + q] * ve[q]).sum();
                    r[dofs[p]] -= s;
                }
                let dm = &ph.d[*phase];
                for bm in &ph.b {
                    let mut eps = vec![0.0; nload];
                    eps[c] = 1.0;
                    for (row, e) in eps.iter_mut().enumerate() {
                        *e += (0..ne).map(|q| bm[row * ne + q] * ve[q]).sum::<f64>();
                    }
                    for row in 0..nload {
                        let s: f64 = (0..nload).map(|col| dm[row * nload + col] * eps[col]).sum();
                        mean_s[row] += 0.25 * area * s;
                        energy += 0.25 * area * s * eps[row];
                    }
                }
            }
            let rnorm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            sol.residual.push(rnorm / f_scale.sqrt().max(f64::MIN_POSITIVE));
            sol.hill_error.push((energy - mean_s[c]).abs() / energy.abs().max(f64::MIN_POSITIVE));
            sol.multiplier.push((0..nd).map(|comp| -r[comp]).collect());
            for row in 0..nload {
                sol.effective[row][c] = mean_s[row];
            }
            sol.fluctuations.push(v);
        }
        Ok(sol)
    }

    /// Full conductivity solve including diagnostics.
    pub fn solve_conductivity(&self, x: &[f64]) -> Result<FemSolution, Error> {
        self.solve(&self.thermal, x)
    }

    /// Full elasticity solve including diagnostics.
    pub fn solve_elasticity(&self, x: &[f64]) -> Result<FemSolution, Error> {
        self.solve(&self.elastic, x)
    }

    pub fn effective_conductivity(&self, x: &[f64]) -> Result<[[f64; 2]; 2], Error> {
        let s = self.solve_conductivity(x)?;
        let e = &s.effective;
        Ok([[e[0][0], e[0][1]], [e[1][0], e[1][1]]])
    }

    pub fn effective_elasticity(&self, x: &[f64]) -> Result<[[f64; 3]; 3], Error> {
        let s = self.solve_elasticity(x)?;
        let e = &s.effective;
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = e[r][c];
            }
        }
        Ok(out)
    }

    pub fn properties_case1(&self, x: &[f64]) -> Result<[f64; 2], Error> {
        let a = self.effective_conductivity(x)?;
        let c = self.effective_elasticity(x)?;
        Ok([a[0][0], 0.5 * (c[0][0] + c[1][1])])
    }

    pub fn properties_case2(&self, x: &[f64]) -> Result<[f64; 2], Error> {
        let a = self.effective_conductivity(x)?;
        Ok([a[0][0], a[1][1]])
    }

    pub fn properties(&self, case: PropertyCase, x: &[f64]) -> Result<[f64; 2], Error> {
        match case {
            PropertyCase::Case1 => self.properties_case1(x),
            PropertyCase::Case2 => self.properties_case2(x),
        }
    }

    /// Data-parallel labeling; output order matches input order.
    pub fn label_batch(&self, case: PropertyCase, xs: &[Vec<f64>]) -> Vec<Result<[f64; 2], Error>> {
        xs.par_iter().map(|x| self.properties(case, x)).collect()
    }
}

/// Voigt and Reuss bounds for a given phase-1 fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub a_voigt: f64,
    pub a_reuss: f64,
    pub c_voigt: [[f64; 3]; 3],
    pub c_reuss: [[f64; 3]; 3],
}

fn inv3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            out[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    out
}

pub fn bounds(material: &MaterialConfig, vf: f64) -> Bounds {
    let (a0, a1) = (material.a0, material.a1);
    let c0 = material.stiffness(0);
    let c1 = material.stiffness(1);
    let (i0, i1) = (inv3(c0), inv3(c1));
    let mut cv = [[0.0; 3]; 3];
    let mut si = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            cv[r][c] = (1.0 - vf) * c0[r][c] + vf * c1[r][c];
            si[r][c] = (1.0 - vf) * i0[r][c] + vf * i1[r][c];
        }
    }
    Bounds {
        a_voigt: (1.0 - vf) * a0 + vf * a1,
        a_reuss: 1.0 / ((1.0 - vf) / a0 + vf / a1),
        c_voigt: cv,
        c_reuss: inv3(si),
    }
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn eig_sym2(m: [[f64; 2]; 2]) -> [f64; 2] {
    let t = 0.5 * (m[0][0] + m[1][1]);
    let d = (0.25 * (m[0][0] - m[1][1]).powi(2) + 0.25 * (m[0][1] + m[1][0]).powi(2)).sqrt();
    [t - d, t + d]
}

/// Smallest eigenvalue of a symmetric 3x3 matrix (cyclic Jacobi).
pub fn min_eig_sym3(m: [[f64; 3]; 3]) -> f64 {
    let mut a = m;
    for r in 0..3 {
        for c in 0..r {
            let s = 0.5 * (a[r][c] + a[c][r]);
            a[r][c] = s;
            a[c][r] = s;
        }
    }
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut b = a;
            for k in 0..3 {
                b[k][p] = c * a[k][p] - s * a[k][q];
                b[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut d = b;
            for k in 0..3 {
                d[p][k] = c * b[p][k] - s * b[q][k];
                d[q][k] = s * b[p][k] + c * b[q][k];
            }
            a = d;
        }
    }
    a[0][0].min(a[1][1]).min(a[2][2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_permutation_with_small_gaps() {
        for n in 2..10 {
            let p = fold_positions(n);
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
            for i in 0..n {
                assert!(p[i].abs_diff(p[(i + 1) % n]) <= 2);
            }
        }
    }

    #[test]
    fn band_cholesky_solves() {
        let n = 6;
        let mut a = BandMatrix::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        a.factor().unwrap();
        let mut b = vec![1.0; n];
        a.solve(&mut b);
        for i in 0..n {
            let l = if i > 0 { b[i - 1] } else { 0.0 };
            let r = if i + 1 < n { b[i + 1] } else { 0.0 };
            assert!((2.0 * b[i] - l - r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_band_reported() {
        let mut a = BandMatrix::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        assert_eq!(a.factor(), Err(1));
    }

    #[test]
    fn jacobi_min_eigen() {
        let m = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        assert!((min_eig_sym3(m) - 1.0).abs() < 1e-12);
        assert_eq!(eig_sym2([[3.0, 0.0], [0.0, 1.0]]), [1.0, 3.0]);
    }

    #[test]
    fn rejects_non_binary() {
        let h = Homogenizer::new(4, MaterialConfig::default()).unwrap();
        let mut x = vec![0.0; 16];
        x[3] = 0.5;
        assert!(matches!(h.properties_case2(&x), Err(Error::Config(_))));
        assert!(matches!(h.properties_case2(&x[1..]), Err(Error::Shape(_))));
    }
}
