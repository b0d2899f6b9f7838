//! Dense solver for the generalized symmetric eigenproblem `Kψ = λM₀ψ`.
//!
//! The diagonal mass makes the reduction to a standard problem trivial:
//! `A = M₀^{-1/2} K M₀^{-1/2}` is symmetric, and `ψ = M₀^{-1/2} y` for each
//! eigenvector `y` of `A`. The dense symmetric eigendecomposition itself is
//! faer's (Householder tridiagonalization followed by an implicit-shift QR
//! iteration), run single-threaded so repeated solves are bit-identical.

use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};

use faer::{Mat, MatRef};

use crate::assembly::OperatorPair;
use crate::error::{Error, Result};
use crate::surface::SurfaceId;

pub const DEFAULT_TOL_DEG: f64 = 1e-8;

static CORRUPT_EIGENVALUES: AtomicBool = AtomicBool::new(false);

/// Test fixture: while enabled, every solver call returns eigenvalues scaled
/// by `1 + 1e-6` after its internal checks, simulating a silently wrong
/// eigensolver. Process-wide.
#[doc(hidden)]
pub fn set_fault_injection(enabled: bool) {
    CORRUPT_EIGENVALUES.store(enabled, Ordering::SeqCst);
}

fn corrupt(values: &mut [f64]) {
    if CORRUPT_EIGENVALUES.load(Ordering::SeqCst) {
        values.iter_mut().for_each(|v| *v *= 1.0 + 1e-6);
    }
}

/// Orthogonal change of basis applied inside one degeneracy group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRotation {
    pub group: Range<usize>,
    /// Column `k` holds the coefficients of the new `k`-th group vector in
    /// the old group vectors.
    pub rotation: Mat<f64>,
}

/// Lowest eigenpairs of an operator pair, `M₀`-orthonormal and ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    surface_id: SurfaceId,
    mass: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: Mat<f64>,
    groups: Vec<Range<usize>>,
    tol_deg: f64,
    rotations: Option<Vec<GroupRotation>>,
}

impl SpectralData {
    pub fn surface_id(&self) -> SurfaceId {
        self.surface_id
    }

    pub fn node_count(&self) -> usize {
        self.mass.len()
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Column `n` is the `n`-th eigenvector.
    pub fn eigenvectors(&self) -> MatRef<'_, f64> {
        self.eigenvectors.as_ref()
    }

    pub fn eigenvector(&self, n: usize) -> Vec<f64> {
        (0..self.node_count())
            .map(|i| self.eigenvectors.read(i, n))
            .collect()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn degeneracy_groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn tol_deg(&self) -> f64 {
        self.tol_deg
    }

    /// Index of the degeneracy group containing mode `n`.
    pub fn group_of(&self, n: usize) -> usize {
        self.groups
            .partition_point(|g| g.end <= n)
            .min(self.groups.len() - 1)
    }

    /// Rotations recorded by basis adaptation; `None` if never adapted.
    pub fn rotations(&self) -> Option<&[GroupRotation]> {
        self.rotations.as_deref()
    }

    /// True once every nontrivial degeneracy group has been adapted (or when
    /// there are none).
    pub fn is_adapted(&self) -> bool {
        self.rotations.is_some() || self.groups.iter().all(|g| g.len() == 1)
    }

    pub(crate) fn with_adapted_basis(
        &self,
        eigenvectors: Mat<f64>,
        rotations: Vec<GroupRotation>,
    ) -> Self {
        Self {
            eigenvectors,
            rotations: Some(rotations),
            ..self.clone()
        }
    }

    /// `⟨u, v⟩ = uᵀM₀v`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.mass)
            .map(|((a, b), m)| a * m * b)
            .sum()
    }

    /// `M₀Ψ`.
    pub fn mass_weighted_vectors(&self) -> Mat<f64> {
        let mut out = self.eigenvectors.clone();
        for k in 0..out.ncols() {
            for i in 0..out.nrows() {
                let v = out.read(i, k);
                out.write(i, k, self.mass[i] * v);
            }
        }
        out
    }

    /// The lowest `n` modes. Degeneracy groups cut by the truncation are
    /// shortened.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_modes() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} modes",
                self.n_modes()
            )));
        }
        let eigenvalues = self.eigenvalues[..n].to_vec();
        let groups = degeneracy_partition(&eigenvalues, self.tol_deg);
        Ok(Self {
            surface_id: self.surface_id,
            mass: self.mass.clone(),
            eigenvalues,
            eigenvectors: self.eigenvectors.as_ref().subcols(0, n).to_owned(),
            groups,
            tol_deg: self.tol_deg,
            rotations: None,
        })
    }

    /// Writes `index,eigenvalue,group` rows after a schema line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# schema_version: 1")?;
        writeln!(out, "index,eigenvalue,group")?;
        for (g, range) in self.groups.iter().enumerate() {
            for n in range.clone() {
                writeln!(out, "{},{:?},{}", n, self.eigenvalues[n], g)?;
            }
        }
        Ok(())
    }
}

fn check_solve_args(pair: &OperatorPair, n_modes: usize, tol_deg: f64) -> Result<()> {
    if n_modes == 0 || n_modes > pair.dim() {
        return Err(Error::InvalidArgument(format!(
            "n_modes must lie in 1..={}, got {n_modes}",
            pair.dim()
        )));
    }
    if !(1e-12..=1e-2).contains(&tol_deg) {
        return Err(Error::InvalidArgument(format!(
            "tol_deg must lie in [1e-12, 1e-2], got {tol_deg}"
        )));
    }
    if let Some(node) = pair.mass().iter().position(|m| !(*m > 0.0)) {
        return Err(Error::NumericalBreakdown(format!(
            "mass entry {node} is not positive"
        )));
    }
    Ok(())
}

fn reduced_matrix(pair: &OperatorPair) -> (Mat<f64>, Vec<f64>) {
    let n = pair.dim();
    let scale: Vec<f64> = pair.mass().iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = Mat::zeros(n, n);
    for r in 0..n {
        for (c, v) in pair.stiffness().row(r) {
            a.write(r, c, scale[r] * v * scale[c]);
        }
    }
    (a, scale)
}

/// Eigenvalues only, ascending; cheaper than [`solve`] for parameter sweeps.
pub fn solve_eigenvalues(pair: &OperatorPair, n_modes: usize) -> Result<Vec<f64>> {
    check_solve_args(pair, n_modes, DEFAULT_TOL_DEG)?;
    let (a, _) = reduced_matrix(pair);
    let mut values = a.selfadjoint_eigenvalues(faer::Side::Lower);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite eigenvalue".into()));
    }
    values.sort_by(f64::total_cmp);
    values.truncate(n_modes);
    corrupt(&mut values);
    Ok(values)
}

/// Lowest `n_modes` eigenpairs of `(K, M₀)`.
///
/// Each eigenvector is scaled to unit `M₀`-norm and signed so that its entry
/// of largest magnitude (lowest index on ties) is positive. The result is
/// checked for `M₀`-orthonormality and small residuals before returning.
pub fn solve(pair: &OperatorPair, n_modes: usize, tol_deg: f64) -> Result<SpectralData> {
    check_solve_args(pair, n_modes, tol_deg)?;
    let n = pair.dim();
    let (a, scale) = reduced_matrix(pair);
    let evd = a.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.read(i).total_cmp(&s.read(j)).then(i.cmp(&j)));
    order.truncate(n_modes);

    let eigenvalues: Vec<f64> = order.iter().map(|&k| s.read(k)).collect();
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite eigenvalue".into()));
    }
    let mut vectors = Mat::zeros(n, n_modes);
    for (col, &k) in order.iter().enumerate() {
        let mut lead = 0;
        let mut lead_abs = -1.0;
        for i in 0..n {
            let v = scale[i] * u.read(i, k);
            vectors.write(i, col, v);
            if v.abs() > lead_abs {
                lead_abs = v.abs();
                lead = i;
            }
        }
        // M₀-normalize (already unit up to rounding) and fix the sign
        let norm: f64 = (0..n)
            .map(|i| pair.mass()[i] * vectors.read(i, col).powi(2))
            .sum::<f64>()
            .sqrt();
        let sign = if vectors.read(lead, col) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for i in 0..n {
            let v = vectors.read(i, col);
            vectors.write(i, col, sign * v / norm);
        }
    }

    let groups = degeneracy_partition(&eigenvalues, tol_deg);
    let data = SpectralData {
        surface_id: pair.surface_id(),
        mass: pair.mass().to_vec(),
        eigenvalues,
        eigenvectors: vectors,
        groups,
        tol_deg,
        rotations: None,
    };
    check_orthonormality(&data)?;
    check_residuals(pair, &data)?;
    let mut data = data;
    corrupt(&mut data.eigenvalues);
    Ok(data)
}

fn check_orthonormality(data: &SpectralData) -> Result<()> {
    let gram = data.mass_weighted_vectors().transpose() * data.eigenvectors();
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            let defect = (gram.read(i, j) - target).abs();
            if defect > 1e-10 {
                return Err(Error::NumericalBreakdown(format!(
                    "eigenvectors {i} and {j} violate M0-orthonormality by {defect:e}"
                )));
            }
        }
    }
    Ok(())
}

fn check_residuals(pair: &OperatorPair, data: &SpectralData) -> Result<()> {
    let kv = pair.stiffness().mul_dense(data.eigenvectors());
    for k in 0..data.n_modes() {
        let lambda = data.eigenvalues[k];
        let residual: f64 = (0..data.node_count())
            .map(|i| {
                let r = kv.read(i, k) - lambda * pair.mass()[i] * data.eigenvectors.read(i, k);
                r * r
            })
            .sum::<f64>()
            .sqrt();
        // eigenvectors are M₀-normalized, so ‖ψ‖_M = 1
        if residual > 1e-9 * (1.0 + lambda.abs()) {
            return Err(Error::NumericalBreakdown(format!(
                "mode {k} has residual {residual:e}"
            )));
        }
    }
    Ok(())
}

/// Splits ascending `values` into maximal runs in which consecutive entries
/// satisfy `|λᵢ₊₁ − λᵢ| ≤ tol·(1 + |λᵢ|)`.
pub fn degeneracy_partition(values: &[f64], tol: f64) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len()
            || (values[i] - values[i - 1]).abs() > tol * (1.0 + values[i - 1].abs());
        if split {
            groups.push(start..i);
            start = i;
        }
    }
    groups
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_base, SparseMatrix};
    use crate::surface::make_torus;

    #[test]
    fn partition_examples() {
        assert_eq!(
            degeneracy_partition(&[0.0, 1.0, 1.0 + 1e-12, 5.0], 1e-9),
            vec![0..1, 1..3, 3..4]
        );
        assert_eq!(
            degeneracy_partition(&[0.0, 1.0, 2.0, 3.0], 1e-9),
            vec![0..1, 1..2, 2..3, 3..4]
        );
        assert_eq!(degeneracy_partition(&[1.0, 1.0, 1.0], 1e-12), vec![0..3]);
        assert!(degeneracy_partition(&[], 1e-9).is_empty());
    }

    #[test]
    fn identity_pair_is_one_group() {
        let n = 6;
        let mass: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.1).collect();
        let k = SparseMatrix::from_triplets(
            n,
            mass.iter().enumerate().map(|(i, &m)| (i, i, m)).collect(),
        );
        let pair = OperatorPair::synthetic(k, mass).unwrap();
        let spec = solve(&pair, n, 1e-8).unwrap();
        assert!(spec.eigenvalues().iter().all(|&l| (l - 1.0).abs() < 1e-14));
        assert_eq!(spec.degeneracy_groups(), vec![0..6]);
    }

    #[test]
    fn torus_first_level_is_fourfold() {
        let s = make_torus(16, 16, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 5, DEFAULT_TOL_DEG).unwrap();
        let h = 1.0 / 16.0;
        let symbol = 2.0 / (h * h) * (1.0 - (2.0 * std::f64::consts::PI * h).cos());
        assert!(spec.eigenvalues()[0].abs() < 1e-10 * symbol);
        for &l in &spec.eigenvalues()[1..] {
            assert!((l - symbol).abs() < 1e-10 * symbol);
        }
        assert_eq!(spec.degeneracy_groups(), &[0..1, 1..5]);
        // ground state is the normalized constant, positive by convention
        let c = 1.0 / pair.total_mass().sqrt();
        assert!(spec.eigenvector(0).iter().all(|v| (v - c).abs() < 1e-10));
    }

    #[test]
    fn solve_is_deterministic() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let a = solve(&pair, 64, DEFAULT_TOL_DEG).unwrap();
        let b = solve(&pair, 64, DEFAULT_TOL_DEG).unwrap();
        assert_eq!(a, b);
        let vals = solve_eigenvalues(&pair, 10).unwrap();
        for (x, y) in vals.iter().zip(a.eigenvalues()) {
            assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn sign_convention() {
        let s = make_torus(6, 6, 1.0, 1.0).unwrap();
        let spec = solve(&assemble_base(&s).unwrap(), 36, DEFAULT_TOL_DEG).unwrap();
        for k in 0..36 {
            let v = spec.eigenvector(k);
            let lead = v
                .iter()
                .enumerate()
                .fold((0, -1.0f64), |acc, (i, x)| {
                    if x.abs() > acc.1 {
                        (i, x.abs())
                    } else {
                        acc
                    }
                })
                .0;
            assert!(v[lead] > 0.0);
        }
    }

    #[test]
    fn argument_checks() {
        let s = make_torus(4, 4, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        assert!(solve(&pair, 0, 1e-8).is_err());
        assert!(solve(&pair, 17, 1e-8).is_err());
        assert!(solve(&pair, 4, 1e-13).is_err());
        assert!(solve(&pair, 4, 0.1).is_err());
    }

    #[test]
    fn csv_export() {
        let s = make_torus(16, 16, 1.0, 1.0).unwrap();
        let spec = solve(&assemble_base(&s).unwrap(), 5, DEFAULT_TOL_DEG).unwrap();
        let mut buf = Vec::new();
        spec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "index,eigenvalue,group");
        assert!(lines[2].starts_with("0,"));
        assert!(lines[2].ends_with(",0"));
        assert_eq!(lines.len(), 7);
        assert!(lines[6].ends_with(",1"));
    }

    #[test]
    fn group_lookup() {
        let s = make_torus(16, 16, 1.0, 1.0).unwrap();
        let spec = solve(&assemble_base(&s).unwrap(), 9, DEFAULT_TOL_DEG).unwrap();
        assert_eq!(spec.group_of(0), 0);
        assert_eq!(spec.group_of(4), 1);
        assert_eq!(spec.group_of(5), 2);
        let t = spec.truncated(3).unwrap();
        assert_eq!(t.degeneracy_groups(), &[0..1, 1..3]);
    }
}
