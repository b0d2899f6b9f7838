//! Stiffness/mass assembly for the unperturbed Laplacian and the operators of
//! a conformal perturbation.
//!
//! The discrete Laplacian is `Δ⁽⁰⁾ = M₀⁻¹K` with `K` the stiffness matrix and
//! `M₀` a lumped (diagonal) mass. In two dimensions the Dirichlet energy is
//! conformally invariant, so a conformal change of the inverse metric by a
//! nodal factor `c` leaves `K` alone and replaces `M₀` by `M₀·diag(1/c)`.
//! The perturbed Laplacian is then `diag(c)·Δ⁽⁰⁾` exactly.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::sync::Arc;

use faer::{Mat, MatRef};

use crate::error::{Error, Result};
use crate::surface::{
    triangle_area, ConformalPerturbation, DiscreteSurface, ScalarField, Side, SurfaceId,
};

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Duplicate entries are summed in insertion order, so the result is
    /// reproducible bit for bit.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(
                r < n && c < n,
                "triplet ({r}, {c}) out of range for n = {n}"
            );
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_dense(m: MatRef<'_, f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m.read(r, c);
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), triplets)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `self · x` for a dense block of column vectors.
    pub fn mul_dense(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut out = Mat::zeros(self.n, x.ncols());
        for k in 0..x.ncols() {
            let col = x.col(k);
            for r in 0..self.n {
                let s: f64 = self.row(r).map(|(c, v)| v * col.read(c)).sum();
                out.write(r, k, s);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m.write(r, c, v);
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |aᵢⱼ − aⱼᵢ|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Writes the matrix in Matrix Market coordinate format (1-based).
    pub fn write_matrix_market(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{} {} {}", self.n, self.n, self.nnz())?;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                writeln!(out, "{} {} {:?}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Writes a diagonal matrix in Matrix Market coordinate format.
pub fn write_diagonal_matrix_market(diag: &[f64], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", diag.len(), diag.len(), diag.len())?;
    for (i, v) in diag.iter().enumerate() {
        writeln!(out, "{} {} {:?}", i + 1, i + 1, v)?;
    }
    Ok(())
}

/// Stiffness `K` and lumped mass `M₀` of a discrete Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPair {
    surface_id: SurfaceId,
    stiffness: Arc<SparseMatrix>,
    mass: Vec<f64>,
}

impl OperatorPair {
    /// A pair not tied to any assembled surface (synthetic test problems).
    /// Only symmetry of `K` and positivity of the mass are required.
    pub fn synthetic(stiffness: SparseMatrix, mass: Vec<f64>) -> Result<Self> {
        if stiffness.dim() != mass.len() {
            return Err(Error::InvalidArgument(format!(
                "stiffness is {0}x{0} but mass has {1} entries",
                stiffness.dim(),
                mass.len()
            )));
        }
        if let Some(node) = mass.iter().position(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::NumericalBreakdown(format!(
                "mass entry {node} is not positive"
            )));
        }
        let defect = stiffness.symmetry_defect();
        if defect > 1e-12 * stiffness.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::SymmetryViolation { defect });
        }
        let mut h = DefaultHasher::new();
        2u8.hash(&mut h);
        for r in 0..stiffness.dim() {
            for (c, v) in stiffness.row(r) {
                (r, c, v.to_bits()).hash(&mut h);
            }
        }
        for m in &mass {
            m.to_bits().hash(&mut h);
        }
        Ok(Self {
            surface_id: SurfaceId(h.finish()),
            stiffness: Arc::new(stiffness),
            mass,
        })
    }

    pub fn surface_id(&self) -> SurfaceId {
        self.surface_id
    }

    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Whether two pairs share the very same stiffness allocation.
    pub fn shares_stiffness(&self, other: &OperatorPair) -> bool {
        Arc::ptr_eq(&self.stiffness, &other.stiffness)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `Δ⁽⁰⁾u = M₀⁻¹Ku`.
    pub fn apply_laplacian(&self, u: &[f64]) -> Vec<f64> {
        let mut v = self.stiffness.mul_vec(u);
        for (vi, m) in v.iter_mut().zip(&self.mass) {
            *vi /= m;
        }
        v
    }

    /// `⟨u, v⟩ = uᵀM₀v`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.mass)
            .map(|((a, b), m)| a * m * b)
            .sum()
    }

    /// A scalar field on the nodes of this pair.
    pub fn field(&self, values: Vec<f64>) -> Result<ScalarField> {
        ScalarField::on(self.surface_id, self.dim(), values)
    }
}

/// Assembles `(K, M₀)`: the periodic 5-point stencil scaled by the cell area
/// on torus grids, cotangent stiffness with barycentric lumped mass on
/// triangle meshes.
pub fn assemble_base(surface: &DiscreteSurface) -> Result<OperatorPair> {
    let n = surface.node_count();
    let (stiffness, mass) = if let Some(d) = surface.torus_dims() {
        let area = d.cell_area();
        let wx = area / (d.hx() * d.hx());
        let wy = area / (d.hy() * d.hy());
        let mut triplets = Vec::with_capacity(5 * n);
        for j in 0..d.ny {
            for i in 0..d.nx {
                let p = d.index(i, j);
                triplets.push((p, p, 2.0 * wx + 2.0 * wy));
                triplets.push((p, d.index((i + d.nx - 1) % d.nx, j), -wx));
                triplets.push((p, d.index((i + 1) % d.nx, j), -wx));
                triplets.push((p, d.index(i, (j + d.ny - 1) % d.ny), -wy));
                triplets.push((p, d.index(i, (j + 1) % d.ny), -wy));
            }
        }
        (SparseMatrix::from_triplets(n, triplets), vec![area; n])
    } else {
        let mesh = surface.mesh_data().expect("surface is a torus or a mesh");
        let areas: Vec<f64> = mesh
            .triangles
            .iter()
            .map(|t| triangle_area(&mesh.vertices, t))
            .collect();
        let mean = areas.iter().sum::<f64>() / areas.len() as f64;
        let threshold = 1e-14 * mean;
        if let Some(tri) = areas.iter().position(|&a| !(a >= threshold) || a == 0.0) {
            return Err(Error::DegenerateTriangle {
                triangle: tri,
                area: areas[tri],
                threshold,
            });
        }
        let mut mass = vec![0.0; n];
        let mut triplets = Vec::with_capacity(12 * mesh.triangles.len());
        for (t, &area) in mesh.triangles.iter().zip(&areas) {
            for k in 0..3 {
                mass[t[k]] += area / 3.0;
                // edge (a, b) opposite the corner c
                let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
                let w = 0.5 * cotangent(&mesh.vertices, c, a, b);
                triplets.push((a, b, -w));
                triplets.push((b, a, -w));
                triplets.push((a, a, w));
                triplets.push((b, b, w));
            }
        }
        (SparseMatrix::from_triplets(n, triplets), mass)
    };

    check_base_invariants(surface, &stiffness, &mass)?;
    Ok(OperatorPair {
        surface_id: surface.id(),
        stiffness: Arc::new(stiffness),
        mass,
    })
}

/// Cotangent of the angle at `apex` in the triangle `(apex, a, b)`.
fn cotangent(v: &[[f64; 3]], apex: usize, a: usize, b: usize) -> f64 {
    let p = v[apex];
    let u = [v[a][0] - p[0], v[a][1] - p[1], v[a][2] - p[2]];
    let w = [v[b][0] - p[0], v[b][1] - p[1], v[b][2] - p[2]];
    let dot = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
    let cross = [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ];
    dot / (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
}

fn check_base_invariants(
    surface: &DiscreteSurface,
    stiffness: &SparseMatrix,
    mass: &[f64],
) -> Result<()> {
    let scale = stiffness.max_abs();
    let defect = stiffness.symmetry_defect();
    if defect > 1e-12 * scale {
        return Err(Error::SymmetryViolation { defect });
    }
    let ones = vec![1.0; mass.len()];
    let k1 = stiffness.mul_vec(&ones);
    let k1_norm = k1.iter().map(|v| v * v).sum::<f64>().sqrt();
    if k1_norm > 1e-10 * scale * (mass.len() as f64).sqrt() {
        return Err(Error::NumericalBreakdown(format!(
            "stiffness does not annihilate constants (residual {k1_norm:e})"
        )));
    }
    if let Some(node) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::NumericalBreakdown(format!(
            "lumped mass at node {node} is not positive"
        )));
    }
    let total: f64 = mass.iter().sum();
    let area = surface.area();
    if (total - area).abs() > 1e-10 * area {
        return Err(Error::NumericalBreakdown(format!(
            "lumped mass {total} does not match surface area {area}"
        )));
    }
    Ok(())
}

/// A linear operator on nodal vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeOperator {
    Zero,
    /// `diag(m) ∘ Δ⁽⁰⁾`
    ScaledLaplacian(Vec<f64>),
    /// Arbitrary dense operator.
    Dense(Mat<f64>),
}

impl NodeOperator {
    pub fn is_zero(&self) -> bool {
        match self {
            NodeOperator::Zero => true,
            NodeOperator::ScaledLaplacian(m) => m.iter().all(|&v| v == 0.0),
            NodeOperator::Dense(d) => {
                (0..d.nrows()).all(|r| (0..d.ncols()).all(|c| d.read(r, c) == 0.0))
            }
        }
    }

    /// Applies the operator to each column of `x`.
    pub fn apply_block(&self, pair: &OperatorPair, x: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            NodeOperator::Zero => Mat::zeros(x.nrows(), x.ncols()),
            NodeOperator::ScaledLaplacian(m) => {
                let mut out = pair.stiffness.mul_dense(x);
                for k in 0..out.ncols() {
                    for r in 0..out.nrows() {
                        let v = out.read(r, k);
                        out.write(r, k, m[r] * (v / pair.mass[r]));
                    }
                }
                out
            }
            NodeOperator::Dense(d) => d * x,
        }
    }

    pub fn apply(&self, pair: &OperatorPair, x: &[f64]) -> Vec<f64> {
        let col = faer::col::from_slice(x);
        let out = self.apply_block(pair, col.as_2d());
        (0..x.len()).map(|r| out.read(r, 0)).collect()
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        let ok = match self {
            NodeOperator::Zero => true,
            NodeOperator::ScaledLaplacian(m) => m.len() == n,
            NodeOperator::Dense(d) => d.nrows() == n && d.ncols() == n,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "operator does not act on {n} nodes"
            )))
        }
    }
}

/// Operator and inner-product corrections of a perturbed eigenproblem:
/// `H(t) = Δ⁽⁰⁾ + tH₁ + t²H₂` and `⟨u,v⟩ₜ = ⟨u,v⟩ + t⟨u,G₁v⟩ + t²⟨u,G₂v⟩`
/// with diagonal `G₁`, `G₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOperators {
    base: OperatorPair,
    side: Option<Side>,
    h1: NodeOperator,
    h2: NodeOperator,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl PerturbationOperators {
    /// General operators; `g1`, `g2` are the diagonals of `G₁`, `G₂`.
    pub fn general(
        base: &OperatorPair,
        h1: NodeOperator,
        h2: NodeOperator,
        g1: Vec<f64>,
        g2: Vec<f64>,
    ) -> Result<Self> {
        let n = base.dim();
        h1.check_dim(n)?;
        h2.check_dim(n)?;
        if g1.len() != n || g2.len() != n {
            return Err(Error::InvalidArgument(format!(
                "inner-product corrections must have {n} entries"
            )));
        }
        Ok(Self {
            base: base.clone(),
            side: None,
            h1,
            h2,
            g1,
            g2,
        })
    }

    /// Same operators with the inner-product corrections replaced.
    pub fn with_inner_product(&self, g1: Vec<f64>, g2: Vec<f64>) -> Result<Self> {
        let n = self.base.dim();
        if g1.len() != n || g2.len() != n {
            return Err(Error::InvalidArgument(format!(
                "inner-product corrections must have {n} entries"
            )));
        }
        Ok(Self {
            g1,
            g2,
            ..self.clone()
        })
    }

    pub fn base(&self) -> &OperatorPair {
        &self.base
    }

    pub fn side(&self) -> Option<Side> {
        self.side
    }

    pub fn h1(&self) -> &NodeOperator {
        &self.h1
    }

    pub fn h2(&self) -> &NodeOperator {
        &self.h2
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn g2(&self) -> &[f64] {
        &self.g2
    }

    /// Multiplier of `H₁` when it has the conformal form `F∘Δ⁽⁰⁾`.
    pub fn h1_multiplier(&self) -> Option<&[f64]> {
        match &self.h1 {
            NodeOperator::ScaledLaplacian(m) => Some(m),
            _ => None,
        }
    }

    pub fn h2_multiplier(&self) -> Option<&[f64]> {
        match &self.h2 {
            NodeOperator::ScaledLaplacian(m) => Some(m),
            _ => None,
        }
    }
}

/// Operators of a conformal perturbation, truncated at second order.
///
/// Inverse-metric side: `H₁ = F₁Δ⁽⁰⁾`, `H₂ = F₂Δ⁽⁰⁾`, `G₁ = −F₁`,
/// `G₂ = F₁² − F₂` (the area form scales with the reciprocal factor).
/// Metric side: `H₁ = −F₁Δ⁽⁰⁾`, `H₂ = F₁²Δ⁽⁰⁾`, `G₁ = F₁`, `G₂ = 0`.
pub fn conformal_operators(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
) -> Result<PerturbationOperators> {
    if pert.surface_id() != pair.surface_id() || pert.f1().len() != pair.dim() {
        return Err(Error::SurfaceMismatch);
    }
    let f1 = pert.f1().values();
    let zeros = vec![0.0; f1.len()];
    let f2 = pert.f2().map_or(&zeros[..], |f| f.values());
    let (h1, h2, g1, g2): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = match pert.side() {
        Side::InverseMetric => (
            f1.to_vec(),
            f2.to_vec(),
            f1.iter().map(|a| -a).collect(),
            f1.iter().zip(f2).map(|(a, b)| a * a - b).collect(),
        ),
        Side::Metric => (
            f1.iter().map(|a| -a).collect(),
            f1.iter().map(|a| a * a).collect(),
            f1.to_vec(),
            zeros.clone(),
        ),
    };
    let as_op = |m: Vec<f64>| {
        if m.iter().all(|&v| v == 0.0) {
            NodeOperator::Zero
        } else {
            NodeOperator::ScaledLaplacian(m)
        }
    };
    Ok(PerturbationOperators {
        base: pair.clone(),
        side: Some(pert.side()),
        h1: as_op(h1),
        h2: as_op(h2),
        g1,
        g2,
    })
}

/// The exact discrete family at finite `t`: stiffness unchanged, mass
/// `M₀·diag(1/c(t))` where `c` is the inverse-metric conformal factor.
pub fn exact_perturbed_pair(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
    t: f64,
) -> Result<OperatorPair> {
    if pert.surface_id() != pair.surface_id() || pert.f1().len() != pair.dim() {
        return Err(Error::SurfaceMismatch);
    }
    let f1 = pert.f1().values();
    let mut mass = Vec::with_capacity(pair.dim());
    for (node, (&m, &a)) in pair.mass.iter().zip(f1).enumerate() {
        let factor = match pert.side() {
            Side::InverseMetric => {
                let b = pert.f2().map_or(0.0, |f| f.values()[node]);
                1.0 + t * a + t * t * b
            }
            Side::Metric => 1.0 + t * a,
        };
        if !(factor > 0.0) {
            return Err(Error::PositivityViolation {
                node,
                value: factor,
            });
        }
        mass.push(match pert.side() {
            Side::InverseMetric => m / factor,
            Side::Metric => m * factor,
        });
    }
    Ok(OperatorPair {
        surface_id: pair.surface_id,
        stiffness: Arc::clone(&pair.stiffness),
        mass,
    })
}

/// Pair whose inverse metric is `c·ḡ⁽⁰⁾` for a positive nodal factor `c`.
pub fn conformal_pair(pair: &OperatorPair, factor: &ScalarField) -> Result<OperatorPair> {
    if factor.surface_id() != pair.surface_id() || factor.len() != pair.dim() {
        return Err(Error::SurfaceMismatch);
    }
    let mut mass = Vec::with_capacity(pair.dim());
    for (node, (&m, &c)) in pair.mass.iter().zip(factor.values()).enumerate() {
        if !(c > 0.0) {
            return Err(Error::PositivityViolation { node, value: c });
        }
        mass.push(m / c);
    }
    Ok(OperatorPair {
        surface_id: pair.surface_id,
        stiffness: Arc::clone(&pair.stiffness),
        mass,
    })
}
