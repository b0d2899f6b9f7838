//! Rayleigh–Schrödinger corrections for `H(t) = Δ⁽⁰⁾ + tH₁ + t²H₂` under a
//! simultaneously perturbed inner product `⟨·,·⟩ + t⟨·,G₁·⟩ + t²⟨·,G₂·⟩`.
//!
//! With `Ψ` the `M₀`-orthonormal unperturbed eigenbasis and
//! `Bᵢₙ = ⟨ψᵢ, H₁ψₙ⟩` (the operator need not be `M₀`-symmetric):
//!
//! ```text
//! λₙ⁽¹⁾ = Bₙₙ
//! ψₙ⁽¹⁾ = Σ_{i∉[n]} Bᵢₙ/(λₙ − λᵢ) ψᵢ − ½⟨ψₙ, G₁ψₙ⟩ ψₙ
//! λₙ⁽²⁾ = Σ_{i∉[n]} Bᵢₙ Bₙᵢ/(λₙ − λᵢ) + ⟨ψₙ, H₂ψₙ⟩
//! ```
//!
//! where `[n]` is the degeneracy group of `n`. The eigenvalue corrections do
//! not read `G₁` or `G₂` at all; only the normalization coefficient of
//! `ψₙ⁽¹⁾` does.
//!
//! Inside a degeneracy group the basis must first be rotated so the projected
//! `H₁` is diagonal. Where first-order values still coincide, the rotation is
//! refined by diagonalizing the second-order effective matrix
//! `Wₐᵦ = Σ_{i∉G} Bₐᵢ Bᵢᵦ/(λ − λᵢ) + ⟨ψₐ, H₂ψᵦ⟩` on the tied subspace.

use faer::Mat;
use serde::Serialize;

use crate::assembly::{NodeOperator, OperatorPair, PerturbationOperators};
use crate::eigen::{GroupRotation, SpectralData};
use crate::error::{Error, Result};

/// Tail estimates above this fraction of the retained sum raise a warning.
pub const TRUNCATION_WARNING_RATIO: f64 = 0.01;

/// Relative gap below which a cross-group denominator is refused.
pub const DIVISION_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default)]
pub struct PerturbSettings {
    /// Number of modes retained in the second-order sums; `None` keeps every
    /// computed mode.
    pub truncation_modes: Option<usize>,
}

/// Second-order eigenvalue corrections with their truncation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    pub lambda2: Vec<f64>,
    /// The `H₁`-sum part of `λ⁽²⁾`.
    pub sum_term: Vec<f64>,
    /// The `⟨ψₙ, H₂ψₙ⟩` part of `λ⁽²⁾`.
    pub h2_term: Vec<f64>,
    /// Upper bound on the neglected part of the sum; zero for a full basis,
    /// `None` when no bound is available (the mode sits in the top group).
    pub tail_bound: Vec<Option<f64>>,
    pub truncation_warning: Vec<bool>,
    pub truncation_modes: usize,
}

/// Corrections for every retained mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionReport {
    pub eigenvalues: Vec<f64>,
    pub group_ids: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// Column `n` holds the coefficients of `ψₙ⁽¹⁾` in the adapted basis.
    pub psi1_coeffs: Mat<f64>,
    pub basis_rotations: Vec<GroupRotation>,
    pub truncation_modes: usize,
    pub tail_bound: Vec<Option<f64>>,
    pub truncation_warning: Vec<bool>,
    pub tol_deg: f64,
}

fn check_compatible(spec: &SpectralData, ops: &PerturbationOperators) -> Result<()> {
    if spec.surface_id() != ops.base().surface_id() || spec.node_count() != ops.base().dim() {
        return Err(Error::SurfaceMismatch);
    }
    Ok(())
}

fn truncation(spec: &SpectralData, settings: &PerturbSettings) -> Result<usize> {
    let n = settings.truncation_modes.unwrap_or(spec.n_modes());
    if n == 0 || n > spec.n_modes() {
        return Err(Error::ModeCountMismatch {
            expected: spec.n_modes(),
            got: n,
        });
    }
    Ok(n)
}

/// `⟨ψᵢ, op ψⱼ⟩` for `i < rows`, `j < cols`.
pub fn projected(
    spec: &SpectralData,
    pair: &OperatorPair,
    op: &NodeOperator,
    rows: usize,
    cols: usize,
) -> Mat<f64> {
    if matches!(op, NodeOperator::Zero) {
        return Mat::zeros(rows, cols);
    }
    let psi = spec.eigenvectors();
    let applied = op.apply_block(pair, psi.subcols(0, cols));
    let weighted = spec.mass_weighted_vectors();
    weighted.as_ref().subcols(0, rows).transpose() * applied
}

/// `⟨ψₙ, op ψₙ⟩` for every mode.
fn projected_diagonal(spec: &SpectralData, pair: &OperatorPair, op: &NodeOperator) -> Vec<f64> {
    if matches!(op, NodeOperator::Zero) {
        return vec![0.0; spec.n_modes()];
    }
    let psi = spec.eigenvectors();
    let applied = op.apply_block(pair, psi);
    (0..spec.n_modes())
        .map(|n| {
            (0..spec.node_count())
                .map(|i| psi.read(i, n) * spec.mass()[i] * applied.read(i, n))
                .sum()
        })
        .collect()
}

/// Symmetric eigendecomposition of a small matrix, eigenvalues ascending.
fn small_symmetric_eigen(m: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let evd = m.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let k = m.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s.read(a).total_cmp(&s.read(b)).then(a.cmp(&b)));
    let values = order.iter().map(|&i| s.read(i)).collect();
    let vectors = Mat::from_fn(k, k, |r, c| evd.u().read(r, order[c]));
    (values, vectors)
}

fn symmetrized(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |r, c| {
        0.5 * (m.read(r, c) + m.read(c, r))
    })
}

fn max_off_diagonal(m: &Mat<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if r != c {
                worst = worst.max(m.read(r, c).abs());
            }
        }
    }
    worst
}

fn max_abs(m: &Mat<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            worst = worst.max(m.read(r, c).abs());
        }
    }
    worst
}

/// Diagonalizing rotation of a symmetric block, or the identity when the
/// block is already diagonal at rounding level.
fn diagonalizing_rotation(block: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let k = block.nrows();
    if max_off_diagonal(block) <= 1e-13 * (1.0 + max_abs(block)) {
        let values = (0..k).map(|i| block.read(i, i)).collect();
        return (values, Mat::identity(k, k));
    }
    small_symmetric_eigen(block)
}

/// Clusters of (near-)equal values by single linkage; each cluster lists
/// positions in ascending order, clusters are ordered by their least value.
fn tie_clusters(values: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        if pos > 0 && values[idx] - values[order[pos - 1]] <= tol {
            clusters.last_mut().unwrap().push(idx);
        } else {
            clusters.push(vec![idx]);
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters
}

/// Rotates each nontrivial degeneracy group so that the projected `H₁` is
/// diagonal on it (refined at second order where first-order values tie).
/// Groups of size one are left untouched; the input is returned unchanged
/// when every group is a singleton.
pub fn adapt_degenerate_basis(
    spec: &SpectralData,
    ops: &PerturbationOperators,
) -> Result<SpectralData> {
    adapt_with(spec, ops, &PerturbSettings::default())
}

pub fn adapt_with(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    settings: &PerturbSettings,
) -> Result<SpectralData> {
    check_compatible(spec, ops)?;
    if spec.degeneracy_groups().iter().all(|g| g.len() == 1) {
        return Ok(spec.clone());
    }
    let n_trunc = truncation(spec, settings)?;
    let pair = ops.base();
    let n_modes = spec.n_modes();
    let b = projected(spec, pair, ops.h1(), n_modes, n_modes);
    let lambda = spec.eigenvalues();

    let mut vectors = spec.eigenvectors().to_owned();
    let mut rotations = Vec::new();
    for group in spec.degeneracy_groups().iter().filter(|g| g.len() > 1) {
        let k = group.len();
        let g0 = group.start;
        let level = lambda[group.clone()].iter().sum::<f64>() / k as f64;
        let block = Mat::from_fn(k, k, |r, c| b.read(g0 + r, g0 + c));
        let (mu, mut rot) = diagonalizing_rotation(&symmetrized(&block));
        let tie_tol = spec.tol_deg() * (1.0 + level.abs());

        // order columns by first-order value; refine tied clusters
        let clusters = tie_clusters(&mu, tie_tol);
        let mut columns: Vec<usize> = Vec::with_capacity(k);
        for cluster in clusters {
            if cluster.len() == 1 {
                columns.push(cluster[0]);
                continue;
            }
            let m = cluster.len();
            // Bₐᵢ and Bᵢᵦ for rotated group vectors a, b in the cluster
            let row_coeffs = |a: usize, i: usize| -> f64 {
                (0..k)
                    .map(|q| rot.read(q, cluster[a]) * b.read(g0 + q, i))
                    .sum()
            };
            let col_coeffs = |i: usize, a: usize| -> f64 {
                (0..k)
                    .map(|q| b.read(i, g0 + q) * rot.read(q, cluster[a]))
                    .sum()
            };
            let mut w = Mat::<f64>::zeros(m, m);
            for i in (0..n_trunc).filter(|i| !group.contains(i)) {
                let gap = level - lambda[i];
                let rows: Vec<f64> = (0..m).map(|a| row_coeffs(a, i)).collect();
                let cols: Vec<f64> = (0..m).map(|a| col_coeffs(i, a)).collect();
                for a in 0..m {
                    for c in 0..m {
                        let v = w.read(a, c) + rows[a] * cols[c] / gap;
                        w.write(a, c, v);
                    }
                }
            }
            if !matches!(ops.h2(), NodeOperator::Zero) {
                let sub = Mat::from_fn(pair.dim(), m, |r, a| {
                    (0..k)
                        .map(|q| vectors.read(r, g0 + q) * rot.read(q, cluster[a]))
                        .sum()
                });
                let applied = ops.h2().apply_block(pair, sub.as_ref());
                for a in 0..m {
                    for c in 0..m {
                        let h2: f64 = (0..pair.dim())
                            .map(|r| sub.read(r, a) * pair.mass()[r] * applied.read(r, c))
                            .sum();
                        w.write(a, c, w.read(a, c) + h2);
                    }
                }
            }
            let (_, inner) = diagonalizing_rotation(&symmetrized(&w));
            let old = Mat::from_fn(k, m, |q, a| rot.read(q, cluster[a]));
            let refined = &old * &inner;
            for (a, &col) in cluster.iter().enumerate() {
                for q in 0..k {
                    rot.write(q, col, refined.read(q, a));
                }
                columns.push(col);
            }
        }
        let mut ordered = Mat::from_fn(k, k, |q, c| rot.read(q, columns[c]));

        // rotate the group block and fix signs
        let old_block = vectors.as_ref().subcols(g0, k).to_owned();
        let mut new_block = &old_block * &ordered;
        for c in 0..k {
            let mut lead = 0;
            for r in 0..new_block.nrows() {
                if new_block.read(r, c).abs() > new_block.read(lead, c).abs() {
                    lead = r;
                }
            }
            if new_block.read(lead, c) < 0.0 {
                for r in 0..new_block.nrows() {
                    new_block.write(r, c, -new_block.read(r, c));
                }
                for q in 0..k {
                    ordered.write(q, c, -ordered.read(q, c));
                }
            }
        }
        for c in 0..k {
            for r in 0..new_block.nrows() {
                vectors.write(r, g0 + c, new_block.read(r, c));
            }
        }
        rotations.push(GroupRotation {
            group: group.clone(),
            rotation: ordered,
        });
    }
    Ok(spec.with_adapted_basis(vectors, rotations))
}

/// Largest off-diagonal entry of the projected `H₁` inside any degeneracy
/// group, relative to `1 + max |block entry|`.
pub fn adapted_block_defect(spec: &SpectralData, ops: &PerturbationOperators) -> Result<f64> {
    check_compatible(spec, ops)?;
    let b = projected(spec, ops.base(), ops.h1(), spec.n_modes(), spec.n_modes());
    let mut worst = 0.0f64;
    for g in spec.degeneracy_groups().iter().filter(|g| g.len() > 1) {
        let k = g.len();
        let block = Mat::from_fn(k, k, |r, c| b.read(g.start + r, g.start + c));
        worst = worst.max(max_off_diagonal(&block) / (1.0 + max_abs(&block)));
    }
    Ok(worst)
}

fn require_adapted(spec: &SpectralData) -> Result<()> {
    if spec.is_adapted() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "degenerate groups must be adapted before computing corrections".into(),
        ))
    }
}

/// `λₙ⁽¹⁾ = ⟨ψₙ, H₁ψₙ⟩` for every mode.
pub fn first_order(spec: &SpectralData, ops: &PerturbationOperators) -> Result<Vec<f64>> {
    check_compatible(spec, ops)?;
    require_adapted(spec)?;
    Ok(projected_diagonal(spec, ops.base(), ops.h1()))
}

fn guarded_gap(spec: &SpectralData, n: usize, i: usize) -> Result<f64> {
    let lambda = spec.eigenvalues();
    let gap = lambda[n] - lambda[i];
    if gap.abs() < DIVISION_GUARD * (1.0 + lambda[n].abs()) {
        return Err(Error::DivisionGuard {
            mode: n,
            other: i,
            gap: gap.abs(),
        });
    }
    Ok(gap)
}

/// Coefficients of `ψₙ⁽¹⁾` in the (adapted) unperturbed basis, over the
/// retained modes.
pub fn first_order_vector(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    n: usize,
    settings: &PerturbSettings,
) -> Result<Vec<f64>> {
    check_compatible(spec, ops)?;
    require_adapted(spec)?;
    let n_trunc = truncation(spec, settings)?;
    if n >= n_trunc {
        return Err(Error::ModeCountMismatch {
            expected: n_trunc,
            got: n + 1,
        });
    }
    let b = projected(spec, ops.base(), ops.h1(), n_trunc, n + 1);
    let group = &spec.degeneracy_groups()[spec.group_of(n)];
    let mut coeffs = vec![0.0; n_trunc];
    for (i, c) in coeffs.iter_mut().enumerate() {
        if !group.contains(&i) {
            *c = b.read(i, n) / guarded_gap(spec, n, i)?;
        }
    }
    coeffs[n] = normalization_coefficient(spec, ops.g1(), n);
    Ok(coeffs)
}

/// `−½⟨ψₙ, G₁ψₙ⟩`.
fn normalization_coefficient(spec: &SpectralData, g1: &[f64], n: usize) -> f64 {
    let psi = spec.eigenvectors();
    let s: f64 = (0..spec.node_count())
        .map(|i| {
            let v = psi.read(i, n);
            v * spec.mass()[i] * g1[i] * v
        })
        .sum();
    -0.5 * s
}

/// Second-order eigenvalue corrections.
pub fn second_order(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    settings: &PerturbSettings,
) -> Result<SecondOrder> {
    check_compatible(spec, ops)?;
    require_adapted(spec)?;
    let n_trunc = truncation(spec, settings)?;
    let b = projected(spec, ops.base(), ops.h1(), n_trunc, n_trunc);
    second_order_from(spec, ops, &b, n_trunc)
}

fn second_order_from(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    b: &Mat<f64>,
    n_trunc: usize,
) -> Result<SecondOrder> {
    let pair = ops.base();
    let h2_diag = projected_diagonal(spec, pair, ops.h2());
    let mut sum_term = Vec::with_capacity(n_trunc);
    for n in 0..n_trunc {
        let group = &spec.degeneracy_groups()[spec.group_of(n)];
        let mut s = 0.0;
        for i in (0..n_trunc).filter(|i| !group.contains(i)) {
            s += b.read(i, n) * b.read(n, i) / guarded_gap(spec, n, i)?;
        }
        sum_term.push(s);
    }
    let tail_bound = tail_bounds(spec, ops, b, n_trunc);
    let truncation_warning = tail_bound
        .iter()
        .zip(&sum_term)
        .map(|(t, s)| match t {
            Some(t) => *t > TRUNCATION_WARNING_RATIO * s.abs(),
            None => true,
        })
        .collect();
    let h2_term: Vec<f64> = h2_diag[..n_trunc].to_vec();
    let lambda2 = sum_term.iter().zip(&h2_term).map(|(a, b)| a + b).collect();
    Ok(SecondOrder {
        lambda2,
        sum_term,
        h2_term,
        tail_bound,
        truncation_warning,
        truncation_modes: n_trunc,
    })
}

/// Cauchy–Schwarz bound on `|Σ_{i≥N} Bᵢₙ Bₙᵢ/(λₙ − λᵢ)|` using Parseval for
/// the discarded coefficients and `λᵢ ≥ λ_{N−1}` for `i ≥ N`.
fn tail_bounds(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    b: &Mat<f64>,
    n_trunc: usize,
) -> Vec<Option<f64>> {
    if n_trunc == spec.node_count() || ops.h1().is_zero() {
        return vec![Some(0.0); n_trunc];
    }
    let pair = ops.base();
    let psi = spec.eigenvectors().subcols(0, n_trunc);
    let forward = ops.h1().apply_block(pair, psi);
    let adjoint = apply_adjoint(ops.h1(), pair, psi);
    let lambda = spec.eigenvalues();
    let top = lambda[n_trunc - 1];
    (0..n_trunc)
        .map(|n| {
            let gap = top - lambda[n];
            if gap <= DIVISION_GUARD * (1.0 + top.abs()) {
                return None;
            }
            let norm2 = |m: &Mat<f64>| -> f64 {
                (0..pair.dim())
                    .map(|r| pair.mass()[r] * m.read(r, n).powi(2))
                    .sum()
            };
            let col_kept: f64 = (0..n_trunc).map(|i| b.read(i, n).powi(2)).sum();
            let row_kept: f64 = (0..n_trunc).map(|i| b.read(n, i).powi(2)).sum();
            let col_tail = (norm2(&forward) - col_kept).max(0.0);
            let row_tail = (norm2(&adjoint) - row_kept).max(0.0);
            Some((col_tail * row_tail).sqrt() / gap)
        })
        .collect()
}

/// `M₀`-adjoint of an operator applied to a block: `M₀⁻¹opᵀM₀ x`.
fn apply_adjoint(op: &NodeOperator, pair: &OperatorPair, x: faer::MatRef<'_, f64>) -> Mat<f64> {
    match op {
        NodeOperator::Zero => Mat::zeros(x.nrows(), x.ncols()),
        // (F M₀⁻¹K)* = M₀⁻¹K F
        NodeOperator::ScaledLaplacian(m) => {
            let scaled = Mat::from_fn(x.nrows(), x.ncols(), |r, c| m[r] * x.read(r, c));
            let mut out = pair.stiffness().mul_dense(scaled.as_ref());
            for c in 0..out.ncols() {
                for r in 0..out.nrows() {
                    out.write(r, c, out.read(r, c) / pair.mass()[r]);
                }
            }
            out
        }
        NodeOperator::Dense(d) => {
            let mx = Mat::from_fn(x.nrows(), x.ncols(), |r, c| pair.mass()[r] * x.read(r, c));
            let mut out = d.transpose() * mx;
            for c in 0..out.ncols() {
                for r in 0..out.nrows() {
                    out.write(r, c, out.read(r, c) / pair.mass()[r]);
                }
            }
            out
        }
    }
}

/// Adapts the basis and computes every correction in one pass.
pub fn corrections(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    settings: &PerturbSettings,
) -> Result<CorrectionReport> {
    check_compatible(spec, ops)?;
    let adapted = adapt_with(spec, ops, settings)?;
    let n_trunc = truncation(&adapted, settings)?;
    let b = projected(&adapted, ops.base(), ops.h1(), n_trunc, n_trunc);
    let lambda1: Vec<f64> = (0..n_trunc).map(|n| b.read(n, n)).collect();
    let second = second_order_from(&adapted, ops, &b, n_trunc)?;

    let mut psi1 = Mat::zeros(n_trunc, n_trunc);
    for n in 0..n_trunc {
        let group = &adapted.degeneracy_groups()[adapted.group_of(n)];
        for i in (0..n_trunc).filter(|i| !group.contains(i)) {
            psi1.write(i, n, b.read(i, n) / guarded_gap(&adapted, n, i)?);
        }
        psi1.write(n, n, normalization_coefficient(&adapted, ops.g1(), n));
    }
    Ok(CorrectionReport {
        eigenvalues: adapted.eigenvalues()[..n_trunc].to_vec(),
        group_ids: (0..n_trunc).map(|n| adapted.group_of(n)).collect(),
        lambda1,
        lambda2: second.lambda2,
        psi1_coeffs: psi1,
        basis_rotations: adapted.rotations().map(<[_]>::to_vec).unwrap_or_default(),
        truncation_modes: n_trunc,
        tail_bound: second.tail_bound,
        truncation_warning: second.truncation_warning,
        tol_deg: adapted.tol_deg(),
    })
}

/// Textbook corrections for an `M₀`-symmetric `H₁` with unperturbed inner
/// product: `λₙ⁽²⁾ = Σ |⟨ψᵢ, H₁ψₙ⟩|²/(λₙ − λᵢ)`. The result is cross-checked
/// against the general formulas run with `G = 0`, `H₂ = 0`.
pub fn qm_special_case(
    pair: &OperatorPair,
    spec: &SpectralData,
    h1: &Mat<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = pair.dim();
    if h1.nrows() != n || h1.ncols() != n {
        return Err(Error::InvalidArgument(format!("H1 must be {n}x{n}")));
    }
    let mut defect = 0.0f64;
    let mut scale = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let a = pair.mass()[r] * h1.read(r, c);
            let b = h1.read(c, r) * pair.mass()[c];
            defect = defect.max((a - b).abs());
            scale = scale.max(a.abs());
        }
    }
    if defect > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SymmetryViolation { defect });
    }
    let ops = PerturbationOperators::general(
        pair,
        NodeOperator::Dense(h1.clone()),
        NodeOperator::Zero,
        vec![0.0; n],
        vec![0.0; n],
    )?;
    let adapted = adapt_degenerate_basis(spec, &ops)?;
    let n_modes = adapted.n_modes();
    let b = projected(&adapted, pair, ops.h1(), n_modes, n_modes);
    let lambda1: Vec<f64> = (0..n_modes).map(|k| b.read(k, k)).collect();
    let mut lambda2 = Vec::with_capacity(n_modes);
    let mut magnitude = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let group = &adapted.degeneracy_groups()[adapted.group_of(k)];
        let (mut s, mut m) = (0.0, 0.0);
        for i in (0..n_modes).filter(|i| !group.contains(i)) {
            let term = b.read(i, k).powi(2) / guarded_gap(&adapted, k, i)?;
            s += term;
            m += term.abs();
        }
        lambda2.push(s);
        magnitude.push(m);
    }

    let general1 = first_order(&adapted, &ops)?;
    let general2 = second_order(&adapted, &ops, &PerturbSettings::default())?.lambda2;
    for k in 0..n_modes {
        let agree1 = (general1[k] - lambda1[k]).abs() <= 1e-12 * (1.0 + lambda1[k].abs());
        let agree2 = (general2[k] - lambda2[k]).abs() <= 1e-12 * (1.0 + magnitude[k]);
        if !(agree1 && agree2) {
            return Err(Error::NumericalBreakdown(format!(
                "symmetric and general corrections disagree at mode {k}"
            )));
        }
    }
    Ok((lambda1, lambda2))
}

/// `⟨ψᵢ, f ψⱼ⟩` over the first `n` modes (symmetric).
pub fn field_matrix_elements(spec: &SpectralData, f: &[f64], n: usize) -> Mat<f64> {
    let psi = spec.eigenvectors().subcols(0, n);
    let weighted = Mat::from_fn(spec.node_count(), n, |r, c| {
        spec.mass()[r] * f[r] * psi.read(r, c)
    });
    psi.transpose() * weighted
}

/// `λₙ⁽⁰⁾⟨ψₙ, fψₙ⟩`: the first-order correction of a conformal
/// inverse-metric perturbation, computed from the field directly.
pub fn conformal_first_order(spec: &SpectralData, f: &[f64]) -> Vec<f64> {
    let psi = spec.eigenvectors();
    (0..spec.n_modes())
        .map(|n| {
            let diag: f64 = (0..spec.node_count())
                .map(|r| psi.read(r, n).powi(2) * spec.mass()[r] * f[r])
                .sum();
            spec.eigenvalues()[n] * diag
        })
        .collect()
}

#[derive(Serialize)]
struct ModeRecord {
    index: usize,
    group: usize,
    lambda0: f64,
    lambda1: f64,
    lambda2: f64,
    psi1_normalization: f64,
    tail_bound: Option<f64>,
    truncation_warning: bool,
}

#[derive(Serialize)]
struct RotationRecord {
    group_start: usize,
    group_len: usize,
    /// row-major
    matrix: Vec<f64>,
}

#[derive(Serialize)]
struct ReportRecord {
    schema_version: u32,
    tol_deg: f64,
    truncation_modes: usize,
    modes: Vec<ModeRecord>,
    basis_rotations: Vec<RotationRecord>,
}

impl CorrectionReport {
    pub fn to_json(&self) -> serde_json::Value {
        let modes = (0..self.lambda1.len())
            .map(|n| ModeRecord {
                index: n,
                group: self.group_ids[n],
                lambda0: self.eigenvalues[n],
                lambda1: self.lambda1[n],
                lambda2: self.lambda2[n],
                psi1_normalization: self.psi1_coeffs.read(n, n),
                tail_bound: self.tail_bound[n],
                truncation_warning: self.truncation_warning[n],
            })
            .collect();
        let basis_rotations = self
            .basis_rotations
            .iter()
            .map(|r| {
                let k = r.group.len();
                RotationRecord {
                    group_start: r.group.start,
                    group_len: k,
                    matrix: (0..k * k).map(|i| r.rotation.read(i / k, i % k)).collect(),
                }
            })
            .collect();
        serde_json::to_value(ReportRecord {
            schema_version: 1,
            tol_deg: self.tol_deg,
            truncation_modes: self.truncation_modes,
            modes,
            basis_rotations,
        })
        .expect("report is serializable")
    }
}
