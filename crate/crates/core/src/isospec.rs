//! Numerical experiments on isospectral conformal families: the obstruction
//! map behind the vanishing of `f⁽¹⁾`, a replay of the inductive elimination
//! argument, convexity probes along straight lines of (inverse) metrics, the
//! metric-side second-order identity, and a Weyl-law area estimate.

use std::io::Write;
use std::ops::Range;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{
    assemble_base, conformal_operators, conformal_pair, NodeOperator, PerturbationOperators,
};
use crate::eigen::{solve, solve_eigenvalues, SpectralData, DEFAULT_TOL_DEG};
use crate::error::{Error, Result};
use crate::perturb::{
    adapt_degenerate_basis, corrections, field_matrix_elements, first_order, second_order,
    PerturbSettings,
};
use crate::surface::{ConformalPerturbation, DiscreteSurface, ScalarField, SurfaceKind};
use crate::tracking::finite_differences;

/// Largest Gram-matrix condition number accepted for a field basis.
pub const MAX_BASIS_CONDITION: f64 = 1e12;

pub const DEFAULT_KERNEL_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// field bases

/// `1, cos, sin` in `x` times `1, cos, sin` in `y` at the lowest frequency of
/// a torus grid: nine fields.
pub fn fourier_basis(surface: &DiscreteSurface) -> Result<Vec<ScalarField>> {
    let d = surface.torus_dims().ok_or_else(|| {
        Error::InvalidArgument("the Fourier field basis needs a torus grid".into())
    })?;
    let tau = std::f64::consts::TAU;
    let factors = |u: f64, period: f64| {
        let a = tau * u / period;
        [1.0, a.cos(), a.sin()]
    };
    let mut fields = Vec::with_capacity(9);
    for by in 0..3 {
        for bx in 0..3 {
            let values = (0..surface.node_count())
                .map(|node| {
                    let p = surface.node_position(node);
                    factors(p[0], d.lx)[bx] * factors(p[1], d.ly)[by]
                })
                .collect();
            fields.push(ScalarField::new(surface, values)?);
        }
    }
    Ok(fields)
}

/// The first `d` unperturbed eigenvectors as fields (low-order vertex
/// harmonics).
pub fn harmonic_basis(
    surface: &DiscreteSurface,
    spec: &SpectralData,
    d: usize,
) -> Result<Vec<ScalarField>> {
    if d > spec.n_modes() {
        return Err(Error::InsufficientModes {
            needed: d,
            got: spec.n_modes(),
        });
    }
    (0..d)
        .map(|n| ScalarField::new(surface, spec.eigenvector(n)))
        .collect()
}

/// Fourier fields on a torus, vertex harmonics on a mesh.
pub fn default_field_basis(
    surface: &DiscreteSurface,
    spec: &SpectralData,
    d: usize,
) -> Result<Vec<ScalarField>> {
    match surface.kind() {
        SurfaceKind::TorusGrid => {
            let mut fields = fourier_basis(surface)?;
            fields.truncate(d);
            Ok(fields)
        }
        SurfaceKind::TriangleMesh => harmonic_basis(surface, spec, d),
    }
}

/// A smooth field with unit maximum modulus drawn from `seed`.
///
/// On a torus it is a random trigonometric polynomial of degree two in each
/// direction with coefficients decaying like `1/(1+m²+n²)`; on a mesh a sum of
/// six plane waves in the embedding coordinates with wave numbers up to `2π`.
pub fn random_smooth_field(surface: &DiscreteSurface, seed: u64) -> Result<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let n = surface.node_count();
    let mut values = vec![0.0; n];
    if let Some(d) = surface.torus_dims() {
        for m in -2i32..=2 {
            for k in 0..=2i32 {
                if k == 0 && m < 0 {
                    continue;
                }
                let weight = 1.0 / (1.0 + (m * m + k * k) as f64);
                let a = weight * rng.gen_range(-1.0..1.0);
                let b = weight * rng.gen_range(-1.0..1.0);
                for (node, v) in values.iter_mut().enumerate() {
                    let p = surface.node_position(node);
                    let phase = tau * (m as f64 * p[0] / d.lx + k as f64 * p[1] / d.ly);
                    *v += a * phase.cos() + b * phase.sin();
                }
            }
        }
    } else {
        for _ in 0..6 {
            let dir: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let phase0 = rng.gen_range(0.0..tau);
            let amp = rng.gen_range(-1.0..1.0);
            for (node, v) in values.iter_mut().enumerate() {
                let p = surface.node_position(node);
                let arg = tau * (dir[0] * p[0] + dir[1] * p[1] + dir[2] * p[2]) + phase0;
                *v += amp * arg.cos();
            }
        }
    }
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    ScalarField::new(surface, values)
}

/// `f` minus its `M₀`-orthogonal projection onto the products `ψᵢψⱼ` of
/// modes in a common degeneracy group among the first `n_modes`.
///
/// Every in-group matrix element of the result vanishes, so its diagonal is
/// zero in any basis adapted to it.
pub fn zero_diagonal_projection(
    spec: &SpectralData,
    f: &ScalarField,
    n_modes: usize,
) -> Result<ScalarField> {
    if n_modes > spec.n_modes() {
        return Err(Error::InsufficientModes {
            needed: n_modes,
            got: spec.n_modes(),
        });
    }
    if f.surface_id() != spec.surface_id() {
        return Err(Error::SurfaceMismatch);
    }
    let mass = spec.mass();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(mass).map(|((x, y), m)| x * m * y).sum()
    };
    // modified Gram-Schmidt, twice for stability, dropping dependent products
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for g in spec.degeneracy_groups() {
        if g.start >= n_modes {
            break;
        }
        for i in g.clone() {
            for j in i..g.end {
                let (pi, pj) = (spec.eigenvector(i), spec.eigenvector(j));
                let mut v: Vec<f64> = pi.iter().zip(&pj).map(|(a, b)| a * b).collect();
                let norm0 = dot(&v, &v).sqrt();
                for _ in 0..2 {
                    for q in &basis {
                        let c = dot(&v, q);
                        v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
                    }
                }
                let norm = dot(&v, &v).sqrt();
                if norm > 1e-8 * norm0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v);
                }
            }
        }
    }
    let mut out = f.values().to_vec();
    for _ in 0..2 {
        for q in &basis {
            let c = dot(&out, q);
            out.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
    ScalarField::on(f.surface_id(), out.len(), out)
}

// ---------------------------------------------------------------------------
// obstruction map

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstructionReport {
    pub n_modes: usize,
    pub field_dim: usize,
    /// Descending; `min(N², D)` values.
    pub singular_values: Vec<f64>,
    pub kernel_dim: usize,
    pub kernel_tol: f64,
    /// Singular values at or below this are counted in the kernel.
    pub threshold: f64,
    /// Condition number of the basis Gram matrix.
    pub gram_condition: f64,
}

impl ObstructionReport {
    /// `σ_min/σ_max` over the whole domain (zero when `D > N²`).
    pub fn conditioning(&self) -> f64 {
        if self.singular_values.len() < self.field_dim || self.singular_values.is_empty() {
            return 0.0;
        }
        let max = self.singular_values[0];
        if max == 0.0 {
            0.0
        } else {
            self.singular_values[self.singular_values.len() - 1] / max
        }
    }
}

/// The linear map `f ↦ {⟨ψᵢ, fψⱼ⟩}_{i,j<N}` on `span(basis)` (taken with the
/// `M₀` norm), its singular values and kernel dimension.
///
/// The kernel threshold is `kernel_tol·max(σ_max, √(N/area))`; the second term
/// is the singular value of the normalized constant field, so that a map
/// which is zero up to rounding still reports a full kernel.
pub fn obstruction_map(
    spec: &SpectralData,
    basis: &[ScalarField],
    n_modes: usize,
    kernel_tol: f64,
) -> Result<ObstructionReport> {
    if n_modes == 0 || n_modes > spec.n_modes() {
        return Err(Error::ModeCountMismatch {
            expected: spec.n_modes(),
            got: n_modes,
        });
    }
    if basis.is_empty() {
        return Err(Error::InvalidArgument("empty field basis".into()));
    }
    if !(kernel_tol > 0.0 && kernel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "kernel_tol must lie in (0, 1), got {kernel_tol}"
        )));
    }
    let nodes = spec.node_count();
    for f in basis {
        if f.surface_id() != spec.surface_id() || f.len() != nodes {
            return Err(Error::SurfaceMismatch);
        }
    }
    let d = basis.len();
    let mass = spec.mass();
    let gram = Mat::from_fn(d, d, |a, b| {
        let (fa, fb) = (basis[a].values(), basis[b].values());
        (0..nodes).map(|r| fa[r] * mass[r] * fb[r]).sum::<f64>()
    });
    let evd = gram.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..d {
        lo = lo.min(s.read(k));
        hi = hi.max(s.read(k));
    }
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_BASIS_CONDITION) {
        return Err(Error::RankDeficientBasis { condition });
    }
    // G^{-1/2} = U diag(s^{-1/2}) Uᵀ
    let u = evd.u();
    let inv_sqrt = Mat::from_fn(d, d, |a, b| {
        (0..d)
            .map(|k| u.read(a, k) * u.read(b, k) / s.read(k).sqrt())
            .sum::<f64>()
    });
    let raw = Mat::from_fn(nodes, d, |r, a| basis[a].values()[r]);
    let ortho = raw * &inv_sqrt;

    let psi = spec.eigenvectors().subcols(0, n_modes);
    let mut t = Mat::zeros(n_modes * n_modes, d);
    for a in 0..d {
        let weighted = Mat::from_fn(nodes, n_modes, |r, j| {
            mass[r] * ortho.read(r, a) * psi.read(r, j)
        });
        let block = psi.transpose() * weighted;
        for i in 0..n_modes {
            for j in 0..n_modes {
                t.write(i * n_modes + j, a, block.read(i, j));
            }
        }
    }
    let mut singular_values = t.singular_values();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let area: f64 = mass.iter().sum();
    let threshold = kernel_tol * sigma_max.max((n_modes as f64 / area).sqrt());
    let rank = singular_values.iter().filter(|&&v| v > threshold).count();
    Ok(ObstructionReport {
        n_modes,
        field_dim: d,
        singular_values,
        kernel_dim: d - rank,
        kernel_tol,
        threshold,
        gram_condition: condition,
    })
}

// ---------------------------------------------------------------------------
// induction verifier

/// Everything the elimination argument reads, for a conformal perturbation
/// with `H₁ = F Δ⁽⁰⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct InductionInput {
    pub eigenvalues: Vec<f64>,
    pub groups: Vec<Range<usize>>,
    /// `⟨ψᵢ, fψⱼ⟩`, symmetric.
    pub f_elements: Mat<f64>,
    /// Claimed first-order corrections.
    pub lambda1: Vec<f64>,
    /// Claimed second-order corrections.
    pub lambda2: Vec<f64>,
    /// `⟨ψₙ, H₂ψₙ⟩`.
    pub h2_diagonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCertificate {
    pub row: usize,
    /// `max_{i>n, i∉[n]} |⟨ψᵢ, fψₙ⟩|`
    pub row_max: f64,
    /// Bound on every element of the row deduced from the sign-definite
    /// remainder of `λₙ⁽²⁾`.
    pub deduced_bound: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionVerdict {
    pub passed: bool,
    /// The claimed `λ⁽²⁾` disagrees with the value recomputed from the
    /// matrix elements.
    pub inconsistent: bool,
    /// Largest `|claimed − recomputed|` for `λ⁽²⁾`, relative to `1 + λₙ⁽⁰⁾`.
    pub consistency_defect: f64,
    pub rows: Vec<RowCertificate>,
    pub tol: f64,
}

/// Runs the elimination on a conformal perturbation: adapts the basis,
/// computes the corrections and replays the argument on them.
pub fn induction_verifier(
    spec: &SpectralData,
    ops: &PerturbationOperators,
    tol: f64,
) -> Result<InductionVerdict> {
    let f = match ops.h1() {
        NodeOperator::Zero => vec![0.0; spec.node_count()],
        NodeOperator::ScaledLaplacian(m) => m.clone(),
        NodeOperator::Dense(_) => {
            return Err(Error::NotApplicable(
                "the induction needs H1 = F Δ for a nodal field F".into(),
            ))
        }
    };
    let adapted = adapt_degenerate_basis(spec, ops)?;
    let n = adapted.n_modes();
    let lambda1 = first_order(&adapted, ops)?;
    let second = second_order(&adapted, ops, &PerturbSettings::default())?;
    let input = InductionInput {
        eigenvalues: adapted.eigenvalues().to_vec(),
        groups: adapted.degeneracy_groups().to_vec(),
        f_elements: field_matrix_elements(&adapted, &f, n),
        lambda1,
        lambda2: second.lambda2,
        h2_diagonal: second.h2_term,
    };
    replay_induction(&input, tol)
}

fn group_index(groups: &[Range<usize>], n: usize) -> usize {
    groups.partition_point(|g| g.end <= n).min(groups.len() - 1)
}

/// The elimination argument itself, on explicit data.
///
/// With `λ⁽¹⁾ = 0` and `λ⁽²⁾ = 0`, row `n ≥ 1` of the second-order formula
/// splits into a nonnegative part over lower modes (already shown to vanish)
/// and a nonpositive part over higher modes, which must then vanish term by
/// term. Row `n` is certified when every `|⟨ψᵢ, fψₙ⟩|`, `i > n`, is at most
/// `tol`. The constant mode is excluded since `λ₀⁽⁰⁾ = 0` hides its row.
pub fn replay_induction(input: &InductionInput, tol: f64) -> Result<InductionVerdict> {
    let n_modes = input.eigenvalues.len();
    let lambda = &input.eigenvalues;
    let f = &input.f_elements;
    if f.nrows() != n_modes
        || f.ncols() != n_modes
        || input.lambda1.len() != n_modes
        || input.lambda2.len() != n_modes
        || input.h2_diagonal.len() != n_modes
    {
        return Err(Error::ModeCountMismatch {
            expected: n_modes,
            got: f.nrows(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol must be positive, got {tol}"
        )));
    }
    let scale = |n: usize| 1.0 + lambda[n].abs();
    if let Some(n) = (0..n_modes).find(|&n| input.lambda1[n].abs() > tol * scale(n)) {
        return Err(Error::NotApplicable(format!(
            "first-order correction of mode {n} is {} (not isospectral at first order)",
            input.lambda1[n]
        )));
    }

    // recompute λ⁽²⁾ directly from the elements
    let mut defect = 0.0f64;
    for n in 0..n_modes {
        let g = &input.groups[group_index(&input.groups, n)];
        let mut s = input.h2_diagonal[n];
        for i in (0..n_modes).filter(|i| !g.contains(i)) {
            s += lambda[n] * lambda[i] * f.read(i, n).powi(2) / (lambda[n] - lambda[i]);
        }
        defect = defect.max((s - input.lambda2[n]).abs() / scale(n));
    }
    let inconsistent = defect > tol;
    if inconsistent {
        return Ok(InductionVerdict {
            passed: false,
            inconsistent,
            consistency_defect: defect,
            rows: Vec::new(),
            tol,
        });
    }
    if let Some(n) = (0..n_modes).find(|&n| input.lambda2[n].abs() > tol * scale(n)) {
        return Err(Error::NotApplicable(format!(
            "second-order correction of mode {n} is {} (not isospectral at second order)",
            input.lambda2[n]
        )));
    }

    let mut rows = Vec::new();
    for n in 1..n_modes {
        let g = &input.groups[group_index(&input.groups, n)];
        let others = |i: &usize| *i >= 1 && !g.contains(i);
        // nonnegative part from rows already certified
        let lower: f64 = (0..n)
            .filter(others)
            .map(|i| lambda[n] * lambda[i] * f.read(i, n).powi(2) / (lambda[n] - lambda[i]))
            .sum();
        // what the nonpositive part over higher modes must equal
        let remainder = input.lambda2[n] - input.h2_diagonal[n] - lower;
        let higher: Vec<usize> = (n + 1..n_modes).filter(others).collect();
        let deduced_bound = higher
            .iter()
            .map(|&i| {
                let weight = lambda[n] * lambda[i] / (lambda[i] - lambda[n]);
                (remainder.abs() / weight).sqrt()
            })
            .fold(0.0, f64::max);
        let row_max = higher
            .iter()
            .map(|&i| f.read(i, n).abs())
            .fold(0.0, f64::max);
        rows.push(RowCertificate {
            row: n,
            row_max,
            deduced_bound,
            certified: row_max <= tol,
        });
    }
    Ok(InductionVerdict {
        passed: rows.iter().all(|r| r.certified),
        inconsistent: false,
        consistency_defect: defect,
        rows,
        tol,
    })
}

// ---------------------------------------------------------------------------
// convexity probe

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityProbeReport {
    pub tau_grid: Vec<f64>,
    pub n_modes: usize,
    /// Eigenvalues at each `τ`.
    pub spectra: Vec<Vec<f64>>,
    /// Per `τ`, `maxₙ |λₙ(τ) − λₙ(0)| / max(|λₙ(0)|, λ₁(0))`.
    pub spectral_distances: Vec<f64>,
    /// The same measure between the spectra of the two endpoints.
    pub endpoints_isospectral_gap: f64,
    /// Distance divided by `τ` at the smallest positive `τ` of the grid: the
    /// initial rate at which the blend leaves the `τ = 0` spectrum.
    pub leading_rate: Option<f64>,
    /// Eigenvalues at `τ = 0`.
    pub reference_spectrum: Vec<f64>,
}

fn relative_distance(a: &[f64], reference: &[f64]) -> f64 {
    let floor = reference.get(1).copied().unwrap_or(0.0).abs();
    a.iter()
        .zip(reference)
        .map(|(x, r)| {
            let scale = r.abs().max(floor);
            if scale == 0.0 {
                (x - r).abs()
            } else {
                (x - r).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Blends the inverse-metric factors `τc₁ + (1−τ)c₂` and measures how far the
/// spectrum moves from the `τ = 0` spectrum.
pub fn convexity_probe(
    surface: &DiscreteSurface,
    c1: &ScalarField,
    c2: &ScalarField,
    n_modes: usize,
    tau_grid: &[f64],
) -> Result<ConvexityProbeReport> {
    if tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument(
            "tau values must lie in [0, 1]".into(),
        ));
    }
    if c1.surface_id() != surface.id() || c2.surface_id() != surface.id() {
        return Err(Error::SurfaceMismatch);
    }
    let pair = assemble_base(surface)?;
    let spectrum_at = |tau: f64| -> Result<Vec<f64>> {
        let factor = c1.combine(tau, c2, 1.0 - tau)?;
        solve_eigenvalues(&conformal_pair(&pair, &factor)?, n_modes)
    };
    let mut taus = vec![0.0, 1.0];
    taus.extend_from_slice(tau_grid);
    let mut spectra = parallel_map(&taus, |&tau| spectrum_at(tau))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let grid_spectra = spectra.split_off(2);
    let (reference, other_end) = (&spectra[0], &spectra[1]);
    let spectral_distances: Vec<f64> = grid_spectra
        .iter()
        .map(|s| relative_distance(s, reference))
        .collect();
    let leading_rate = tau_grid
        .iter()
        .zip(&spectral_distances)
        .filter(|(tau, _)| **tau > 0.0)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map(|(tau, d)| d / tau);
    Ok(ConvexityProbeReport {
        tau_grid: tau_grid.to_vec(),
        n_modes,
        spectral_distances,
        endpoints_isospectral_gap: relative_distance(other_end, reference),
        leading_rate,
        reference_spectrum: reference.clone(),
        spectra: grid_spectra,
    })
}

/// `items.map(f)` on scoped worker threads; results keep the input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len())
        .max(1);
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

impl ConvexityProbeReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report is serializable");
        v["schema_version"] = 1.into();
        v
    }

    /// `tau_or_t,mode,eigenvalue,deviation` rows; the deviation is relative to
    /// the `τ = 0` spectrum, which is the reference of every distance.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# schema_version: 1")?;
        writeln!(out, "tau_or_t,mode,eigenvalue,deviation")?;
        for (tau, spectrum) in self.tau_grid.iter().zip(&self.spectra) {
            for (n, v) in spectrum.iter().enumerate() {
                writeln!(
                    out,
                    "{:?},{},{:?},{:?}",
                    tau,
                    n,
                    v,
                    v - self.reference_spectrum[n]
                )?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// metric-side probe

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricProbeMode {
    pub index: usize,
    pub group: usize,
    pub lambda0: f64,
    pub lambda1: f64,
    /// `λ⁽²⁾` from the general second-order formula.
    pub lambda2_generic: f64,
    /// `Σ_{i∉[n]} (λₙ)²|⟨ψᵢ, fψₙ⟩|²/(λₙ − λᵢ)`.
    pub lambda2_collapsed: f64,
    /// `λₙ Σ_{i∈[n]} |⟨ψᵢ, fψₙ⟩|²`, zero when `f` has vanishing diagonal.
    pub in_group_term: f64,
    /// `|generic − collapsed − in_group_term|`.
    pub identity_defect: f64,
    /// `|⟨ψₙ, f²ψₙ⟩ − Σᵢ |⟨ψᵢ, fψₙ⟩|²|` over the retained modes.
    pub parseval_defect: f64,
    /// `|⟨ψₙ, f²ψₙ⟩ − Σ_{i≠n} |⟨ψᵢ, fψₙ⟩|²|`, which equals `⟨ψₙ, fψₙ⟩²` up
    /// to the Parseval defect.
    pub off_diagonal_defect: f64,
    /// `|⟨ψₙ, fψₙ⟩|`
    pub diagonal: f64,
    pub tail_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricProbeStep {
    pub t: f64,
    /// Tracked exact eigenvalues at `t`.
    pub exact: Vec<f64>,
    pub fd_first: Vec<f64>,
    pub fd_second: Vec<f64>,
    /// `max |fd − λ⁽¹⁾| / max(|λ⁽¹⁾|, λₙ⁽⁰⁾)` over nonconstant modes.
    pub first_rel_error: f64,
    pub second_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricProbeReport {
    pub n_modes: usize,
    pub truncation_modes: usize,
    pub modes: Vec<MetricProbeMode>,
    pub steps: Vec<MetricProbeStep>,
}

impl MetricProbeReport {
    pub fn max_identity_defect(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| m.identity_defect)
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report is serializable");
        v["schema_version"] = 1.into();
        v
    }

    /// `tau_or_t,mode,eigenvalue,deviation` rows: the exact eigenvalue at `t`
    /// and its difference from `λ⁽⁰⁾ + tλ⁽¹⁾ + t²λ⁽²⁾`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# schema_version: 1")?;
        writeln!(out, "tau_or_t,mode,eigenvalue,deviation")?;
        for step in &self.steps {
            let t = step.t;
            for (m, exact) in self.modes.iter().zip(&step.exact) {
                let predicted = m.lambda0 + t * m.lambda1 + t * t * m.lambda2_generic;
                writeln!(
                    out,
                    "{:?},{},{:?},{:?}",
                    t,
                    m.index,
                    exact,
                    exact - predicted
                )?;
            }
        }
        Ok(())
    }
}

/// Relative error with floor `λₙ⁽⁰⁾`, maximized over the nonconstant modes.
pub fn relative_error(estimate: &[f64], exact: &[f64], lambda0: &[f64]) -> f64 {
    (1..estimate.len())
        .map(|n| (estimate[n] - exact[n]).abs() / exact[n].abs().max(lambda0[n].abs()))
        .fold(0.0, f64::max)
}

/// Second-order analysis of the metric perturbation `g = g⁽⁰⁾(1 + tf)` over the
/// full unperturbed basis, with finite-difference checks at each `t`.
pub fn metric_side_probe(
    surface: &DiscreteSurface,
    f: &ScalarField,
    n_modes: usize,
    t_grid: &[f64],
) -> Result<MetricProbeReport> {
    let pair = assemble_base(surface)?;
    let nodes = pair.dim();
    if n_modes == 0 || n_modes > nodes {
        return Err(Error::ModeCountMismatch {
            expected: nodes,
            got: n_modes,
        });
    }
    let pert = ConformalPerturbation::metric(f.clone());
    for &t in t_grid {
        for s in [t, -t] {
            if let Some(node) = f.values().iter().position(|v| !(1.0 + s * v > 0.0)) {
                return Err(Error::PositivityViolation {
                    node,
                    value: 1.0 + s * f.values()[node],
                });
            }
        }
    }
    let spec = solve(&pair, nodes, DEFAULT_TOL_DEG)?;
    let ops = conformal_operators(&pair, &pert)?;
    let adapted = adapt_degenerate_basis(&spec, &ops)?;
    let report = corrections(&spec, &ops, &PerturbSettings::default())?;
    let lambda = adapted.eigenvalues();
    let elems = field_matrix_elements(&adapted, f.values(), nodes);
    let f2: Vec<f64> = f.values().iter().map(|v| v * v).collect();

    let mut modes = Vec::with_capacity(n_modes);
    for n in 0..n_modes {
        let g = &adapted.degeneracy_groups()[adapted.group_of(n)];
        let mut collapsed = 0.0;
        let mut in_group = 0.0;
        let mut parseval = 0.0;
        for i in 0..nodes {
            let e2 = elems.read(i, n).powi(2);
            parseval += e2;
            if g.contains(&i) {
                in_group += e2;
            } else {
                collapsed += lambda[n] * lambda[n] * e2 / (lambda[n] - lambda[i]);
            }
        }
        let psi = adapted.eigenvector(n);
        let f2_nn: f64 = (0..nodes)
            .map(|r| psi[r] * adapted.mass()[r] * f2[r] * psi[r])
            .sum();
        let in_group_term = lambda[n] * in_group;
        modes.push(MetricProbeMode {
            index: n,
            group: adapted.group_of(n),
            lambda0: lambda[n],
            lambda1: report.lambda1[n],
            lambda2_generic: report.lambda2[n],
            lambda2_collapsed: collapsed,
            in_group_term,
            identity_defect: (report.lambda2[n] - collapsed - in_group_term).abs(),
            parseval_defect: (f2_nn - parseval).abs(),
            off_diagonal_defect: (f2_nn - (parseval - elems.read(n, n).powi(2))).abs(),
            diagonal: elems.read(n, n).abs(),
            tail_bound: report.tail_bound[n],
        });
    }

    let steps = parallel_map(t_grid, |&t| -> Result<MetricProbeStep> {
        let fd = finite_differences(&pair, &pert, &report, n_modes, t.abs())?;
        Ok(MetricProbeStep {
            t,
            exact: if t > 0.0 {
                fd.plus.clone()
            } else {
                fd.minus.clone()
            },
            first_rel_error: relative_error(&fd.first, &report.lambda1[..n_modes], lambda),
            second_rel_error: relative_error(&fd.second, &report.lambda2[..n_modes], lambda),
            fd_first: fd.first,
            fd_second: fd.second,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricProbeReport {
        n_modes,
        truncation_modes: report.truncation_modes,
        modes,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Weyl law

pub const WEYL_MIN_MODES: usize = 50;

/// Area `A` from the least-squares fit `N(λ) ≈ (A/4π)·λ` through the origin.
///
/// Each nonzero eigenvalue `λₖ` contributes the point `(λₖ, k + ½)`, the
/// midpoint of the jump of the counting function there; the zero mode is
/// left out.
pub fn weyl_volume_estimate(spec: &SpectralData) -> Result<f64> {
    let n = spec.n_modes();
    if n < WEYL_MIN_MODES {
        return Err(Error::InsufficientModes {
            needed: WEYL_MIN_MODES,
            got: n,
        });
    }
    let lambda = spec.eigenvalues();
    let floor = 1e-10 * lambda[n - 1].abs();
    let (mut snl, mut sll) = (0.0, 0.0);
    for (k, &l) in lambda.iter().enumerate() {
        if l.abs() <= floor {
            continue;
        }
        snl += (k as f64 + 0.5) * l;
        sll += l * l;
    }
    if sll == 0.0 {
        return Err(Error::NumericalBreakdown(
            "no nonzero eigenvalues to fit".into(),
        ));
    }
    Ok(4.0 * std::f64::consts::PI * snl / sll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{exact_perturbed_pair, SparseMatrix};
    use crate::surface::{field_from_expression, make_torus};

    fn torus(n: usize) -> (DiscreteSurface, SpectralData) {
        let s = make_torus(n, n, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, n * n, DEFAULT_TOL_DEG).unwrap();
        (s, spec)
    }

    #[test]
    fn fourier_basis_is_well_conditioned() {
        let (s, spec) = torus(8);
        let basis = fourier_basis(&s).unwrap();
        assert_eq!(basis.len(), 9);
        let r = obstruction_map(&spec, &basis, 9, DEFAULT_KERNEL_TOL).unwrap();
        assert!(r.gram_condition < 5.0);
        assert_eq!(r.singular_values.len(), 9);
    }

    #[test]
    fn constant_field_has_unit_diagonal() {
        let (s, spec) = torus(8);
        let one = ScalarField::constant(&s, 1.0).unwrap();
        for n in [1, 3, 7] {
            let r =
                obstruction_map(&spec, std::slice::from_ref(&one), n, DEFAULT_KERNEL_TOL).unwrap();
            assert_eq!(r.kernel_dim, 0);
            // the normalized constant has norm 1 and maps to I: σ = √N
            assert!((r.singular_values[0] - (n as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_constant_mode_misses_zero_mean_fields() {
        let (s, spec) = torus(8);
        let f = field_from_expression(&s, "cos(2*pi*x)").unwrap();
        // the one matrix element is the integral of f against a constant
        let direct: f64 = f.values().iter().zip(spec.mass()).map(|(a, m)| a * m).sum();
        assert!(direct.abs() < 1e-14);
        let r = obstruction_map(&spec, &[f], 1, DEFAULT_KERNEL_TOL).unwrap();
        assert_eq!(r.kernel_dim, 1);
    }

    #[test]
    fn dependent_basis_is_rejected() {
        let (s, spec) = torus(8);
        let f = field_from_expression(&s, "cos(2*pi*x)").unwrap();
        let g = f.scaled(2.0);
        assert!(matches!(
            obstruction_map(&spec, &[f, g], 5, DEFAULT_KERNEL_TOL),
            Err(Error::RankDeficientBasis { .. })
        ));
    }

    #[test]
    fn singular_values_match_gram_of_the_map() {
        // σ² are the eigenvalues of TᵀT = Σᵢⱼ ⟨ψᵢ,qₐψⱼ⟩⟨ψᵢ,q_bψⱼ⟩
        let (s, spec) = torus(8);
        let basis = fourier_basis(&s).unwrap();
        let r = obstruction_map(&spec, &basis, 12, DEFAULT_KERNEL_TOL).unwrap();
        let sum_sq: f64 = r.singular_values.iter().map(|v| v * v).sum();
        // ‖T‖_F² is basis independent: Σₐ Σᵢⱼ ⟨ψᵢ, qₐψⱼ⟩² for any orthonormal qₐ
        let gram = Mat::from_fn(9, 9, |a, b| {
            (0..64)
                .map(|r| basis[a].values()[r] * spec.mass()[r] * basis[b].values()[r])
                .sum::<f64>()
        });
        // here the Fourier fields are already orthogonal
        let mut frob = 0.0;
        for (a, q) in basis.iter().enumerate() {
            let e = field_matrix_elements(&spec, q.values(), 12);
            let norm2 = gram.read(a, a);
            for i in 0..12 {
                for j in 0..12 {
                    frob += e.read(i, j).powi(2) / norm2;
                }
            }
        }
        assert!((sum_sq - frob).abs() < 1e-10 * frob);
    }

    #[test]
    fn induction_passes_for_zero_field() {
        let (s, spec) = torus(6);
        let pair = assemble_base(&s).unwrap();
        let ops = conformal_operators(
            &pair,
            &ConformalPerturbation::inverse_metric(ScalarField::zeros(&s)),
        )
        .unwrap();
        let v = induction_verifier(&spec, &ops, 1e-8).unwrap();
        assert!(v.passed);
        assert!(v.rows.iter().all(|r| r.row_max == 0.0));
    }

    #[test]
    fn induction_rejects_first_order_shift() {
        let (s, spec) = torus(6);
        let pair = assemble_base(&s).unwrap();
        let f = field_from_expression(&s, "1 + cos(2*pi*x)").unwrap();
        let ops = conformal_operators(&pair, &ConformalPerturbation::inverse_metric(f)).unwrap();
        assert!(matches!(
            induction_verifier(&spec, &ops, 1e-8),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn induction_rejects_second_order_shift() {
        // cos 2πx has zero diagonal but a nonzero second-order shift
        let (s, spec) = torus(6);
        let pair = assemble_base(&s).unwrap();
        let f = field_from_expression(&s, "cos(2*pi*x)").unwrap();
        let ops = conformal_operators(&pair, &ConformalPerturbation::inverse_metric(f)).unwrap();
        assert!(matches!(
            induction_verifier(&spec, &ops, 1e-8),
            Err(Error::NotApplicable(_))
        ));
    }

    fn synthetic_input(n: usize) -> InductionInput {
        let eigenvalues: Vec<f64> = (0..n).map(|k| k as f64).collect();
        InductionInput {
            groups: (0..n).map(|k| k..k + 1).collect(),
            eigenvalues,
            f_elements: Mat::zeros(n, n),
            lambda1: vec![0.0; n],
            lambda2: vec![0.0; n],
            h2_diagonal: vec![0.0; n],
        }
    }

    #[test]
    fn forced_second_order_is_flagged() {
        let mut input = synthetic_input(6);
        input.lambda2[3] = 0.5;
        let v = replay_induction(&input, 1e-8).unwrap();
        assert!(!v.passed);
        assert!(v.inconsistent);
    }

    #[test]
    fn nonzero_element_is_never_certified() {
        // consistent data whose second-order shifts cancel against H₂
        let mut input = synthetic_input(6);
        let e = 1e-3;
        input.f_elements.write(2, 4, e);
        input.f_elements.write(4, 2, e);
        let l = &input.eigenvalues;
        let t2 = l[2] * l[4] * e * e / (l[2] - l[4]);
        let t4 = l[4] * l[2] * e * e / (l[4] - l[2]);
        input.h2_diagonal[2] = -t2;
        input.h2_diagonal[4] = -t4;
        let v = replay_induction(&input, 1e-8).unwrap();
        assert!(!v.inconsistent);
        assert!(!v.passed);
        assert!(!v.rows[1].certified);
        assert!((v.rows[1].row_max - e).abs() < 1e-18);
    }

    #[test]
    fn equal_endpoints_do_not_move() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let c = field_from_expression(&s, "1 + 0.2*cos(2*pi*x)").unwrap();
        let r = convexity_probe(&s, &c, &c, 10, &[0.0, 0.5, 1.0]).unwrap();
        assert!(r.spectral_distances.iter().all(|d| *d <= 1e-12));
        assert!(r.endpoints_isospectral_gap <= 1e-12);
    }

    #[test]
    fn constant_endpoints_scale_the_spectrum() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let c1 = ScalarField::constant(&s, 1.0).unwrap();
        let c2 = ScalarField::constant(&s, 2.0).unwrap();
        let taus = [0.0, 0.25, 0.5, 1.0];
        let r = convexity_probe(&s, &c1, &c2, 10, &taus).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            // factor τ + 2(1−τ) against 2 at τ = 0
            let want = ((tau + 2.0 * (1.0 - tau)) / 2.0 - 1.0).abs();
            assert!((r.spectral_distances[k] - want).abs() < 1e-12);
        }
        assert!((r.endpoints_isospectral_gap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blend_follows_perturbation_series() {
        // with c₁ = 1 the blend is the inverse-metric family with
        // f = c₂ − 1 at t = 1 − τ
        let s = make_torus(12, 12, 1.0, 1.0).unwrap();
        let c1 = ScalarField::constant(&s, 1.0).unwrap();
        let c2 = field_from_expression(&s, "1 + 0.2*cos(2*pi*x)").unwrap();
        let taus = [1.0, 0.99, 0.995];
        let r = convexity_probe(&s, &c1, &c2, 9, &taus).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 144, DEFAULT_TOL_DEG).unwrap();
        let f = c2.combine(1.0, &c1, -1.0).unwrap();
        let pert = ConformalPerturbation::inverse_metric(f);
        let ops = conformal_operators(&pair, &pert).unwrap();
        let rep = corrections(&spec, &ops, &PerturbSettings::default()).unwrap();
        for (k, &tau) in taus.iter().enumerate().skip(1) {
            let t = 1.0 - tau;
            let exact =
                solve_eigenvalues(&exact_perturbed_pair(&pair, &pert, t).unwrap(), 9).unwrap();
            for n in 0..9 {
                assert!((r.spectra[k][n] - exact[n]).abs() < 1e-9 * (1.0 + exact[n]));
            }
            let mut pred: Vec<f64> = (0..9)
                .map(|n| crate::tracking::predicted(&rep, n, t))
                .collect();
            pred.sort_by(f64::total_cmp);
            for n in 0..9 {
                assert!((pred[n] - exact[n]).abs() < 50.0 * t.powi(3) * (1.0 + exact[n]));
            }
        }
    }

    #[test]
    fn nonpositive_blend_is_reported() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let c1 = ScalarField::constant(&s, 1.0).unwrap();
        let c2 = field_from_expression(&s, "cos(2*pi*x)").unwrap();
        assert!(matches!(
            convexity_probe(&s, &c1, &c2, 5, &[0.5]),
            Err(Error::PositivityViolation { .. })
        ));
    }

    #[test]
    fn metric_probe_constant_field() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let f = ScalarField::constant(&s, 0.3).unwrap();
        let r = metric_side_probe(&s, &f, 10, &[1e-3]).unwrap();
        for m in &r.modes {
            assert!((m.lambda1 + 0.3 * m.lambda0).abs() < 1e-10 * (1.0 + m.lambda0));
        }
        assert!(r.modes[0].lambda2_collapsed.abs() < 1e-30);
    }

    #[test]
    fn metric_probe_zero_field() {
        let s = make_torus(6, 6, 1.0, 1.0).unwrap();
        let r = metric_side_probe(&s, &ScalarField::zeros(&s), 8, &[]).unwrap();
        for m in &r.modes {
            assert_eq!(m.lambda1, 0.0);
            assert_eq!(m.lambda2_generic, 0.0);
            assert_eq!(m.lambda2_collapsed, 0.0);
        }
    }

    #[test]
    fn metric_probe_rejects_nonpositive_metric() {
        let s = make_torus(6, 6, 1.0, 1.0).unwrap();
        let f = field_from_expression(&s, "cos(2*pi*x)").unwrap();
        assert!(matches!(
            metric_side_probe(&s, &f, 4, &[1.5]),
            Err(Error::PositivityViolation { .. })
        ));
    }

    #[test]
    fn weyl_needs_fifty_modes() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 10, DEFAULT_TOL_DEG).unwrap();
        assert!(matches!(
            weyl_volume_estimate(&spec),
            Err(Error::InsufficientModes {
                needed: 50,
                got: 10
            })
        ));
    }

    #[test]
    fn weyl_on_a_scaled_graph_laplacian() {
        // cycle-product graph Laplacian with M₀ = a·I: the spectrum is the
        // torus symbol scaled by 1/a, so the fit scales with trace(M₀)
        let n = 16;
        let a = 1.0 / (n * n) as f64;
        let mut triplets = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let p = j * n + i;
                triplets.push((p, p, 4.0));
                for q in [
                    j * n + (i + 1) % n,
                    j * n + (i + n - 1) % n,
                    ((j + 1) % n) * n + i,
                    ((j + n - 1) % n) * n + i,
                ] {
                    triplets.push((p, q, -1.0));
                }
            }
        }
        let k = SparseMatrix::from_triplets(n * n, triplets);
        let pair = crate::assembly::OperatorPair::synthetic(k.clone(), vec![a; n * n]).unwrap();
        let spec = solve(&pair, 100, DEFAULT_TOL_DEG).unwrap();
        let area = weyl_volume_estimate(&spec).unwrap();
        assert!((area - 1.0).abs() < 0.3, "area {area}");
        let pair2 = crate::assembly::OperatorPair::synthetic(k, vec![3.0 * a; n * n]).unwrap();
        let spec2 = solve(&pair2, 100, DEFAULT_TOL_DEG).unwrap();
        let area2 = weyl_volume_estimate(&spec2).unwrap();
        assert!((area2 / area - 3.0).abs() < 1e-9);
    }

    #[test]
    fn projection_removes_in_group_elements() {
        let (s, spec) = torus(8);
        let f = field_from_expression(&s, "1 + x*y + cos(2*pi*x)*cos(2*pi*y)").unwrap();
        let p = zero_diagonal_projection(&spec, &f, 13).unwrap();
        let e = field_matrix_elements(&spec, p.values(), 13);
        for g in &spec.degeneracy_groups()[..4] {
            for i in g.clone() {
                for j in g.clone() {
                    assert!(e.read(i, j).abs() < 1e-13);
                }
            }
        }
        // idempotent
        let q = zero_diagonal_projection(&spec, &p, 13).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn random_fields_are_reproducible_and_normalized() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let a = random_smooth_field(&s, 7).unwrap();
        let b = random_smooth_field(&s, 7).unwrap();
        let c = random_smooth_field(&s, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a.max_abs() - 1.0).abs() < 1e-15);
    }
}
