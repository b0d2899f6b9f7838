//! Independent oracles for the solver and the experiments.

use faer::Mat;
use proptest::prelude::*;

use isospec_core::assembly::{
    assemble_base, conformal_operators, exact_perturbed_pair, OperatorPair, SparseMatrix,
};
use isospec_core::eigen::{solve, solve_eigenvalues, DEFAULT_TOL_DEG};
use isospec_core::isospec::{
    convexity_probe, fourier_basis, metric_side_probe, obstruction_map, weyl_volume_estimate,
    DEFAULT_KERNEL_TOL,
};
use isospec_core::perturb::{corrections, field_matrix_elements, PerturbSettings};
use isospec_core::surface::{
    field_from_expression, make_torus, ConformalPerturbation, ScalarField,
};
use isospec_core::tracking::predicted;

/// Number of eigenvalues of `(K, M)` below `sigma`: the count of negative
/// pivots of `K − σM` (Sylvester's law of inertia).
#[allow(clippy::needless_range_loop)]
fn count_below(k: &[Vec<f64>], m: &[f64], sigma: f64) -> usize {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| k[i][j] - if i == j { sigma * m[i] } else { 0.0 })
                .collect()
        })
        .collect();
    let scale = a.iter().flatten().fold(1.0_f64, |s, v| s.max(v.abs()));
    let mut negative = 0;
    for p in 0..n {
        // a vanishing pivot is shifted down, which counts the nearby matrix
        let pivot = if a[p][p].abs() < 1e-13 * scale {
            -1e-13 * scale
        } else {
            a[p][p]
        };
        if pivot < 0.0 {
            negative += 1;
        }
        for i in p + 1..n {
            let factor = a[i][p] / pivot;
            for j in p + 1..n {
                a[i][j] -= factor * a[p][j];
            }
        }
    }
    negative
}

fn bisection_eigenvalues(k: &[Vec<f64>], m: &[f64]) -> Vec<f64> {
    let n = m.len();
    // Gershgorin bound on M^{-1}K
    let hi = (0..n)
        .map(|i| k[i].iter().map(|v| v.abs()).sum::<f64>() / m[i])
        .fold(0.0, f64::max)
        + 1.0;
    (0..n)
        .map(|idx| {
            let (mut a, mut b) = (-1.0, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if count_below(k, m, mid) > idx {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

fn weighted_graph(n: usize, weights: &[f64], masses: &[f64]) -> (Vec<Vec<f64>>, OperatorPair) {
    let mut dense = vec![vec![0.0; n]; n];
    let mut triplets = Vec::new();
    let mut w = weights.iter().cycle();
    for i in 0..n {
        // a ring plus chords keeps the graph connected
        for j in [(i + 1) % n, (i + 3) % n] {
            if i == j {
                continue;
            }
            let wij = *w.next().unwrap();
            for (a, b, v) in [(i, j, -wij), (j, i, -wij), (i, i, wij), (j, j, wij)] {
                dense[a][b] += v;
                triplets.push((a, b, v));
            }
        }
    }
    let pair = OperatorPair::synthetic(
        SparseMatrix::from_triplets(n, triplets),
        masses[..n].to_vec(),
    )
    .unwrap();
    (dense, pair)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn eigenvalues_match_inertia_bisection(
        n in 4usize..=12,
        weights in prop::collection::vec(0.1f64..3.0, 24),
        masses in prop::collection::vec(0.2f64..2.0, 12),
    ) {
        let (dense, pair) = weighted_graph(n, &weights, &masses);
        let oracle = bisection_eigenvalues(&dense, &masses[..n]);
        let got = solve_eigenvalues(&pair, n).unwrap();
        let scale = oracle[n - 1];
        for (g, o) in got.iter().zip(&oracle) {
            prop_assert!((g - o).abs() <= 1e-8 * o.abs().max(1e-3 * scale), "{g} vs {o}");
        }
    }
}

#[test]
fn torus_16_matches_symbol_and_continuum() {
    let s = make_torus(16, 16, 1.0, 1.0).unwrap();
    let pair = assemble_base(&s).unwrap();
    let got = solve_eigenvalues(&pair, 5).unwrap();
    assert!(got[0].abs() < 1e-10);
    let h = 1.0 / 16.0;
    let tau = std::f64::consts::TAU;
    let symbol = (2.0 / (h * h)) * (1.0 - (tau * h).cos());
    let continuum = tau * tau;
    for v in &got[1..] {
        assert!((v - symbol).abs() < 1e-11 * symbol);
        assert!((v - continuum).abs() / continuum <= (std::f64::consts::PI / 16.0).powi(2));
    }
}

#[test]
fn obstruction_matches_cholesky_least_squares() {
    let s = make_torus(32, 32, 1.0, 1.0).unwrap();
    let pair = assemble_base(&s).unwrap();
    let spec = solve(&pair, 20, DEFAULT_TOL_DEG).unwrap();
    let basis = fourier_basis(&s).unwrap();
    let r = obstruction_map(&spec, &basis, 20, DEFAULT_KERNEL_TOL).unwrap();
    assert_eq!(r.kernel_dim, 0);
    assert!(r.conditioning() > 1e-6);

    // min ‖T f‖/‖f‖ over span(basis): smallest eigenvalue of L⁻¹ AᵀA L⁻ᵀ with
    // G = LLᵀ, where column a of A holds the raw matrix elements of field a
    let d = basis.len();
    let elements: Vec<Mat<f64>> = basis
        .iter()
        .map(|f| field_matrix_elements(&spec, f.values(), 20))
        .collect();
    let ata = Mat::from_fn(d, d, |a, b| {
        let (ea, eb) = (&elements[a], &elements[b]);
        let mut s = 0.0;
        for i in 0..20 {
            for j in 0..20 {
                s += ea.read(i, j) * eb.read(i, j);
            }
        }
        s
    });
    let gram = Mat::from_fn(d, d, |a, b| {
        (0..s.node_count())
            .map(|r| basis[a].values()[r] * spec.mass()[r] * basis[b].values()[r])
            .sum::<f64>()
    });
    let chol = gram.cholesky(faer::Side::Lower).unwrap();
    let l = chol.compute_l();
    let l_inv = l
        .as_ref()
        .solve_lower_triangular(Mat::<f64>::identity(d, d));
    let reduced = &l_inv * &ata * l_inv.transpose();
    let mut mu = reduced.selfadjoint_eigenvalues(faer::Side::Lower);
    mu.sort_by(f64::total_cmp);
    let sigma_min = mu[0].max(0.0).sqrt();
    let reported = *r.singular_values.last().unwrap();
    assert!(sigma_min > 0.0);
    assert!((sigma_min - reported).abs() < 1e-10 * r.singular_values[0]);
}

#[test]
fn weyl_area_on_a_fine_torus() {
    let s = make_torus(48, 48, 1.0, 1.0).unwrap();
    let pair = assemble_base(&s).unwrap();
    let spec = solve(&pair, 100, DEFAULT_TOL_DEG).unwrap();
    let area = weyl_volume_estimate(&spec).unwrap();
    assert!((area - 1.0).abs() < 0.15, "area {area}");
}

#[test]
fn weyl_scales_with_trace_of_mass() {
    let n = 12;
    let (_, pair) = weighted_graph(n, &[1.0], &[1.0; 12]);
    // too few modes for the estimator
    assert!(weyl_volume_estimate(&solve(&pair, n, DEFAULT_TOL_DEG).unwrap()).is_err());
    let s = make_torus(10, 10, 1.0, 1.0).unwrap();
    let torus = assemble_base(&s).unwrap();
    let base = weyl_volume_estimate(&solve(&torus, 100, DEFAULT_TOL_DEG).unwrap()).unwrap();
    let doubled = OperatorPair::synthetic(
        torus.stiffness().clone(),
        torus.mass().iter().map(|m| 2.0 * m).collect(),
    )
    .unwrap();
    let twice = weyl_volume_estimate(&solve(&doubled, 100, DEFAULT_TOL_DEG).unwrap()).unwrap();
    assert!((twice / base - 2.0).abs() < 1e-9);
}

#[test]
fn convexity_line_is_linear_near_its_reference_end() {
    let s = make_torus(32, 32, 1.0, 1.0).unwrap();
    let c1 = ScalarField::constant(&s, 1.0).unwrap();
    let c2 = field_from_expression(&s, "1 + 0.2*cos(2*pi*x)").unwrap();
    let taus = [0.005, 0.01, 0.5, 0.99];
    let r = convexity_probe(&s, &c1, &c2, 10, &taus).unwrap();
    assert!(r.spectral_distances.iter().all(|d| *d > 1e-6));
    assert!(r.endpoints_isospectral_gap > 1e-3);
    // leaving the τ = 0 spectrum at a rate linear in τ
    let rate = r.leading_rate.unwrap();
    assert!((r.spectral_distances[1] / 0.01 - rate).abs() < 0.02 * rate);

    // near τ = 1 the blend is the perturbation of c1 by f = c2 − c1 at t = 1 − τ
    let pair = assemble_base(&s).unwrap();
    let spec = solve(&pair, pair.dim(), DEFAULT_TOL_DEG).unwrap();
    let pert = ConformalPerturbation::inverse_metric(c2.combine(1.0, &c1, -1.0).unwrap());
    let ops = conformal_operators(&pair, &pert).unwrap();
    let rep = corrections(&spec, &ops, &PerturbSettings::default()).unwrap();
    let t = 1.0 - 0.99;
    let mut pred: Vec<f64> = (0..10).map(|n| predicted(&rep, n, t)).collect();
    pred.sort_by(f64::total_cmp);
    let exact = solve_eigenvalues(&exact_perturbed_pair(&pair, &pert, t).unwrap(), 10).unwrap();
    for n in 0..10 {
        assert!((r.spectra[3][n] - exact[n]).abs() < 1e-9 * (1.0 + exact[n]));
        assert!((pred[n] - exact[n]).abs() < 1e-5 * (1.0 + exact[n]));
    }
}

#[test]
fn metric_probe_agrees_with_two_oracles() {
    let s = make_torus(16, 16, 1.0, 1.0).unwrap();
    let f = field_from_expression(&s, "cos(2*pi*x)").unwrap();
    let r = metric_side_probe(&s, &f, 12, &[1e-3]).unwrap();
    for m in &r.modes {
        let tail = m.tail_bound.unwrap_or(0.0);
        assert!(m.identity_defect <= tail + 1e-9 * (1.0 + m.lambda2_generic.abs()));
        assert!(m.parseval_defect < 1e-12);
        assert!(m.diagonal < 1e-12);
    }
    assert!(r.steps[0].first_rel_error < 1e-3);
    assert!(r.steps[0].second_rel_error < 1e-3);
}
