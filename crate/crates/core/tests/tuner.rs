mod common;

use std::sync::Arc;
use std::time::Instant;

use common::*;
use dynadmm::admm::{solve_with_observer, AdmmParams};
use dynadmm::config::RunConfig;
use dynadmm::lagrangian::{PenaltyVector, ProximalWeights};
use dynadmm::linalg::{Matrix, Vector};
use dynadmm::problem::{AffineMap, DynamicsProblem, IdentityMap, ObjectiveTerm, QuadraticTerm, ZeroTerm};
use dynadmm::tuner::{
    check_condition, choose_penalties, constants_table, dual_bound_diagnostic, estimate_constants, PenaltyCertificate,
    SmoothnessConstants, TunerOptions, WorkingBox,
};
use dynadmm::Error;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;

fn spectral_norm(m: &Matrix) -> f64 {
    m.clone().singular_values().max()
}

fn boxed(problem: &DynamicsProblem, seed: u64) -> WorkingBox {
    let mut r = rng(seed);
    WorkingBox::around(&random_trajectory(&mut r, problem.n(), problem.d(), 1.0), 3.0)
}

#[test]
fn linear_quadratic_constants_match_closed_form_norms() {
    let mut r = rng(21);
    let a = random_matrix(&mut r, 3, 0.6);
    let raw = random_matrix(&mut r, 3, 1.0);
    let q = &raw * raw.transpose() + Matrix::identity(3, 3) * 0.1;
    let terms: Vec<Arc<dyn ObjectiveTerm>> =
        (0..5).map(|_| Arc::new(QuadraticTerm::new(q.clone(), Vector::zeros(3)).unwrap()) as Arc<dyn ObjectiveTerm>).collect();
    let problem = DynamicsProblem::explicit(terms, Arc::new(AffineMap::linear(a.clone()))).unwrap();
    let consts = estimate_constants(&problem, &boxed(&problem, 1), 2000, 3).unwrap();
    let within = |estimate: f64, exact: f64| (estimate - exact).abs() <= 0.15 * exact;
    assert!(within(consts.jacobian_bound, spectral_norm(&a)), "{} vs {}", consts.jacobian_bound, spectral_norm(&a));
    assert!(within(consts.gradient_lipschitz, spectral_norm(&q)));
    assert!(consts.jacobian_lipschitz <= 1e-12);
}

#[test]
fn identity_and_zero_terms_give_trivial_constants() {
    let terms: Vec<Arc<dyn ObjectiveTerm>> = vec![Arc::new(ZeroTerm { dim: 2 }); 4];
    let problem = DynamicsProblem::explicit(terms, Arc::new(IdentityMap { dim: 2 })).unwrap();
    let consts = estimate_constants(&problem, &boxed(&problem, 2), 500, 4).unwrap();
    assert!((1.0..=1.1 + 1e-12).contains(&consts.jacobian_bound));
    assert_eq!(consts.jacobian_lipschitz, 0.0);
    assert_eq!(consts.gradient_bound, 0.0);
    assert_eq!(consts.gradient_lipschitz, 0.0);
}

#[test]
fn semi_implicit_constants_are_refused() {
    let mut r = rng(22);
    let problem = random_problem(&mut r, 3, 2, 2);
    let err = estimate_constants(&problem, &boxed(&problem, 3), 500, 0).unwrap_err();
    assert!(matches!(err, Error::UnsupportedShape(_)));
}

fn constants(n: usize, m: f64, mf: f64, lf: f64, lphi: f64, diameter: f64) -> SmoothnessConstants {
    SmoothnessConstants {
        gradient_bound: mf,
        gradient_lipschitz: lf,
        map_bound: 1.0,
        jacobian_bound: m,
        jacobian_lipschitz: lphi,
        diameters: vec![diameter; n + 1],
        reference_penalties: vec![1.0; n],
        initial_residual_bound: 0.0,
    }
}

// Certified penalties compound down the chain (each row squares the coupling
// of the row below), so long chains only certify for nearly constant maps.
#[test]
fn hundred_blocks_certify_within_a_second() {
    let n = 100;
    let consts = constants(n, 1e-6, 1.0, 1.0, 0.5, 1.0);
    let eta = ProximalWeights::uniform(n + 1, 1.0).unwrap();
    let started = Instant::now();
    let (rho, cert) = choose_penalties(&consts, &eta, &TunerOptions::default()).unwrap();
    assert!(started.elapsed().as_secs_f64() < 1.0);
    assert_eq!(rho.len(), n);
    assert!(cert.condition.passes);
}

#[test]
fn strong_coupling_is_reported_not_certified() {
    let consts = constants(100, 1e-3, 1.0, 1.0, 0.5, 1.0);
    let eta = ProximalWeights::uniform(101, 1.0).unwrap();
    let err = choose_penalties(&consts, &eta, &TunerOptions::default()).unwrap_err();
    assert!(matches!(err, Error::PenaltySelection { .. }));
}

fn assert_certificate(
    consts: &SmoothnessConstants,
    eta: &ProximalWeights,
    rho: &PenaltyVector,
    cert: &PenaltyCertificate,
) -> Result<(), TestCaseError> {
    let n = rho.len();
    prop_assert!(cert.condition.passes);
    for row in &cert.condition.rows {
        prop_assert!(row.sum < row.budget);
    }
    prop_assert!(cert.lyapunov_c.iter().chain(&cert.lyapunov_c_tilde).all(|&c| c > 0.0));
    let table = constants_table(consts, rho, eta).unwrap();
    for j in 0..n {
        for i in 0..=j {
            prop_assert!(table.c_tilde[j][i] <= table.c[j][i]);
            if consts.jacobian_bound > 0.0 || i == j {
                prop_assert!(table.c_tilde[j][i] > 0.0);
            }
        }
    }
    prop_assert_eq!(&check_condition(&table, rho, eta), &cert.condition);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weakly_coupled_chains_always_certify_and_ratchet(
        n in 1usize..=12,
        m in 0.0f64..1e-5,
        mf in 0.0f64..3.0,
        lf in 0.0f64..3.0,
        lphi in 0.0f64..1.0,
        diameter in 0.1f64..3.0,
        eta_value in 0.2f64..5.0,
        margin in 0.2f64..0.95,
    ) {
        let consts = constants(n, m, mf, lf, lphi, diameter);
        let eta = ProximalWeights::uniform(n + 1, eta_value).unwrap();
        let options = TunerOptions { margin, ..TunerOptions::default() };
        let (rho, cert) = choose_penalties(&consts, &eta, &options).unwrap();
        assert_certificate(&consts, &eta, &rho, &cert)?;

        let stricter = TunerOptions { margin: margin * 0.5, ..options };
        let (tighter, cert) = choose_penalties(&consts, &eta, &stricter).unwrap();
        assert_certificate(&consts, &eta, &tighter, &cert)?;
        for (a, b) in rho.as_slice().iter().zip(tighter.as_slice()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn any_returned_certificate_is_valid(
        n in 1usize..=8,
        m in 0.0f64..0.5,
        mf in 0.0f64..3.0,
        lf in 0.0f64..3.0,
        eta_value in 0.2f64..5.0,
    ) {
        let consts = constants(n, m, mf, lf, 0.5, 1.0);
        let eta = ProximalWeights::uniform(n + 1, eta_value).unwrap();
        match choose_penalties(&consts, &eta, &TunerOptions::default()) {
            Ok((rho, cert)) => assert_certificate(&consts, &eta, &rho, &cert)?,
            Err(e) => prop_assert!(matches!(e, Error::PenaltySelection { .. }), "{e}"),
        }
    }

    #[test]
    fn diagonal_couplings_ignore_their_own_penalty(n in 2usize..=8, bump in 2.0f64..100.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let consts = constants(n, 0.3, 1.0, 2.0, 0.5, 1.0);
        let eta = ProximalWeights::new((0..=n).map(|_| 0.5 + r.random::<f64>()).collect()).unwrap();
        let base: Vec<f64> = (0..n).map(|_| 0.1 + r.random::<f64>()).collect();
        let i = (seed as usize) % n;
        let mut bumped = base.clone();
        bumped[i] *= bump;
        let a = constants_table(&consts, &PenaltyVector::new(base).unwrap(), &eta).unwrap();
        let b = constants_table(&consts, &PenaltyVector::new(bumped).unwrap(), &eta).unwrap();
        for k in 0..=i {
            prop_assert_eq!(a.c[i][k].to_bits() == b.c[i][k].to_bits(), k == i);
        }
    }
}

#[test]
fn observed_multipliers_respect_the_dual_bound() {
    let config = RunConfig::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tanh_chain.toml")))
        .unwrap();
    let instance = config.build().unwrap();
    let cert = config.certify(&instance).unwrap();
    let n = instance.problem.n();
    let eta = ProximalWeights::uniform(n + 1, instance.eta).unwrap();
    let table = constants_table(&cert.constants, &cert.penalties, &eta).unwrap();
    let mut params = AdmmParams::new(cert.penalties.clone(), eta);
    params.max_iterations = 300;
    params.inner_tol = 1e-10;
    let mut worst = f64::NEG_INFINITY;
    let run = solve_with_observer(&instance.problem, instance.x0.clone(), instance.lambda0.clone(), &params, &mut |s| {
        let steps: Vec<f64> = s.x.block_sq_dists(&s.x_previous).iter().map(|d| d.sqrt()).collect();
        let bound = dual_bound_diagnostic(&table, &cert.constants, &steps);
        for (lambda, b) in s.lambda.iter().zip(&bound) {
            worst = worst.max(lambda.norm() - b);
        }
    })
    .unwrap();
    assert!(run.error.is_none());
    assert!(worst <= 1e-8, "multiplier exceeds its bound by {worst}");
}
