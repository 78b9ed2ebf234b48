//! Central finite-difference checks of the analytic derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradient, reduced_objective};
use crate::error::Result;
use crate::lagrangian::{aug_lagrangian_block_gradient, augmented_lagrangian_value, PenaltyVector};
use crate::linalg::Vector;
use crate::problem::{ConstraintShape, DualVariables, DynamicsProblem, Trajectory};

/// Largest relative errors seen per derivative kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Gradient of the dynamics-reduced objective.
    pub adjoint: f64,
    /// Block gradients of the augmented Lagrangian.
    pub block: f64,
    /// Jacobian-transpose products of the dynamics.
    pub jacobian_transpose: f64,
    /// Gradients of the objective terms.
    pub term: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.adjoint.max(self.block).max(self.jacobian_transpose).max(self.term)
    }
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(analytic: &Vector, reference: &Vector, floor: f64) -> f64 {
    let diff = (analytic - reference).amax();
    diff / reference.amax().max(floor)
}

/// Central differences of `f` in every coordinate of `x`.
pub fn central_difference(f: &mut dyn FnMut(&Vector) -> f64, x: &Vector) -> Vector {
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for c in 0..x.len() {
        let h = 1e-6 * x[c].abs().max(1.0);
        probe[c] = x[c] + h;
        let up = f(&probe);
        probe[c] = x[c] - h;
        let down = f(&probe);
        probe[c] = x[c];
        g[c] = (up - down) / (2.0 * h);
    }
    g
}

/// Checks every derivative of `problem` at `probes` points scattered around
/// `center` (perturbations of relative size `spread`).
pub fn check_problem(
    problem: &DynamicsProblem,
    center: &Trajectory,
    rho: &PenaltyVector,
    probes: usize,
    spread: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, d) = (problem.n(), problem.d());
    let floor = 1e-6;
    let mut report = GradCheckReport {
        probes,
        adjoint: 0.0,
        block: 0.0,
        jacobian_transpose: 0.0,
        term: 0.0,
    };
    let jitter = |v: &Vector, rng: &mut ChaCha20Rng| {
        Vector::from_fn(v.len(), |c, _| v[c] + spread * v[c].abs().max(1.0) * (rng.random::<f64>() - 0.5))
    };
    for _ in 0..probes {
        let x = Trajectory::new(center.iter().map(|b| jitter(b, &mut rng)).collect())?;
        let lambda = DualVariables::new((0..n).map(|_| Vector::from_fn(d, |_, _| rng.random::<f64>() - 0.5)).collect())?;

        if matches!(problem.shape(), ConstraintShape::ExplicitForward) {
            let v0 = x[0].clone();
            let g = adjoint_gradient(problem, &v0)?;
            let fd = central_difference(&mut |v| reduced_objective(problem, v).unwrap_or(f64::NAN), &v0);
            report.adjoint = report.adjoint.max(relative_error(&g, &fd, floor));
        }

        let i = rng.random_range(0..=n);
        let g = aug_lagrangian_block_gradient(problem, &x, &lambda, rho, i)?;
        let mut moved = x.clone();
        let fd = central_difference(
            &mut |z| {
                *moved.block_mut(i) = z.clone();
                augmented_lagrangian_value(problem, &moved, &lambda, rho).unwrap_or(f64::NAN)
            },
            &x[i],
        );
        report.block = report.block.max(relative_error(&g, &fd, floor));

        let term = problem.term(i);
        let fd = central_difference(&mut |z| term.value(z), &x[i]);
        report.term = report.term.max(relative_error(&term.gradient(&x[i]), &fd, floor));

        let map = problem.dynamics();
        let w = Vector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
        let jt = map.jacobian_transpose_product(&x[i], &w);
        let fd = central_difference(&mut |z| map.apply(z).dot(&w), &x[i]);
        report.jacobian_transpose = report.jacobian_transpose.max(relative_error(&jt, &fd, floor));
    }
    Ok(report)
}
