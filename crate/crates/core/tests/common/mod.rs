#![allow(dead_code)]

use std::sync::Arc;

use dynadmm::experiments::synthetic::LinearQuadratic;
use dynadmm::linalg::{Matrix, Vector};
use dynadmm::problem::{
    AffineMap, ConstraintShape, DualVariables, DynamicsProblem, FnTerm, ObjectiveTerm, QuadraticTerm, SemiImplicitStep,
    SquaredDistanceTerm, TanhMap, Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut ChaCha20Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn random_matrix(rng: &mut ChaCha20Rng, d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(d, d, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn random_trajectory(rng: &mut ChaCha20Rng, n: usize, d: usize, scale: f64) -> Trajectory {
    Trajectory::new((0..=n).map(|_| random_vector(rng, d, scale)).collect()).unwrap()
}

pub fn random_duals(rng: &mut ChaCha20Rng, n: usize, d: usize, scale: f64) -> DualVariables {
    DualVariables::new((0..n).map(|_| random_vector(rng, d, scale)).collect()).unwrap()
}

/// A smooth, non-least-squares term `Σ_c log(1 + (x_c − t_c)²)`.
pub fn log_term(target: Vector) -> FnTerm {
    let t2 = target.clone();
    FnTerm::new(
        move |x: &Vector| (x - &target).iter().map(|v| (1.0 + v * v).ln()).sum(),
        move |x: &Vector| (x - &t2).map(|v| 2.0 * v / (1.0 + v * v)),
    )
}

/// Mixed random objective terms: squared distances, quadratics and log terms.
pub fn random_terms(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Vec<Arc<dyn ObjectiveTerm>> {
    (0..=n)
        .map(|_| {
            let t = random_vector(rng, d, 1.0);
            match rng.random_range(0..3) {
                0 => Arc::new(SquaredDistanceTerm::new(t, 0.5 + rng.random::<f64>())) as Arc<dyn ObjectiveTerm>,
                1 => {
                    let b = random_matrix(rng, d, 1.0);
                    let q = b.transpose() * &b + Matrix::identity(d, d);
                    Arc::new(QuadraticTerm::new(q, t).unwrap()) as Arc<dyn ObjectiveTerm>
                }
                _ => Arc::new(log_term(t)) as Arc<dyn ObjectiveTerm>,
            }
        })
        .collect()
}

/// A random problem of the requested shape with a tanh map.
pub fn random_problem(rng: &mut ChaCha20Rng, n: usize, d: usize, shape: usize) -> DynamicsProblem {
    let terms = random_terms(rng, n, d);
    let map = Arc::new(TanhMap {
        matrix: random_matrix(rng, d, 0.8),
        offset: random_vector(rng, d, 0.3),
    });
    match shape {
        0 => DynamicsProblem::explicit(terms, map).unwrap(),
        1 => DynamicsProblem::implicit(terms, map).unwrap(),
        _ => {
            let steps = (0..n)
                .map(|_| SemiImplicitStep::new(Matrix::identity(d, d) * 2.0 + random_matrix(rng, d, 0.3), None))
                .collect();
            DynamicsProblem::new(terms, map, ConstraintShape::SemiImplicit(steps)).unwrap()
        }
    }
}

pub fn linear_problem(rng: &mut ChaCha20Rng, n: usize, d: usize) -> DynamicsProblem {
    let terms = random_terms(rng, n, d);
    DynamicsProblem::explicit(terms, Arc::new(AffineMap::linear(random_matrix(rng, d, 0.5)))).unwrap()
}

/// Central finite differences with step `1e-6·max(1, |x_c|)`.
pub fn fd_gradient(f: &dyn Fn(&Vector) -> f64, x: &Vector) -> Vector {
    Vector::from_fn(x.len(), |c, _| {
        let h = 1e-6 * x[c].abs().max(1.0);
        let mut up = x.clone();
        up[c] += h;
        let mut down = x.clone();
        down[c] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

/// `‖a − b‖ / max(‖b‖, 1e-8)`.
pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-8)
}

/// Closed-form KKT pair of `min Σ ½w_i‖x_i − t_i‖²` s.t. `x_{j+1} = A x_j`.
pub fn lq_closed_form(lq: &LinearQuadratic) -> (Trajectory, DualVariables) {
    let n = lq.targets.len() - 1;
    let d = lq.matrix.nrows();
    // Normal equations in x_0 of Σ ½w_i‖Aⁱx_0 − t_i‖².
    let mut h = Matrix::zeros(d, d);
    let mut rhs = Vector::zeros(d);
    let mut power = Matrix::identity(d, d);
    for i in 0..=n {
        h += power.transpose() * &power * lq.weights[i];
        rhs += power.transpose() * &lq.targets[i] * lq.weights[i];
        power = &lq.matrix * power;
    }
    let x0 = h.lu().solve(&rhs).unwrap();
    let mut blocks = vec![x0];
    for j in 0..n {
        let next = &lq.matrix * &blocks[j];
        blocks.push(next);
    }
    // λ_{n−1} = −∇f_n, λ_{i−1} = Aᵀλ_i − ∇f_i.
    let grad = |i: usize, x: &Vector| (x - &lq.targets[i]) * lq.weights[i];
    let mut lambda = vec![Vector::zeros(d); n];
    lambda[n - 1] = -grad(n, &blocks[n]);
    for i in (1..n).rev() {
        lambda[i - 1] = lq.matrix.transpose() * &lambda[i] - grad(i, &blocks[i]);
    }
    (Trajectory::new(blocks).unwrap(), DualVariables::new(lambda).unwrap())
}
