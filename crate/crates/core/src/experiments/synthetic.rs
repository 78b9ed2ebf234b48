//! Small synthetic instances: a contractive tanh chain with bounded smooth
//! costs (used with tuned penalties) and a linear-quadratic chain.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, StructuredMatrix, Vector};
use crate::problem::{AffineMap, DynamicsProblem, FnTerm, ObjectiveTerm, Residual, SquaredDistanceTerm, TanhMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhChainConfig {
    pub steps: usize,
    pub dim: usize,
    /// Spectral norm of the matrix in `φ(x) = A tanh(x) + b`.
    pub contraction: f64,
    /// Cost weight `w` in `f_i(x) = (w/2) Σ_c sin²(x_c − t_{i,c})`.
    pub weight: f64,
}

impl Default for TanhChainConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            dim: 2,
            contraction: 0.005,
            weight: 1.0,
        }
    }
}

/// Block-diagonal plane rotations scaled to the requested norm.
fn scaled_rotation(dim: usize, norm: f64) -> Matrix {
    let mut a = Matrix::identity(dim, dim) * norm;
    let angle: f64 = 0.7;
    for p in (0..dim.saturating_sub(1)).step_by(2) {
        a[(p, p)] = norm * angle.cos();
        a[(p, p + 1)] = -norm * angle.sin();
        a[(p + 1, p)] = norm * angle.sin();
        a[(p + 1, p + 1)] = norm * angle.cos();
    }
    a
}

/// `f_i(x) = (w/2) Σ_c sin²(x_c − t_{i,c})`: bounded, with bounded gradient and
/// Hessian, exposed as least squares.
fn bounded_cost(target: Vector, weight: f64) -> FnTerm {
    let scale = weight.sqrt();
    FnTerm::least_squares(move |x: &Vector| {
        let dev = x - &target;
        Residual {
            values: dev.map(|v| scale * v.sin()),
            jacobian: StructuredMatrix::Dense(Matrix::from_diagonal(&dev.map(|v| scale * v.cos()))),
        }
    })
}

pub fn make_tanh_chain(config: &TanhChainConfig) -> Result<DynamicsProblem> {
    if config.steps == 0 || config.dim == 0 {
        return Err(Error::Config("synthetic chain needs at least one step and one dimension".into()));
    }
    if !(config.contraction >= 0.0 && config.contraction < 1.0) || !(config.weight > 0.0) {
        return Err(Error::Config("contraction must lie in [0, 1) and the weight must be positive".into()));
    }
    let d = config.dim;
    let offset = Vector::from_fn(d, |c, _| if c % 2 == 0 { 0.3 } else { -0.2 });
    let map = TanhMap {
        matrix: scaled_rotation(d, config.contraction),
        offset,
    };
    let terms: Vec<Arc<dyn ObjectiveTerm>> = (0..=config.steps)
        .map(|i| {
            let t = Vector::from_fn(d, |c, _| ((i * d + c) as f64 * 1.3).sin());
            Arc::new(bounded_cost(t, config.weight)) as Arc<dyn ObjectiveTerm>
        })
        .collect();
    DynamicsProblem::explicit(terms, Arc::new(map))
}

/// `f_i(x) = ½ w_i ‖x − t_i‖²`, `φ(x) = A x`, with seeded `A`, `t_i`, `w_i`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    pub matrix: Matrix,
    pub targets: Vec<Vector>,
    pub weights: Vec<f64>,
}

impl LinearQuadratic {
    pub fn random(steps: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let raw = Matrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
        let norm = raw.clone().singular_values().max();
        let matrix = if norm > 0.0 { raw * (0.9 / norm) } else { raw };
        let targets = (0..=steps)
            .map(|_| Vector::from_fn(dim, |_, _| 2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let weights = (0..=steps).map(|_| 0.5 + rng.random::<f64>()).collect();
        Self {
            matrix,
            targets,
            weights,
        }
    }

    pub fn problem(&self) -> Result<DynamicsProblem> {
        let terms: Vec<Arc<dyn ObjectiveTerm>> = self
            .targets
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| Arc::new(SquaredDistanceTerm::new(t.clone(), *w)) as Arc<dyn ObjectiveTerm>)
            .collect();
        DynamicsProblem::explicit(terms, Arc::new(AffineMap::linear(self.matrix.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_has_requested_norm() {
        for d in [1, 2, 3, 4] {
            let a = scaled_rotation(d, 0.4);
            assert!((a.singular_values().max() - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_is_contractive_and_bounded() {
        let p = make_tanh_chain(&TanhChainConfig::default()).unwrap();
        let x = Vector::from_vec(vec![3.0, -2.0]);
        let y = Vector::from_vec(vec![-1.0, 0.5]);
        let phi = p.dynamics();
        assert!((phi.apply(&x) - phi.apply(&y)).norm() <= 0.005 * (x - y).norm() + 1e-15);
        let big = Vector::from_vec(vec![1e6, -1e6]);
        assert!(p.term(0).value(&big) <= 1.0 + 1e-12);
    }

    #[test]
    fn linear_quadratic_is_seeded() {
        let a = LinearQuadratic::random(3, 2, 5);
        let b = LinearQuadratic::random(3, 2, 5);
        assert_eq!(a.matrix, b.matrix);
        assert!((a.matrix.clone().singular_values().max() - 0.9).abs() < 1e-12);
    }
}
