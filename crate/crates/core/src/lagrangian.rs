//! Lagrangian, augmented Lagrangian, block gradients, KKT residuals and the
//! Lyapunov merit function of the proximal ADMM iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, Vector};
use crate::problem::{check_duals, check_trajectory, objective_value, residuals, BlockStructure, DualVariables, Trajectory};

/// Per-constraint penalties `ρ_0, …, ρ_{n-1}`, all strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyVector(Vec<f64>);

impl PenaltyVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_positive("penalty", &values)?;
        Ok(Self(values))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for PenaltyVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Proximal weights `η_0, …, η_n`, all strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximalWeights(Vec<f64>);

impl ProximalWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_positive("proximal weight", &values)?;
        Ok(Self(values))
    }

    pub fn uniform(count: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for ProximalWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_positive(what: &str, values: &[f64]) -> Result<()> {
    for (k, v) in values.iter().enumerate() {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{what} {k} must be positive and finite, got {v}")));
        }
    }
    Ok(())
}

fn check_penalties<B: BlockStructure + ?Sized>(problem: &B, rho: &PenaltyVector) -> Result<()> {
    if rho.len() != problem.steps() {
        return Err(Error::BlockCount {
            what: "penalties",
            expected: problem.steps(),
            found: rho.len(),
        });
    }
    Ok(())
}

fn check_weights<B: BlockStructure + ?Sized>(problem: &B, eta: &ProximalWeights) -> Result<()> {
    if eta.len() != problem.steps() + 1 {
        return Err(Error::BlockCount {
            what: "proximal weights",
            expected: problem.steps() + 1,
            found: eta.len(),
        });
    }
    Ok(())
}

/// First-order optimality measures, both reported in the ∞-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
}

/// `Σ f_i(x_i) + Σ ⟨λ_j, r_j(x)⟩`.
pub fn lagrangian_value<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory, lambda: &DualVariables) -> Result<f64> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    let r = residuals(problem, x);
    Ok(objective_value(problem, x) + r.iter().zip(lambda.iter()).map(|(rj, lj)| lj.dot(rj)).sum::<f64>())
}

/// `Σ f_i + Σ_j (⟨λ_j, r_j⟩ + (ρ_j/2)‖r_j‖²)`.
pub fn augmented_lagrangian_value<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &DualVariables,
    rho: &PenaltyVector,
) -> Result<f64> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    check_penalties(problem, rho)?;
    Ok(auglag_unchecked(problem, x, lambda, rho))
}

pub(crate) fn auglag_unchecked<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &DualVariables,
    rho: &PenaltyVector,
) -> f64 {
    let r = residuals(problem, x);
    let coupling: f64 = r
        .iter()
        .zip(lambda.iter())
        .enumerate()
        .map(|(j, (rj, lj))| lj.dot(rj) + 0.5 * rho[j] * rj.norm_squared())
        .sum();
    objective_value(problem, x) + coupling
}

/// Completed-square form `Σ f_i + Σ_j ((ρ_j/2)‖r_j + λ_j/ρ_j‖² − ‖λ_j‖²/(2ρ_j))`.
///
/// Algebraically equal to [`augmented_lagrangian_value`]; kept as an
/// independent evaluation path.
pub fn augmented_lagrangian_completed_square<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &DualVariables,
    rho: &PenaltyVector,
) -> Result<f64> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    check_penalties(problem, rho)?;
    let r = residuals(problem, x);
    let coupling: f64 = r
        .iter()
        .zip(lambda.iter())
        .enumerate()
        .map(|(j, (rj, lj))| {
            let shifted = rj + lj / rho[j];
            0.5 * rho[j] * shifted.norm_squared() - lj.norm_squared() / (2.0 * rho[j])
        })
        .sum();
    Ok(objective_value(problem, x) + coupling)
}

fn check_block_index<B: BlockStructure + ?Sized>(problem: &B, i: usize) -> Result<()> {
    if i > problem.steps() {
        return Err(Error::IndexOutOfRange {
            index: i,
            max: problem.steps(),
        });
    }
    Ok(())
}

/// Gradient in block `i` of `Σ f + Σ ⟨μ_j, r_j⟩` for the given multiplier
/// weights `μ_j`; shared by the Lagrangian and the augmented Lagrangian.
fn weighted_block_gradient<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    i: usize,
    weight: impl Fn(usize) -> Vector,
) -> Vector {
    let n = problem.steps();
    let mut g = problem.term_gradient(i, &x[i]);
    if i >= 1 {
        g += problem.next_jt(i - 1, &x[i], &weight(i - 1));
    }
    if i < n {
        g -= problem.prev_jt(i, &x[i], &weight(i));
    }
    g
}

/// `∇_{x_i} L_ρ(x, λ)`.
pub fn aug_lagrangian_block_gradient<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &DualVariables,
    rho: &PenaltyVector,
    i: usize,
) -> Result<Vector> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    check_penalties(problem, rho)?;
    check_block_index(problem, i)?;
    Ok(weighted_block_gradient(problem, x, i, |j| {
        &lambda[j] + problem.constraint_residual(j, &x[j], &x[j + 1]) * rho[j]
    }))
}

/// `∇_{x_i} L(x, λ)` without the penalty terms.
pub fn lagrangian_block_gradient<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &DualVariables,
    i: usize,
) -> Result<Vector> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    check_block_index(problem, i)?;
    Ok(weighted_block_gradient(problem, x, i, |j| lambda[j].clone()))
}

/// Stationarity `‖∇ₓL(x, λ)‖∞` and feasibility `max_j ‖r_j‖∞`.
pub fn kkt_residual<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory, lambda: &DualVariables) -> Result<KktResidual> {
    check_trajectory(problem, x)?;
    check_duals(problem, lambda)?;
    Ok(kkt_unchecked(problem, x, lambda))
}

pub(crate) fn kkt_unchecked<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory, lambda: &DualVariables) -> KktResidual {
    let stationarity = (0..=problem.steps())
        .map(|i| inf_norm(&weighted_block_gradient(problem, x, i, |j| lambda[j].clone())))
        .fold(0.0, f64::max);
    let feasibility = residuals(problem, x).iter().map(inf_norm).fold(0.0, f64::max);
    KktResidual {
        stationarity,
        feasibility,
    }
}

/// Proximal memory `Σ_i ‖x_now,i − x_prev,i‖²/(4η_i)`.
pub(crate) fn proximal_memory(x_now: &Trajectory, x_prev: &Trajectory, eta: &ProximalWeights) -> f64 {
    x_now
        .iter()
        .zip(x_prev.iter())
        .enumerate()
        .map(|(i, (a, b))| (a - b).norm_squared() / (4.0 * eta[i]))
        .sum()
}

/// `E = L_ρ(x_now, λ) + Σ_i ‖x_now,i − x_prev,i‖²/(4η_i)`.
pub fn lyapunov_value<B: BlockStructure + ?Sized>(
    problem: &B,
    x_now: &Trajectory,
    x_prev: &Trajectory,
    lambda: &DualVariables,
    rho: &PenaltyVector,
    eta: &ProximalWeights,
) -> Result<f64> {
    check_trajectory(problem, x_prev)?;
    check_weights(problem, eta)?;
    let base = augmented_lagrangian_value(problem, x_now, lambda, rho)?;
    if x_now == x_prev {
        return Ok(base);
    }
    Ok(base + proximal_memory(x_now, x_prev, eta))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::problem::{DynamicsProblem, IdentityMap, ObjectiveTerm, ZeroTerm};

    fn scalar(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    fn identity_problem(n: usize, d: usize) -> DynamicsProblem {
        let terms: Vec<Arc<dyn ObjectiveTerm>> = (0..=n).map(|_| Arc::new(ZeroTerm { dim: d }) as _).collect();
        DynamicsProblem::explicit(terms, Arc::new(IdentityMap { dim: d })).unwrap()
    }

    #[test]
    fn hand_values() {
        let p = identity_problem(1, 1);
        let x = Trajectory::new(vec![scalar(0.0), scalar(1.0)]).unwrap();
        let two = DualVariables::new(vec![scalar(2.0)]).unwrap();
        assert_eq!(lagrangian_value(&p, &x, &two).unwrap(), 2.0);
        let one = DualVariables::new(vec![scalar(1.0)]).unwrap();
        let rho = PenaltyVector::new(vec![2.0]).unwrap();
        assert_eq!(augmented_lagrangian_value(&p, &x, &one, &rho).unwrap(), 2.0);
        assert_eq!(augmented_lagrangian_completed_square(&p, &x, &one, &rho).unwrap(), 2.0);
    }

    #[test]
    fn nonpositive_penalty_is_rejected() {
        assert!(PenaltyVector::new(vec![1.0, 0.0]).is_err());
        assert!(PenaltyVector::new(vec![-1.0]).is_err());
        assert!(ProximalWeights::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn lyapunov_hand_value() {
        let p = identity_problem(2, 2);
        let c = Vector::from_vec(vec![0.5, 1.5]);
        let now = Trajectory::new(vec![c.clone(); 3]).unwrap();
        let mut prev = now.clone();
        prev.block_mut(0)[0] += 1.0;
        let lambda = DualVariables::zeros(2, 2);
        let rho = PenaltyVector::uniform(2, 1.0).unwrap();
        let eta = ProximalWeights::uniform(3, 1.0).unwrap();
        assert_eq!(lyapunov_value(&p, &now, &prev, &lambda, &rho, &eta).unwrap(), 0.25);
        assert_eq!(lyapunov_value(&p, &now, &now, &lambda, &rho, &eta).unwrap(), 0.0);
        assert!(lyapunov_value(&p, &now, &now, &lambda, &rho, &ProximalWeights::uniform(2, 1.0).unwrap()).is_err());
    }

    #[test]
    fn feasible_zero_objective_is_stationary() {
        let p = identity_problem(3, 2);
        let x = Trajectory::new(vec![Vector::from_vec(vec![1.0, 2.0]); 4]).unwrap();
        let lambda = DualVariables::zeros(3, 2);
        let rho = PenaltyVector::uniform(3, 0.7).unwrap();
        for i in 0..=3 {
            assert_eq!(aug_lagrangian_block_gradient(&p, &x, &lambda, &rho, i).unwrap().norm(), 0.0);
        }
        let kkt = kkt_residual(&p, &x, &lambda).unwrap();
        assert_eq!((kkt.stationarity, kkt.feasibility), (0.0, 0.0));
        assert!(matches!(
            aug_lagrangian_block_gradient(&p, &x, &lambda, &rho, 4),
            Err(Error::IndexOutOfRange { index: 4, max: 3 })
        ));
    }
}
