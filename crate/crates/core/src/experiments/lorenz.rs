//! Strong-constraint 4DVar twin experiment on the Lorenz-63 system.
//!
//! The truth is an RK4 rollout; every `stride`-th state is observed with
//! standard-normal noise. The objective fits a trajectory of the discrete
//! dynamics to those observations plus a background term on the first state.

use std::sync::Arc;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, StructuredMatrix, Vector};
use crate::problem::{DualVariables, DynamicsMap, DynamicsProblem, ObjectiveTerm, SquaredDistanceTerm, Trajectory, ZeroTerm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    /// The Rayleigh-number parameter, not a penalty.
    pub rho_l: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho_l: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    /// `(σ(y − x), x(ρ − z) − y, xy − βz)`.
    pub fn vector_field(&self, v: &Vector) -> Vector {
        let (x, y, z) = (v[0], v[1], v[2]);
        Vector::from_vec(vec![self.sigma * (y - x), x * (self.rho_l - z) - y, x * y - self.beta * z])
    }

    pub fn field_jacobian(&self, v: &Vector) -> Matrix3<f64> {
        let (x, y, z) = (v[0], v[1], v[2]);
        Matrix3::new(-self.sigma, self.sigma, 0.0, self.rho_l - z, -1.0, -x, y, x, -self.beta)
    }
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step(field: impl Fn(&Vector) -> Vector, v: &Vector, dt: f64) -> Vector {
    let k1 = field(v);
    let k2 = field(&(v + &k1 * (dt / 2.0)));
    let k3 = field(&(v + &k2 * (dt / 2.0)));
    let k4 = field(&(v + &k3 * dt));
    v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// The RK4 flow map of the Lorenz field with its exact Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct LorenzRk4 {
    pub params: LorenzParams,
    pub dt: f64,
}

impl LorenzRk4 {
    /// Jacobian of the RK4 step, propagated through the stages.
    pub fn step_jacobian(&self, v: &Vector) -> Matrix3<f64> {
        let p = &self.params;
        let h = self.dt;
        let id = Matrix3::identity();
        let k1 = p.vector_field(v);
        let j1 = p.field_jacobian(v);
        let s2 = v + &k1 * (h / 2.0);
        let k2 = p.vector_field(&s2);
        let j2 = p.field_jacobian(&s2) * (id + j1 * (h / 2.0));
        let s3 = v + &k2 * (h / 2.0);
        let k3 = p.vector_field(&s3);
        let j3 = p.field_jacobian(&s3) * (id + j2 * (h / 2.0));
        let s4 = v + &k3 * h;
        let j4 = p.field_jacobian(&s4) * (id + j3 * h);
        id + (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (h / 6.0)
    }
}

impl DynamicsMap for LorenzRk4 {
    fn dim(&self) -> usize {
        3
    }

    fn apply(&self, x: &Vector) -> Vector {
        rk4_step(|v| self.params.vector_field(v), x, self.dt)
    }

    fn jacobian_transpose_product(&self, x: &Vector, w: &Vector) -> Vector {
        let j = self.step_jacobian(x);
        let w3 = nalgebra::Vector3::new(w[0], w[1], w[2]);
        let out = j.transpose() * w3;
        Vector::from_column_slice(out.as_slice())
    }

    fn jacobian(&self, x: &Vector) -> StructuredMatrix {
        let j = self.step_jacobian(x);
        StructuredMatrix::Dense(Matrix::from_fn(3, 3, |r, c| j[(r, c)]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzConfig {
    pub params: LorenzParams,
    pub dt: f64,
    pub horizon: f64,
    /// Number of steps `n`.
    pub steps: usize,
    /// Observation stride `M`.
    pub stride: usize,
    /// Background weight `α`.
    pub alpha: f64,
    /// Standard deviation of the observation noise; zero gives a noiseless twin.
    pub noise_std: f64,
    pub seed: u64,
    pub truth_start: [f64; 3],
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            params: LorenzParams::default(),
            dt: 0.01,
            horizon: 3.0,
            steps: 300,
            stride: 30,
            alpha: 0.1,
            noise_std: 1.0,
            seed: 7,
            truth_start: [-0.5, 0.5, 20.5],
        }
    }
}

impl LorenzConfig {
    /// A shortened horizon with the same step size.
    pub fn with_steps(steps: usize, stride: usize) -> Self {
        let base = Self::default();
        Self {
            steps,
            stride,
            horizon: steps as f64 * base.dt,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.steps == 0 {
            return Err(Error::Config("Lorenz step size and step count must be positive".into()));
        }
        if (self.steps as f64 * self.dt - self.horizon).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "horizon {} is not steps {} times dt {}",
                self.horizon, self.steps, self.dt
            )));
        }
        if self.stride == 0 || self.steps % self.stride != 0 {
            return Err(Error::Config(format!(
                "observation stride {} must divide the step count {}",
                self.stride, self.steps
            )));
        }
        if !(self.alpha >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("background weight and noise level must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn map(&self) -> LorenzRk4 {
        LorenzRk4 {
            params: self.params,
            dt: self.dt,
        }
    }
}

/// Observations, background and the (evaluation-only) truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FourDVarData {
    pub observations: Vec<Vector>,
    pub background: Vector,
    pub truth: Trajectory,
    pub stride: usize,
}

/// Seeded standard-normal draws (ChaCha20 stream, ziggurat sampling).
pub fn gaussian_noise(seed: u64, count: usize, dim: usize) -> Vec<Vector> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng)))
        .collect()
}

pub fn make_4dvar_problem(config: &LorenzConfig) -> Result<(DynamicsProblem, FourDVarData)> {
    config.validate()?;
    let map = config.map();
    let n = config.steps;
    let mut truth = vec![Vector::from_column_slice(&config.truth_start)];
    for j in 0..n {
        let next = map.apply(&truth[j]);
        truth.push(next);
    }
    let truth = Trajectory::new(truth)?;
    let count = n / config.stride + 1;
    let noise = gaussian_noise(config.seed, count, 3);
    let observations: Vec<Vector> = (0..count)
        .map(|j| &truth[j * config.stride] + &noise[j] * config.noise_std)
        .collect();
    let background = observations[0].clone();

    let mut terms: Vec<Arc<dyn ObjectiveTerm>> = Vec::with_capacity(n + 1);
    terms.push(Arc::new(SquaredDistanceTerm::sum(vec![
        (observations[0].clone(), 1.0),
        (background.clone(), config.alpha),
    ])));
    for i in 1..=n {
        if i % config.stride == 0 {
            terms.push(Arc::new(SquaredDistanceTerm::new(observations[i / config.stride].clone(), 1.0)));
        } else {
            terms.push(Arc::new(ZeroTerm { dim: 3 }));
        }
    }
    let problem = DynamicsProblem::explicit(terms, Arc::new(map))?;
    Ok((
        problem,
        FourDVarData {
            observations,
            background,
            truth,
            stride: config.stride,
        },
    ))
}

/// Observed blocks set to the observations, the blocks in between rolled
/// forward from the preceding observation; zero multipliers.
pub fn admm_init_4dvar(problem: &DynamicsProblem, data: &FourDVarData) -> Result<(Trajectory, DualVariables)> {
    let n = problem.n();
    let mut blocks = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i % data.stride == 0 {
            blocks.push(data.observations[i / data.stride].clone());
        } else {
            let next = problem.dynamics().apply(&blocks[i - 1]);
            blocks.push(next);
        }
    }
    Ok((Trajectory::new(blocks)?, DualVariables::zeros(n, problem.d())))
}

/// Root-mean-square error over every entry of the trajectory.
pub fn trajectory_rmse(x: &Trajectory, truth: &Trajectory) -> f64 {
    let count = (x.len() * x.dim()).max(1) as f64;
    (x.block_sq_dists(truth).iter().sum::<f64>() / count).sqrt()
}
