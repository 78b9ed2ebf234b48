//! Viscous Burgers equation on `[0, π]` with homogeneous Dirichlet ends,
//! discretized by Lax–Friedrichs: the explicit scheme, its implicit
//! counterpart `φ(u_{i+1}) = u_i`, a Newton reference solver for the implicit
//! steps, and the implicit rollout posed as a dynamics-constrained problem.
//!
//! Public grid vectors carry all `m + 1` nodes including the pinned zero
//! endpoints. The implicit map and the optimization problem act on the
//! `m − 1` interior nodes only.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, BandLu, BandMatrix, StructuredMatrix, Vector};
use crate::problem::{DynamicsMap, DynamicsProblem, ObjectiveTerm, SquaredDistanceTerm, Trajectory, ZeroTerm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurgersConfig {
    /// Viscosity `ν`.
    pub viscosity: f64,
    pub horizon: f64,
    /// Number of spatial cells `m`; the grid has `m + 1` nodes.
    pub cells: usize,
    pub dt: f64,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            viscosity: 0.005,
            horizon: 2.0,
            cells: 100,
            dt: 0.1,
        }
    }
}

impl BurgersConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    /// Grid nodes `d = m + 1`.
    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn interior(&self) -> usize {
        self.cells - 1
    }

    pub fn dx(&self) -> f64 {
        std::f64::consts::PI / self.cells as f64
    }

    /// Number of time steps `n = T/δt`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < 3 {
            return Err(Error::Config("Burgers grid needs at least 3 cells".into()));
        }
        if !(self.dt > 0.0) || !(self.viscosity >= 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Config("Burgers dt, horizon must be positive and viscosity nonnegative".into()));
        }
        let n = self.steps();
        if n == 0 || (n as f64 * self.dt - self.horizon).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "time step {} does not divide the horizon {}",
                self.dt, self.horizon
            )));
        }
        Ok(())
    }

    /// `(δt/(2δx), νδt/δx²)`.
    fn coefficients(&self) -> (f64, f64) {
        let dx = self.dx();
        (self.dt / (2.0 * dx), self.viscosity * self.dt / (dx * dx))
    }

    /// `sin(x)` on the grid with the endpoints pinned to zero.
    pub fn initial_profile(&self) -> Vector {
        let m = self.cells;
        Vector::from_fn(m + 1, |q, _| if q == 0 || q == m { 0.0 } else { (q as f64 * self.dx()).sin() })
    }
}

fn check_grid(config: &BurgersConfig, u: &Vector) -> Result<()> {
    if u.len() != config.nodes() {
        return Err(Error::DimensionMismatch {
            what: "Burgers grid vector",
            index: 0,
            expected: config.nodes(),
            found: u.len(),
        });
    }
    Ok(())
}

/// Interior nodes of a full grid vector.
pub fn restrict(u: &Vector) -> Vector {
    u.rows(1, u.len() - 2).into_owned()
}

/// Full grid vector from interior nodes, with zero endpoints.
pub fn embed(interior: &Vector) -> Vector {
    let mut u = Vector::zeros(interior.len() + 2);
    u.rows_mut(1, interior.len()).copy_from(interior);
    u
}

/// Explicit Lax–Friedrichs step written with the numerical flux
/// `F_{q+½} = ½(f(u_q) + f(u_{q+1})) − (δx/(2δt))(u_{q+1} − u_q)`, `f(u) = u²/2`,
/// plus the central viscous term.
pub fn lf_explicit_step(config: &BurgersConfig, u: &Vector) -> Result<Vector> {
    check_grid(config, u)?;
    let dx = config.dx();
    let dt = config.dt;
    let (_, c) = config.coefficients();
    let flux = |l: f64, r: f64| 0.25 * (l * l + r * r) - dx / (2.0 * dt) * (r - l);
    let m = config.cells;
    let mut next = Vector::zeros(m + 1);
    for q in 1..m {
        let (l, mid, r) = (u[q - 1], u[q], u[q + 1]);
        next[q] = mid - dt / dx * (flux(mid, r) - flux(l, mid)) + c * (r - 2.0 * mid + l);
    }
    Ok(next)
}

/// The same step in expanded form
/// `½(u_{q+1} + u_{q−1}) − (δt/(2δx))(u²_{q+1}/2 − u²_{q−1}/2) + ν(δt/δx²)(u_{q+1} − 2u_q + u_{q−1})`.
pub fn lf_explicit_step_expanded(config: &BurgersConfig, u: &Vector) -> Result<Vector> {
    check_grid(config, u)?;
    let (a, c) = config.coefficients();
    let m = config.cells;
    let mut next = Vector::zeros(m + 1);
    for q in 1..m {
        let (l, mid, r) = (u[q - 1], u[q], u[q + 1]);
        next[q] = 0.5 * (r + l) - a * (r * r / 2.0 - l * l / 2.0) + c * (r - 2.0 * mid + l);
    }
    Ok(next)
}

/// Explicit rollout `u_0, …, u_n` from `u0`.
pub fn lf_explicit_rollout(config: &BurgersConfig, u0: &Vector) -> Result<Vec<Vector>> {
    config.validate()?;
    let mut out = vec![u0.clone()];
    for _ in 0..config.steps() {
        let next = lf_explicit_step(config, out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}

/// The implicit Lax–Friedrichs map on the interior nodes:
/// `φ_q(w) = w_q − ½Δ²w_q + (δt/(2δx))(w²_{q+1}/2 − w²_{q−1}/2) − ν(δt/δx²)Δ²w_q`
/// with `Δ²w_q = w_{q+1} − 2w_q + w_{q−1}` and zero boundary values.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitLaxFriedrichs {
    pub config: BurgersConfig,
}

impl ImplicitLaxFriedrichs {
    fn neighbours(w: &Vector, k: usize) -> (f64, f64) {
        let l = if k == 0 { 0.0 } else { w[k - 1] };
        let r = if k + 1 == w.len() { 0.0 } else { w[k + 1] };
        (l, r)
    }

    /// Tridiagonal Jacobian.
    pub fn band_jacobian(&self, w: &Vector) -> BandMatrix {
        let (a, c) = self.config.coefficients();
        let d = w.len();
        let mut jac = BandMatrix::zeros(d, 1, 1);
        for k in 0..d {
            jac.set(k, k, 2.0 + 2.0 * c);
            if k > 0 {
                jac.set(k, k - 1, -0.5 - a * w[k - 1] - c);
            }
            if k + 1 < d {
                jac.set(k, k + 1, -0.5 + a * w[k + 1] - c);
            }
        }
        jac
    }
}

impl DynamicsMap for ImplicitLaxFriedrichs {
    fn dim(&self) -> usize {
        self.config.interior()
    }

    fn apply(&self, w: &Vector) -> Vector {
        let (a, c) = self.config.coefficients();
        Vector::from_fn(w.len(), |k, _| {
            let (l, r) = Self::neighbours(w, k);
            let lap = r - 2.0 * w[k] + l;
            w[k] - 0.5 * lap + a * (r * r / 2.0 - l * l / 2.0) - c * lap
        })
    }

    fn jacobian_transpose_product(&self, w: &Vector, v: &Vector) -> Vector {
        self.band_jacobian(w).tr_mul(v)
    }

    fn jacobian(&self, w: &Vector) -> StructuredMatrix {
        StructuredMatrix::Banded(self.band_jacobian(w))
    }
}

/// The implicit map on a full grid vector; endpoints map to themselves.
pub fn lf_implicit_map(config: &BurgersConfig, w: &Vector) -> Result<Vector> {
    check_grid(config, w)?;
    let map = ImplicitLaxFriedrichs { config: *config };
    let mut out = embed(&map.apply(&restrict(w)));
    out[0] = w[0];
    let m = config.cells;
    out[m] = w[m];
    Ok(out)
}

/// Per-step residual target of the Newton reference solver.
pub const NEWTON_TOLERANCE: f64 = 1e-12;

/// Solves `φ(w) = target` on the interior nodes by damped Newton from `guess`.
pub fn newton_implicit_step(map: &ImplicitLaxFriedrichs, target: &Vector, guess: &Vector, step: usize) -> Result<Vector> {
    let mut w = guess.clone();
    let mut residual = map.apply(&w) - target;
    let mut norm = inf_norm(&residual);
    for _ in 0..100 {
        if norm <= NEWTON_TOLERANCE {
            return Ok(w);
        }
        let lu = BandLu::factor(&map.band_jacobian(&w)).ok_or(Error::NewtonStagnation { step, residual: norm })?;
        let delta = lu.solve(&residual).ok_or(Error::NewtonStagnation { step, residual: norm })?;
        let mut t = 1.0;
        loop {
            let trial = &w - &delta * t;
            let trial_residual = map.apply(&trial) - target;
            let trial_norm = inf_norm(&trial_residual);
            if trial_norm < norm || (t == 1.0 && trial_norm <= NEWTON_TOLERANCE) {
                w = trial;
                residual = trial_residual;
                norm = trial_norm;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::NewtonStagnation { step, residual: norm });
            }
        }
    }
    if norm <= NEWTON_TOLERANCE {
        Ok(w)
    } else {
        Err(Error::NewtonStagnation { step, residual: norm })
    }
}

/// Implicit rollout `u_0 = u0`, `φ(u_{i+1}) = u_i`, on full grid vectors.
pub fn newton_implicit_rollout(config: &BurgersConfig, u0: &Vector) -> Result<Trajectory> {
    config.validate()?;
    check_grid(config, u0)?;
    let map = ImplicitLaxFriedrichs { config: *config };
    let mut interior = vec![restrict(u0)];
    for step in 0..config.steps() {
        let prev = interior.last().expect("nonempty");
        let next = newton_implicit_step(&map, prev, prev, step + 1)?;
        interior.push(next);
    }
    let mut full: Vec<Vector> = interior.iter().map(embed).collect();
    full[0] = u0.clone();
    Trajectory::new(full)
}

/// `min ½‖u_0 − û_0‖²` subject to `φ(u_{i+1}) = u_i`, over interior nodes.
pub fn make_implicit_problem(config: &BurgersConfig, initial: &Vector) -> Result<DynamicsProblem> {
    config.validate()?;
    check_grid(config, initial)?;
    let d = config.interior();
    let n = config.steps();
    let mut terms: Vec<Arc<dyn ObjectiveTerm>> = Vec::with_capacity(n + 1);
    terms.push(Arc::new(SquaredDistanceTerm::new(restrict(initial), 1.0)));
    terms.extend((0..n).map(|_| Arc::new(ZeroTerm { dim: d }) as Arc<dyn ObjectiveTerm>));
    DynamicsProblem::implicit(terms, Arc::new(ImplicitLaxFriedrichs { config: *config }))
}

/// Full grid trajectory from an interior one.
pub fn embed_trajectory(x: &Trajectory) -> Result<Trajectory> {
    Trajectory::new(x.iter().map(embed).collect())
}

/// Discrete `L²` distance `(δx Σ_q (a_q − b_q)²)^{1/2}`.
pub fn l2_distance(config: &BurgersConfig, a: &Vector, b: &Vector) -> f64 {
    ((a - b).norm_squared() * config.dx()).sqrt()
}
