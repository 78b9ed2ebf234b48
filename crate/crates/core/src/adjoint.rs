//! Reduced-space baseline: optimize over the initial state only, with the
//! gradient from one forward rollout and one backward adjoint pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::problem::{ConstraintShape, DynamicsProblem};

/// Forward states `v_0, …, v_n` and adjoints `w_0, …, w_n`.
#[derive(Debug, Clone)]
pub struct AdjointWorkspace {
    pub forward: Vec<Vector>,
    pub adjoint: Vec<Vector>,
}

fn require_explicit(problem: &DynamicsProblem) -> Result<()> {
    match problem.shape() {
        ConstraintShape::ExplicitForward => Ok(()),
        other => Err(Error::UnsupportedShape(other.name())),
    }
}

fn rollout_checked(problem: &DynamicsProblem, v0: &Vector) -> Result<Vec<Vector>> {
    if v0.len() != problem.d() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            index: 0,
            expected: problem.d(),
            found: v0.len(),
        });
    }
    let mut states = Vec::with_capacity(problem.n() + 1);
    states.push(v0.clone());
    for j in 0..problem.n() {
        let next = problem.dynamics().apply(&states[j]);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "forward rollout",
                index: j + 1,
            });
        }
        states.push(next);
    }
    Ok(states)
}

/// `Σ f_i(φ^i(v0))`.
pub fn reduced_objective(problem: &DynamicsProblem, v0: &Vector) -> Result<f64> {
    require_explicit(problem)?;
    let states = rollout_checked(problem, v0)?;
    let value: f64 = states.iter().enumerate().map(|(i, v)| problem.term(i).value(v)).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "reduced objective",
            index: 0,
        });
    }
    Ok(value)
}

/// Objective value and the full forward/adjoint workspace. The backward
/// recursion is `w_n = ∇f_n(v_n)`, `w_{j−1} = ∇φ(v_{j−1})ᵀ w_j + ∇f_{j−1}(v_{j−1})`,
/// and the gradient is `w_0`.
pub fn adjoint_sweep(problem: &DynamicsProblem, v0: &Vector) -> Result<(f64, AdjointWorkspace)> {
    require_explicit(problem)?;
    let forward = rollout_checked(problem, v0)?;
    let n = problem.n();
    let value: f64 = forward.iter().enumerate().map(|(i, v)| problem.term(i).value(v)).sum();
    let mut adjoint = vec![Vector::zeros(problem.d()); n + 1];
    adjoint[n] = problem.term(n).gradient(&forward[n]);
    for j in (1..=n).rev() {
        let back = problem.dynamics().jacobian_transpose_product(&forward[j - 1], &adjoint[j]);
        adjoint[j - 1] = back + problem.term(j - 1).gradient(&forward[j - 1]);
    }
    if !value.is_finite() || !adjoint[0].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "adjoint gradient",
            index: 0,
        });
    }
    Ok((value, AdjointWorkspace { forward, adjoint }))
}

pub fn adjoint_gradient(problem: &DynamicsProblem, v0: &Vector) -> Result<Vector> {
    let (_, mut ws) = adjoint_sweep(problem, v0)?;
    Ok(ws.adjoint.swap_remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Sufficient-decrease constant of the line searches.
    pub armijo: f64,
    /// Curvature constant of the L-BFGS Wolfe search.
    pub wolfe: f64,
    /// L-BFGS history length.
    pub memory: usize,
    /// CG restart period; `None` uses `d·(n+1)`.
    pub restart_every: Option<usize>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tol: 1e-8,
            armijo: 1e-4,
            wolfe: 0.9,
            memory: 10,
            restart_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub objective: Vec<f64>,
    pub gradient_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub v0: Vector,
    pub value: f64,
    pub trace: BaselineTrace,
    pub status: BaselineStatus,
}

/// A smooth function of one vector with value-and-gradient evaluation.
/// Non-finite evaluations come back as `None`.
pub trait ReducedFunction {
    fn eval(&self, v: &Vector) -> Option<(f64, Vector)>;
}

impl ReducedFunction for DynamicsProblem {
    fn eval(&self, v: &Vector) -> Option<(f64, Vector)> {
        let (value, mut ws) = adjoint_sweep(self, v).ok()?;
        Some((value, ws.adjoint.swap_remove(0)))
    }
}

struct LineSearchPoint {
    t: f64,
    value: f64,
    gradient: Vector,
}

/// Backtracking Armijo search whose first trial is refined by the minimizer
/// of the quadratic through `f(0)`, `f'(0)` and `f(t0)`.
fn armijo_search(
    f: &dyn ReducedFunction,
    x: &Vector,
    value: f64,
    slope: f64,
    dir: &Vector,
    t0: f64,
    c1: f64,
) -> Option<LineSearchPoint> {
    let accept = |t: f64, v: f64| v.is_finite() && v <= value + c1 * t * slope;
    let mut t = t0;
    let mut first = true;
    while t > 1e-20 {
        let trial = f.eval(&(x + dir * t));
        let trial_value = trial.as_ref().map_or(f64::INFINITY, |p| p.0);
        if first {
            first = false;
            let curvature = trial_value - value - slope * t;
            if trial_value.is_finite() && curvature > 0.0 {
                let t_quad = -slope * t * t / (2.0 * curvature);
                if t_quad > 0.0 && t_quad.is_finite() {
                    if let Some((vq, gq)) = f.eval(&(x + dir * t_quad)) {
                        if accept(t_quad, vq) && vq <= trial_value {
                            return Some(LineSearchPoint {
                                t: t_quad,
                                value: vq,
                                gradient: gq,
                            });
                        }
                    }
                }
            }
        }
        if accept(t, trial_value) {
            let (v, g) = trial.expect("accepted trials are finite");
            return Some(LineSearchPoint {
                t,
                value: v,
                gradient: g,
            });
        }
        t *= 0.5;
    }
    None
}

/// Line search for the weak Wolfe conditions by bracketing and bisection.
fn wolfe_search(
    f: &dyn ReducedFunction,
    x: &Vector,
    value: f64,
    slope: f64,
    dir: &Vector,
    t0: f64,
    c1: f64,
    c2: f64,
) -> Option<LineSearchPoint> {
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut t = t0;
    let mut best: Option<LineSearchPoint> = None;
    for _ in 0..60 {
        match f.eval(&(x + dir * t)) {
            Some((v, g)) if v <= value + c1 * t * slope => {
                let d_slope = g.dot(dir);
                let point = LineSearchPoint { t, value: v, gradient: g };
                if d_slope >= c2 * slope {
                    return Some(point);
                }
                best = Some(point);
                lo = t;
            }
            _ => hi = t,
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo.max(t) };
        if hi.is_finite() && hi - lo <= 1e-16 * hi {
            break;
        }
    }
    best
}

fn check_start(f: &dyn ReducedFunction, v0: &Vector) -> Result<(f64, Vector)> {
    f.eval(v0).ok_or(Error::NonFinite {
        what: "baseline start",
        index: 0,
    })
}

/// Polak–Ribière (clipped at zero) nonlinear conjugate gradients.
pub fn polak_ribiere_cg(problem: &DynamicsProblem, v0: &Vector, options: &BaselineOptions) -> Result<BaselineResult> {
    require_explicit(problem)?;
    let restart = options.restart_every.unwrap_or(problem.d() * (problem.n() + 1)).max(1);
    minimize_cg(problem, v0, options, restart)
}

pub fn minimize_cg(f: &dyn ReducedFunction, v0: &Vector, options: &BaselineOptions, restart: usize) -> Result<BaselineResult> {
    let (mut value, mut g) = check_start(f, v0)?;
    let mut x = v0.clone();
    let mut trace = BaselineTrace {
        objective: vec![value],
        gradient_norm: vec![g.norm()],
    };
    let mut dir = -&g;
    let mut since_restart = 0;
    let mut t_prev = 1.0 / g.norm().max(1.0);
    let mut status = BaselineStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        if g.norm() <= options.gradient_tol {
            status = BaselineStatus::Converged;
            break;
        }
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            dir = -&g;
            slope = -g.norm_squared();
            since_restart = 0;
        }
        let mut found = armijo_search(f, &x, value, slope, &dir, t_prev, options.armijo);
        if found.is_none() && since_restart > 0 {
            dir = -&g;
            since_restart = 0;
            found = armijo_search(f, &x, value, -g.norm_squared(), &dir, t_prev, options.armijo);
        }
        let Some(point) = found else {
            status = BaselineStatus::LineSearchFailed;
            break;
        };
        iterations += 1;
        x += &dir * point.t;
        t_prev = (2.0 * point.t).min(1e6);
        let beta = (point.gradient.dot(&(&point.gradient - &g)) / g.norm_squared()).max(0.0);
        since_restart += 1;
        g = point.gradient;
        value = point.value;
        if since_restart >= restart {
            dir = -&g;
            since_restart = 0;
        } else {
            dir = -&g + dir * beta;
        }
        trace.objective.push(value);
        trace.gradient_norm.push(g.norm());
    }
    Ok(BaselineResult {
        v0: x,
        value,
        trace,
        status,
    })
}

/// Limited-memory BFGS with the two-loop recursion and a Wolfe line search.
pub fn lbfgs(problem: &DynamicsProblem, v0: &Vector, options: &BaselineOptions) -> Result<BaselineResult> {
    require_explicit(problem)?;
    minimize_lbfgs(problem, v0, options)
}

pub fn minimize_lbfgs(f: &dyn ReducedFunction, v0: &Vector, options: &BaselineOptions) -> Result<BaselineResult> {
    let (mut value, mut g) = check_start(f, v0)?;
    let mut x = v0.clone();
    let mut trace = BaselineTrace {
        objective: vec![value],
        gradient_norm: vec![g.norm()],
    };
    let mut history: std::collections::VecDeque<(Vector, Vector, f64)> = std::collections::VecDeque::new();
    let mut status = BaselineStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        if g.norm() <= options.gradient_tol {
            status = BaselineStatus::Converged;
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0 / g.norm().max(1.0), |(s, y, _)| s.dot(y) / y.norm_squared());
        let mut r = q * gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&r);
            r += s * (a - b);
        }
        let mut dir = -r;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -&g / g.norm().max(1.0);
            slope = g.dot(&dir);
        }
        let Some(point) = wolfe_search(f, &x, value, slope, &dir, 1.0, options.armijo, options.wolfe) else {
            if history.is_empty() {
                status = BaselineStatus::LineSearchFailed;
                break;
            }
            history.clear();
            continue;
        };
        iterations += 1;
        let s = &dir * point.t;
        let y = &point.gradient - &g;
        let sy = s.dot(&y);
        x += &s;
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == options.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        g = point.gradient;
        value = point.value;
        trace.objective.push(value);
        trace.gradient_norm.push(g.norm());
    }
    Ok(BaselineResult {
        v0: x,
        value,
        trace,
        status,
    })
}
