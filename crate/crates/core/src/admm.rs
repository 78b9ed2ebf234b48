//! Gauss–Seidel proximal ADMM.
//!
//! One iteration minimizes the augmented Lagrangian block by block, each block
//! regularized by `‖x_i − x_i^k‖²/(2η_i)` and warm-started at `x_i^k`, and then
//! takes the dual ascent step `λ_j ← λ_j + ρ_j r_j(x^{k+1})`. Explicit and
//! semi-implicit problems sweep blocks in increasing order, implicit problems
//! in decreasing order; controlled problems update every control first, then
//! the states.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{IterationRecord, SweepDetail};
use crate::error::{Error, Result};
use crate::lagrangian::{auglag_unchecked, kkt_unchecked, proximal_memory, PenaltyVector, ProximalWeights};
use crate::linalg::{StructuredMatrix, Vector};
use crate::problem::{
    check_blocks, check_duals, check_trajectory, objective_value, residuals, BlockStructure, ConstraintShape,
    ControlledProblem, DualVariables, DynamicsProblem, Residual, Trajectory,
};
use crate::subsolvers::{
    projected_gradient, solve_subproblem, LmOptions, NelderMeadOptions, Subproblem, SubproblemSpec, SubsolverKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmParams {
    pub rho: PenaltyVector,
    pub eta: ProximalWeights,
    /// Proximal weights of the control blocks (controlled problems only).
    pub xi: Option<Vec<f64>>,
    pub max_iterations: usize,
    /// Stop when `‖x^{k+1} − x^k‖∞` and the feasibility both fall below these.
    pub step_tol: f64,
    pub feasibility_tol: f64,
    /// Stop when the Lagrangian stationarity is below this and the iterate is feasible.
    pub kkt_tol: f64,
    pub subsolver: SubsolverKind,
    /// Inner stopping rule `‖∇‖ ≤ inner_tol·(1 + ‖∇ at warm start‖)`.
    pub inner_tol: f64,
    pub inner_max_iterations: usize,
    pub lm: LmOptions,
    pub nelder_mead: NelderMeadOptions,
    /// Fill `wall_ms` in the records; off by default so logs are reproducible.
    pub record_wall_time: bool,
}

impl AdmmParams {
    pub fn new(rho: PenaltyVector, eta: ProximalWeights) -> Self {
        Self {
            rho,
            eta,
            xi: None,
            max_iterations: 1000,
            step_tol: 1e-10,
            feasibility_tol: 1e-8,
            kkt_tol: 1e-8,
            subsolver: SubsolverKind::Auto,
            inner_tol: 1e-8,
            inner_max_iterations: 100,
            lm: LmOptions::default(),
            nelder_mead: NelderMeadOptions::default(),
            record_wall_time: false,
        }
    }

    /// The same penalty on every constraint and the same weight on every block.
    pub fn uniform(n: usize, rho: f64, eta: f64) -> Result<Self> {
        Ok(Self::new(PenaltyVector::uniform(n, rho)?, ProximalWeights::uniform(n + 1, eta)?))
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.rho.len() != n {
            return Err(Error::BlockCount {
                what: "penalties",
                expected: n,
                found: self.rho.len(),
            });
        }
        if self.eta.len() != n + 1 {
            return Err(Error::BlockCount {
                what: "proximal weights",
                expected: n + 1,
                found: self.eta.len(),
            });
        }
        for (name, v) in [
            ("step_tol", self.step_tol),
            ("feasibility_tol", self.feasibility_tol),
            ("kkt_tol", self.kkt_tol),
            ("inner_tol", self.inner_tol),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Iterates `x^k`, `x^{k−1}` and `λ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: Trajectory,
    pub x_previous: Trajectory,
    pub lambda: DualVariables,
    /// Control blocks (controlled problems only).
    pub controls: Option<Trajectory>,
    pub controls_previous: Option<Trajectory>,
    pub iteration: usize,
    pub last: Option<IterationRecord>,
}

impl AdmmState {
    pub fn new(x: Trajectory, lambda: DualVariables) -> Self {
        Self {
            x_previous: x.clone(),
            x,
            lambda,
            controls: None,
            controls_previous: None,
            iteration: 0,
            last: None,
        }
    }

    pub fn with_controls(x: Trajectory, controls: Trajectory, lambda: DualVariables) -> Self {
        Self {
            controls_previous: Some(controls.clone()),
            controls: Some(controls),
            ..Self::new(x, lambda)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIterations,
    SmallStep,
    Kkt,
    Failed,
}

#[derive(Debug)]
pub struct AdmmRun {
    pub state: AdmmState,
    pub log: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Set when an iteration aborted; `log` then holds the completed iterations.
    pub error: Option<Error>,
}

impl AdmmRun {
    pub fn into_result(self) -> Result<(AdmmState, Vec<IterationRecord>)> {
        match self.error {
            Some(e) => Err(e),
            None => Ok((self.state, self.log)),
        }
    }
}

// ---------------------------------------------------------------------------
// Block subproblems

struct Coupling {
    penalty: f64,
    target: Vector,
}

/// The block-`i` objective
///
/// ```text
/// f_i(z) + ρ_{i−1}/2 ‖next_{i−1}(z) − prev_{i−1}(x_{i−1}) + λ_{i−1}/ρ_{i−1}‖²
///        + ρ_i/2     ‖next_i(x_{i+1}) − prev_i(z) + λ_i/ρ_i‖²
///        + 1/(2η_i)  ‖z − x_i^k‖²
/// ```
///
/// with the coupling terms absent at the ends of the chain.
pub struct BlockSubproblem<'a, B: ?Sized> {
    problem: &'a B,
    block: usize,
    left: Option<Coupling>,
    right: Option<Coupling>,
    center: Vector,
    eta: f64,
}

impl<'a, B: BlockStructure + ?Sized> BlockSubproblem<'a, B> {
    /// Assembles block `i` with neighbours taken from `x` and the proximal
    /// centre `center` (the block's value at the start of the sweep).
    pub fn assemble(
        problem: &'a B,
        x: &Trajectory,
        lambda: &DualVariables,
        rho: &PenaltyVector,
        eta: &ProximalWeights,
        i: usize,
        center: Vector,
    ) -> Result<Self> {
        let n = problem.steps();
        if i > n {
            return Err(Error::IndexOutOfRange { index: i, max: n });
        }
        let left = (i >= 1).then(|| Coupling {
            penalty: rho[i - 1],
            target: problem.prev_apply(i - 1, &x[i - 1]) - &lambda[i - 1] / rho[i - 1],
        });
        let right = (i < n).then(|| Coupling {
            penalty: rho[i],
            target: problem.next_apply(i, &x[i + 1]) + &lambda[i] / rho[i],
        });
        Ok(Self {
            problem,
            block: i,
            left,
            right,
            center,
            eta: eta[i],
        })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn has_left_coupling(&self) -> bool {
        self.left.is_some()
    }

    pub fn has_right_coupling(&self) -> bool {
        self.right.is_some()
    }
}

impl<B: BlockStructure + ?Sized> Subproblem for BlockSubproblem<'_, B> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn value(&self, z: &Vector) -> f64 {
        let i = self.block;
        let mut v = self.problem.term_value(i, z);
        if let Some(c) = &self.left {
            v += 0.5 * c.penalty * (self.problem.next_apply(i - 1, z) - &c.target).norm_squared();
        }
        if let Some(c) = &self.right {
            v += 0.5 * c.penalty * (self.problem.prev_apply(i, z) - &c.target).norm_squared();
        }
        v + (z - &self.center).norm_squared() / (2.0 * self.eta)
    }

    fn gradient(&self, z: &Vector) -> Vector {
        let i = self.block;
        let mut g = self.problem.term_gradient(i, z);
        if let Some(c) = &self.left {
            let r = (self.problem.next_apply(i - 1, z) - &c.target) * c.penalty;
            g += self.problem.next_jt(i - 1, z, &r);
        }
        if let Some(c) = &self.right {
            let r = (self.problem.prev_apply(i, z) - &c.target) * c.penalty;
            g += self.problem.prev_jt(i, z, &r);
        }
        g + (z - &self.center) / self.eta
    }

    fn residual_blocks(&self, z: &Vector) -> Option<Vec<Residual>> {
        let i = self.block;
        let mut pieces = vec![self.problem.term_residual(i, z)?];
        if let Some(c) = &self.left {
            let s = c.penalty.sqrt();
            pieces.push(Residual {
                values: (self.problem.next_apply(i - 1, z) - &c.target) * s,
                jacobian: self.problem.next_jacobian(i - 1, z).scaled(s),
            });
        }
        if let Some(c) = &self.right {
            let s = c.penalty.sqrt();
            pieces.push(Residual {
                values: (self.problem.prev_apply(i, z) - &c.target) * s,
                jacobian: self.problem.prev_jacobian(i, z).scaled(s),
            });
        }
        let s = 1.0 / self.eta.sqrt();
        pieces.push(Residual {
            values: (z - &self.center) * s,
            jacobian: StructuredMatrix::Identity { dim: z.len(), scale: s },
        });
        Some(pieces)
    }
}

/// Solves one block subproblem from its warm start and enforces the descent
/// contract. Returns the new block.
fn solve_block(objective: &dyn Subproblem, warm: Vector, block: usize, params: &AdmmParams) -> Result<Vector> {
    let warm_value = objective.value(&warm);
    if !warm_value.is_finite() {
        return Err(Error::NonFinite {
            what: "block subproblem at warm start",
            index: block,
        });
    }
    let tolerance = params.inner_tol * (1.0 + objective.gradient(&warm).norm());
    let spec = SubproblemSpec {
        objective,
        warm_start: warm,
        tolerance,
        max_iterations: params.inner_max_iterations,
    };
    let report = solve_subproblem(&spec, params.subsolver, &params.lm, &params.nelder_mead)?;
    if !(report.value <= warm_value) {
        return Err(Error::DescentViolation {
            block,
            before: warm_value,
            after: report.value,
        });
    }
    Ok(report.point)
}

fn update_primal_block<B: BlockStructure + ?Sized>(
    problem: &B,
    work: &mut Trajectory,
    start: &Trajectory,
    lambda: &DualVariables,
    params: &AdmmParams,
    i: usize,
) -> Result<()> {
    let sub = BlockSubproblem::assemble(problem, work, lambda, &params.rho, &params.eta, i, start[i].clone())?;
    let next = solve_block(&sub, start[i].clone(), i, params)?;
    *work.block_mut(i) = next;
    Ok(())
}

/// `λ_j ← λ_j + ρ_j r_j(x)`.
pub fn dual_update<B: BlockStructure + ?Sized>(
    problem: &B,
    x: &Trajectory,
    lambda: &mut DualVariables,
    rho: &PenaltyVector,
    j: usize,
) -> Result<()> {
    if j >= problem.steps() {
        return Err(Error::IndexOutOfRange {
            index: j,
            max: problem.steps().saturating_sub(1),
        });
    }
    let r = problem.constraint_residual(j, &x[j], &x[j + 1]);
    let block = lambda.block_mut(j);
    *block += r * rho[j];
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    Increasing,
    Decreasing,
}

struct SweepOutcome {
    auglag_before: f64,
    auglag_primal: f64,
    lambda_before: DualVariables,
    control_steps: Vec<f64>,
    control_memory: f64,
}

fn primal_sweep_and_duals<B: BlockStructure + ?Sized>(
    problem: &B,
    state: &mut AdmmState,
    params: &AdmmParams,
    blocks: impl Iterator<Item = usize>,
) -> Result<(f64, f64, DualVariables)> {
    let auglag_before = auglag_unchecked(problem, &state.x, &state.lambda, &params.rho);
    let start = state.x.clone();
    let mut work = state.x.clone();
    for i in blocks {
        update_primal_block(problem, &mut work, &start, &state.lambda, params, i)?;
    }
    if !work.is_finite() {
        return Err(Error::NonFinite {
            what: "primal iterate",
            index: state.iteration + 1,
        });
    }
    let auglag_primal = auglag_unchecked(problem, &work, &state.lambda, &params.rho);
    let lambda_before = state.lambda.clone();
    for j in 0..problem.steps() {
        dual_update(problem, &work, &mut state.lambda, &params.rho, j)?;
    }
    state.x_previous = start;
    state.x = work;
    Ok((auglag_before, auglag_primal, lambda_before))
}

fn check_sweep_inputs<B: BlockStructure + ?Sized>(problem: &B, state: &AdmmState, params: &AdmmParams) -> Result<()> {
    params.validate(problem.steps())?;
    check_trajectory(problem, &state.x)?;
    check_trajectory(problem, &state.x_previous)?;
    check_duals(problem, &state.lambda)
}

fn sweep_dynamics(problem: &DynamicsProblem, state: &mut AdmmState, params: &AdmmParams, order: Order) -> Result<SweepOutcome> {
    check_sweep_inputs(problem, state, params)?;
    let n = problem.n();
    let (auglag_before, auglag_primal, lambda_before) = match order {
        Order::Increasing => primal_sweep_and_duals(problem, state, params, 0..=n)?,
        Order::Decreasing => primal_sweep_and_duals(problem, state, params, (0..=n).rev())?,
    };
    Ok(SweepOutcome {
        auglag_before,
        auglag_primal,
        lambda_before,
        control_steps: Vec::new(),
        control_memory: 0.0,
    })
}

/// One increasing-order iteration; for explicit and semi-implicit problems.
pub fn sweep_forward(problem: &DynamicsProblem, state: &mut AdmmState, params: &AdmmParams) -> Result<IterationRecord> {
    if matches!(problem.shape(), ConstraintShape::ImplicitBackward) {
        return Err(Error::UnsupportedShape(problem.shape().name()));
    }
    let started = Instant::now();
    let outcome = sweep_dynamics(problem, state, params, Order::Increasing)?;
    Ok(finish_iteration(problem, state, params, outcome, started))
}

/// One decreasing-order iteration; for implicit problems.
pub fn sweep_reverse(problem: &DynamicsProblem, state: &mut AdmmState, params: &AdmmParams) -> Result<IterationRecord> {
    if !matches!(problem.shape(), ConstraintShape::ImplicitBackward) {
        return Err(Error::UnsupportedShape(problem.shape().name()));
    }
    let started = Instant::now();
    let outcome = sweep_dynamics(problem, state, params, Order::Decreasing)?;
    Ok(finish_iteration(problem, state, params, outcome, started))
}

/// The sweep matching the problem's constraint shape.
pub fn iterate(problem: &DynamicsProblem, state: &mut AdmmState, params: &AdmmParams) -> Result<IterationRecord> {
    match problem.shape() {
        ConstraintShape::ImplicitBackward => sweep_reverse(problem, state, params),
        _ => sweep_forward(problem, state, params),
    }
}

fn finish_iteration<B: BlockStructure + ?Sized>(
    problem: &B,
    state: &mut AdmmState,
    params: &AdmmParams,
    outcome: SweepOutcome,
    started: Instant,
) -> IterationRecord {
    let x = &state.x;
    let r = residuals(problem, x);
    let auglag = auglag_unchecked(problem, x, &state.lambda, &params.rho);
    let block_steps = x.block_sq_dists(&state.x_previous);
    let proximal_decrease: f64 = block_steps.iter().enumerate().map(|(i, s)| s / (2.0 * params.eta[i])).sum();
    let lyapunov = auglag + proximal_memory(x, &state.x_previous, &params.eta) + outcome.control_memory;
    let kkt = kkt_unchecked(problem, x, &state.lambda);
    state.iteration += 1;
    let record = IterationRecord {
        iter: state.iteration,
        objective: objective_value(problem, x),
        constraint_inf: kkt.feasibility,
        constraint_sq: r.iter().map(|v| v.norm_squared()).sum(),
        auglag,
        lyapunov,
        primal_step: x.max_abs_diff(&state.x_previous),
        dual_step: state.lambda.max_abs_diff(&outcome.lambda_before),
        kkt_stat: kkt.stationarity,
        wall_ms: if params.record_wall_time {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
        detail: Some(SweepDetail {
            block_steps,
            control_steps: outcome.control_steps,
            auglag_before: outcome.auglag_before,
            auglag_primal: outcome.auglag_primal,
            proximal_decrease,
        }),
    };
    state.last = Some(record.clone());
    record
}

fn stop_reason(record: &IterationRecord, params: &AdmmParams) -> Option<StopReason> {
    let feasible = record.constraint_inf <= params.feasibility_tol;
    if feasible && record.kkt_stat <= params.kkt_tol {
        Some(StopReason::Kkt)
    } else if feasible && record.primal_step <= params.step_tol {
        Some(StopReason::SmallStep)
    } else {
        None
    }
}

fn run_loop(
    mut state: AdmmState,
    params: &AdmmParams,
    mut step: impl FnMut(&mut AdmmState) -> Result<IterationRecord>,
    observer: &mut dyn FnMut(&AdmmState),
) -> AdmmRun {
    let mut log = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut error = None;
    while state.iteration < params.max_iterations {
        match step(&mut state) {
            Ok(record) => {
                log.push(record.clone());
                observer(&state);
                if let Some(reason) = stop_reason(&record, params) {
                    stop = reason;
                    break;
                }
            }
            Err(e) => {
                stop = StopReason::Failed;
                error = Some(e);
                break;
            }
        }
    }
    AdmmRun {
        state,
        log,
        stop,
        error,
    }
}

/// Runs ADMM from `(x0, λ0)` until a stopping rule fires.
pub fn solve(problem: &DynamicsProblem, x0: Trajectory, lambda0: DualVariables, params: &AdmmParams) -> Result<AdmmRun> {
    solve_with_observer(problem, x0, lambda0, params, &mut |_| {})
}

/// [`solve`] with a callback invoked after every completed iteration.
pub fn solve_with_observer(
    problem: &DynamicsProblem,
    x0: Trajectory,
    lambda0: DualVariables,
    params: &AdmmParams,
    observer: &mut dyn FnMut(&AdmmState),
) -> Result<AdmmRun> {
    params.validate(problem.n())?;
    check_trajectory(problem, &x0)?;
    check_duals(problem, &lambda0)?;
    let state = AdmmState::new(x0, lambda0);
    Ok(run_loop(state, params, |s| iterate(problem, s, params), observer))
}

// ---------------------------------------------------------------------------
// Controlled problems

struct ControlSubproblem<'a> {
    problem: &'a ControlledProblem,
    q: usize,
    state: Vector,
    /// `x_{q+1} + λ_q/ρ_q` and `ρ_q`, absent for the last control.
    next: Option<Coupling>,
    center: Vector,
    xi: f64,
}

impl Subproblem for ControlSubproblem<'_> {
    fn dim(&self) -> usize {
        self.problem.control_dim()
    }

    fn value(&self, u: &Vector) -> f64 {
        let mut v = self.problem.term(self.q).value(&self.state, u);
        if let Some(c) = &self.next {
            v += 0.5 * c.penalty * (&c.target - self.problem.dynamics().apply(&self.state, u)).norm_squared();
        }
        v + (u - &self.center).norm_squared() / (2.0 * self.xi)
    }

    fn gradient(&self, u: &Vector) -> Vector {
        let mut g = self.problem.term(self.q).gradient(&self.state, u).1;
        if let Some(c) = &self.next {
            let r = (&c.target - self.problem.dynamics().apply(&self.state, u)) * c.penalty;
            g -= self.problem.dynamics().control_jt(&self.state, u, &r);
        }
        g + (u - &self.center) / self.xi
    }
}

fn check_controlled(problem: &ControlledProblem, state: &AdmmState, params: &AdmmParams) -> Result<Vec<f64>> {
    params.validate(problem.n())?;
    let xi = params
        .xi
        .clone()
        .ok_or_else(|| Error::Config("controlled problems need control proximal weights".into()))?;
    if xi.len() != problem.n() + 1 || xi.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "expected {} positive control proximal weights",
            problem.n() + 1
        )));
    }
    if problem.projection().is_none() {
        return Err(Error::Config("controlled problems need an admissible-set projection".into()));
    }
    let controls = state
        .controls
        .as_ref()
        .ok_or_else(|| Error::Config("controlled state carries no control blocks".into()))?;
    check_blocks("controls", controls.blocks(), problem.n() + 1, problem.control_dim())?;
    check_blocks("trajectory", state.x.blocks(), problem.n() + 1, problem.state_dim())?;
    check_blocks("dual variables", state.lambda.blocks(), problem.n(), problem.state_dim())?;
    Ok(xi)
}

/// One controlled iteration: every control (ascending), then the states
/// `x_1, …, x_n` (ascending), then the duals.
pub fn sweep_control(problem: &ControlledProblem, state: &mut AdmmState, params: &AdmmParams) -> Result<IterationRecord> {
    let xi = check_controlled(problem, state, params)?;
    let started = Instant::now();
    let projection = problem.projection().expect("checked above");
    let n = problem.n();
    let controls_start = state.controls.clone().expect("checked above");
    let auglag_before = {
        let view = problem.with_controls(&controls_start);
        auglag_unchecked(&view, &state.x, &state.lambda, &params.rho)
    };
    let mut controls = controls_start.clone();
    for q in 0..=n {
        let next = (q < n).then(|| Coupling {
            penalty: params.rho[q],
            target: &state.x[q + 1] + &state.lambda[q] / params.rho[q],
        });
        let sub = ControlSubproblem {
            problem,
            q,
            state: state.x[q].clone(),
            next,
            center: controls_start[q].clone(),
            xi: xi[q],
        };
        let warm = controls_start[q].clone();
        let warm_value = sub.value(&warm);
        let spec = SubproblemSpec {
            objective: &sub,
            tolerance: params.inner_tol * (1.0 + sub.gradient(&warm).norm()),
            warm_start: warm,
            max_iterations: params.inner_max_iterations,
        };
        let report = projected_gradient(&spec, projection.as_ref())?;
        if !(report.value <= warm_value) {
            return Err(Error::DescentViolation {
                block: q,
                before: warm_value,
                after: report.value,
            });
        }
        *controls.block_mut(q) = report.point;
    }
    let view = problem.with_controls(&controls);
    let (_, auglag_primal, lambda_before) = primal_sweep_and_duals(&view, state, params, 1..=n)?;
    let control_steps = controls.block_sq_dists(&controls_start);
    let control_memory = control_steps.iter().enumerate().map(|(q, s)| s / (4.0 * xi[q])).sum();
    let outcome = SweepOutcome {
        auglag_before,
        auglag_primal,
        lambda_before,
        control_steps,
        control_memory,
    };
    let record = finish_iteration(&view, state, params, outcome, started);
    state.controls_previous = Some(controls_start);
    state.controls = Some(controls);
    Ok(record)
}

/// Runs controlled ADMM from states `x0` (with `x0[0]` the fixed initial
/// state), controls `u0` and multipliers `λ0`. Initial controls are projected
/// onto the admissible set first.
pub fn solve_controlled(
    problem: &ControlledProblem,
    x0: Trajectory,
    u0: Trajectory,
    lambda0: DualVariables,
    params: &AdmmParams,
) -> Result<AdmmRun> {
    let projection = problem
        .projection()
        .ok_or_else(|| Error::Config("controlled problems need an admissible-set projection".into()))?;
    let mut x0 = x0;
    check_blocks("trajectory", x0.blocks(), problem.n() + 1, problem.state_dim())?;
    *x0.block_mut(0) = problem.initial_state().clone();
    let u0 = Trajectory::new(u0.iter().map(|u| projection(u)).collect())?;
    let state = AdmmState::with_controls(x0, u0, lambda0);
    check_controlled(problem, &state, params)?;
    Ok(run_loop(state, params, |s| sweep_control(problem, s, params), &mut |_| {}))
}
