//! Dynamics-constrained problem model: objective terms, dynamics maps, the
//! constraint shapes and the block containers shared by every solver.
//!
//! A problem couples `n + 1` blocks `x_0, …, x_n ∈ Rᵈ` through `n` constraints.
//! Every constraint shape is written uniformly as
//!
//! ```text
//! r_j(x) = next_j(x_{j+1}) - prev_j(x_j),   j = 0, …, n-1
//! ```
//!
//! with `next = id, prev = φ` for explicit dynamics, `next = A_j, prev = φ_j`
//! for semi-implicit steps and `next = φ, prev = id` for implicit steps. The
//! [`BlockStructure`] trait exposes exactly that decomposition so the
//! Lagrangian, the subproblem assembly and the sweeps need not care which
//! shape they run on.
//!
//! All callbacks must be pure: the same input yields the same output and no
//! observable state changes. Problems are immutable once built and can be
//! shared between threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{dense_from_transpose_products, Matrix, StructuredMatrix, Vector};

/// Residual vector together with its Jacobian.
#[derive(Debug, Clone)]
pub struct Residual {
    pub values: Vector,
    pub jacobian: StructuredMatrix,
}

/// One summand `f_i` of the separable objective.
pub trait ObjectiveTerm: Send + Sync {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;

    /// Residual `r` with `f = ½‖r‖²`, when the term has least-squares structure.
    fn residual(&self, _x: &Vector) -> Option<Residual> {
        None
    }

    fn is_least_squares(&self) -> bool {
        false
    }
}

/// The discrete dynamics map `φ: Rᵈ → Rᵈ`.
pub trait DynamicsMap: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &Vector) -> Vector;
    /// `∇φ(x)ᵀ w`.
    fn jacobian_transpose_product(&self, x: &Vector, w: &Vector) -> Vector;

    /// Full Jacobian; assembled from transpose products unless overridden.
    fn jacobian(&self, x: &Vector) -> StructuredMatrix {
        let d = self.dim();
        StructuredMatrix::Dense(dense_from_transpose_products(d, d, |w| {
            self.jacobian_transpose_product(x, w)
        }))
    }
}

macro_rules! block_container {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            blocks: Vec<Vector>,
        }

        impl $name {
            /// Builds the container, checking that every block has the same dimension.
            pub fn new(blocks: Vec<Vector>) -> Result<Self> {
                if let Some(first) = blocks.first() {
                    let d = first.len();
                    for (i, b) in blocks.iter().enumerate() {
                        if b.len() != d {
                            return Err(Error::DimensionMismatch {
                                what: stringify!($name),
                                index: i,
                                expected: d,
                                found: b.len(),
                            });
                        }
                    }
                }
                Ok(Self { blocks })
            }

            pub fn zeros(count: usize, dim: usize) -> Self {
                Self { blocks: vec![Vector::zeros(dim); count] }
            }

            pub fn len(&self) -> usize {
                self.blocks.len()
            }

            pub fn is_empty(&self) -> bool {
                self.blocks.is_empty()
            }

            /// Block dimension (0 for an empty container).
            pub fn dim(&self) -> usize {
                self.blocks.first().map_or(0, |b| b.len())
            }

            pub fn block(&self, i: usize) -> &Vector {
                &self.blocks[i]
            }

            pub fn block_mut(&mut self, i: usize) -> &mut Vector {
                &mut self.blocks[i]
            }

            pub fn blocks(&self) -> &[Vector] {
                &self.blocks
            }

            pub fn into_blocks(self) -> Vec<Vector> {
                self.blocks
            }

            pub fn iter(&self) -> std::slice::Iter<'_, Vector> {
                self.blocks.iter()
            }

            pub fn is_finite(&self) -> bool {
                self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
            }

            /// Largest entry-wise difference to `other`.
            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.blocks
                    .iter()
                    .zip(&other.blocks)
                    .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
                    .fold(0.0, f64::max)
            }

            /// Per-block squared Euclidean distances to `other`.
            pub fn block_sq_dists(&self, other: &Self) -> Vec<f64> {
                self.blocks
                    .iter()
                    .zip(&other.blocks)
                    .map(|(a, b)| (a - b).norm_squared())
                    .collect()
            }

            /// All blocks concatenated.
            pub fn flatten(&self) -> Vector {
                let d = self.dim();
                Vector::from_iterator(self.len() * d, self.blocks.iter().flat_map(|b| b.iter().copied()))
            }

            /// Splits a flat vector into blocks of dimension `dim`.
            pub fn from_flat(flat: &Vector, dim: usize) -> Result<Self> {
                if dim == 0 || flat.len() % dim != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "flat length {} is not a multiple of block dimension {dim}",
                        flat.len()
                    )));
                }
                Ok(Self {
                    blocks: flat
                        .as_slice()
                        .chunks(dim)
                        .map(Vector::from_column_slice)
                        .collect(),
                })
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = Vector;
            fn index(&self, i: usize) -> &Vector {
                &self.blocks[i]
            }
        }
    };
}

block_container!(
    /// Primal blocks `x = (x_0, …, x_n)`.
    Trajectory
);
block_container!(
    /// Multipliers `λ = (λ_0, …, λ_{n-1})`, one per constraint.
    DualVariables
);

/// Uniform block view consumed by the Lagrangian and the ADMM machinery.
///
/// Block indices run over `0..=steps()`, constraint indices over `0..steps()`.
pub trait BlockStructure {
    /// Number of constraints `n`.
    fn steps(&self) -> usize;
    /// Block dimension `d`.
    fn dim(&self) -> usize;

    fn term_value(&self, i: usize, x: &Vector) -> f64;
    fn term_gradient(&self, i: usize, x: &Vector) -> Vector;
    fn term_residual(&self, i: usize, x: &Vector) -> Option<Residual>;

    /// Operator applied to `x_{j+1}` in constraint `j`.
    fn next_apply(&self, j: usize, x: &Vector) -> Vector;
    fn next_jacobian(&self, j: usize, x: &Vector) -> StructuredMatrix;
    fn next_jt(&self, j: usize, x: &Vector, w: &Vector) -> Vector;

    /// Operator applied to `x_j` in constraint `j`.
    fn prev_apply(&self, j: usize, x: &Vector) -> Vector;
    fn prev_jacobian(&self, j: usize, x: &Vector) -> StructuredMatrix;
    fn prev_jt(&self, j: usize, x: &Vector, w: &Vector) -> Vector;

    fn constraint_residual(&self, j: usize, x_j: &Vector, x_next: &Vector) -> Vector {
        self.next_apply(j, x_next) - self.prev_apply(j, x_j)
    }
}

/// Checks that `x` has `steps + 1` blocks of dimension `dim`.
pub fn check_trajectory<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory) -> Result<()> {
    check_blocks("trajectory", x.blocks(), problem.steps() + 1, problem.dim())
}

pub fn check_duals<B: BlockStructure + ?Sized>(problem: &B, lambda: &DualVariables) -> Result<()> {
    check_blocks("dual variables", lambda.blocks(), problem.steps(), problem.dim())
}

pub(crate) fn check_blocks(what: &'static str, blocks: &[Vector], count: usize, dim: usize) -> Result<()> {
    if blocks.len() != count {
        return Err(Error::BlockCount {
            what,
            expected: count,
            found: blocks.len(),
        });
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.len() != dim {
            return Err(Error::DimensionMismatch {
                what,
                index: i,
                expected: dim,
                found: b.len(),
            });
        }
    }
    Ok(())
}

/// One semi-implicit step `A_j x_{j+1} = φ_j(x_j)`.
#[derive(Clone)]
pub struct SemiImplicitStep {
    pub matrix: Matrix,
    /// Step-specific map; `None` uses the problem's shared dynamics.
    pub map: Option<Arc<dyn DynamicsMap>>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl SemiImplicitStep {
    pub fn new(matrix: Matrix, map: Option<Arc<dyn DynamicsMap>>) -> Self {
        let lu = matrix.clone().lu();
        Self { matrix, map, lu }
    }

    pub fn solve(&self, rhs: &Vector) -> Option<Vector> {
        self.lu.solve(rhs)
    }

    /// 2-norm condition number, `∞` when singular.
    pub fn condition_estimate(&self) -> f64 {
        let s = self.matrix.clone().singular_values();
        let (max, min) = (s.max(), s.min());
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

impl fmt::Debug for SemiImplicitStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SemiImplicitStep")
            .field("matrix", &self.matrix)
            .field("has_own_map", &self.map.is_some())
            .finish()
    }
}

/// How the dynamics enters the constraints.
#[derive(Debug, Clone)]
pub enum ConstraintShape {
    /// `x_{j+1} = φ(x_j)`.
    ExplicitForward,
    /// `A_j x_{j+1} = φ_j(x_j)`.
    SemiImplicit(Vec<SemiImplicitStep>),
    /// `φ(x_{j+1}) = x_j`.
    ImplicitBackward,
}

impl ConstraintShape {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintShape::ExplicitForward => "explicit-forward",
            ConstraintShape::SemiImplicit(_) => "semi-implicit",
            ConstraintShape::ImplicitBackward => "implicit-backward",
        }
    }
}

/// Default cap on the condition estimate of semi-implicit step matrices.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// `min Σ f_i(x_i)` subject to the dynamics constraints of `shape`.
#[derive(Clone)]
pub struct DynamicsProblem {
    n: usize,
    d: usize,
    terms: Vec<Arc<dyn ObjectiveTerm>>,
    dynamics: Arc<dyn DynamicsMap>,
    shape: ConstraintShape,
}

impl fmt::Debug for DynamicsProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsProblem")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("shape", &self.shape.name())
            .finish()
    }
}

impl DynamicsProblem {
    pub fn new(
        terms: Vec<Arc<dyn ObjectiveTerm>>,
        dynamics: Arc<dyn DynamicsMap>,
        shape: ConstraintShape,
    ) -> Result<Self> {
        Self::with_condition_cap(terms, dynamics, shape, DEFAULT_CONDITION_CAP)
    }

    pub fn with_condition_cap(
        terms: Vec<Arc<dyn ObjectiveTerm>>,
        dynamics: Arc<dyn DynamicsMap>,
        shape: ConstraintShape,
        condition_cap: f64,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter("at least one objective term is required".into()));
        }
        let d = dynamics.dim();
        if d == 0 {
            return Err(Error::InvalidParameter("block dimension must be at least 1".into()));
        }
        let n = terms.len() - 1;
        if let ConstraintShape::SemiImplicit(steps) = &shape {
            if steps.len() != n {
                return Err(Error::BlockCount {
                    what: "semi-implicit steps",
                    expected: n,
                    found: steps.len(),
                });
            }
            for (j, step) in steps.iter().enumerate() {
                if step.matrix.nrows() != d || step.matrix.ncols() != d {
                    return Err(Error::DimensionMismatch {
                        what: "semi-implicit step matrix",
                        index: j,
                        expected: d,
                        found: step.matrix.nrows().max(step.matrix.ncols()),
                    });
                }
                if let Some(map) = &step.map {
                    if map.dim() != d {
                        return Err(Error::DimensionMismatch {
                            what: "semi-implicit step map",
                            index: j,
                            expected: d,
                            found: map.dim(),
                        });
                    }
                }
                let condition = step.condition_estimate();
                if !(condition <= condition_cap) {
                    return Err(Error::SingularStep { step: j, condition });
                }
            }
        }
        Ok(Self {
            n,
            d,
            terms,
            dynamics,
            shape,
        })
    }

    pub fn explicit(terms: Vec<Arc<dyn ObjectiveTerm>>, dynamics: Arc<dyn DynamicsMap>) -> Result<Self> {
        Self::new(terms, dynamics, ConstraintShape::ExplicitForward)
    }

    pub fn implicit(terms: Vec<Arc<dyn ObjectiveTerm>>, dynamics: Arc<dyn DynamicsMap>) -> Result<Self> {
        Self::new(terms, dynamics, ConstraintShape::ImplicitBackward)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> &ConstraintShape {
        &self.shape
    }

    pub fn dynamics(&self) -> &Arc<dyn DynamicsMap> {
        &self.dynamics
    }

    pub fn terms(&self) -> &[Arc<dyn ObjectiveTerm>] {
        &self.terms
    }

    pub fn term(&self, i: usize) -> &dyn ObjectiveTerm {
        self.terms[i].as_ref()
    }

    /// The map used in constraint `j` (differs from the shared one only for
    /// semi-implicit steps that carry their own `φ_j`).
    pub fn step_map(&self, j: usize) -> &dyn DynamicsMap {
        match &self.shape {
            ConstraintShape::SemiImplicit(steps) => steps[j].map.as_deref().unwrap_or(self.dynamics.as_ref()),
            _ => self.dynamics.as_ref(),
        }
    }

    /// `Σ f_i(x_i)`.
    pub fn evaluate_objective(&self, x: &Trajectory) -> Result<f64> {
        check_trajectory(self, x)?;
        Ok(objective_value(self, x))
    }

    /// Shape-appropriate residuals `r_0, …, r_{n-1}`.
    pub fn constraint_residuals(&self, x: &Trajectory) -> Result<Vec<Vector>> {
        check_trajectory(self, x)?;
        Ok(residuals(self, x))
    }

    /// Forward rollout from `x0` satisfying every constraint by construction.
    pub fn feasibility_rollout(&self, x0: &Vector) -> Result<Trajectory> {
        if x0.len() != self.d {
            return Err(Error::DimensionMismatch {
                what: "rollout start",
                index: 0,
                expected: self.d,
                found: x0.len(),
            });
        }
        let mut blocks = Vec::with_capacity(self.n + 1);
        blocks.push(x0.clone());
        for j in 0..self.n {
            let rhs = self.step_map(j).apply(&blocks[j]);
            let next = match &self.shape {
                ConstraintShape::ExplicitForward => rhs,
                ConstraintShape::SemiImplicit(steps) => {
                    let mut sol = steps[j].solve(&rhs).ok_or(Error::SingularStep {
                        step: j,
                        condition: f64::INFINITY,
                    })?;
                    // One step of iterative refinement keeps the residual at rounding level.
                    let defect = &rhs - &steps[j].matrix * &sol;
                    if let Some(corr) = steps[j].solve(&defect) {
                        sol += corr;
                    }
                    sol
                }
                ConstraintShape::ImplicitBackward => return Err(Error::UnsupportedShape(self.shape.name())),
            };
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "rollout",
                    index: j + 1,
                });
            }
            blocks.push(next);
        }
        Trajectory::new(blocks)
    }
}

pub(crate) fn objective_value<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory) -> f64 {
    x.iter().enumerate().map(|(i, xi)| problem.term_value(i, xi)).sum()
}

pub(crate) fn residuals<B: BlockStructure + ?Sized>(problem: &B, x: &Trajectory) -> Vec<Vector> {
    (0..problem.steps())
        .map(|j| problem.constraint_residual(j, &x[j], &x[j + 1]))
        .collect()
}

impl BlockStructure for DynamicsProblem {
    fn steps(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn term_value(&self, i: usize, x: &Vector) -> f64 {
        self.terms[i].value(x)
    }

    fn term_gradient(&self, i: usize, x: &Vector) -> Vector {
        self.terms[i].gradient(x)
    }

    fn term_residual(&self, i: usize, x: &Vector) -> Option<Residual> {
        self.terms[i].residual(x)
    }

    fn next_apply(&self, j: usize, x: &Vector) -> Vector {
        match &self.shape {
            ConstraintShape::ExplicitForward => x.clone(),
            ConstraintShape::SemiImplicit(steps) => &steps[j].matrix * x,
            ConstraintShape::ImplicitBackward => self.dynamics.apply(x),
        }
    }

    fn next_jacobian(&self, j: usize, x: &Vector) -> StructuredMatrix {
        match &self.shape {
            ConstraintShape::ExplicitForward => StructuredMatrix::identity(self.d),
            ConstraintShape::SemiImplicit(steps) => StructuredMatrix::Dense(steps[j].matrix.clone()),
            ConstraintShape::ImplicitBackward => self.dynamics.jacobian(x),
        }
    }

    fn next_jt(&self, j: usize, x: &Vector, w: &Vector) -> Vector {
        match &self.shape {
            ConstraintShape::ExplicitForward => w.clone(),
            ConstraintShape::SemiImplicit(steps) => steps[j].matrix.tr_mul(w),
            ConstraintShape::ImplicitBackward => self.dynamics.jacobian_transpose_product(x, w),
        }
    }

    fn prev_apply(&self, j: usize, x: &Vector) -> Vector {
        match &self.shape {
            ConstraintShape::ImplicitBackward => x.clone(),
            _ => self.step_map(j).apply(x),
        }
    }

    fn prev_jacobian(&self, j: usize, x: &Vector) -> StructuredMatrix {
        match &self.shape {
            ConstraintShape::ImplicitBackward => StructuredMatrix::identity(self.d),
            _ => self.step_map(j).jacobian(x),
        }
    }

    fn prev_jt(&self, j: usize, x: &Vector, w: &Vector) -> Vector {
        match &self.shape {
            ConstraintShape::ImplicitBackward => w.clone(),
            _ => self.step_map(j).jacobian_transpose_product(x, w),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimal control

/// Objective term of a controlled problem, `f_i(x, u)`.
pub trait ControlTerm: Send + Sync {
    fn value(&self, x: &Vector, u: &Vector) -> f64;
    /// Gradients with respect to the state and the control.
    fn gradient(&self, x: &Vector, u: &Vector) -> (Vector, Vector);
    /// State-only residual view for fixed `u`.
    fn state_residual(&self, _x: &Vector, _u: &Vector) -> Option<Residual> {
        None
    }
    /// Control-only residual view for fixed `x`.
    fn control_residual(&self, _x: &Vector, _u: &Vector) -> Option<Residual> {
        None
    }
}

/// Controlled dynamics `φ(x, u)`.
pub trait ControlledDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn apply(&self, x: &Vector, u: &Vector) -> Vector;
    /// `∇ₓφ(x, u)ᵀ w`.
    fn state_jt(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector;
    /// `∇ᵤφ(x, u)ᵀ w`.
    fn control_jt(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector;

    fn state_jacobian(&self, x: &Vector, u: &Vector) -> StructuredMatrix {
        let d = self.state_dim();
        StructuredMatrix::Dense(dense_from_transpose_products(d, d, |w| self.state_jt(x, u, w)))
    }

    fn control_jacobian(&self, x: &Vector, u: &Vector) -> StructuredMatrix {
        StructuredMatrix::Dense(dense_from_transpose_products(self.state_dim(), self.control_dim(), |w| {
            self.control_jt(x, u, w)
        }))
    }
}

/// Projection onto the admissible control set.
pub type ControlProjection = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;

/// `min Σ f_i(x_i, u_i)` s.t. `x_{j+1} = φ(x_j, u_j)` with `x_0` given.
#[derive(Clone)]
pub struct ControlledProblem {
    n: usize,
    terms: Vec<Arc<dyn ControlTerm>>,
    dynamics: Arc<dyn ControlledDynamics>,
    initial_state: Vector,
    projection: Option<ControlProjection>,
}

impl fmt::Debug for ControlledProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlledProblem")
            .field("n", &self.n)
            .field("state_dim", &self.dynamics.state_dim())
            .field("control_dim", &self.dynamics.control_dim())
            .field("has_projection", &self.projection.is_some())
            .finish()
    }
}

impl ControlledProblem {
    pub fn new(
        terms: Vec<Arc<dyn ControlTerm>>,
        dynamics: Arc<dyn ControlledDynamics>,
        initial_state: Vector,
        projection: Option<ControlProjection>,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter("at least one objective term is required".into()));
        }
        if initial_state.len() != dynamics.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                index: 0,
                expected: dynamics.state_dim(),
                found: initial_state.len(),
            });
        }
        Ok(Self {
            n: terms.len() - 1,
            terms,
            dynamics,
            initial_state,
            projection,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn initial_state(&self) -> &Vector {
        &self.initial_state
    }

    pub fn dynamics(&self) -> &dyn ControlledDynamics {
        self.dynamics.as_ref()
    }

    pub fn term(&self, i: usize) -> &dyn ControlTerm {
        self.terms[i].as_ref()
    }

    pub fn projection(&self) -> Option<&ControlProjection> {
        self.projection.as_ref()
    }

    /// State blocks reached from `x_0` under the controls `u`.
    pub fn rollout(&self, controls: &Trajectory) -> Result<Trajectory> {
        check_blocks("controls", controls.blocks(), self.n + 1, self.control_dim())?;
        let mut blocks = vec![self.initial_state.clone()];
        for j in 0..self.n {
            let next = self.dynamics.apply(&blocks[j], &controls[j]);
            blocks.push(next);
        }
        Trajectory::new(blocks)
    }

    /// State-space view with the controls frozen at `controls`.
    pub fn with_controls<'a>(&'a self, controls: &'a Trajectory) -> ControlledStateView<'a> {
        ControlledStateView { problem: self, controls }
    }
}

/// A [`ControlledProblem`] seen as a block problem in `x` alone.
pub struct ControlledStateView<'a> {
    problem: &'a ControlledProblem,
    controls: &'a Trajectory,
}

impl BlockStructure for ControlledStateView<'_> {
    fn steps(&self) -> usize {
        self.problem.n
    }

    fn dim(&self) -> usize {
        self.problem.state_dim()
    }

    fn term_value(&self, i: usize, x: &Vector) -> f64 {
        self.problem.terms[i].value(x, &self.controls[i])
    }

    fn term_gradient(&self, i: usize, x: &Vector) -> Vector {
        self.problem.terms[i].gradient(x, &self.controls[i]).0
    }

    fn term_residual(&self, i: usize, x: &Vector) -> Option<Residual> {
        self.problem.terms[i].state_residual(x, &self.controls[i])
    }

    fn next_apply(&self, _j: usize, x: &Vector) -> Vector {
        x.clone()
    }

    fn next_jacobian(&self, _j: usize, _x: &Vector) -> StructuredMatrix {
        StructuredMatrix::identity(self.dim())
    }

    fn next_jt(&self, _j: usize, _x: &Vector, w: &Vector) -> Vector {
        w.clone()
    }

    fn prev_apply(&self, j: usize, x: &Vector) -> Vector {
        self.problem.dynamics.apply(x, &self.controls[j])
    }

    fn prev_jacobian(&self, j: usize, x: &Vector) -> StructuredMatrix {
        self.problem.dynamics.state_jacobian(x, &self.controls[j])
    }

    fn prev_jt(&self, j: usize, x: &Vector, w: &Vector) -> Vector {
        self.problem.dynamics.state_jt(x, &self.controls[j], w)
    }
}

// ---------------------------------------------------------------------------
// Stock objective terms and maps

/// `f ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroTerm {
    pub dim: usize,
}

impl ObjectiveTerm for ZeroTerm {
    fn value(&self, _x: &Vector) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &Vector) -> Vector {
        Vector::zeros(self.dim)
    }

    fn residual(&self, _x: &Vector) -> Option<Residual> {
        Some(Residual {
            values: Vector::zeros(0),
            jacobian: StructuredMatrix::Dense(Matrix::zeros(0, self.dim)),
        })
    }

    fn is_least_squares(&self) -> bool {
        true
    }
}

/// `f(x) = Σ_k (w_k/2)‖x − c_k‖²`, stacked as residuals `√w_k (x − c_k)`.
#[derive(Debug, Clone)]
pub struct SquaredDistanceTerm {
    targets: Vec<(Vector, f64)>,
}

impl SquaredDistanceTerm {
    pub fn new(target: Vector, weight: f64) -> Self {
        Self {
            targets: vec![(target, weight)],
        }
    }

    pub fn sum(targets: Vec<(Vector, f64)>) -> Self {
        assert!(!targets.is_empty());
        Self { targets }
    }

    pub fn targets(&self) -> &[(Vector, f64)] {
        &self.targets
    }
}

impl ObjectiveTerm for SquaredDistanceTerm {
    fn value(&self, x: &Vector) -> f64 {
        self.targets.iter().map(|(c, w)| 0.5 * w * (x - c).norm_squared()).sum()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let mut g = Vector::zeros(x.len());
        for (c, w) in &self.targets {
            g += (x - c) * *w;
        }
        g
    }

    fn residual(&self, x: &Vector) -> Option<Residual> {
        let d = x.len();
        if let [(c, w)] = self.targets.as_slice() {
            let s = w.sqrt();
            return Some(Residual {
                values: (x - c) * s,
                jacobian: StructuredMatrix::Identity { dim: d, scale: s },
            });
        }
        let m = self.targets.len();
        let mut values = Vector::zeros(m * d);
        let mut jac = Matrix::zeros(m * d, d);
        for (k, (c, w)) in self.targets.iter().enumerate() {
            let s = w.sqrt();
            values.rows_mut(k * d, d).copy_from(&((x - c) * s));
            for r in 0..d {
                jac[(k * d + r, r)] = s;
            }
        }
        Some(Residual {
            values,
            jacobian: StructuredMatrix::Dense(jac),
        })
    }

    fn is_least_squares(&self) -> bool {
        true
    }
}

/// `f(x) = ½(x − c)ᵀQ(x − c)` with symmetric positive definite `Q`.
#[derive(Debug, Clone)]
pub struct QuadraticTerm {
    q: Matrix,
    center: Vector,
    factor_t: Matrix,
}

impl QuadraticTerm {
    pub fn new(q: Matrix, center: Vector) -> Result<Self> {
        let chol = Cholesky::new(q.clone())
            .ok_or_else(|| Error::InvalidParameter("quadratic term matrix must be positive definite".into()))?;
        let factor_t = chol.l().transpose();
        Ok(Self { q, center, factor_t })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }
}

impl ObjectiveTerm for QuadraticTerm {
    fn value(&self, x: &Vector) -> f64 {
        let e = x - &self.center;
        0.5 * e.dot(&(&self.q * &e))
    }

    fn gradient(&self, x: &Vector) -> Vector {
        &self.q * (x - &self.center)
    }

    fn residual(&self, x: &Vector) -> Option<Residual> {
        Some(Residual {
            values: &self.factor_t * (x - &self.center),
            jacobian: StructuredMatrix::Dense(self.factor_t.clone()),
        })
    }

    fn is_least_squares(&self) -> bool {
        true
    }
}

type ValueFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type ResidualFn = Arc<dyn Fn(&Vector) -> Residual + Send + Sync>;

/// Objective term backed by closures.
#[derive(Clone)]
pub struct FnTerm {
    value: ValueFn,
    gradient: VectorFn,
    residual: Option<ResidualFn>,
}

impl FnTerm {
    pub fn new(
        value: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            residual: None,
        }
    }

    /// Least-squares term `½‖r(x)‖²` from a residual callback.
    pub fn least_squares(residual: impl Fn(&Vector) -> Residual + Send + Sync + 'static) -> Self {
        let residual: ResidualFn = Arc::new(residual);
        let (rv, rg) = (residual.clone(), residual.clone());
        Self {
            value: Arc::new(move |x| 0.5 * rv(x).values.norm_squared()),
            gradient: Arc::new(move |x| {
                let r = rg(x);
                r.jacobian.tr_mul(&r.values)
            }),
            residual: Some(residual),
        }
    }
}

impl ObjectiveTerm for FnTerm {
    fn value(&self, x: &Vector) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &Vector) -> Vector {
        (self.gradient)(x)
    }

    fn residual(&self, x: &Vector) -> Option<Residual> {
        self.residual.as_ref().map(|r| r(x))
    }

    fn is_least_squares(&self) -> bool {
        self.residual.is_some()
    }
}

/// `φ(x) = x`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap {
    pub dim: usize,
}

impl DynamicsMap for IdentityMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &Vector) -> Vector {
        x.clone()
    }

    fn jacobian_transpose_product(&self, _x: &Vector, w: &Vector) -> Vector {
        w.clone()
    }

    fn jacobian(&self, _x: &Vector) -> StructuredMatrix {
        StructuredMatrix::identity(self.dim)
    }
}

/// `φ(x) = A x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn linear(matrix: Matrix) -> Self {
        let d = matrix.nrows();
        Self {
            matrix,
            offset: Vector::zeros(d),
        }
    }
}

impl DynamicsMap for AffineMap {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x + &self.offset
    }

    fn jacobian_transpose_product(&self, _x: &Vector, w: &Vector) -> Vector {
        self.matrix.tr_mul(w)
    }

    fn jacobian(&self, _x: &Vector) -> StructuredMatrix {
        StructuredMatrix::Dense(self.matrix.clone())
    }
}

type JtFn = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Dynamics map backed by closures.
#[derive(Clone)]
pub struct FnMap {
    dim: usize,
    apply: VectorFn,
    jt: JtFn,
}

impl FnMap {
    pub fn new(
        dim: usize,
        apply: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        jt: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            apply: Arc::new(apply),
            jt: Arc::new(jt),
        }
    }
}

impl DynamicsMap for FnMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &Vector) -> Vector {
        (self.apply)(x)
    }

    fn jacobian_transpose_product(&self, x: &Vector, w: &Vector) -> Vector {
        (self.jt)(x, w)
    }
}

/// Componentwise `φ(x) = A tanh(x) + b`; contractive whenever `‖A‖ < 1`.
#[derive(Debug, Clone)]
pub struct TanhMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl DynamicsMap for TanhMap {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x.map(f64::tanh) + &self.offset
    }

    fn jacobian_transpose_product(&self, x: &Vector, w: &Vector) -> Vector {
        let sech2 = x.map(|v| 1.0 - v.tanh().powi(2));
        self.matrix.tr_mul(w).component_mul(&sech2)
    }

    fn jacobian(&self, x: &Vector) -> StructuredMatrix {
        let sech2 = x.map(|v| 1.0 - v.tanh().powi(2));
        let mut j = self.matrix.clone();
        for (c, s) in sech2.iter().enumerate() {
            j.column_mut(c).scale_mut(*s);
        }
        StructuredMatrix::Dense(j)
    }
}
