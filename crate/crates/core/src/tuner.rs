//! Penalty selection with a descent certificate.
//!
//! Given smoothness constants of the objective and the dynamics on a working
//! box, this module tabulates the coupling constants that bound multiplier
//! growth, checks the per-row condition that makes the Lyapunov function
//! decrease, and picks penalties bottom-up so that every row holds.
//!
//! Notation: `M` is the Jacobian bound of the dynamics, `G_m = Σ_{t<m} Mᵗ`.
//! Every ratio `(1 − Mᵐ)/(1 − M)` is evaluated as `G_m`, so `M = 1` needs no
//! special case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lagrangian::{PenaltyVector, ProximalWeights};
use crate::linalg::Vector;
use crate::problem::{ConstraintShape, DynamicsProblem, Trajectory};

/// `G_m = Σ_{t=0}^{m−1} Mᵗ`.
pub fn geometric_sum(m_phi: f64, count: usize) -> f64 {
    geometric_range(m_phi, 0, count)
}

/// `Σ_{t=from}^{to−1} Mᵗ`, zero for an empty range.
pub fn geometric_range(m_phi: f64, from: usize, to: usize) -> f64 {
    (from..to).map(|t| m_phi.powi(t as i32)).sum()
}

/// Per-block bounds of the region the constants are certified on.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingBox {
    pub lower: Vec<Vector>,
    pub upper: Vec<Vector>,
}

impl WorkingBox {
    pub fn new(lower: Vec<Vector>, upper: Vec<Vector>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidParameter("box needs matching nonempty lower and upper bounds".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.len() != u.len() || l.iter().zip(u.iter()).any(|(a, b)| !(a <= b)) {
                return Err(Error::InvalidParameter(format!("box block {i} is empty or malformed")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `x ± factor·spread` per component, where the spread is the range of that
    /// component over all blocks (1 when the trajectory is constant in it).
    pub fn around(x: &Trajectory, factor: f64) -> Self {
        let d = x.dim();
        let spread = Vector::from_fn(d, |c, _| {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b[c]), hi.max(b[c])));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        });
        let half = spread * factor;
        Self {
            lower: x.iter().map(|b| b - &half).collect(),
            upper: x.iter().map(|b| b + &half).collect(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.lower.len()
    }

    /// Euclidean diameter of each block box.
    pub fn diameters(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).norm()).collect()
    }

    pub fn contains(&self, x: &Trajectory) -> bool {
        x.len() == self.blocks()
            && x.iter().enumerate().all(|(i, b)| {
                b.iter()
                    .zip(self.lower[i].iter().zip(self.upper[i].iter()))
                    .all(|(v, (l, u))| *l <= *v && *v <= *u)
            })
    }

    fn sample(&self, i: usize, rng: &mut ChaCha20Rng) -> Vector {
        let (l, u) = (&self.lower[i], &self.upper[i]);
        Vector::from_fn(l.len(), |c, _| l[c] + (u[c] - l[c]) * rng.random::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    /// Bound on `‖∇f_i‖`.
    pub gradient_bound: f64,
    /// Lipschitz constant of `∇f_i`.
    pub gradient_lipschitz: f64,
    /// Bound on `‖φ‖`.
    pub map_bound: f64,
    /// Bound on `‖∇φ‖`.
    pub jacobian_bound: f64,
    /// Lipschitz constant of `∇φ`.
    pub jacobian_lipschitz: f64,
    /// Block diameters of the working box, `n + 1` entries.
    pub diameters: Vec<f64>,
    /// Reference penalties of the bounded-level-set assumption, `n` entries.
    pub reference_penalties: Vec<f64>,
    /// `M` with `‖r_i(x⁰)‖² ≤ M/ρ_i⁰` for the initialization.
    pub initial_residual_bound: f64,
}

impl SmoothnessConstants {
    pub fn steps(&self) -> usize {
        self.reference_penalties.len()
    }

    /// Sets the initialization bound from the actual residuals of `x0`.
    pub fn with_initialization(mut self, problem: &DynamicsProblem, x0: &Trajectory) -> Result<Self> {
        let residuals = problem.constraint_residuals(x0)?;
        self.initial_residual_bound = residuals
            .iter()
            .zip(&self.reference_penalties)
            .map(|(r, rho0)| rho0 * r.norm_squared())
            .fold(0.0, f64::max);
        Ok(self)
    }
}

/// Safety factor applied to every sampled constant.
pub const INFLATION: f64 = 1.1;

/// Samples the smoothness constants of `problem` over `bx`.
pub fn estimate_constants(problem: &DynamicsProblem, bx: &WorkingBox, samples: usize, seed: u64) -> Result<SmoothnessConstants> {
    if matches!(problem.shape(), ConstraintShape::SemiImplicit(_)) {
        return Err(Error::UnsupportedShape(problem.shape().name()));
    }
    if samples < 100 {
        return Err(Error::InvalidParameter(format!("at least 100 samples required, got {samples}")));
    }
    let n = problem.n();
    if bx.blocks() != n + 1 {
        return Err(Error::BlockCount {
            what: "working box",
            expected: n + 1,
            found: bx.blocks(),
        });
    }
    let map = problem.dynamics();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut mf, mut lf, mut cphi, mut mphi, mut lphi) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let quotient = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    for s in 0..samples {
        let i = s % (n + 1);
        let x = bx.sample(i, &mut rng);
        let far = bx.sample(i, &mut rng);
        let scale = &bx.upper[i] - &bx.lower[i];
        let near = Vector::from_fn(x.len(), |c, _| x[c] + 1e-3 * scale[c] * (rng.random::<f64>() - 0.5));
        let term = problem.term(i);
        let gx = term.gradient(&x);
        mf = mf.max(gx.norm());
        let jx = map.jacobian(&x).to_dense();
        cphi = cphi.max(map.apply(&x).norm());
        mphi = mphi.max(if jx.is_empty() { 0.0 } else { jx.singular_values().max() });
        for y in [&far, &near] {
            let dist = (&x - y).norm();
            lf = lf.max(quotient((term.gradient(y) - &gx).norm(), dist));
            let diff = map.jacobian(y).to_dense() - &jx;
            let norm = if diff.is_empty() { 0.0 } else { diff.singular_values().max() };
            lphi = lphi.max(quotient(norm, dist));
        }
    }
    let values = [mf, lf, cphi, mphi, lphi];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "smoothness estimate",
            index: 0,
        });
    }
    Ok(SmoothnessConstants {
        gradient_bound: mf * INFLATION,
        gradient_lipschitz: lf * INFLATION,
        map_bound: cphi * INFLATION,
        jacobian_bound: mphi * INFLATION,
        jacobian_lipschitz: lphi * INFLATION,
        diameters: bx.diameters(),
        reference_penalties: vec![1.0; n],
        initial_residual_bound: 0.0,
    })
}

/// Coupling constants, indexed `[j][i]` with `j ≥ i` (other entries are 0),
/// plus the Lyapunov coefficients per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsTable {
    /// Multiplier-bound coefficients.
    pub b: Vec<Vec<f64>>,
    /// Multiplier-difference coefficients on the current step.
    pub c: Vec<Vec<f64>>,
    /// Multiplier-difference coefficients on the previous step.
    pub c_tilde: Vec<Vec<f64>>,
    /// Coefficient of `‖x_i^{k+1} − x_i^k‖²` in the Lyapunov decrease.
    pub lyapunov_c: Vec<f64>,
    /// Coefficient of `‖x_i^k − x_i^{k−1}‖²` in the Lyapunov decrease.
    pub lyapunov_c_tilde: Vec<f64>,
}

fn check_sizes(consts: &SmoothnessConstants, rho: &PenaltyVector, eta: &ProximalWeights) -> Result<usize> {
    let n = consts.steps();
    if rho.len() != n {
        return Err(Error::BlockCount {
            what: "penalties",
            expected: n,
            found: rho.len(),
        });
    }
    if eta.len() != n + 1 {
        return Err(Error::BlockCount {
            what: "proximal weights",
            expected: n + 1,
            found: eta.len(),
        });
    }
    Ok(n)
}

/// `C[j][i]`; depends on the penalties only through `ρ_j` for `j > i`.
fn coupling_c(consts: &SmoothnessConstants, n: usize, rho_j: f64, eta: &ProximalWeights, j: usize, i: usize) -> f64 {
    let m = consts.jacobian_bound;
    let (mf, lf, lphi) = (consts.gradient_bound, consts.gradient_lipschitz, consts.jacobian_lipschitz);
    if j == i {
        geometric_sum(m, n - i - 1) * mf * lphi + lf + 1.0 / eta[i + 1]
    } else {
        let p = m.powi((j - i) as i32);
        let k = (j - i) as f64;
        geometric_range(m, j - i, n - i - 1) * mf * lphi
            + p * lf
            + (2.0 * k + 1.0) * p / eta[j + 1]
            + (2.0 * k - 1.0) * rho_j * p
    }
}

fn coupling_c_tilde(m: f64, rho_j: f64, eta: &ProximalWeights, j: usize, i: usize) -> f64 {
    if j == i {
        1.0 / eta[i + 1]
    } else {
        let p = m.powi((j - i) as i32);
        p / eta[j + 1] + rho_j * p
    }
}

fn coupling_b(m: f64, rho_j: f64, eta: &ProximalWeights, j: usize, i: usize) -> f64 {
    if j == i {
        1.0 / eta[i + 1]
    } else {
        let p = m.powi((j - i) as i32);
        rho_j * p + p / eta[j + 1]
    }
}

/// Row sums `Σ_{j<i} 2(n−j)/ρ_j · T[i−1][j]²` for `i = 1..=n`.
fn row_sums(table: &[Vec<f64>], rho: &PenaltyVector, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| (0..i).map(|j| 2.0 * (n - j) as f64 / rho[j] * table[i - 1][j].powi(2)).sum())
        .collect()
}

pub fn constants_table(consts: &SmoothnessConstants, rho: &PenaltyVector, eta: &ProximalWeights) -> Result<ConstantsTable> {
    let n = check_sizes(consts, rho, eta)?;
    let m = consts.jacobian_bound;
    let mut b = vec![vec![0.0; n]; n];
    let mut c = vec![vec![0.0; n]; n];
    let mut c_tilde = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..=j {
            b[j][i] = coupling_b(m, rho[j], eta, j, i);
            c[j][i] = coupling_c(consts, n, rho[j], eta, j, i);
            c_tilde[j][i] = coupling_c_tilde(m, rho[j], eta, j, i);
        }
    }
    let sums = row_sums(&c, rho, n);
    let sums_tilde = row_sums(&c_tilde, rho, n);
    let mut lyapunov_c = vec![1.0 / (4.0 * eta[0])];
    let mut lyapunov_c_tilde = vec![1.0 / (4.0 * eta[0])];
    for i in 1..=n {
        lyapunov_c.push(1.0 / (4.0 * eta[i]) - sums[i - 1]);
        lyapunov_c_tilde.push(1.0 / (4.0 * eta[i]) - sums_tilde[i - 1]);
    }
    Ok(ConstantsTable {
        b,
        c,
        c_tilde,
        lyapunov_c,
        lyapunov_c_tilde,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub row: usize,
    pub sum: f64,
    /// `1/(4η_i)`.
    pub budget: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub rows: Vec<ConditionRow>,
    pub passes: bool,
}

/// Checks `Σ_{j<i} 2(n−j)/ρ_j · C[i−1][j]² < 1/(4η_i)` for every row
/// `i = 1..=n`, together with positivity of both Lyapunov coefficient sets.
pub fn check_condition(table: &ConstantsTable, rho: &PenaltyVector, eta: &ProximalWeights) -> ConditionReport {
    let n = rho.len();
    let rows: Vec<ConditionRow> = row_sums(&table.c, rho, n)
        .into_iter()
        .enumerate()
        .map(|(k, sum)| {
            let budget = 1.0 / (4.0 * eta[k + 1]);
            ConditionRow {
                row: k + 1,
                sum,
                budget,
                passes: sum < budget,
            }
        })
        .collect();
    let passes = rows.iter().all(|r| r.passes)
        && table.lyapunov_c.iter().all(|c| *c > 0.0)
        && table.lyapunov_c_tilde.iter().all(|c| *c > 0.0);
    ConditionReport { rows, passes }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunerOptions {
    /// Fraction of each row budget that may be used, in `(0, 1)`.
    pub margin: f64,
    /// Share of row `i`'s budget given to its diagonal term; `None` uses `1/i`.
    pub diagonal_share: Option<f64>,
    /// Enforce the floors `ρ_i > 2ρ_i⁰` and the squared multiplier-bound floor.
    pub enforce_floors: bool,
}

impl Default for TunerOptions {
    fn default() -> Self {
        Self {
            margin: 0.9,
            diagonal_share: None,
            enforce_floors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCertificate {
    pub penalties: PenaltyVector,
    pub condition: ConditionReport,
    pub lyapunov_c: Vec<f64>,
    pub lyapunov_c_tilde: Vec<f64>,
    pub options: TunerOptions,
    pub constants: SmoothnessConstants,
}

/// Squared multiplier-bound floor for `ρ_i`, using the already fixed
/// `ρ_{i+1}, …, ρ_{n−1}`.
fn multiplier_floor(consts: &SmoothnessConstants, rho: &[f64], eta: &ProximalWeights, i: usize) -> f64 {
    let n = rho.len();
    let m = consts.jacobian_bound;
    let tail: f64 = (i..n)
        .map(|j| coupling_b(m, rho[j], eta, j, i) * consts.diameters[j + 1])
        .sum();
    (geometric_sum(m, n - i) * consts.gradient_bound + tail).powi(2)
}

/// Bottom-up penalty selection. Row `i` (from `n` down to 1) first fixes
/// `ρ_{i−1}` so the diagonal term uses its share of the budget, then raises
/// `ρ_0, …, ρ_{i−2}` so each remaining term uses an equal part of the rest.
/// Penalties only ever increase.
pub fn choose_penalties(
    consts: &SmoothnessConstants,
    eta: &ProximalWeights,
    options: &TunerOptions,
) -> Result<(PenaltyVector, PenaltyCertificate)> {
    let n = consts.steps();
    if n == 0 {
        return Err(Error::InvalidParameter("penalty selection needs at least one constraint".into()));
    }
    if eta.len() != n + 1 {
        return Err(Error::BlockCount {
            what: "proximal weights",
            expected: n + 1,
            found: eta.len(),
        });
    }
    if consts.diameters.len() != n + 1 {
        return Err(Error::BlockCount {
            what: "diameters",
            expected: n + 1,
            found: consts.diameters.len(),
        });
    }
    if !(options.margin > 0.0 && options.margin < 1.0) {
        return Err(Error::InvalidParameter(format!("margin must lie in (0, 1), got {}", options.margin)));
    }
    if let Some(share) = options.diagonal_share {
        if !(share > 0.0 && share <= 1.0) {
            return Err(Error::InvalidParameter(format!("diagonal share must lie in (0, 1], got {share}")));
        }
    }
    let mut rho = vec![0.0f64; n];
    for i in (1..=n).rev() {
        let budget = options.margin / (4.0 * eta[i]);
        let share = if i == 1 { 1.0 } else { options.diagonal_share.unwrap_or(1.0 / i as f64) };
        let weight = |j: usize| 2.0 * (n - j) as f64;

        let diag_c = coupling_c(consts, n, 0.0, eta, i - 1, i - 1);
        let mut need = weight(i - 1) * diag_c * diag_c / (share * budget);
        if options.enforce_floors {
            need = need
                .max(2.0 * consts.reference_penalties[i - 1])
                .max(multiplier_floor(consts, &rho, eta, i - 1));
        }
        rho[i - 1] = rho[i - 1].max(need);

        if i >= 2 {
            let rest = (1.0 - share) * budget / (i - 1) as f64;
            for j in 0..i - 1 {
                let c = coupling_c(consts, n, rho[i - 1], eta, i - 1, j);
                rho[j] = rho[j].max(weight(j) * c * c / rest);
            }
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::PenaltySelection { row: i, iterations: 1 });
        }
    }
    // Rows whose requirement was zero (degenerate constants) still need positive penalties.
    for (j, r) in rho.iter_mut().enumerate() {
        if *r <= 0.0 {
            *r = (2.0 * consts.reference_penalties[j]).max(f64::MIN_POSITIVE.sqrt());
        }
    }
    let penalties = PenaltyVector::new(rho)?;
    let table = constants_table(consts, &penalties, eta)?;
    let condition = check_condition(&table, &penalties, eta);
    if !condition.passes {
        let row = condition.rows.iter().find(|r| !r.passes).map_or(0, |r| r.row);
        return Err(Error::PenaltySelection { row, iterations: 1 });
    }
    let certificate = PenaltyCertificate {
        penalties: penalties.clone(),
        condition,
        lyapunov_c: table.lyapunov_c,
        lyapunov_c_tilde: table.lyapunov_c_tilde,
        options: *options,
        constants: consts.clone(),
    };
    Ok((penalties, certificate))
}

/// `G_{n−i}·M_f + Σ_{j≥i} B[j][i]·step_{j+1}` per multiplier, where
/// `block_steps[k] = ‖x_k^{k+1} − x_k^k‖` for blocks `0..=n`.
pub fn dual_bound_diagnostic(table: &ConstantsTable, consts: &SmoothnessConstants, block_steps: &[f64]) -> Vec<f64> {
    let n = table.b.len();
    let m = consts.jacobian_bound;
    (0..n)
        .map(|i| {
            geometric_sum(m, n - i) * consts.gradient_bound
                + (i..n).map(|j| table.b[j][i] * block_steps[j + 1]).sum::<f64>()
        })
        .collect()
}
