//! Inner minimizers for the block subproblems.
//!
//! Every solver honours the same descent contract: the returned point never
//! has a larger objective value than the warm start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{StructuredMatrix, Vector};
use crate::problem::Residual;

/// A smooth objective over `Rᵈ`.
pub trait Subproblem {
    fn dim(&self) -> usize;
    fn value(&self, z: &Vector) -> f64;
    fn gradient(&self, z: &Vector) -> Vector;

    /// Residual pieces `r_k` with `value = ½ Σ‖r_k‖²`, when available.
    fn residual_blocks(&self, _z: &Vector) -> Option<Vec<Residual>> {
        None
    }
}

/// A subproblem together with its warm start and stopping rule.
pub struct SubproblemSpec<'a> {
    pub objective: &'a dyn Subproblem,
    pub warm_start: Vector,
    /// Absolute threshold on the Euclidean gradient norm.
    pub tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No further progress possible at working precision.
    Stalled,
    /// Evaluation produced a non-finite value; the last good iterate is returned.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct SubsolveReport {
    pub point: Vector,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Which inner solver handles the block subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsolverKind {
    /// Levenberg–Marquardt when a residual view exists, gradient descent otherwise.
    #[default]
    Auto,
    LevenbergMarquardt,
    Descent,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    /// Initial damping relative to the largest diagonal entry of `JᵀJ`.
    pub damping_factor: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { damping_factor: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_dim: usize,
    /// Stop once every vertex is within this distance of the best one.
    pub diameter_tol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_dim: 16,
            diameter_tol: 1e-10,
            initial_step: 0.1,
        }
    }
}

fn is_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Returns the better of the candidate and the warm start under the
/// subproblem's own `value`, which is what the contract is stated against.
fn enforce_descent(spec: &SubproblemSpec<'_>, mut report: SubsolveReport) -> SubsolveReport {
    let warm_value = spec.objective.value(&spec.warm_start);
    let value = spec.objective.value(&report.point);
    if value <= warm_value {
        report.value = value;
    } else {
        report.point = spec.warm_start.clone();
        report.value = warm_value;
        report.gradient_norm = spec.objective.gradient(&spec.warm_start).norm();
    }
    report
}

struct Normal {
    value: f64,
    gradient: Vector,
    gram: StructuredMatrix,
}

fn normal_equations(pieces: &[Residual], dim: usize) -> Option<Normal> {
    let mut value = 0.0;
    let mut gradient = Vector::zeros(dim);
    let mut gram = StructuredMatrix::Identity { dim, scale: 0.0 };
    for piece in pieces {
        value += 0.5 * piece.values.norm_squared();
        gradient += piece.jacobian.tr_mul(&piece.values);
        gram = gram.add(&piece.jacobian.gram());
    }
    (value.is_finite() && is_finite(&gradient)).then_some(Normal { value, gradient, gram })
}

/// Damped Gauss–Newton on the residual view, with Marquardt's ×10 / ÷10
/// damping schedule and acceptance on any actual decrease.
pub fn levenberg_marquardt(spec: &SubproblemSpec<'_>, options: &LmOptions) -> Result<SubsolveReport> {
    let obj = spec.objective;
    let d = obj.dim();
    let residual_at = |z: &Vector| obj.residual_blocks(z);
    let mut z = spec.warm_start.clone();
    let pieces = residual_at(&z)
        .ok_or_else(|| Error::InvalidParameter("Levenberg-Marquardt needs a residual view".into()))?;
    let Some(mut current) = normal_equations(&pieces, d) else {
        return Ok(enforce_descent(
            spec,
            SubsolveReport {
                value: f64::INFINITY,
                gradient_norm: f64::INFINITY,
                point: z,
                iterations: 0,
                termination: Termination::NonFinite,
            },
        ));
    };
    let scale = current.gram.max_diagonal().max(f64::MIN_POSITIVE);
    let mut damping = options.damping_factor * scale;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < spec.max_iterations {
        if current.gradient.norm() <= spec.tolerance {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let system = current.gram.add(&StructuredMatrix::Identity { dim: d, scale: damping });
        let Some(step) = system.solve(&(-&current.gradient)) else {
            damping = (damping * 10.0).max(1e-12 * scale);
            continue;
        };
        let candidate = &z + &step;
        let predicted = 0.5 * step.dot(&(&step * damping - &current.gradient));
        let trial = residual_at(&candidate).and_then(|p| normal_equations(&p, d));
        match trial {
            Some(next) if next.value < current.value && predicted > 0.0 => {
                z = candidate;
                current = next;
                damping /= 10.0;
            }
            _ => {
                if step.norm() <= f64::EPSILON * (1.0 + z.norm()) {
                    termination = Termination::Stalled;
                    break;
                }
                damping = if damping == 0.0 { 1e-12 * scale } else { damping * 10.0 };
                if !damping.is_finite() {
                    termination = Termination::Stalled;
                    break;
                }
            }
        }
    }
    let report = SubsolveReport {
        value: current.value,
        gradient_norm: current.gradient.norm(),
        point: z,
        iterations,
        termination,
    };
    Ok(enforce_descent(spec, report))
}

/// Steepest descent with Armijo backtracking (`c = 1e-4`, halving).
pub fn descent_fallback(spec: &SubproblemSpec<'_>) -> Result<SubsolveReport> {
    const ARMIJO: f64 = 1e-4;
    let obj = spec.objective;
    let mut z = spec.warm_start.clone();
    let mut f = obj.value(&z);
    let mut g = obj.gradient(&z);
    if !f.is_finite() || !is_finite(&g) {
        return Err(Error::NonFinite {
            what: "subproblem warm start",
            index: 0,
        });
    }
    let mut t = 1.0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < spec.max_iterations {
        let gg = g.norm_squared();
        if gg.sqrt() <= spec.tolerance {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        while t > 1e-30 {
            let candidate = &z - &g * t;
            let fc = obj.value(&candidate);
            if fc.is_finite() && fc <= f - ARMIJO * t * gg {
                accepted = Some((candidate, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, fc)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let gc = obj.gradient(&candidate);
        if !is_finite(&gc) {
            termination = Termination::NonFinite;
            break;
        }
        z = candidate;
        f = fc;
        g = gc;
        t *= 2.0;
    }
    Ok(enforce_descent(
        spec,
        SubsolveReport {
            value: f,
            gradient_norm: g.norm(),
            point: z,
            iterations,
            termination,
        },
    ))
}

/// Projected gradient with backtracking on the sufficient-decrease condition
/// `f(z₊) ≤ f(z) + ⟨g, z₊ − z⟩ + ‖z₊ − z‖²/(2t)`. The warm start must be
/// admissible. Stationarity is measured by `‖z − P(z − g)‖`.
pub fn projected_gradient(spec: &SubproblemSpec<'_>, projection: &dyn Fn(&Vector) -> Vector) -> Result<SubsolveReport> {
    let obj = spec.objective;
    let mut z = spec.warm_start.clone();
    let mut f = obj.value(&z);
    let mut g = obj.gradient(&z);
    if !f.is_finite() || !is_finite(&g) {
        return Err(Error::NonFinite {
            what: "subproblem warm start",
            index: 0,
        });
    }
    let measure = |z: &Vector, g: &Vector| (z - projection(&(z - g))).norm();
    let mut t = 1.0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < spec.max_iterations {
        if measure(&z, &g) <= spec.tolerance {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        while t > 1e-30 {
            let candidate = projection(&(&z - &g * t));
            let step = &candidate - &z;
            let fc = obj.value(&candidate);
            if fc.is_finite() && fc <= f && fc <= f + g.dot(&step) + step.norm_squared() / (2.0 * t) {
                accepted = Some((candidate, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, fc)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let gc = obj.gradient(&candidate);
        if !is_finite(&gc) {
            termination = Termination::NonFinite;
            break;
        }
        z = candidate;
        f = fc;
        g = gc;
        t *= 2.0;
    }
    Ok(enforce_descent(
        spec,
        SubsolveReport {
            gradient_norm: measure(&z, &g),
            value: f,
            point: z,
            iterations,
            termination,
        },
    ))
}

/// Derivative-free simplex search with the standard coefficients
/// (reflection 1, expansion 2, contraction ½, shrink ½).
pub fn nelder_mead(spec: &SubproblemSpec<'_>, options: &NelderMeadOptions) -> Result<SubsolveReport> {
    let obj = spec.objective;
    let d = obj.dim();
    if d > options.max_dim {
        return Err(Error::Config(format!(
            "Nelder-Mead limited to dimension {}, got {d}",
            options.max_dim
        )));
    }
    let eval = |z: &Vector| {
        let v = obj.value(z);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vector, f64)> = Vec::with_capacity(d + 1);
    simplex.push((spec.warm_start.clone(), eval(&spec.warm_start)));
    for k in 0..d {
        let mut v = spec.warm_start.clone();
        v[k] += options.initial_step * (1.0 + spec.warm_start[k].abs());
        let fv = eval(&v);
        simplex.push((v, fv));
    }
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    while iterations < spec.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if diameter <= options.diameter_tol {
            termination = Termination::Converged;
            break;
        }
        iterations += 1;
        let centroid = simplex[..d].iter().fold(Vector::zeros(d), |acc, (v, _)| acc + v) / d as f64;
        let (worst, f_worst) = simplex[d].clone();
        let reflected = &centroid + (&centroid - &worst);
        let f_reflected = eval(&reflected);
        if f_reflected < simplex[0].1 {
            let expanded = &centroid + (&centroid - &worst) * 2.0;
            let f_expanded = eval(&expanded);
            simplex[d] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < simplex[d - 1].1 {
            simplex[d] = (reflected, f_reflected);
            continue;
        }
        let (contracted, f_contracted) = if f_reflected < f_worst {
            let c = &centroid + (&reflected - &centroid) * 0.5;
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = &centroid + (&worst - &centroid) * 0.5;
            let fc = eval(&c);
            (c, fc)
        };
        if f_contracted < f_worst.min(f_reflected) {
            simplex[d] = (contracted, f_contracted);
            continue;
        }
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let v = &best + (&vertex.0 - &best) * 0.5;
            let fv = eval(&v);
            *vertex = (v, fv);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (point, value) = simplex.swap_remove(0);
    let gradient_norm = obj.gradient(&point).norm();
    Ok(enforce_descent(
        spec,
        SubsolveReport {
            point,
            value,
            gradient_norm,
            iterations,
            termination,
        },
    ))
}

/// Dispatches on `kind`.
pub fn solve_subproblem(
    spec: &SubproblemSpec<'_>,
    kind: SubsolverKind,
    lm: &LmOptions,
    nm: &NelderMeadOptions,
) -> Result<SubsolveReport> {
    match kind {
        SubsolverKind::Auto => {
            if spec.objective.residual_blocks(&spec.warm_start).is_some() {
                levenberg_marquardt(spec, lm)
            } else {
                descent_fallback(spec)
            }
        }
        SubsolverKind::LevenbergMarquardt => levenberg_marquardt(spec, lm),
        SubsolverKind::Descent => descent_fallback(spec),
        SubsolverKind::NelderMead => nelder_mead(spec, nm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    /// `½‖A z − b‖²` exposed through both views.
    struct LinearLsq {
        a: Matrix,
        b: Vector,
    }

    impl Subproblem for LinearLsq {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn value(&self, z: &Vector) -> f64 {
            0.5 * (&self.a * z - &self.b).norm_squared()
        }
        fn gradient(&self, z: &Vector) -> Vector {
            self.a.tr_mul(&(&self.a * z - &self.b))
        }
        fn residual_blocks(&self, z: &Vector) -> Option<Vec<Residual>> {
            Some(vec![Residual {
                values: &self.a * z - &self.b,
                jacobian: StructuredMatrix::Dense(self.a.clone()),
            }])
        }
    }

    struct Rosenbrock;

    impl Subproblem for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, z: &Vector) -> f64 {
            0.5 * ((10.0 * (z[1] - z[0] * z[0])).powi(2) + (1.0 - z[0]).powi(2))
        }
        fn gradient(&self, z: &Vector) -> Vector {
            let r = self.residual_blocks(z).unwrap().remove(0);
            r.jacobian.tr_mul(&r.values)
        }
        fn residual_blocks(&self, z: &Vector) -> Option<Vec<Residual>> {
            Some(vec![Residual {
                values: Vector::from_vec(vec![10.0 * (z[1] - z[0] * z[0]), 1.0 - z[0]]),
                jacobian: StructuredMatrix::Dense(Matrix::from_row_slice(2, 2, &[-20.0 * z[0], 10.0, -1.0, 0.0])),
            }])
        }
    }

    fn lsq() -> LinearLsq {
        LinearLsq {
            a: Matrix::from_row_slice(4, 3, &[2.0, 0.1, 0.0, 0.3, 1.5, -0.2, 0.0, 0.4, 1.0, 1.0, 1.0, 1.0]),
            b: Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]),
        }
    }

    fn normal_solution(p: &LinearLsq) -> Vector {
        (p.a.tr_mul(&p.a)).lu().solve(&p.a.tr_mul(&p.b)).unwrap()
    }

    fn spec(objective: &dyn Subproblem, warm: Vector, tol: f64, cap: usize) -> SubproblemSpec<'_> {
        SubproblemSpec {
            objective,
            warm_start: warm,
            tolerance: tol,
            max_iterations: cap,
        }
    }

    #[test]
    fn lm_undamped_is_one_step_on_linear_least_squares() {
        let p = lsq();
        let s = spec(&p, Vector::zeros(3), 1e-10, 100);
        let report = levenberg_marquardt(&s, &LmOptions { damping_factor: 0.0 }).unwrap();
        assert_eq!(report.iterations, 1);
        let exact = normal_solution(&p);
        assert!((report.point - &exact).amax() <= 1e-10 * (1.0 + exact.amax()));
    }

    #[test]
    fn lm_default_damping_reaches_normal_solution() {
        let p = lsq();
        let s = spec(&p, Vector::zeros(3), 1e-12, 100);
        let report = levenberg_marquardt(&s, &LmOptions::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        let exact = normal_solution(&p);
        assert!((report.point - &exact).amax() <= 1e-10 * (1.0 + exact.amax()));
    }

    #[test]
    fn lm_rosenbrock() {
        let s = spec(&Rosenbrock, Vector::from_vec(vec![-1.2, 1.0]), 1e-8, 200);
        let report = levenberg_marquardt(&s, &LmOptions::default()).unwrap();
        assert!(report.gradient_norm <= 1e-8, "{report:?}");
        assert!((report.point - Vector::from_vec(vec![1.0, 1.0])).amax() <= 1e-6);
    }

    #[test]
    fn descent_on_quadratic_and_at_optimum() {
        let p = lsq();
        let exact = normal_solution(&p);
        let s = spec(&p, Vector::zeros(3), 1e-11, 100_000);
        let report = descent_fallback(&s).unwrap();
        assert!((report.point - &exact).amax() <= 1e-8);

        let s = spec(&p, exact.clone(), 1e-6, 100);
        let report = descent_fallback(&s).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.point, exact);
    }

    #[test]
    fn nelder_mead_one_dimensional() {
        struct Shifted;
        impl Subproblem for Shifted {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, z: &Vector) -> f64 {
                (z[0] - 3.0).powi(2)
            }
            fn gradient(&self, z: &Vector) -> Vector {
                Vector::from_element(1, 2.0 * (z[0] - 3.0))
            }
        }
        let s = spec(&Shifted, Vector::zeros(1), 0.0, 1000);
        let report = nelder_mead(&s, &NelderMeadOptions::default()).unwrap();
        assert!((report.point[0] - 3.0).abs() <= 1e-4);
    }

    #[test]
    fn nelder_mead_respects_dimension_cap() {
        let p = lsq();
        let s = spec(&p, Vector::zeros(3), 0.0, 10);
        let opts = NelderMeadOptions {
            max_dim: 2,
            ..NelderMeadOptions::default()
        };
        assert!(matches!(nelder_mead(&s, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn solvers_agree_and_never_ascend() {
        let p = lsq();
        let warm = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let s = spec(&p, warm.clone(), 1e-10, 20_000);
        let warm_value = p.value(&warm);
        let lm = levenberg_marquardt(&s, &LmOptions::default()).unwrap();
        let gd = descent_fallback(&s).unwrap();
        let nm = nelder_mead(&s, &NelderMeadOptions::default()).unwrap();
        for r in [&lm, &gd, &nm] {
            assert!(r.value <= warm_value);
        }
        assert!((lm.value - gd.value).abs() <= 1e-6);
        assert!((lm.value - nm.value).abs() <= 1e-4);
    }
}
