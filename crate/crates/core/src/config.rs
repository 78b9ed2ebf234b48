//! Flat TOML run configurations.
//!
//! ```toml
//! problem = "lorenz4dvar"   # lorenz4dvar | burgers | tanh-chain | linear-quadratic
//! seed = 7
//! rho = 0.3
//! eta = 10.0
//! max_iter = 5000
//! ```
//!
//! Keys that do not apply to the chosen problem are rejected, so a typo never
//! silently falls back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admm::AdmmParams;
use crate::error::{Error, Result};
use crate::experiments::burgers::{make_implicit_problem, BurgersConfig};
use crate::experiments::lorenz::{admm_init_4dvar, make_4dvar_problem, FourDVarData, LorenzConfig};
use crate::experiments::synthetic::{make_tanh_chain, LinearQuadratic, TanhChainConfig};
use crate::problem::{DualVariables, DynamicsProblem, Trajectory};
use crate::subsolvers::SubsolverKind;
use crate::lagrangian::ProximalWeights;
use crate::tuner::{choose_penalties, estimate_constants, PenaltyCertificate, TunerOptions, WorkingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Lorenz4dvar,
    Burgers,
    TanhChain,
    LinearQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub seed: Option<u64>,

    /// Step count (Lorenz, synthetic problems).
    pub steps: Option<usize>,
    pub dt: Option<f64>,
    /// Observation stride (Lorenz).
    pub stride: Option<usize>,
    pub alpha: Option<f64>,
    pub noise_std: Option<f64>,

    pub viscosity: Option<f64>,
    pub cells: Option<usize>,

    pub dim: Option<usize>,
    pub contraction: Option<f64>,
    pub weight: Option<f64>,

    pub rho: Option<f64>,
    pub eta: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub inner_tol: Option<f64>,
    pub subsolver: Option<SubsolverKind>,

    pub margin: Option<f64>,
    pub samples: Option<usize>,
    pub box_factor: Option<f64>,
}

/// A built problem with its default starting point and parameters.
pub struct Instance {
    pub problem: DynamicsProblem,
    pub x0: Trajectory,
    pub lambda0: DualVariables,
    /// `None` asks for tuned penalties.
    pub rho: Option<f64>,
    pub eta: f64,
    pub lorenz: Option<FourDVarData>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.check_keys()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn check_keys(&self) -> Result<()> {
        let mut foreign = Vec::new();
        let mut reject = |name: &str, present: bool| {
            if present {
                foreign.push(name.to_owned());
            }
        };
        let lorenz = self.problem == ProblemKind::Lorenz4dvar;
        let burgers = self.problem == ProblemKind::Burgers;
        let synthetic = matches!(self.problem, ProblemKind::TanhChain | ProblemKind::LinearQuadratic);
        reject("stride", !lorenz && self.stride.is_some());
        reject("alpha", !lorenz && self.alpha.is_some());
        reject("noise_std", !lorenz && self.noise_std.is_some());
        reject("dt", synthetic && self.dt.is_some());
        reject("steps", burgers && self.steps.is_some());
        reject("viscosity", !burgers && self.viscosity.is_some());
        reject("cells", !burgers && self.cells.is_some());
        reject("dim", !synthetic && self.dim.is_some());
        reject("contraction", self.problem != ProblemKind::TanhChain && self.contraction.is_some());
        reject("weight", self.problem != ProblemKind::TanhChain && self.weight.is_some());
        if foreign.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "keys {} do not apply to problem {:?}",
                foreign.join(", "),
                self.problem
            )))
        }
    }

    pub fn lorenz_config(&self) -> LorenzConfig {
        let base = LorenzConfig::default();
        let dt = self.dt.unwrap_or(base.dt);
        let steps = self.steps.unwrap_or(base.steps);
        LorenzConfig {
            dt,
            steps,
            horizon: steps as f64 * dt,
            stride: self.stride.unwrap_or(base.stride),
            alpha: self.alpha.unwrap_or(base.alpha),
            noise_std: self.noise_std.unwrap_or(base.noise_std),
            seed: self.seed.unwrap_or(base.seed),
            ..base
        }
    }

    pub fn burgers_config(&self) -> BurgersConfig {
        let base = BurgersConfig::default();
        BurgersConfig {
            viscosity: self.viscosity.unwrap_or(base.viscosity),
            cells: self.cells.unwrap_or(base.cells),
            dt: self.dt.unwrap_or(base.dt),
            ..base
        }
    }

    pub fn tanh_chain_config(&self) -> TanhChainConfig {
        let base = TanhChainConfig::default();
        TanhChainConfig {
            steps: self.steps.unwrap_or(base.steps),
            dim: self.dim.unwrap_or(base.dim),
            contraction: self.contraction.unwrap_or(base.contraction),
            weight: self.weight.unwrap_or(base.weight),
        }
    }

    pub fn tuner_options(&self) -> TunerOptions {
        TunerOptions {
            margin: self.margin.unwrap_or(TunerOptions::default().margin),
            ..TunerOptions::default()
        }
    }

    pub fn build(&self) -> Result<Instance> {
        let mut instance = match self.problem {
            ProblemKind::Lorenz4dvar => {
                let (problem, data) = make_4dvar_problem(&self.lorenz_config())?;
                let (x0, lambda0) = admm_init_4dvar(&problem, &data)?;
                Instance {
                    problem,
                    x0,
                    lambda0,
                    rho: Some(0.3),
                    eta: 10.0,
                    lorenz: Some(data),
                }
            }
            ProblemKind::Burgers => {
                let cfg = self.burgers_config();
                let problem = make_implicit_problem(&cfg, &cfg.initial_profile())?;
                let (n, d) = (problem.n(), problem.d());
                Instance {
                    problem,
                    x0: Trajectory::zeros(n + 1, d),
                    lambda0: DualVariables::zeros(n, d),
                    rho: Some(0.1),
                    eta: 2.0,
                    lorenz: None,
                }
            }
            ProblemKind::TanhChain => {
                let problem = make_tanh_chain(&self.tanh_chain_config())?;
                let (n, d) = (problem.n(), problem.d());
                Instance {
                    problem,
                    x0: Trajectory::zeros(n + 1, d),
                    lambda0: DualVariables::zeros(n, d),
                    rho: None,
                    eta: 1.0,
                    lorenz: None,
                }
            }
            ProblemKind::LinearQuadratic => {
                let lq = LinearQuadratic::random(self.steps.unwrap_or(5), self.dim.unwrap_or(3), self.seed.unwrap_or(0));
                let problem = lq.problem()?;
                let (n, d) = (problem.n(), problem.d());
                Instance {
                    problem,
                    x0: Trajectory::zeros(n + 1, d),
                    lambda0: DualVariables::zeros(n, d),
                    rho: Some(1.0),
                    eta: 1.0,
                    lorenz: None,
                }
            }
        };
        if self.rho.is_some() {
            instance.rho = self.rho;
        }
        if let Some(eta) = self.eta {
            instance.eta = eta;
        }
        Ok(instance)
    }

    /// The box the smoothness constants are sampled on.
    pub fn working_box(&self, instance: &Instance) -> WorkingBox {
        WorkingBox::around(&instance.x0, self.box_factor.unwrap_or(3.0))
    }

    /// Tuned penalties for `instance`, from constants sampled over a box of
    /// `box_factor` (default 3) times the spread of its starting point.
    pub fn certify(&self, instance: &Instance) -> Result<PenaltyCertificate> {
        let constants = estimate_constants(&instance.problem, &self.working_box(instance), self.samples.unwrap_or(2000), self.seed.unwrap_or(0))?
            .with_initialization(&instance.problem, &instance.x0)?;
        let eta = ProximalWeights::uniform(instance.problem.n() + 1, instance.eta)?;
        let (_, certificate) = choose_penalties(&constants, &eta, &self.tuner_options())?;
        Ok(certificate)
    }

    /// Iteration cap, tolerances and subsolver applied on top of `params`.
    pub fn apply_to(&self, params: &mut AdmmParams) {
        if let Some(n) = self.max_iter {
            params.max_iterations = n;
        }
        if let Some(t) = self.tol {
            params.feasibility_tol = t;
            params.kkt_tol = t;
        }
        if let Some(t) = self.inner_tol {
            params.inner_tol = t;
        }
        if let Some(s) = self.subsolver {
            params.subsolver = s;
        }
    }
}
