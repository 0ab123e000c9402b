//! Experiment configuration: a TOML schema with named problem blocks,
//! grid/Monte Carlo settings, and the list of checks to run. Unknown keys are
//! rejected everywhere; named parameter blocks are re-parsed into typed
//! structs by the registry, which rejects unknown parameters per block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// When set, the run is expected to produce failing checks; the exit
    /// status then signals whether the expectation held.
    #[serde(default)]
    pub expect_fail: bool,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub mc: McConfig,
    pub checks: ChecksConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Custom,
    Lq,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Custom problems: initial state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// User declaration that the Hamiltonian and terminal cost are convex.
    #[serde(default)]
    pub convex: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<NamedBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<NamedBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<NamedBlock>,
    /// LQ problems: full matrix data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqConfig>,
    /// Reference control (the candidate optimal pair).
    pub control: NamedBlock,
    /// Comparison control: perturbation direction source and scan candidate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<NamedBlock>,
    /// Optional box bounds on the control domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_upper: Option<Vec<f64>>,
}

/// A named component with free-form parameters; the registry parses the
/// parameters into the component's typed struct and rejects unknown keys.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct NamedBlock {
    pub name: String,
    #[serde(flatten)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    /// State factor matrices C_j, one per driver.
    #[serde(default)]
    pub c: Vec<Vec<Vec<f64>>>,
    /// Control factor matrices D_j, one per driver.
    #[serde(default)]
    pub d: Vec<Vec<Vec<f64>>>,
    pub x0: Vec<f64>,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
}

fn default_r_min() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
    /// Step-halving levels used by refinement diagnostics.
    #[serde(default)]
    pub refinements: usize,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    /// Log-log slope of the mean-square perturbation gap down the eps ladder.
    PerturbationRate,
    /// Decay of the first-order remainder down the eps ladder.
    VariationalRemainder,
    /// Difference-quotient limit of the cost against the variational formula.
    Gateaux,
    /// Costate duality identity.
    Duality,
    /// Stationarity scan of the Hamiltonian control gradient over candidates.
    StationarityScan,
    /// Random-perturbation optimality certificate under declared convexity.
    Sufficiency,
    /// LQ control stationarity residual.
    LqStationarity,
    /// LQ optimality certificate against the dynamic-programming competitor.
    LqCertificate,
}

impl CheckName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckName::PerturbationRate => "perturbation-rate",
            CheckName::VariationalRemainder => "variational-remainder",
            CheckName::Gateaux => "gateaux",
            CheckName::Duality => "duality",
            CheckName::StationarityScan => "stationarity-scan",
            CheckName::Sufficiency => "sufficiency",
            CheckName::LqStationarity => "lq-stationarity",
            CheckName::LqCertificate => "lq-certificate",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default)]
    pub run: Vec<CheckName>,
    #[serde(default)]
    pub params: CheckParams,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckParams {
    /// Perturbation sizes, largest first.
    pub eps_ladder: Vec<f64>,
    /// Acceptance band for the perturbation-rate slope.
    pub slope_band: [f64; 2],
    /// Remainder at the smallest eps must fall below this fraction of the
    /// value at the largest eps.
    pub remainder_rel_threshold: f64,
    /// Remainders below this floor count as identically zero (dynamics that
    /// are exactly affine have no first-order remainder at all).
    pub remainder_zero_floor: f64,
    pub gateaux_rel_tol: f64,
    pub gateaux_abs_tol: f64,
    pub duality_abs_tol: f64,
    /// Stationarity tolerance as a fraction of the mean ||R u|| scale.
    pub stationarity_rel_scale: f64,
    pub sufficiency_samples: usize,
    pub vi_abs_tol: f64,
    /// Polynomial degree of the costate regression basis.
    pub basis_degree: usize,
    pub ridge: f64,
    /// Per-stage path-count overrides; recognized keys: "adjoint" (costate
    /// solve and everything downstream of it), "sufficiency"
    /// (cost-difference sampling).
    pub paths: BTreeMap<String, usize>,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            eps_ladder: vec![0.2, 0.1, 0.05, 0.025],
            slope_band: [1.8, 2.2],
            remainder_rel_threshold: 1e-3,
            remainder_zero_floor: 1e-20,
            gateaux_rel_tol: 0.05,
            gateaux_abs_tol: 0.0,
            duality_abs_tol: 0.0,
            stationarity_rel_scale: 0.02,
            sufficiency_samples: 50,
            vi_abs_tol: 0.0,
            basis_degree: 2,
            ridge: 1e-8,
            paths: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_schema()?;
        Ok(cfg)
    }

    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Structural validation beyond what serde enforces.
    pub fn validate_schema(&self) -> Result<()> {
        if self.grid.horizon <= 0.0 || !self.grid.horizon.is_finite() {
            return Err(Error::Config("grid.horizon must be positive".into()));
        }
        if self.grid.n_steps == 0 {
            return Err(Error::Config("grid.n_steps must be positive".into()));
        }
        if self.mc.n_paths == 0 {
            return Err(Error::Config("mc.n_paths must be positive".into()));
        }
        let p = &self.checks.params;
        if p.eps_ladder.is_empty() || p.eps_ladder.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Config("checks.params.eps_ladder must lie in (0,1]".into()));
        }
        if p.eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "checks.params.eps_ladder must be strictly decreasing".into(),
            ));
        }
        for key in p.paths.keys() {
            if key != "adjoint" && key != "sufficiency" {
                return Err(Error::Config(format!(
                    "checks.params.paths: unknown stage '{key}' (expected adjoint or sufficiency)"
                )));
            }
        }
        match self.problem.kind {
            ProblemKind::Custom => {
                for (missing, name) in [
                    (self.problem.field.is_none(), "field"),
                    (self.problem.drift.is_none(), "drift"),
                    (self.problem.cost.is_none(), "cost"),
                    (self.problem.x0.is_none(), "x0"),
                ] {
                    if missing {
                        return Err(Error::Config(format!(
                            "problem.kind = custom requires a problem.{name} block"
                        )));
                    }
                }
                if self.problem.lq.is_some() {
                    return Err(Error::Config("problem.lq is only valid with kind = lq".into()));
                }
            }
            ProblemKind::Lq => {
                if self.problem.lq.is_none() {
                    return Err(Error::Config("problem.kind = lq requires a problem.lq block".into()));
                }
                if self.problem.field.is_some()
                    || self.problem.drift.is_some()
                    || self.problem.cost.is_some()
                {
                    return Err(Error::Config(
                        "problem.kind = lq forbids custom field/drift/cost blocks".into(),
                    ));
                }
            }
        }
        let need_candidate = [
            CheckName::PerturbationRate,
            CheckName::VariationalRemainder,
            CheckName::Gateaux,
            CheckName::Duality,
            CheckName::StationarityScan,
        ];
        if self.problem.candidate.is_none()
            && self.checks.run.iter().any(|c| need_candidate.contains(c))
        {
            return Err(Error::Config(
                "the requested checks need a problem.candidate control block".into(),
            ));
        }
        let lq_only = [CheckName::LqStationarity, CheckName::LqCertificate];
        if self.problem.kind != ProblemKind::Lq
            && self.checks.run.iter().any(|c| lq_only.contains(c))
        {
            return Err(Error::Config("lq-* checks require problem.kind = lq".into()));
        }
        Ok(())
    }
}
