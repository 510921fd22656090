//! Scenario configuration files and the orchestration built on them.
//!
//! A scenario is a TOML document with a `schema_version` and one table per
//! concern: `[model]`, `[field]`, `[partition]`, `[initial]`, `[[chance]]`,
//! `[terminal]`, `[objective]`, `[trust]`, `[scp]`, `[monte_carlo]` and
//! `[output]`. Unknown keys are rejected. [`Scenario`] turns a validated
//! config into a model, a field, an SCP problem and a [`ScenarioShaper`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::SolverAdapter;
use crate::dynamics::{
    Aerocapture, AerocaptureParams, DensityProfile, DoubleIntegrator, Jacobians, ModelError, SystemModel,
};
use crate::grf::{GaussianRandomField, KernelSpec};
use crate::lincov::predict_policy;
use crate::linalg::{mat_from_rows, Mat, Vector};
use crate::monte_carlo::{aggregate, run_trials, McConfig, McError, McReport, McSetup};
use crate::nominal::{NominalTrajectory, TimePartition};
use crate::orbit::{apoapsis_gradient, delta_v, delta_v_branches, ExitState, TargetOrbit};
use crate::policy::FeedbackPolicy;
use crate::scp::{run_scp, ScpConfig, ScpError, ScpResult, SteeringProblem, SubproblemShaper, SubproblemSpec};
use crate::subproblem::{
    ChanceConstraintSpec, ChanceTarget, DesiredTrajectory, PercentileObjective, PercentileTerm, SteeringObjective,
    TerminalConstraint, TrustRegion,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 2] = [
    ("double_integrator", include_str!("../scenarios/double_integrator.toml")),
    ("aerocapture", include_str!("../scenarios/aerocapture.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub model: ModelConfig,
    pub field: FieldConfig,
    pub partition: PartitionConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub chance: Vec<ChanceGroup>,
    #[serde(default)]
    pub terminal: TerminalConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub trust: TrustConfig,
    #[serde(default)]
    pub scp: ScpConfig,
    #[serde(default)]
    pub monte_carlo: McConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    DoubleIntegrator,
    Aerocapture {
        ballistic_coefficient: f64,
        lift_to_drag: f64,
        mu: f64,
        planet_radius: f64,
        target_apoapsis_radius: f64,
        target_periapsis_radius: f64,
        density: DensityConfig,
    },
}

/// Nominal density: a built-in profile or a two-column CSV (altitude m,
/// density kg/m³) resolved relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Exponential { surface_density: f64, scale_height: f64 },
    Table { altitudes: Vec<f64>, densities: Vec<f64> },
    Csv { path: PathBuf },
}

/// Unit the kernel variances are written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceUnit {
    #[default]
    Fractional,
    /// Variances in percent²; divided by 10⁴ when the field is built.
    PercentSquared,
}

impl VarianceUnit {
    pub fn factor(self) -> f64 {
        match self {
            VarianceUnit::Fractional => 1.0,
            VarianceUnit::PercentSquared => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub variance_unit: VarianceUnit,
    pub kernel: KernelSpec,
}

impl FieldConfig {
    /// Kernel with variances converted to the field's value units.
    pub fn scaled_kernel(&self) -> KernelSpec {
        let f = self.variance_unit.factor();
        let mut k = self.kernel.clone();
        match &mut k {
            KernelSpec::LocallyPeriodic { variance, .. }
            | KernelSpec::SquaredExponential { variance, .. }
            | KernelSpec::Constant { variance } => *variance *= f,
            KernelSpec::MarsDensity { variance_max, .. } => *variance_max *= f,
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub knots: Vec<f64>,
    pub substeps: usize,
}

/// A square matrix written as full rows, a diagonal of 3σ values, or zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixConfig {
    Zero,
    Matrix(Vec<Vec<f64>>),
    ThreeSigma(Vec<f64>),
}

impl MatrixConfig {
    pub fn to_mat(&self, n: usize) -> Result<Mat, ScenarioError> {
        match self {
            MatrixConfig::Zero => Ok(Mat::zeros(n, n)),
            MatrixConfig::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return invalid(format!("expected a {n}×{n} matrix"));
                }
                let m = mat_from_rows(rows);
                if m.iter().any(|v| !v.is_finite()) || (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                    return invalid("matrix must be finite and symmetric");
                }
                Ok(m)
            }
            MatrixConfig::ThreeSigma(d) => {
                if d.len() != n || d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return invalid(format!("expected {n} nonnegative 3σ values"));
                }
                Ok(Mat::from_diagonal(&Vector::from_iterator(n, d.iter().map(|s| (s / 3.0).powi(2)))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub covariance: MatrixConfig,
    /// Constant initial control guess `û⁽⁰⁾_k`; zeros when omitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control: Vec<f64>,
}

/// One half-plane chance constraint applied at several steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceGroup {
    pub target: ChanceTarget,
    /// Steps to constrain; all steps (`0..=N` for states, `0..N` for
    /// controls) when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    pub direction: Vec<f64>,
    pub bound: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<MatrixConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateWeightConfig {
    Zero,
    /// `q̂⁻² ∇qᵀ∇q` at each nominal knot, `q` the dynamic pressure.
    DynamicPressure,
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesiredConfig {
    TrackMean,
    Fixed(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileDirection {
    /// `ξ = ∂Δv/∂x_f` at the nominal final state, refreshed every iteration.
    DeltaV,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PercentileConfig {
    pub direction: PercentileDirection,
    /// `p_f`: the objective approximates the `1 − p_f` quantile.
    pub probability: f64,
    /// `η`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// `R_k = r I`.
    #[serde(default)]
    pub control_weight: f64,
    /// `R̄_k = r̄ I`.
    #[serde(default)]
    pub feedforward_weight: f64,
    #[serde(default = "default_state_weight")]
    pub state_weight: StateWeightConfig,
    #[serde(default = "default_desired")]
    pub desired: DesiredConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile: Option<PercentileConfig>,
}

fn default_state_weight() -> StateWeightConfig {
    StateWeightConfig::Zero
}

fn default_desired() -> DesiredConfig {
    DesiredConfig::TrackMean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalTrustWeight {
    /// `∇r_aᵀ∇r_a` of the exit-orbit apoapsis at the nominal final state.
    ApoapsisGradient,
    Matrix(Vec<Vec<f64>>),
}

/// `‖V_k − û_k‖_{Mᵘ} ≤ Δᵘ` for every step and `‖x̄_N − x̂_N‖_{Mˣ_N} ≤ Δˣ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustConfig {
    /// `Mᵘ_k = w I`; no control trust region when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_weight: Option<f64>,
    #[serde(default)]
    pub control_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_state_weight: Option<TerminalTrustWeight>,
    #[serde(default)]
    pub state_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs serialize")
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
        Self::from_toml(text)
    }
}

/// The two models behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioModel {
    DoubleIntegrator(DoubleIntegrator),
    Aerocapture(Aerocapture),
}

impl ScenarioModel {
    fn inner(&self) -> &dyn SystemModel {
        match self {
            ScenarioModel::DoubleIntegrator(m) => m,
            ScenarioModel::Aerocapture(m) => m,
        }
    }

    pub fn aerocapture(&self) -> Option<&Aerocapture> {
        match self {
            ScenarioModel::Aerocapture(m) => Some(m),
            ScenarioModel::DoubleIntegrator(_) => None,
        }
    }
}

impl SystemModel for ScenarioModel {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner().control_dim()
    }
    fn index_dim(&self) -> usize {
        self.inner().index_dim()
    }
    fn dynamics(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Vector, ModelError> {
        self.inner().dynamics(x, u, psi)
    }
    fn index_point(&self, x: &Vector) -> Vec<f64> {
        self.inner().index_point(x)
    }
    fn jacobians(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Jacobians, ModelError> {
        self.inner().jacobians(x, u, psi)
    }
}

fn target_orbit(model: &Aerocapture) -> TargetOrbit {
    TargetOrbit {
        mu: model.params.mu,
        apoapsis_radius: model.params.target_apoapsis_radius,
        periapsis_radius: model.params.target_periapsis_radius,
    }
}

/// Objective, constraints and trust region for a scenario, re-derived from
/// each nominal where the config asks for it.
#[derive(Debug, Clone)]
pub struct ScenarioShaper {
    pub model: ScenarioModel,
    pub chance: Vec<ChanceConstraintSpec>,
    pub terminal: TerminalConstraint,
    pub control_weight: Mat,
    pub feedforward_weight: Mat,
    pub state_weight: StateWeightConfig,
    pub desired: DesiredTrajectory,
    pub percentile: Option<PercentileConfig>,
    pub trust: TrustConfig,
}

impl ScenarioShaper {
    fn aerocapture(&self, what: &str) -> Result<&Aerocapture, ScpError> {
        self.model
            .aerocapture()
            .ok_or_else(|| ScpError::Shaper(format!("{what} needs the aerocapture model")))
    }

    fn state_weights(&self, nominal: &NominalTrajectory) -> Result<Vec<Mat>, ScpError> {
        let n = self.model.state_dim();
        let knots = nominal.knot_states();
        match &self.state_weight {
            StateWeightConfig::Zero => Ok(vec![]),
            StateWeightConfig::Matrix(rows) => Ok(vec![mat_from_rows(rows); knots.len()]),
            StateWeightConfig::DynamicPressure => {
                let ac = self.aerocapture("the dynamic-pressure state weight")?;
                Ok(knots
                    .iter()
                    .map(|x| {
                        let (q, grad) = ac.dynamic_pressure(x);
                        if q > 0.0 {
                            &grad * grad.transpose() / (q * q)
                        } else {
                            Mat::zeros(n, n)
                        }
                    })
                    .collect())
            }
        }
    }

    /// Percentile objective linearized at the nominal final state.
    fn percentile_objective(&self, pc: &PercentileConfig, x_f: &Vector) -> Result<PercentileObjective, ScpError> {
        match &pc.direction {
            PercentileDirection::Fixed(d) => Ok(PercentileObjective::single(
                Vector::from_column_slice(d),
                pc.probability,
                pc.weight,
            )),
            PercentileDirection::DeltaV => {
                let ac = self.aerocapture("the Δv percentile objective")?;
                let branches = delta_v_branches(&ExitState::from_state(x_f), &target_orbit(ac))
                    .map_err(|e| ScpError::Shaper(format!("Δv at the nominal final state {x_f:?}: {e}")))?;
                Ok(PercentileObjective {
                    terms: branches
                        .into_iter()
                        .map(|(value, xi)| PercentileTerm {
                            offset: value - xi.dot(x_f),
                            direction: xi,
                        })
                        .collect(),
                    probability: pc.probability,
                    weight: pc.weight,
                })
            }
        }
    }

    fn trust_region(&self, nominal: &NominalTrajectory) -> Result<Option<TrustRegion>, ScpError> {
        let (n, m) = (self.model.state_dim(), self.model.control_dim());
        let big_n = nominal.partition.segments();
        let control_weights = match self.trust.control_weight {
            Some(w) => vec![Mat::identity(m, m) * w; big_n],
            None => vec![],
        };
        let state_weights = match &self.trust.terminal_state_weight {
            None => vec![],
            Some(tw) => {
                let terminal = match tw {
                    TerminalTrustWeight::Matrix(rows) => mat_from_rows(rows),
                    TerminalTrustWeight::ApoapsisGradient => {
                        let ac = self.aerocapture("the apoapsis-gradient trust weight")?;
                        let g = apoapsis_gradient(&ExitState::from_state(nominal.final_state()), ac.params.mu)
                            .map_err(|e| ScpError::Shaper(format!("apoapsis gradient at the nominal: {e}")))?;
                        &g * g.transpose()
                    }
                };
                let mut w = vec![Mat::zeros(n, n); big_n + 1];
                w[big_n] = terminal;
                w
            }
        };
        if control_weights.is_empty() && state_weights.is_empty() {
            return Ok(None);
        }
        Ok(Some(TrustRegion {
            nominal_states: nominal.knot_states(),
            nominal_controls: nominal.controls.clone(),
            control_weights,
            control_radius: self.trust.control_radius,
            state_weights,
            state_radius: self.trust.state_radius,
        }))
    }
}

impl SubproblemShaper for ScenarioShaper {
    fn shape(&self, nominal: &NominalTrajectory) -> Result<SubproblemSpec, ScpError> {
        let big_n = nominal.partition.segments();
        let weights = |w: &Mat| if w.amax() > 0.0 { vec![w.clone(); big_n] } else { vec![] };
        let percentile = self
            .percentile
            .as_ref()
            .map(|pc| self.percentile_objective(pc, nominal.final_state()))
            .transpose()?;
        Ok(SubproblemSpec {
            objective: SteeringObjective {
                state_weights: self.state_weights(nominal)?,
                control_weights: weights(&self.control_weight),
                feedforward_weights: weights(&self.feedforward_weight),
                desired: self.desired.clone(),
                percentile,
            },
            chance: self.chance.clone(),
            terminal: self.terminal.clone(),
            trust: self.trust_region(nominal)?,
            objective_offset: 0.0,
        })
    }
}

/// A validated scenario ready to solve and simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: ScenarioModel,
    pub field: GaussianRandomField,
    pub problem: SteeringProblem,
    pub shaper: ScenarioShaper,
}

fn build_model(cfg: &ModelConfig, base: Option<&Path>) -> Result<ScenarioModel, ScenarioError> {
    match cfg {
        ModelConfig::DoubleIntegrator => Ok(ScenarioModel::DoubleIntegrator(DoubleIntegrator)),
        ModelConfig::Aerocapture {
            ballistic_coefficient,
            lift_to_drag,
            mu,
            planet_radius,
            target_apoapsis_radius,
            target_periapsis_radius,
            density,
        } => {
            let density = match density {
                DensityConfig::Exponential {
                    surface_density,
                    scale_height,
                } => DensityProfile::Exponential {
                    surface_density: *surface_density,
                    scale_height: *scale_height,
                },
                DensityConfig::Table { altitudes, densities } => DensityProfile::Table {
                    altitudes: altitudes.clone(),
                    densities: densities.clone(),
                },
                DensityConfig::Csv { path } => {
                    let full = match base {
                        Some(b) if path.is_relative() => b.join(path),
                        _ => path.clone(),
                    };
                    DensityProfile::from_csv_path(&full)
                        .map_err(|e| ScenarioError::Invalid(format!("density table {}: {e}", full.display())))?
                }
            };
            let params = AerocaptureParams {
                ballistic_coefficient: *ballistic_coefficient,
                lift_to_drag: *lift_to_drag,
                mu: *mu,
                planet_radius: *planet_radius,
                target_apoapsis_radius: *target_apoapsis_radius,
                target_periapsis_radius: *target_periapsis_radius,
                density,
            };
            Aerocapture::new(params)
                .map(ScenarioModel::Aerocapture)
                .map_err(|e| ScenarioError::Invalid(format!("model: {e}")))
        }
    }
}

fn expand_chance(groups: &[ChanceGroup], big_n: usize, n: usize, m: usize) -> Result<Vec<ChanceConstraintSpec>, ScenarioError> {
    let mut out = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let steps = match (&group.steps, group.target) {
            (Some(s), _) => s.clone(),
            (None, ChanceTarget::State) => (0..=big_n).collect(),
            (None, ChanceTarget::Control) => (0..big_n).collect(),
        };
        for step in steps {
            let spec = ChanceConstraintSpec {
                target: group.target,
                step,
                direction: group.direction.clone(),
                bound: group.bound,
                probability: group.probability,
            };
            if let Err(reason) = spec.validate(big_n, n, m) {
                return invalid(format!("chance group {g}, step {step}: {reason}"));
            }
            out.push(spec);
        }
    }
    Ok(out)
}

fn vector_of(values: &[f64], n: usize, what: &str) -> Result<Vector, ScenarioError> {
    if values.len() != n || values.iter().any(|v| !v.is_finite()) {
        return invalid(format!("{what} must have {n} finite entries"));
    }
    Ok(Vector::from_column_slice(values))
}

fn square_of(rows: &[Vec<f64>], n: usize, what: &str) -> Result<Mat, ScenarioError> {
    MatrixConfig::Matrix(rows.to_vec())
        .to_mat(n)
        .map_err(|e| ScenarioError::Invalid(format!("{what}: {e}")))
}

impl Scenario {
    /// Validates `config`; relative paths resolve against `base`.
    pub fn from_config(config: ScenarioConfig, base: Option<&Path>) -> Result<Self, ScenarioError> {
        if config.schema_version != SCHEMA_VERSION {
            return invalid(format!("schema_version {} is not supported", config.schema_version));
        }
        let model = build_model(&config.model, base)?;
        let (n, m) = (model.state_dim(), model.control_dim());
        let is_aero = model.aerocapture().is_some();

        let kernel = config.field.scaled_kernel();
        let field = GaussianRandomField::new(kernel, config.field.mean, model.index_dim())
            .map_err(|e| ScenarioError::Invalid(format!("field: {e}")))?;

        let partition = TimePartition::new(config.partition.knots.clone(), config.partition.substeps)
            .map_err(|e| ScenarioError::Invalid(format!("partition: {e}")))?;
        let big_n = partition.segments();

        let x0_mean = vector_of(&config.initial.mean, n, "initial.mean")?;
        let p0 = config.initial.covariance.to_mat(n)?;
        if crate::linalg::min_eigenvalue(&p0) < -1e-12 * p0.amax().max(f64::MIN_POSITIVE) {
            return invalid("initial.covariance is not positive semidefinite");
        }
        let u0 = if config.initial.control.is_empty() {
            Vector::zeros(m)
        } else {
            vector_of(&config.initial.control, m, "initial.control")?
        };

        let chance = expand_chance(&config.chance, big_n, n, m)?;

        let terminal = TerminalConstraint {
            mean: config.terminal.mean.as_deref().map(|v| vector_of(v, n, "terminal.mean")).transpose()?,
            covariance: config.terminal.covariance.as_ref().map(|c| c.to_mat(n)).transpose()?,
        };

        let obj = &config.objective;
        for (name, w) in [
            ("objective.control_weight", obj.control_weight),
            ("objective.feedforward_weight", obj.feedforward_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return invalid(format!("{name} must be nonnegative"));
            }
        }
        match &obj.state_weight {
            StateWeightConfig::DynamicPressure if !is_aero => {
                return invalid("state_weight = \"dynamic_pressure\" needs the aerocapture model")
            }
            StateWeightConfig::Matrix(rows) => {
                square_of(rows, n, "objective.state_weight")?;
            }
            _ => {}
        }
        let desired = match &obj.desired {
            DesiredConfig::TrackMean => DesiredTrajectory::TrackMean,
            DesiredConfig::Fixed(rows) => {
                if rows.len() != big_n + 1 {
                    return invalid(format!("objective.desired needs {} states", big_n + 1));
                }
                DesiredTrajectory::Fixed(
                    rows.iter()
                        .map(|r| vector_of(r, n, "objective.desired"))
                        .collect::<Result<_, _>>()?,
                )
            }
        };
        if let Some(pc) = &obj.percentile {
            if !(pc.probability > 0.0 && pc.probability <= 0.5) {
                return invalid(format!("objective.percentile.probability {} outside (0, 0.5]", pc.probability));
            }
            if !(pc.weight >= 0.0 && pc.weight.is_finite()) {
                return invalid("objective.percentile.weight must be nonnegative");
            }
            match &pc.direction {
                PercentileDirection::DeltaV if !is_aero => {
                    return invalid("percentile direction \"delta_v\" needs the aerocapture model")
                }
                PercentileDirection::Fixed(d) => {
                    vector_of(d, n, "objective.percentile.direction")?;
                }
                _ => {}
            }
        }

        let trust = &config.trust;
        if let Some(w) = trust.control_weight {
            if !(w > 0.0 && trust.control_radius > 0.0) {
                return invalid("trust.control_weight and trust.control_radius must be positive");
            }
        }
        match &trust.terminal_state_weight {
            Some(_) if !(trust.state_radius > 0.0) => return invalid("trust.state_radius must be positive"),
            Some(TerminalTrustWeight::ApoapsisGradient) if !is_aero => {
                return invalid("terminal_state_weight = \"apoapsis_gradient\" needs the aerocapture model")
            }
            Some(TerminalTrustWeight::Matrix(rows)) => {
                square_of(rows, n, "trust.terminal_state_weight")?;
            }
            _ => {}
        }
        config
            .scp
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        config
            .monte_carlo
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let shaper = ScenarioShaper {
            model: model.clone(),
            chance,
            terminal,
            control_weight: Mat::identity(m, m) * obj.control_weight,
            feedforward_weight: Mat::identity(m, m) * obj.feedforward_weight,
            state_weight: obj.state_weight.clone(),
            desired,
            percentile: obj.percentile.clone(),
            trust: trust.clone(),
        };
        let problem = SteeringProblem {
            initial_controls: vec![u0; big_n],
            partition,
            x0_mean,
            p0,
        };
        Ok(Self {
            config,
            model,
            field,
            problem,
            shaper,
        })
    }

    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        Self::from_config(ScenarioConfig::from_toml(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent())
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        Self::from_config(ScenarioConfig::bundled(name)?, None)
    }

    pub fn chance(&self) -> &[ChanceConstraintSpec] {
        &self.shaper.chance
    }

    /// Runs SCP, optionally overriding the iteration count.
    pub fn solve(&self, adapter: &dyn SolverAdapter, iterations: Option<usize>) -> Result<ScpResult, ScpError> {
        let mut cfg = self.config.scp.clone();
        if let Some(it) = iterations {
            cfg.max_iterations = it;
        }
        run_scp(&self.model, &self.field, &self.problem, &self.shaper, adapter, &cfg)
    }

    /// Zero-gain policy flying the initial control guess.
    pub fn open_loop_policy(&self) -> FeedbackPolicy {
        let (n, m) = (self.model.state_dim(), self.model.control_dim());
        let big_n = self.problem.partition.segments();
        let v = Vector::from_iterator(
            big_n * m,
            self.problem.initial_controls.iter().flat_map(|u| u.iter().copied()),
        );
        let x_bar = Vector::from_iterator(
            (big_n + 1) * n,
            std::iter::repeat(self.problem.x0_mean.iter().copied()).take(big_n + 1).flatten(),
        );
        FeedbackPolicy::from_stacked(
            &self.problem.partition.knots,
            &Mat::zeros(big_n * m, (big_n + 1) * n),
            &v,
            &x_bar,
            n,
            m,
        )
    }

    /// Terminal functional reported by Monte Carlo: Δv for aerocapture,
    /// `None` when the exit orbit is not captured.
    pub fn terminal_functional(&self) -> Option<(&'static str, Box<dyn Fn(&Vector) -> Option<f64> + Sync>)> {
        let ac = self.model.aerocapture()?;
        let target = target_orbit(ac);
        Some(("delta_v", Box::new(move |x: &Vector| delta_v(&ExitState::from_state(x), &target).ok())))
    }

    /// Monte Carlo of `policy` with the linear-covariance prediction attached.
    pub fn simulate(&self, policy: &FeedbackPolicy, mc: &McConfig, label: &str) -> Result<McReport, McError> {
        let setup = McSetup {
            model: &self.model,
            field: &self.field,
            partition: &self.problem.partition,
            x0_mean: &self.problem.x0_mean,
            p0: &self.problem.p0,
        };
        let outputs = run_trials(&setup, policy, mc)?;
        let functional = self.terminal_functional();
        let terminal = functional.as_ref().map(|(name, f)| (*name, f.as_ref()));
        let mut report = aggregate(&outputs, &self.problem.partition, self.chance(), terminal, mc)?;
        report.label = label.to_string();
        report.lincov = match predict_policy(
            &self.model,
            &self.field,
            policy,
            &self.problem.partition,
            &self.problem.x0_mean,
            &self.problem.p0,
            self.config.scp.quadrature_nodes,
        ) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("linear-covariance prediction unavailable: {e}");
                None
            }
        };
        Ok(report)
    }

    /// Trial outputs (with dense samples when `mc.record_dense`) for CSV export.
    pub fn simulate_trials(
        &self,
        policy: &FeedbackPolicy,
        mc: &McConfig,
    ) -> Result<Vec<crate::monte_carlo::TrialOutput>, McError> {
        let setup = McSetup {
            model: &self.model,
            field: &self.field,
            partition: &self.problem.partition,
            x0_mean: &self.problem.x0_mean,
            p0: &self.problem.p0,
        };
        run_trials(&setup, policy, mc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_roundtrip() {
        for (name, text) in BUNDLED {
            let cfg = ScenarioConfig::from_toml(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again, "{name}");
            Scenario::from_config(cfg, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn double_integrator_expands_chance_groups() {
        let s = Scenario::bundled("double_integrator").unwrap();
        assert_eq!(s.problem.partition.segments(), 5);
        assert_eq!(s.chance().len(), 12);
        assert!(s.chance().iter().all(|c| (c.probability - 0.00135).abs() < 1e-15));
        assert!((s.problem.p0[(0, 0)] - (0.05f64 / 3.0).powi(2)).abs() < 1e-18);
    }

    #[test]
    fn probability_at_or_above_half_is_rejected() {
        let text = BUNDLED[0].1.replacen("probability = 0.00135", "probability = 0.6", 1);
        let err = Scenario::from_toml(&text, None).unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid(_)), "{err}");
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let text = format!("{}\nbogus = 1\n", BUNDLED[0].1);
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(ScenarioError::Parse(_))));
        let text = BUNDLED[0].1.replacen("schema_version = 1", "schema_version = 2", 1);
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn percent_squared_kernel_is_scaled() {
        let s = Scenario::bundled("aerocapture").unwrap();
        let var = s.field.eval_cov(&[150e3], &[150e3]).unwrap();
        assert!((var - 0.148).abs() < 1e-12, "{var}");
    }

    #[test]
    fn aerocapture_shaper_linearizes_both_delta_v_branches() {
        let s = Scenario::bundled("aerocapture").unwrap();
        let nominal = crate::nominal::propagate_nominal(
            &s.model,
            &s.field,
            &s.problem.x0_mean,
            &s.problem.initial_controls,
            &s.problem.partition,
        )
        .unwrap();
        let spec = s.shaper.shape(&nominal).unwrap();
        let p = spec.objective.percentile.as_ref().unwrap();
        let x_f = nominal.final_state();
        let target = target_orbit(s.model.aerocapture().unwrap());
        let dv = delta_v(&ExitState::from_state(x_f), &target).unwrap();
        // the larger branch reproduces Δv(x̂_f)
        let top = p
            .terms
            .iter()
            .map(|t| t.direction.dot(x_f) + t.offset)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p.terms.len(), 2);
        assert!((top - dv).abs() < 1e-6 * dv);
        assert_eq!(spec.objective.state_weights.len(), s.problem.partition.knots.len());
        let trust = spec.trust.unwrap();
        assert_eq!(trust.state_weights.len(), s.problem.partition.knots.len());
        assert_eq!(trust.state_weights[0].amax(), 0.0);
        assert!(trust.state_weights.last().unwrap().amax() > 0.0);
        assert_eq!(s.chance().len(), 2 * s.problem.partition.segments());
    }
}
