//! Successive convexification: propagate, linearize, discretize, solve the
//! steering subproblem, move the nominal control, repeat.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{assemble_blocks, BlockError, BlockSteeringData};
use crate::conic::{SolveStatus, SolverAdapter};
use crate::discretize::{discretize, DiscreteLtvProblem, DiscretizeError, DEFAULT_QUAD_NODES};
use crate::dynamics::SystemModel;
use crate::grf::GaussianRandomField;
use crate::linalg::{Mat, Vector};
use crate::nominal::{propagate_nominal, NominalTrajectory, PropagationError, TimePartition};
use crate::policy::FeedbackPolicy;
use crate::stats::gaussian_quantile;
use crate::subproblem::{
    build_program, solve_program, ChanceConstraintSpec, SteeringObjective, SubproblemError,
    SubproblemSolution, TerminalConstraint, TrustRegion,
};

#[derive(Debug, Error)]
pub enum ScpError {
    #[error("invalid SCP configuration: {0}")]
    Config(String),
    #[error("nominal propagation: {0}")]
    Propagation(#[from] PropagationError),
    #[error("discretization: {0}")]
    Discretize(#[from] DiscretizeError),
    #[error("block assembly: {0}")]
    Blocks(#[from] BlockError),
    #[error("iteration {iteration}: {source}")]
    Subproblem {
        iteration: usize,
        source: SubproblemError,
    },
    #[error("shaping the subproblem: {0}")]
    Shaper(String),
}

impl ScpError {
    /// True when the failure is an infeasible or unbounded subproblem.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            ScpError::Subproblem {
                source: SubproblemError::Solver {
                    status: SolveStatus::Infeasible | SolveStatus::Unbounded,
                    ..
                },
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScpConfig {
    pub max_iterations: usize,
    /// Stop once `|J_i − J_{i−1}| < tol · max(|J_{i−1}|, 1e-12)`.
    pub relative_tolerance: f64,
    pub quadrature_nodes: usize,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            relative_tolerance: 1e-3,
            quadrature_nodes: DEFAULT_QUAD_NODES,
        }
    }
}

impl ScpConfig {
    pub fn validate(&self) -> Result<(), ScpError> {
        if self.max_iterations == 0 {
            return Err(ScpError::Config("max_iterations must be at least 1".into()));
        }
        if !(self.relative_tolerance > 0.0) {
            return Err(ScpError::Config("relative_tolerance must be positive".into()));
        }
        if self.quadrature_nodes == 0 {
            return Err(ScpError::Config("quadrature_nodes must be positive".into()));
        }
        Ok(())
    }
}

/// Problem data for one SCP iteration, derived from the current nominal.
#[derive(Debug, Clone)]
pub struct SubproblemSpec {
    pub objective: SteeringObjective,
    pub chance: Vec<ChanceConstraintSpec>,
    pub terminal: TerminalConstraint,
    pub trust: Option<TrustRegion>,
    /// Added to the subproblem optimum when reporting the iteration objective,
    /// e.g. the constant of a linearized terminal functional.
    pub objective_offset: f64,
}

/// Supplies objective, constraints and trust region for a given nominal.
pub trait SubproblemShaper: Sync {
    fn shape(&self, nominal: &NominalTrajectory) -> Result<SubproblemSpec, ScpError>;
}

/// Trust-region weights and radii without the nominal they are centred on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrustSettings {
    pub control_weights: Vec<Mat>,
    pub control_radius: f64,
    pub state_weights: Vec<Mat>,
    pub state_radius: f64,
}

impl TrustSettings {
    pub fn is_empty(&self) -> bool {
        self.control_weights.is_empty() && self.state_weights.is_empty()
    }

    pub fn around(&self, nominal: &NominalTrajectory) -> Option<TrustRegion> {
        (!self.is_empty()).then(|| TrustRegion {
            nominal_states: nominal.knot_states(),
            nominal_controls: nominal.controls.clone(),
            control_weights: self.control_weights.clone(),
            control_radius: self.control_radius,
            state_weights: self.state_weights.clone(),
            state_radius: self.state_radius,
        })
    }
}

/// Shaper whose objective and constraints do not depend on the nominal.
#[derive(Debug, Clone)]
pub struct StaticShaper {
    pub objective: SteeringObjective,
    pub chance: Vec<ChanceConstraintSpec>,
    pub terminal: TerminalConstraint,
    pub trust: TrustSettings,
}

impl SubproblemShaper for StaticShaper {
    fn shape(&self, nominal: &NominalTrajectory) -> Result<SubproblemSpec, ScpError> {
        Ok(SubproblemSpec {
            objective: self.objective.clone(),
            chance: self.chance.clone(),
            terminal: self.terminal.clone(),
            trust: self.trust.around(nominal),
            objective_offset: 0.0,
        })
    }
}

/// Initial distribution, partition and starting controls.
#[derive(Debug, Clone)]
pub struct SteeringProblem {
    pub partition: TimePartition,
    pub x0_mean: Vector,
    pub p0: Mat,
    pub initial_controls: Vec<Vector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScpTermination {
    Converged,
    MaxIterations,
    /// A later subproblem or propagation failed; the last good policy is kept.
    Halted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScpIterationRecord {
    pub iteration: usize,
    pub status: SolveStatus,
    /// Subproblem optimum plus the shaper's offset.
    pub objective: f64,
    pub worst_violation: f64,
    pub worst_constraint: Option<String>,
    /// `‖V − Û‖₂` between the solved feedforward and the iteration's nominal.
    pub control_change: f64,
    /// `max_k ‖x̂_k − x̄_k‖_∞` after re-propagating with the new nominal control.
    pub nominal_gap: Option<f64>,
    pub solver_iterations: u32,
    pub solve_time: f64,
    pub wall_time: f64,
    pub aux: Vec<(String, f64)>,
    /// Percentile objective `η max_i(ξ_iᵀx̄_N + c_i + Φ⁻¹(1−p)√(ξ_iᵀP_Nξ_i))`
    /// plus the shaper's offset, from this iteration's linear-covariance
    /// prediction.
    #[serde(default)]
    pub surrogate: Option<f64>,
}

/// Everything produced by the final successful iteration.
#[derive(Debug, Clone)]
pub struct ScpResult {
    pub policy: FeedbackPolicy,
    pub records: Vec<ScpIterationRecord>,
    pub termination: ScpTermination,
    /// Nominal trajectory the final policy was linearized about.
    pub nominal: NominalTrajectory,
    pub ltv: DiscreteLtvProblem,
    pub blocks: BlockSteeringData,
    pub solution: SubproblemSolution,
}

/// Builds the feedback policy from a subproblem solution.
pub fn extract_policy(partition: &TimePartition, sol: &SubproblemSolution, n: usize, m: usize) -> FeedbackPolicy {
    FeedbackPolicy::from_stacked(&partition.knots, &sol.k, &sol.v, &sol.mean_states, n, m)
}

fn percentile_surrogate(
    spec: &SubproblemSpec,
    blocks: &BlockSteeringData,
    sol: &SubproblemSolution,
) -> Result<Option<f64>, ScpError> {
    let Some(p) = &spec.objective.percentile else {
        return Ok(None);
    };
    let big_n = blocks.horizon;
    let q = gaussian_quantile(1.0 - p.probability).map_err(|e| ScpError::Shaper(e.to_string()))?;
    let cov = blocks.state_covariance(&sol.l);
    let e_n = blocks.state_selector(big_n);
    let value = p
        .terms
        .iter()
        .map(|term| {
            let xi_sel = term.direction.transpose() * &e_n;
            let mean = (&xi_sel * &sol.mean_states)[0] + term.offset;
            let spread = (&xi_sel * &cov * xi_sel.transpose())[0].max(0.0).sqrt();
            mean + q * spread
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(p.weight * value + spec.objective_offset))
}

fn split_controls(v: &Vector, big_n: usize, m: usize) -> Vec<Vector> {
    (0..big_n).map(|k| v.rows(k * m, m).into_owned()).collect()
}

/// Runs the SCP loop.
pub fn run_scp<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    problem: &SteeringProblem,
    shaper: &dyn SubproblemShaper,
    adapter: &dyn SolverAdapter,
    config: &ScpConfig,
) -> Result<ScpResult, ScpError> {
    config.validate()?;
    let (n, m) = (model.state_dim(), model.control_dim());
    let big_n = problem.partition.segments();
    let mut nominal = propagate_nominal(model, field, &problem.x0_mean, &problem.initial_controls, &problem.partition)?;
    let mut records: Vec<ScpIterationRecord> = Vec::new();
    let mut best: Option<(FeedbackPolicy, NominalTrajectory, DiscreteLtvProblem, BlockSteeringData, SubproblemSolution)> =
        None;
    let mut termination = ScpTermination::MaxIterations;

    for iteration in 1..=config.max_iterations {
        let started = Instant::now();
        let attempt = (|| -> Result<_, ScpError> {
            let ltv = discretize(model, field, &nominal, config.quadrature_nodes)?;
            let blocks = assemble_blocks(&ltv, &problem.x0_mean, &problem.p0)?;
            let spec = shaper.shape(&nominal)?;
            let wrap = |source| ScpError::Subproblem { iteration, source };
            let program = build_program(&blocks, &spec.objective, &spec.chance, &spec.terminal, spec.trust.as_ref())
                .map_err(wrap)?;
            let sol = solve_program(adapter, &program, &blocks).map_err(wrap)?;
            Ok((ltv, blocks, spec, sol))
        })();
        let (ltv, blocks, spec, sol) = match attempt {
            Ok(v) => v,
            Err(e) if best.is_some() => {
                log::warn!("SCP halted at iteration {iteration}, keeping the previous policy: {e}");
                termination = ScpTermination::Halted;
                break;
            }
            Err(e) => return Err(e),
        };

        let new_controls = split_controls(&sol.v, big_n, m);
        let u_hat = Vector::from_iterator(big_n * m, nominal.controls.iter().flat_map(|u| u.iter().copied()));
        let control_change = (&sol.v - &u_hat).norm();
        let next = propagate_nominal(model, field, &problem.x0_mean, &new_controls, &problem.partition);
        let nominal_gap = next.as_ref().ok().map(|tr| {
            (0..=big_n)
                .map(|k| (tr.knot_state(k) - sol.mean_states.rows(k * n, n)).amax())
                .fold(0.0, f64::max)
        });
        let objective = sol.objective + spec.objective_offset;
        log::info!(
            "SCP iteration {iteration}: objective {objective:.6e}, worst violation {:.2e}, |Δu| {control_change:.3e}",
            sol.worst_violation
        );
        records.push(ScpIterationRecord {
            iteration,
            status: SolveStatus::Optimal,
            objective,
            worst_violation: sol.worst_violation,
            worst_constraint: sol.worst_constraint.clone(),
            control_change,
            nominal_gap,
            solver_iterations: sol.iterations,
            solve_time: sol.solve_time,
            wall_time: started.elapsed().as_secs_f64(),
            aux: sol.aux.clone(),
            surrogate: percentile_surrogate(&spec, &blocks, &sol)?,
        });
        let policy = extract_policy(&problem.partition, &sol, n, m);
        best = Some((policy, nominal.clone(), ltv, blocks, sol));

        let converged = records.len() >= 2 && {
            let prev = records[records.len() - 2].objective;
            (objective - prev).abs() < config.relative_tolerance * prev.abs().max(1e-12)
        };
        if converged {
            termination = ScpTermination::Converged;
            break;
        }
        if iteration == config.max_iterations {
            break;
        }
        match next {
            Ok(tr) => nominal = tr,
            Err(e) => {
                log::warn!("SCP halted: propagating the updated nominal failed: {e}");
                termination = ScpTermination::Halted;
                break;
            }
        }
    }

    let (policy, nominal, ltv, blocks, solution) = best.expect("at least one successful iteration");
    Ok(ScpResult {
        policy,
        records,
        termination,
        nominal,
        ltv,
        blocks,
        solution,
    })
}

/// Iteration records as JSON lines.
pub fn records_to_jsonl(records: &[ScpIterationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelAdapter;
    use crate::dynamics::DoubleIntegrator;
    use crate::grf::KernelSpec;

    fn di_setup() -> (GaussianRandomField, SteeringProblem, StaticShaper) {
        let field = GaussianRandomField::new(KernelSpec::Constant { variance: 1e-4 }, 0.0, 1).unwrap();
        let partition = TimePartition::new((0..=5).map(f64::from).collect(), 10).unwrap();
        let problem = SteeringProblem {
            partition,
            x0_mean: Vector::from_vec(vec![0.1, 0.1]),
            p0: Mat::from_diagonal(&Vector::from_vec(vec![1e-4, 1e-5])),
            initial_controls: vec![Vector::zeros(1); 5],
        };
        let mut objective = SteeringObjective::empty();
        objective.control_weights = vec![Mat::identity(1, 1); 5];
        objective.feedforward_weights = vec![Mat::identity(1, 1); 5];
        let shaper = StaticShaper {
            objective,
            chance: vec![],
            terminal: TerminalConstraint {
                mean: Some(Vector::from_vec(vec![0.6, 0.1])),
                covariance: Some(Mat::identity(2, 2) * 1e-3),
            },
            trust: TrustSettings::default(),
        };
        (field, problem, shaper)
    }

    #[test]
    fn linear_model_reaches_fixed_point_immediately() {
        let (field, problem, shaper) = di_setup();
        let cfg = ScpConfig {
            max_iterations: 2,
            relative_tolerance: 1e-12,
            ..ScpConfig::default()
        };
        let res = run_scp(&DoubleIntegrator, &field, &problem, &shaper, &ClarabelAdapter::default(), &cfg).unwrap();
        assert_eq!(res.records.len(), 2);
        let (a, b) = (res.records[0].objective, res.records[1].objective);
        assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
        assert!(res.records[0].nominal_gap.unwrap() < 1e-9);
    }

    #[test]
    fn records_serialize_as_json_lines() {
        let (field, problem, shaper) = di_setup();
        let cfg = ScpConfig {
            max_iterations: 1,
            ..ScpConfig::default()
        };
        let res = run_scp(&DoubleIntegrator, &field, &problem, &shaper, &ClarabelAdapter::default(), &cfg).unwrap();
        let text = records_to_jsonl(&res.records);
        assert_eq!(text.lines().count(), 1);
        let back: ScpIterationRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, res.records[0]);
        assert_eq!(res.policy.gains.len(), 15);
    }

    #[test]
    fn infeasible_first_iteration_is_an_error() {
        // One step: Cov(x₁) ⪰ Cov(w₀) no matter the gain.
        let (field, mut problem, mut shaper) = di_setup();
        problem.partition = TimePartition::new(vec![0.0, 1.0], 10).unwrap();
        problem.initial_controls.truncate(1);
        shaper.objective.control_weights.truncate(1);
        shaper.objective.feedforward_weights.truncate(1);
        shaper.terminal.covariance = Some(Mat::identity(2, 2) * 1e-14);
        let err = run_scp(&DoubleIntegrator, &field, &problem, &shaper, &ClarabelAdapter::default(), &ScpConfig::default())
            .unwrap_err();
        assert!(err.is_infeasible(), "{err}");
    }
}
