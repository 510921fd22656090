//! Deterministic nominal trajectory (field fixed at its mean) and the
//! state-transition matrices of the dynamics linearized about it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ModelError, SystemModel};
use crate::grf::GaussianRandomField;
use crate::linalg::{Mat, Vector};
use crate::quadrature::gauss_legendre_on;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("model failure at t = {time:.6}: {source}")]
    Model { time: f64, source: ModelError },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("expected {expected} controls of dimension {dim}, got {got}")]
    Controls {
        expected: usize,
        dim: usize,
        got: usize,
    },
    #[error("initial state has dimension {got}, model expects {expected}")]
    InitialState { expected: usize, got: usize },
    #[error("segment {0} out of range")]
    Segment(usize),
}

/// Decision times `t₀ < … < t_N` with a fixed number of RK4 steps per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimePartition {
    pub knots: Vec<f64>,
    pub substeps: usize,
}

impl TimePartition {
    pub fn new(knots: Vec<f64>, substeps: usize) -> Result<Self, PropagationError> {
        let p = Self { knots, substeps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        if self.knots.len() < 2 {
            return Err(PropagationError::Partition("need at least two knots".into()));
        }
        if self.knots.iter().any(|t| !t.is_finite()) || self.knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PropagationError::Partition(
                "knots must be finite and strictly increasing".into(),
            ));
        }
        if self.substeps == 0 {
            return Err(PropagationError::Partition("substeps must be positive".into()));
        }
        Ok(())
    }

    /// Number of segments `N`.
    pub fn segments(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn segment_bounds(&self, k: usize) -> (f64, f64) {
        (self.knots[k], self.knots[k + 1])
    }

    pub fn step(&self, k: usize) -> f64 {
        (self.knots[k + 1] - self.knots[k]) / self.substeps as f64
    }

    pub fn final_time(&self) -> f64 {
        *self.knots.last().expect("validated partition")
    }
}

/// Nominal states on the dense RK4 grid.
#[derive(Debug, Clone)]
pub struct NominalTrajectory {
    pub partition: TimePartition,
    pub controls: Vec<Vector>,
    /// Dense grid; knot `k` sits at index `k * substeps`.
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// Field mean `μ(φ(x̂))` on the dense grid.
    pub field_mean: Vec<f64>,
}

impl NominalTrajectory {
    pub fn knot_state(&self, k: usize) -> &Vector {
        &self.states[k * self.partition.substeps]
    }

    pub fn knot_states(&self) -> Vec<Vector> {
        (0..=self.partition.segments()).map(|k| self.knot_state(k).clone()).collect()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("non-empty trajectory")
    }
}

fn mean_field_rhs<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    x: &Vector,
    u: &Vector,
    t: f64,
) -> Result<Vector, PropagationError> {
    let psi = field.mean_at(&model.index_point(x));
    model
        .dynamics(x, u, psi)
        .map_err(|source| PropagationError::Model { time: t, source })
}

/// Classical RK4 step of `ẋ = f(x, u, μ(φ(x)))`.
fn rk4_step<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    x: &Vector,
    u: &Vector,
    t: f64,
    h: f64,
) -> Result<Vector, PropagationError> {
    let k1 = mean_field_rhs(model, field, x, u, t)?;
    let k2 = mean_field_rhs(model, field, &(x + &k1 * (0.5 * h)), u, t + 0.5 * h)?;
    let k3 = mean_field_rhs(model, field, &(x + &k2 * (0.5 * h)), u, t + 0.5 * h)?;
    let k4 = mean_field_rhs(model, field, &(x + &k3 * h), u, t + h)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn check_controls<M: SystemModel + ?Sized>(
    model: &M,
    controls: &[Vector],
    partition: &TimePartition,
) -> Result<(), PropagationError> {
    let m = model.control_dim();
    if controls.len() != partition.segments() || controls.iter().any(|u| u.len() != m) {
        return Err(PropagationError::Controls {
            expected: partition.segments(),
            dim: m,
            got: controls.len(),
        });
    }
    Ok(())
}

/// Propagates the mean-field system from `x0` under piecewise-constant controls.
pub fn propagate_nominal<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    x0: &Vector,
    controls: &[Vector],
    partition: &TimePartition,
) -> Result<NominalTrajectory, PropagationError> {
    partition.validate()?;
    check_controls(model, controls, partition)?;
    if x0.len() != model.state_dim() {
        return Err(PropagationError::InitialState {
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    let sub = partition.substeps;
    let total = partition.segments() * sub + 1;
    let mut times = Vec::with_capacity(total);
    let mut states = Vec::with_capacity(total);
    times.push(partition.knots[0]);
    states.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let (t0, t1) = partition.segment_bounds(k);
        let h = partition.step(k);
        for j in 0..sub {
            let t = t0 + j as f64 * h;
            let x = rk4_step(model, field, states.last().unwrap(), u, t, h)?;
            states.push(x);
            times.push(if j + 1 == sub { t1 } else { t + h });
        }
    }
    let field_mean = states
        .iter()
        .map(|x| field.mean_at(&model.index_point(x)))
        .collect();
    Ok(NominalTrajectory {
        partition: partition.clone(),
        controls: controls.to_vec(),
        times,
        states,
        field_mean,
    })
}

/// Linearization data at one quadrature node of a segment.
#[derive(Debug, Clone)]
pub struct StmNode {
    pub t: f64,
    pub weight: f64,
    pub state: Vector,
    /// `Φ(t, t_k)`.
    pub phi: Mat,
    /// Field mean along the nominal at this node.
    pub field_mean: f64,
    pub index_point: Vec<f64>,
}

/// State-transition data over one segment.
#[derive(Debug, Clone)]
pub struct SegmentStm {
    pub segment: usize,
    /// `Φ(t_{k+1}, t_k)`.
    pub phi_end: Mat,
    pub nodes: Vec<StmNode>,
    /// `Φ(t, t_k)` on the segment's dense grid, including both ends.
    pub grid_phi: Vec<Mat>,
}

struct Augmented {
    x: Vector,
    phi: Mat,
}

fn augmented_rhs<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    s: &Augmented,
    u: &Vector,
    t: f64,
) -> Result<Augmented, PropagationError> {
    let psi = field.mean_at(&model.index_point(&s.x));
    let wrap = |source| PropagationError::Model { time: t, source };
    let dx = model.dynamics(&s.x, u, psi).map_err(wrap)?;
    let jac = model.jacobians(&s.x, u, psi).map_err(wrap)?;
    Ok(Augmented {
        x: dx,
        phi: jac.a * &s.phi,
    })
}

fn augmented_step<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    s: &Augmented,
    u: &Vector,
    t: f64,
    h: f64,
) -> Result<Augmented, PropagationError> {
    let shift = |d: &Augmented, c: f64| Augmented {
        x: &s.x + &d.x * c,
        phi: &s.phi + &d.phi * c,
    };
    let k1 = augmented_rhs(model, field, s, u, t)?;
    let k2 = augmented_rhs(model, field, &shift(&k1, 0.5 * h), u, t + 0.5 * h)?;
    let k3 = augmented_rhs(model, field, &shift(&k2, 0.5 * h), u, t + 0.5 * h)?;
    let k4 = augmented_rhs(model, field, &shift(&k3, h), u, t + h)?;
    Ok(Augmented {
        x: &s.x + (k1.x + k2.x * 2.0 + k3.x * 2.0 + k4.x) * (h / 6.0),
        phi: &s.phi + (k1.phi + k2.phi * 2.0 + k3.phi * 2.0 + k4.phi) * (h / 6.0),
    })
}

/// Integrates `Φ̇ = A(t) Φ`, `Φ(t_k, t_k) = I` over segment `k` alongside the
/// nominal state, and evaluates `Φ(t, t_k)` at `quad_nodes` Gauss–Legendre
/// nodes by a partial RK4 step from the preceding grid point.
pub fn propagate_stm<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    trajectory: &NominalTrajectory,
    k: usize,
    quad_nodes: usize,
) -> Result<SegmentStm, PropagationError> {
    let partition = &trajectory.partition;
    if k >= partition.segments() {
        return Err(PropagationError::Segment(k));
    }
    let n = model.state_dim();
    let sub = partition.substeps;
    let (t0, t1) = partition.segment_bounds(k);
    let h = partition.step(k);
    let u = &trajectory.controls[k];

    let mut grid = Vec::with_capacity(sub + 1);
    grid.push(Augmented {
        x: trajectory.knot_state(k).clone(),
        phi: Mat::identity(n, n),
    });
    for j in 0..sub {
        let t = t0 + j as f64 * h;
        let next = augmented_step(model, field, &grid[j], u, t, h)?;
        grid.push(next);
    }

    let (node_t, node_w) = gauss_legendre_on(quad_nodes, t0, t1);
    let mut nodes = Vec::with_capacity(quad_nodes);
    for (&t, &w) in node_t.iter().zip(&node_w) {
        let j = (((t - t0) / h).floor() as usize).min(sub - 1);
        let tj = t0 + j as f64 * h;
        let s = augmented_step(model, field, &grid[j], u, tj, t - tj)?;
        let index_point = model.index_point(&s.x);
        nodes.push(StmNode {
            t,
            weight: w,
            field_mean: field.mean_at(&index_point),
            index_point,
            state: s.x,
            phi: s.phi,
        });
    }
    let phi_end = grid[sub].phi.clone();
    Ok(SegmentStm {
        segment: k,
        phi_end,
        nodes,
        grid_phi: grid.into_iter().map(|g| g.phi).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DoubleIntegrator;
    use crate::grf::KernelSpec;

    fn zero_field() -> GaussianRandomField {
        GaussianRandomField::new(KernelSpec::Constant { variance: 0.0 }, 0.0, 1).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn partition_validation() {
        assert!(TimePartition::new(vec![0.0], 4).is_err());
        assert!(TimePartition::new(vec![0.0, 1.0, 1.0], 4).is_err());
        assert!(TimePartition::new(vec![0.0, 1.0], 0).is_err());
        let p = TimePartition::new(vec![0.0, 50.0, 75.0], 20).unwrap();
        assert_eq!(p.segments(), 2);
        assert_eq!(p.step(0), 2.5);
    }

    #[test]
    fn double_integrator_coasts_exactly() {
        let p = TimePartition::new((0..=5).map(f64::from).collect(), 10).unwrap();
        let controls = vec![v(&[0.0]); 5];
        let tr = propagate_nominal(&DoubleIntegrator, &zero_field(), &v(&[0.1, 0.1]), &controls, &p).unwrap();
        let xf = tr.final_state();
        assert!((xf[0] - 0.6).abs() < 1e-14 && (xf[1] - 0.1).abs() < 1e-15);
        assert_eq!(tr.times.len(), 51);
        assert_eq!(*tr.times.last().unwrap(), 5.0);
    }

    #[test]
    fn wrong_control_count_rejected() {
        let p = TimePartition::new(vec![0.0, 1.0, 2.0], 4).unwrap();
        let err = propagate_nominal(&DoubleIntegrator, &zero_field(), &v(&[0.0, 0.0]), &[v(&[0.0])], &p);
        assert!(matches!(err, Err(PropagationError::Controls { .. })));
    }

    #[test]
    fn double_integrator_stm_is_analytic() {
        let p = TimePartition::new(vec![0.0, 1.5, 4.0], 10).unwrap();
        let controls = vec![v(&[0.2]), v(&[-0.1])];
        let field = zero_field();
        let tr = propagate_nominal(&DoubleIntegrator, &field, &v(&[0.0, 1.0]), &controls, &p).unwrap();
        for k in 0..2 {
            let stm = propagate_stm(&DoubleIntegrator, &field, &tr, k, 8).unwrap();
            assert_eq!(stm.grid_phi[0], Mat::identity(2, 2));
            let (t0, t1) = p.segment_bounds(k);
            let expect = |dt: f64| Mat::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
            assert!((&stm.phi_end - expect(t1 - t0)).abs().max() < 1e-12);
            for node in &stm.nodes {
                assert!((&node.phi - expect(node.t - t0)).abs().max() < 1e-12);
            }
        }
    }
}
