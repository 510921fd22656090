//! Discrete LTV model `x_{k+1} = A_k x_k + B_k u_k + c_k + w_k` about a
//! nominal trajectory, with the jointly Gaussian field-induced disturbances
//! `w_k` obtained by Gauss–Legendre quadrature.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{ModelError, SystemModel};
use crate::grf::{GaussianRandomField, GrfError};
use crate::linalg::{repair_psd, LinalgError, Mat, Vector};
use crate::nominal::{propagate_stm, NominalTrajectory, PropagationError};

/// Default Gauss–Legendre node count per segment.
pub const DEFAULT_QUAD_NODES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error("linearization at t = {time:.6}: {source}")]
    Model { time: f64, source: ModelError },
    #[error("state-transition matrix is singular at t = {0:.6}")]
    SingularStm(f64),
    #[error(transparent)]
    Field(#[from] GrfError),
    #[error("disturbance covariance: {0}")]
    Covariance(#[from] LinalgError),
}

/// Quadrature node of a segment with its disturbance influence vector
/// `Φ(t_{k+1}, t) G(t)`.
#[derive(Debug, Clone)]
pub struct InfluenceNode {
    pub t: f64,
    pub weight: f64,
    pub influence: Vector,
    pub index_point: Vec<f64>,
    pub field_mean: f64,
}

/// Everything the discrete model needs from one segment.
#[derive(Debug, Clone)]
pub struct SegmentLinearization {
    pub segment: usize,
    pub a: Mat,
    pub b: Mat,
    pub c: Vector,
    pub nodes: Vec<InfluenceNode>,
}

/// Linearizes segment `k` of `trajectory` and forms the deterministic integrals.
pub fn linearize_segment<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    trajectory: &NominalTrajectory,
    k: usize,
    quad_nodes: usize,
) -> Result<SegmentLinearization, DiscretizeError> {
    let stm = propagate_stm(model, field, trajectory, k, quad_nodes)?;
    let n = model.state_dim();
    let m = model.control_dim();
    let u = &trajectory.controls[k];
    let mut b = Mat::zeros(n, m);
    let mut c = Vector::zeros(n);
    let mut nodes = Vec::with_capacity(stm.nodes.len());
    for node in &stm.nodes {
        let wrap = |source| DiscretizeError::Model { time: node.t, source };
        let jac = model.jacobians(&node.state, u, node.field_mean).map_err(wrap)?;
        let f = model.dynamics(&node.state, u, node.field_mean).map_err(wrap)?;
        let c_t = f - &jac.a * &node.state - &jac.b * u - &jac.g * node.field_mean;
        let inv = node
            .phi
            .clone()
            .try_inverse()
            .ok_or(DiscretizeError::SingularStm(node.t))?;
        // Φ(t_{k+1}, t) = Φ(t_{k+1}, t_k) Φ(t, t_k)⁻¹
        let phi_to_end = &stm.phi_end * inv;
        b += &phi_to_end * &jac.b * node.weight;
        c += &phi_to_end * c_t * node.weight;
        nodes.push(InfluenceNode {
            t: node.t,
            weight: node.weight,
            influence: &phi_to_end * &jac.g,
            index_point: node.index_point.clone(),
            field_mean: node.field_mean,
        });
    }
    Ok(SegmentLinearization {
        segment: k,
        a: stm.phi_end,
        b,
        c,
        nodes,
    })
}

/// `(A_k, B_k, c_k)` of a linearized segment.
pub fn discretize_segment(seg: &SegmentLinearization) -> (Mat, Mat, Vector) {
    (seg.a.clone(), seg.b.clone(), seg.c.clone())
}

/// `E(w_k) = ∫ Φ(t_{k+1}, t) G(t) μ̂(t) dt`.
pub fn disturbance_mean(seg: &SegmentLinearization) -> Vector {
    let n = seg.a.nrows();
    seg.nodes
        .iter()
        .fold(Vector::zeros(n), |acc, nd| acc + &nd.influence * (nd.weight * nd.field_mean))
}

/// `Cov(w_k, w_ℓ)` by tensor-product quadrature of the double integral.
pub fn disturbance_covariance(
    field: &GaussianRandomField,
    seg_k: &SegmentLinearization,
    seg_l: &SegmentLinearization,
) -> Result<Mat, DiscretizeError> {
    let n = seg_k.a.nrows();
    let mut cov = Mat::zeros(n, n);
    for p in &seg_k.nodes {
        for q in &seg_l.nodes {
            let s = field.eval_cov(&p.index_point, &q.index_point)?;
            cov += &p.influence * q.influence.transpose() * (p.weight * q.weight * s);
        }
    }
    Ok(cov)
}

/// Discrete LTV model over all segments plus stacked disturbance statistics.
#[derive(Debug, Clone)]
pub struct DiscreteLtvProblem {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub c: Vec<Vector>,
    /// Stacked `E(w_k)`, length `N n`.
    pub disturbance_mean: Vector,
    /// `Cov(W)`, `N n × N n`, PSD-repaired.
    pub disturbance_cov: Mat,
    pub quad_nodes: usize,
    /// Relative Frobenius mass added by the PSD repair of `Cov(W)`.
    pub repair_fraction: f64,
    pub segments: Vec<SegmentLinearization>,
}

impl DiscreteLtvProblem {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    /// Block `(k, ℓ)` of `Cov(W)`.
    pub fn cov_block(&self, k: usize, l: usize) -> Mat {
        let n = self.state_dim();
        self.disturbance_cov.view((k * n, l * n), (n, n)).into_owned()
    }
}

/// Builds the full discrete model about `trajectory`.
pub fn discretize<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    trajectory: &NominalTrajectory,
    quad_nodes: usize,
) -> Result<DiscreteLtvProblem, DiscretizeError> {
    let big_n = trajectory.partition.segments();
    let n = model.state_dim();
    let segments: Vec<SegmentLinearization> = (0..big_n)
        .into_par_iter()
        .map(|k| linearize_segment(model, field, trajectory, k, quad_nodes))
        .collect::<Result<_, _>>()?;

    let mut mean = Vector::zeros(big_n * n);
    for (k, seg) in segments.iter().enumerate() {
        mean.rows_mut(k * n, n).copy_from(&disturbance_mean(seg));
    }

    // Cov(W) = H Σ Hᵀ with Σ the Gram matrix over every quadrature node and
    // H the block-diagonal stack of weighted influence vectors.
    let all_nodes: Vec<&InfluenceNode> = segments.iter().flat_map(|s| s.nodes.iter()).collect();
    let points: Vec<&[f64]> = all_nodes.iter().map(|nd| nd.index_point.as_slice()).collect();
    let gram = field.raw_gram(&points)?;
    let mut h = Mat::zeros(big_n * n, all_nodes.len());
    let mut col = 0;
    for (k, seg) in segments.iter().enumerate() {
        for nd in &seg.nodes {
            h.view_mut((k * n, col), (n, 1)).copy_from(&(&nd.influence * nd.weight));
            col += 1;
        }
    }
    let raw = &h * gram * h.transpose();
    let repaired = repair_psd(&raw)?;

    Ok(DiscreteLtvProblem {
        a: segments.iter().map(|s| s.a.clone()).collect(),
        b: segments.iter().map(|s| s.b.clone()).collect(),
        c: segments.iter().map(|s| s.c.clone()).collect(),
        disturbance_mean: mean,
        disturbance_cov: repaired.matrix,
        quad_nodes,
        repair_fraction: repaired.removed_fraction,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DoubleIntegrator;
    use crate::grf::KernelSpec;
    use crate::nominal::{propagate_nominal, TimePartition};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn setup(field: &GaussianRandomField, controls: &[f64]) -> NominalTrajectory {
        let knots: Vec<f64> = (0..=controls.len()).map(|k| k as f64).collect();
        let p = TimePartition::new(knots, 10).unwrap();
        let u: Vec<Vector> = controls.iter().map(|&c| v(&[c])).collect();
        propagate_nominal(&DoubleIntegrator, field, &v(&[0.1, 0.1]), &u, &p).unwrap()
    }

    #[test]
    fn double_integrator_unit_step_matrices() {
        let field = GaussianRandomField::new(KernelSpec::Constant { variance: 0.0 }, 0.0, 1).unwrap();
        let tr = setup(&field, &[0.3, -0.2, 0.0]);
        let ltv = discretize(&DoubleIntegrator, &field, &tr, 8).unwrap();
        for k in 0..3 {
            assert!((&ltv.a[k] - Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).abs().max() < 1e-12);
            assert!((&ltv.b[k] - Mat::from_row_slice(2, 1, &[0.5, 1.0])).abs().max() < 1e-12);
            let pred = &ltv.a[k] * tr.knot_state(k) + &ltv.b[k] * &tr.controls[k] + &ltv.c[k]
                + ltv.disturbance_mean.rows(2 * k, 2);
            assert!((pred - tr.knot_state(k + 1)).abs().max() < 1e-9);
        }
        assert_eq!(ltv.disturbance_mean, Vector::zeros(6));
    }

    #[test]
    fn constant_field_mean_gives_closed_form_disturbance_mean() {
        let field = GaussianRandomField::new(KernelSpec::Constant { variance: 0.0 }, 1.0, 1).unwrap();
        let tr = setup(&field, &[0.0]);
        let seg = linearize_segment(&DoubleIntegrator, &field, &tr, 0, 8).unwrap();
        let w = disturbance_mean(&seg);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_kernel_covariance_blocks() {
        let s2 = 3.0;
        let field = GaussianRandomField::new(KernelSpec::Constant { variance: s2 }, 0.0, 1).unwrap();
        let tr = setup(&field, &[0.0, 0.0, 0.0]);
        let ltv = discretize(&DoubleIntegrator, &field, &tr, 8).unwrap();
        // ∫₀¹ Φ(1, t) G dt = [1/2, 1]ᵀ on each unit segment.
        let g = v(&[0.5, 1.0]);
        let expect = &g * g.transpose() * s2;
        for k in 0..3 {
            for l in 0..3 {
                // The PSD repair lifts the null space by 1e-12 λ_max.
                assert!((ltv.cov_block(k, l) - &expect).abs().max() < 1e-9 * expect.abs().max());
            }
        }
    }

    #[test]
    fn block_symmetry() {
        let field = GaussianRandomField::new(
            KernelSpec::LocallyPeriodic {
                variance: 2e-6,
                period: 0.35,
                periodic_length_scale: 0.8,
                exponential_length_scale: 1.0,
            },
            0.0,
            1,
        )
        .unwrap();
        let tr = setup(&field, &[0.1, 0.0, -0.1]);
        let segs: Vec<_> = (0..3)
            .map(|k| linearize_segment(&DoubleIntegrator, &field, &tr, k, 8).unwrap())
            .collect();
        for k in 0..3 {
            for l in 0..3 {
                let a = disturbance_covariance(&field, &segs[k], &segs[l]).unwrap();
                let b = disturbance_covariance(&field, &segs[l], &segs[k]).unwrap();
                assert!((a - b.transpose()).abs().max() <= 1e-12 * 2e-6);
            }
        }
    }
}
