//! Linear-covariance predictions for a feedback policy: knot means and
//! covariances from the stacked closed-loop model, and the field standard
//! deviation along the nominal.

use serde::{Deserialize, Serialize};

use crate::blocks::{assemble_blocks, l_from_gains, BlockSteeringData};
use crate::dynamics::SystemModel;
use crate::grf::GaussianRandomField;
use crate::linalg::{mat_to_rows, Mat, Vector};
use crate::nominal::{propagate_nominal, NominalTrajectory};
use crate::policy::FeedbackPolicy;
use crate::scp::ScpError;
use crate::discretize::discretize;
use crate::nominal::TimePartition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinCovPrediction {
    pub knots: Vec<f64>,
    pub state_mean: Vec<Vec<f64>>,
    pub state_cov: Vec<Vec<Vec<f64>>>,
    pub control_mean: Vec<Vec<f64>>,
    pub control_cov: Vec<Vec<Vec<f64>>>,
    /// `√Σ̂(t_k, t_k)` at the nominal knot states.
    pub field_std: Vec<f64>,
    /// `μ̂(t_k)` at the nominal knot states.
    pub field_mean: Vec<f64>,
}

impl LinCovPrediction {
    /// Prediction for stacked gain `L` and feedforward `V` on assembled blocks.
    pub fn from_blocks<M: SystemModel + ?Sized>(
        model: &M,
        field: &GaussianRandomField,
        blocks: &BlockSteeringData,
        nominal: &NominalTrajectory,
        l: &Mat,
        v: &Vector,
    ) -> Self {
        let (big_n, n, m) = (blocks.horizon, blocks.state_dim, blocks.control_dim);
        let x_bar = blocks.mean_states(v);
        let cov_x = blocks.state_covariance(l);
        let cov_u = blocks.control_covariance(l);
        let field_std = nominal
            .knot_states()
            .iter()
            .map(|x| {
                let z = model.index_point(x);
                field.eval_cov(&z, &z).unwrap_or(0.0).max(0.0).sqrt()
            })
            .collect();
        let field_mean = nominal
            .knot_states()
            .iter()
            .map(|x| field.mean_at(&model.index_point(x)))
            .collect();
        Self {
            knots: nominal.partition.knots.clone(),
            state_mean: (0..=big_n).map(|k| x_bar.rows(k * n, n).iter().copied().collect()).collect(),
            state_cov: (0..=big_n)
                .map(|k| mat_to_rows(&cov_x.view((k * n, k * n), (n, n)).into_owned()))
                .collect(),
            control_mean: (0..big_n).map(|k| v.rows(k * m, m).iter().copied().collect()).collect(),
            control_cov: (0..big_n)
                .map(|k| mat_to_rows(&cov_u.view((k * m, k * m), (m, m)).into_owned()))
                .collect(),
            field_std,
            field_mean,
        }
    }
}

/// Linear-covariance analysis of `policy` about the nominal obtained by
/// flying its feedforward controls.
pub fn predict_policy<M: SystemModel + ?Sized>(
    model: &M,
    field: &GaussianRandomField,
    policy: &FeedbackPolicy,
    partition: &TimePartition,
    x0_mean: &Vector,
    p0: &Mat,
    quad_nodes: usize,
) -> Result<LinCovPrediction, ScpError> {
    let m = policy.control_dim;
    let controls: Vec<Vector> = policy.feedforward.iter().map(|u| Vector::from_column_slice(u)).collect();
    let nominal = propagate_nominal(model, field, x0_mean, &controls, partition)?;
    let ltv = discretize(model, field, &nominal, quad_nodes)?;
    let blocks = assemble_blocks(&ltv, x0_mean, p0)?;
    let l = l_from_gains(&policy.stacked_gain(), &blocks.b)?;
    let v = Vector::from_iterator(partition.segments() * m, controls.iter().flat_map(|u| u.iter().copied()));
    Ok(LinCovPrediction::from_blocks(model, field, &blocks, &nominal, &l, &v))
}
