//! Scalar Gaussian random fields: covariance kernels, Gram matrices, joint
//! sampling and sequential conditional sampling along a path.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{psd_factor, repair_psd, LinalgError, Mat};

/// Diagonal jitter (relative to the point variance) used by the sequential sampler.
pub const CONDITIONING_JITTER: f64 = 1e-10;
/// Points closer than this fraction of the kernel length scale reuse a previous draw.
pub const THINNING_FRACTION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrfError {
    #[error("index point has dimension {got}, field expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty point list")]
    NoPoints,
    #[error("invalid kernel parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("Gram matrix repair failed: {0}")]
    Repair(#[from] LinalgError),
    #[error("negative conditional variance {0:.3e}; kernel is ill-conditioned at this point set")]
    NegativeConditionalVariance(f64),
}

/// Covariance function of a scalar field over `R^d`.
///
/// Implement this for kernels outside the built-in [`KernelSpec`] registry.
pub trait CovarianceKernel: Send + Sync + fmt::Debug {
    fn covariance(&self, z1: &[f64], z2: &[f64]) -> f64;

    /// Distance over which correlation changes appreciably.
    fn length_scale(&self) -> f64;

    /// True when the field is a Markov process in a one-dimensional index,
    /// so conditioning on the nearest visited neighbours on each side is exact.
    fn is_markov_1d(&self) -> bool {
        false
    }
}

/// Built-in kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// Periodic kernel damped by a squared exponential.
    LocallyPeriodic {
        variance: f64,
        period: f64,
        periodic_length_scale: f64,
        exponential_length_scale: f64,
    },
    /// Altitude-dependent density-variation kernel: exponential correlation in
    /// altitude with a variance that decays exponentially below a transition
    /// altitude.
    MarsDensity {
        variance_max: f64,
        scale_height: f64,
        transition_altitude: f64,
        variance_scale_height: f64,
    },
    SquaredExponential { variance: f64, length_scale: f64 },
    Constant { variance: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), GrfError> {
        fn positive(name: &'static str, value: f64) -> Result<(), GrfError> {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(GrfError::InvalidParameter { name, value })
            }
        }
        match *self {
            KernelSpec::LocallyPeriodic {
                variance,
                period,
                periodic_length_scale,
                exponential_length_scale,
            } => {
                positive("variance", variance)?;
                positive("period", period)?;
                positive("periodic_length_scale", periodic_length_scale)?;
                positive("exponential_length_scale", exponential_length_scale)
            }
            KernelSpec::MarsDensity {
                variance_max,
                scale_height,
                transition_altitude,
                variance_scale_height,
            } => {
                positive("variance_max", variance_max)?;
                positive("scale_height", scale_height)?;
                positive("variance_scale_height", variance_scale_height)?;
                if transition_altitude.is_finite() {
                    Ok(())
                } else {
                    Err(GrfError::InvalidParameter {
                        name: "transition_altitude",
                        value: transition_altitude,
                    })
                }
            }
            KernelSpec::SquaredExponential {
                variance,
                length_scale,
            } => {
                positive("variance", variance)?;
                positive("length_scale", length_scale)
            }
            KernelSpec::Constant { variance } => {
                if variance >= 0.0 && variance.is_finite() {
                    Ok(())
                } else {
                    Err(GrfError::InvalidParameter {
                        name: "variance",
                        value: variance,
                    })
                }
            }
        }
    }

    /// Index dimension the kernel is defined on, if it is fixed.
    pub fn fixed_index_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::LocallyPeriodic { .. } | KernelSpec::MarsDensity { .. } => Some(1),
            _ => None,
        }
    }

    /// Largest point variance the kernel can produce.
    pub fn max_variance(&self) -> f64 {
        match *self {
            KernelSpec::LocallyPeriodic { variance, .. }
            | KernelSpec::SquaredExponential { variance, .. }
            | KernelSpec::Constant { variance } => variance,
            KernelSpec::MarsDensity { variance_max, .. } => variance_max,
        }
    }
}

fn sq_dist(z1: &[f64], z2: &[f64]) -> f64 {
    z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl CovarianceKernel for KernelSpec {
    fn covariance(&self, z1: &[f64], z2: &[f64]) -> f64 {
        match *self {
            KernelSpec::LocallyPeriodic {
                variance,
                period,
                periodic_length_scale,
                exponential_length_scale,
            } => {
                let d = (z1[0] - z2[0]).abs();
                let s = (PI * d / period).sin();
                variance
                    * (-2.0 * s * s / (periodic_length_scale * periodic_length_scale)).exp()
                    * (-d * d / (2.0 * exponential_length_scale * exponential_length_scale)).exp()
            }
            KernelSpec::MarsDensity {
                variance_max,
                scale_height,
                transition_altitude,
                variance_scale_height,
            } => {
                let (h1, h2) = (z1[0], z2[0]);
                let low = h1.min(h2);
                let var = if low < transition_altitude {
                    variance_max * ((low - transition_altitude) / variance_scale_height).exp()
                } else {
                    variance_max
                };
                (-(h1 - h2).abs() / scale_height).exp() * var
            }
            KernelSpec::SquaredExponential {
                variance,
                length_scale,
            } => variance * (-sq_dist(z1, z2) / (2.0 * length_scale * length_scale)).exp(),
            KernelSpec::Constant { variance } => variance,
        }
    }

    fn length_scale(&self) -> f64 {
        match *self {
            // Curvature of the kernel at zero lag.
            KernelSpec::LocallyPeriodic {
                period,
                periodic_length_scale,
                exponential_length_scale,
                ..
            } => {
                let per = 2.0 * PI / (period * periodic_length_scale);
                1.0 / (per * per + 1.0 / (exponential_length_scale * exponential_length_scale))
                    .sqrt()
            }
            KernelSpec::MarsDensity { scale_height, .. } => scale_height,
            KernelSpec::SquaredExponential { length_scale, .. } => length_scale,
            KernelSpec::Constant { .. } => f64::INFINITY,
        }
    }

    fn is_markov_1d(&self) -> bool {
        // cov = u(min) v(max) with u/v increasing: a time-changed Brownian motion.
        matches!(self, KernelSpec::MarsDensity { .. })
    }
}

type MeanFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Mean function plus covariance kernel over an index space of fixed dimension.
#[derive(Clone)]
pub struct GaussianRandomField {
    mean: Arc<MeanFn>,
    kernel: Arc<dyn CovarianceKernel>,
    index_dim: usize,
}

impl fmt::Debug for GaussianRandomField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianRandomField")
            .field("kernel", &self.kernel)
            .field("index_dim", &self.index_dim)
            .finish_non_exhaustive()
    }
}

impl GaussianRandomField {
    /// Field with a constant mean and a built-in kernel.
    pub fn new(kernel: KernelSpec, mean: f64, index_dim: usize) -> Result<Self, GrfError> {
        kernel.validate()?;
        if let Some(d) = kernel.fixed_index_dim() {
            if d != index_dim {
                return Err(GrfError::DimensionMismatch {
                    expected: d,
                    got: index_dim,
                });
            }
        }
        Ok(Self {
            mean: Arc::new(move |_| mean),
            kernel: Arc::new(kernel),
            index_dim,
        })
    }

    pub fn with_kernel(kernel: Arc<dyn CovarianceKernel>, index_dim: usize) -> Self {
        Self {
            mean: Arc::new(|_| 0.0),
            kernel,
            index_dim,
        }
    }

    pub fn with_mean_fn<F>(mut self, mean: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.mean = Arc::new(mean);
        self
    }

    pub fn index_dim(&self) -> usize {
        self.index_dim
    }

    pub fn kernel(&self) -> &dyn CovarianceKernel {
        self.kernel.as_ref()
    }

    fn check(&self, z: &[f64]) -> Result<(), GrfError> {
        if z.len() == self.index_dim {
            Ok(())
        } else {
            Err(GrfError::DimensionMismatch {
                expected: self.index_dim,
                got: z.len(),
            })
        }
    }

    pub fn mean_at(&self, z: &[f64]) -> f64 {
        (self.mean)(z)
    }

    /// Covariance `Σ(z1, z2)`.
    pub fn eval_cov(&self, z1: &[f64], z2: &[f64]) -> Result<f64, GrfError> {
        self.check(z1)?;
        self.check(z2)?;
        Ok(self.kernel.covariance(z1, z2))
    }

    /// Unrepaired Gram matrix. Callers that need a PSD guarantee use [`Self::gram_matrix`].
    pub fn raw_gram<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<Mat, GrfError> {
        for p in points {
            self.check(p.as_ref())?;
        }
        let n = points.len();
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let c = self.kernel.covariance(points[i].as_ref(), points[j].as_ref());
                g[(i, j)] = c;
                g[(j, i)] = c;
            }
        }
        Ok(g)
    }

    /// Symmetric, PSD-repaired Gram matrix at `points`.
    pub fn gram_matrix<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<Mat, GrfError> {
        if points.is_empty() {
            return Err(GrfError::NoPoints);
        }
        Ok(repair_psd(&self.raw_gram(points)?)?.matrix)
    }

    /// One joint draw of the field at `points`.
    pub fn sample_joint<P: AsRef<[f64]>, R: Rng + ?Sized>(
        &self,
        points: &[P],
        rng: &mut R,
    ) -> Result<Vec<f64>, GrfError> {
        let gram = self.gram_matrix(points)?;
        let factor = psd_factor(&gram, 0.0)?;
        let mut out: Vec<f64> = points.iter().map(|p| self.mean_at(p.as_ref())).collect();
        for r in 0..factor.nrows() {
            let xi: f64 = rng.sample(StandardNormal);
            for (j, o) in out.iter_mut().enumerate() {
                *o += factor[(r, j)] * xi;
            }
        }
        Ok(out)
    }

    pub fn sequential_sampler(&self) -> SequentialSampler {
        SequentialSampler::new(self.clone())
    }
}

#[derive(Debug, Clone)]
enum Conditioning {
    /// Rows of the lower Cholesky factor of the jittered visited Gram matrix,
    /// and the whitened residuals `L⁻¹(y − μ)`.
    Cholesky { rows: Vec<Vec<f64>>, white: Vec<f64> },
    /// Visited indices sorted by the scalar index coordinate.
    Markov1d { order: Vec<usize> },
}

/// Draws field values one point at a time, each conditioned on every
/// previous draw, so that a path-dependent sequence of points sees a single
/// consistent field realization.
#[derive(Debug, Clone)]
pub struct SequentialSampler {
    field: GaussianRandomField,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    conditioning: Conditioning,
    thin_radius: f64,
}

impl SequentialSampler {
    pub fn new(field: GaussianRandomField) -> Self {
        let conditioning = if field.index_dim == 1 && field.kernel.is_markov_1d() {
            Conditioning::Markov1d { order: Vec::new() }
        } else {
            Conditioning::Cholesky {
                rows: Vec::new(),
                white: Vec::new(),
            }
        };
        let thin_radius = THINNING_FRACTION * field.kernel.length_scale();
        Self {
            field,
            points: Vec::new(),
            values: Vec::new(),
            conditioning,
            thin_radius,
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn nearest_within_radius(&self, z: &[f64]) -> Option<usize> {
        let r2 = self.thin_radius * self.thin_radius;
        let mut best: Option<(usize, f64)> = None;
        match &self.conditioning {
            Conditioning::Markov1d { order } => {
                let pos = order.partition_point(|&i| self.points[i][0] < z[0]);
                for cand in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
                    if let Some(&i) = order.get(cand) {
                        let d = sq_dist(&self.points[i], z);
                        if d <= r2 && best.map_or(true, |(_, b)| d < b) {
                            best = Some((i, d));
                        }
                    }
                }
            }
            Conditioning::Cholesky { .. } => {
                for (i, p) in self.points.iter().enumerate() {
                    let d = sq_dist(p, z);
                    if d <= r2 && best.map_or(true, |(_, b)| d < b) {
                        best = Some((i, d));
                    }
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Draws `Ψ(z)` conditioned on all previously sampled values and records it.
    pub fn sample_next<R: Rng + ?Sized>(&mut self, z: &[f64], rng: &mut R) -> Result<f64, GrfError> {
        self.field.check(z)?;
        let mu = self.field.mean_at(z);
        if let Some(i) = self.nearest_within_radius(z) {
            return Ok(mu + self.values[i] - self.field.mean_at(&self.points[i]));
        }
        let kzz = self.field.kernel.covariance(z, z);
        let jitter = CONDITIONING_JITTER * kzz.abs();
        let xi: f64 = rng.sample(StandardNormal);

        let value = match &mut self.conditioning {
            Conditioning::Cholesky { rows, white } => {
                // Forward solve L a = k(visited, z).
                let n = rows.len();
                let mut a = vec![0.0; n];
                for i in 0..n {
                    let k = self.field.kernel.covariance(&self.points[i], z);
                    let s: f64 = rows[i][..i].iter().zip(&a[..i]).map(|(l, x)| l * x).sum();
                    a[i] = (k - s) / rows[i][i];
                }
                let cond_mean = mu + a.iter().zip(white.iter()).map(|(x, w)| x * w).sum::<f64>();
                let var = kzz + jitter - a.iter().map(|x| x * x).sum::<f64>();
                if var < -1e-8 * kzz.abs().max(f64::MIN_POSITIVE) {
                    return Err(GrfError::NegativeConditionalVariance(var));
                }
                if var <= 0.5 * jitter {
                    // Determined by the visited values; nothing new to condition on.
                    return Ok(cond_mean);
                }
                let sd = var.sqrt();
                a.push(sd);
                rows.push(a);
                white.push(xi);
                cond_mean + sd * xi
            }
            Conditioning::Markov1d { order } => {
                let pos = order.partition_point(|&i| self.points[i][0] < z[0]);
                let nbrs: Vec<usize> = [pos.checked_sub(1), Some(pos)]
                    .into_iter()
                    .flatten()
                    .filter_map(|p| order.get(p).copied())
                    .collect();
                let (cond_mean, var) = condition_on(&self.field, &self.points, &self.values, &nbrs, z, mu, kzz);
                if var < -1e-8 * kzz.abs().max(f64::MIN_POSITIVE) {
                    return Err(GrfError::NegativeConditionalVariance(var));
                }
                let v = cond_mean + var.max(0.0).sqrt() * xi;
                order.insert(pos, self.points.len());
                v
            }
        };
        self.points.push(z.to_vec());
        self.values.push(value);
        Ok(value)
    }
}

/// Gaussian conditioning of `Ψ(z)` on at most two visited points.
fn condition_on(
    field: &GaussianRandomField,
    points: &[Vec<f64>],
    values: &[f64],
    nbrs: &[usize],
    z: &[f64],
    mu: f64,
    kzz: f64,
) -> (f64, f64) {
    let k = field.kernel.as_ref();
    match *nbrs {
        [] => (mu, kzz),
        [i] => {
            let kii = k.covariance(&points[i], &points[i]) * (1.0 + CONDITIONING_JITTER);
            let kiz = k.covariance(&points[i], z);
            let ri = values[i] - field.mean_at(&points[i]);
            if kii <= 0.0 {
                return (mu, kzz);
            }
            (mu + kiz / kii * ri, kzz - kiz * kiz / kii)
        }
        [i, j, ..] => {
            let kii = k.covariance(&points[i], &points[i]) * (1.0 + CONDITIONING_JITTER);
            let kjj = k.covariance(&points[j], &points[j]) * (1.0 + CONDITIONING_JITTER);
            let kij = k.covariance(&points[i], &points[j]);
            let kiz = k.covariance(&points[i], z);
            let kjz = k.covariance(&points[j], z);
            let det = kii * kjj - kij * kij;
            if det <= 0.0 {
                return (mu, kzz);
            }
            let ri = values[i] - field.mean_at(&points[i]);
            let rj = values[j] - field.mean_at(&points[j]);
            // w = K⁻¹ k_z
            let wi = (kjj * kiz - kij * kjz) / det;
            let wj = (kii * kjz - kij * kiz) / det;
            (mu + wi * ri + wj * rj, kzz - wi * kiz - wj * kjz)
        }
    }
}
