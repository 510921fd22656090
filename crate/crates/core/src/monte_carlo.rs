//! Closed-loop Monte Carlo through sampled field realizations.
//!
//! Each trial owns a [`SequentialSampler`]: every RK4 stage asks for the field
//! at the realized state's index point, conditioned on everything the trial
//! has already drawn, so path-dependent trajectories see one consistent field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::SystemModel;
use crate::grf::{GaussianRandomField, SequentialSampler};
use crate::lincov::LinCovPrediction;
use crate::linalg::{mat_to_rows, psd_factor, Mat, Vector};
use crate::nominal::TimePartition;
use crate::policy::FeedbackPolicy;
use crate::stats::{percentile, wilson_interval, Z_95};
use crate::subproblem::{ChanceConstraintSpec, ChanceTarget};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("invalid Monte Carlo configuration: {0}")]
    Config(String),
    #[error("policy does not match the partition: {0}")]
    PolicyMismatch(String),
    #[error("every trial failed; first failure: {0}")]
    AllTrialsFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub trials: usize,
    pub seed: u64,
    /// RK4 steps per segment; `None` uses the partition's value.
    pub substeps: Option<usize>,
    /// Applied controls are clamped to `[lo, hi]` componentwise.
    pub saturation: Option<(f64, f64)>,
    /// Keep every RK4 step of every trial (for CSV export).
    pub record_dense: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 5000,
            seed: 0,
            substeps: None,
            saturation: None,
            record_dense: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.trials == 0 {
            return Err(McError::Config("trials must be at least 1".into()));
        }
        if self.substeps == Some(0) {
            return Err(McError::Config("substeps must be positive".into()));
        }
        if let Some((lo, hi)) = self.saturation {
            if !(lo < hi) {
                return Err(McError::Config(format!("saturation bounds [{lo}, {hi}] are empty")));
            }
        }
        Ok(())
    }
}

/// One RK4 step's starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSample {
    pub t: f64,
    pub state: Vector,
    pub control: Vector,
    pub field: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutput {
    pub trial: usize,
    /// `x_0..=x_N` (truncated on failure).
    pub knot_states: Vec<Vector>,
    /// Policy output before saturation.
    pub commanded: Vec<Vector>,
    /// Controls actually applied.
    pub applied: Vec<Vector>,
    /// Field value at each knot state.
    pub knot_field: Vec<f64>,
    pub dense: Vec<DenseSample>,
    pub failure: Option<String>,
}

impl TrialOutput {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Initial distribution and dynamics shared by every trial.
pub struct McSetup<'a, M: SystemModel + ?Sized> {
    pub model: &'a M,
    pub field: &'a GaussianRandomField,
    pub partition: &'a TimePartition,
    pub x0_mean: &'a Vector,
    pub p0: &'a Mat,
}

/// RNG for trial `trial`: the master seed selects the key, the trial index
/// the stream, so results do not depend on scheduling.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn check_policy(policy: &FeedbackPolicy, partition: &TimePartition, n: usize, m: usize) -> Result<(), McError> {
    policy.validate().map_err(|e| McError::PolicyMismatch(e.to_string()))?;
    if policy.knots.len() != partition.knots.len()
        || policy.knots.iter().zip(&partition.knots).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0))
    {
        return Err(McError::PolicyMismatch(format!(
            "policy knots {:?} vs partition {:?}",
            policy.knots, partition.knots
        )));
    }
    if policy.state_dim != n || policy.control_dim != m {
        return Err(McError::PolicyMismatch(format!(
            "policy dims ({}, {}) vs model ({n}, {m})",
            policy.state_dim, policy.control_dim
        )));
    }
    Ok(())
}

/// Simulates one closed-loop trial.
pub fn simulate_trial<M: SystemModel + ?Sized>(
    setup: &McSetup<'_, M>,
    policy: &FeedbackPolicy,
    config: &McConfig,
    trial: usize,
) -> TrialOutput {
    let mut rng = trial_rng(config.seed, trial);
    let model = setup.model;
    let mut out = TrialOutput {
        trial,
        knot_states: Vec::new(),
        commanded: Vec::new(),
        applied: Vec::new(),
        knot_field: Vec::new(),
        dense: Vec::new(),
        failure: None,
    };

    let mut x = setup.x0_mean.clone();
    match psd_factor(setup.p0, 1e-14) {
        Ok(f) if f.nrows() > 0 => {
            let z = Vector::from_fn(f.nrows(), |_, _| StandardNormal.sample(&mut rng));
            x += f.transpose() * z;
        }
        Ok(_) => {}
        Err(e) => {
            out.failure = Some(format!("initial covariance: {e}"));
            return out;
        }
    }

    let mut sampler = SequentialSampler::new(setup.field.clone());
    let mut psi_at = |x: &Vector, rng: &mut ChaCha8Rng| -> Result<f64, String> {
        sampler
            .sample_next(&model.index_point(x), rng)
            .map_err(|e| e.to_string())
    };
    let sub = config.substeps.unwrap_or(setup.partition.substeps);
    let big_n = setup.partition.segments();
    out.knot_states.push(x.clone());

    let result = (|| -> Result<(), String> {
        for k in 0..big_n {
            let commanded = policy.control(k, &out.knot_states);
            let applied = match config.saturation {
                Some((lo, hi)) => commanded.map(|c| c.clamp(lo, hi)),
                None => commanded.clone(),
            };
            out.commanded.push(commanded);
            out.applied.push(applied.clone());
            let (t0, t1) = setup.partition.segment_bounds(k);
            let h = (t1 - t0) / sub as f64;
            for j in 0..sub {
                let t = t0 + j as f64 * h;
                let f = |x: &Vector, psi: f64| model.dynamics(x, &applied, psi).map_err(|e| format!("t = {t:.3}: {e}"));
                let p1 = psi_at(&x, &mut rng)?;
                if j == 0 {
                    out.knot_field.push(p1);
                }
                if config.record_dense {
                    out.dense.push(DenseSample {
                        t,
                        state: x.clone(),
                        control: applied.clone(),
                        field: p1,
                    });
                }
                let k1 = f(&x, p1)?;
                let x2 = &x + &k1 * (0.5 * h);
                let k2 = f(&x2, psi_at(&x2, &mut rng)?)?;
                let x3 = &x + &k2 * (0.5 * h);
                let k3 = f(&x3, psi_at(&x3, &mut rng)?)?;
                let x4 = &x + &k3 * h;
                let k4 = f(&x4, psi_at(&x4, &mut rng)?)?;
                x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(format!("non-finite state at t = {:.3}", t + h));
                }
            }
            out.knot_states.push(x.clone());
        }
        let pn = psi_at(&x, &mut rng)?;
        out.knot_field.push(pn);
        if config.record_dense {
            out.dense.push(DenseSample {
                t: setup.partition.final_time(),
                state: x.clone(),
                control: out.applied.last().cloned().unwrap_or_else(|| Vector::zeros(model.control_dim())),
                field: pn,
            });
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.failure = Some(e);
    }
    out
}

/// Runs every trial in parallel; outputs are ordered by trial index.
pub fn run_trials<M: SystemModel + ?Sized>(
    setup: &McSetup<'_, M>,
    policy: &FeedbackPolicy,
    config: &McConfig,
) -> Result<Vec<TrialOutput>, McError> {
    config.validate()?;
    check_policy(policy, setup.partition, setup.model.state_dim(), setup.model.control_dim())?;
    Ok((0..config.trials)
        .into_par_iter()
        .map(|i| simulate_trial(setup, policy, config, i))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStat {
    pub name: String,
    pub target: ChanceTarget,
    pub step: usize,
    /// Allowed violation probability.
    pub allowed: f64,
    pub violations: usize,
    pub samples: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStats {
    pub name: String,
    /// Trials whose functional could be evaluated.
    pub samples: Vec<f64>,
    /// Successful trials where the functional was undefined (e.g. not captured).
    pub excluded: usize,
    pub mean: Option<f64>,
    /// `(percentile, value)` for 50/90/99.
    pub percentiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub trials: usize,
    pub seed: u64,
    pub successes: usize,
    pub failures: usize,
    /// First few failure messages with their trial index.
    pub failure_examples: Vec<(usize, String)>,
    pub knots: Vec<f64>,
    pub state_mean: Vec<Vec<f64>>,
    pub state_cov: Vec<Vec<Vec<f64>>>,
    pub control_mean: Vec<Vec<f64>>,
    pub control_cov: Vec<Vec<Vec<f64>>>,
    pub field_mean: Vec<f64>,
    pub field_std: Vec<f64>,
    pub constraints: Vec<ConstraintStat>,
    pub terminal: Option<FunctionalStats>,
    pub lincov: Option<LinCovPrediction>,
    /// Free-form label (e.g. "closed_loop", "open_loop").
    pub label: String,
}

fn mean_and_cov(samples: &[&Vector], dim: usize) -> (Vector, Mat) {
    let count = samples.len();
    let mut mean = Vector::zeros(dim);
    for s in samples {
        mean += *s;
    }
    if count > 0 {
        mean /= count as f64;
    }
    let mut cov = Mat::zeros(dim, dim);
    for s in samples {
        let d = *s - &mean;
        cov += &d * d.transpose();
    }
    if count > 1 {
        cov /= (count - 1) as f64;
    }
    (mean, cov)
}

/// Percentile levels reported for terminal functionals.
pub const REPORT_PERCENTILES: [f64; 3] = [50.0, 90.0, 99.0];

/// Reduces trial outputs (ordered by trial index) into a report.
pub fn aggregate(
    outputs: &[TrialOutput],
    partition: &TimePartition,
    chance: &[ChanceConstraintSpec],
    terminal: Option<(&str, &(dyn Fn(&Vector) -> Option<f64> + Sync))>,
    config: &McConfig,
) -> Result<McReport, McError> {
    let ok: Vec<&TrialOutput> = outputs.iter().filter(|o| o.succeeded()).collect();
    if ok.is_empty() {
        let first = outputs.first().and_then(|o| o.failure.clone()).unwrap_or_default();
        return Err(McError::AllTrialsFailed(first));
    }
    let big_n = partition.segments();
    let n = ok[0].knot_states[0].len();
    let m = ok[0].commanded.first().map_or(0, |u| u.len());

    let mut state_mean = Vec::new();
    let mut state_cov = Vec::new();
    for k in 0..=big_n {
        let xs: Vec<&Vector> = ok.iter().map(|o| &o.knot_states[k]).collect();
        let (mu, cov) = mean_and_cov(&xs, n);
        state_mean.push(mu.iter().copied().collect());
        state_cov.push(mat_to_rows(&cov));
    }
    let mut control_mean = Vec::new();
    let mut control_cov = Vec::new();
    for k in 0..big_n {
        let us: Vec<&Vector> = ok.iter().map(|o| &o.applied[k]).collect();
        let (mu, cov) = mean_and_cov(&us, m);
        control_mean.push(mu.iter().copied().collect());
        control_cov.push(mat_to_rows(&cov));
    }
    let mut field_mean = Vec::new();
    let mut field_std = Vec::new();
    for k in 0..=big_n {
        let vals: Vec<Vector> = ok.iter().map(|o| Vector::from_element(1, o.knot_field[k])).collect();
        let refs: Vec<&Vector> = vals.iter().collect();
        let (mu, cov) = mean_and_cov(&refs, 1);
        field_mean.push(mu[0]);
        field_std.push(cov[(0, 0)].max(0.0).sqrt());
    }

    let constraints = chance
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dir = Vector::from_column_slice(&c.direction);
            let violations = ok
                .iter()
                .filter(|o| {
                    let v = match c.target {
                        ChanceTarget::State => &o.knot_states[c.step],
                        ChanceTarget::Control => &o.commanded[c.step],
                    };
                    dir.dot(v) > c.bound
                })
                .count();
            let (ci_low, ci_high) = wilson_interval(violations, ok.len(), Z_95);
            ConstraintStat {
                name: c.name(i),
                target: c.target,
                step: c.step,
                allowed: c.probability,
                violations,
                samples: ok.len(),
                rate: violations as f64 / ok.len() as f64,
                ci_low,
                ci_high,
            }
        })
        .collect();

    let terminal = terminal.map(|(name, f)| {
        let mut samples: Vec<f64> = Vec::with_capacity(ok.len());
        let mut excluded = 0;
        for o in &ok {
            match f(o.knot_states.last().expect("final state")) {
                Some(v) if v.is_finite() => samples.push(v),
                _ => excluded += 1,
            }
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let percentiles = if sorted.is_empty() {
            vec![]
        } else {
            REPORT_PERCENTILES.iter().map(|&q| (q, percentile(&sorted, q))).collect()
        };
        FunctionalStats {
            name: name.to_string(),
            mean: (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64),
            samples,
            excluded,
            percentiles,
        }
    });

    Ok(McReport {
        trials: outputs.len(),
        seed: config.seed,
        successes: ok.len(),
        failures: outputs.len() - ok.len(),
        failure_examples: outputs
            .iter()
            .filter_map(|o| o.failure.clone().map(|f| (o.trial, f)))
            .take(5)
            .collect(),
        knots: partition.knots.clone(),
        state_mean,
        state_cov,
        control_mean,
        control_cov,
        field_mean,
        field_std,
        constraints,
        terminal,
        lincov: None,
        label: String::new(),
    })
}

impl McReport {
    pub fn percentile(&self, q: f64) -> Option<f64> {
        self.terminal
            .as_ref()?
            .percentiles
            .iter()
            .find(|(p, _)| (*p - q).abs() < 1e-12)
            .map(|(_, v)| *v)
    }

    pub fn terminal_covariance(&self) -> Mat {
        crate::linalg::mat_from_rows(self.state_cov.last().expect("knots"))
    }
}
