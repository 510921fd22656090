//! The executable control law
//! `u_k = Σ_{ℓ≤k} K_{k,ℓ} (x_ℓ − x̄_ℓ) + v_k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{mat_from_rows, mat_to_rows, Mat, Vector};

pub const POLICY_FORMAT: &str = "covsteer-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy shape: {0}")]
    Shape(String),
    #[error("policy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported policy format {format:?} version {version}")]
    Format { format: String, version: u32 },
}

/// One gain block `K_{k,ℓ}` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBlock {
    pub k: usize,
    pub l: usize,
    pub matrix: Vec<Vec<f64>>,
}

/// Table-lookup guidance law over a time partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackPolicy {
    pub format: String,
    pub version: u32,
    pub knots: Vec<f64>,
    pub state_dim: usize,
    pub control_dim: usize,
    /// `x̄_k`, `k = 0..=N`.
    pub reference_states: Vec<Vec<f64>>,
    /// `v_k`, `k = 0..N`.
    pub feedforward: Vec<Vec<f64>>,
    /// `K_{k,ℓ}` for `0 ≤ ℓ ≤ k < N`.
    pub gains: Vec<GainBlock>,
}

impl FeedbackPolicy {
    /// Builds a policy from the stacked gain `K` (`Nm × (N+1)n`), stacked
    /// feedforward `V` and stacked reference means `X̄`.
    pub fn from_stacked(knots: &[f64], k: &Mat, v: &Vector, x_bar: &Vector, n: usize, m: usize) -> Self {
        let big_n = knots.len() - 1;
        assert_eq!(k.shape(), (big_n * m, (big_n + 1) * n), "stacked gain shape");
        assert_eq!(v.len(), big_n * m);
        assert_eq!(x_bar.len(), (big_n + 1) * n);
        let mut gains = Vec::with_capacity(big_n * (big_n + 1) / 2);
        for kk in 0..big_n {
            for l in 0..=kk {
                gains.push(GainBlock {
                    k: kk,
                    l,
                    matrix: mat_to_rows(&k.view((kk * m, l * n), (m, n)).into_owned()),
                });
            }
        }
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            knots: knots.to_vec(),
            state_dim: n,
            control_dim: m,
            reference_states: (0..=big_n).map(|i| x_bar.rows(i * n, n).iter().copied().collect()).collect(),
            feedforward: (0..big_n).map(|i| v.rows(i * m, m).iter().copied().collect()).collect(),
            gains,
        }
    }

    pub fn horizon(&self) -> usize {
        self.knots.len().saturating_sub(1)
    }

    /// Checks the index structure and all dimensions.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.format != POLICY_FORMAT || self.version != POLICY_VERSION {
            return Err(PolicyError::Format {
                format: self.format.clone(),
                version: self.version,
            });
        }
        let big_n = self.horizon();
        let (n, m) = (self.state_dim, self.control_dim);
        let shape = |msg: String| Err(PolicyError::Shape(msg));
        if big_n == 0 {
            return shape("need at least two knots".into());
        }
        if self.reference_states.len() != big_n + 1 || self.reference_states.iter().any(|x| x.len() != n) {
            return shape(format!("reference_states must be {} rows of length {n}", big_n + 1));
        }
        if self.feedforward.len() != big_n || self.feedforward.iter().any(|x| x.len() != m) {
            return shape(format!("feedforward must be {big_n} rows of length {m}"));
        }
        let mut seen = vec![false; big_n * (big_n + 1) / 2];
        for g in &self.gains {
            if g.l > g.k || g.k >= big_n {
                return shape(format!("gain block ({}, {}) outside 0 ≤ ℓ ≤ k < {big_n}", g.k, g.l));
            }
            if g.matrix.len() != m || g.matrix.iter().any(|r| r.len() != n) {
                return shape(format!("gain block ({}, {}) must be {m}x{n}", g.k, g.l));
            }
            let idx = g.k * (g.k + 1) / 2 + g.l;
            if std::mem::replace(&mut seen[idx], true) {
                return shape(format!("duplicate gain block ({}, {})", g.k, g.l));
            }
        }
        Ok(())
    }

    /// Stacked gain matrix `K`; missing blocks are zero.
    pub fn stacked_gain(&self) -> Mat {
        let big_n = self.horizon();
        let (n, m) = (self.state_dim, self.control_dim);
        let mut k = Mat::zeros(big_n * m, (big_n + 1) * n);
        for g in &self.gains {
            k.view_mut((g.k * m, g.l * n), (m, n)).copy_from(&mat_from_rows(&g.matrix));
        }
        k
    }

    pub fn stacked_feedforward(&self) -> Vector {
        Vector::from_iterator(
            self.horizon() * self.control_dim,
            self.feedforward.iter().flatten().copied(),
        )
    }

    pub fn reference_state(&self, k: usize) -> Vector {
        Vector::from_column_slice(&self.reference_states[k])
    }

    /// `u_k` given the realized knot states `x_0, …, x_k` (extra entries ignored).
    pub fn control(&self, k: usize, knot_states: &[Vector]) -> Vector {
        assert!(knot_states.len() > k, "need states x_0..=x_{k}");
        let mut u = Vector::from_column_slice(&self.feedforward[k]);
        for g in self.gains.iter().filter(|g| g.k == k) {
            let dev = &knot_states[g.l] - self.reference_state(g.l);
            u += mat_from_rows(&g.matrix) * dev;
        }
        u
    }

    /// Copy with every gain removed and the feedforward replaced by `controls`.
    pub fn open_loop(&self, controls: &[Vector]) -> Self {
        let mut p = self.clone();
        p.gains.clear();
        p.feedforward = controls.iter().map(|u| u.iter().copied().collect()).collect();
        p
    }

    pub fn to_json(&self) -> Result<String, PolicyError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng) -> (FeedbackPolicy, Mat, Vector, Vector) {
        let (big_n, n, m) = (4, 3, 2);
        let mut k = Mat::zeros(big_n * m, (big_n + 1) * n);
        for kk in 0..big_n {
            for l in 0..=kk {
                for i in 0..m {
                    for j in 0..n {
                        k[(kk * m + i, l * n + j)] = rng.random_range(-1.0..1.0);
                    }
                }
            }
        }
        let v = Vector::from_fn(big_n * m, |_, _| rng.random_range(-1.0..1.0));
        let x = Vector::from_fn((big_n + 1) * n, |_, _| rng.random_range(-1.0..1.0));
        let knots: Vec<f64> = (0..=big_n).map(|i| i as f64).collect();
        (FeedbackPolicy::from_stacked(&knots, &k, &v, &x, n, m), k, v, x)
    }

    #[test]
    fn nominal_states_give_feedforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, ..) = random_policy(&mut rng);
        let xs: Vec<Vector> = (0..=4).map(|i| p.reference_state(i)).collect();
        for k in 0..4 {
            assert_eq!(p.control(k, &xs), Vector::from_column_slice(&p.feedforward[k]));
        }
    }

    #[test]
    fn control_matches_stacked_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, k, v, x_bar) = random_policy(&mut rng);
        let x = Vector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        let u_stacked = &k * (&x - &x_bar) + &v;
        let xs: Vec<Vector> = (0..5).map(|i| x.rows(i * 3, 3).into_owned()).collect();
        for kk in 0..4 {
            let u = p.control(kk, &xs);
            assert!((u - u_stacked.rows(kk * 2, 2)).abs().max() < 1e-12);
        }
        assert_eq!(p.stacked_gain(), k);
        assert_eq!(p.stacked_feedforward(), v);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, ..) = random_policy(&mut rng);
        let back = FeedbackPolicy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn validation_rejects_upper_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut p, ..) = random_policy(&mut rng);
        p.gains[0].l = 3;
        assert!(p.validate().is_err());
    }
}
