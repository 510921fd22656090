//! Stacked ("lifted") form of the discrete LTV model,
//! `X = 𝐀 x₀ + 𝐁 U + C + 𝐆 W`, and the gain reparameterization
//! `L = K (I − 𝐁K)⁻¹`.

use thiserror::Error;

use crate::discretize::DiscreteLtvProblem;
use crate::linalg::{psd_factor_equilibrated, repair_psd, symmetrize, LinalgError, Mat, Vector};

/// Relative eigenvalue cut-off for the rows kept in `S_half`.
pub const S_HALF_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("I + 𝐁L is singular")]
    Singular,
}

/// Stacked matrices of the steering problem plus the covariance factor
/// `S = 𝐀P₀𝐀ᵀ + 𝐆 Cov(W) 𝐆ᵀ = S_halfᵀ S_half`.
#[derive(Debug, Clone)]
pub struct BlockSteeringData {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// `(N+1)n × n`.
    pub a: Mat,
    /// `(N+1)n × Nm`, strictly block lower-triangular.
    pub b: Mat,
    /// `(N+1)n × Nn`, strictly block lower-triangular.
    pub g: Mat,
    /// `(N+1)n`.
    pub c: Vector,
    pub x0_mean: Vector,
    pub p0: Mat,
    pub disturbance_mean: Vector,
    pub s: Mat,
    /// `r × (N+1)n` with zero-eigenvalue rows stripped.
    pub s_half: Mat,
}

impl BlockSteeringData {
    pub fn stacked_state_dim(&self) -> usize {
        (self.horizon + 1) * self.state_dim
    }

    pub fn stacked_control_dim(&self) -> usize {
        self.horizon * self.control_dim
    }

    /// `E_k`: picks `x_k` out of the stacked state.
    pub fn state_selector(&self, k: usize) -> Mat {
        selector(k, self.state_dim, self.horizon + 1)
    }

    /// `Eᵘ_k`: picks `u_k` out of the stacked control.
    pub fn control_selector(&self, k: usize) -> Mat {
        selector(k, self.control_dim, self.horizon)
    }

    /// `𝐀x̄₀ + C + 𝐆W̄`, so that `X̄ = mean_offset + 𝐁V`.
    pub fn mean_offset(&self) -> Vector {
        &self.a * &self.x0_mean + &self.c + &self.g * &self.disturbance_mean
    }

    /// Stacked mean states for feedforward `v`.
    pub fn mean_states(&self, v: &Vector) -> Vector {
        self.mean_offset() + &self.b * v
    }

    /// `I + 𝐁L`.
    pub fn closed_loop(&self, l: &Mat) -> Mat {
        Mat::identity(self.stacked_state_dim(), self.stacked_state_dim()) + &self.b * l
    }

    /// `Cov(X) = (I + 𝐁L) S (I + 𝐁L)ᵀ`.
    pub fn state_covariance(&self, l: &Mat) -> Mat {
        let cl = self.closed_loop(l);
        symmetrize(&(&cl * &self.s * cl.transpose()))
    }

    /// `Cov(U) = L S Lᵀ`.
    pub fn control_covariance(&self, l: &Mat) -> Mat {
        symmetrize(&(l * &self.s * l.transpose()))
    }

    /// Block `k` of a stacked state covariance.
    pub fn knot_covariance(&self, cov: &Mat, k: usize) -> Mat {
        let n = self.state_dim;
        cov.view((k * n, k * n), (n, n)).into_owned()
    }
}

fn selector(k: usize, dim: usize, blocks: usize) -> Mat {
    assert!(k < blocks, "selector index {k} out of range (< {blocks})");
    let mut e = Mat::zeros(dim, dim * blocks);
    for i in 0..dim {
        e[(i, k * dim + i)] = 1.0;
    }
    e
}

/// Builds the stacked model from the discrete problem and initial distribution.
pub fn assemble_blocks(
    ltv: &DiscreteLtvProblem,
    x0_mean: &Vector,
    p0: &Mat,
) -> Result<BlockSteeringData, BlockError> {
    let big_n = ltv.horizon();
    let n = ltv.state_dim();
    let m = ltv.control_dim();
    let dim_err = |what, expected: String, got: String| BlockError::Dimension { what, expected, got };
    if x0_mean.len() != n {
        return Err(dim_err("initial mean", n.to_string(), x0_mean.len().to_string()));
    }
    if p0.shape() != (n, n) {
        return Err(dim_err("initial covariance", format!("{n}x{n}"), format!("{:?}", p0.shape())));
    }
    if ltv.disturbance_cov.shape() != (big_n * n, big_n * n) || ltv.disturbance_mean.len() != big_n * n {
        return Err(dim_err(
            "disturbance statistics",
            format!("{}", big_n * n),
            format!("{:?}", ltv.disturbance_cov.shape()),
        ));
    }

    // phi[k][j] = A_{k-1} ⋯ A_j (transition from step j to k), j ≤ k.
    let mut phi: Vec<Vec<Mat>> = Vec::with_capacity(big_n + 1);
    for k in 0..=big_n {
        let mut row = vec![Mat::zeros(n, n); k + 1];
        row[k] = Mat::identity(n, n);
        for j in (0..k).rev() {
            row[j] = &row[j + 1] * &ltv.a[j];
        }
        phi.push(row);
    }

    let rows = (big_n + 1) * n;
    let mut a = Mat::zeros(rows, n);
    let mut b = Mat::zeros(rows, big_n * m);
    let mut g = Mat::zeros(rows, big_n * n);
    let mut c = Vector::zeros(rows);
    for k in 0..=big_n {
        a.view_mut((k * n, 0), (n, n)).copy_from(&phi[k][0]);
        let mut ck = Vector::zeros(n);
        for j in 0..k {
            let through = &phi[k][j + 1];
            b.view_mut((k * n, j * m), (n, m)).copy_from(&(through * &ltv.b[j]));
            g.view_mut((k * n, j * n), (n, n)).copy_from(through);
            ck += through * &ltv.c[j];
        }
        c.rows_mut(k * n, n).copy_from(&ck);
    }

    let s_raw = &a * p0 * a.transpose() + &g * &ltv.disturbance_cov * g.transpose();
    let s = repair_psd(&s_raw)?.matrix;
    let s_half = psd_factor_equilibrated(&s, S_HALF_REL_TOL)?;
    Ok(BlockSteeringData {
        horizon: big_n,
        state_dim: n,
        control_dim: m,
        a,
        b,
        g,
        c,
        x0_mean: x0_mean.clone(),
        p0: p0.clone(),
        disturbance_mean: ltv.disturbance_mean.clone(),
        s,
        s_half,
    })
}

fn solve_right(lhs: &Mat, rhs_factor: &Mat) -> Result<Mat, BlockError> {
    // X = lhs · rhs_factor⁻¹  ⇔  rhs_factorᵀ Xᵀ = lhsᵀ
    let lu = rhs_factor.transpose().lu();
    lu.solve(&lhs.transpose())
        .map(|x| x.transpose())
        .ok_or(BlockError::Singular)
}

/// `K = L (I + 𝐁L)⁻¹`.
pub fn gains_from_l(l: &Mat, b: &Mat) -> Result<Mat, BlockError> {
    let dim = b.nrows();
    solve_right(l, &(Mat::identity(dim, dim) + b * l))
}

/// `L = K (I − 𝐁K)⁻¹`.
pub fn l_from_gains(k: &Mat, b: &Mat) -> Result<Mat, BlockError> {
    let dim = b.nrows();
    solve_right(k, &(Mat::identity(dim, dim) - b * k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_ltv(rng: &mut ChaCha8Rng, big_n: usize, n: usize, m: usize) -> DiscreteLtvProblem {
        let h = random_mat(rng, big_n * n, big_n * n);
        DiscreteLtvProblem {
            a: (0..big_n).map(|_| random_mat(rng, n, n)).collect(),
            b: (0..big_n).map(|_| random_mat(rng, n, m)).collect(),
            c: (0..big_n).map(|_| random_mat(rng, n, 1).column(0).into_owned()).collect(),
            disturbance_mean: random_mat(rng, big_n * n, 1).column(0).into_owned(),
            disturbance_cov: &h * h.transpose(),
            quad_nodes: 0,
            repair_fraction: 0.0,
            segments: vec![],
        }
    }

    /// Block lower-triangular `L` whose last block column is zero.
    pub(crate) fn random_l(rng: &mut ChaCha8Rng, big_n: usize, n: usize, m: usize) -> Mat {
        let mut l = Mat::zeros(big_n * m, (big_n + 1) * n);
        for k in 0..big_n {
            for j in 0..=k {
                l.view_mut((k * m, j * n), (m, n))
                    .copy_from(&random_mat(rng, m, n));
            }
        }
        l
    }

    #[test]
    fn stacked_equation_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (big_n, n, m) = (4, 3, 2);
        let ltv = random_ltv(&mut rng, big_n, n, m);
        let blocks = assemble_blocks(&ltv, &Vector::zeros(n), &Mat::identity(n, n)).unwrap();
        for _ in 0..100 {
            let x0 = random_mat(&mut rng, n, 1).column(0).into_owned();
            let u = random_mat(&mut rng, big_n * m, 1).column(0).into_owned();
            let w = random_mat(&mut rng, big_n * n, 1).column(0).into_owned();
            let stacked = &blocks.a * &x0 + &blocks.b * &u + &blocks.c + &blocks.g * &w;
            let mut x = x0.clone();
            assert!((stacked.rows(0, n) - &x).abs().max() < 1e-12);
            for k in 0..big_n {
                x = &ltv.a[k] * &x + &ltv.b[k] * u.rows(k * m, m) + &ltv.c[k] + w.rows(k * n, n);
                let err = (stacked.rows((k + 1) * n, n) - &x).abs().max();
                assert!(err < 1e-12 * x.abs().max().max(1.0), "step {k}: {err}");
            }
        }
    }

    #[test]
    fn b_and_g_are_strictly_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (big_n, n, m) = (3, 2, 1);
        let blocks =
            assemble_blocks(&random_ltv(&mut rng, big_n, n, m), &Vector::zeros(n), &Mat::zeros(n, n)).unwrap();
        for k in 0..=big_n {
            for j in k..big_n {
                assert_eq!(blocks.b.view((k * n, j * m), (n, m)).abs().max(), 0.0);
                assert_eq!(blocks.g.view((k * n, j * n), (n, n)).abs().max(), 0.0);
            }
        }
    }

    #[test]
    fn zero_uncertainty_gives_zero_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ltv = random_ltv(&mut rng, 2, 2, 1);
        ltv.disturbance_cov = Mat::zeros(4, 4);
        let blocks = assemble_blocks(&ltv, &Vector::zeros(2), &Mat::zeros(2, 2)).unwrap();
        assert_eq!(blocks.s.abs().max(), 0.0);
        assert_eq!(blocks.s_half.nrows(), 0);
    }

    #[test]
    fn s_half_factors_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ltv = random_ltv(&mut rng, 3, 2, 1);
        let blocks = assemble_blocks(&ltv, &Vector::zeros(2), &Mat::identity(2, 2)).unwrap();
        let back = blocks.s_half.transpose() * &blocks.s_half;
        assert!((back - &blocks.s).abs().max() < 1e-9 * blocks.s.abs().max());
    }

    #[test]
    fn selectors_extract_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let blocks = assemble_blocks(&random_ltv(&mut rng, 3, 2, 1), &Vector::zeros(2), &Mat::zeros(2, 2)).unwrap();
        let x = random_mat(&mut rng, 8, 1).column(0).into_owned();
        for k in 0..4 {
            assert_eq!(blocks.state_selector(k) * &x, x.rows(2 * k, 2).into_owned());
        }
        let u = random_mat(&mut rng, 3, 1).column(0).into_owned();
        assert_eq!(blocks.control_selector(2) * &u, u.rows(2, 1).into_owned());
    }

    #[test]
    fn gain_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (big_n, n, m) = (4, 3, 2);
        let blocks = assemble_blocks(&random_ltv(&mut rng, big_n, n, m), &Vector::zeros(n), &Mat::zeros(n, n)).unwrap();
        assert_eq!(
            gains_from_l(&Mat::zeros(big_n * m, (big_n + 1) * n), &blocks.b).unwrap().abs().max(),
            0.0
        );
        for _ in 0..10 {
            let l = random_l(&mut rng, big_n, n, m);
            let k = gains_from_l(&l, &blocks.b).unwrap();
            let back = l_from_gains(&k, &blocks.b).unwrap();
            assert!((back - &l).abs().max() < 1e-10);
        }
    }

    #[test]
    fn closed_loop_matches_recursive_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (big_n, n, m) = (4, 2, 1);
        let ltv = random_ltv(&mut rng, big_n, n, m);
        let blocks = assemble_blocks(&ltv, &Vector::zeros(n), &Mat::zeros(n, n)).unwrap();
        let l = random_l(&mut rng, big_n, n, m);
        let kgain = gains_from_l(&l, &blocks.b).unwrap();
        let x0 = random_mat(&mut rng, n, 1).column(0).into_owned();
        let w = random_mat(&mut rng, big_n * n, 1).column(0).into_owned();
        let stacked = blocks.closed_loop(&l) * (&blocks.a * &x0 + &blocks.g * &w);

        // Deviation dynamics x̃_{k+1} = A x̃_k + B ũ_k + w̃_k with ũ = K x̃.
        let mut xs = vec![x0.clone()];
        for k in 0..big_n {
            let mut u = Vector::zeros(m);
            for (j, xj) in xs.iter().enumerate() {
                u += kgain.view((k * m, j * n), (m, n)) * xj;
            }
            let next = &ltv.a[k] * &xs[k] + &ltv.b[k] * u + w.rows(k * n, n);
            xs.push(next);
        }
        for (k, xk) in xs.iter().enumerate() {
            assert!((stacked.rows(k * n, n) - xk).abs().max() < 1e-10);
        }
    }
}
