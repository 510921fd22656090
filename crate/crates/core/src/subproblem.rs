//! The convex covariance-steering subproblem over `(L, V)`.
//!
//! With `X̄ = 𝐀x̄₀ + C + 𝐆W̄ + 𝐁V` and `Cov(X) = (I+𝐁L) S (I+𝐁L)ᵀ`, every
//! cost term and constraint is an affine map of the decision vector inside a
//! second-order cone:
//!
//! * quadratic costs go through one rotated-cone epigraph `t ≥ ‖y‖²`, with
//!   `y` stacking `Q½(I+𝐁L)S_halfᵀ`, `R½ L S_halfᵀ`, `Q½(X̄ − Xᵈ)` and
//!   `R̄½ V`;
//! * a state chance constraint `P(aᵀx_k > α) ≤ p` becomes
//!   `Φ⁻¹(1−p)‖S_half(I+𝐁L)ᵀE_kᵀa‖ + aᵀE_kX̄ ≤ α`, and likewise for controls;
//! * the terminal covariance bound uses the Frobenius norm
//!   `‖P_f^{-½}E_N(I+𝐁L)S_halfᵀ‖_F ≤ 1`, which implies the spectral bound
//!   `Cov(x_N) ⪯ P_f`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{gains_from_l, BlockError, BlockSteeringData};
use crate::conic::{AffineMap, ConicProgram, DecisionLayout, EqualityBlock, SocBlock, SolveStatus, SolverAdapter};
use crate::linalg::{psd_factor, sym_inv_sqrt, LinalgError, Mat, Vector};
use crate::stats::gaussian_quantile;

/// Relative eigenvalue cut-off for weight-matrix factors.
const WEIGHT_FACTOR_TOL: f64 = 1e-12;

/// Constraint violations below this (after per-block normalization) count as satisfied.
pub const CONE_SLACK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubproblemError {
    #[error("invalid chance constraint #{index}: {reason}")]
    Chance { index: usize, reason: String },
    #[error("invalid objective: {0}")]
    Objective(String),
    #[error("terminal covariance must be positive definite: {0}")]
    TerminalCovariance(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Blocks(#[from] BlockError),
    #[error("subproblem {status:?} ({detail})")]
    Solver { status: SolveStatus, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChanceTarget {
    State,
    Control,
}

/// `P(directionᵀ · x_step > bound) ≤ probability` (or for `u_step`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConstraintSpec {
    pub target: ChanceTarget,
    pub step: usize,
    pub direction: Vec<f64>,
    pub bound: f64,
    pub probability: f64,
}

impl ChanceConstraintSpec {
    pub fn validate(&self, horizon: usize, n: usize, m: usize) -> Result<(), String> {
        if !(self.probability > 0.0 && self.probability < 0.5) {
            return Err(format!("violation probability {} must lie in (0, 0.5)", self.probability));
        }
        if !self.bound.is_finite() {
            return Err("bound must be finite".into());
        }
        let (dim, last) = match self.target {
            ChanceTarget::State => (n, horizon),
            ChanceTarget::Control => (m, horizon - 1),
        };
        if self.direction.len() != dim {
            return Err(format!("direction has length {}, expected {dim}", self.direction.len()));
        }
        if self.direction.iter().all(|d| *d == 0.0) || self.direction.iter().any(|d| !d.is_finite()) {
            return Err("direction must be finite and nonzero".into());
        }
        if self.step > last {
            return Err(format!("step {} beyond last admissible step {last}", self.step));
        }
        Ok(())
    }

    pub fn name(&self, index: usize) -> String {
        let t = match self.target {
            ChanceTarget::State => "state",
            ChanceTarget::Control => "control",
        };
        format!("{t}_chance[{index}]@k={}", self.step)
    }
}

/// What the mean is compared against in the quadratic state cost.
#[derive(Debug, Clone, PartialEq)]
pub enum DesiredTrajectory {
    /// `xᵈ_k = x̄_k`: only the covariance part of the state cost remains.
    TrackMean,
    Fixed(Vec<Vector>),
}

/// One affine piece `ξᵀx_N + c` of a terminal functional.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileTerm {
    pub direction: Vector,
    pub offset: f64,
}

/// `η max_i (ξ_iᵀx̄_N + c_i + Φ⁻¹(1−p_f) √(ξ_iᵀ Cov(x_N) ξ_i))`.
///
/// With one term this is the Gaussian `1 − p_f` quantile of a linearized
/// terminal functional. Several terms cover a functional that is the maximum
/// of smooth pieces, each linearized on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileObjective {
    pub terms: Vec<PercentileTerm>,
    pub probability: f64,
    pub weight: f64,
}

impl PercentileObjective {
    pub fn single(direction: Vector, probability: f64, weight: f64) -> Self {
        Self {
            terms: vec![PercentileTerm { direction, offset: 0.0 }],
            probability,
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringObjective {
    /// `Q_k`, `k = 0..=N` (empty: no state cost).
    pub state_weights: Vec<Mat>,
    /// `R_k`, `k = 0..N` (empty: none).
    pub control_weights: Vec<Mat>,
    /// `R̄_k` on the feedforward, `k = 0..N` (empty: none).
    pub feedforward_weights: Vec<Mat>,
    pub desired: DesiredTrajectory,
    pub percentile: Option<PercentileObjective>,
}

impl SteeringObjective {
    pub fn empty() -> Self {
        Self {
            state_weights: vec![],
            control_weights: vec![],
            feedforward_weights: vec![],
            desired: DesiredTrajectory::TrackMean,
            percentile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TerminalConstraint {
    pub mean: Option<Vector>,
    pub covariance: Option<Mat>,
}

/// `‖Eᵘ_kV − û_k‖_{Mᵘ_k} ≤ Δᵘ` and `‖E_kX̄ − x̂_k‖_{Mˣ_k} ≤ Δˣ`; zero or
/// missing weights make a step unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegion {
    pub nominal_states: Vec<Vector>,
    pub nominal_controls: Vec<Vector>,
    /// `Mᵘ_k`, `k = 0..N` (empty: none).
    pub control_weights: Vec<Mat>,
    pub control_radius: f64,
    /// `Mˣ_k`, `k = 0..=N` (empty: none).
    pub state_weights: Vec<Mat>,
    pub state_radius: f64,
}

/// Coefficients of `vec(left · L · right)` (row-major over the
/// `left.nrows() × right.ncols()` result) on the free entries of `L`.
fn gain_map(layout: &DecisionLayout, left: &Mat, right: &Mat) -> Mat {
    let (big_n, m, n) = (layout.horizon, layout.control_dim, layout.state_dim);
    let (p_rows, c_cols) = (left.nrows(), right.ncols());
    let mut out = Mat::zeros(p_rows * c_cols, layout.len());
    for k in 0..big_n {
        for i in 0..m {
            let lc = left.column(k * m + i);
            if lc.iter().all(|x| *x == 0.0) {
                continue;
            }
            for l in 0..=k {
                for j in 0..n {
                    let rr = right.row(l * n + j);
                    let var = layout.gain_index(k, l, i, j);
                    for p in 0..p_rows {
                        let a = lc[p];
                        if a == 0.0 {
                            continue;
                        }
                        for c in 0..c_cols {
                            out[(p * c_cols + c, var)] = a * rr[c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Coefficients of `left · V` on the feedforward entries.
fn feedforward_map(layout: &DecisionLayout, left: &Mat) -> Mat {
    let mut out = Mat::zeros(left.nrows(), layout.len());
    out.view_mut((0, layout.n_gain()), (left.nrows(), layout.n_feedforward()))
        .copy_from(left);
    out
}

fn row_major(m: &Mat) -> Vector {
    Vector::from_iterator(m.nrows() * m.ncols(), m.transpose().iter().copied())
}

/// Block-diagonal stack of `F_k` with `F_kᵀF_k = W_k`.
fn stacked_factor(weights: &[Mat], dim: usize) -> Result<Mat, SubproblemError> {
    let factors: Vec<Mat> = weights
        .iter()
        .map(|w| {
            if w.shape() != (dim, dim) {
                return Err(SubproblemError::Dimension(format!(
                    "weight matrix is {:?}, expected {dim}x{dim}",
                    w.shape()
                )));
            }
            Ok(psd_factor(w, WEIGHT_FACTOR_TOL)?)
        })
        .collect::<Result<_, _>>()?;
    let rows: usize = factors.iter().map(Mat::nrows).sum();
    let mut out = Mat::zeros(rows, dim * weights.len());
    let mut r = 0;
    for (k, f) in factors.iter().enumerate() {
        out.view_mut((r, k * dim), (f.nrows(), dim)).copy_from(f);
        r += f.nrows();
    }
    Ok(out)
}

struct Builder<'a> {
    blocks: &'a BlockSteeringData,
    layout: DecisionLayout,
    /// `X̄` as an affine map of `z`.
    mean: AffineMap,
    /// `S_halfᵀ`.
    sht: Mat,
}

impl<'a> Builder<'a> {
    fn new(blocks: &'a BlockSteeringData) -> Self {
        let layout = DecisionLayout::new(blocks.horizon, blocks.state_dim, blocks.control_dim);
        let mean = AffineMap {
            coeffs: feedforward_map(&layout, &blocks.b),
            offset: blocks.mean_offset(),
        };
        Self {
            blocks,
            layout,
            mean,
            sht: blocks.s_half.transpose(),
        }
    }

    /// `rows · X̄` as an affine map.
    fn mean_rows(&self, rows: &Mat) -> AffineMap {
        AffineMap {
            coeffs: rows * &self.mean.coeffs,
            offset: rows * &self.mean.offset,
        }
    }

    /// `vec(F (I+𝐁L) S_halfᵀ)` for a row selector/weight `F` over stacked states.
    fn closed_loop_spread(&self, f: &Mat) -> AffineMap {
        AffineMap {
            coeffs: gain_map(&self.layout, &(f * &self.blocks.b), &self.sht),
            offset: row_major(&(f * &self.sht)),
        }
    }

    /// `vec(F L S_halfᵀ)` for `F` over stacked controls.
    fn control_spread(&self, f: &Mat) -> AffineMap {
        AffineMap {
            coeffs: gain_map(&self.layout, f, &self.sht),
            offset: Vector::zeros(f.nrows() * self.sht.ncols()),
        }
    }

    fn feedforward_rows(&self, rows: &Mat) -> AffineMap {
        AffineMap {
            coeffs: feedforward_map(&self.layout, rows),
            offset: Vector::zeros(rows.nrows()),
        }
    }
}

/// Assembles the conic program for one SCP iteration.
pub fn build_program(
    blocks: &BlockSteeringData,
    objective: &SteeringObjective,
    chance: &[ChanceConstraintSpec],
    terminal: &TerminalConstraint,
    trust: Option<&TrustRegion>,
) -> Result<ConicProgram, SubproblemError> {
    let (big_n, n, m) = (blocks.horizon, blocks.state_dim, blocks.control_dim);
    for (index, c) in chance.iter().enumerate() {
        c.validate(big_n, n, m)
            .map_err(|reason| SubproblemError::Chance { index, reason })?;
    }
    check_objective(objective, big_n, n)?;

    let mut bld = Builder::new(blocks);
    let nv0 = bld.layout.len();
    let mut equalities = Vec::new();
    let mut cones: Vec<SocBlock> = Vec::new();
    let mut cost = Vector::zeros(nv0);
    let cost_offset = 0.0;

    // Quadratic cost terms, collected into y with t ≥ ‖y‖².
    let mut quad: Vec<AffineMap> = Vec::new();
    if !objective.state_weights.is_empty() {
        let fq = stacked_factor(&objective.state_weights, n)?;
        if fq.nrows() > 0 {
            quad.push(bld.closed_loop_spread(&fq));
            if let DesiredTrajectory::Fixed(xd) = &objective.desired {
                let xd_stacked = Vector::from_iterator((big_n + 1) * n, xd.iter().flat_map(|x| x.iter().copied()));
                let mut dev = bld.mean_rows(&fq);
                dev.offset -= &fq * xd_stacked;
                quad.push(dev);
            }
        }
    }
    if !objective.control_weights.is_empty() {
        let fr = stacked_factor(&objective.control_weights, m)?;
        if fr.nrows() > 0 {
            quad.push(bld.control_spread(&fr));
        }
    }
    if !objective.feedforward_weights.is_empty() {
        let frb = stacked_factor(&objective.feedforward_weights, m)?;
        if frb.nrows() > 0 {
            quad.push(bld.feedforward_rows(&frb));
        }
    }

    let quad_y = AffineMap::vstack(&quad, nv0);
    let quad_t = if quad_y.rows() > 0 { Some(bld.layout.push_aux("quadratic_cost")) } else { None };

    let mut pct_t = None;
    let mut pct_q = 0.0;
    if let Some(p) = objective.percentile.as_ref().filter(|p| p.weight > 0.0) {
        pct_q = gaussian_quantile(1.0 - p.probability).map_err(|e| SubproblemError::Objective(e.to_string()))?;
        pct_t = Some(bld.layout.push_aux("percentile_value"));
    }

    let nv = bld.layout.len();
    cost = cost.resize_vertically(nv, 0.0);
    bld.mean.resize(nv);
    let e_n = blocks.state_selector(big_n);

    if let Some(t) = quad_t {
        // ‖(2y, t − 1)‖ ≤ t + 1  ⇔  ‖y‖² ≤ t
        let mut y2 = quad_y.clone();
        y2.resize(nv);
        y2.coeffs *= 2.0;
        y2.offset *= 2.0;
        let mut last = AffineMap::zeros(1, nv);
        last.coeffs[(0, t)] = 1.0;
        last.offset[0] = -1.0;
        let mut head = AffineMap::zeros(1, nv);
        head.coeffs[(0, t)] = 1.0;
        head.offset[0] = 1.0;
        cones.push(SocBlock {
            name: "quadratic_cost".into(),
            head,
            tail: AffineMap::vstack(&[y2, last], nv),
        });
        cost[t] = 1.0;
    }

    if let (Some(t), Some(p)) = (pct_t, objective.percentile.as_ref()) {
        cost[t] += p.weight;
        for (i, term) in p.terms.iter().enumerate() {
            // q ‖spread_i‖ ≤ t − ξ_iᵀX̄_N − c_i
            let xi_row = Mat::from_row_slice(1, n, term.direction.as_slice()) * &e_n;
            let lin = bld.mean_rows(&xi_row);
            let mut head = AffineMap {
                coeffs: -lin.coeffs,
                offset: -lin.offset,
            };
            head.coeffs[(0, t)] += 1.0;
            head.offset[0] -= term.offset;
            let mut tail = bld.closed_loop_spread(&xi_row);
            tail.resize(nv);
            tail.coeffs *= pct_q;
            tail.offset *= pct_q;
            cones.push(SocBlock {
                name: format!("percentile_term[{i}]"),
                head,
                tail,
            });
        }
    }

    for (index, c) in chance.iter().enumerate() {
        let q = gaussian_quantile(1.0 - c.probability).map_err(|e| SubproblemError::Chance {
            index,
            reason: e.to_string(),
        })?;
        let dir = Mat::from_row_slice(1, c.direction.len(), &c.direction);
        let (mut tail, lin) = match c.target {
            ChanceTarget::State => {
                let row = &dir * blocks.state_selector(c.step);
                (bld.closed_loop_spread(&row), bld.mean_rows(&row))
            }
            ChanceTarget::Control => {
                let row = &dir * blocks.control_selector(c.step);
                (bld.control_spread(&row), bld.feedforward_rows(&row))
            }
        };
        tail.resize(nv);
        tail.coeffs *= q;
        tail.offset *= q;
        let mut lin = lin;
        lin.resize(nv);
        let head = AffineMap {
            coeffs: -lin.coeffs,
            offset: Vector::from_element(1, c.bound - lin.offset[0]),
        };
        cones.push(SocBlock {
            name: c.name(index),
            head,
            tail,
        });
    }

    if let Some(xf) = &terminal.mean {
        if xf.len() != n {
            return Err(SubproblemError::Dimension(format!("terminal mean has length {}", xf.len())));
        }
        let mut map = bld.mean_rows(&e_n);
        map.offset -= xf;
        equalities.push(EqualityBlock {
            name: "terminal_mean".into(),
            map,
        });
    }

    if let Some(pf) = &terminal.covariance {
        if pf.shape() != (n, n) {
            return Err(SubproblemError::Dimension(format!("terminal covariance is {:?}", pf.shape())));
        }
        let min_ev = crate::linalg::min_eigenvalue(pf);
        if !(min_ev > 0.0) {
            return Err(SubproblemError::TerminalCovariance(format!("minimum eigenvalue {min_ev:e}")));
        }
        let w = sym_inv_sqrt(pf)? * &e_n;
        let mut tail = bld.closed_loop_spread(&w);
        tail.resize(nv);
        cones.push(SocBlock {
            name: "terminal_covariance".into(),
            head: AffineMap::constant(Vector::from_element(1, 1.0), nv),
            tail,
        });
    }

    if let Some(tr) = trust {
        push_trust_cones(&bld, tr, nv, &mut cones)?;
    }

    if let Some(pins) = pin_unused(nv, &cost, &equalities, &cones) {
        equalities.push(pins);
    }

    Ok(ConicProgram {
        layout: bld.layout,
        cost,
        cost_offset,
        equalities,
        cones,
    })
}

/// Variables that enter neither cost nor constraints (e.g. gains when there
/// is no uncertainty) are pinned to zero so the solver sees a well-posed
/// problem; this does not change the optimal value.
fn pin_unused(nv: usize, cost: &Vector, eqs: &[EqualityBlock], cones: &[SocBlock]) -> Option<EqualityBlock> {
    let mut used: Vec<bool> = cost.iter().map(|c| *c != 0.0).collect();
    let maps = eqs
        .iter()
        .map(|e| &e.map.coeffs)
        .chain(cones.iter().flat_map(|c| [&c.head.coeffs, &c.tail.coeffs]));
    for m in maps {
        for (j, u) in used.iter_mut().enumerate() {
            if !*u && m.column(j).iter().any(|x| *x != 0.0) {
                *u = true;
            }
        }
    }
    let unused: Vec<usize> = (0..nv).filter(|j| !used[*j]).collect();
    if unused.is_empty() {
        return None;
    }
    let mut map = AffineMap::zeros(unused.len(), nv);
    for (r, j) in unused.iter().enumerate() {
        map.coeffs[(r, *j)] = 1.0;
    }
    Some(EqualityBlock {
        name: "unused_variables".into(),
        map,
    })
}

fn push_trust_cones(
    bld: &Builder<'_>,
    tr: &TrustRegion,
    nv: usize,
    cones: &mut Vec<SocBlock>,
) -> Result<(), SubproblemError> {
    let blocks = bld.blocks;
    let (big_n, n) = (blocks.horizon, blocks.state_dim);
    if !tr.control_weights.is_empty() {
        if tr.control_weights.len() != big_n || tr.nominal_controls.len() != big_n {
            return Err(SubproblemError::Dimension("control trust region needs N weights and controls".into()));
        }
        for k in 0..big_n {
            let f = psd_factor(&tr.control_weights[k], WEIGHT_FACTOR_TOL)?;
            if f.nrows() == 0 {
                continue;
            }
            let mut tail = bld.feedforward_rows(&(&f * blocks.control_selector(k)));
            tail.resize(nv);
            tail.offset -= &f * &tr.nominal_controls[k];
            cones.push(SocBlock {
                name: format!("control_trust@k={k}"),
                head: AffineMap::constant(Vector::from_element(1, tr.control_radius), nv),
                tail,
            });
        }
    }
    if !tr.state_weights.is_empty() {
        if tr.state_weights.len() != big_n + 1 || tr.nominal_states.len() != big_n + 1 {
            return Err(SubproblemError::Dimension("state trust region needs N+1 weights and states".into()));
        }
        for k in 0..=big_n {
            if tr.state_weights[k].shape() != (n, n) {
                return Err(SubproblemError::Dimension(format!("state trust weight {k} has wrong shape")));
            }
            let f = psd_factor(&tr.state_weights[k], WEIGHT_FACTOR_TOL)?;
            if f.nrows() == 0 {
                continue;
            }
            let mut tail = bld.mean_rows(&(&f * blocks.state_selector(k)));
            tail.offset -= &f * &tr.nominal_states[k];
            cones.push(SocBlock {
                name: format!("state_trust@k={k}"),
                head: AffineMap::constant(Vector::from_element(1, tr.state_radius), nv),
                tail,
            });
        }
    }
    Ok(())
}

fn check_objective(obj: &SteeringObjective, big_n: usize, n: usize) -> Result<(), SubproblemError> {
    let bad = |s: String| Err(SubproblemError::Objective(s));
    if !obj.state_weights.is_empty() && obj.state_weights.len() != big_n + 1 {
        return bad(format!("need {} state weights, got {}", big_n + 1, obj.state_weights.len()));
    }
    if !obj.control_weights.is_empty() && obj.control_weights.len() != big_n {
        return bad(format!("need {big_n} control weights, got {}", obj.control_weights.len()));
    }
    if !obj.feedforward_weights.is_empty() && obj.feedforward_weights.len() != big_n {
        return bad(format!("need {big_n} feedforward weights, got {}", obj.feedforward_weights.len()));
    }
    for w in obj.state_weights.iter().chain(&obj.control_weights).chain(&obj.feedforward_weights) {
        if w.nrows() > 0 && crate::linalg::min_eigenvalue(w) < -1e-12 * crate::linalg::max_eigenvalue(w).abs().max(1.0) {
            return bad("weight matrices must be positive semidefinite".into());
        }
    }
    if let DesiredTrajectory::Fixed(xd) = &obj.desired {
        if xd.len() != big_n + 1 || xd.iter().any(|x| x.len() != n) {
            return bad(format!("desired trajectory needs {} states of length {n}", big_n + 1));
        }
    }
    if let Some(p) = &obj.percentile {
        if p.terms.is_empty() {
            return bad("percentile objective has no terms".into());
        }
        if let Some(t) = p.terms.iter().find(|t| t.direction.len() != n || !t.offset.is_finite()) {
            return bad(format!("percentile direction has length {}", t.direction.len()));
        }
        // the spread enters with a nonnegative quantile only for p ≤ 1/2
        if !(p.probability > 0.0 && p.probability <= 0.5) {
            return bad(format!("percentile level {} outside (0, 0.5]", p.probability));
        }
        if !(p.weight >= 0.0) {
            return bad("percentile weight must be nonnegative".into());
        }
    }
    Ok(())
}

/// Optimizer output unpacked into the steering quantities.
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    /// Stacked `L`, `Nm × (N+1)n`.
    pub l: Mat,
    /// Stacked gains `K = L(I+𝐁L)⁻¹`.
    pub k: Mat,
    pub v: Vector,
    /// `X̄` for the optimal `V`.
    pub mean_states: Vector,
    pub objective: f64,
    /// Largest normalized constraint violation and its block name.
    pub worst_violation: f64,
    pub worst_constraint: Option<String>,
    pub iterations: u32,
    pub solve_time: f64,
    pub solver_message: String,
    /// Auxiliary variable values by name.
    pub aux: Vec<(String, f64)>,
}

/// Largest violation with each block normalized by its largest coefficient,
/// the same scaling the reference adapter applies.
pub fn normalized_worst_violation(program: &ConicProgram, z: &Vector) -> (Option<String>, f64) {
    let scale = |maps: &[&AffineMap]| {
        let s = maps
            .iter()
            .map(|m| m.coeffs.amax().max(m.offset.amax()))
            .fold(0.0_f64, f64::max);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let mut worst: (Option<String>, f64) = (None, 0.0);
    for e in &program.equalities {
        for r in 0..e.map.rows() {
            let row = e.map.coeffs.row(r);
            let s = row.amax().max(e.map.offset[r].abs()).max(f64::MIN_POSITIVE);
            let v = (row.dot(&z.transpose()) + e.map.offset[r]).abs() / s;
            if v > worst.1 {
                worst = (Some(e.name.clone()), v);
            }
        }
    }
    for c in &program.cones {
        let v = c.violation(z) / scale(&[&c.head, &c.tail]);
        if v > worst.1 {
            worst = (Some(c.name.clone()), v);
        }
    }
    worst
}

/// Solves `program` and unpacks `(L, V)`.
pub fn solve_program(
    adapter: &dyn SolverAdapter,
    program: &ConicProgram,
    blocks: &BlockSteeringData,
) -> Result<SubproblemSolution, SubproblemError> {
    let out = adapter.solve(program);
    let z = match (out.status, out.x) {
        (SolveStatus::Optimal, Some(z)) => z,
        (status, _) => {
            let mut detail = format!("{}: {}", adapter.name(), out.message);
            if status == SolveStatus::Infeasible {
                let names: Vec<&str> = program
                    .cones
                    .iter()
                    .map(|c| c.name.as_str())
                    .chain(program.equalities.iter().map(|e| e.name.as_str()))
                    .collect();
                detail.push_str(&format!("; constraints: {}", names.join(", ")));
            }
            return Err(SubproblemError::Solver { status, detail });
        }
    };
    let layout = &program.layout;
    let l = layout.unpack_gain(&z);
    let v = layout.unpack_feedforward(&z);
    let k = gains_from_l(&l, &blocks.b)?;
    let (worst_constraint, worst_violation) = normalized_worst_violation(program, &z);
    if worst_violation > CONE_SLACK_TOLERANCE {
        log::warn!(
            "subproblem solution violates {} by {worst_violation:.3e} (normalized)",
            worst_constraint.as_deref().unwrap_or("?")
        );
    }
    let aux = layout
        .aux_names
        .iter()
        .enumerate()
        .map(|(a, name)| (name.clone(), z[layout.aux_index(a)]))
        .collect();
    Ok(SubproblemSolution {
        mean_states: blocks.mean_states(&v),
        objective: program.objective(&z),
        l,
        k,
        v,
        worst_violation,
        worst_constraint,
        iterations: out.iterations,
        solve_time: out.solve_time,
        solver_message: out.message,
        aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelAdapter;
    use crate::discretize::DiscreteLtvProblem;
    use crate::blocks::assemble_blocks;

    fn di_ltv(big_n: usize, cov_scale: f64) -> DiscreteLtvProblem {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.5, 1.0]);
        let g = Vector::from_vec(vec![0.5, 1.0]);
        let mut cov = Mat::zeros(2 * big_n, 2 * big_n);
        for k in 0..big_n {
            cov.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&(&g * g.transpose() * cov_scale));
        }
        DiscreteLtvProblem {
            a: vec![a; big_n],
            b: vec![b; big_n],
            c: vec![Vector::zeros(2); big_n],
            disturbance_mean: Vector::zeros(2 * big_n),
            disturbance_cov: cov,
            quad_nodes: 0,
            repair_fraction: 0.0,
            segments: vec![],
        }
    }

    #[test]
    fn gain_map_matches_direct_product() {
        let layout = DecisionLayout::new(3, 2, 1);
        let z = Vector::from_fn(layout.len(), |i, _| (i as f64 * 0.37).sin());
        let l = layout.unpack_gain(&z);
        let left = Mat::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 1.5);
        let right = Mat::from_fn(8, 3, |i, j| ((i * 3 + j) as f64).cos());
        let direct = row_major(&(&left * &l * &right));
        let via = gain_map(&layout, &left, &right) * &z;
        assert!((direct - via).abs().max() < 1e-12);
    }

    #[test]
    fn deterministic_min_energy_matches_pseudo_inverse() {
        let big_n = 5;
        let blocks = assemble_blocks(&di_ltv(big_n, 0.0), &Vector::from_vec(vec![0.1, 0.1]), &Mat::zeros(2, 2)).unwrap();
        let mut obj = SteeringObjective::empty();
        obj.feedforward_weights = vec![Mat::identity(1, 1); big_n];
        let xf = Vector::from_vec(vec![0.6, 0.1]);
        let term = TerminalConstraint {
            mean: Some(xf.clone()),
            covariance: None,
        };
        let prog = build_program(&blocks, &obj, &[], &term, None).unwrap();
        let sol = solve_program(&ClarabelAdapter::default(), &prog, &blocks).unwrap();

        let e_n = blocks.state_selector(big_n);
        let a = &e_n * &blocks.b;
        let rhs = &xf - &e_n * blocks.mean_offset();
        let v_star = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * rhs;
        let rel = (&sol.v - &v_star).norm() / v_star.norm().max(1e-12);
        assert!(rel < 1e-6, "{rel}");
        assert!((sol.objective - v_star.norm_squared()).abs() < 1e-6 * v_star.norm_squared().max(1.0));
    }

    #[test]
    fn empty_program_gives_zero() {
        let blocks = assemble_blocks(&di_ltv(2, 0.0), &Vector::zeros(2), &Mat::zeros(2, 2)).unwrap();
        let prog = build_program(&blocks, &SteeringObjective::empty(), &[], &TerminalConstraint::default(), None).unwrap();
        let sol = solve_program(&ClarabelAdapter::default(), &prog, &blocks).unwrap();
        assert!(sol.objective.abs() < 1e-9);
        assert!(sol.v.amax() < 1e-9 && sol.l.amax() < 1e-9);
    }

    #[test]
    fn rejects_bad_probability() {
        let blocks = assemble_blocks(&di_ltv(2, 1e-4), &Vector::zeros(2), &Mat::zeros(2, 2)).unwrap();
        let c = ChanceConstraintSpec {
            target: ChanceTarget::State,
            step: 1,
            direction: vec![1.0, 0.0],
            bound: 1.0,
            probability: 0.6,
        };
        let err = build_program(&blocks, &SteeringObjective::empty(), &[c], &TerminalConstraint::default(), None);
        assert!(matches!(err, Err(SubproblemError::Chance { index: 0, .. })));
    }

    #[test]
    fn tiny_terminal_covariance_is_infeasible() {
        let blocks = assemble_blocks(&di_ltv(1, 1e-2), &Vector::zeros(2), &Mat::zeros(2, 2)).unwrap();
        let term = TerminalConstraint {
            mean: None,
            covariance: Some(Mat::identity(2, 2) * 1e-12),
        };
        let prog = build_program(&blocks, &SteeringObjective::empty(), &[], &term, None).unwrap();
        let err = solve_program(&ClarabelAdapter::default(), &prog, &blocks).unwrap_err();
        assert!(matches!(err, SubproblemError::Solver { status: SolveStatus::Infeasible, .. }), "{err}");
    }

    #[test]
    fn chance_cones_hold_analytically() {
        let big_n = 5;
        let blocks = assemble_blocks(
            &di_ltv(big_n, 1e-4),
            &Vector::from_vec(vec![0.1, 0.1]),
            &Mat::from_diagonal(&Vector::from_vec(vec![1e-4, 1e-5])),
        )
        .unwrap();
        let p = 0.00135;
        let chance: Vec<ChanceConstraintSpec> = (0..=big_n)
            .map(|k| ChanceConstraintSpec {
                target: ChanceTarget::State,
                step: k,
                direction: vec![1.0, 0.0],
                bound: 0.7,
                probability: p,
            })
            .collect();
        let mut obj = SteeringObjective::empty();
        obj.control_weights = vec![Mat::identity(1, 1); big_n];
        obj.feedforward_weights = vec![Mat::identity(1, 1); big_n];
        let term = TerminalConstraint {
            mean: Some(Vector::from_vec(vec![0.6, 0.1])),
            covariance: None,
        };
        let prog = build_program(&blocks, &obj, &chance, &term, None).unwrap();
        let sol = solve_program(&ClarabelAdapter::default(), &prog, &blocks).unwrap();
        let cov = blocks.state_covariance(&sol.l);
        for k in 0..=big_n {
            let mean = sol.mean_states[2 * k];
            let sd = cov[(2 * k, 2 * k)].sqrt();
            let prob_ok = crate::stats::normal_cdf((0.7 - mean) / sd.max(1e-300));
            assert!(prob_ok >= 1.0 - p - 1e-6, "k={k}: {prob_ok}");
        }
    }
}
