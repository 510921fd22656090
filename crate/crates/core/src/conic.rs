//! Solver-neutral second-order cone programs and the adapter contract.
//!
//! A [`ConicProgram`] minimizes `costᵀz + cost_offset` subject to affine
//! equalities `M z + c = 0` and cones `‖T z + t‖₂ ≤ hᵀz + h₀`.
//!
//! # Text dump
//!
//! [`ConicProgram::to_text`] writes a line-oriented canonical form:
//!
//! ```text
//! covsteer-conic 1
//! layout horizon <N> state_dim <n> control_dim <m> gain <nL> feedforward <nV> aux <na>
//! aux <name>                          # one per auxiliary variable
//! cost <offset> <c_0> … <c_{len-1}>   # dense
//! eq <name> <rows>
//! row <const> <j>:<coef> …            # `rows` lines, sparse
//! soc <name> <tail rows>
//! head <const> <j>:<coef> …
//! row <const> <j>:<coef> …            # `tail rows` lines
//! end
//! ```

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use crate::linalg::{Mat, Vector};

/// Positions of the decision variables: the free entries of the block
/// lower-triangular `L` (`k` major, then `ℓ ≤ k`, then row-major within the
/// `m × n` block), then `V`, then named auxiliaries.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub aux_names: Vec<String>,
}

impl DecisionLayout {
    pub fn new(horizon: usize, state_dim: usize, control_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            control_dim,
            aux_names: Vec::new(),
        }
    }

    pub fn n_gain(&self) -> usize {
        self.control_dim * self.state_dim * self.horizon * (self.horizon + 1) / 2
    }

    pub fn n_feedforward(&self) -> usize {
        self.horizon * self.control_dim
    }

    pub fn n_aux(&self) -> usize {
        self.aux_names.len()
    }

    pub fn len(&self) -> usize {
        self.n_gain() + self.n_feedforward() + self.n_aux()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of `L[(k, i), (ℓ, j)]` for `ℓ ≤ k < N`.
    pub fn gain_index(&self, k: usize, l: usize, i: usize, j: usize) -> usize {
        debug_assert!(l <= k && k < self.horizon);
        let (m, n) = (self.control_dim, self.state_dim);
        ((k * (k + 1) / 2 + l) * m + i) * n + j
    }

    pub fn feedforward_index(&self, k: usize, i: usize) -> usize {
        self.n_gain() + k * self.control_dim + i
    }

    pub fn aux_index(&self, a: usize) -> usize {
        self.n_gain() + self.n_feedforward() + a
    }

    /// Appends an auxiliary variable and returns its index in `z`.
    pub fn push_aux(&mut self, name: impl Into<String>) -> usize {
        self.aux_names.push(name.into());
        self.aux_index(self.aux_names.len() - 1)
    }

    /// Stacked `L` (`Nm × (N+1)n`) from a decision vector.
    pub fn unpack_gain(&self, z: &Vector) -> Mat {
        let (big_n, m, n) = (self.horizon, self.control_dim, self.state_dim);
        let mut l = Mat::zeros(big_n * m, (big_n + 1) * n);
        for k in 0..big_n {
            for ll in 0..=k {
                for i in 0..m {
                    for j in 0..n {
                        l[(k * m + i, ll * n + j)] = z[self.gain_index(k, ll, i, j)];
                    }
                }
            }
        }
        l
    }

    pub fn unpack_feedforward(&self, z: &Vector) -> Vector {
        z.rows(self.n_gain(), self.n_feedforward()).into_owned()
    }

    /// Decision vector holding `l`'s free entries and `v`; auxiliaries zero.
    pub fn pack(&self, l: &Mat, v: &Vector) -> Vector {
        let (big_n, m, n) = (self.horizon, self.control_dim, self.state_dim);
        let mut z = Vector::zeros(self.len());
        for k in 0..big_n {
            for ll in 0..=k {
                for i in 0..m {
                    for j in 0..n {
                        z[self.gain_index(k, ll, i, j)] = l[(k * m + i, ll * n + j)];
                    }
                }
            }
        }
        z.rows_mut(self.n_gain(), self.n_feedforward()).copy_from(v);
        z
    }
}

/// `coeffs · z + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub coeffs: Mat,
    pub offset: Vector,
}

impl AffineMap {
    pub fn zeros(rows: usize, nvar: usize) -> Self {
        Self {
            coeffs: Mat::zeros(rows, nvar),
            offset: Vector::zeros(rows),
        }
    }

    pub fn constant(offset: Vector, nvar: usize) -> Self {
        Self {
            coeffs: Mat::zeros(offset.len(), nvar),
            offset,
        }
    }

    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, z: &Vector) -> Vector {
        &self.coeffs * z + &self.offset
    }

    /// Stacks maps vertically.
    pub fn vstack(parts: &[AffineMap], nvar: usize) -> Self {
        let rows: usize = parts.iter().map(AffineMap::rows).sum();
        let mut out = Self::zeros(rows, nvar);
        let mut r = 0;
        for p in parts {
            out.coeffs.view_mut((r, 0), (p.rows(), nvar)).copy_from(&p.coeffs);
            out.offset.rows_mut(r, p.rows()).copy_from(&p.offset);
            r += p.rows();
        }
        out
    }

    /// Widens the coefficient matrix to `nvar` columns (new columns zero).
    pub fn resize(&mut self, nvar: usize) {
        if self.coeffs.ncols() != nvar {
            let old = std::mem::replace(&mut self.coeffs, Mat::zeros(0, 0));
            self.coeffs = old.resize_horizontally(nvar, 0.0);
        }
    }
}

/// `‖tail(z)‖₂ ≤ head(z)`; an empty tail means `head(z) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub name: String,
    pub head: AffineMap,
    pub tail: AffineMap,
}

impl SocBlock {
    /// `‖tail‖ − head`; positive means violated.
    pub fn violation(&self, z: &Vector) -> f64 {
        self.tail.eval(z).norm() - self.head.eval(z)[0]
    }
}

/// `map(z) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityBlock {
    pub name: String,
    pub map: AffineMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub layout: DecisionLayout,
    pub cost: Vector,
    pub cost_offset: f64,
    pub equalities: Vec<EqualityBlock>,
    pub cones: Vec<SocBlock>,
}

impl ConicProgram {
    pub fn nvar(&self) -> usize {
        self.layout.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        self.cost.dot(z) + self.cost_offset
    }

    /// Dimension consistency of every block.
    pub fn check(&self) -> Result<(), String> {
        let nv = self.nvar();
        if self.cost.len() != nv {
            return Err(format!("cost has {} entries for {nv} variables", self.cost.len()));
        }
        for e in &self.equalities {
            if e.map.coeffs.shape() != (e.map.rows(), nv) {
                return Err(format!("equality {} has inconsistent shape", e.name));
            }
        }
        for c in &self.cones {
            if c.head.rows() != 1 || c.head.coeffs.ncols() != nv {
                return Err(format!("cone {} head must be a single row over {nv} variables", c.name));
            }
            if c.tail.coeffs.shape() != (c.tail.rows(), nv) {
                return Err(format!("cone {} tail has inconsistent shape", c.name));
            }
        }
        Ok(())
    }

    /// Largest constraint violation at `z` and the name of the offending block.
    pub fn worst_violation(&self, z: &Vector) -> (Option<String>, f64) {
        let mut worst: (Option<String>, f64) = (None, 0.0);
        for e in &self.equalities {
            let v = e.map.eval(z).amax();
            if v > worst.1 {
                worst = (Some(e.name.clone()), v);
            }
        }
        for c in &self.cones {
            let v = c.violation(z);
            if v > worst.1 {
                worst = (Some(c.name.clone()), v);
            }
        }
        worst
    }

    pub fn to_text(&self) -> String {
        fn row(out: &mut String, tag: &str, coeffs: &Mat, offset: &Vector, r: usize) {
            let _ = write!(out, "{tag} {:e}", offset[r]);
            for (j, c) in coeffs.row(r).iter().enumerate() {
                if *c != 0.0 {
                    let _ = write!(out, " {j}:{c:e}");
                }
            }
            out.push('\n');
        }
        let l = &self.layout;
        let mut out = String::from("covsteer-conic 1\n");
        let _ = writeln!(
            out,
            "layout horizon {} state_dim {} control_dim {} gain {} feedforward {} aux {}",
            l.horizon,
            l.state_dim,
            l.control_dim,
            l.n_gain(),
            l.n_feedforward(),
            l.n_aux()
        );
        for a in &l.aux_names {
            let _ = writeln!(out, "aux {a}");
        }
        let _ = write!(out, "cost {:e}", self.cost_offset);
        for c in self.cost.iter() {
            let _ = write!(out, " {c:e}");
        }
        out.push('\n');
        for e in &self.equalities {
            let _ = writeln!(out, "eq {} {}", e.name, e.map.rows());
            for r in 0..e.map.rows() {
                row(&mut out, "row", &e.map.coeffs, &e.map.offset, r);
            }
        }
        for c in &self.cones {
            let _ = writeln!(out, "soc {} {}", c.name, c.tail.rows());
            row(&mut out, "head", &c.head.coeffs, &c.head.offset, 0);
            for r in 0..c.tail.rows() {
                row(&mut out, "row", &c.tail.coeffs, &c.tail.offset, r);
            }
        }
        out.push_str("end\n");
        out
    }
}

/// What an adapter can handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub second_order_cone: bool,
    pub semidefinite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Primal solution when `status` is `Optimal`.
    pub x: Option<Vector>,
    pub iterations: u32,
    pub solve_time: f64,
    /// Solver-specific detail, e.g. the raw status.
    pub message: String,
}

/// Contract between program construction and a numerical solver.
pub trait SolverAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn solve(&self, program: &ConicProgram) -> SolveOutcome;
}

/// Interior-point reference adapter backed by Clarabel.
#[derive(Debug, Clone)]
pub struct ClarabelAdapter {
    pub tolerance: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for ClarabelAdapter {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iter: 500,
            verbose: false,
        }
    }
}

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Triplets {
    /// Appends `sign · coeffs` rows with right-hand side `rhs_sign · offset`,
    /// scaled by `1 / scale`.
    fn push(&mut self, map: &AffineMap, sign: f64, scale: f64) {
        let base = self.b.len();
        for r in 0..map.rows() {
            for (j, c) in map.coeffs.row(r).iter().enumerate() {
                if *c != 0.0 {
                    self.rows.push(base + r);
                    self.cols.push(j);
                    self.vals.push(sign * c / scale);
                }
            }
            self.b.push(-sign * map.offset[r] / scale);
        }
    }
}

fn block_scale(maps: &[&AffineMap]) -> f64 {
    let s = maps
        .iter()
        .map(|m| m.coeffs.amax().max(m.offset.amax()))
        .fold(0.0_f64, f64::max);
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

impl SolverAdapter for ClarabelAdapter {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            second_order_cone: true,
            semidefinite: false,
        }
    }

    fn solve(&self, program: &ConicProgram) -> SolveOutcome {
        let start = Instant::now();
        let fail = |message: String| SolveOutcome {
            status: SolveStatus::NumericalFailure,
            x: None,
            iterations: 0,
            solve_time: start.elapsed().as_secs_f64(),
            message,
        };
        if let Err(e) = program.check() {
            return fail(e);
        }
        let nv = program.nvar();
        let mut t = Triplets {
            rows: vec![],
            cols: vec![],
            vals: vec![],
            b: vec![],
        };
        let mut cones = Vec::new();
        // Clarabel form: A z + s = b, s ∈ K. Each block is normalized by its
        // largest coefficient, which leaves its feasible set unchanged.
        for e in &program.equalities {
            if e.map.rows() == 0 {
                continue;
            }
            for r in 0..e.map.rows() {
                let single = AffineMap {
                    coeffs: e.map.coeffs.rows(r, 1).into_owned(),
                    offset: e.map.offset.rows(r, 1).into_owned(),
                };
                t.push(&single, 1.0, block_scale(&[&single]));
            }
            cones.push(SupportedConeT::ZeroConeT(e.map.rows()));
        }
        for c in &program.cones {
            let scale = block_scale(&[&c.head, &c.tail]);
            t.push(&c.head, -1.0, scale);
            if c.tail.rows() == 0 {
                cones.push(SupportedConeT::NonnegativeConeT(1));
            } else {
                t.push(&c.tail, -1.0, scale);
                cones.push(SupportedConeT::SecondOrderConeT(1 + c.tail.rows()));
            }
        }
        let m_rows = t.b.len();
        let a = CscMatrix::new_from_triplets(m_rows, nv, t.rows, t.cols, t.vals);
        let p = CscMatrix::new_from_triplets(nv, nv, vec![], vec![], vec![]);
        let q: Vec<f64> = program.cost.iter().copied().collect();

        let settings = DefaultSettings {
            verbose: self.verbose,
            max_iter: self.max_iter,
            tol_gap_abs: self.tolerance,
            tol_gap_rel: self.tolerance,
            tol_feas: self.tolerance,
            tol_ktratio: 1e-7,
            ..DefaultSettings::default()
        };
        let mut solver = match DefaultSolver::new(&p, &q, &a, &t.b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return fail(format!("clarabel setup: {e:?}")),
        };
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericalFailure,
        };
        SolveOutcome {
            status,
            x: (status == SolveStatus::Optimal).then(|| Vector::from_column_slice(&sol.x)),
            iterations: sol.iterations,
            solve_time: start.elapsed().as_secs_f64(),
            message: format!("{:?}", sol.status),
        }
    }
}
