//! Controlled systems driven by a scalar random field: `ẋ = f(x, u, Ψ(φ(x)))`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state outside the model domain: {0}")]
    Domain(String),
    #[error("expected {what} of dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("density table: {0}")]
    DensityTable(String),
}

/// Partial derivatives of `f` with respect to state, control and field value.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    pub a: Mat,
    pub b: Mat,
    pub g: Vector,
}

pub trait SystemModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn index_dim(&self) -> usize;

    fn dynamics(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Vector, ModelError>;

    /// Field index point `φ(x)`.
    fn index_point(&self, x: &Vector) -> Vec<f64>;

    fn jacobians(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Jacobians, ModelError> {
        finite_difference_jacobians(self, x, u, psi)
    }
}

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// Central-difference Jacobians with per-component step `1e-6 * max(1, |value|)`.
pub fn finite_difference_jacobians<M: SystemModel + ?Sized>(
    model: &M,
    x: &Vector,
    u: &Vector,
    psi: f64,
) -> Result<Jacobians, ModelError> {
    let n = model.state_dim();
    let m = model.control_dim();
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let d = (model.dynamics(&xp, u, psi)? - model.dynamics(&xm, u, psi)?) / (2.0 * h);
        a.set_column(j, &d);
    }
    for j in 0..m {
        let h = fd_step(u[j]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let d = (model.dynamics(x, &up, psi)? - model.dynamics(x, &um, psi)?) / (2.0 * h);
        b.set_column(j, &d);
    }
    let h = fd_step(psi);
    let g = (model.dynamics(x, u, psi + h)? - model.dynamics(x, u, psi - h)?) / (2.0 * h);
    Ok(Jacobians { a, b, g })
}

/// One-dimensional double integrator pushed by a position-dependent force:
/// `ṙ = v`, `v̇ = u + Ψ(r)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleIntegrator;

impl SystemModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn index_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Vector, ModelError> {
        Ok(Vector::from_vec(vec![x[1], u[0] + psi]))
    }

    fn index_point(&self, x: &Vector) -> Vec<f64> {
        vec![x[0]]
    }

    fn jacobians(&self, _x: &Vector, _u: &Vector, _psi: f64) -> Result<Jacobians, ModelError> {
        Ok(Jacobians {
            a: Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            g: Vector::from_vec(vec![0.0, 1.0]),
        })
    }
}

/// Nominal atmospheric density as a function of altitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityProfile {
    /// `ρ̄(h) = ρ₀ exp(−h / H)`.
    Exponential {
        surface_density: f64,
        scale_height: f64,
    },
    /// Log-linear interpolation of tabulated `(altitude, density)` pairs.
    Table {
        altitudes: Vec<f64>,
        densities: Vec<f64>,
    },
}

impl DensityProfile {
    /// Reads a two-column CSV of altitude (m) and density (kg/m³). Lines
    /// starting with `#` and a non-numeric header line are skipped.
    pub fn from_csv_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::DensityTable(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, ModelError> {
        let mut altitudes = Vec::new();
        let mut densities = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(ModelError::DensityTable(format!(
                    "line {}: expected 2 columns",
                    lineno + 1
                )));
            }
            match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
                (Ok(h), Ok(rho)) => {
                    altitudes.push(h);
                    densities.push(rho);
                }
                _ if altitudes.is_empty() => continue,
                _ => {
                    return Err(ModelError::DensityTable(format!(
                        "line {}: not numeric",
                        lineno + 1
                    )))
                }
            }
        }
        let profile = DensityProfile::Table {
            altitudes,
            densities,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            DensityProfile::Exponential {
                surface_density,
                scale_height,
            } => {
                if !(*surface_density > 0.0 && *scale_height > 0.0) {
                    return Err(ModelError::InvalidParameter(
                        "exponential density needs positive surface density and scale height".into(),
                    ));
                }
            }
            DensityProfile::Table {
                altitudes,
                densities,
            } => {
                if altitudes.len() < 2 || altitudes.len() != densities.len() {
                    return Err(ModelError::DensityTable(
                        "need at least two (altitude, density) rows".into(),
                    ));
                }
                if altitudes.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ModelError::DensityTable(
                        "altitudes must be strictly increasing".into(),
                    ));
                }
                if densities.iter().any(|&d| !(d > 0.0)) {
                    return Err(ModelError::DensityTable("densities must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Density and its altitude derivative.
    pub fn eval(&self, h: f64) -> (f64, f64) {
        match self {
            DensityProfile::Exponential {
                surface_density,
                scale_height,
            } => {
                let rho = surface_density * (-h / scale_height).exp();
                (rho, -rho / scale_height)
            }
            DensityProfile::Table {
                altitudes,
                densities,
            } => {
                let n = altitudes.len();
                let i = altitudes.partition_point(|&a| a <= h).clamp(1, n - 1) - 1;
                let (h0, h1) = (altitudes[i], altitudes[i + 1]);
                let (l0, l1) = (densities[i].ln(), densities[i + 1].ln());
                let slope = (l1 - l0) / (h1 - h0);
                let rho = (l0 + slope * (h - h0)).exp();
                (rho, rho * slope)
            }
        }
    }
}

/// Vehicle, planet and target-orbit constants for longitudinal aerocapture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AerocaptureParams {
    /// Mass over drag area, kg/m².
    pub ballistic_coefficient: f64,
    pub lift_to_drag: f64,
    /// Gravitational parameter, m³/s².
    pub mu: f64,
    pub planet_radius: f64,
    pub target_apoapsis_radius: f64,
    pub target_periapsis_radius: f64,
    pub density: DensityProfile,
}

impl AerocaptureParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("ballistic_coefficient", self.ballistic_coefficient),
            ("lift_to_drag", self.lift_to_drag),
            ("mu", self.mu),
            ("planet_radius", self.planet_radius),
            ("target_apoapsis_radius", self.target_apoapsis_radius),
            ("target_periapsis_radius", self.target_periapsis_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.target_apoapsis_radius > self.target_periapsis_radius
            && self.target_periapsis_radius > self.planet_radius)
        {
            return Err(ModelError::InvalidParameter(
                "need target apoapsis > target periapsis > planet radius".into(),
            ));
        }
        self.density.validate()
    }
}

/// Planar atmospheric flight with state `(r, v, γ)`, control the bank-angle
/// cosine and field value the fractional density variation `δρ(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aerocapture {
    pub params: AerocaptureParams,
}

impl Aerocapture {
    pub fn new(params: AerocaptureParams) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn altitude(&self, r: f64) -> f64 {
        r - self.params.planet_radius
    }

    /// Density at radius `r` with variation `δρ`, clamped at zero, plus its
    /// derivatives with respect to `r` and `δρ`.
    fn density(&self, r: f64, delta: f64) -> (f64, f64, f64) {
        let (nom, dnom) = self.params.density.eval(self.altitude(r));
        let scale = 1.0 + delta;
        if scale <= 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            (nom * scale, dnom * scale, nom)
        }
    }

    /// Dynamic pressure `ρ̄ v² / 2` (zero density variation) and its state gradient.
    pub fn dynamic_pressure(&self, x: &Vector) -> (f64, Vector) {
        let (rho, drho) = self.params.density.eval(self.altitude(x[0]));
        let v = x[1];
        let q = 0.5 * rho * v * v;
        (q, Vector::from_vec(vec![0.5 * drho * v * v, rho * v, 0.0]))
    }

    fn check_domain(&self, x: &Vector) -> Result<(), ModelError> {
        if !(x[0] > 0.9 * self.params.planet_radius) {
            return Err(ModelError::Domain(format!(
                "radius {:.1} m below 0.9 planet radii",
                x[0]
            )));
        }
        if !(x[1] > 0.0) {
            return Err(ModelError::Domain(format!("non-positive speed {}", x[1])));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Domain("non-finite state".into()));
        }
        Ok(())
    }
}

impl SystemModel for Aerocapture {
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn index_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Vector, ModelError> {
        self.check_domain(x)?;
        let p = &self.params;
        let (r, v, gamma) = (x[0], x[1], x[2]);
        let (rho, _, _) = self.density(r, psi);
        let (sg, cg) = gamma.sin_cos();
        let two_b = 2.0 * p.ballistic_coefficient;
        Ok(Vector::from_vec(vec![
            v * sg,
            -rho * v * v / two_b - p.mu * sg / (r * r),
            rho * v * p.lift_to_drag * u[0] / two_b - (p.mu / (r * r) - v * v / r) * cg / v,
        ]))
    }

    fn index_point(&self, x: &Vector) -> Vec<f64> {
        vec![self.altitude(x[0])]
    }

    fn jacobians(&self, x: &Vector, u: &Vector, psi: f64) -> Result<Jacobians, ModelError> {
        self.check_domain(x)?;
        let p = &self.params;
        let (r, v, gamma) = (x[0], x[1], x[2]);
        let u = u[0];
        let (rho, rho_r, rho_d) = self.density(r, psi);
        let (sg, cg) = gamma.sin_cos();
        let two_b = 2.0 * p.ballistic_coefficient;
        let ld = p.lift_to_drag;
        let mu = p.mu;
        let (r2, r3) = (r * r, r * r * r);

        let a = Mat::from_row_slice(
            3,
            3,
            &[
                0.0,
                sg,
                v * cg,
                -rho_r * v * v / two_b + 2.0 * mu * sg / r3,
                -2.0 * rho * v / two_b,
                -mu * cg / r2,
                rho_r * v * ld * u / two_b + 2.0 * mu * cg / (r3 * v) - v * cg / r2,
                rho * ld * u / two_b + mu * cg / (r2 * v * v) + cg / r,
                mu * sg / (r2 * v) - v * sg / r,
            ],
        );
        let b = Mat::from_row_slice(3, 1, &[0.0, 0.0, rho * v * ld / two_b]);
        let g = Vector::from_vec(vec![
            0.0,
            -rho_d * v * v / two_b,
            rho_d * v * ld * u / two_b,
        ]);
        Ok(Jacobians { a, b, g })
    }
}
