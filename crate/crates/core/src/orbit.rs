//! Post-atmospheric orbit math: exit-orbit apoapsis and the two-burn Δv
//! needed to reach a target apoapsis/periapsis pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("exit orbit is not captured (2μ/r − v² = {0:.6e})")]
    NotCaptured(f64),
    #[error("negative discriminant {0:.3e} in the apoapsis formula")]
    NegativeDiscriminant(f64),
    #[error("exit apoapsis {apoapsis:.1} m does not exceed the target periapsis {target:.1} m")]
    ApoapsisBelowTarget { apoapsis: f64, target: f64 },
    #[error("invalid exit state: {0}")]
    InvalidState(String),
}

/// Radius, speed and flight-path angle at the end of atmospheric flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitState {
    pub r: f64,
    pub v: f64,
    pub gamma: f64,
}

impl ExitState {
    pub fn from_state(x: &Vector) -> Self {
        Self {
            r: x[0],
            v: x[1],
            gamma: x[2],
        }
    }

    fn check(&self) -> Result<(), OrbitError> {
        if self.r > 0.0 && self.v > 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(OrbitError::InvalidState(format!("{self:?}")))
        }
    }
}

/// Target orbit and gravitational parameter for the correction burns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetOrbit {
    pub mu: f64,
    pub apoapsis_radius: f64,
    pub periapsis_radius: f64,
}

/// Apoapsis radius of the osculating orbit at `exit`.
pub fn exit_orbit_apoapsis(exit: &ExitState, mu: f64) -> Result<f64, OrbitError> {
    exit.check()?;
    let energy_term = 2.0 * mu / exit.r - exit.v * exit.v;
    if !(energy_term > 0.0) {
        return Err(OrbitError::NotCaptured(energy_term));
    }
    let a = mu / energy_term;
    let h = exit.r * exit.v * exit.gamma.cos();
    let disc = 1.0 - h * h / (mu * a);
    if disc < 0.0 {
        // Round-off on circular orbits can push this a hair below zero.
        if disc > -1e-12 {
            return Ok(a);
        }
        return Err(OrbitError::NegativeDiscriminant(disc));
    }
    Ok(a * (1.0 + disc.sqrt()))
}

/// `(Δv₁, v_p⁺ − v_p⁻)`: the periapsis-raise burn at the exit apoapsis and the
/// signed apoapsis-correction velocity change at the target periapsis.
pub fn delta_v_parts(exit: &ExitState, target: &TargetOrbit) -> Result<(f64, f64), OrbitError> {
    let mu = target.mu;
    let ra = exit_orbit_apoapsis(exit, mu)?;
    let rp_t = target.periapsis_radius;
    if !(ra > rp_t) {
        return Err(OrbitError::ApoapsisBelowTarget {
            apoapsis: ra,
            target: rp_t,
        });
    }
    let va_minus = (exit.v * exit.v + 2.0 * mu * (1.0 / ra - 1.0 / exit.r)).max(0.0).sqrt();
    let va_plus = (2.0 * mu * (1.0 / ra - 1.0 / (ra + rp_t))).sqrt();
    let vp_minus = (2.0 * mu * (1.0 / rp_t - 1.0 / (ra + rp_t))).sqrt();
    let vp_plus = (2.0 * mu * (1.0 / rp_t - 1.0 / (target.apoapsis_radius + rp_t))).sqrt();
    Ok((va_plus - va_minus, vp_plus - vp_minus))
}

/// Total Δv of an apoapsis periapsis-raise burn followed by a periapsis
/// apoapsis-correction burn.
pub fn delta_v(exit: &ExitState, target: &TargetOrbit) -> Result<f64, OrbitError> {
    let (dv1, dv2) = delta_v_parts(exit, target)?;
    Ok(dv1 + dv2.abs())
}

/// `Δv = max(Δv₁ + d, Δv₁ − d)` with `d = v_p⁺ − v_p⁻`: value and state
/// gradient of each smooth branch.
pub fn delta_v_branches(exit: &ExitState, target: &TargetOrbit) -> Result<[(f64, Vector); 2], OrbitError> {
    let (dv1, dv2) = delta_v_parts(exit, target)?;
    let plus = central_gradient(exit, |s| delta_v_parts(s, target).map(|(a, b)| a + b))?;
    let minus = central_gradient(exit, |s| delta_v_parts(s, target).map(|(a, b)| a - b))?;
    Ok([(dv1 + dv2, plus), (dv1 - dv2, minus)])
}

fn central_gradient<F>(exit: &ExitState, f: F) -> Result<Vector, OrbitError>
where
    F: Fn(&ExitState) -> Result<f64, OrbitError>,
{
    let base = [exit.r, exit.v, exit.gamma];
    let mut grad = Vector::zeros(3);
    for i in 0..3 {
        let h = 1e-6 * base[i].abs().max(1.0);
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let to_state = |s: [f64; 3]| ExitState {
            r: s[0],
            v: s[1],
            gamma: s[2],
        };
        grad[i] = (f(&to_state(plus))? - f(&to_state(minus))?) / (2.0 * h);
    }
    Ok(grad)
}

/// `∂Δv/∂(r, v, γ)` by central differences.
pub fn delta_v_gradient(exit: &ExitState, target: &TargetOrbit) -> Result<Vector, OrbitError> {
    central_gradient(exit, |s| delta_v(s, target))
}

/// `∂r_a/∂(r, v, γ)` by central differences.
pub fn apoapsis_gradient(exit: &ExitState, mu: f64) -> Result<Vector, OrbitError> {
    central_gradient(exit, |s| exit_orbit_apoapsis(s, mu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches_bracket_delta_v() {
        let t = target();
        for gamma in [0.05, 0.1, 0.15] {
            let exit = ExitState { r: RP + 125e3, v: 4400.0, gamma };
            let dv = delta_v(&exit, &t).unwrap();
            let [(a, ga), (b, gb)] = delta_v_branches(&exit, &t).unwrap();
            assert!((a.max(b) - dv).abs() < 1e-9 * dv);
            let active = if a >= b { ga } else { gb };
            let g = delta_v_gradient(&exit, &t).unwrap();
            assert!((&active - &g).norm() <= 1e-6 * g.norm());
        }
    }

    const MU: f64 = 4.2828e13;
    const RP: f64 = 3397e3;

    fn target() -> TargetOrbit {
        TargetOrbit {
            mu: MU,
            apoapsis_radius: 5.0 * RP,
            periapsis_radius: 2.0 * RP,
        }
    }

    #[test]
    fn circular_exit_is_its_own_apoapsis() {
        let r = RP + 150e3;
        let e = ExitState {
            r,
            v: (MU / r).sqrt(),
            gamma: 0.0,
        };
        let ra = exit_orbit_apoapsis(&e, MU).unwrap();
        assert!((ra - r).abs() < 1e-6 * r);
    }

    #[test]
    fn parabolic_exit_is_rejected() {
        let r = RP + 150e3;
        let e = ExitState {
            r,
            v: (2.0 * MU / r).sqrt(),
            gamma: 0.1,
        };
        assert!(matches!(exit_orbit_apoapsis(&e, MU), Err(OrbitError::NotCaptured(_))));
    }

    #[test]
    fn exit_on_target_orbit_needs_no_correction() {
        // Point on the target ellipse at radius r: vis-viva speed and the
        // flight-path angle from the angular momentum.
        let t = target();
        let a = 0.5 * (t.apoapsis_radius + t.periapsis_radius);
        let h = (MU * a * (1.0 - ((t.apoapsis_radius - t.periapsis_radius) / (2.0 * a)).powi(2))).sqrt();
        let r = 3.0 * RP;
        let v = (MU * (2.0 / r - 1.0 / a)).sqrt();
        let gamma = (h / (r * v)).acos();
        let dv = delta_v(&ExitState { r, v, gamma }, &t).unwrap();
        assert!(dv.abs() < 1e-6, "{dv}");
    }

    #[test]
    fn apoapsis_below_target_periapsis_is_rejected() {
        let e = ExitState {
            r: RP + 100e3,
            v: 3400.0,
            gamma: 0.0,
        };
        assert!(matches!(
            delta_v(&e, &target()),
            Err(OrbitError::ApoapsisBelowTarget { .. })
        ));
    }
}
