//! Conditional nuclear precession and the NV ground-state resonance model.
//!
//! Nuclear frequencies are in kHz, electronic ones in MHz, times in µs.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spincore::{SpinRotation, Vec3, E_Z};

/// kHz x µs -> cycles.
pub const KHZ_US: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub zero_field_splitting_mhz: f64,
    pub gamma_e_mhz_per_mt: f64,
    pub gamma_c_khz_per_mt: f64,
    pub b0_mt: f64,
    pub nv_axis: Vec3,
    /// Offset of the observed transition caused by the 14N spin. Carried for
    /// bookkeeping only; no computation reads it.
    pub n14_offset_mhz: Option<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            zero_field_splitting_mhz: 2870.4,
            gamma_e_mhz_per_mt: 28.0,
            gamma_c_khz_per_mt: 10.705,
            b0_mt: 36.2,
            nv_axis: E_Z,
            n14_offset_mhz: None,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zero_field_splitting_mhz > 0.0) {
            return Err(Error::domain("zero-field splitting must be positive"));
        }
        if !(self.gamma_e_mhz_per_mt > 0.0) || !(self.gamma_c_khz_per_mt > 0.0) {
            return Err(Error::domain("gyromagnetic ratios must be positive"));
        }
        if !(self.b0_mt >= 0.0) {
            return Err(Error::domain("B0 must be non-negative"));
        }
        if !self.nv_axis.is_unit(1e-9) {
            return Err(Error::domain("nv_axis must be a unit vector"));
        }
        Ok(())
    }

    /// Bare nuclear Larmor frequency in kHz.
    pub fn larmor_khz(&self) -> f64 {
        self.gamma_c_khz_per_mt * self.b0_mt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperfineParams {
    pub a_parallel_khz: f64,
    pub a_perp_khz: f64,
}

impl HyperfineParams {
    pub fn new(a_parallel_khz: f64, a_perp_khz: f64) -> Result<Self> {
        let hf = HyperfineParams {
            a_parallel_khz,
            a_perp_khz,
        };
        hf.validate()?;
        Ok(hf)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a_parallel_khz.is_finite() || !(self.a_perp_khz >= 0.0) {
            return Err(Error::domain("A_perp must be non-negative and both components finite"));
        }
        Ok(())
    }
}

/// Sensor sublevel the nucleus evolves under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorBranch {
    /// m_S = 0
    Zero,
    /// m_S = -1
    MinusOne,
}

/// Nuclear precession conditioned on the sensor sublevel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalPrecession {
    pub f0_khz: f64,
    pub f1_khz: f64,
    pub e_p: Vec3,
    pub theta_p: f64,
    pub e_perp: Vec3,
}

impl ConditionalPrecession {
    /// Uncoupled nucleus precessing at `f0_khz` in both branches.
    pub fn uncoupled(f0_khz: f64) -> Self {
        ConditionalPrecession {
            f0_khz,
            f1_khz: f0_khz,
            e_p: E_Z,
            theta_p: 0.0,
            e_perp: crate::spincore::E_X,
        }
    }

    /// Free evolution `exp(-2 pi i H t)` of the nucleus for `t_us` in one branch.
    /// Both Hamiltonians carry a negative sign, so the precession is clockwise.
    pub fn free_evolution(&self, branch: SensorBranch, t_us: f64) -> SpinRotation {
        let (axis, f) = match branch {
            SensorBranch::Zero => (-E_Z, self.f0_khz),
            SensorBranch::MinusOne => (-self.e_p, self.f1_khz),
        };
        SpinRotation::propagator(axis, TAU * f * t_us * KHZ_US)
            .expect("precession axes are unit vectors")
    }

    pub fn axis(&self, branch: SensorBranch) -> Vec3 {
        match branch {
            SensorBranch::Zero => E_Z,
            SensorBranch::MinusOne => self.e_p,
        }
    }

    pub fn frequency(&self, branch: SensorBranch) -> f64 {
        match branch {
            SensorBranch::Zero => self.f0_khz,
            SensorBranch::MinusOne => self.f1_khz,
        }
    }
}

/// In-plane direction of the transverse hyperfine field for a nucleus at polar
/// angle `theta` and azimuth `phi`. The lower hemisphere, including the
/// equator, points inward.
pub fn e_perp_direction(theta: f64, phi: f64) -> Result<Vec3> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::domain(format!("theta = {theta} rad outside [0, pi]")));
    }
    let v = Vec3::new(phi.cos(), phi.sin(), 0.0);
    Ok(if theta < FRAC_PI_2 { v } else { -v })
}

pub fn conditional_precession(
    cfg: &SensorConfig,
    hf: &HyperfineParams,
    e_perp: Vec3,
) -> Result<ConditionalPrecession> {
    cfg.validate()?;
    hf.validate()?;
    if !e_perp.is_unit(1e-9) || e_perp.z.abs() > 1e-9 {
        return Err(Error::domain("e_perp must be a unit vector in the xy plane"));
    }
    let f0 = cfg.larmor_khz();
    let along = f0 + hf.a_parallel_khz;
    if along == 0.0 && hf.a_perp_khz == 0.0 {
        return Err(Error::DegenerateAxis);
    }
    let f1 = along.hypot(hf.a_perp_khz);
    let theta_p = hf.a_perp_khz.atan2(along);
    let e_p = E_Z * theta_p.cos() + e_perp * theta_p.sin();
    Ok(ConditionalPrecession {
        f0_khz: f0,
        f1_khz: f1,
        e_p,
        theta_p,
        e_perp,
    })
}

/// Transition frequencies `(f_minus, f_plus)` in MHz out of the sublevel
/// with the largest m_S = 0 character, from the exact S = 1 Hamiltonian
/// `D Sz^2 + gamma_e B.S`.
pub fn nv_resonances(d_mhz: f64, gamma_e: f64, b_mt: Vec3, nv_axis: Vec3) -> (f64, f64) {
    let b_par = b_mt.dot(nv_axis);
    let b_perp = (b_mt - nv_axis * b_par).norm();
    let z = gamma_e * b_par;
    let x = gamma_e * b_perp / std::f64::consts::SQRT_2;
    // basis (m_S = +1, 0, -1), transverse field rotated onto x
    let h = Matrix3::new(d_mhz + z, x, 0.0, x, 0.0, x, 0.0, x, d_mhz - z);
    let eig = SymmetricEigen::new(h);
    let ground = (0..3)
        .max_by(|&a, &b| {
            let wa = eig.eigenvectors[(1, a)].abs();
            let wb = eig.eigenvectors[(1, b)].abs();
            wa.total_cmp(&wb)
        })
        .unwrap_or(1);
    let e0 = eig.eigenvalues[ground];
    let mut f: Vec<f64> = (0..3)
        .filter(|&i| i != ground)
        .map(|i| eig.eigenvalues[i] - e0)
        .collect();
    f.sort_by(f64::total_cmp);
    (f[0], f[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    fn reference_prec() -> ConditionalPrecession {
        let hf = HyperfineParams::new(-173.1, 22.3).unwrap();
        let ep = e_perp_direction(deg(94.8), deg(250.9)).unwrap();
        conditional_precession(&SensorConfig::default(), &hf, ep).unwrap()
    }

    #[test]
    fn e_perp_branches() {
        let v = e_perp_direction(deg(30.0), 0.0).unwrap();
        assert!((v - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let v = e_perp_direction(deg(94.8), deg(250.9)).unwrap();
        let want = Vec3::new(-deg(250.9).cos(), -deg(250.9).sin(), 0.0);
        assert!((v - want).norm() < 1e-15);
        let v = e_perp_direction(FRAC_PI_2, 0.0).unwrap();
        assert!((v + Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(e_perp_direction(-0.1, 0.0).is_err());
        assert!(e_perp_direction(3.2, 0.0).is_err());
    }

    #[test]
    fn uncoupled_limit() {
        let hf = HyperfineParams::new(0.0, 0.0).unwrap();
        let p = conditional_precession(&SensorConfig::default(), &hf, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((p.f0_khz - 387.521).abs() < 1e-9);
        assert_eq!(p.f1_khz, p.f0_khz);
        assert_eq!(p.theta_p, 0.0);
        assert!((p.e_p - E_Z).norm() < 1e-15);
    }

    #[test]
    fn reference_coupling() {
        let p = reference_prec();
        assert!((p.f1_khz - 215.6).abs() < 0.1, "f1 = {}", p.f1_khz);
        assert!((p.theta_p.to_degrees() - 5.9).abs() < 0.1);
        assert!(p.f1_khz < p.f0_khz);
        let along = p.f0_khz - 173.1;
        assert!((p.f1_khz - along.hypot(22.3)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_axis_rejected() {
        let cfg = SensorConfig::default();
        let hf = HyperfineParams::new(-cfg.larmor_khz(), 0.0).unwrap();
        assert!(matches!(
            conditional_precession(&cfg, &hf, Vec3::new(1.0, 0.0, 0.0)),
            Err(Error::DegenerateAxis)
        ));
    }

    #[test]
    fn strong_coupling_tilts_past_equator() {
        let cfg = SensorConfig::default();
        let hf = HyperfineParams::new(-500.0, 10.0).unwrap();
        let p = conditional_precession(&cfg, &hf, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(p.theta_p > FRAC_PI_2 && p.theta_p < std::f64::consts::PI);
        assert!(p.f1_khz > 0.0);
    }

    #[test]
    fn free_evolution_is_clockwise() {
        let p = reference_prec();
        let t = 0.3;
        let r = p.free_evolution(SensorBranch::Zero, t);
        let out = r.apply(Vec3::new(1.0, 0.0, 0.0));
        let expected = -TAU * p.f0_khz * t * KHZ_US;
        assert!((out.y.atan2(out.x) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_field_resonances() {
        let (a, b) = nv_resonances(2870.4, 28.0, Vec3::ZERO, E_Z);
        assert!((a - 2870.4).abs() < 1e-9 && (b - 2870.4).abs() < 1e-9);
    }

    #[test]
    fn aligned_field_resonances() {
        let (a, b) = nv_resonances(2870.4, 28.0, E_Z * 36.2, E_Z);
        assert!((a - (2870.4 - 28.0 * 36.2)).abs() < 1e-6);
        assert!((b - (2870.4 + 28.0 * 36.2)).abs() < 1e-6);
        assert!((a - 1856.8).abs() < 0.1 && (b - 3884.0).abs() < 0.1);
    }

    #[test]
    fn transverse_field_second_order_shift() {
        // Second-order perturbation theory for a small field along x: the
        // m_S = 0 level drops by s = (gB)^2/D, the symmetric +-1 combination
        // rises by s and the antisymmetric one stays at D.
        let d = 2870.4;
        let g = 28.0;
        for b in [0.05, 0.1, 0.2] {
            let (lo, hi) = nv_resonances(d, g, Vec3::new(b, 0.0, 0.0), E_Z);
            let s = (g * b).powi(2) / d;
            let tol = 10.0 * (g * b).powi(4) / d.powi(3) + 1e-9;
            assert!((lo - (d + s)).abs() < tol, "lo {lo}");
            assert!((hi - (d + 2.0 * s)).abs() < tol, "hi {hi}");
        }
    }

    proptest! {
        #[test]
        fn f1_invariant_and_axis(apar in -300.0..300.0f64, aperp in 0.0..200.0f64, phi in 0.0..TAU) {
            let cfg = SensorConfig::default();
            let hf = HyperfineParams::new(apar, aperp).unwrap();
            let ep = Vec3::new(phi.cos(), phi.sin(), 0.0);
            let p = conditional_precession(&cfg, &hf, ep).unwrap();
            prop_assert!((p.f1_khz - ((p.f0_khz + apar).powi(2) + aperp.powi(2)).sqrt()).abs() < 1e-9);
            let rebuilt = E_Z * p.theta_p.cos() + ep * p.theta_p.sin();
            prop_assert!((rebuilt - p.e_p).norm() < 1e-12);
            prop_assert!((0.0..std::f64::consts::PI).contains(&p.theta_p) || aperp == 0.0);
        }

        #[test]
        fn e_p_continuous_as_perp_vanishes(apar in -300.0..300.0f64, phi in 0.0..TAU) {
            let cfg = SensorConfig::default();
            let ep = Vec3::new(phi.cos(), phi.sin(), 0.0);
            let tiny = HyperfineParams::new(apar, 1e-9).unwrap();
            let p = conditional_precession(&cfg, &tiny, ep).unwrap();
            prop_assert!((p.e_p - E_Z).norm() < 1e-10);
        }

        #[test]
        fn on_axis_sign_flip_keeps_spectrum(b in 0.0..50.0f64) {
            let (a1, b1) = nv_resonances(2870.4, 28.0, E_Z * b, E_Z);
            let (a2, b2) = nv_resonances(2870.4, 28.0, E_Z * -b, E_Z);
            prop_assert!((a1 - a2).abs() < 1e-8 && (b1 - b2).abs() < 1e-8);
        }
    }
}
