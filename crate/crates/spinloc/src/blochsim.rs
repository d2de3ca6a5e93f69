//! Nuclear Bloch-vector dynamics through the azimuth protocol: free
//! precession after the sensor inversion, a linearly polarized RF pi/2 pulse
//! integrated without the rotating-wave approximation, and the inversion from
//! fitted phases to the azimuth of the nucleus.
//!
//! Protocol time `s` runs up to 0 at the end of the RF pulse.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{e_perp_direction, KHZ_US};
use crate::sequences::PolVariant;
use crate::spincore::{wrap_angle, wrap_signed, SpinRotation, Vec3, E_Z};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolTiming {
    /// Dead time between the end of the RF pulse and the first readout.
    pub t0_us: f64,
    /// RF pulse length.
    pub t1_us: f64,
    /// Time from the midpoint of the sensor inversion to the end of the RF pulse.
    pub t2_us: f64,
    pub t_delay_us: f64,
}

impl ProtocolTiming {
    /// Checks ordering; with `strict_rf_khz` also requires the RF pulse to
    /// span an integer number of carrier periods.
    pub fn validate(&self, strict_rf_khz: Option<f64>) -> Result<()> {
        if !(self.t0_us > 0.0 && self.t1_us > 0.0 && self.t2_us > self.t1_us) {
            return Err(Error::domain("timing requires t2 > t1 > 0 and t0 > 0"));
        }
        if let Some(f) = strict_rf_khz {
            let periods = self.t1_us * f * KHZ_US;
            if ((periods - periods.round()) / (f * KHZ_US)).abs() > 1e-6 {
                return Err(Error::domain(format!(
                    "t1 = {} us is not an integer number of RF periods ({periods:.6})",
                    self.t1_us
                )));
            }
        }
        Ok(())
    }
}

/// Linearly polarized RF field `2 b cos(2 pi f s + phi_rf) e_rf` on `[-t1, 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfDrive {
    pub frequency_khz: f64,
    pub phase: f64,
    pub axis: Vec3,
    /// `b`, in kHz of nuclear precession.
    pub amplitude_khz: f64,
    pub t1_us: f64,
}

impl RfDrive {
    /// Amplitude chosen for a pi/2 rotation about an axis tilted to `e_p`.
    pub fn pi_half(frequency_khz: f64, phase: f64, axis: Vec3, e_p: Vec3, t1_us: f64) -> Result<Self> {
        if !axis.is_unit(1e-9) || !(t1_us > 0.0) {
            return Err(Error::domain("RF axis must be a unit vector and t1 positive"));
        }
        let transverse = axis.cross(e_p).norm();
        if transverse < 1e-9 {
            return Err(Error::Singular("RF axis parallel to the precession axis".into()));
        }
        Ok(RfDrive {
            frequency_khz,
            phase,
            axis,
            amplitude_khz: 1.0 / (4.0 * t1_us * KHZ_US * transverse),
            t1_us,
        })
    }

    /// Field strength at protocol time `s_us`, in kHz.
    pub fn field(&self, s_us: f64) -> f64 {
        if s_us < -self.t1_us || s_us > 0.0 {
            return 0.0;
        }
        2.0 * self.amplitude_khz * (TAU * self.frequency_khz * s_us * KHZ_US + self.phase).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times_us: Vec<f64>,
    pub states: Vec<Vec3>,
}

/// Largest admissible integrator step for the given frequencies, µs.
pub fn step_bound(f_p_khz: f64, f_rf_khz: f64) -> f64 {
    1.0 / (100.0 * f_p_khz.abs().max(f_rf_khz.abs()) * KHZ_US)
}

#[inline]
fn derivative(v: Vec3, field: Vec3) -> Vec3 {
    v.cross(field) * (TAU * KHZ_US)
}

/// One RK4 step given the total field (kHz) at the start, midpoint and end.
#[inline]
fn rk4_step(v: Vec3, h: f64, field: [Vec3; 3]) -> Vec3 {
    let k1 = derivative(v, field[0]);
    let k2 = derivative(v + k1 * (0.5 * h), field[1]);
    let k3 = derivative(v + k2 * (0.5 * h), field[1]);
    let k4 = derivative(v + k3 * h, field[2]);
    v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn renormalize(v: Vec3, norm: f64) -> Vec3 {
    let n = v.norm();
    if n > 0.0 {
        v * (norm / n)
    } else {
        v
    }
}

/// Fixed-step RK4 integration of `dv/ds = 2 pi v x (f_p e_p + B_rf(s) e_rf)`
/// with the norm restored after every step.
pub fn integrate_bloch(
    initial: Vec3,
    e_p: Vec3,
    f_p_khz: f64,
    drive: Option<&RfDrive>,
    span_us: (f64, f64),
    step_us: f64,
) -> Result<Trajectory> {
    if !(initial.norm() <= 1.0 + 1e-12) || !e_p.is_unit(1e-9) {
        return Err(Error::domain("need |initial| <= 1 and a unit precession axis"));
    }
    let bound = step_bound(f_p_khz, drive.map_or(0.0, |d| d.frequency_khz));
    if !(step_us > 0.0) || step_us > bound * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge {
            step: step_us,
            required: bound,
        });
    }
    let (s0, s1) = span_us;
    if !(s1 >= s0) {
        return Err(Error::domain("span must be ordered"));
    }
    let n = ((s1 - s0) / step_us).ceil().max(1.0) as usize;
    let h = (s1 - s0) / n as f64;
    let norm = initial.norm();
    let static_field = e_p * f_p_khz;
    let (axis, field) = match drive {
        Some(d) => (d.axis, Box::new(move |s: f64| d.field(s)) as Box<dyn Fn(f64) -> f64>),
        None => (E_Z, Box::new(|_: f64| 0.0) as Box<dyn Fn(f64) -> f64>),
    };
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut v = initial;
    times.push(s0);
    states.push(v);
    for i in 0..n {
        let s = s0 + h * i as f64;
        let b = [s, s + 0.5 * h, s + h].map(|t| static_field + axis * field(t));
        v = renormalize(rk4_step(v, h, b), norm);
        times.push(s + h);
        states.push(v);
    }
    Ok(Trajectory { times_us: times, states })
}

/// High-field estimate of the nuclear azimuth at the end of the RF pulse,
/// including the phase slip from RF detuning over the pulse.
pub fn phi_n_analytic(phi_rf: f64, phi_c: f64, f_p_khz: f64, f_rf_khz: f64, t1_us: f64) -> f64 {
    wrap_angle(-phi_rf + phi_c - FRAC_PI_2 - TAU * (f_p_khz - f_rf_khz) * t1_us * KHZ_US)
}

/// Azimuth from the simulated initial phase and the fitted oscillation phase.
pub fn determine_phi(phi_n0: f64, phi_0: f64, theta: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain("theta outside [0, pi]"));
    }
    let branch = if theta >= FRAC_PI_2 { PI } else { 0.0 };
    Ok(wrap_angle(phi_n0 + phi_0 + branch))
}

/// WURST amplitude `(1 - |cos(pi t / t_p)|)^alpha`, zero outside the pulse.
pub fn wurst_envelope(t_us: f64, t_p_us: f64, alpha: f64) -> f64 {
    if !(0.0..=t_p_us).contains(&t_us) || !(t_p_us > 0.0) {
        return 0.0;
    }
    (1.0 - (PI * t_us / t_p_us).cos().abs()).powf(alpha)
}

/// A single (phi_rf, phi_0) measurement with the precession frequency of that run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMeasurement {
    pub phi_rf: f64,
    pub phi_0: f64,
    pub f_p_khz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiFit {
    pub phi: f64,
    /// RMS wrapped deviation at the optimum.
    pub accuracy: f64,
    /// Best competing local minimum, if any.
    pub runner_up: Option<(f64, f64)>,
    /// The runner-up's RMS lies within 1 degree of the optimum.
    pub ambiguous: bool,
}

/// Everything the azimuth protocol needs apart from the site azimuth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthProtocol {
    pub timing: ProtocolTiming,
    /// Tilt of the m_S = -1 precession axis.
    pub theta_p: f64,
    /// Polar angle of the nucleus; selects the e_perp branch.
    pub site_theta: f64,
    pub e_rf: Vec3,
    pub f_rf_khz: f64,
    /// Polarization sequence run before the protocol.
    pub initial: PolVariant,
    /// Integrator step; defaults to `1 / (200 f_rf)`.
    pub step_us: Option<f64>,
    pub drive_model: DriveModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriveModel {
    /// The full linearly polarized field.
    #[default]
    Linear,
    /// Only the component co-rotating with the nuclear precession, transverse to `e_p`.
    RotatingWave,
}

impl AzimuthProtocol {
    pub fn validate(&self) -> Result<()> {
        self.timing.validate(None)?;
        if !(0.0..=PI).contains(&self.site_theta) || !self.e_rf.is_unit(1e-9) || !(self.f_rf_khz > 0.0) {
            return Err(Error::domain("invalid site polar angle, RF axis or RF frequency"));
        }
        Ok(())
    }

    pub fn initial_bloch(&self) -> Vec3 {
        match self.initial {
            PolVariant::PolY => -E_Z,
            PolVariant::PolX => E_Z,
        }
    }

    pub fn precession_axis(&self, phi: f64) -> Result<Vec3> {
        let e_perp = e_perp_direction(self.site_theta, phi)?;
        Ok(E_Z * self.theta_p.cos() + e_perp * self.theta_p.sin())
    }

    fn step(&self) -> f64 {
        self.step_us.unwrap_or(1.0 / (200.0 * self.f_rf_khz * KHZ_US))
    }

    /// Samples of the RF field on the RK4 half-step grid over `[-t1, 0]`.
    /// `(cos, sin)` of the RF carrier phase on the RK4 half-step grid over `[-t1, 0]`.
    fn field_samples(&self, phi_rf: f64, f_p_khz: f64) -> Result<(Vec<(f64, f64)>, f64)> {
        let step = self.step();
        let bound = step_bound(f_p_khz, self.f_rf_khz);
        if step > bound * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge {
                step,
                required: bound,
            });
        }
        let t1 = self.timing.t1_us;
        let n = (t1 / step).ceil() as usize;
        let h = t1 / n as f64;
        let samples = (0..=2 * n)
            .map(|j| {
                let s = -t1 + 0.5 * h * j as f64;
                (TAU * self.f_rf_khz * s * KHZ_US + phi_rf).sin_cos()
            })
            .collect();
        Ok((samples, h))
    }

    fn run(&self, phi: f64, f_p_khz: f64, samples: &[(f64, f64)], h: f64) -> Result<Vec3> {
        let e_p = self.precession_axis(phi)?;
        let transverse = self.e_rf.cross(e_p).norm();
        if transverse < 1e-9 {
            return Err(Error::Singular("RF axis parallel to the precession axis".into()));
        }
        let b = 1.0 / (4.0 * self.timing.t1_us * KHZ_US * transverse);
        let pre = SpinRotation::from_axis_angle(
            -e_p,
            TAU * f_p_khz * (self.timing.t2_us - self.timing.t1_us) * KHZ_US,
        )?;
        let mut v = pre.apply(self.initial_bloch());
        let static_field = e_p * f_p_khz;
        let transverse_dir = (self.e_rf - e_p * self.e_rf.dot(e_p)) / transverse;
        let quadrature = e_p.cross(transverse_dir);
        let drive = |&(sin, cos): &(f64, f64)| -> Vec3 {
            match self.drive_model {
                DriveModel::Linear => static_field + self.e_rf * (2.0 * b * cos),
                DriveModel::RotatingWave => {
                    static_field + (transverse_dir * cos - quadrature * sin) * (b * transverse)
                }
            }
        };
        let n = (samples.len() - 1) / 2;
        for i in 0..n {
            let field = [drive(&samples[2 * i]), drive(&samples[2 * i + 1]), drive(&samples[2 * i + 2])];
            v = renormalize(rk4_step(v, h, field), 1.0);
        }
        Ok(v)
    }

    /// Nuclear Bloch vector at the end of the RF pulse.
    pub fn final_bloch(&self, phi: f64, phi_rf: f64, f_p_khz: f64) -> Result<Vec3> {
        self.validate()?;
        let (samples, h) = self.field_samples(phi_rf, f_p_khz)?;
        self.run(phi, f_p_khz, &samples, h)
    }

    /// Simulated azimuth of the nucleus at the end of the RF pulse.
    pub fn simulate_phi_n0(&self, phi: f64, phi_rf: f64, f_p_khz: f64) -> Result<f64> {
        azimuth_of(self.final_bloch(phi, phi_rf, f_p_khz)?)
    }

    /// Oscillation phase expected for a nucleus at azimuth `phi`.
    pub fn predicted_phi0(&self, phi: f64, phi_rf: f64, f_p_khz: f64) -> Result<f64> {
        let phi_n0 = self.simulate_phi_n0(phi, phi_rf, f_p_khz)?;
        let branch = if self.site_theta >= FRAC_PI_2 { PI } else { 0.0 };
        Ok(wrap_angle(phi - phi_n0 - branch))
    }

    /// Azimuth that best reproduces the measured phases.
    ///
    /// A 1 degree scan over the full circle locates the basins; the best one
    /// is rescanned at 0.1 degree and finished with golden-section search.
    pub fn fit_phi(&self, measured: &[PhaseMeasurement]) -> Result<PhiFit> {
        self.validate()?;
        if measured.len() < 2 {
            return Err(Error::domain("at least two measurements are required"));
        }
        let prepared: Vec<(Vec<(f64, f64)>, f64)> = measured
            .iter()
            .map(|m| self.field_samples(m.phi_rf, m.f_p_khz))
            .collect::<Result<_>>()?;
        let branch = if self.site_theta >= FRAC_PI_2 { PI } else { 0.0 };
        let cost = |phi: f64| -> f64 {
            let mut acc = 0.0;
            for (m, (samples, h)) in measured.iter().zip(&prepared) {
                let d = match self.run(phi, m.f_p_khz, samples, *h).and_then(azimuth_of) {
                    Ok(phi_n0) => wrap_signed(phi - phi_n0 - branch - m.phi_0),
                    Err(_) => PI,
                };
                acc += d * d;
            }
            (acc / measured.len() as f64).sqrt()
        };

        let coarse: Vec<f64> = (0..360).map(|i| cost((i as f64).to_radians())).collect();
        let mut minima: Vec<(usize, f64)> = (0..360)
            .filter(|&i| coarse[i] <= coarse[(i + 359) % 360] && coarse[i] <= coarse[(i + 1) % 360])
            .map(|i| (i, coarse[i]))
            .collect();
        minima.sort_by(|a, b| a.1.total_cmp(&b.1));
        let refine = |centre: usize| -> (f64, f64) {
            let c = (centre as f64).to_radians();
            let fine = (-10..=10)
                .map(|k| c + (0.1 * k as f64).to_radians())
                .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
                .unwrap_or(c);
            let d = 0.1f64.to_radians();
            let phi = golden_section_wrapped(&cost, fine - d, fine + d);
            (wrap_angle(phi), cost(phi))
        };
        let (best_idx, _) = minima[0];
        let (phi, accuracy) = refine(best_idx);
        let runner_up = minima
            .iter()
            .skip(1)
            .find(|(i, _)| {
                let sep = (*i as f64 - best_idx as f64).abs();
                sep.min(360.0 - sep) > 2.0
            })
            .map(|&(i, _)| refine(i));
        let ambiguous = runner_up.is_some_and(|(_, c)| c - accuracy < 1f64.to_radians());
        Ok(PhiFit {
            phi,
            accuracy,
            runner_up,
            ambiguous,
        })
    }
}

fn golden_section_wrapped(cost: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    crate::estimation::golden_section(cost, a, b, 1e-7)
}

fn azimuth_of(v: Vec3) -> Result<f64> {
    let transverse = v.x.hypot(v.y);
    if transverse < 1e-3 {
        return Err(Error::IllConditionedAzimuth { transverse });
    }
    Ok(v.azimuth())
}

/// Free-function form of [`AzimuthProtocol::simulate_phi_n0`].
pub fn simulate_phi_n0(protocol: &AzimuthProtocol, phi: f64, phi_rf: f64, f_p_khz: f64) -> Result<f64> {
    protocol.simulate_phi_n0(phi, phi_rf, f_p_khz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spincore::E_X;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    pub(crate) fn reference_protocol(initial: PolVariant) -> AzimuthProtocol {
        let f_rf = 215.6;
        AzimuthProtocol {
            timing: ProtocolTiming {
                t0_us: 6.872,
                t1_us: 22.0 / (f_rf * KHZ_US),
                t2_us: 22.0 / (f_rf * KHZ_US) + 2.288,
                t_delay_us: 1.088,
            },
            theta_p: deg(5.938),
            site_theta: deg(94.8),
            e_rf: Vec3::from_spherical(deg(55.7), deg(186.2)),
            f_rf_khz: f_rf,
            initial,
            step_us: None,
            drive_model: DriveModel::Linear,
        }
    }

    #[test]
    fn fixed_point_without_drive() {
        let tr = integrate_bloch(-E_Z, E_Z, 215.6, None, (0.0, 10.0), 0.04).unwrap();
        assert!(tr.states.iter().all(|v| (*v + E_Z).norm() < 1e-15));
    }

    #[test]
    fn free_precession_is_clockwise() {
        let t = 7.3;
        let tr = integrate_bloch(E_X, E_Z, 215.6, None, (0.0, t), 0.01).unwrap();
        let end = *tr.states.last().unwrap();
        let expected = wrap_signed(-TAU * 215.6 * t * KHZ_US);
        assert!(wrap_signed(end.y.atan2(end.x) - expected).abs() < 1e-6);
        let drift = tr.states.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8);
    }

    #[test]
    fn step_bound_enforced() {
        match integrate_bloch(E_X, E_Z, 215.6, None, (0.0, 1.0), 0.1) {
            Err(Error::StepTooLarge { required, .. }) => assert!((required - 1.0 / 21.56).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn drive_amplitude_gives_quarter_turn() {
        let t1 = 22.0 / (215.6 * KHZ_US);
        let d = RfDrive::pi_half(215.6, 0.0, E_X, E_Z, t1).unwrap();
        assert!((d.amplitude_khz * 4.0 * t1 * KHZ_US - 1.0).abs() < 1e-12);
        assert_eq!(d.field(1.0), 0.0);
        assert_eq!(d.field(-t1 - 1.0), 0.0);
        let tr = integrate_bloch(-E_Z, E_Z, 215.6, Some(&d), (-t1, 0.0), 0.02).unwrap();
        let end = *tr.states.last().unwrap();
        assert!(end.z.abs() < 0.02, "z = {}", end.z);
    }

    #[test]
    fn analytic_phase_values() {
        let t1 = 22.0 / (215.6 * KHZ_US);
        let a = phi_n_analytic(0.0, deg(186.2), 215.6, 215.6, t1);
        assert!((a.to_degrees() - 96.2).abs() < 1e-9);
        let b = phi_n_analytic(0.0, deg(186.2), 215.7908, 215.6, t1);
        assert!((b.to_degrees() - 89.2).abs() < 0.05);
        let c = phi_n_analytic(deg(90.0), deg(186.2), 215.6, 215.6, t1);
        assert!((wrap_signed(c - a) + deg(90.0)).abs() < 1e-12);
    }

    #[test]
    fn determine_phi_branches() {
        let phi_rf = deg(37.0);
        let phi_n0 = deg(89.2) - phi_rf;
        let phi_0 = phi_rf + deg(334.0);
        let lower = determine_phi(phi_n0, phi_0, deg(94.8)).unwrap();
        assert!((lower.to_degrees() - 243.2).abs() < 1e-9);
        let upper = determine_phi(phi_n0, phi_0, deg(85.2)).unwrap();
        assert!((upper.to_degrees() - 63.2).abs() < 1e-9);
        assert!(determine_phi(0.0, 0.0, 4.0).is_err());
    }

    #[test]
    fn wurst_values() {
        assert!((wurst_envelope(5.0, 10.0, 20.0) - 1.0).abs() < 1e-12);
        assert_eq!(wurst_envelope(0.0, 10.0, 20.0), 0.0);
        assert!((wurst_envelope(2.5, 10.0, 2.0) - (1.0 - (PI / 4.0).cos()).powi(2)).abs() < 1e-15);
        assert_eq!(wurst_envelope(-1.0, 10.0, 2.0), 0.0);
        assert_eq!(wurst_envelope(11.0, 10.0, 2.0), 0.0);
    }

    #[test]
    fn strict_timing() {
        let p = reference_protocol(PolVariant::PolY);
        assert!(p.timing.validate(Some(215.6)).is_ok());
        assert!(p.timing.validate(Some(215.0)).is_err());
        let bad = ProtocolTiming { t2_us: 1.0, ..p.timing };
        assert!(bad.validate(None).is_err());
    }

    #[test]
    fn caption_values_phi_zero() {
        let p = reference_protocol(PolVariant::PolY);
        for (rf, want) in [(0.0, 90.9), (90.0, 4.8), (180.0, 282.7), (270.0, 188.1)] {
            let got = p.simulate_phi_n0(0.0, deg(rf), 215.6).unwrap().to_degrees();
            assert!(wrap_signed(deg(got - want)).abs() < deg(0.5), "rf {rf}: {got}");
        }
    }

    #[test]
    fn caption_values_phi_site() {
        let p = reference_protocol(PolVariant::PolY);
        for (rf, want) in [(0.0, 98.9), (90.0, 358.4), (180.0, 272.4), (270.0, 189.9)] {
            let got = p.simulate_phi_n0(deg(248.8), deg(rf), 215.7908).unwrap().to_degrees();
            assert!(wrap_signed(deg(got - want)).abs() < deg(0.5), "rf {rf}: {got}");
        }
    }

    #[test]
    fn fit_recovers_self_consistent_azimuth() {
        let p = reference_protocol(PolVariant::PolY);
        let truth = deg(250.9);
        let measured: Vec<PhaseMeasurement> = [0.0, 90.0, 180.0, 270.0]
            .iter()
            .map(|&rf| PhaseMeasurement {
                phi_rf: deg(rf),
                phi_0: p.predicted_phi0(truth, deg(rf), 215.7).unwrap(),
                f_p_khz: 215.7,
            })
            .collect();
        let fit = p.fit_phi(&measured).unwrap();
        assert!(wrap_signed(fit.phi - truth).abs() < deg(0.2), "{}", fit.phi.to_degrees());
        assert!(fit.accuracy < deg(0.01));
    }

    #[test]
    fn untilted_axis_matches_analytic() {
        let p = AzimuthProtocol {
            theta_p: 0.0,
            drive_model: DriveModel::RotatingWave,
            ..reference_protocol(PolVariant::PolY)
        };
        for rf in [0.0, 90.0, 180.0, 270.0, 33.0] {
            let sim = p.simulate_phi_n0(deg(40.0), deg(rf), 215.6).unwrap();
            let ana = phi_n_analytic(deg(rf), deg(186.2), 215.6, p.f_rf_khz, p.timing.t1_us);
            assert!(wrap_signed(sim - ana).abs() < deg(0.1), "rf {rf}: {} vs {}", sim.to_degrees(), ana.to_degrees());
        }
        // detuning during the pulse slips the phase by less than free precession would
        let on = p.simulate_phi_n0(deg(40.0), 0.0, 215.6).unwrap();
        let off = p.simulate_phi_n0(deg(40.0), 0.0, 215.7908).unwrap();
        let free = TAU * 0.1908 * p.timing.t1_us * KHZ_US;
        let slip = -wrap_signed(off - on);
        assert!(slip > 0.5 * free && slip < free, "{} vs {}", slip.to_degrees(), free.to_degrees());
    }

    #[test]
    fn phase_slope_is_one_without_tilt() {
        let p = AzimuthProtocol {
            theta_p: 0.0,
            drive_model: DriveModel::RotatingWave,
            ..reference_protocol(PolVariant::PolY)
        };
        let rfs: Vec<f64> = (0..8).map(|k| deg(45.0 * k as f64)).collect();
        let base = p.predicted_phi0(deg(250.9), rfs[0], 215.6).unwrap();
        // unwrap against the slope-one guess, then least-squares slope
        let ys: Vec<f64> = rfs
            .iter()
            .map(|&rf| rf + wrap_signed(p.predicted_phi0(deg(250.9), rf, 215.6).unwrap() - base - rf))
            .collect();
        let n = rfs.len() as f64;
        let mx = rfs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = rfs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = rfs.iter().map(|x| (x - mx).powi(2)).sum();
        assert!((sxy / sxx - 1.0).abs() < 1e-3, "slope {}", sxy / sxx);
    }

    #[test]
    fn measured_relation_dataset() {
        let p = reference_protocol(PolVariant::PolY);
        let measured: Vec<PhaseMeasurement> = [0.0, 90.0, 180.0, 270.0]
            .iter()
            .map(|&rf| PhaseMeasurement {
                phi_rf: deg(rf),
                phi_0: wrap_angle(deg(rf + 334.0)),
                f_p_khz: 215.7908,
            })
            .collect();
        let fit = p.fit_phi(&measured).unwrap();
        assert!(wrap_signed(fit.phi - deg(248.8)).abs() < deg(1.0), "{}", fit.phi.to_degrees());
        assert!(fit.accuracy < deg(6.0));
    }

    #[test]
    fn polarization_flip_shifts_by_pi() {
        let y = reference_protocol(PolVariant::PolY);
        let x = reference_protocol(PolVariant::PolX);
        for rf in [0.0, 1.0, 2.5] {
            let a = y.simulate_phi_n0(deg(120.0), rf, 215.7).unwrap();
            let b = x.simulate_phi_n0(deg(120.0), rf, 215.7).unwrap();
            assert!((wrap_signed(a - b).abs() - PI).abs() < 1e-9);
        }
    }

    #[test]
    fn halving_step_converges() {
        let p = reference_protocol(PolVariant::PolY);
        let fine = AzimuthProtocol {
            step_us: Some(0.5 / (200.0 * p.f_rf_khz * KHZ_US)),
            ..p
        };
        for rf in [0.0, 90.0, 180.0, 270.0] {
            let a = p.simulate_phi_n0(deg(248.8), deg(rf), 215.7908).unwrap();
            let b = fine.simulate_phi_n0(deg(248.8), deg(rf), 215.7908).unwrap();
            assert!(wrap_signed(a - b).abs().to_degrees() < 0.01);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn determine_phi_branch_difference(n0 in 0.0..TAU, p0 in 0.0..TAU, theta in 0.0..FRAC_PI_2) {
            prop_assume!((theta - FRAC_PI_2).abs() > 1e-9);
            let a = determine_phi(n0, p0, theta).unwrap();
            let b = determine_phi(n0, p0, PI - theta).unwrap();
            prop_assert!((wrap_signed(a - b).abs() - PI).abs() < 1e-12);
        }

        #[test]
        fn integrator_norm_drift(theta in 0.0..PI, phi in 0.0..TAU, rf in 0.0..TAU) {
            let e_p = Vec3::from_spherical(0.1, 1.0);
            let t1 = 22.0 / (215.6 * KHZ_US);
            let axis = Vec3::from_spherical(deg(55.7), deg(186.2));
            let d = RfDrive::pi_half(215.6, rf, axis, e_p, t1).unwrap();
            let tr = integrate_bloch(Vec3::from_spherical(theta, phi), e_p, 215.6, Some(&d), (-t1, 0.0), 1.0 / (200.0 * 0.2156)).unwrap();
            let drift = tr.states.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max);
            prop_assert!(drift < 1e-8);
        }
    }
}
