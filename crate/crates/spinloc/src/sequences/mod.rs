//! Pulse sequences on the coupled sensor-nucleus system: CP filtering with X
//! and Y readout, correlation spectroscopy, PulsePol transfer, selective
//! polarization and synchronized bath readout.
//!
//! All microwave pulses are ideal and instantaneous.

mod correlation;
pub(crate) mod joint;
mod pulsepol;
mod readout;

pub use correlation::correlation_trace;
pub use pulsepol::{
    pulsepol_transfer, selective_polarization, PolVariant, PulsePolOutcome, PulsePolParams,
    RfSelectivity, SelectiveOutcome, SATURATION_RUNS,
    dip_window, integrated_depth,
};
pub use readout::{synchronized_readout, BathSpin};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{ConditionalPrecession, SensorBranch};
use crate::spincore::{SpinRotation, Vec3, E_Z};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReadoutPhase {
    #[default]
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpParams {
    pub n_pulses: u32,
    pub tau_us: f64,
    pub readout_phase: ReadoutPhase,
}

impl CpParams {
    pub fn new(n_pulses: u32, tau_us: f64, readout_phase: ReadoutPhase) -> Result<Self> {
        let p = CpParams {
            n_pulses,
            tau_us,
            readout_phase,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pulses == 0 || !self.n_pulses.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "n_pulses must be even and positive, got {}",
                self.n_pulses
            )));
        }
        if !(self.tau_us > 0.0) || !self.tau_us.is_finite() {
            return Err(Error::domain("tau must be positive"));
        }
        Ok(())
    }

    /// Total length of the pulse train, N tau.
    pub fn duration_us(&self) -> f64 {
        self.n_pulses as f64 * self.tau_us
    }
}

/// Per-cycle rotation axes of the CP propagator in each sensor branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpAxes {
    pub n0: Vec3,
    pub n1: Vec3,
    pub phi_cp: f64,
    pub dot: f64,
    /// The cycle is +-identity in both branches; the axes are placeholders.
    pub transparent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuclearSpinState {
    pub bloch: Vec3,
    pub label: String,
}

impl NuclearSpinState {
    pub fn new(bloch: Vec3, label: impl Into<String>) -> Result<Self> {
        if !(bloch.norm() <= 1.0 + 1e-12) {
            return Err(Error::domain(format!("|bloch| = {} exceeds 1", bloch.norm())));
        }
        Ok(NuclearSpinState {
            bloch,
            label: label.into(),
        })
    }

    pub fn mixed(label: impl Into<String>) -> Self {
        NuclearSpinState {
            bloch: Vec3::ZERO,
            label: label.into(),
        }
    }
}

/// One CP cycle `tau/2 - pi - tau - pi - tau/2` in the m_S = 0 and m_S = -1
/// branches.
pub fn cp_cycles(prec: &ConditionalPrecession, tau_us: f64) -> (SpinRotation, SpinRotation) {
    let u0 = prec.free_evolution(SensorBranch::Zero, 0.5 * tau_us);
    let u1 = prec.free_evolution(SensorBranch::MinusOne, 0.5 * tau_us);
    (u0 * u1 * u1 * u0, u1 * u0 * u0 * u1)
}

/// Closed form of `cos phi_cp`.
pub fn cos_phi_cp(prec: &ConditionalPrecession, tau_us: f64) -> f64 {
    let alpha = std::f64::consts::PI * prec.f0_khz * tau_us * crate::hamiltonian::KHZ_US;
    let beta = std::f64::consts::PI * prec.f1_khz * tau_us * crate::hamiltonian::KHZ_US;
    alpha.cos() * beta.cos() - prec.theta_p.cos() * alpha.sin() * beta.sin()
}

pub fn cp_axes(prec: &ConditionalPrecession, p: &CpParams) -> CpAxes {
    let (c0, c1) = cp_cycles(prec, p.tau_us);
    let (a0, phi_cp) = c0.half_angle();
    let (a1, _) = c1.half_angle();
    match (a0, a1) {
        (Some(n0), Some(n1)) => CpAxes {
            n0,
            n1,
            phi_cp,
            dot: n0.dot(n1).clamp(-1.0, 1.0),
            transparent: false,
        },
        _ => CpAxes {
            n0: E_Z,
            n1: E_Z,
            phi_cp,
            dot: 1.0,
            transparent: true,
        },
    }
}

/// Nutation frequency of the nucleus under repeated CP cycles, in kHz, defined
/// through `phi_cp = pi - 2 pi f_cp tau`.
pub fn nutation_frequency(axes: &CpAxes, tau_us: f64) -> f64 {
    (std::f64::consts::PI - axes.phi_cp) / (std::f64::consts::TAU * tau_us * crate::hamiltonian::KHZ_US)
}

pub fn transition_probability_x(axes: &CpAxes, n_pulses: u32) -> f64 {
    let s = (0.5 * n_pulses as f64 * axes.phi_cp).sin();
    (1.0 - 0.5 * (1.0 - axes.dot) * s * s).clamp(0.0, 1.0)
}

pub fn transition_probability_y(state: &NuclearSpinState, axes: &CpAxes, n_pulses: u32) -> f64 {
    let n_phi = n_pulses as f64 * axes.phi_cp;
    let half = (0.5 * n_phi).sin();
    let drive = (axes.n0 - axes.n1) * n_phi.sin() + axes.n0.cross(axes.n1) * (2.0 * half * half);
    (0.5 + 0.25 * state.bloch.dot(drive)).clamp(0.0, 1.0)
}

/// Readout probability for the phase selected in `p`.
pub fn cp_signal(prec: &ConditionalPrecession, p: &CpParams, state: &NuclearSpinState) -> f64 {
    let axes = cp_axes(prec, p);
    match p.readout_phase {
        ReadoutPhase::X => transition_probability_x(&axes, p.n_pulses),
        ReadoutPhase::Y => transition_probability_y(state, &axes, p.n_pulses),
    }
}

/// `P_X` over a grid of spacings at fixed pulse number.
pub fn cp_spectrum(prec: &ConditionalPrecession, n_pulses: u32, taus_us: &[f64]) -> Vec<f64> {
    taus_us
        .iter()
        .map(|&tau| {
            let p = CpParams {
                n_pulses,
                tau_us: tau,
                readout_phase: ReadoutPhase::X,
            };
            transition_probability_x(&cp_axes(prec, &p), n_pulses)
        })
        .collect()
}

/// `P_X` as a function of pulse number at fixed spacing.
pub fn cp_nutation(prec: &ConditionalPrecession, tau_us: f64, pulse_counts: &[u32]) -> Vec<f64> {
    let axes = cp_axes(
        prec,
        &CpParams {
            n_pulses: 2,
            tau_us,
            readout_phase: ReadoutPhase::X,
        },
    );
    pulse_counts
        .iter()
        .map(|&n| transition_probability_x(&axes, n))
        .collect()
}

/// Spacing in `[lo, hi]` where the two branch axes are closest to
/// anti-parallel, i.e. where the CP filter is resonant with the nucleus.
pub fn cp_resonance_tau(prec: &ConditionalPrecession, lo_us: f64, hi_us: f64) -> Result<f64> {
    if !(hi_us > lo_us && lo_us > 0.0) {
        return Err(Error::domain("resonance search needs 0 < lo < hi"));
    }
    let dot = |tau: f64| {
        cp_axes(
            prec,
            &CpParams {
                n_pulses: 2,
                tau_us: tau,
                readout_phase: ReadoutPhase::X,
            },
        )
        .dot
    };
    let steps = 400;
    let h = (hi_us - lo_us) / steps as f64;
    let best = (0..=steps)
        .map(|i| lo_us + h * i as f64)
        .min_by(|a, b| dot(*a).total_cmp(&dot(*b)))
        .unwrap_or(lo_us);
    Ok(crate::estimation::golden_section(
        dot,
        (best - h).max(lo_us),
        (best + h).min(hi_us),
        1e-9,
    ))
}

/// Shrinks the oscillating part of a probability towards 1/2 by `exp(-t/T)`.
pub fn decay_contrast(p: f64, t_us: f64, decay_time_us: Option<f64>) -> f64 {
    match decay_time_us {
        Some(t_decay) if t_decay > 0.0 => 0.5 + (p - 0.5) * (-t_us / t_decay).exp(),
        _ => p,
    }
}
