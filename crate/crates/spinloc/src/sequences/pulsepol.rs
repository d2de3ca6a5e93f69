use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::joint::{self, Op, PulseAxis};
use super::NuclearSpinState;
use crate::error::{Error, Result};
use crate::estimation::combine_independent;
use crate::hamiltonian::{ConditionalPrecession, KHZ_US};
use crate::spincore::{SpinRotation, E_X};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolVariant {
    PolX,
    PolY,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsePolParams {
    /// Length of one sequence unit, µs; a full cycle lasts `2 tau_pol`.
    pub tau_pol_us: f64,
    /// Full cycles per transfer block.
    pub n_pol: u32,
    /// Transfer blocks, with the sensor re-initialized before each.
    pub n_rep: u32,
    pub variant: PolVariant,
}

impl PulsePolParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_pol_us > 0.0) || !self.tau_pol_us.is_finite() {
            return Err(Error::domain("tau_pol must be positive"));
        }
        if self.n_pol == 0 || self.n_rep == 0 {
            return Err(Error::domain("n_pol and n_rep must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulsePolOutcome {
    /// Sensor m_S = 0 population after the last block.
    pub p0: f64,
    pub p0_per_block: Vec<f64>,
    pub final_state: NuclearSpinState,
}

/// One sequence unit of length `tau_pol`:
/// `(pi/2)_a - pi_b - (pi/2)_a (pi/2)_b - pi_a - (pi/2)_b` with the pulse
/// centers tau_pol/4 apart and the two middle half-pulses back to back.
/// A full cycle is two units.
fn unit(prec: &ConditionalPrecession, pp: &PulsePolParams) -> Op {
    let (a, b) = match pp.variant {
        PolVariant::PolY => (PulseAxis::Y, PulseAxis::X),
        PolVariant::PolX => (PulseAxis::X, PulseAxis::Y),
    };
    let gap = joint::free_evolution(prec, 0.25 * pp.tau_pol_us);
    let half_a = joint::sensor_pulse(a, FRAC_PI_2);
    let half_b = joint::sensor_pulse(b, FRAC_PI_2);
    let pi_a = joint::sensor_pulse(a, PI);
    let pi_b = joint::sensor_pulse(b, PI);
    half_b * gap * pi_a * gap * half_b * half_a * gap * pi_b * gap * half_a
}

fn block(prec: &ConditionalPrecession, pp: &PulsePolParams) -> Op {
    let c = unit(prec, pp);
    let mut out = Op::identity();
    for _ in 0..2 * pp.n_pol {
        out = c * out;
    }
    out
}

/// PulsePol transfer between the sensor and one nucleus.
pub fn pulsepol_transfer(
    prec: &ConditionalPrecession,
    pp: &PulsePolParams,
    initial: &NuclearSpinState,
) -> Result<PulsePolOutcome> {
    pp.validate()?;
    let u = block(prec, pp);
    let mut bloch = initial.bloch;
    let mut p0_per_block = Vec::with_capacity(pp.n_rep as usize);
    for _ in 0..pp.n_rep {
        let rho = joint::evolve(&u, &joint::prepared(bloch));
        p0_per_block.push((1.0 - joint::population_minus_one(&rho)).clamp(0.0, 1.0));
        bloch = joint::nuclear_bloch(&rho);
    }
    Ok(PulsePolOutcome {
        p0: *p0_per_block.last().expect("n_rep > 0"),
        p0_per_block,
        final_state: NuclearSpinState {
            bloch,
            label: initial.label.clone(),
        },
    })
}

/// Selective RF inversion: a spin is flipped when its m_S = -1 frequency lies
/// within `1 / (2 t_pi)` of the carrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfSelectivity {
    pub frequency_khz: f64,
    pub t_pi_us: f64,
}

impl RfSelectivity {
    pub fn half_bandwidth_khz(&self) -> f64 {
        1.0 / (2.0 * self.t_pi_us * KHZ_US)
    }

    pub fn flips(&self, prec: &ConditionalPrecession) -> bool {
        (prec.f1_khz - self.frequency_khz).abs() <= self.half_bandwidth_khz()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveOutcome {
    /// Target first, then the other spins in input order.
    pub states: Vec<NuclearSpinState>,
    pub p0_per_spin: Vec<f64>,
    /// Sensor survival of the final block with all spins combined.
    pub p0: f64,
}

/// Default number of saturating PolY runs before the RF flip.
pub const SATURATION_RUNS: u32 = 9;

/// Saturating PolY, sensor flip, selective RF pi pulse, final PolY.
///
/// Saturation repeats the PolY run `saturation_runs` times, each of
/// `pp.n_rep` blocks; the final run is one more PolY of `pp.n_rep` blocks.
/// Spins start unpolarized and are treated independently; the sensor flip
/// only sets which branch frequency the RF addresses. Without `rf` the final
/// run acts on the saturated spins directly.
pub fn selective_polarization(
    prec_target: &ConditionalPrecession,
    prec_others: &[ConditionalPrecession],
    pp: &PulsePolParams,
    rf: Option<&RfSelectivity>,
    saturation_runs: u32,
) -> Result<SelectiveOutcome> {
    pp.validate()?;
    if saturation_runs == 0 {
        return Err(Error::domain("saturation_runs must be positive"));
    }
    let saturate = PulsePolParams {
        n_rep: saturation_runs.saturating_mul(pp.n_rep),
        variant: PolVariant::PolY,
        ..*pp
    };
    let probe = PulsePolParams {
        variant: PolVariant::PolY,
        ..*pp
    };
    let flip = SpinRotation::from_axis_angle(E_X, PI)?;
    let mut states = Vec::with_capacity(prec_others.len() + 1);
    let mut p0_per_spin = Vec::with_capacity(prec_others.len() + 1);
    for (i, prec) in std::iter::once(prec_target).chain(prec_others).enumerate() {
        let label = if i == 0 { "target".to_string() } else { format!("bath{i}") };
        let polarized = pulsepol_transfer(prec, &saturate, &NuclearSpinState::mixed(label))?;
        let mut state = polarized.final_state;
        if rf.is_some_and(|r| r.flips(prec)) {
            state.bloch = flip.apply(state.bloch);
        }
        let out = pulsepol_transfer(prec, &probe, &state)?;
        p0_per_spin.push(out.p0);
        states.push(out.final_state);
    }
    let p0 = combine_independent(&p0_per_spin);
    Ok(SelectiveOutcome {
        states,
        p0_per_spin,
        p0,
    })
}

/// Sweep window around a transfer dip: the centre `f/k` in 1/(2 tau_pol)
/// units, half-width equal to the block bandwidth `f / (k^2 n_pol)`.
pub fn dip_window(frequency_khz: f64, k: u32, n_pol: u32) -> (f64, f64) {
    let center = frequency_khz / k as f64;
    let half = center / (k as f64 * n_pol as f64);
    (center - half, center + half)
}

/// Integrated depth `sum (1 - p0) dx` of the sweep points inside any window.
/// `sweep_khz` must be sorted ascending.
pub fn integrated_depth(sweep_khz: &[f64], p0: &[f64], windows: &[(f64, f64)]) -> Result<f64> {
    if sweep_khz.len() != p0.len() {
        return Err(Error::domain("sweep and signal lengths differ"));
    }
    if sweep_khz.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("sweep must be strictly increasing"));
    }
    let n = sweep_khz.len();
    let mut total = 0.0;
    for i in 0..n {
        let x = sweep_khz[i];
        if !windows.iter().any(|&(lo, hi)| x >= lo && x <= hi) {
            continue;
        }
        let left = if i > 0 { sweep_khz[i - 1] } else { x };
        let right = if i + 1 < n { sweep_khz[i + 1] } else { x };
        total += (1.0 - p0[i]) * 0.5 * (right - left);
    }
    Ok(total)
}
