use std::f64::consts::FRAC_PI_2;

use super::joint::{self, PulseAxis};
use super::{cp_cycles, CpParams, ReadoutPhase};
use crate::error::{Error, Result};
use crate::hamiltonian::ConditionalPrecession;
use crate::spincore::Vec3;

/// Correlation spectroscopy on an initially unpolarized nucleus.
///
/// `(pi/2)_X - CP - (pi/2)_Y` stores the sensor-nucleus correlation in the
/// sensor populations; remaining sensor coherences are discarded. The nucleus
/// then evolves freely for `t_corr`, conditioned on the stored population,
/// and `(pi/2)_X - CP - (pi/2)_readout` converts the correlation back. Each
/// entry is the m_S = -1 population at the end.
pub fn correlation_trace(
    prec: &ConditionalPrecession,
    p: &CpParams,
    t_corr_grid_us: &[f64],
) -> Result<Vec<f64>> {
    p.validate()?;
    if t_corr_grid_us.is_empty() {
        return Err(Error::domain("t_corr grid is empty"));
    }
    let (c0, c1) = cp_cycles(prec, p.tau_us);
    let half = p.n_pulses / 2;
    let cp = joint::conditional(&c0.pow(half), &c1.pow(half));
    let open = joint::sensor_pulse(PulseAxis::X, FRAC_PI_2);
    let store = joint::sensor_pulse(PulseAxis::Y, FRAC_PI_2);
    let close = match p.readout_phase {
        ReadoutPhase::X => open,
        ReadoutPhase::Y => store,
    };
    let first = store * cp * open;
    let rho = joint::evolve(&first, &joint::prepared(Vec3::ZERO));
    let stored = joint::dephase_sensor(&rho);
    let second = close * cp * open;
    Ok(t_corr_grid_us
        .iter()
        .map(|&t| {
            let u = second * joint::free_evolution(prec, t);
            joint::population_minus_one(&joint::evolve(&u, &stored)).clamp(0.0, 1.0)
        })
        .collect())
}
