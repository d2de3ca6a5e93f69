use super::{cp_axes, transition_probability_x, transition_probability_y, CpParams, NuclearSpinState};
use crate::error::Result;
use crate::estimation::combine_readouts;
use crate::hamiltonian::{ConditionalPrecession, SensorBranch};
use crate::spincore::Vec3;

/// A bath nucleus with its Bloch vector at the first readout block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathSpin {
    pub prec: ConditionalPrecession,
    pub initial: Vec3,
}

/// Y-phase CP blocks repeated every `t_l_us`. Between blocks the sensor rests
/// in m_S = 0, so each nucleus precesses about e_z at f0; back-action of the
/// readout on the nuclei is neglected. Spin contributions multiply the sensor
/// coherence independently.
pub fn synchronized_readout(
    bath: &[BathSpin],
    t_l_us: f64,
    m_blocks: usize,
    p: &CpParams,
) -> Result<Vec<f64>> {
    p.validate()?;
    if !(t_l_us > 0.0) {
        return Err(crate::error::Error::domain("t_L must be positive"));
    }
    let axes: Vec<_> = bath.iter().map(|s| cp_axes(&s.prec, p)).collect();
    Ok((0..m_blocks)
        .map(|k| {
            let t = k as f64 * t_l_us;
            let per_spin: Vec<(f64, f64)> = bath
                .iter()
                .zip(&axes)
                .map(|(spin, ax)| {
                    let bloch = spin.prec.free_evolution(SensorBranch::Zero, t).apply(spin.initial);
                    let state = NuclearSpinState {
                        bloch,
                        label: String::new(),
                    };
                    (
                        transition_probability_x(ax, p.n_pulses),
                        transition_probability_y(&state, ax, p.n_pulses),
                    )
                })
                .collect();
            combine_readouts(&per_spin).1
        })
        .collect())
}
