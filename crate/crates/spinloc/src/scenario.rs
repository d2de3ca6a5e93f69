//! Declarative experiment descriptions and their runner.
//!
//! A scenario is a TOML document: sensor settings, target and bath spins,
//! optional protocol timing and decay envelope, and a `[sequence]` table whose
//! `kind` selects the experiment. Angles are in degrees, times in µs and
//! frequencies in kHz unless a field name says otherwise. See
//! `scenarios/README.md` in this crate for the full schema.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blochsim::{determine_phi, AzimuthProtocol, DriveModel, PhaseMeasurement, ProtocolTiming};
use crate::calibration::{
    accumulated_phase, delay_scan_probability, estimate_delay, fit_field, matched_burst, nv_axes_lab,
    FieldObservation, ScanPoint, SensingWindow,
};
use crate::error::{Error, Result};
use crate::estimation::{
    amplitude_spectrum, combine_independent, dominant_peaks, fit_damped_cosine, undersampling_map, FitOptions,
};
use crate::hamiltonian::{
    conditional_precession, e_perp_direction, nv_resonances, ConditionalPrecession, HyperfineParams, SensorConfig,
    KHZ_US,
};
use crate::sequences::{
    correlation_trace, cp_axes, cp_nutation, cp_resonance_tau, cp_spectrum, decay_contrast, dip_window,
    integrated_depth, nutation_frequency, pulsepol_transfer, selective_polarization, synchronized_readout, BathSpin,
    CpParams, NuclearSpinState, PolVariant, PulsePolParams, ReadoutPhase, RfSelectivity, SATURATION_RUNS,
};
use crate::spincore::{wrap_angle, wrap_signed, SpinRotation, Vec3, E_X};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seed for every random draw; required when anything is sampled.
    pub seed: Option<u64>,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub bath: BathSpec,
    pub timing: Option<ProtocolTiming>,
    #[serde(default)]
    pub envelopes: Envelopes,
    pub sequence: SequenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub label: Option<String>,
    pub a_parallel_khz: f64,
    pub a_perp_khz: f64,
    /// Polar angle of the site in the sensor frame.
    pub theta_deg: Option<f64>,
    /// Azimuth of the site in the sensor frame.
    pub phi_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSpinSpec {
    pub a_parallel_khz: f64,
    pub a_perp_khz: f64,
    #[serde(default)]
    pub phi_deg: f64,
}

/// Uniform draws of `count` spins; the azimuth is uniform on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBath {
    pub count: usize,
    pub a_parallel_khz: [f64; 2],
    pub a_perp_khz: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSpec {
    #[serde(default)]
    pub spins: Vec<BathSpinSpec>,
    pub random: Option<RandomBath>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelopes {
    /// Exponential contrast decay applied to CP-type signals.
    pub decay_time_us: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl SweepRange {
    fn values(&self, path: &str) -> Result<Vec<f64>> {
        if self.points < 2 {
            return Err(Error::scenario(format!("{path}.points"), "need at least two points"));
        }
        if !(self.stop > self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::scenario(path, "stop must exceed start"));
        }
        let step = (self.stop - self.start) / (self.points - 1) as f64;
        Ok((0..self.points).map(|i| self.start + step * i as f64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarizationSpec {
    pub variant: PolVariant,
    pub tau_pol_us: f64,
    pub n_pol: u32,
    pub n_rep: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SequenceSpec {
    /// P_X against the pulse spacing.
    CpSweep { n_pulses: u32, tau_us: SweepRange },
    /// P_X against the pulse number at fixed spacing.
    CpNutation { tau_us: f64, max_pulses: u32, pulse_step: u32 },
    /// Correlation trace against the free interval.
    Correlation {
        n_pulses: u32,
        tau_us: f64,
        dt_us: f64,
        points: usize,
        #[serde(default = "readout_y")]
        readout: ReadoutPhase,
    },
    /// PulsePol survival against 1/(2 tau_pol).
    PulsepolSweep {
        variant: PolVariant,
        n_pol: u32,
        n_rep: u32,
        frequency_khz: SweepRange,
    },
    /// Selective against unselective PulsePol on the same spins.
    Selective {
        n_pol: u32,
        n_rep: u32,
        saturation_runs: Option<u32>,
        rf_t_pi_us: f64,
        /// Defaults to the first target's f1.
        rf_frequency_khz: Option<f64>,
        frequency_khz: SweepRange,
    },
    /// Azimuth protocol for the first target.
    AzimuthProtocol {
        variant: PolVariant,
        f_rf_khz: f64,
        f_p_khz: f64,
        phi_rf_deg: Vec<f64>,
        /// RF coil direction `[theta, phi]` in the sensor frame.
        rf_axis_deg: [f64; 2],
        /// Measured phases; predicted from the target azimuth when absent.
        measured_phi0_deg: Option<Vec<f64>>,
        step_us: Option<f64>,
        #[serde(default)]
        drive_model: DriveModel,
        #[serde(default = "yes")]
        fit: bool,
    },
    /// Repeated Y-phase CP blocks on freely precessing spins.
    SyncReadout {
        n_pulses: u32,
        tau_us: f64,
        t_l_us: f64,
        blocks: usize,
        /// PulsePol preparation followed by an ideal RF pi/2 about x.
        polarization: Option<PolarizationSpec>,
        /// Explicit initial direction `[theta, phi]` when no polarization is given.
        initial_deg: Option<[f64; 2]>,
    },
    /// Synthetic delay calibration scan and its fit.
    DelayScan {
        tau_us: f64,
        n_pulses: u32,
        burst_start_us: f64,
        #[serde(default)]
        phase_deg: f64,
        b_rf_mt: f64,
        t_wait_us: SweepRange,
        /// Half-width of uniform noise added to P_Y.
        noise: Option<f64>,
    },
    /// Synthetic four-axis ODMR data and the field fit.
    FieldFit {
        b_mt: f64,
        theta_lab_deg: f64,
        phi_lab_deg: f64,
        /// Half-width of uniform noise on each line, MHz.
        noise_mhz: Option<f64>,
        #[serde(default = "one")]
        samples_per_axis: usize,
    },
}

fn readout_y() -> ReadoutPhase {
    ReadoutPhase::Y
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl SequenceSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            SequenceSpec::CpSweep { .. } => "cp-sweep",
            SequenceSpec::CpNutation { .. } => "cp-nutation",
            SequenceSpec::Correlation { .. } => "correlation",
            SequenceSpec::PulsepolSweep { .. } => "pulsepol-sweep",
            SequenceSpec::Selective { .. } => "selective",
            SequenceSpec::AzimuthProtocol { .. } => "azimuth-protocol",
            SequenceSpec::SyncReadout { .. } => "sync-readout",
            SequenceSpec::DelayScan { .. } => "delay-scan",
            SequenceSpec::FieldFit { .. } => "field-fit",
        }
    }
}

/// Column-labelled numeric table plus named scalar results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutput {
    pub name: String,
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub summary: BTreeMap<String, f64>,
}

impl ScenarioOutput {
    fn new(scenario: &Scenario, columns: &[&str]) -> Self {
        ScenarioOutput {
            name: scenario.name.clone(),
            kind: scenario.sequence.kind().to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn set(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), value);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Name, kind and summary as pretty JSON, newline terminated.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            name: &'a str,
            kind: &'a str,
            summary: &'a BTreeMap<String, f64>,
        }
        let mut s = serde_json::to_string_pretty(&Summary {
            name: &self.name,
            kind: &self.kind,
            summary: &self.summary,
        })
        .expect("summary serializes");
        s.push('\n');
        s
    }

    /// Whole output, table included, as JSON.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("output serializes");
        s.push('\n');
        s
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::scenario("name", "must not be empty"));
        }
        self.sensor
            .validate()
            .map_err(|e| Error::scenario("sensor", e.to_string()))?;
        for (i, t) in self.targets.iter().enumerate() {
            HyperfineParams::new(t.a_parallel_khz, t.a_perp_khz)
                .map_err(|e| Error::scenario(format!("targets[{i}]"), e.to_string()))?;
            if let Some(theta) = t.theta_deg {
                if !(0.0..=180.0).contains(&theta) {
                    return Err(Error::scenario(format!("targets[{i}].theta_deg"), "outside [0, 180]"));
                }
            }
        }
        if let Some(r) = &self.bath.random {
            if self.seed.is_none() {
                return Err(Error::scenario("seed", "required when bath.random is set"));
            }
            for (field, [lo, hi]) in [("a_parallel_khz", r.a_parallel_khz), ("a_perp_khz", r.a_perp_khz)] {
                if !(hi > lo) {
                    return Err(Error::scenario(format!("bath.random.{field}"), "needs lo < hi"));
                }
            }
            if r.a_perp_khz[0] < 0.0 {
                return Err(Error::scenario("bath.random.a_perp_khz", "must be non-negative"));
            }
        }
        if let Some(d) = self.envelopes.decay_time_us {
            if !(d > 0.0) {
                return Err(Error::scenario("envelopes.decay_time_us", "must be positive"));
            }
        }
        if let Some(t) = &self.timing {
            t.validate(None).map_err(|e| Error::scenario("timing", e.to_string()))?;
        }
        self.validate_sequence()
    }

    fn validate_sequence(&self) -> Result<()> {
        let need_target = |kind: &str| -> Result<()> {
            if self.targets.is_empty() {
                return Err(Error::scenario("targets", format!("{kind} needs at least one target")));
            }
            Ok(())
        };
        let even = |path: &str, n: u32| -> Result<()> {
            if n == 0 || !n.is_multiple_of(2) {
                return Err(Error::scenario(path, "must be even and positive"));
            }
            Ok(())
        };
        let positive = |path: &str, v: f64| -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::scenario(path, "must be positive"));
            }
            Ok(())
        };
        let noisy = |path: &str, noise: Option<f64>| -> Result<()> {
            match noise {
                Some(n) if !(n >= 0.0) => Err(Error::scenario(path, "must be non-negative")),
                Some(n) if n > 0.0 && self.seed.is_none() => Err(Error::scenario("seed", "required when noise is set")),
                _ => Ok(()),
            }
        };
        match &self.sequence {
            SequenceSpec::CpSweep { n_pulses, tau_us } => {
                even("sequence.n_pulses", *n_pulses)?;
                tau_us.values("sequence.tau_us")?;
                if tau_us.start <= 0.0 {
                    return Err(Error::scenario("sequence.tau_us.start", "must be positive"));
                }
            }
            SequenceSpec::CpNutation {
                tau_us,
                max_pulses,
                pulse_step,
            } => {
                need_target("cp-nutation")?;
                positive("sequence.tau_us", *tau_us)?;
                even("sequence.pulse_step", *pulse_step)?;
                if max_pulses / pulse_step < 8 {
                    return Err(Error::scenario("sequence.max_pulses", "need at least eight pulse counts"));
                }
            }
            SequenceSpec::Correlation {
                n_pulses,
                tau_us,
                dt_us,
                points,
                ..
            } => {
                if self.targets.len() != 1 || !self.bath.spins.is_empty() || self.bath.random.is_some() {
                    return Err(Error::scenario("targets", "correlation takes exactly one spin and no bath"));
                }
                even("sequence.n_pulses", *n_pulses)?;
                positive("sequence.tau_us", *tau_us)?;
                positive("sequence.dt_us", *dt_us)?;
                if *points < 4 {
                    return Err(Error::scenario("sequence.points", "need at least four points"));
                }
            }
            SequenceSpec::PulsepolSweep {
                n_pol,
                n_rep,
                frequency_khz,
                ..
            } => {
                need_target("pulsepol-sweep")?;
                pulsepol_counts(*n_pol, *n_rep)?;
                frequency_khz.values("sequence.frequency_khz")?;
                positive("sequence.frequency_khz.start", frequency_khz.start)?;
            }
            SequenceSpec::Selective {
                n_pol,
                n_rep,
                saturation_runs,
                rf_t_pi_us,
                rf_frequency_khz,
                frequency_khz,
            } => {
                need_target("selective")?;
                pulsepol_counts(*n_pol, *n_rep)?;
                if *saturation_runs == Some(0) {
                    return Err(Error::scenario("sequence.saturation_runs", "must be positive"));
                }
                positive("sequence.rf_t_pi_us", *rf_t_pi_us)?;
                if let Some(f) = rf_frequency_khz {
                    positive("sequence.rf_frequency_khz", *f)?;
                }
                frequency_khz.values("sequence.frequency_khz")?;
                positive("sequence.frequency_khz.start", frequency_khz.start)?;
            }
            SequenceSpec::AzimuthProtocol {
                f_rf_khz,
                f_p_khz,
                phi_rf_deg,
                measured_phi0_deg,
                fit,
                ..
            } => {
                need_target("azimuth-protocol")?;
                let t = &self.targets[0];
                if t.theta_deg.is_none() {
                    return Err(Error::scenario("targets[0].theta_deg", "required by azimuth-protocol"));
                }
                if t.phi_deg.is_none() && (measured_phi0_deg.is_none() || !*fit) {
                    return Err(Error::scenario(
                        "targets[0].phi_deg",
                        "required unless measured phases are given and fitted",
                    ));
                }
                if self.timing.is_none() {
                    return Err(Error::scenario("timing", "required by azimuth-protocol"));
                }
                positive("sequence.f_rf_khz", *f_rf_khz)?;
                positive("sequence.f_p_khz", *f_p_khz)?;
                if phi_rf_deg.is_empty() {
                    return Err(Error::scenario("sequence.phi_rf_deg", "must not be empty"));
                }
                if *fit && phi_rf_deg.len() < 2 {
                    return Err(Error::scenario("sequence.phi_rf_deg", "fitting needs at least two phases"));
                }
                if let Some(m) = measured_phi0_deg {
                    if m.len() != phi_rf_deg.len() {
                        return Err(Error::scenario(
                            "sequence.measured_phi0_deg",
                            "must have one entry per sequence.phi_rf_deg",
                        ));
                    }
                }
            }
            SequenceSpec::SyncReadout {
                n_pulses,
                tau_us,
                t_l_us,
                blocks,
                polarization,
                initial_deg,
            } => {
                even("sequence.n_pulses", *n_pulses)?;
                positive("sequence.tau_us", *tau_us)?;
                positive("sequence.t_l_us", *t_l_us)?;
                if *blocks < 4 {
                    return Err(Error::scenario("sequence.blocks", "need at least four blocks"));
                }
                match (polarization, initial_deg) {
                    (Some(p), None) => {
                        positive("sequence.polarization.tau_pol_us", p.tau_pol_us)?;
                        pulsepol_counts(p.n_pol, p.n_rep)
                            .map_err(|e| Error::scenario("sequence.polarization", e.to_string()))?;
                    }
                    (None, Some(_)) => {}
                    _ => {
                        return Err(Error::scenario(
                            "sequence.polarization",
                            "exactly one of polarization and initial_deg is required",
                        ))
                    }
                }
                if self.targets.is_empty() && self.bath.spins.is_empty() && self.bath.random.is_none() {
                    return Err(Error::scenario("bath", "sync-readout needs at least one spin"));
                }
            }
            SequenceSpec::DelayScan {
                tau_us,
                n_pulses,
                b_rf_mt,
                t_wait_us,
                noise,
                ..
            } => {
                if self.timing.is_none() {
                    return Err(Error::scenario("timing", "delay-scan takes the planted delay from timing.t_delay_us"));
                }
                positive("sequence.tau_us", *tau_us)?;
                if *n_pulses == 0 {
                    return Err(Error::scenario("sequence.n_pulses", "must be positive"));
                }
                positive("sequence.b_rf_mt", *b_rf_mt)?;
                t_wait_us.values("sequence.t_wait_us")?;
                noisy("sequence.noise", *noise)?;
            }
            SequenceSpec::FieldFit {
                b_mt,
                theta_lab_deg,
                noise_mhz,
                samples_per_axis,
                ..
            } => {
                if !(*b_mt >= 0.0) {
                    return Err(Error::scenario("sequence.b_mt", "must be non-negative"));
                }
                if !(0.0..=180.0).contains(theta_lab_deg) {
                    return Err(Error::scenario("sequence.theta_lab_deg", "outside [0, 180]"));
                }
                if *samples_per_axis == 0 {
                    return Err(Error::scenario("sequence.samples_per_axis", "must be positive"));
                }
                noisy("sequence.noise_mhz", *noise_mhz)?;
            }
        }
        Ok(())
    }

    fn rng(&self) -> Option<ChaCha8Rng> {
        self.seed.map(ChaCha8Rng::seed_from_u64)
    }

    /// Conditional precession of each target, in order.
    pub fn target_precessions(&self) -> Result<Vec<ConditionalPrecession>> {
        self.targets
            .iter()
            .map(|t| {
                let hf = HyperfineParams::new(t.a_parallel_khz, t.a_perp_khz)?;
                let theta = t.theta_deg.unwrap_or(0.0).to_radians();
                let phi = t.phi_deg.unwrap_or(0.0).to_radians();
                conditional_precession(&self.sensor, &hf, e_perp_direction(theta, phi)?)
            })
            .collect()
    }

    /// Listed bath spins followed by the sampled ones.
    pub fn bath_precessions(&self) -> Result<Vec<ConditionalPrecession>> {
        let mut specs = self.bath.spins.clone();
        if let Some(r) = &self.bath.random {
            let mut rng = self
                .rng()
                .ok_or_else(|| Error::scenario("seed", "required when bath.random is set"))?;
            for _ in 0..r.count {
                let a_parallel_khz = rng.random_range(r.a_parallel_khz[0]..r.a_parallel_khz[1]);
                let a_perp_khz = rng.random_range(r.a_perp_khz[0]..r.a_perp_khz[1]);
                let phi_deg = rng.random_range(0.0..360.0);
                specs.push(BathSpinSpec {
                    a_parallel_khz,
                    a_perp_khz,
                    phi_deg,
                });
            }
        }
        specs
            .iter()
            .map(|s| {
                let hf = HyperfineParams::new(s.a_parallel_khz, s.a_perp_khz)?;
                let phi = s.phi_deg.to_radians();
                conditional_precession(&self.sensor, &hf, Vec3::new(phi.cos(), phi.sin(), 0.0))
            })
            .collect()
    }

    fn all_spins(&self) -> Result<Vec<ConditionalPrecession>> {
        let mut spins = self.target_precessions()?;
        spins.extend(self.bath_precessions()?);
        Ok(spins)
    }

    fn decay(&self, p: f64, t_us: f64) -> f64 {
        decay_contrast(p, t_us, self.envelopes.decay_time_us)
    }
}

fn pulsepol_counts(n_pol: u32, n_rep: u32) -> Result<()> {
    if n_pol == 0 {
        return Err(Error::scenario("sequence.n_pol", "must be positive"));
    }
    if n_rep == 0 {
        return Err(Error::scenario("sequence.n_rep", "must be positive"));
    }
    Ok(())
}

fn tau_pol_for(frequency_khz: f64) -> f64 {
    1.0 / (2.0 * frequency_khz * KHZ_US)
}

/// Mean-phase target resonance `(f0 + f1) / 2`.
fn transfer_frequency(prec: &ConditionalPrecession) -> f64 {
    0.5 * (prec.f0_khz + prec.f1_khz)
}

/// Index of the smallest value among points whose abscissa lies in `window`.
fn argmin_in(xs: &[f64], ys: &[f64], window: (f64, f64)) -> Option<usize> {
    xs.iter()
        .zip(ys)
        .enumerate()
        .filter(|(_, (x, _))| **x >= window.0 && **x <= window.1)
        .min_by(|a, b| a.1 .1.total_cmp(b.1 .1))
        .map(|(i, _)| i)
}

/// Runs a validated scenario.
pub fn run(scenario: &Scenario) -> Result<ScenarioOutput> {
    scenario.validate()?;
    match &scenario.sequence {
        SequenceSpec::CpSweep { n_pulses, tau_us } => run_cp_sweep(scenario, *n_pulses, tau_us),
        SequenceSpec::CpNutation {
            tau_us,
            max_pulses,
            pulse_step,
        } => run_cp_nutation(scenario, *tau_us, *max_pulses, *pulse_step),
        SequenceSpec::Correlation {
            n_pulses,
            tau_us,
            dt_us,
            points,
            readout,
        } => run_correlation(scenario, CpParams::new(*n_pulses, *tau_us, *readout)?, *dt_us, *points),
        SequenceSpec::PulsepolSweep {
            variant,
            n_pol,
            n_rep,
            frequency_khz,
        } => run_pulsepol_sweep(scenario, *variant, *n_pol, *n_rep, frequency_khz),
        SequenceSpec::Selective {
            n_pol,
            n_rep,
            saturation_runs,
            rf_t_pi_us,
            rf_frequency_khz,
            frequency_khz,
        } => run_selective(
            scenario,
            (*n_pol, *n_rep),
            saturation_runs.unwrap_or(SATURATION_RUNS),
            *rf_t_pi_us,
            *rf_frequency_khz,
            frequency_khz,
        ),
        SequenceSpec::AzimuthProtocol { .. } => run_azimuth(scenario),
        SequenceSpec::SyncReadout {
            n_pulses,
            tau_us,
            t_l_us,
            blocks,
            polarization,
            initial_deg,
        } => run_sync_readout(
            scenario,
            CpParams::new(*n_pulses, *tau_us, ReadoutPhase::Y)?,
            *t_l_us,
            *blocks,
            polarization.as_ref(),
            *initial_deg,
        ),
        SequenceSpec::DelayScan { .. } => run_delay_scan(scenario),
        SequenceSpec::FieldFit { .. } => run_field_fit(scenario),
    }
}

fn run_cp_sweep(scenario: &Scenario, n_pulses: u32, range: &SweepRange) -> Result<ScenarioOutput> {
    let taus = range.values("sequence.tau_us")?;
    let spins = scenario.all_spins()?;
    let per_spin: Vec<Vec<f64>> = spins.iter().map(|s| cp_spectrum(s, n_pulses, &taus)).collect();
    let mut out = ScenarioOutput::new(scenario, &["tau_us", "frequency_khz", "p_x"]);
    for (i, &tau) in taus.iter().enumerate() {
        let column: Vec<f64> = per_spin.iter().map(|s| s[i]).collect();
        let p = scenario.decay(combine_independent(&column), n_pulses as f64 * tau);
        out.rows.push(vec![tau, 1.0 / (2.0 * tau * KHZ_US), p]);
    }
    let p_x = out.column("p_x").expect("column exists");
    let (i_min, p_min) = p_x
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, p)| (i, *p))
        .expect("sweep is non-empty");
    out.set("tau_min_us", taus[i_min]);
    out.set("p_x_min", p_min);
    out.set("p_x_max", p_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if let (Some(t), Some(prec)) = (scenario.targets.first(), spins.first()) {
        if t.a_perp_khz > 0.0 {
            let tau = cp_resonance_tau(prec, range.start, range.stop)?;
            out.set("tau_resonance_us", tau);
            out.set("f_t_khz", 1.0 / (2.0 * tau * KHZ_US));
        }
    }
    Ok(out)
}

fn run_cp_nutation(scenario: &Scenario, tau_us: f64, max_pulses: u32, step: u32) -> Result<ScenarioOutput> {
    let counts: Vec<u32> = (1..=max_pulses / step).map(|k| k * step).collect();
    let spins = scenario.target_precessions()?;
    let per_spin: Vec<Vec<f64>> = spins.iter().map(|s| cp_nutation(s, tau_us, &counts)).collect();
    let mut out = ScenarioOutput::new(scenario, &["n_pulses", "t_us", "p_x"]);
    for (i, &n) in counts.iter().enumerate() {
        let t = n as f64 * tau_us;
        let column: Vec<f64> = per_spin.iter().map(|s| s[i]).collect();
        out.rows.push(vec![n as f64, t, scenario.decay(combine_independent(&column), t)]);
    }
    let axes = cp_axes(&spins[0], &CpParams::new(2, tau_us, ReadoutPhase::X)?);
    let predicted = nutation_frequency(&axes, tau_us);
    out.set("nutation_predicted_khz", predicted);
    let times = out.column("t_us").expect("column exists");
    let values = out.column("p_x").expect("column exists");
    let opts = FitOptions {
        window: 0.3,
        fit_decay: scenario.envelopes.decay_time_us.is_some(),
        ..FitOptions::default()
    };
    let fit = fit_damped_cosine(&times, &values, predicted, &opts)?;
    out.set("nutation_khz", fit.frequency_khz);
    out.set("nutation_amplitude", fit.amplitude.abs());
    out.set("fit_residual_rms", fit.residual_rms);
    Ok(out)
}

fn run_correlation(scenario: &Scenario, cp: CpParams, dt_us: f64, points: usize) -> Result<ScenarioOutput> {
    let grid: Vec<f64> = (0..points).map(|k| k as f64 * dt_us).collect();
    let prec = scenario.target_precessions()?[0];
    let trace = correlation_trace(&prec, &cp, &grid)?;
    let mut out = ScenarioOutput::new(scenario, &["t_corr_us", "p"]);
    for (&t, &p) in grid.iter().zip(&trace) {
        out.rows.push(vec![t, scenario.decay(p, t)]);
    }
    let values = out.column("p").expect("column exists");
    let spectrum = amplitude_spectrum(&values, dt_us);
    let mut peaks = dominant_peaks(&spectrum, 2);
    peaks.sort_by(f64::total_cmp);
    out.set("bin_khz", 1.0 / (points as f64 * dt_us * KHZ_US));
    if let [low, high] = peaks[..] {
        out.set("peak_low_khz", low);
        out.set("peak_high_khz", high);
        out.set("midpoint_khz", 0.5 * (low + high));
    } else if let [only] = peaks[..] {
        out.set("peak_low_khz", only);
    }
    Ok(out)
}

fn run_pulsepol_sweep(
    scenario: &Scenario,
    variant: PolVariant,
    n_pol: u32,
    n_rep: u32,
    range: &SweepRange,
) -> Result<ScenarioOutput> {
    let xs = range.values("sequence.frequency_khz")?;
    let spins = scenario.all_spins()?;
    let mut out = ScenarioOutput::new(scenario, &["frequency_khz", "tau_pol_us", "p0", "iz_target"]);
    for &x in &xs {
        let pp = PulsePolParams {
            tau_pol_us: tau_pol_for(x),
            n_pol,
            n_rep,
            variant,
        };
        let mut p0s = Vec::with_capacity(spins.len());
        let mut iz = 0.0;
        for (i, s) in spins.iter().enumerate() {
            let o = pulsepol_transfer(s, &pp, &NuclearSpinState::mixed("spin"))?;
            if i == 0 {
                iz = 0.5 * o.final_state.bloch.z;
            }
            p0s.push(o.p0);
        }
        out.rows.push(vec![x, pp.tau_pol_us, combine_independent(&p0s), iz]);
    }
    let p0 = out.column("p0").expect("column exists");
    let iz = out.column("iz_target").expect("column exists");
    let f_t = transfer_frequency(&spins[0]);
    out.set("f_t_khz", f_t);
    for k in [3u32, 5] {
        if let Some(i) = argmin_in(&xs, &p0, dip_window(f_t, k, n_pol)) {
            out.set(&format!("dip_k{k}_khz"), xs[i]);
            out.set(&format!("dip_k{k}_p0"), p0[i]);
            out.set(&format!("iz_k{k}"), iz[i]);
        }
    }
    Ok(out)
}

fn run_selective(
    scenario: &Scenario,
    (n_pol, n_rep): (u32, u32),
    saturation_runs: u32,
    t_pi_us: f64,
    rf_frequency_khz: Option<f64>,
    range: &SweepRange,
) -> Result<ScenarioOutput> {
    let xs = range.values("sequence.frequency_khz")?;
    let spins = scenario.all_spins()?;
    let (target, others) = spins.split_first().expect("validated: one target");
    let rf = RfSelectivity {
        frequency_khz: rf_frequency_khz.unwrap_or(target.f1_khz),
        t_pi_us,
    };
    let mut out = ScenarioOutput::new(
        scenario,
        &[
            "frequency_khz",
            "p0_unselective",
            "p0_selective",
            "p0_others_unselective",
            "p0_others_selective",
        ],
    );
    for &x in &xs {
        let pp = PulsePolParams {
            tau_pol_us: tau_pol_for(x),
            n_pol,
            n_rep,
            variant: PolVariant::PolY,
        };
        let unselective: Vec<f64> = spins
            .iter()
            .map(|s| pulsepol_transfer(s, &pp, &NuclearSpinState::mixed("spin")).map(|o| o.p0))
            .collect::<Result<_>>()?;
        let selective = selective_polarization(target, others, &pp, Some(&rf), saturation_runs)?;
        out.rows.push(vec![
            x,
            combine_independent(&unselective),
            selective.p0,
            combine_independent(&unselective[1..]),
            combine_independent(&selective.p0_per_spin[1..]),
        ]);
    }
    // windows around every non-target dip
    let windows: Vec<(f64, f64)> = others
        .iter()
        .filter(|s| !rf.flips(s))
        .flat_map(|s| [3, 5].map(|k| dip_window(transfer_frequency(s), k, n_pol)))
        .collect();
    let depth_uns = integrated_depth(&xs, &out.column("p0_others_unselective").expect("column"), &windows)?;
    let depth_sel = integrated_depth(&xs, &out.column("p0_others_selective").expect("column"), &windows)?;
    out.set("others_depth_unselective", depth_uns);
    out.set("others_depth_selective", depth_sel);
    out.set("suppression_ratio", depth_uns / depth_sel);
    out.set("saturation_runs", saturation_runs as f64);
    let f_t = transfer_frequency(target);
    let selective = out.column("p0_selective").expect("column");
    for k in [3u32, 5] {
        if let Some(i) = argmin_in(&xs, &selective, dip_window(f_t, k, n_pol)) {
            out.set(&format!("target_dip_k{k}_khz"), xs[i]);
            out.set(&format!("target_dip_k{k}_p0"), selective[i]);
        }
    }
    Ok(out)
}

fn run_azimuth(scenario: &Scenario) -> Result<ScenarioOutput> {
    let SequenceSpec::AzimuthProtocol {
        variant,
        f_rf_khz,
        f_p_khz,
        phi_rf_deg,
        rf_axis_deg,
        measured_phi0_deg,
        step_us,
        drive_model,
        fit,
    } = &scenario.sequence
    else {
        unreachable!("dispatched on kind");
    };
    let target = &scenario.targets[0];
    let prec = scenario.target_precessions()?[0];
    let site_theta = target.theta_deg.expect("validated").to_radians();
    let protocol = AzimuthProtocol {
        timing: scenario.timing.expect("validated"),
        theta_p: prec.theta_p,
        site_theta,
        e_rf: Vec3::from_spherical(rf_axis_deg[0].to_radians(), rf_axis_deg[1].to_radians()),
        f_rf_khz: *f_rf_khz,
        initial: *variant,
        step_us: *step_us,
        drive_model: *drive_model,
    };
    protocol
        .validate()
        .map_err(|e| Error::scenario("sequence", e.to_string()))?;
    let site_phi = target.phi_deg.map(f64::to_radians);
    let measurements: Vec<PhaseMeasurement> = phi_rf_deg
        .iter()
        .enumerate()
        .map(|(i, &rf_deg)| {
            let phi_rf = rf_deg.to_radians();
            let phi_0 = match (measured_phi0_deg, site_phi) {
                (Some(m), _) => wrap_angle(m[i].to_radians()),
                (None, None) => unreachable!("validated"),
                (None, Some(phi)) => protocol.predicted_phi0(phi, phi_rf, *f_p_khz)?,
            };
            Ok(PhaseMeasurement {
                phi_rf,
                phi_0,
                f_p_khz: *f_p_khz,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = ScenarioOutput::new(scenario, &["phi_rf_deg", "phi_n0_deg", "phi0_deg", "phi_deg"]);
    let fitted = if *fit { Some(protocol.fit_phi(&measurements)?) } else { None };
    if let Some(result) = &fitted {
        out.set("phi_fit_deg", result.phi.to_degrees());
        out.set("phi_accuracy_deg", result.accuracy.to_degrees());
        out.set("ambiguous", if result.ambiguous { 1.0 } else { 0.0 });
        if let Some(phi) = site_phi {
            out.set("fit_error_deg", wrap_signed(result.phi - phi).to_degrees());
        }
    }
    // per-phase columns use the planted azimuth, or the fitted one without it
    let reference = site_phi.or(fitted.as_ref().map(|f| f.phi)).expect("validated");
    let (mut sin_sum, mut cos_sum) = (0.0, 0.0);
    for m in &measurements {
        let phi_n0 = protocol.simulate_phi_n0(reference, m.phi_rf, *f_p_khz)?;
        let phi = determine_phi(phi_n0, m.phi_0, site_theta)?;
        out.rows.push(vec![
            m.phi_rf.to_degrees(),
            phi_n0.to_degrees(),
            m.phi_0.to_degrees(),
            phi.to_degrees(),
        ]);
        sin_sum += (m.phi_0 - m.phi_rf).sin();
        cos_sum += (m.phi_0 - m.phi_rf).cos();
    }
    out.set("phi0_offset_deg", wrap_angle(sin_sum.atan2(cos_sum)).to_degrees());
    out.set("theta_p_deg", prec.theta_p.to_degrees());
    if let Some(phi) = site_phi {
        out.set("planted_phi_deg", phi.to_degrees());
    }
    Ok(out)
}

fn run_sync_readout(
    scenario: &Scenario,
    cp: CpParams,
    t_l_us: f64,
    blocks: usize,
    polarization: Option<&PolarizationSpec>,
    initial_deg: Option<[f64; 2]>,
) -> Result<ScenarioOutput> {
    let spins = scenario.all_spins()?;
    let tip = SpinRotation::from_axis_angle(E_X, 0.5 * PI)?;
    let bath: Vec<BathSpin> = spins
        .iter()
        .map(|prec| {
            let initial = match (polarization, initial_deg) {
                (Some(p), _) => {
                    let pp = PulsePolParams {
                        tau_pol_us: p.tau_pol_us,
                        n_pol: p.n_pol,
                        n_rep: p.n_rep,
                        variant: p.variant,
                    };
                    let polarized = pulsepol_transfer(prec, &pp, &NuclearSpinState::mixed("spin"))?;
                    tip.apply(polarized.final_state.bloch)
                }
                (None, Some([theta, phi])) => Vec3::from_spherical(theta.to_radians(), phi.to_radians()),
                (None, None) => unreachable!("validated"),
            };
            Ok(BathSpin { prec: *prec, initial })
        })
        .collect::<Result<_>>()?;
    let trace = synchronized_readout(&bath, t_l_us, blocks, &cp)?;
    let mut out = ScenarioOutput::new(scenario, &["block", "t_us", "p_y"]);
    for (k, p) in trace.iter().enumerate() {
        out.rows.push(vec![k as f64, k as f64 * t_l_us, *p]);
    }
    let spectrum = amplitude_spectrum(&trace, t_l_us);
    if let Some(&peak) = dominant_peaks(&spectrum, 1).first() {
        out.set("alias_peak_khz", peak);
    }
    let f_c = scenario.sensor.larmor_khz();
    if let Ok((m, alias)) = undersampling_map(f_c, t_l_us) {
        out.set("alias_order", m as f64);
        out.set("expected_alias_khz", alias);
    }
    out.set("bin_khz", 1.0 / (blocks as f64 * t_l_us * KHZ_US));
    out.set("larmor_khz", f_c);
    Ok(out)
}

fn run_delay_scan(scenario: &Scenario) -> Result<ScenarioOutput> {
    let SequenceSpec::DelayScan {
        tau_us,
        n_pulses,
        burst_start_us,
        phase_deg,
        b_rf_mt,
        t_wait_us,
        noise,
    } = &scenario.sequence
    else {
        unreachable!("dispatched on kind");
    };
    let planted = scenario.timing.expect("validated").t_delay_us;
    let window = SensingWindow {
        tau_us: *tau_us,
        n_pulses: *n_pulses,
    };
    let burst = matched_burst(&window, *burst_start_us, phase_deg.to_radians());
    let gamma_e = scenario.sensor.gamma_e_mhz_per_mt;
    let mut rng = scenario.rng();
    let scan: Vec<ScanPoint> = t_wait_us
        .values("sequence.t_wait_us")?
        .into_iter()
        .map(|t| {
            let mut p_y = delay_scan_probability(accumulated_phase(&window, &burst, planted, t, *b_rf_mt, gamma_e));
            if let (Some(n), Some(r)) = (noise.filter(|n| *n > 0.0), rng.as_mut()) {
                p_y += r.random_range(-n..n);
            }
            ScanPoint { t_wait_us: t, p_y }
        })
        .collect();
    let est = estimate_delay(&scan, &window, &burst, gamma_e)?;
    let mut out = ScenarioOutput::new(scenario, &["t_wait_us", "p_y", "p_y_fit"]);
    for p in &scan {
        let fit = delay_scan_probability(accumulated_phase(
            &window,
            &burst,
            est.t_delay_us,
            p.t_wait_us,
            est.b_rf_mt,
            gamma_e,
        ));
        out.rows.push(vec![p.t_wait_us, p.p_y, fit]);
    }
    out.set("planted_t_delay_us", planted);
    out.set("t_delay_us", est.t_delay_us);
    out.set("stderr_us", est.stderr_us);
    out.set("b_rf_mt", est.b_rf_mt);
    out.set("residual_rms", est.residual_rms);
    Ok(out)
}

fn run_field_fit(scenario: &Scenario) -> Result<ScenarioOutput> {
    let SequenceSpec::FieldFit {
        b_mt,
        theta_lab_deg,
        phi_lab_deg,
        noise_mhz,
        samples_per_axis,
    } = &scenario.sequence
    else {
        unreachable!("dispatched on kind");
    };
    let cfg = &scenario.sensor;
    let field = Vec3::from_spherical(theta_lab_deg.to_radians(), phi_lab_deg.to_radians()) * *b_mt;
    let mut rng = scenario.rng();
    let mut out = ScenarioOutput::new(scenario, &["axis", "f_minus_mhz", "f_plus_mhz"]);
    let mut observations = Vec::new();
    for (i, axis) in nv_axes_lab().into_iter().enumerate() {
        let (lo, hi) = nv_resonances(cfg.zero_field_splitting_mhz, cfg.gamma_e_mhz_per_mt, field, axis);
        for _ in 0..*samples_per_axis {
            let (mut f_minus, mut f_plus) = (lo, hi);
            if let (Some(n), Some(r)) = (noise_mhz.filter(|n| *n > 0.0), rng.as_mut()) {
                f_minus += r.random_range(-n..n);
                f_plus += r.random_range(-n..n);
            }
            out.rows.push(vec![i as f64, f_minus, f_plus]);
            observations.push(FieldObservation {
                nv_axis: axis,
                f_minus_mhz: f_minus,
                f_plus_mhz: f_plus,
            });
        }
    }
    let fit = fit_field(&observations, cfg.gamma_e_mhz_per_mt)?;
    out.set("d_mhz", fit.d_mhz);
    out.set("b_mt", fit.b_mag_mt);
    out.set("theta_lab_deg", fit.theta_lab.to_degrees());
    out.set("phi_lab_deg", fit.phi_lab.to_degrees());
    out.set("residual_rms_mhz", fit.residual_rms_mhz);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario> {
        Scenario::from_toml_str(text)
    }

    const FLAT: &str = r#"
name = "flat"

[[targets]]
a_parallel_khz = 0.0
a_perp_khz = 0.0

[sequence]
kind = "cp-sweep"
n_pulses = 16
tau_us = { start = 1.2, stop = 2.0, points = 41 }
"#;

    #[test]
    fn uncoupled_scenario_is_flat() {
        let out = run(&parse(FLAT).unwrap()).unwrap();
        assert!(out.column("p_x").unwrap().iter().all(|p| (p - 1.0).abs() < 1e-12));
        assert!(!out.summary.contains_key("tau_resonance_us"));
    }

    #[test]
    fn random_bath_needs_seed() {
        let text = FLAT.replace(
            "[sequence]",
            "[bath.random]\ncount = 2\na_parallel_khz = [-1.0, 1.0]\na_perp_khz = [1.0, 2.0]\n\n[sequence]",
        );
        match parse(&text) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "seed"),
            other => panic!("{other:?}"),
        }
        let seeded = format!("seed = 4\n{text}");
        let a = parse(&seeded).unwrap().bath_precessions().unwrap();
        let b = parse(&seeded).unwrap().bath_precessions().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn unknown_kind_and_fields_rejected() {
        let bad = FLAT.replace("cp-sweep", "cp-sweeep");
        assert!(matches!(parse(&bad), Err(Error::Parse { .. })));
        let extra = FLAT.replace("n_pulses = 16", "n_pulses = 16\nextra = 1");
        assert!(matches!(parse(&extra), Err(Error::Parse { .. })));
    }

    #[test]
    fn invalid_parameters_report_paths() {
        let odd = FLAT.replace("n_pulses = 16", "n_pulses = 15");
        match parse(&odd) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "sequence.n_pulses"),
            other => panic!("{other:?}"),
        }
        let few = FLAT.replace("points = 41", "points = 1");
        match parse(&few) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "sequence.tau_us.points"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line() {
        match parse("name = \"x\"\n[sequence]\nkind = 3\n") {
            Err(Error::Parse { line, .. }) => assert!(line >= 2, "{line}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_and_json_render() {
        let out = run(&parse(FLAT).unwrap()).unwrap();
        let csv = out.csv_string().unwrap();
        assert!(csv.starts_with("tau_us,frequency_khz,p_x\n1.2,"));
        assert_eq!(csv.lines().count(), 42);
        let json: serde_json::Value = serde_json::from_str(&out.summary_json()).unwrap();
        assert_eq!(json["kind"], "cp-sweep");
        assert_eq!(json["summary"]["p_x_min"], 1.0);
    }

    #[test]
    fn field_fit_round_trip() {
        let text = r#"
name = "field"
[sequence]
kind = "field-fit"
b_mt = 1.47
theta_lab_deg = 5.2
phi_lab_deg = 81.6
"#;
        let out = run(&parse(text).unwrap()).unwrap();
        assert!((out.summary["b_mt"] - 1.47).abs() < 1e-6);
        assert!((out.summary["theta_lab_deg"] - 5.2).abs() < 1e-4);
        assert!((out.summary["phi_lab_deg"] - 81.6).abs() < 1e-3);
        assert!((out.summary["d_mhz"] - 2870.4).abs() < 1e-6);
    }
}
