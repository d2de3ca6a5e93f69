//! `spinloc`: run scenarios and individual analysis stages from the shell.
//!
//! Angles are degrees, times µs and frequencies kHz unless a flag name says
//! otherwise. Exit status: 0 on success, 2 on input errors, 3 when a
//! numerical method fails.

mod input;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spinloc::blochsim::{determine_phi, phi_n_analytic, AzimuthProtocol, DriveModel, PhaseMeasurement, ProtocolTiming};
use spinloc::calibration::{estimate_delay, fit_field, matched_burst, parse_delay_scan, parse_field_observations, SensingWindow};
use spinloc::estimation::{estimate_hyperfine, fit_damped_cosine, recover_phase, FitOptions, UndersamplingConfig};
use spinloc::hamiltonian::{conditional_precession, HyperfineParams, SensorConfig};
use spinloc::lattice::{
    bundled_candidates, lab_to_sensor, match_hyperfine, parse_candidates, sites_in_phi_range, spherical_of, LatticeConfig,
    Sublattice,
};
use spinloc::scenario::{self, Scenario};
use spinloc::sequences::PolVariant;
use spinloc::spincore::{wrap_angle, Vec3, E_X};
use spinloc::Error;

use input::{numeric_columns, open};
use table::{Format, Sink, Table};

#[derive(Debug, Parser)]
#[command(name = "spinloc", version, about = "Locate a 13C nuclear spin next to an NV center")]
#[command(after_help = "Units: angles in degrees, times in µs, frequencies in kHz unless the flag says MHz.\n\
Exit status: 0 success, 2 input error, 3 numerical failure.")]
struct Cli {
    /// Output file; defaults to stdout or the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Directory for outputs named after the scenario or subcommand.
    #[arg(long, global = true, env = "SPINLOC_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file; CSV output gets a summary JSON beside it.
    Run {
        scenario: PathBuf,
    },
    /// Fit a (damped) cosine to a `t_us,value` trace.
    Fit(FitArgs),
    /// Hyperfine components from the CP nutation and branch frequencies.
    InvertHyperfine(InvertArgs),
    /// True phase from the phase fitted on an undersampled trace.
    RecoverPhase(RecoverArgs),
    /// Candidate lattice sites whose hyperfine values match.
    MatchSites(MatchArgs),
    /// Nuclear azimuth from `phi_rf_deg,phi0_deg,f_p_khz` measurements.
    Phi(PhiArgs),
    /// Field and timing calibrations.
    Calibrate {
        #[command(subcommand)]
        target: CalibrateTarget,
    },
    /// 13C lattice sites around the NV center in sensor coordinates.
    Lattice(LatticeArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    trace: PathBuf,
    /// Frequency hint, kHz.
    #[arg(long)]
    f_hint: f64,
    /// Search half-width relative to the hint.
    #[arg(long, default_value_t = 0.05)]
    window: f64,
    /// Also fit an exponential decay envelope.
    #[arg(long)]
    decay: bool,
}

#[derive(Debug, Args)]
struct InvertArgs {
    /// CP nutation frequency, kHz.
    #[arg(long, allow_negative_numbers = true)]
    fcp: f64,
    /// Bare 13C Larmor frequency, kHz.
    #[arg(long, allow_negative_numbers = true)]
    f0: f64,
    /// Precession frequency in m_S = -1, kHz.
    #[arg(long, allow_negative_numbers = true)]
    f1: f64,
    /// CP half spacing, µs.
    #[arg(long)]
    tau: f64,
}

#[derive(Debug, Args)]
struct RecoverArgs {
    /// Phase fitted on the aliased trace, degrees.
    #[arg(long, allow_negative_numbers = true)]
    eta: f64,
    /// Alias order (even).
    #[arg(long)]
    m: u64,
    /// Time of the first sample, µs.
    #[arg(long, allow_negative_numbers = true)]
    t0: f64,
    /// Sampling interval, µs.
    #[arg(long)]
    dt: f64,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Measured A_parallel, kHz.
    #[arg(long, allow_negative_numbers = true)]
    apar: f64,
    /// Measured A_perp, kHz.
    #[arg(long)]
    aperp: f64,
    /// Tolerances `parallel,perp`, kHz.
    #[arg(long, value_parser = parse_pair, default_value = "5,1", allow_hyphen_values = true)]
    tol: [f64; 2],
    /// `label,a_parallel_khz,a_perp_khz` table; the bundled one by default.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").args(["analytic", "simulate"]))]
struct PhiArgs {
    #[arg(long)]
    measurements: PathBuf,
    /// High-field closed form for phi_n(0) (default).
    #[arg(long)]
    analytic: bool,
    /// Integrate the nuclear Bloch equation and fit phi.
    #[arg(long)]
    simulate: bool,
    /// Polar angle of the nucleus, degrees.
    #[arg(long)]
    theta: f64,
    /// RF coil axis `theta,phi` in sensor coordinates, degrees.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    rf_axis: [f64; 2],
    /// RF carrier, kHz.
    #[arg(long)]
    f_rf: f64,
    /// RF pulse length, µs.
    #[arg(long)]
    t1: f64,
    /// Readout dead time, µs (simulate).
    #[arg(long)]
    t0: Option<f64>,
    /// Sensor inversion midpoint to RF end, µs (simulate).
    #[arg(long)]
    t2: Option<f64>,
    /// Electronics delay, µs (simulate).
    #[arg(long, default_value_t = 0.0)]
    t_delay: f64,
    /// Hyperfine `a_parallel,a_perp`, kHz (simulate).
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    hyperfine: Option<[f64; 2]>,
    /// Static field, mT (simulate).
    #[arg(long, default_value_t = SensorConfig::default().b0_mt)]
    b0_mt: f64,
    #[arg(long, value_enum, default_value_t = Variant::PolY)]
    variant: Variant,
    #[arg(long, value_enum, default_value_t = Drive::Linear)]
    drive_model: Drive,
    /// Integrator step, µs (simulate).
    #[arg(long)]
    step: Option<f64>,
    /// Evaluate at this azimuth instead of fitting, degrees (simulate).
    #[arg(long)]
    at: Option<f64>,
}

/// `a,b` as two numbers.
fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts[..] else {
        return Err(format!("expected two comma-separated numbers, got `{s}`"));
    };
    let num = |x: &str| x.parse::<f64>().map_err(|_| format!("`{x}` is not a number"));
    Ok([num(a)?, num(b)?])
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variant {
    #[value(name = "polx")]
    PolX,
    #[value(name = "poly")]
    PolY,
}

impl From<Variant> for PolVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::PolX => PolVariant::PolX,
            Variant::PolY => PolVariant::PolY,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Drive {
    Linear,
    RotatingWave,
}

impl From<Drive> for DriveModel {
    fn from(d: Drive) -> Self {
        match d {
            Drive::Linear => DriveModel::Linear,
            Drive::RotatingWave => DriveModel::RotatingWave,
        }
    }
}

#[derive(Debug, Subcommand)]
enum CalibrateTarget {
    /// Fit (D, B) to `axis_x,axis_y,axis_z,f_minus_mhz,f_plus_mhz` rows (lab frame).
    Field {
        file: PathBuf,
        #[arg(long, default_value_t = SensorConfig::default().gamma_e_mhz_per_mt)]
        gamma_e_mhz_per_mt: f64,
    },
    /// Fit the electronics delay to a `t_wait_us,p_y` scan.
    Delay {
        file: PathBuf,
        /// CP half spacing, µs.
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        n_pulses: u32,
        /// Programmed burst start relative to the window, µs.
        #[arg(long)]
        burst_start: f64,
        /// Burst phase, degrees.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        phase: f64,
        #[arg(long, default_value_t = SensorConfig::default().gamma_e_mhz_per_mt)]
        gamma_e_mhz_per_mt: f64,
    },
}

#[derive(Debug, Args)]
struct LatticeArgs {
    /// Maximum distance from the origin, Å.
    #[arg(long)]
    extent: f64,
    /// Keep sites with azimuth in `center,half_width`, degrees.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    phi_window: Option<[f64; 2]>,
    /// Keep sites near `r,theta` (Å, degrees).
    #[arg(long, value_parser = parse_pair)]
    shell: Option<[f64; 2]>,
    /// Tolerances for `--shell`: Å and degrees.
    #[arg(long, value_parser = parse_pair, default_value = "0.05,0.5")]
    shell_tol: [f64; 2],
    /// Diamond lattice constant, Å.
    #[arg(long, default_value_t = LatticeConfig::default().lattice_constant_a)]
    lattice_constant: f64,
    /// Origin height above the vacancy along the NV axis, Å.
    #[arg(long, default_value_t = LatticeConfig::default().origin_offset_a)]
    origin_offset: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let sink = Sink {
        out: cli.out,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    let table = match cli.command {
        Command::Run { scenario } => {
            let output = run_scenario(&scenario)?;
            return sink.emit_scenario(&output);
        }
        Command::Fit(a) => fit(&a)?,
        Command::InvertHyperfine(a) => invert(&a)?,
        Command::RecoverPhase(a) => recover(&a)?,
        Command::MatchSites(a) => match_sites(&a)?,
        Command::Phi(a) => phi(&a)?,
        Command::Calibrate { target } => calibrate(&target)?,
        Command::Lattice(a) => lattice(&a)?,
    };
    sink.emit(&table)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::Scenario { path: field, message } => Error::Scenario {
            path: field,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    }
}

fn run_scenario(path: &Path) -> Result<scenario::ScenarioOutput, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| table::io_context(e, path))?;
    let scenario = Scenario::from_toml_str(&text).map_err(|e| with_path(path, e))?;
    scenario::run(&scenario).map_err(|e| with_path(path, e))
}

fn fit(a: &FitArgs) -> Result<Table, Error> {
    let cols = numeric_columns(&a.trace, &["t_us", "value"]).map_err(|e| with_path(&a.trace, e))?;
    let opts = FitOptions {
        window: a.window,
        fit_decay: a.decay,
        ..FitOptions::default()
    };
    let f = fit_damped_cosine(&cols[0], &cols[1], a.f_hint, &opts)?;
    let mut t = Table::new(
        "fit",
        &["frequency_khz", "amplitude", "offset", "phase_deg", "decay_time_us", "residual_rms"],
    );
    t.push(vec![
        f.frequency_khz.into(),
        f.amplitude.into(),
        f.offset.into(),
        f.phase.to_degrees().into(),
        f.decay_time_us.into(),
        f.residual_rms.into(),
    ]);
    Ok(t)
}

fn invert(a: &InvertArgs) -> Result<Table, Error> {
    let hf = estimate_hyperfine(a.fcp, a.f0, a.f1, a.tau)?;
    let mut t = Table::new("invert-hyperfine", &["a_parallel_khz", "a_perp_khz"]);
    t.push(vec![hf.a_parallel_khz.into(), hf.a_perp_khz.into()]);
    Ok(t)
}

fn recover(a: &RecoverArgs) -> Result<Table, Error> {
    let cfg = UndersamplingConfig::new(a.dt, a.t0, a.m)?;
    let eta = recover_phase(a.eta.to_radians(), &cfg);
    let mut t = Table::new("recover-phase", &["eta_deg", "nyquist_khz"]);
    t.push(vec![eta.to_degrees().into(), cfg.nyquist_khz().into()]);
    Ok(t)
}

fn match_sites(a: &MatchArgs) -> Result<Table, Error> {
    let candidates = match &a.table {
        Some(path) => parse_candidates(open(path)?).map_err(|e| with_path(path, e))?,
        None => bundled_candidates(),
    };
    let measured = HyperfineParams::new(a.apar, a.aperp)?;
    let matches = match_hyperfine(&measured, &candidates, (a.tol[0], a.tol[1]))?;
    let mut t = Table::new("match-sites", &["label", "a_parallel_khz", "a_perp_khz"]);
    for c in matches {
        t.push(vec![c.label.as_str().into(), c.a_parallel.into(), c.a_perp.into()]);
    }
    Ok(t)
}

fn read_measurements(path: &Path) -> Result<Vec<PhaseMeasurement>, Error> {
    let cols = numeric_columns(path, &["phi_rf_deg", "phi0_deg", "f_p_khz"]).map_err(|e| with_path(path, e))?;
    Ok((0..cols[0].len())
        .map(|i| PhaseMeasurement {
            phi_rf: wrap_angle(cols[0][i].to_radians()),
            phi_0: wrap_angle(cols[1][i].to_radians()),
            f_p_khz: cols[2][i],
        })
        .collect())
}

fn missing(flag: &str) -> Error {
    Error::Domain(format!("--simulate requires --{flag}"))
}

fn phi(a: &PhiArgs) -> Result<Table, Error> {
    let measurements = read_measurements(&a.measurements)?;
    let theta = a.theta.to_radians();
    let (rf_theta, rf_phi) = (a.rf_axis[0].to_radians(), a.rf_axis[1].to_radians());
    let mut t = Table::new("phi", &["phi_rf_deg", "phi_n0_deg", "phi0_deg", "phi_deg"]);
    let push = |t: &mut Table, m: &PhaseMeasurement, phi_n0: f64| -> Result<f64, Error> {
        let phi = determine_phi(phi_n0, m.phi_0, theta)?;
        t.push(vec![
            m.phi_rf.to_degrees().into(),
            phi_n0.to_degrees().into(),
            m.phi_0.to_degrees().into(),
            phi.to_degrees().into(),
        ]);
        Ok(phi)
    };
    if !a.simulate {
        let (mut s, mut c) = (0.0, 0.0);
        for m in &measurements {
            let phi_n0 = phi_n_analytic(m.phi_rf, rf_phi, m.f_p_khz, a.f_rf, a.t1);
            let phi = push(&mut t, m, phi_n0)?;
            s += phi.sin();
            c += phi.cos();
        }
        t.set("phi_mean_deg", wrap_angle(s.atan2(c)).to_degrees());
        return Ok(t);
    }
    let [a_par, a_perp] = a.hyperfine.ok_or_else(|| missing("hyperfine"))?;
    let sensor = SensorConfig {
        b0_mt: a.b0_mt,
        ..SensorConfig::default()
    };
    let prec = conditional_precession(&sensor, &HyperfineParams::new(a_par, a_perp)?, E_X)?;
    let protocol = AzimuthProtocol {
        timing: ProtocolTiming {
            t0_us: a.t0.ok_or_else(|| missing("t0"))?,
            t1_us: a.t1,
            t2_us: a.t2.ok_or_else(|| missing("t2"))?,
            t_delay_us: a.t_delay,
        },
        theta_p: prec.theta_p,
        site_theta: theta,
        e_rf: Vec3::from_spherical(rf_theta, rf_phi),
        f_rf_khz: a.f_rf,
        initial: a.variant.into(),
        step_us: a.step,
        drive_model: a.drive_model.into(),
    };
    protocol.validate()?;
    let reference = match a.at {
        Some(deg) => deg.to_radians(),
        None => {
            let fit = protocol.fit_phi(&measurements)?;
            t.set("phi_fit_deg", fit.phi.to_degrees());
            t.set("phi_accuracy_deg", fit.accuracy.to_degrees());
            t.set("ambiguous", if fit.ambiguous { 1.0 } else { 0.0 });
            fit.phi
        }
    };
    t.set("theta_p_deg", prec.theta_p.to_degrees());
    for m in &measurements {
        let phi_n0 = protocol.simulate_phi_n0(reference, m.phi_rf, m.f_p_khz)?;
        push(&mut t, m, phi_n0)?;
    }
    Ok(t)
}

fn calibrate(target: &CalibrateTarget) -> Result<Table, Error> {
    match target {
        CalibrateTarget::Field {
            file,
            gamma_e_mhz_per_mt,
        } => {
            let obs = parse_field_observations(open(file)?).map_err(|e| with_path(file, e))?;
            let f = fit_field(&obs, *gamma_e_mhz_per_mt)?;
            let (_, theta_s, phi_s) = spherical_of(lab_to_sensor(Vec3::from_spherical(f.theta_lab, f.phi_lab)))?;
            let mut t = Table::new(
                "calibrate-field",
                &[
                    "d_mhz",
                    "b_mt",
                    "theta_lab_deg",
                    "phi_lab_deg",
                    "theta_sensor_deg",
                    "phi_sensor_deg",
                    "residual_rms_mhz",
                ],
            );
            t.push(vec![
                f.d_mhz.into(),
                f.b_mag_mt.into(),
                f.theta_lab.to_degrees().into(),
                f.phi_lab.to_degrees().into(),
                theta_s.to_degrees().into(),
                phi_s.to_degrees().into(),
                f.residual_rms_mhz.into(),
            ]);
            Ok(t)
        }
        CalibrateTarget::Delay {
            file,
            tau,
            n_pulses,
            burst_start,
            phase,
            gamma_e_mhz_per_mt,
        } => {
            let scan = parse_delay_scan(open(file)?).map_err(|e| with_path(file, e))?;
            let window = SensingWindow {
                tau_us: *tau,
                n_pulses: *n_pulses,
            };
            let burst = matched_burst(&window, *burst_start, phase.to_radians());
            let d = estimate_delay(&scan, &window, &burst, *gamma_e_mhz_per_mt)?;
            let mut t = Table::new(
                "calibrate-delay",
                &["t_delay_us", "stderr_us", "b_rf_mt", "residual_rms"],
            );
            t.push(vec![d.t_delay_us.into(), d.stderr_us.into(), d.b_rf_mt.into(), d.residual_rms.into()]);
            Ok(t)
        }
    }
}

fn lattice(a: &LatticeArgs) -> Result<Table, Error> {
    let cfg = LatticeConfig {
        lattice_constant_a: a.lattice_constant,
        origin_offset_a: a.origin_offset,
    };
    let mut sites = cfg.generate_sites(a.extent)?;
    if let Some(shell) = &a.shell {
        let (r, theta) = (shell[0], shell[1].to_radians());
        let (r_tol, angle_tol) = (a.shell_tol[0], a.shell_tol[1].to_radians());
        sites.retain(|s| (s.r - r).abs() <= r_tol && (s.theta - theta).abs() <= angle_tol);
    }
    if let Some(w) = &a.phi_window {
        sites = sites_in_phi_range(&sites, w[0].to_radians(), w[1].to_radians())?;
    }
    let mut t = Table::new(
        "lattice",
        &["i", "j", "k", "sublattice", "x_a", "y_a", "z_a", "r_a", "theta_deg", "phi_deg"],
    );
    for s in sites {
        let sub = match s.sublattice {
            Sublattice::A => "A",
            Sublattice::B => "B",
        };
        t.push(vec![
            f64::from(s.index[0]).into(),
            f64::from(s.index[1]).into(),
            f64::from(s.index[2]).into(),
            sub.into(),
            s.position.x.into(),
            s.position.y.into(),
            s.position.z.into(),
            s.r.into(),
            s.theta.to_degrees().into(),
            s.phi.to_degrees().into(),
        ]);
    }
    Ok(t)
}
