//! Calibration from sensor data: the coil field vector from NV resonances on
//! several crystal axes, and the RF line delay from an AC-sensing scan.

use std::f64::consts::{PI, TAU};
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::golden_section;
use crate::hamiltonian::{nv_resonances, KHZ_US};
use crate::lattice::sensor_to_lab;
use crate::spincore::{wrap_angle, Vec3};

/// The four NV orientations in the laboratory frame. The first is the
/// sensor's own axis.
pub fn nv_axes_lab() -> [Vec3; 4] {
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    // cubic [111] family mapped into the sensor frame, then to the lab
    [[-1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0]].map(|c: [f64; 3]| {
        let sensor = Vec3::new(
            (-c[0] - c[1] - 2.0 * c[2]) / s6,
            (c[0] - c[1]) / s2,
            (-c[0] - c[1] + c[2]) / s3,
        ) / s3;
        sensor_to_lab(sensor)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldObservation {
    pub nv_axis: Vec3,
    pub f_minus_mhz: f64,
    pub f_plus_mhz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldFit {
    pub d_mhz: f64,
    pub b_mag_mt: f64,
    pub theta_lab: f64,
    pub phi_lab: f64,
    pub residual_rms_mhz: f64,
}

impl FieldFit {
    pub fn field(&self) -> Vec3 {
        Vec3::from_spherical(self.theta_lab, self.phi_lab) * self.b_mag_mt
    }
}

fn field_residuals(obs: &[FieldObservation], gamma_e: f64, d: f64, b: Vec3) -> Vec<f64> {
    obs.iter()
        .flat_map(|o| {
            let (lo, hi) = nv_resonances(d, gamma_e, b, o.nv_axis);
            [lo - o.f_minus_mhz, hi - o.f_plus_mhz]
        })
        .collect()
}

fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|x| x * x).sum::<f64>() / r.len().max(1) as f64).sqrt()
}

/// Least-squares (D, B) from resonance pairs on at least two NV axes.
///
/// A 1 degree grid over the upper hemisphere scores each direction with D
/// and |B| solved linearly from the first-order resonance model; the best
/// directions are then refined on the full spin Hamiltonian.
pub fn fit_field(observations: &[FieldObservation], gamma_e: f64) -> Result<FieldFit> {
    if observations.is_empty() || !(gamma_e > 0.0) {
        return Err(Error::domain("need observations and a positive gyromagnetic ratio"));
    }
    for o in observations {
        if !o.nv_axis.is_unit(1e-6) || !(o.f_plus_mhz >= o.f_minus_mhz) {
            return Err(Error::domain("axes must be unit vectors with f_plus >= f_minus"));
        }
    }
    let mut axes: Vec<Vec3> = Vec::new();
    for o in observations {
        if !axes.iter().any(|a| a.cross(o.nv_axis).norm() < 1e-6) {
            axes.push(o.nv_axis);
        }
    }
    if axes.len() < 2 {
        return Err(Error::Unidentifiable("field direction needs at least two NV axes".into()));
    }
    let centre: f64 = observations.iter().map(|o| 0.5 * (o.f_minus_mhz + o.f_plus_mhz)).sum::<f64>()
        / observations.len() as f64;
    let splittings: Vec<f64> = observations.iter().map(|o| o.f_plus_mhz - o.f_minus_mhz).collect();
    if splittings.iter().all(|s| s.abs() < 1e-9) {
        let r = field_residuals(observations, gamma_e, centre, Vec3::ZERO);
        return Ok(FieldFit {
            d_mhz: centre,
            b_mag_mt: 0.0,
            theta_lab: 0.0,
            phi_lab: 0.0,
            residual_rms_mhz: rms(&r),
        });
    }

    // first-order model: splitting = 2 gamma |B| |u . n|
    let linear_cost = |u: Vec3| -> (f64, f64) {
        let proj: Vec<f64> = observations.iter().map(|o| u.dot(o.nv_axis).abs()).collect();
        let den: f64 = proj.iter().map(|p| p * p).sum();
        let b = if den > 0.0 {
            proj.iter().zip(&splittings).map(|(p, s)| p * s).sum::<f64>() / (2.0 * gamma_e * den)
        } else {
            0.0
        };
        let cost = proj
            .iter()
            .zip(&splittings)
            .map(|(p, s)| (2.0 * gamma_e * b * p - s).powi(2))
            .sum();
        (cost, b.max(0.0))
    };
    let mut grid = Vec::with_capacity(91 * 360);
    for it in 0..=90 {
        for ip in 0..360 {
            let (theta, phi) = ((it as f64).to_radians(), (ip as f64).to_radians());
            let (cost, b) = linear_cost(Vec3::from_spherical(theta, phi));
            grid.push((cost, theta, phi, b));
            if it == 0 {
                break;
            }
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut tried: Vec<Vec3> = Vec::new();
    for &(_, theta, phi, b) in &grid {
        let u = Vec3::from_spherical(theta, phi);
        if tried.iter().any(|t| t.dot(u) > 5f64.to_radians().cos()) {
            continue;
        }
        tried.push(u);
        let start = DVector::from_vec(vec![centre, b * u.x, b * u.y, b * u.z]);
        let res = |p: &DVector<f64>| field_residuals(observations, gamma_e, p[0], Vec3::new(p[1], p[2], p[3]));
        let scale = DVector::from_vec(vec![1.0, 1e-3, 1e-3, 1e-3]);
        let p = levenberg_marquardt(&res, start, &scale, 200)?;
        let cost = rms(&res(&p));
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, p));
        }
        if tried.len() >= 4 {
            break;
        }
    }
    let (residual, p) = best.ok_or_else(|| Error::FitFailed {
        reason: "no refinement converged".into(),
        best_residual: f64::INFINITY,
    })?;
    let mut b = Vec3::new(p[1], p[2], p[3]);
    if b.z < 0.0 {
        // resonances are even in B
        b = -b;
    }
    let b_mag = b.norm();
    let (theta, phi) = if b_mag > 0.0 {
        ((b.z / b_mag).clamp(-1.0, 1.0).acos(), wrap_angle(b.y.atan2(b.x)))
    } else {
        (0.0, 0.0)
    };
    Ok(FieldFit {
        d_mhz: p[0],
        b_mag_mt: b_mag,
        theta_lab: theta,
        phi_lab: phi,
        residual_rms_mhz: residual,
    })
}

/// Damped Gauss-Newton with a forward-difference Jacobian.
fn levenberg_marquardt(
    residuals: &dyn Fn(&DVector<f64>) -> Vec<f64>,
    start: DVector<f64>,
    scale: &DVector<f64>,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = start.len();
    let mut p = start;
    let mut r = DVector::from_vec(residuals(&p));
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let j = jacobian(residuals, &p, &r, scale);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let rt = DVector::from_vec(residuals(&trial));
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let done = cost - ct <= 1e-15 * cost.max(1e-300)
                    || step.iter().zip(scale.iter()).all(|(s, sc)| s.abs() < 1e-12 * sc);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if done {
                    return Ok(p);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(p)
}

fn jacobian(
    residuals: &dyn Fn(&DVector<f64>) -> Vec<f64>,
    p: &DVector<f64>,
    r: &DVector<f64>,
    scale: &DVector<f64>,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(r.len(), p.len());
    for k in 0..p.len() {
        let h = 1e-7 * p[k].abs().max(scale[k]);
        let mut q = p.clone();
        q[k] += h;
        let rq = residuals(&q);
        for i in 0..r.len() {
            j[(i, k)] = (rq[i] - r[i]) / h;
        }
    }
    j
}

/// CP sensing window of `n_pulses` pi pulses spaced by `tau`: `+1/-1` with
/// sign changes at `(k + 1/2) tau`, zero outside `[0, n tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingWindow {
    pub tau_us: f64,
    pub n_pulses: u32,
}

impl SensingWindow {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_us > 0.0) || self.n_pulses == 0 {
            return Err(Error::domain("window needs tau > 0 and at least one pulse"));
        }
        Ok(())
    }

    pub fn value(&self, t_us: f64) -> f64 {
        let n = self.n_pulses as f64;
        if !(0.0..n * self.tau_us).contains(&t_us) {
            return 0.0;
        }
        let k = (t_us / self.tau_us + 0.5).floor();
        if k as i64 % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// `(start, end, sign)` segments covering the support.
    pub fn segments(&self) -> Vec<(f64, f64, f64)> {
        let tau = self.tau_us;
        let n = self.n_pulses as usize;
        let mut edges = vec![0.0];
        edges.extend((0..n).map(|k| (k as f64 + 0.5) * tau));
        edges.push(n as f64 * tau);
        edges
            .windows(2)
            .enumerate()
            .map(|(i, w)| (w[0], w[1], if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect()
    }
}

/// Gated cosine `cos(2 pi f (t - start) + phase)` on `[start, start + duration]`,
/// normalized to unit amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineBurst {
    pub frequency_khz: f64,
    pub start_us: f64,
    pub duration_us: f64,
    pub phase: f64,
}

impl CosineBurst {
    pub fn value(&self, t_us: f64) -> f64 {
        if t_us < self.start_us || t_us > self.start_us + self.duration_us {
            return 0.0;
        }
        (TAU * self.frequency_khz * KHZ_US * (t_us - self.start_us) + self.phase).cos()
    }

    /// Exact integral of the burst delayed by `delay` over `[lo, hi]`.
    fn integral(&self, delay: f64, lo: f64, hi: f64) -> f64 {
        let a = lo.max(self.start_us + delay);
        let b = hi.min(self.start_us + self.duration_us + delay);
        if b <= a {
            return 0.0;
        }
        let omega = TAU * self.frequency_khz * KHZ_US;
        let arg = |t: f64| omega * (t - self.start_us - delay) + self.phase;
        if omega == 0.0 {
            return (b - a) * self.phase.cos();
        }
        (arg(b).sin() - arg(a).sin()) / omega
    }
}

/// Phase picked up by the sensor, `2 pi gamma_e b_rf * integral W(t - t_delay) y(t - t_wait) dt`,
/// with `b_rf` in mT and `gamma_e` in MHz/mT.
pub fn accumulated_phase(
    window: &SensingWindow,
    waveform: &CosineBurst,
    t_delay_us: f64,
    t_wait_us: f64,
    b_rf_mt: f64,
    gamma_e: f64,
) -> f64 {
    let overlap: f64 = window
        .segments()
        .iter()
        .map(|&(a, b, s)| s * waveform.integral(t_delay_us, a + t_wait_us, b + t_wait_us))
        .sum();
    TAU * gamma_e * b_rf_mt * overlap
}

/// `P_Y = (1 - sin phase) / 2`.
pub fn delay_scan_probability(phase: f64) -> f64 {
    0.5 * (1.0 - phase.sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub t_wait_us: f64,
    pub p_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayEstimate {
    pub t_delay_us: f64,
    pub stderr_us: f64,
    pub b_rf_mt: f64,
    pub residual_rms: f64,
}

/// Least squares over `(t_delay, b_rf)`.
///
/// Delays are scanned on a 10 ns grid over every shift that puts the burst
/// inside the scanned range, with `b_rf` chosen per delay so that the peak
/// phase stays below pi; the best point is refined jointly.
pub fn estimate_delay(
    scan: &[ScanPoint],
    window: &SensingWindow,
    waveform: &CosineBurst,
    gamma_e: f64,
) -> Result<DelayEstimate> {
    window.validate()?;
    if scan.len() < 3 {
        return Err(Error::domain("scan needs at least three points"));
    }
    let (lo, hi) = scan
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.p_y), h.max(p.p_y)));
    if hi - lo < 1e-9 {
        return Err(Error::Unidentifiable("scan shows no signal".into()));
    }
    let w_min = scan.iter().map(|p| p.t_wait_us).fold(f64::INFINITY, f64::min);
    let w_max = scan.iter().map(|p| p.t_wait_us).fold(f64::NEG_INFINITY, f64::max);
    let span = window.n_pulses as f64 * window.tau_us;
    let d_lo = w_min - waveform.start_us - waveform.duration_us;
    let d_hi = w_max + span - waveform.start_us;
    let step = 0.01;
    let n_delay = ((d_hi - d_lo) / step).ceil() as usize;

    let overlaps = |delay: f64| -> Vec<f64> {
        scan.iter()
            .map(|p| accumulated_phase(window, waveform, delay, p.t_wait_us, 1.0, gamma_e))
            .collect()
    };
    let ssr = |g: &[f64], b: f64| -> f64 {
        g.iter()
            .zip(scan)
            .map(|(gi, p)| (delay_scan_probability(b * gi) - p.p_y).powi(2))
            .sum()
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=n_delay {
        let delay = d_lo + step * i as f64;
        let g = overlaps(delay);
        let g_max = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if g_max == 0.0 {
            continue;
        }
        let b_max = PI / g_max;
        for k in 1..=40 {
            let b = b_max * k as f64 / 40.0;
            let c = ssr(&g, b);
            if c < best.0 {
                best = (c, delay, b);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Unidentifiable("burst never overlaps the scan".into()));
    }
    // polish b at the grid delay before the joint refinement
    let g = overlaps(best.1);
    let b_step = best.2 / 40.0;
    let b0 = golden_section(|b| ssr(&g, b), (best.2 - b_step).max(0.0), best.2 + b_step, 1e-14);

    let residuals = |p: &DVector<f64>| -> Vec<f64> {
        scan.iter()
            .map(|s| {
                delay_scan_probability(accumulated_phase(window, waveform, p[0], s.t_wait_us, p[1], gamma_e)) - s.p_y
            })
            .collect()
    };
    let scale = DVector::from_vec(vec![1e-3, b0.abs().max(1e-9)]);
    let p = levenberg_marquardt(&residuals, DVector::from_vec(vec![best.1, b0]), &scale, 200)?;
    let r = DVector::from_vec(residuals(&p));
    let j = jacobian(&residuals, &p, &r, &scale);
    let dof = (scan.len() - 2) as f64;
    let sigma2 = r.norm_squared() / dof;
    let cov = (j.transpose() * &j)
        .try_inverse()
        .ok_or_else(|| Error::Singular("delay and amplitude are not separable".into()))?;
    Ok(DelayEstimate {
        t_delay_us: p[0],
        stderr_us: (sigma2 * cov[(0, 0)]).max(0.0).sqrt(),
        b_rf_mt: p[1],
        residual_rms: rms(r.as_slice()),
    })
}

fn csv_rows<R: Read, T: serde::de::DeserializeOwned>(reader: R, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", header.join(",")),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e: csv::Error| Error::Parse {
                line: e.position().map_or(i as u64 + 2, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct ObservationRow {
    axis_x: f64,
    axis_y: f64,
    axis_z: f64,
    f_minus_mhz: f64,
    f_plus_mhz: f64,
}

/// Reads `axis_x,axis_y,axis_z,f_minus_mhz,f_plus_mhz` rows; axes are normalized.
pub fn parse_field_observations<R: Read>(reader: R) -> Result<Vec<FieldObservation>> {
    let rows: Vec<ObservationRow> = csv_rows(reader, &["axis_x", "axis_y", "axis_z", "f_minus_mhz", "f_plus_mhz"])?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let axis = Vec3::new(r.axis_x, r.axis_y, r.axis_z).normalized().ok_or(Error::Parse {
                line: i as u64 + 2,
                message: "zero NV axis".into(),
            })?;
            Ok(FieldObservation {
                nv_axis: axis,
                f_minus_mhz: r.f_minus_mhz,
                f_plus_mhz: r.f_plus_mhz,
            })
        })
        .collect()
}

/// Reads `t_wait_us,p_y` rows.
pub fn parse_delay_scan<R: Read>(reader: R) -> Result<Vec<ScanPoint>> {
    csv_rows(reader, &["t_wait_us", "p_y"])
}

/// Burst used for delay calibration: `n` half periods of `f` matching the window.
pub fn matched_burst(window: &SensingWindow, start_us: f64, phase: f64) -> CosineBurst {
    CosineBurst {
        frequency_khz: 1.0 / (2.0 * window.tau_us * KHZ_US),
        start_us,
        duration_us: window.n_pulses as f64 * window.tau_us,
        phase,
    }
}

/// Peak overlap magnitude of a matched burst and its window, µs.
pub fn matched_overlap(window: &SensingWindow) -> f64 {
    window.n_pulses as f64 * window.tau_us * 2.0 / PI
}
