//! Inverse pipeline: cosine fitting, hyperfine inversion, undersampling
//! bookkeeping and the independent-spin product rule.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::hamiltonian::{HyperfineParams, KHZ_US};
use crate::spincore::wrap_angle;

const INV_GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut c = b - INV_GOLDEN * (b - a);
    let mut d = a + INV_GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationFit {
    pub amplitude: f64,
    pub offset: f64,
    pub frequency_khz: f64,
    /// Phase at t = 0 of the supplied time axis, in `[0, 2pi)`.
    pub phase: f64,
    pub decay_time_us: Option<f64>,
    pub residual_rms: f64,
}

impl OscillationFit {
    pub fn model(&self, t_us: f64) -> f64 {
        let env = self.decay_time_us.map_or(1.0, |td| (-t_us / td).exp());
        self.amplitude * env * (std::f64::consts::TAU * self.frequency_khz * t_us * KHZ_US + self.phase).cos()
            + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Half-width of the frequency search window relative to the hint.
    pub window: f64,
    pub grid_points: usize,
    pub fit_decay: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            window: 0.05,
            grid_points: 201,
            fit_decay: false,
        }
    }
}

struct Linear {
    a: f64,
    b: f64,
    c: f64,
    ssr: f64,
}

fn linear_fit(times: &[f64], values: &[f64], f_khz: f64, rate: f64) -> Option<Linear> {
    let w = std::f64::consts::TAU * f_khz * KHZ_US;
    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (&t, &y) in times.iter().zip(values) {
        let env = (-rate * t).exp();
        let row = Vector3::new(env * (w * t).cos(), env * (w * t).sin(), 1.0);
        ata += row * row.transpose();
        aty += row * y;
    }
    let sol = ata.cholesky()?.solve(&aty);
    let ssr = times
        .iter()
        .zip(values)
        .map(|(&t, &y)| {
            let env = (-rate * t).exp();
            let r = y - sol[0] * env * (w * t).cos() - sol[1] * env * (w * t).sin() - sol[2];
            r * r
        })
        .sum();
    Some(Linear {
        a: sol[0],
        b: sol[1],
        c: sol[2],
        ssr,
    })
}

/// Best frequency for a fixed decay rate: grid, then golden refinement.
fn frequency_search(
    times: &[f64],
    values: &[f64],
    f_hint: f64,
    rate: f64,
    opts: &FitOptions,
) -> Result<(f64, Linear)> {
    let lo = f_hint * (1.0 - opts.window);
    let hi = f_hint * (1.0 + opts.window);
    let n = opts.grid_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let ssr = |f: f64| linear_fit(times, values, f, rate).map_or(f64::INFINITY, |l| l.ssr);
    let (best, best_ssr) = (0..n)
        .map(|i| (i, ssr(lo + step * i as f64)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is non-empty");
    if !best_ssr.is_finite() {
        return Err(Error::FitFailed {
            reason: "singular least-squares system".into(),
            best_residual: f64::INFINITY,
        });
    }
    let a = lo + step * best.saturating_sub(1) as f64;
    let b = lo + step * (best + 1).min(n - 1) as f64;
    let f = golden_section(ssr, a, b, 1e-14 * f_hint.abs().max(1.0));
    let lin = linear_fit(times, values, f, rate).ok_or_else(|| Error::FitFailed {
        reason: "singular least-squares system".into(),
        best_residual: best_ssr,
    })?;
    Ok((f, lin))
}

/// Least-squares fit of `A exp(-t/T) cos(2 pi f t + phi0) + B`, with the
/// envelope only when `opts.fit_decay` is set.
pub fn fit_damped_cosine(
    times_us: &[f64],
    values: &[f64],
    f_hint_khz: f64,
    opts: &FitOptions,
) -> Result<OscillationFit> {
    if times_us.len() != values.len() {
        return Err(Error::domain("times and values differ in length"));
    }
    if times_us.len() < 8 {
        return Err(Error::domain("at least 8 samples are required"));
    }
    if !(f_hint_khz > 0.0) {
        return Err(Error::domain("frequency hint must be positive"));
    }
    let t_min = times_us.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = times_us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = t_max - t_min;
    if span * f_hint_khz * KHZ_US < 1.0 {
        return Err(Error::domain("samples span less than one period of the hint"));
    }

    let (rate, f, lin) = if opts.fit_decay {
        let max_rate = 20.0 / span;
        let cost = |r: f64| frequency_search(times_us, values, f_hint_khz, r, opts).map_or(f64::INFINITY, |x| x.1.ssr);
        let n: usize = 41;
        let h = max_rate / (n - 1) as f64;
        let best = (0..n)
            .map(|i| (i, cost(h * i as f64)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|x| x.0)
            .unwrap_or(0);
        let lo = h * best.saturating_sub(1) as f64;
        let hi = h * (best + 1).min(n - 1) as f64;
        let rate = golden_section(cost, lo, hi, 1e-12 * max_rate);
        let (f, lin) = frequency_search(times_us, values, f_hint_khz, rate, opts)?;
        (rate, f, lin)
    } else {
        let (f, lin) = frequency_search(times_us, values, f_hint_khz, 0.0, opts)?;
        (0.0, f, lin)
    };

    let residual_rms = (lin.ssr / times_us.len() as f64).sqrt();
    let edge = f_hint_khz * opts.window * 1e-6;
    if (f - f_hint_khz * (1.0 - opts.window)).abs() < edge || (f - f_hint_khz * (1.0 + opts.window)).abs() < edge {
        return Err(Error::FitFailed {
            reason: format!("frequency optimum at the edge of the search window ({f} kHz)"),
            best_residual: residual_rms,
        });
    }
    if !residual_rms.is_finite() {
        return Err(Error::FitFailed {
            reason: "non-finite residual".into(),
            best_residual: residual_rms,
        });
    }
    Ok(OscillationFit {
        amplitude: lin.a.hypot(lin.b),
        offset: lin.c,
        frequency_khz: f,
        phase: wrap_angle((-lin.b).atan2(lin.a)),
        decay_time_us: (opts.fit_decay && rate > 0.0).then(|| 1.0 / rate),
        residual_rms,
    })
}

/// Hyperfine components from the CP nutation frequency and the two branch
/// frequencies at spacing `tau_us`.
pub fn estimate_hyperfine(f_cp_khz: f64, f0_khz: f64, f1_khz: f64, tau_us: f64) -> Result<HyperfineParams> {
    if !(tau_us > 0.0) || !(f1_khz >= 0.0) {
        return Err(Error::domain("tau must be positive and f1 non-negative"));
    }
    let alpha = PI * f0_khz * tau_us * KHZ_US;
    let beta = PI * f1_khz * tau_us * KHZ_US;
    let s = alpha.sin() * beta.sin();
    if s.abs() < 1e-9 {
        return Err(Error::Singular(format!("sin(alpha) sin(beta) = {s:.3e}")));
    }
    let cos_phi_cp = (PI - 2.0 * PI * f_cp_khz * tau_us * KHZ_US).cos();
    let a_parallel = (alpha.cos() * beta.cos() - cos_phi_cp) * f1_khz / s - f0_khz;
    let along = f0_khz + a_parallel;
    let radicand = f1_khz * f1_khz - along * along;
    if radicand < -1e-9 * f1_khz * f1_khz.max(1.0) {
        return Err(Error::Inconsistent(format!(
            "f1^2 - (f0 + A_par)^2 = {radicand:.4} is negative"
        )));
    }
    HyperfineParams::new(a_parallel, radicand.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UndersamplingConfig {
    pub dt_us: f64,
    pub t0_us: f64,
    pub m: u64,
}

impl UndersamplingConfig {
    pub fn new(dt_us: f64, t0_us: f64, m: u64) -> Result<Self> {
        let cfg = UndersamplingConfig { dt_us, t0_us, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_us > 0.0) || !self.t0_us.is_finite() {
            return Err(Error::domain("dt must be positive and t0 finite"));
        }
        if self.m % 2 == 1 {
            return Err(Error::UnsupportedAliasOrder { m: self.m });
        }
        Ok(())
    }

    pub fn nyquist_khz(&self) -> f64 {
        nyquist_khz(self.dt_us)
    }

    /// True frequency from the aliased one.
    pub fn reconstruct(&self, f_alias_khz: f64) -> f64 {
        f_alias_khz + self.m as f64 * self.nyquist_khz()
    }

    fn phase_shift(&self) -> f64 {
        self.m as f64 * PI * self.t0_us / self.dt_us
    }
}

pub fn nyquist_khz(dt_us: f64) -> f64 {
    1.0 / (2.0 * dt_us * KHZ_US)
}

/// Alias order and aliased frequency of a tone sampled every `dt_us`.
pub fn undersampling_map(f_khz: f64, dt_us: f64) -> Result<(u64, f64)> {
    if !(dt_us > 0.0) || !(f_khz >= 0.0) || !f_khz.is_finite() {
        return Err(Error::domain("need dt > 0 and a finite f >= 0"));
    }
    let f_n = nyquist_khz(dt_us);
    let m = (f_khz / f_n).floor() as u64;
    if m % 2 == 1 {
        return Err(Error::UnsupportedAliasOrder { m });
    }
    Ok((m, f_khz - m as f64 * f_n))
}

/// True phase from the phase fitted on the aliased trace.
pub fn recover_phase(eta_alias: f64, cfg: &UndersamplingConfig) -> f64 {
    wrap_angle(eta_alias - cfg.phase_shift())
}

/// Inverse of [`recover_phase`].
pub fn alias_phase(eta: f64, cfg: &UndersamplingConfig) -> f64 {
    wrap_angle(eta + cfg.phase_shift())
}

/// Product rule for independent spins acting on the same sensor.
pub fn combine_independent(probabilities: &[f64]) -> f64 {
    let contrast: f64 = probabilities.iter().map(|p| 2.0 * p - 1.0).product();
    (0.5 * (1.0 + contrast)).clamp(0.0, 1.0)
}

/// Joint `(P_X, P_Y)` of independent spins from their single-spin readouts.
///
/// Each spin multiplies the sensor coherence by `(2 P_X - 1) + i (2 P_Y - 1)`;
/// the two readouts of the product are its real and imaginary parts. With
/// unpolarized spins every factor is real and `P_X` reduces to
/// [`combine_independent`].
pub fn combine_readouts(readouts: &[(f64, f64)]) -> (f64, f64) {
    let coherence = readouts
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, &(px, py)| acc * Complex64::new(2.0 * px - 1.0, 2.0 * py - 1.0));
    (
        (0.5 * (1.0 + coherence.re)).clamp(0.0, 1.0),
        (0.5 * (1.0 + coherence.im)).clamp(0.0, 1.0),
    )
}

/// Block repetitions estimated to fully transfer polarization at the k = 3
/// resonance, `pi f_t / (3 (2 + sqrt 2) A_perp N_pol)`.
pub fn transfer_repetitions_bound(f_t_khz: f64, a_perp_khz: f64, n_pol: u32) -> Result<f64> {
    if !(a_perp_khz > 0.0) || n_pol == 0 {
        return Err(Error::domain("A_perp and N_pol must be positive"));
    }
    Ok(PI * f_t_khz / (3.0 * (2.0 + 2f64.sqrt()) * a_perp_khz * n_pol as f64))
}

/// One-sided amplitude spectrum of a uniformly sampled trace with its mean
/// removed, as `(frequency_khz, amplitude)` pairs.
pub fn amplitude_spectrum(values: &[f64], dt_us: f64) -> Vec<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = 1.0 / (n as f64 * dt_us * KHZ_US);
    buf.iter()
        .take(n / 2 + 1)
        .enumerate()
        .map(|(k, c)| (k as f64 * df, c.norm() / n as f64))
        .collect()
}

/// Frequencies of the `count` largest local maxima of a spectrum.
pub fn dominant_peaks(spectrum: &[(f64, f64)], count: usize) -> Vec<f64> {
    let mut peaks: Vec<(f64, f64)> = (1..spectrum.len().saturating_sub(1))
        .filter(|&i| spectrum[i].1 > spectrum[i - 1].1 && spectrum[i].1 >= spectrum[i + 1].1)
        .map(|i| spectrum[i])
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.into_iter().take(count).map(|p| p.0).collect()
}
