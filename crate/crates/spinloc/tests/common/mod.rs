//! Brute-force reference models built from Hamiltonian matrices and dense
//! matrix exponentials. Nothing here uses the quaternion algebra.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C = Complex64;
pub type M = DMatrix<C>;

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

pub fn eye(n: usize) -> M {
    M::identity(n, n)
}

pub fn pauli_x() -> M {
    M::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn pauli_y() -> M {
    M::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

pub fn pauli_z() -> M {
    M::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

pub fn kron(a: &M, b: &M) -> M {
    a.kronecker(b)
}

/// Projector on sensor level `k` (0: m_S = 0, 1: m_S = -1).
pub fn sensor_projector(k: usize) -> M {
    let mut m = M::zeros(2, 2);
    m[(k, k)] = c(1., 0.);
    m
}

/// Nuclear spin operators `I = sigma / 2` dotted with `n`.
pub fn spin_along(n: [f64; 3]) -> M {
    (pauli_x() * c(n[0], 0.) + pauli_y() * c(n[1], 0.) + pauli_z() * c(n[2], 0.)) * c(0.5, 0.)
}

pub fn expm(h: &M) -> M {
    h.clone().exp()
}

/// `exp(-2 pi i H t)` with H in kHz and t in µs.
pub fn propagate(h_khz: &M, t_us: f64) -> M {
    expm(&(h_khz * c(0., -std::f64::consts::TAU * t_us * 1e-3)))
}

/// Sensor rotation `exp(-i angle sigma / 2)` padded with identities on `n_extra` qubits.
pub fn sensor_rotation(sigma: &M, angle: f64, n_extra: usize) -> M {
    let r = expm(&(sigma * c(0., -0.5 * angle)));
    kron(&r, &eye(1 << n_extra))
}

pub struct Nucleus {
    pub f0: f64,
    pub f1: f64,
    pub e_p: [f64; 3],
}

/// Joint Hamiltonian `|0><0| (x) H0 + |1><1| (x) H1` for a sensor and one nucleus.
pub fn joint_hamiltonian(n: &Nucleus) -> M {
    let h0 = spin_along([0., 0., 1.]) * c(-n.f0, 0.);
    let h1 = spin_along(n.e_p) * c(-n.f1, 0.);
    kron(&sensor_projector(0), &h0) + kron(&sensor_projector(1), &h1)
}

/// Same for a sensor and two nuclei.
pub fn joint_hamiltonian_pair(a: &Nucleus, b: &Nucleus) -> M {
    let one = eye(2);
    let h0 = kron(&spin_along([0., 0., 1.]), &one) * c(-a.f0, 0.)
        + kron(&one, &spin_along([0., 0., 1.])) * c(-b.f0, 0.);
    let h1 = kron(&spin_along(a.e_p), &one) * c(-a.f1, 0.) + kron(&one, &spin_along(b.e_p)) * c(-b.f1, 0.);
    kron(&sensor_projector(0), &h0) + kron(&sensor_projector(1), &h1)
}

pub fn nuclear_density(bloch: [f64; 3]) -> M {
    eye(2) * c(0.5, 0.) + spin_along(bloch)
}

pub fn prepared(nuclear: &M) -> M {
    kron(&sensor_projector(0), nuclear)
}

pub fn evolve(u: &M, rho: &M) -> M {
    u * rho * u.adjoint()
}

/// Expectation of the m_S = -1 projector.
pub fn population_one(rho: &M) -> f64 {
    let d = rho.nrows() / 2;
    (0..d).map(|i| rho[(d + i, d + i)].re).sum()
}

/// Nuclear Bloch vector of a sensor + one nucleus state.
pub fn nuclear_bloch(rho: &M) -> [f64; 3] {
    let red = M::from_fn(2, 2, |i, j| rho[(i, j)] + rho[(2 + i, 2 + j)]);
    let ex = |s: M| (red.clone() * s).trace().re;
    [ex(pauli_x()), ex(pauli_y()), ex(pauli_z())]
}

/// CP train of `n` ideal X pi pulses with spacing `tau`, free evolution under `h`.
pub fn cp_train(h: &M, n: u32, tau: f64, n_extra: usize) -> M {
    let half = propagate(h, 0.5 * tau);
    let full = propagate(h, tau);
    let pi = sensor_rotation(&pauli_x(), std::f64::consts::PI, n_extra);
    let mut u = half.clone();
    for k in 0..n {
        u = &pi * u;
        u = if k + 1 == n { &half * u } else { &full * u };
    }
    u
}

/// m_S = -1 population after `(pi/2)_X - CP - (pi/2)_readout`.
pub fn cp_readout(h: &M, rho_nuclear: &M, n: u32, tau: f64, readout_y: bool) -> f64 {
    let n_extra = (rho_nuclear.nrows() as f64).log2().round() as usize;
    let open = sensor_rotation(&pauli_x(), std::f64::consts::FRAC_PI_2, n_extra);
    let close_axis = if readout_y { pauli_y() } else { pauli_x() };
    let close = sensor_rotation(&close_axis, std::f64::consts::FRAC_PI_2, n_extra);
    let u = close * cp_train(h, n, tau, n_extra) * open;
    population_one(&evolve(&u, &prepared(rho_nuclear)))
}

pub fn dephase_sensor(rho: &M) -> M {
    let d = rho.nrows() / 2;
    let mut out = rho.clone();
    for i in 0..d {
        for j in 0..d {
            out[(i, d + j)] = c(0., 0.);
            out[(d + i, j)] = c(0., 0.);
        }
    }
    out
}

/// Unit vector helper.
pub fn spherical(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

pub fn column(v: [f64; 3]) -> DVector<f64> {
    DVector::from_row_slice(&v)
}
