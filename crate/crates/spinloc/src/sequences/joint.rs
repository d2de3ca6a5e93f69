//! Sensor two-level subspace {m_S = 0, m_S = -1} tensored with the nucleus.
//! Index order is `2 * sensor + nucleus`.

use nalgebra::{Matrix2, Matrix4};
use num_complex::Complex64;

use crate::hamiltonian::{ConditionalPrecession, SensorBranch};
use crate::spincore::{SpinRotation, Vec3};

pub(crate) type C = Complex64;
pub(crate) type Op = Matrix4<C>;

const I: C = C::new(0.0, 1.0);

/// 2x2 matrix of the SU(2) element `w - i v.sigma`.
pub(crate) fn su2(r: &SpinRotation) -> Matrix2<C> {
    let w = r.scalar();
    let v = r.vector();
    Matrix2::new(
        C::new(w, -v.z),
        C::new(-v.y, -v.x),
        C::new(v.y, -v.x),
        C::new(w, v.z),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PulseAxis {
    X,
    Y,
}

/// Ideal sensor pulse `exp(-i angle sigma_a / 2)` acting on the sensor only.
pub(crate) fn sensor_pulse(axis: PulseAxis, angle: f64) -> Op {
    let c = C::new((0.5 * angle).cos(), 0.0);
    let s = (0.5 * angle).sin();
    let off = match axis {
        PulseAxis::X => (-I * s, -I * s),
        PulseAxis::Y => (C::new(-s, 0.0), C::new(s, 0.0)),
    };
    let z = C::new(0.0, 0.0);
    Op::new(
        c, z, off.0, z, //
        z, c, z, off.0, //
        off.1, z, c, z, //
        z, off.1, z, c,
    )
}

/// Block-diagonal operator applying `zero` in m_S = 0 and `minus_one` in m_S = -1.
pub(crate) fn conditional(zero: &SpinRotation, minus_one: &SpinRotation) -> Op {
    let a = su2(zero);
    let b = su2(minus_one);
    let mut m = Op::zeros();
    m.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
    m.fixed_view_mut::<2, 2>(2, 2).copy_from(&b);
    m
}

pub(crate) fn free_evolution(prec: &ConditionalPrecession, t_us: f64) -> Op {
    conditional(
        &prec.free_evolution(SensorBranch::Zero, t_us),
        &prec.free_evolution(SensorBranch::MinusOne, t_us),
    )
}

pub(crate) fn nuclear_density(bloch: Vec3) -> Matrix2<C> {
    Matrix2::new(
        C::new(0.5 * (1.0 + bloch.z), 0.0),
        C::new(0.5 * bloch.x, -0.5 * bloch.y),
        C::new(0.5 * bloch.x, 0.5 * bloch.y),
        C::new(0.5 * (1.0 - bloch.z), 0.0),
    )
}

/// Sensor in m_S = 0, nucleus with the given Bloch vector.
pub(crate) fn prepared(bloch: Vec3) -> Op {
    let mut rho = Op::zeros();
    rho.fixed_view_mut::<2, 2>(0, 0).copy_from(&nuclear_density(bloch));
    rho
}

pub(crate) fn evolve(u: &Op, rho: &Op) -> Op {
    u * rho * u.adjoint()
}

/// Population of m_S = -1.
pub(crate) fn population_minus_one(rho: &Op) -> f64 {
    (rho[(2, 2)] + rho[(3, 3)]).re
}

/// Nuclear Bloch vector after tracing out the sensor.
pub(crate) fn nuclear_bloch(rho: &Op) -> Vec3 {
    let r00 = rho[(0, 0)] + rho[(2, 2)];
    let r11 = rho[(1, 1)] + rho[(3, 3)];
    let r10 = rho[(1, 0)] + rho[(3, 2)];
    Vec3::new(2.0 * r10.re, 2.0 * r10.im, (r00 - r11).re)
}

/// Drops sensor coherences, leaving the populations and their nuclear correlations.
pub(crate) fn dephase_sensor(rho: &Op) -> Op {
    let mut out = *rho;
    let z = C::new(0.0, 0.0);
    for r in 0..2 {
        for c in 2..4 {
            out[(r, c)] = z;
            out[(c, r)] = z;
        }
    }
    out
}
