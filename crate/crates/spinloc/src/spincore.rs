//! Spin-1/2 rotation algebra.
//!
//! A [`SpinRotation`] is stored as a unit quaternion `(w, v)` standing for the
//! SU(2) element `w - i v.sigma = exp(-i angle n.I)`. Composition is the
//! quaternion product, so it coincides with the 2x2 matrix product without
//! ever forming matrices.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const AXIS_TOLERANCE: f64 = 1e-9;
const DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const E_X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
pub const E_Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
pub const E_Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Unit vector from polar angle `theta` and azimuth `phi` (radians).
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        Vec3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        )
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0).then(|| self / n)
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Azimuth of the projection onto the xy plane, in `[0, 2pi)`.
    pub fn azimuth(self) -> f64 {
        wrap_angle(self.y.atan2(self.x))
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_signed(a: f64) -> f64 {
    let r = wrap_angle(a);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Rotation of a spin-1/2, i.e. an SU(2) element `exp(-i angle n.I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinRotation {
    w: f64,
    v: Vec3,
}

impl Default for SpinRotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SpinRotation {
    pub const IDENTITY: SpinRotation = SpinRotation { w: 1.0, v: Vec3::ZERO };

    /// Rotation by `angle` (right-handed) about the unit `axis`, with the angle
    /// reduced mod 2pi.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        Self::propagator(axis, wrap_angle(angle))
    }

    /// The exact SU(2) element `exp(-i angle n.I)` with no reduction of the
    /// angle. Differs from [`from_axis_angle`](Self::from_axis_angle) by an
    /// overall sign when `angle` lies in `[2pi, 4pi)` mod 4pi, which matters
    /// only when the element is one branch of a conditional propagator.
    pub fn propagator(axis: Vec3, angle: f64) -> Result<Self> {
        if !axis.is_unit(AXIS_TOLERANCE) || !angle.is_finite() {
            return Err(Error::domain(format!(
                "rotation axis must be a unit vector (|axis| = {}), angle finite",
                axis.norm()
            )));
        }
        let axis = axis / axis.norm();
        let half = 0.5 * angle;
        Ok(SpinRotation {
            w: half.cos(),
            v: axis * half.sin(),
        })
    }

    /// Builds from raw quaternion components, normalizing them.
    pub fn from_components(w: f64, v: Vec3) -> Result<Self> {
        let n = (w * w + v.dot(v)).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::domain("quaternion must be non-zero and finite"));
        }
        Ok(SpinRotation { w: w / n, v: v / n })
    }

    pub fn scalar(&self) -> f64 {
        self.w
    }

    pub fn vector(&self) -> Vec3 {
        self.v
    }

    /// Sequential composition: `self.compose(first)` applies `first`, then `self`.
    pub fn compose(self, first: SpinRotation) -> SpinRotation {
        let (w1, v1, w2, v2) = (self.w, self.v, first.w, first.v);
        SpinRotation {
            w: w1 * w2 - v1.dot(v2),
            v: v2 * w1 + v1 * w2 + v1.cross(v2),
        }
    }

    pub fn inverse(self) -> SpinRotation {
        SpinRotation { w: self.w, v: -self.v }
    }

    /// Rotates a Bloch vector.
    pub fn apply(&self, b: Vec3) -> Vec3 {
        let t = self.v.cross(b) * 2.0;
        b + t * self.w + self.v.cross(t)
    }

    /// Rotation axis and angle on the SO(3) branch `angle in [0, pi]`.
    ///
    /// Angle 0 yields `e_z`; angle pi yields the axis whose first non-zero
    /// component is positive.
    pub fn decompose(&self) -> (Vec3, f64) {
        let (w, v) = if self.w < 0.0 { (-self.w, -self.v) } else { (self.w, self.v) };
        let s = v.norm();
        if s < DEGENERATE {
            return (E_Z, 0.0);
        }
        let angle = 2.0 * s.atan2(w);
        let mut axis = v / s;
        if w.abs() < DEGENERATE {
            let lead = [axis.x, axis.y, axis.z]
                .into_iter()
                .find(|c| c.abs() > DEGENERATE)
                .unwrap_or(1.0);
            if lead < 0.0 {
                axis = -axis;
            }
            return (axis, PI);
        }
        (axis, angle)
    }

    /// Axis and angle in `[0, 2pi]` as stored, without sign canonicalization.
    pub fn axis_angle(&self) -> (Vec3, f64) {
        let s = self.v.norm();
        if s < DEGENERATE {
            return (E_Z, if self.w > 0.0 { 0.0 } else { TAU });
        }
        (self.v / s, 2.0 * s.atan2(self.w))
    }

    /// Half-angle form `(cos chi, sin chi n)` of the SU(2) element, with
    /// `chi in [0, pi]`. The axis is `None` when `sin chi` vanishes.
    pub fn half_angle(&self) -> (Option<Vec3>, f64) {
        let s = self.v.norm();
        let chi = s.atan2(self.w);
        if s < DEGENERATE {
            (None, chi)
        } else {
            (Some(self.v / s), chi)
        }
    }

    /// `self` applied `n` times, evaluated in closed form.
    pub fn pow(self, n: u32) -> SpinRotation {
        let (axis, chi) = self.half_angle();
        let k = n as f64;
        match axis {
            Some(a) => SpinRotation {
                w: (k * chi).cos(),
                v: a * (k * chi).sin(),
            },
            None => SpinRotation {
                w: if self.w < 0.0 && n % 2 == 1 { -1.0 } else { 1.0 },
                v: Vec3::ZERO,
            },
        }
    }

    /// Maximum deviation of the rotation's action on the three basis vectors.
    pub fn action_distance(&self, other: &SpinRotation) -> f64 {
        [E_X, E_Y, E_Z]
            .into_iter()
            .map(|e| (self.apply(e) - other.apply(e)).norm())
            .fold(0.0, f64::max)
    }
}

impl Mul for SpinRotation {
    type Output = SpinRotation;
    fn mul(self, rhs: SpinRotation) -> SpinRotation {
        self.compose(rhs)
    }
}

/// Free-function form of [`SpinRotation::from_axis_angle`].
pub fn rotation_from_axis_angle(axis: Vec3, angle: f64) -> Result<SpinRotation> {
    SpinRotation::from_axis_angle(axis, angle)
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: SpinRotation, b: SpinRotation) -> SpinRotation {
    a.compose(b)
}

pub fn decompose(r: &SpinRotation) -> (Vec3, f64) {
    r.decompose()
}
