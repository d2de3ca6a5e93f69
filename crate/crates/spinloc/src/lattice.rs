//! Diamond lattice around the NV center, expressed in the sensor frame
//! (z along the N to V bond, x in a mirror plane), plus the hyperfine
//! candidate table and azimuth filtering of sites.

use std::f64::consts::PI;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::HyperfineParams;
use crate::spincore::{wrap_angle, wrap_signed, SpinRotation, Vec3, E_Y, E_Z};

/// Polar angle of the NV axis in the laboratory frame.
pub const LAB_NV_THETA_DEG: f64 = 54.7;
/// Azimuth of the NV axis in the laboratory frame.
pub const LAB_NV_PHI_DEG: f64 = 180.0;

const BUNDLED_CANDIDATES: &str = include_str!("../data/dft_candidates.csv");

fn lab_rotation() -> SpinRotation {
    // R_y(-theta0) R_z(-phi0) as active rotations of the vector
    let rz = SpinRotation::from_axis_angle(E_Z, -LAB_NV_PHI_DEG.to_radians()).expect("unit axis");
    let ry = SpinRotation::from_axis_angle(E_Y, -LAB_NV_THETA_DEG.to_radians()).expect("unit axis");
    ry.compose(rz)
}

pub fn lab_to_sensor(v: Vec3) -> Vec3 {
    lab_rotation().apply(v)
}

pub fn sensor_to_lab(v: Vec3) -> Vec3 {
    lab_rotation().inverse().apply(v)
}

/// `(r, theta, phi)` with `phi` in `[0, 2 pi)`; the pole has `phi = 0`.
pub fn spherical_of(v: Vec3) -> Result<(f64, f64, f64)> {
    let r = v.norm();
    if !(r > 0.0) {
        return Err(Error::domain("zero vector has no direction"));
    }
    let theta = (v.z / r).clamp(-1.0, 1.0).acos();
    Ok((r, theta, wrap_angle(v.y.atan2(v.x))))
}

pub fn cartesian_of(r: f64, theta: f64, phi: f64) -> Vec3 {
    Vec3::from_spherical(theta, phi) * r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(default = "default_a")]
    pub lattice_constant_a: f64,
    /// Distance of the coordinate origin above the vacancy along the NV axis.
    #[serde(default = "default_offset")]
    pub origin_offset_a: f64,
}

fn default_a() -> f64 {
    3.567
}

fn default_offset() -> f64 {
    0.75
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            lattice_constant_a: default_a(),
            origin_offset_a: default_offset(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sublattice {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticeSite {
    /// Coefficients of the primitive FCC vectors `(0,1,1)a/2`, `(1,0,1)a/2`, `(1,1,0)a/2`.
    pub index: [i32; 3],
    /// B sites are displaced by `(1,1,1)a/4` from A sites.
    pub sublattice: Sublattice,
    pub position: Vec3,
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl LatticeSite {
    fn new(index: [i32; 3], sublattice: Sublattice, position: Vec3) -> Result<Self> {
        let (r, theta, phi) = spherical_of(position)?;
        Ok(LatticeSite {
            index,
            sublattice,
            position,
            r,
            theta,
            phi,
        })
    }
}

/// Cubic-frame coordinates (units of a) to the sensor frame.
fn cubic_to_sensor(c: [f64; 3]) -> Vec3 {
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let s3 = 3f64.sqrt();
    Vec3::new(
        (-c[0] - c[1] - 2.0 * c[2]) / s6,
        (c[0] - c[1]) / s2,
        (-c[0] - c[1] + c[2]) / s3,
    )
}

fn cubic_position(index: [i32; 3], sub: Sublattice) -> [f64; 3] {
    let [n1, n2, n3] = index.map(f64::from);
    let shift = match sub {
        Sublattice::A => 0.0,
        Sublattice::B => 0.25,
    };
    [
        0.5 * (n2 + n3) + shift,
        0.5 * (n1 + n3) + shift,
        0.5 * (n1 + n2) + shift,
    ]
}

const VACANCY: ([i32; 3], Sublattice) = ([0, 0, 0], Sublattice::B);
// (1/2, 1/2, 0) in cubic units
const NITROGEN: ([i32; 3], Sublattice) = ([0, 0, 1], Sublattice::A);

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lattice_constant_a > 0.0) || !self.origin_offset_a.is_finite() {
            return Err(Error::domain("lattice constant must be positive"));
        }
        Ok(())
    }

    /// Sensor-frame position of a lattice point, Å.
    pub fn position(&self, index: [i32; 3], sub: Sublattice) -> Vec3 {
        let c = cubic_position(index, sub);
        let v = cubic_position(VACANCY.0, VACANCY.1);
        let rel = [c[0] - v[0], c[1] - v[1], c[2] - v[2]];
        cubic_to_sensor(rel) * self.lattice_constant_a - E_Z * self.origin_offset_a
    }

    pub fn vacancy(&self) -> Vec3 {
        self.position(VACANCY.0, VACANCY.1)
    }

    pub fn nitrogen(&self) -> Vec3 {
        self.position(NITROGEN.0, NITROGEN.1)
    }

    /// Carbon sites within `extent` Å of the origin, sorted by (r, theta, phi).
    pub fn generate_sites(&self, extent: f64) -> Result<Vec<LatticeSite>> {
        self.validate()?;
        if !(extent > 0.0) {
            return Err(Error::domain("extent must be positive"));
        }
        // primitive vectors have length a/sqrt(2); pad by the origin offset
        let reach = ((extent + self.origin_offset_a + self.lattice_constant_a) / self.lattice_constant_a * 2.0)
            .ceil() as i32
            + 1;
        let mut sites = Vec::new();
        for n1 in -reach..=reach {
            for n2 in -reach..=reach {
                for n3 in -reach..=reach {
                    for sub in [Sublattice::A, Sublattice::B] {
                        let index = [n1, n2, n3];
                        if (index, sub) == VACANCY || (index, sub) == NITROGEN {
                            continue;
                        }
                        let p = self.position(index, sub);
                        if p.norm() <= extent {
                            sites.push(LatticeSite::new(index, sub, p)?);
                        }
                    }
                }
            }
        }
        sites.sort_by(|a, b| {
            a.r.total_cmp(&b.r)
                .then(a.theta.total_cmp(&b.theta))
                .then(a.phi.total_cmp(&b.phi))
                .then(a.index.cmp(&b.index))
        });
        Ok(sites)
    }
}

pub fn generate_sites(extent: f64) -> Result<Vec<LatticeSite>> {
    LatticeConfig::default().generate_sites(extent)
}

/// Point-dipole angular and radial factor `(3 cos^2 theta - 1) / r^3`.
pub fn dipolar_factor(position: Vec3) -> Result<f64> {
    let (r, theta, _) = spherical_of(position)?;
    Ok((3.0 * theta.cos().powi(2) - 1.0) / r.powi(3))
}

/// Images of an azimuth under the C3v group: three rotations and three mirrors.
pub fn c3v_azimuths(phi: f64) -> [f64; 6] {
    let third = 2.0 * PI / 3.0;
    [
        wrap_angle(phi),
        wrap_angle(phi + third),
        wrap_angle(phi + 2.0 * third),
        wrap_angle(-phi),
        wrap_angle(third - phi),
        wrap_angle(2.0 * third - phi),
    ]
}

/// Sites in the C3v orbit of `reference`: same `(r, theta)` within
/// `(r_tol Å, angle_tol rad)` and an azimuth that is a C3v image of the
/// reference azimuth within `angle_tol`.
pub fn equivalence_set(sites: &[LatticeSite], reference: &LatticeSite, r_tol: f64, angle_tol: f64) -> Vec<LatticeSite> {
    let images = c3v_azimuths(reference.phi);
    sites
        .iter()
        .filter(|s| {
            (s.r - reference.r).abs() <= r_tol
                && (s.theta - reference.theta).abs() <= angle_tol
                && images.iter().any(|&p| wrap_signed(s.phi - p).abs() <= angle_tol)
        })
        .copied()
        .collect()
}

/// Site nearest to `(r, theta, phi)` in Euclidean distance.
pub fn nearest_site(sites: &[LatticeSite], r: f64, theta: f64, phi: f64) -> Option<LatticeSite> {
    let target = cartesian_of(r, theta, phi);
    sites
        .iter()
        .min_by(|a, b| (a.position - target).norm().total_cmp(&(b.position - target).norm()))
        .copied()
}

/// Sites whose azimuth lies in the closed circular interval `center ± half_width`.
pub fn sites_in_phi_range(candidates: &[LatticeSite], phi_center: f64, half_width: f64) -> Result<Vec<LatticeSite>> {
    if !(half_width >= 0.0) {
        return Err(Error::domain("half width must be non-negative"));
    }
    if half_width >= PI {
        return Ok(candidates.to_vec());
    }
    Ok(candidates
        .iter()
        .filter(|s| wrap_signed(s.phi - phi_center).abs() <= half_width + 1e-12)
        .copied()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DftCandidate {
    pub label: String,
    #[serde(rename = "a_parallel_khz")]
    pub a_parallel: f64,
    #[serde(rename = "a_perp_khz")]
    pub a_perp: f64,
}

/// Reads a `label,a_parallel_khz,a_perp_khz` table.
pub fn parse_candidates<R: Read>(reader: R) -> Result<Vec<DftCandidate>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    let expected = ["label", "a_parallel_khz", "a_perp_khz"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| csv_error(&e, i as u64 + 2)))
        .collect()
}

fn csv_error(e: &csv::Error, fallback_line: u64) -> Error {
    Error::Parse {
        line: e.position().map_or(fallback_line, |p| p.line()),
        message: e.to_string(),
    }
}

pub fn bundled_candidates() -> Vec<DftCandidate> {
    parse_candidates(BUNDLED_CANDIDATES.as_bytes()).expect("bundled table is well formed")
}

/// Candidates within `tol = (tol_parallel, tol_perp)` kHz, closest first.
pub fn match_hyperfine(measured: &HyperfineParams, table: &[DftCandidate], tol: (f64, f64)) -> Result<Vec<DftCandidate>> {
    if !(tol.0 >= 0.0 && tol.1 >= 0.0) {
        return Err(Error::domain("tolerances must be non-negative"));
    }
    let deviation = |c: &DftCandidate| {
        (c.a_parallel - measured.a_parallel_khz).abs().hypot((c.a_perp - measured.a_perp_khz).abs())
    };
    let mut out: Vec<DftCandidate> = table
        .iter()
        .filter(|c| {
            (c.a_parallel - measured.a_parallel_khz).abs() <= tol.0 && (c.a_perp - measured.a_perp_khz).abs() <= tol.1
        })
        .cloned()
        .collect();
    out.sort_by(|a, b| deviation(a).total_cmp(&deviation(b)).then(a.label.cmp(&b.label)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    #[test]
    fn nv_axis_maps_to_z() {
        let b = Vec3::from_spherical(deg(54.7), deg(180.0));
        assert!((lab_to_sensor(b) - E_Z).norm() < 1e-12);
    }

    #[test]
    fn coil_direction() {
        let coil = lab_to_sensor(Vec3::from_spherical(deg(5.2), deg(81.6)));
        let (_, theta, phi) = spherical_of(coil).unwrap();
        assert!((theta.to_degrees() - 55.7).abs() < 0.1, "{}", theta.to_degrees());
        assert!((phi.to_degrees() - 186.2).abs() < 0.1, "{}", phi.to_degrees());
    }

    #[test]
    fn spherical_conventions() {
        let (r, t, p) = spherical_of(E_Z).unwrap();
        assert_eq!((r, t, p), (1.0, 0.0, 0.0));
        let (r, t, p) = spherical_of(Vec3::new(1.0, 1.0, 0.0) / 2f64.sqrt()).unwrap();
        assert!((r - 1.0).abs() < 1e-15 && (t - PI / 2.0).abs() < 1e-15 && (p - PI / 4.0).abs() < 1e-15);
        assert!(spherical_of(Vec3::ZERO).is_err());
    }

    #[test]
    fn frame_geometry() {
        let cfg = LatticeConfig::default();
        // vacancy below the origin, nitrogen below the vacancy on the axis
        assert!((cfg.vacancy() + E_Z * 0.75).norm() < 1e-12);
        let bond = cfg.vacancy() - cfg.nitrogen();
        assert!((bond.normalized().unwrap() - E_Z).norm() < 1e-12);
        assert!((bond.norm() - 3.567 * 3f64.sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_neighbours_of_vacancy() {
        let cfg = LatticeConfig::default();
        let sites = cfg.generate_sites(2.0).unwrap();
        let bond = 3.567 * 3f64.sqrt() / 4.0;
        let adjacent: Vec<_> = sites
            .iter()
            .filter(|s| ((s.position - cfg.vacancy()).norm() - bond).abs() < 1e-9)
            .collect();
        assert_eq!(adjacent.len(), 3);
        assert!(sites.iter().all(|s| (s.position - cfg.nitrogen()).norm() > 1e-9));
        assert!(sites.iter().all(|s| s.position.norm() <= 2.0));
    }

    #[test]
    fn c3_symmetry() {
        let sites = generate_sites(8.0).unwrap();
        let rot = SpinRotation::from_axis_angle(E_Z, 2.0 * PI / 3.0).unwrap();
        for s in &sites {
            let image = rot.apply(s.position);
            assert!(
                sites.iter().any(|o| (o.position - image).norm() < 1e-9),
                "no image for {:?}",
                s.index
            );
            let mirror = Vec3::new(s.position.x, -s.position.y, s.position.z);
            assert!(sites.iter().any(|o| (o.position - mirror).norm() < 1e-9));
        }
    }

    #[test]
    fn density_matches_diamond() {
        for extent in [8.0, 10.0, 12.0] {
            let count = generate_sites(extent).unwrap().len() as f64;
            let expected = 8.0 / 3.567f64.powi(3) * 4.0 / 3.0 * PI * f64::powi(extent, 3);
            assert!((count / expected - 1.0).abs() < 0.1, "{extent}: {count} vs {expected}");
        }
    }

    #[test]
    fn dipolar_factor_decreases_along_rays() {
        let sites = generate_sites(16.0).unwrap();
        let mut checked = 0;
        for s in sites.iter().filter(|s| s.r > 5.0) {
            let farther: Vec<_> = sites
                .iter()
                .filter(|o| o.r > s.r + 1e-6 && (o.position.normalized().unwrap() - s.position.normalized().unwrap()).norm() < 1e-9)
                .collect();
            for o in farther {
                let a = dipolar_factor(s.position).unwrap().abs();
                let b = dipolar_factor(o.position).unwrap().abs();
                assert!(b < a || a < 1e-15);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn bundled_table() {
        let table = bundled_candidates();
        assert_eq!(table.len(), 6);
        let hf = HyperfineParams::new(-173.1, 22.3).unwrap();
        let hits = match_hyperfine(&hf, &table, (5.0, 1.0)).unwrap();
        let mut labels: Vec<_> = hits.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(hits[0].label, "C280");
        labels.sort();
        assert_eq!(labels, ["C218", "C226", "C230", "C240", "C280", "C282"]);
        assert!(match_hyperfine(&hf, &table, (0.0, 0.0)).unwrap().is_empty());
        let second = HyperfineParams::new(112.1, 59.9).unwrap();
        assert!(match_hyperfine(&second, &table, (5.0, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn malformed_table_reports_line() {
        let text = "label,a_parallel_khz,a_perp_khz\nC1,-1,2\nC2,abc,3\n";
        match parse_candidates(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_candidates("a,b,c\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn phi_windows() {
        let sites = generate_sites(8.0).unwrap();
        let reference = nearest_site(&sites, 6.84, deg(94.8), deg(250.9)).unwrap();
        let set = equivalence_set(&sites, &reference, 0.05, deg(0.5));
        assert_eq!(set.len(), 6);
        let mut got: Vec<f64> = set.iter().map(|s| s.phi).collect();
        let mut want = c3v_azimuths(reference.phi).to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
        let window = sites_in_phi_range(&set, deg(248.8), deg(2.7)).unwrap();
        assert_eq!(window.len(), 1);
        assert!((window[0].phi - reference.phi).abs() < 1e-12);
        assert!(sites_in_phi_range(&set, deg(243.2), deg(5.3)).unwrap().is_empty());
        assert_eq!(sites_in_phi_range(&set, 0.0, PI).unwrap().len(), 6);
        assert!(sites_in_phi_range(&set, 0.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn transform_is_orthogonal(a in prop::array::uniform3(-5.0..5.0f64), b in prop::array::uniform3(-5.0..5.0f64)) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            prop_assert!((lab_to_sensor(a).dot(lab_to_sensor(b)) - a.dot(b)).abs() < 1e-12);
            prop_assert!((sensor_to_lab(lab_to_sensor(a)) - a).norm() < 1e-12);
        }

        #[test]
        fn spherical_round_trip(r in 0.1..20.0f64, theta in 1e-3..(PI - 1e-3), phi in 0.0..(2.0 * PI)) {
            let (r2, t2, p2) = spherical_of(cartesian_of(r, theta, phi)).unwrap();
            prop_assert!((r2 - r).abs() < 1e-12);
            prop_assert!((t2 - theta).abs() < 1e-12);
            prop_assert!(wrap_signed(p2 - phi).abs() < 1e-12);
        }
    }
}
