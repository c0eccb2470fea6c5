//! Rotation representations and swing-twist decomposition.
//!
//! Conventions: quaternions are Hamilton `(w, x, y, z)`, matrices act on
//! column vectors, and composition `a * b` applies `b` first. A 6D rotation
//! stores the first two columns of a rotation matrix, orthonormalized on
//! decode by Gram-Schmidt.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const TINY: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub v: Vec3,
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            w,
            v: Vector3::new(x, y, z),
        }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n < 1e-300 {
            return Err(Error::ZeroAxis);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self {
            w: c,
            v: axis * (s / n),
        })
    }

    /// From a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(r: &Vec3) -> Self {
        let angle = r.norm();
        if angle < 1e-12 {
            // second-order accurate near zero
            return Self {
                w: 1.0 - angle * angle / 8.0,
                v: r * 0.5,
            }
            .normalize()
            .unwrap_or_else(|_| Self::identity());
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self {
            w: c,
            v: r * (s / angle),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n < TINY || !n.is_finite() {
            return Err(Error::ZeroQuaternion);
        }
        Ok(Self {
            w: self.w / n,
            v: self.v / n,
        })
    }

    /// Same rotation with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, v: -self.v }
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, v: -self.v }
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.v.dot(&other.v)
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        let t = self.v.cross(p) * 2.0;
        p + t * self.w + self.v.cross(&t)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let c = self.canonical();
        2.0 * c.v.norm().atan2(c.w)
    }

    pub fn to_rotation_vector(&self) -> Vec3 {
        let c = self.canonical();
        let s = c.v.norm();
        if s < 1e-12 {
            return c.v * 2.0 / c.w.max(TINY);
        }
        c.v * (2.0 * s.atan2(c.w) / s)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.v.x, self.v.y, self.v.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the result is canonical (`w >= 0`).
    pub fn from_matrix(m: &Mat3) -> Self {
        let tr = m.trace();
        let q = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize().unwrap_or_else(|_| Self::identity()).canonical()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.v.x, self.v.y, self.v.z]
    }

    /// Uniformly distributed unit quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q = Self::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            if let Ok(u) = q.normalize() {
                if q.norm() > 1e-6 {
                    return u;
                }
            }
        }
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * rhs.w - self.v.dot(&rhs.v),
            v: rhs.v * self.w + self.v * rhs.w + self.v.cross(&rhs.v),
        }
    }
}

/// Geodesic angle between two rotations given as quaternions.
pub fn quat_distance(a: &Quaternion, b: &Quaternion) -> f64 {
    (a.inverse() * *b).angle()
}

/// Geodesic angle between two rotation matrices, accurate near zero.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Worst deviation of `m` from a proper rotation: max of `|MᵀM - I|` and `|det - 1|`.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let e = (m.transpose() * m - Mat3::identity()).abs().max();
    e.max((m.determinant() - 1.0).abs())
}

/// First two columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rotation6D {
    pub fn identity() -> Self {
        Self {
            a1: Vec3::x(),
            a2: Vec3::y(),
        }
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Self {
            a1: m.column(0).into_owned(),
            a2: m.column(1).into_owned(),
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            a1: Vec3::new(s[0], s[1], s[2]),
            a2: Vec3::new(s[3], s[4], s[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z]
    }

    fn frame(&self) -> Result<(Vec3, Vec3, f64, f64, f64)> {
        let n1 = self.a1.norm();
        if !(n1 > 1e-12) {
            return Err(Error::Degenerate6D("first column has zero length"));
        }
        let b1 = self.a1 / n1;
        let d = b1.dot(&self.a2);
        let u2 = self.a2 - b1 * d;
        let n2 = u2.norm();
        if !(n2 > 1e-12 * self.a2.norm().max(1.0)) {
            return Err(Error::Degenerate6D("columns are parallel"));
        }
        Ok((b1, u2 / n2, n1, n2, d))
    }

    /// Gram-Schmidt decode: `b1 = a1/|a1|`, `b2` from `a2` orthogonalized, `b3 = b1 x b2`.
    pub fn to_matrix(&self) -> Result<Mat3> {
        let (b1, b2, ..) = self.frame()?;
        let b3 = b1.cross(&b2);
        Ok(Mat3::from_columns(&[b1, b2, b3]))
    }

    /// Pulls a gradient on the decoded matrix back to the six raw inputs.
    pub fn backward(&self, grad: &Mat3) -> Result<[f64; 6]> {
        let (b1, b2, n1, n2, _) = self.frame()?;
        let g1: Vec3 = grad.column(0).into_owned();
        let g2: Vec3 = grad.column(1).into_owned();
        let g3: Vec3 = grad.column(2).into_owned();
        let mut db1 = g1 + b2.cross(&g3);
        let db2 = g2 + g3.cross(&b1);
        let du2 = (db2 - b2 * b2.dot(&db2)) / n2;
        let da2 = du2 - b1 * b1.dot(&du2);
        db1 -= du2 * b1.dot(&self.a2) + self.a2 * b1.dot(&du2);
        let da1 = (db1 - b1 * b1.dot(&db1)) / n1;
        Ok([da1.x, da1.y, da1.z, da2.x, da2.y, da2.z])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepTag {
    Quaternion,
    Matrix,
    AxisAngle,
    SixD,
}

/// A rotation in any of the supported representations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "RotationDoc", try_from = "RotationDoc")]
pub enum RotationValue {
    Quaternion(Quaternion),
    Matrix(Mat3),
    /// Rotation vector: unit axis scaled by the angle in radians.
    AxisAngle(Vec3),
    SixD(Rotation6D),
}

impl RotationValue {
    pub fn identity() -> Self {
        RotationValue::Matrix(Mat3::identity())
    }

    pub fn tag(&self) -> RepTag {
        match self {
            RotationValue::Quaternion(_) => RepTag::Quaternion,
            RotationValue::Matrix(_) => RepTag::Matrix,
            RotationValue::AxisAngle(_) => RepTag::AxisAngle,
            RotationValue::SixD(_) => RepTag::SixD,
        }
    }

    pub fn to_matrix(&self) -> Result<Mat3> {
        match self {
            RotationValue::Quaternion(q) => Ok(q.normalize()?.to_matrix()),
            RotationValue::Matrix(m) => Ok(*m),
            RotationValue::AxisAngle(r) => Ok(Quaternion::from_rotation_vector(r).to_matrix()),
            RotationValue::SixD(s) => s.to_matrix(),
        }
    }

    pub fn to_quaternion(&self) -> Result<Quaternion> {
        match self {
            RotationValue::Quaternion(q) => q.normalize(),
            RotationValue::AxisAngle(r) => Ok(Quaternion::from_rotation_vector(r)),
            other => Ok(Quaternion::from_matrix(&other.to_matrix()?)),
        }
    }
}

/// Converts `r` into the representation named by `target`.
pub fn convert(r: &RotationValue, target: RepTag) -> Result<RotationValue> {
    Ok(match target {
        RepTag::Matrix => RotationValue::Matrix(r.to_matrix()?),
        RepTag::SixD => RotationValue::SixD(Rotation6D::from_matrix(&r.to_matrix()?)),
        RepTag::Quaternion => RotationValue::Quaternion(r.to_quaternion()?),
        RepTag::AxisAngle => RotationValue::AxisAngle(r.to_quaternion()?.to_rotation_vector()),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RotationDoc {
    Quaternion([f64; 4]),
    /// Row-major.
    Matrix([f64; 9]),
    AxisAngle([f64; 3]),
    SixD([f64; 6]),
}

impl From<RotationValue> for RotationDoc {
    fn from(r: RotationValue) -> Self {
        match r {
            RotationValue::Quaternion(q) => RotationDoc::Quaternion(q.to_array()),
            RotationValue::Matrix(m) => {
                let mut a = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        a[3 * i + j] = m[(i, j)];
                    }
                }
                RotationDoc::Matrix(a)
            }
            RotationValue::AxisAngle(v) => RotationDoc::AxisAngle([v.x, v.y, v.z]),
            RotationValue::SixD(s) => RotationDoc::SixD(s.to_array()),
        }
    }
}

impl TryFrom<RotationDoc> for RotationValue {
    type Error = String;

    fn try_from(d: RotationDoc) -> std::result::Result<Self, String> {
        let r = match d {
            RotationDoc::Quaternion(a) => RotationValue::Quaternion(Quaternion::new(a[0], a[1], a[2], a[3])),
            RotationDoc::Matrix(a) => RotationValue::Matrix(Mat3::from_row_slice(&a)),
            RotationDoc::AxisAngle(a) => RotationValue::AxisAngle(Vec3::new(a[0], a[1], a[2])),
            RotationDoc::SixD(a) => RotationValue::SixD(Rotation6D::from_slice(&a)),
        };
        if r.to_matrix().is_err() {
            return Err("rotation is degenerate".into());
        }
        Ok(r)
    }
}

/// Admissible twist interval in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistRange {
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl TwistRange {
    pub fn new(alpha_min: f64, alpha_max: f64) -> Result<Self> {
        if !(alpha_min <= alpha_max) {
            return Err(Error::Config(format!(
                "twist range min {alpha_min} exceeds max {alpha_max}"
            )));
        }
        Ok(Self { alpha_min, alpha_max })
    }

    pub fn from_degrees(min_deg: f64, max_deg: f64) -> Result<Self> {
        Self::new(min_deg.to_radians(), max_deg.to_radians())
    }

    pub fn contains(&self, alpha: f64) -> bool {
        alpha >= self.alpha_min && alpha <= self.alpha_max
    }
}

impl Default for TwistRange {
    fn default() -> Self {
        Self {
            alpha_min: (-72.0f64).to_radians(),
            alpha_max: 72.0f64.to_radians(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistDecomposition {
    pub swing: Quaternion,
    pub twist: Quaternion,
    pub twist_axis: Vec3,
    /// Signed angle in `[-pi, pi]`.
    pub twist_angle: f64,
    /// Set when the projected quaternion vanished; the twist is then identity.
    pub singular: bool,
}

/// Splits `q` into `swing * twist`, where `twist` rotates about `axis`.
///
/// The twist is the normalized projection `(w, (v . a) a)` of `q` onto the
/// axis. Its angle sign follows the twist's imaginary part along `axis`.
pub fn swing_twist(q: &Quaternion, axis: &Vec3) -> Result<TwistDecomposition> {
    let n = axis.norm();
    if !(n > 1e-300) {
        return Err(Error::ZeroAxis);
    }
    let a = axis / n;
    let q = q.normalize()?.canonical();
    let proj = Quaternion {
        w: q.w,
        v: a * q.v.dot(&a),
    };
    let pn = proj.norm();
    if pn < 1e-12 {
        return Ok(TwistDecomposition {
            swing: q,
            twist: Quaternion::identity(),
            twist_axis: a,
            twist_angle: 0.0,
            singular: true,
        });
    }
    let twist = Quaternion {
        w: proj.w / pn,
        v: proj.v / pn,
    }
    .canonical();
    let magnitude = 2.0 * twist.v.norm().atan2(twist.w);
    let twist_angle = if twist.v.dot(&a) < 0.0 { -magnitude } else { magnitude };
    Ok(TwistDecomposition {
        swing: q * twist.inverse(),
        twist,
        twist_axis: a,
        twist_angle,
        singular: false,
    })
}

/// Angle to move from the wrist into the elbow so the remaining twist
/// lies inside `range`. Zero when `alpha_tw` is already admissible.
pub fn compensation_angle(alpha_tw: f64, range: &TwistRange) -> f64 {
    if alpha_tw > range.alpha_max {
        alpha_tw - range.alpha_max
    } else {
        (alpha_tw - range.alpha_min).min(0.0)
    }
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x == -PI && a > 0.0 {
        x = PI;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_through_6d() {
        let s = Rotation6D::from_matrix(&Mat3::identity());
        assert_eq!(s.to_array(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.to_matrix().unwrap(), Mat3::identity());
    }

    #[test]
    fn axis_angle_quarter_turn_about_z() {
        let r = RotationValue::AxisAngle(Vec3::new(0.0, 0.0, FRAC_PI_2));
        let RotationValue::Quaternion(q) = convert(&r, RepTag::Quaternion).unwrap() else {
            panic!("wrong tag");
        };
        let h = 0.5f64.sqrt();
        assert!((q.w - h).abs() < 1e-15);
        assert!(q.v.x.abs() < 1e-15 && q.v.y.abs() < 1e-15);
        assert!((q.v.z - h).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_error() {
        let z = RotationValue::Quaternion(Quaternion::new(0.0, 0.0, 0.0, 0.0));
        assert!(matches!(z.to_matrix(), Err(Error::ZeroQuaternion)));
        let p = Rotation6D {
            a1: Vec3::new(1.0, 2.0, 3.0),
            a2: Vec3::new(2.0, 4.0, 6.0),
        };
        assert!(matches!(p.to_matrix(), Err(Error::Degenerate6D(_))));
        let zero = Rotation6D {
            a1: Vec3::zeros(),
            a2: Vec3::y(),
        };
        assert!(zero.to_matrix().is_err());
    }

    #[test]
    fn round_trip_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tags = [RepTag::Quaternion, RepTag::Matrix, RepTag::AxisAngle, RepTag::SixD];
        for _ in 0..200 {
            let m = Quaternion::random(&mut rng).to_matrix();
            for &a in &tags {
                for &b in &tags {
                    let ra = convert(&RotationValue::Matrix(m), a).unwrap();
                    let rb = convert(&ra, b).unwrap();
                    let back = rb.to_matrix().unwrap();
                    assert!(geodesic_distance(&m, &back) < 1e-9, "{a:?}->{b:?}");
                }
            }
        }
    }

    #[test]
    fn pure_twist_is_its_own_twist() {
        let q = Quaternion::from_axis_angle(&Vec3::x(), FRAC_PI_2).unwrap();
        let d = swing_twist(&q, &Vec3::x()).unwrap();
        assert!(quat_distance(&d.twist, &q) < 1e-12);
        assert!(d.swing.angle() < 1e-12);
        assert!((d.twist_angle - FRAC_PI_2).abs() < 1e-12);
        assert!(!d.singular);
    }

    #[test]
    fn orthogonal_rotation_has_no_twist() {
        let q = Quaternion::from_axis_angle(&Vec3::y(), FRAC_PI_2).unwrap();
        let d = swing_twist(&q, &Vec3::x()).unwrap();
        assert!(d.twist.angle() < 1e-12);
        assert!(quat_distance(&d.swing, &q) < 1e-12);
        assert_eq!(d.twist_angle, 0.0);
    }

    #[test]
    fn negative_twist_gets_negative_angle() {
        let q = Quaternion::from_axis_angle(&Vec3::x(), -1.0).unwrap();
        let d = swing_twist(&q, &Vec3::x()).unwrap();
        assert!((d.twist_angle + 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_turn_perpendicular_is_singular() {
        let q = Quaternion::from_axis_angle(&Vec3::y(), PI).unwrap();
        let d = swing_twist(&q, &Vec3::x()).unwrap();
        assert!(d.singular);
        assert_eq!(d.twist, Quaternion::identity());
        assert!(quat_distance(&(d.swing * d.twist), &q) < 1e-12);
    }

    #[test]
    fn compensation_examples() {
        let r = TwistRange::default();
        let deg = |x: f64| x.to_radians();
        assert!((compensation_angle(deg(100.0), &r) - deg(28.0)).abs() < 1e-12);
        assert_eq!(compensation_angle(deg(50.0), &r), 0.0);
        assert!((compensation_angle(deg(-90.0), &r) - deg(-18.0)).abs() < 1e-12);
    }

    #[test]
    fn twist_range_rejects_inverted_bounds() {
        assert!(TwistRange::from_degrees(10.0, -10.0).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) + PI).abs() < 1e-15);
    }

    #[test]
    fn rotation_value_json_round_trip() {
        let r = RotationValue::SixD(Rotation6D::from_slice(&[1.0, 0.1, 0.0, 0.0, 1.0, 0.2]));
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("six_d"));
        let back: RotationValue = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        let bad = r#"{"quaternion":[0,0,0,0]}"#;
        assert!(serde_json::from_str::<RotationValue>(bad).is_err());
    }

    #[test]
    fn sixd_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut raw = [0.0; 6];
            for x in raw.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
            let w = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = |r: &[f64; 6]| Rotation6D::from_slice(r).to_matrix().unwrap().component_mul(&w).sum();
            let g = Rotation6D::from_slice(&raw).backward(&w).unwrap();
            for k in 0..6 {
                let mut p = raw;
                let mut m = raw;
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
            }
        }
    }
}
