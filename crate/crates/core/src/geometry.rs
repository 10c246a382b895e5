//! Rigid transforms, pinhole intrinsics, the 10-number pose code, and pose
//! error metrics.
//!
//! Camera convention: x right, y down, z forward. A [`PoseSE3`] maps camera
//! coordinates of a view into the canonical (first view) frame, so a
//! canonical point `X` has camera coordinates `Rᵀ(X - T)` and `T` is the
//! camera center.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::tensor::softplus;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Degeneracy threshold of the 6D rotation decode.
pub const ROT6_EPS: f64 = 1e-8;
/// Offset that keeps the homogeneous translation denominator positive.
pub const HOMOGENEOUS_EPS: f64 = 1e-6;
/// Points at or in front of this camera depth are not projectable.
pub const Z_NEAR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("not a rotation matrix (orthonormality error {0:e})")]
    NotARotation(f64),
    #[error("empty error list")]
    EmptyErrors,
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
}

type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn validated(rot: Mat3, trans: Vec3, tol: f64) -> Result<Self> {
        let err = orthonormality_error(&rot);
        if err > tol {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(Self { rot, trans })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    /// Canonical point into this view's camera coordinates.
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rot.transpose() * (x - self.trans)
    }

    pub fn center(&self) -> Vec3 {
        self.trans
    }

    /// Right perturbation `self · Exp(xi)` with `xi = (rho, phi)`.
    pub fn retract(&self, xi: &[f64; 6]) -> Self {
        self.compose(&se3_exp(xi))
    }

    pub fn to_record(&self) -> PoseRecord {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.rot[(i, j)];
            }
        }
        PoseRecord {
            r,
            t: [self.trans.x, self.trans.y, self.trans.z],
        }
    }
}

/// JSON pose record: `R` row-major, `T` translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
}

impl PoseRecord {
    /// Rejects non-finite values and matrices that are not rotations.
    pub fn to_pose(&self) -> Result<PoseSE3> {
        if self.r.iter().chain(&self.t).any(|v| !v.is_finite()) {
            return Err(GeometryError::NotARotation(f64::NAN));
        }
        let rot = Mat3::from_row_slice(&self.r);
        PoseSE3::validated(rot, Vec3::new(self.t[0], self.t[1], self.t[2]), 1e-6)
    }
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    let e = (r.transpose() * r - Mat3::identity()).abs().max();
    e.max((r.determinant() - 1.0).abs())
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-8 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

/// SE(3) exponential of `(rho, phi)`.
pub fn se3_exp(xi: &[f64; 6]) -> PoseSE3 {
    let rho = Vec3::new(xi[0], xi[1], xi[2]);
    let w = Vec3::new(xi[3], xi[4], xi[5]);
    let theta = w.norm();
    let k = skew(&w);
    let v = if theta < 1e-8 {
        Mat3::identity() + 0.5 * k + k * k / 6.0
    } else {
        let t2 = theta * theta;
        Mat3::identity()
            + (1.0 - theta.cos()) / t2 * k
            + (theta - theta.sin()) / (t2 * theta) * k * k
    };
    PoseSE3 {
        rot: so3_exp(&w),
        trans: v * rho,
    }
}

/// Geodesic angle of a rotation, in radians.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = 0.5 * (r.trace() - 1.0);
    let s = 0.5
        * Vec3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    s.atan2(c)
}

pub fn rotation_about(axis: &Vec3, degrees: f64) -> Mat3 {
    so3_exp(&(axis.normalize() * degrees.to_radians()))
}

/// Camera-to-world pose of a camera at `eye` looking at `target`, with the
/// image y axis as close to `down` as possible.
pub fn look_at(eye: &Vec3, target: &Vec3, down: &Vec3) -> Option<PoseSE3> {
    let z = target - eye;
    if z.norm() < 1e-9 {
        return None;
    }
    let z = z.normalize();
    let x = down.cross(&z);
    if x.norm() < 1e-9 {
        return None;
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Some(PoseSE3 {
        rot: Mat3::from_columns(&[x, y, z]),
        trans: *eye,
    })
}

/// Two unnormalized axes `a1 = rot6[0..3]`, `a2 = rot6[3..6]` turned into a
/// rotation by Gram–Schmidt plus a cross product. Columns are `b1 b2 b3`.
pub fn decode_rotation6d(rot6: &[f64; 6]) -> Result<Mat3> {
    let a1 = Vec3::new(rot6[0], rot6[1], rot6[2]);
    let a2 = Vec3::new(rot6[3], rot6[4], rot6[5]);
    let n1 = a1.norm();
    if !(n1 > ROT6_EPS) {
        return Err(GeometryError::DegenerateRotation(
            "first axis has zero length",
        ));
    }
    let b1 = a1 / n1;
    let r = a2 - b1.dot(&a2) * b1;
    let nr = r.norm();
    if !(nr > ROT6_EPS) {
        return Err(GeometryError::DegenerateRotation("axes are parallel"));
    }
    let b2 = r / nr;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseCode10 {
    pub rot6: [f64; 6],
    pub th: [f64; 4],
}

impl PoseCode10 {
    pub fn from_slice(v: &[f64]) -> Option<Self> {
        if v.len() != 10 {
            return None;
        }
        let mut rot6 = [0.0; 6];
        let mut th = [0.0; 4];
        rot6.copy_from_slice(&v[..6]);
        th.copy_from_slice(&v[6..]);
        Some(Self { rot6, th })
    }

    pub fn to_array(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..6].copy_from_slice(&self.rot6);
        out[6..].copy_from_slice(&self.th);
        out
    }

    /// Code that decodes exactly to the identity pose.
    pub fn identity() -> Self {
        encode_pose10(&PoseSE3::identity())
    }
}

/// Homogeneous weight `w0` with `softplus(w0) + HOMOGENEOUS_EPS = 1`.
pub fn unit_homogeneous_weight() -> f64 {
    let target: f64 = 1.0 - HOMOGENEOUS_EPS;
    // inverse softplus
    target.exp_m1().ln()
}

/// `R` from the 6D part, `T = th[0..3] / (HOMOGENEOUS_EPS + softplus(th[3]))`.
pub fn decode_pose10(code: &PoseCode10) -> Result<PoseSE3> {
    let rot = decode_rotation6d(&code.rot6)?;
    let d = HOMOGENEOUS_EPS + softplus(code.th[3]);
    Ok(PoseSE3 {
        rot,
        trans: Vec3::new(code.th[0] / d, code.th[1] / d, code.th[2] / d),
    })
}

/// Inverse of [`decode_pose10`] up to the code's gauge: first two rotation
/// columns and `(T, w0)` with a unit denominator.
pub fn encode_pose10(pose: &PoseSE3) -> PoseCode10 {
    let c0 = pose.rot.column(0);
    let c1 = pose.rot.column(1);
    let w0 = unit_homogeneous_weight();
    let d = HOMOGENEOUS_EPS + softplus(w0);
    PoseCode10 {
        rot6: [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]],
        th: [pose.trans.x * d, pose.trans.y * d, pose.trans.z * d, w0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// `[fx/W, fy/H, cx/W, cy/H]`.
    pub fn normalized(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }

    /// Camera-frame direction (z = 1) through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Center of pixel `(x, y)`.
    pub fn pixel_center(x: usize, y: usize) -> Vec2 {
        Vec2::new(x as f64 + 0.5, y as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vec2,
    pub depth: f64,
    pub valid: bool,
}

/// Pinhole projection of a canonical point into the view with pose `pose`.
pub fn project(k: &Intrinsics, pose: &PoseSE3, x: &Vec3) -> Projection {
    let c = pose.to_camera(x);
    let valid = c.z > Z_NEAR;
    let pixel = if valid {
        Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy)
    } else {
        Vec2::new(f64::NAN, f64::NAN)
    };
    Projection {
        pixel,
        depth: c.z,
        valid,
    }
}

/// Canonical point at camera depth `depth` behind pixel coordinates `p`.
pub fn unproject(k: &Intrinsics, pose: &PoseSE3, p: &Vec2, depth: f64) -> Vec3 {
    pose.transform_point(&(k.ray(p.x, p.y) * depth))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_deg: f64,
    pub combined_deg: f64,
}

/// Angle between two vectors in degrees; 0 when either is shorter than 1e-9.
pub fn direction_angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-9 || nb < 1e-9 {
        return 0.0;
    }
    let c = a.cross(b).norm();
    c.atan2(a.dot(b)).to_degrees()
}

pub fn pose_error(est: &PoseSE3, gt: &PoseSE3) -> PoseError {
    let rot_deg = rotation_angle(&(est.rot * gt.rot.transpose())).to_degrees();
    let trans_deg = direction_angle_deg(&est.trans, &gt.trans);
    PoseError {
        rot_deg,
        trans_deg,
        combined_deg: rot_deg.max(trans_deg),
    }
}

/// Area under the cumulative error curve up to each threshold, normalized:
/// `mean(max(0, 1 - e/τ))`.
pub fn auc_at_thresholds(errors_deg: &[f64], thresholds_deg: &[f64]) -> Result<Vec<f64>> {
    if errors_deg.is_empty() {
        return Err(GeometryError::EmptyErrors);
    }
    thresholds_deg
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(GeometryError::InvalidThreshold(t));
            }
            let s: f64 = errors_deg.iter().map(|&e| (1.0 - e / t).max(0.0)).sum();
            Ok(s / errors_deg.len() as f64)
        })
        .collect()
}

pub const DEFAULT_AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Express every pose relative to the first one; the first becomes exactly
/// the identity.
pub fn normalize_to_canonical(poses: &[PoseSE3]) -> Vec<PoseSE3> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                PoseSE3::identity()
            } else {
                inv.compose(p)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rot_from(axis: [f64; 3], deg: f64) -> Mat3 {
        rotation_about(&Vec3::new(axis[0], axis[1], axis[2]), deg)
    }

    #[test]
    fn canonical_axes_decode_to_identity() {
        let r = decode_rotation6d(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(r, Mat3::identity());
        let r = decode_rotation6d(&[2.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn degenerate_axes_are_rejected() {
        assert!(matches!(
            decode_rotation6d(&[0.0; 6]),
            Err(GeometryError::DegenerateRotation(_))
        ));
        assert!(matches!(
            decode_rotation6d(&[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]),
            Err(GeometryError::DegenerateRotation(_))
        ));
    }

    #[test]
    fn pose_code_translation_uses_softplus_denominator() {
        for w in [-3.0, 0.0, 1.5] {
            let code = PoseCode10 {
                rot6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                th: [0.0, 0.0, 0.0, w],
            };
            assert_eq!(decode_pose10(&code).unwrap(), PoseSE3::identity());
            let s = 0.7;
            let code = PoseCode10 {
                th: [s, 0.0, 0.0, w],
                ..code
            };
            let d = softplus(w) + HOMOGENEOUS_EPS;
            let p = decode_pose10(&code).unwrap();
            assert_eq!(p.trans, Vec3::new(s / d, 0.0, 0.0));
        }
    }

    #[test]
    fn unit_weight_gives_unit_denominator() {
        let w = unit_homogeneous_weight();
        assert!((softplus(w) + HOMOGENEOUS_EPS - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let k = Intrinsics::new(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap();
        let id = PoseSE3::identity();
        let p = project(&k, &id, &Vec3::new(0.0, 0.0, 1.0));
        assert!(p.valid);
        assert_eq!(p.pixel, Vec2::new(128.0, 128.0));
        let p = project(&k, &id, &Vec3::new(0.5, 0.0, 1.0));
        assert_eq!(p.pixel, Vec2::new(178.0, 128.0));
        assert!(!project(&k, &id, &Vec3::new(0.0, 0.0, -1.0)).valid);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(Intrinsics::new(-1.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 5.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn pose_error_examples() {
        let gt = PoseSE3::new(rot_from([0.3, 1.0, 0.2], 25.0), Vec3::new(0.2, -0.1, 0.5));
        let e = pose_error(&gt, &gt);
        assert!(e.rot_deg.abs() < 1e-6 && e.trans_deg.abs() < 1e-6);

        let est = PoseSE3::new(rot_from([0.0, 0.0, 1.0], 10.0) * gt.rot, gt.trans);
        let e = pose_error(&est, &gt);
        assert!((e.rot_deg - 10.0).abs() < 1e-9);
        assert!(e.trans_deg.abs() < 1e-9);
        assert!((e.combined_deg - 10.0).abs() < 1e-9);

        let est = PoseSE3::new(gt.rot, gt.trans * 2.0);
        assert!(pose_error(&est, &gt).trans_deg.abs() < 1e-9);

        let pure_rot = PoseSE3::new(gt.rot, Vec3::zeros());
        assert_eq!(pose_error(&pure_rot, &gt).trans_deg, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_at_thresholds(&[0.0, 0.0], &[5.0, 10.0, 20.0]).unwrap(),
            vec![1.0; 3]
        );
        assert_eq!(auc_at_thresholds(&[10.0], &[20.0]).unwrap(), vec![0.5]);
        assert_eq!(auc_at_thresholds(&[0.0, 40.0], &[20.0]).unwrap(), vec![0.5]);
        assert!(matches!(
            auc_at_thresholds(&[], &[5.0]),
            Err(GeometryError::EmptyErrors)
        ));
    }

    #[test]
    fn se3_exp_small_angle_matches_first_order() {
        let xi = [1e-3, -2e-3, 5e-4, 1e-4, 2e-4, -3e-4];
        let p = se3_exp(&xi);
        assert!((p.trans - Vec3::new(1e-3, -2e-3, 5e-4)).norm() < 1e-6);
        assert!((rotation_angle(&p.rot) - Vec3::new(1e-4, 2e-4, -3e-4).norm()).abs() < 1e-12);
    }

    #[test]
    fn pose_record_roundtrip_and_rejection() {
        let p = PoseSE3::new(rot_from([1.0, 2.0, 3.0], 40.0), Vec3::new(1.0, 2.0, 3.0));
        let rec = p.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: PoseRecord = serde_json::from_str(&json).unwrap();
        let q = back.to_pose().unwrap();
        assert!((q.rot - p.rot).abs().max() < 1e-15);
        let bad = PoseRecord {
            r: [2.0; 9],
            t: [0.0; 3],
        };
        assert!(bad.to_pose().is_err());
    }

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..179.0,
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_filter("axis", |(a, _, _)| {
                Vec3::new(a[0], a[1], a[2]).norm() > 1e-3
            })
            .prop_map(|(a, d, t)| PoseSE3::new(rot_from(a, d), Vec3::new(t[0], t[1], t[2])))
    }

    proptest! {
        #[test]
        fn decoded_rotation_is_proper(v in prop::array::uniform6(-5.0f64..5.0)) {
            if let Ok(r) = decode_rotation6d(&v) {
                prop_assert!(orthonormality_error(&r) < 1e-9);
            }
        }

        #[test]
        fn decode_invariant_to_scaling_and_shear(
            v in prop::array::uniform6(-5.0f64..5.0),
            s in 0.1f64..10.0,
            k in -3.0f64..3.0,
        ) {
            if let Ok(r) = decode_rotation6d(&v) {
                let w = [
                    v[0] * s, v[1] * s, v[2] * s,
                    v[3] + k * v[0], v[4] + k * v[1], v[5] + k * v[2],
                ];
                let r2 = decode_rotation6d(&w).unwrap();
                prop_assert!((r - r2).abs().max() < 1e-9);
            }
        }

        #[test]
        fn pose_code_roundtrip(p in arb_pose()) {
            let q = decode_pose10(&encode_pose10(&p)).unwrap();
            prop_assert!((q.rot - p.rot).norm() < 1e-9);
            prop_assert!((q.trans - p.trans).norm() < 1e-9);
        }

        #[test]
        fn projection_inverts_unprojection(
            p in arb_pose(),
            u in 1.0f64..63.0,
            v in 1.0f64..63.0,
            d in 0.01f64..50.0,
        ) {
            let k = Intrinsics::from_fov(64, 64, 60.0).unwrap();
            let px = Vec2::new(u, v);
            let x = unproject(&k, &p, &px, d);
            let back = project(&k, &p, &x);
            prop_assert!(back.valid);
            prop_assert!((back.pixel - px).norm() < 1e-9);
        }

        #[test]
        fn rotation_error_is_symmetric(a in arb_pose(), b in arb_pose()) {
            let ab = pose_error(&a, &b).rot_deg;
            let ba = pose_error(&b, &a).rot_deg;
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn canonical_normalization_keeps_relative_poses(
            poses in prop::collection::vec(arb_pose(), 2..5)
        ) {
            let n = normalize_to_canonical(&poses);
            prop_assert_eq!(n[0], PoseSE3::identity());
            for i in 0..poses.len() {
                for j in 0..poses.len() {
                    let before = poses[i].inverse().compose(&poses[j]);
                    let after = n[i].inverse().compose(&n[j]);
                    prop_assert!((before.rot - after.rot).abs().max() < 1e-12);
                    prop_assert!((before.trans - after.trans).abs().max() < 1e-11);
                }
            }
        }

        #[test]
        fn auc_monotone_in_threshold(errs in prop::collection::vec(0.0f64..90.0, 1..30)) {
            let a = auc_at_thresholds(&errs, &DEFAULT_AUC_THRESHOLDS).unwrap();
            prop_assert!(a[0] <= a[1] && a[1] <= a[2]);
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
