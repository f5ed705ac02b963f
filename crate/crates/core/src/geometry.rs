//! Pinhole camera model, rigid-body poses, and the warp between frames.
//!
//! Poses are camera-from-world: x_cam = R x_world + t. Twists are laid out
//! rotation-first, [omega; v]. Pixel centers sit at integer coordinates and
//! map to normalized coordinates via u = 2*(px + 0.5)/width - 1, the one
//! half-pixel convention shared across the crate.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::NormalizedCoord;

/// Minimum camera-frame depth accepted by projection.
pub const MIN_PROJECT_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics with image dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidParameter {
                parameter: "intrinsics",
                reason: format!("focal lengths ({fx}, {fy}) must be positive"),
            });
        }
        if !(cx.is_finite() && cy.is_finite()) || width == 0 || height == 0 {
            return Err(Error::InvalidParameter {
                parameter: "intrinsics",
                reason: format!("bad principal point ({cx}, {cy}) or dimensions {width}x{height}"),
            });
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics of the next-coarser pyramid level (dimensions halved,
    /// principal point mapped through the half-pixel convention).
    pub fn halved(&self) -> Result<Self> {
        Intrinsics::new(
            self.fx / 2.0,
            self.fy / 2.0,
            (self.cx + 0.5) / 2.0 - 0.5,
            (self.cy + 0.5) / 2.0 - 0.5,
            self.width / 2,
            self.height / 2,
        )
    }

    /// True if the pixel lies in the bilinear-sampling domain
    /// [0, width-1] x [0, height-1].
    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y >= 0.0
            && pixel.y <= (self.height - 1) as f64
    }

    /// Normalized coordinate of a pixel, clamped into [-1, 1] so slightly
    /// out-of-frame projections can still index the kernel field.
    pub fn normalized(&self, pixel: &Vector2<f64>) -> Result<NormalizedCoord> {
        NormalizedCoord::clamped(
            2.0 * (pixel.x + 0.5) / self.width as f64 - 1.0,
            2.0 * (pixel.y + 0.5) / self.height as f64 - 1.0,
        )
    }
}

/// Rigid transform, camera-from-world. Rotation is kept as a unit quaternion
/// and re-normalized after every 100 compositions to bound drift.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    compositions: u32,
}

const RENORMALIZE_EVERY: u32 = 100;

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros(), compositions: 0 }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation, compositions: 0 }
    }

    /// Builds from quaternion coefficients (x, y, z, w), Hamilton convention.
    /// The quaternion must be unit length within 1e-6; it is re-normalized.
    pub fn from_parts(translation: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter {
                parameter: "quaternion",
                reason: format!("({qx}, {qy}, {qz}, {qw}) has norm {norm}, expected 1"),
            });
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(q), translation))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let mut compositions = self.compositions.max(other.compositions) + 1;
        if compositions >= RENORMALIZE_EVERY {
            rotation.renormalize();
            compositions = 0;
        }
        Pose { rotation, translation, compositions }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
            compositions: self.compositions,
        }
    }

    /// Transform taking frame-i camera coordinates to frame-j camera
    /// coordinates: T_j ∘ T_i^{-1}. Bitwise-identical poses yield the exact
    /// identity so self-warps stay exact.
    pub fn relative(from_i: &Pose, to_j: &Pose) -> Pose {
        if from_i.bits_eq(to_j) {
            return Pose::identity();
        }
        to_j.compose(&from_i.inverse())
    }

    fn bits_eq(&self, other: &Pose) -> bool {
        let a = self.rotation.coords;
        let b = other.rotation.coords;
        (0..4).all(|i| a[i].to_bits() == b[i].to_bits())
            && (0..3).all(|i| self.translation[i].to_bits() == other.translation[i].to_bits())
    }

    /// Quaternion coefficients (qx, qy, qz, qw).
    pub fn quaternion_coeffs(&self) -> [f64; 4] {
        let c = self.rotation.coords;
        [c[0], c[1], c[2], c[3]]
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == UnitQuaternion::identity() && self.translation == Vector3::zeros()
    }
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SO(3) left Jacobian J_l(omega).
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    if theta_sq < 1e-16 {
        return Matrix3::identity() + 0.5 * w + (w * w) / 6.0;
    }
    let theta = theta_sq.sqrt();
    Matrix3::identity()
        + ((1.0 - theta.cos()) / theta_sq) * w
        + ((theta - theta.sin()) / (theta_sq * theta)) * (w * w)
}

/// Inverse of the SO(3) left Jacobian.
fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    let kappa = if theta_sq < 1e-16 {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let theta = theta_sq.sqrt();
        1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * w + kappa * (w * w)
}

/// Exponential map from a twist [omega; v] to a pose: R = exp(skew(omega)),
/// t = J_l(omega) v.
pub fn se3_exp(twist: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let rotation = UnitQuaternion::from_scaled_axis(omega);
    let translation = so3_left_jacobian(&omega) * v;
    Pose::new(rotation, translation)
}

/// Logarithm map, inverse of [`se3_exp`] away from the pi-rotation
/// singularity.
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let omega = pose.rotation.scaled_axis();
    let v = so3_left_jacobian_inv(&omega) * pose.translation;
    Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// SE(3) left Jacobian in the [omega; v] layout via its adjoint power
/// series sum ad^k / (k+1)!, which converges to machine precision for the
/// twist magnitudes this crate optimizes over.
fn se3_left_jacobian(twist: &Vector6<f64>) -> DMatrix<f64> {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let mut ad = DMatrix::zeros(6, 6);
    let w = skew(&omega);
    let p = skew(&v);
    ad.view_mut((0, 0), (3, 3)).copy_from(&w);
    ad.view_mut((3, 0), (3, 3)).copy_from(&p);
    ad.view_mut((3, 3), (3, 3)).copy_from(&w);
    let mut term = DMatrix::identity(6, 6);
    let mut sum = term.clone();
    for k in 1..=40 {
        term = (&term * &ad) / (k + 1) as f64;
        sum += &term;
    }
    sum
}

/// Inverse of the SE(3) left Jacobian in the [omega; v] layout: maps a left
/// perturbation of the pose to the change of its logarithm,
/// d log(exp(delta) exp(xi)) / d delta at delta = 0. Falls back to the
/// identity at the (never optimized-through) injectivity-radius boundary.
pub fn se3_left_jacobian_inv(twist: &Vector6<f64>) -> DMatrix<f64> {
    se3_left_jacobian(twist).try_inverse().unwrap_or_else(|| DMatrix::identity(6, 6))
}

/// Pinhole projection of a world point into pixel coordinates.
pub fn project(pose: &Pose, p_world: &Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>> {
    let pc = pose.transform_point(p_world);
    project_camera(&pc, k)
}

/// Projection of a camera-frame point.
pub fn project_camera(pc: &Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>> {
    if pc.z <= MIN_PROJECT_DEPTH {
        return Err(Error::Cheirality { depth: pc.z });
    }
    Ok(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Camera-frame point of a pixel at a given depth.
pub fn backproject(pixel: &Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::Domain(format!("backprojection depth {depth} must be positive")));
    }
    Ok(Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth))
}

/// A warped pixel plus whether it landed inside the sampling domain of the
/// target image. Out-of-image results are not errors; callers mask them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warped {
    pub pixel: Vector2<f64>,
    pub inside: bool,
}

/// Warps a pixel from frame i to frame j: backproject at depth e^{log_depth},
/// apply the relative transform, and project. The log-depth argument already
/// carries the full conditioned value (scale included). Identical poses map
/// each pixel to itself exactly.
pub fn warp(
    pixel: &Vector2<f64>,
    pose_i: &Pose,
    pose_j: &Pose,
    log_depth: f64,
    k: &Intrinsics,
) -> Result<Warped> {
    let rel = Pose::relative(pose_i, pose_j);
    warp_relative(pixel, &rel, log_depth, k)
}

/// Warp with a precomputed i-to-j relative transform.
pub fn warp_relative(
    pixel: &Vector2<f64>,
    rel: &Pose,
    log_depth: f64,
    k: &Intrinsics,
) -> Result<Warped> {
    if rel.is_identity() {
        return Ok(Warped { pixel: *pixel, inside: k.in_image(pixel) });
    }
    let p_i = backproject(pixel, log_depth.exp(), k)?;
    let p_j = rel.transform_point(&p_i);
    let projected = project_camera(&p_j, k)?;
    Ok(Warped { pixel: projected, inside: k.in_image(&projected) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng, rot_scale: f64, trans_scale: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * rot_scale;
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * trans_scale;
        Pose::new(UnitQuaternion::from_scaled_axis(axis), t)
    }

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(120.0, 110.0, 63.5, 47.5, 128, 96).unwrap()
    }

    #[test]
    fn projection_of_axis_point_lands_at_principal_point() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10).unwrap();
        let px = project(&Pose::identity(), &Vector3::new(0.0, 0.0, 1.0), &k).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn projection_arithmetic_example() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
        let px = project(&Pose::identity(), &Vector3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_abs_diff_eq!(px.x, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_rejects_points_behind_camera() {
        let k = test_intrinsics();
        let err = project(&Pose::identity(), &Vector3::new(0.0, 0.0, -1.0), &k).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn backprojection_of_principal_point_is_on_axis() {
        let k = test_intrinsics();
        let p = backproject(&Vector2::new(k.cx, k.cy), 2.5, &k).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.5), epsilon = 1e-14);
    }

    #[test]
    fn backprojection_matches_direct_formula() {
        let k = test_intrinsics();
        let pixel = Vector2::new(17.25, 83.0);
        let depth = 3.7;
        let p = backproject(&pixel, depth, &k).unwrap();
        assert_relative_eq!(p.x, (17.25 - 63.5) / 120.0 * 3.7, epsilon = 1e-14);
        assert_relative_eq!(p.y, (83.0 - 47.5) / 110.0 * 3.7, epsilon = 1e-14);
        assert_relative_eq!(p.z, 3.7, epsilon = 1e-14);
    }

    #[test]
    fn backprojection_rejects_nonpositive_depth() {
        let k = test_intrinsics();
        assert!(backproject(&Vector2::new(0.0, 0.0), 0.0, &k).is_err());
        assert!(backproject(&Vector2::new(0.0, 0.0), -1.0, &k).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pixel =
                Vector2::new(rng.random_range(0.0..127.0), rng.random_range(0.0..95.0));
            let depth = rng.random_range(0.3..20.0);
            let p = backproject(&pixel, depth, &k).unwrap();
            let back = project_camera(&p, &k).unwrap();
            assert_relative_eq!(back, pixel, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_twist_is_identity() {
        let p = se3_exp(&Vector6::zeros());
        assert!(p.is_identity());
    }

    #[test]
    fn translation_only_twist_is_pure_translation() {
        let p = se3_exp(&Vector6::new(0.0, 0.0, 0.0, 0.4, -0.2, 1.5));
        assert!(p.rotation() == &UnitQuaternion::identity());
        assert_relative_eq!(*p.translation(), Vector3::new(0.4, -0.2, 1.5), epsilon = 1e-15);
    }

    #[test]
    fn exp_log_round_trip_small_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let twist = Vector6::from_fn(|_, _| rng.random_range(-1.2..1.2));
            let pose = se3_exp(&twist);
            let back = se3_log(&pose);
            assert_relative_eq!(back, twist, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_exp_round_trip_on_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 1.0, 2.0);
            let twist = se3_log(&pose);
            let again = se3_exp(&twist);
            assert_relative_eq!(*again.translation(), *pose.translation(), epsilon = 1e-9);
            assert!(again.rotation().angle_to(pose.rotation()) < 1e-9);
        }
    }

    #[test]
    fn compose_and_inverse_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_pose(&mut rng, 0.8, 1.0);
        let b = a.compose(&a.inverse());
        assert!(b.rotation().angle_to(&UnitQuaternion::identity()) < 1e-12);
        assert!(b.translation().norm() < 1e-12);
    }

    #[test]
    fn composition_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_pose(&mut rng, 0.7, 1.5);
        let b = random_pose(&mut rng, 0.7, 1.5);
        let c = a.compose(&b);
        let p = Vector3::new(0.3, -0.7, 2.0);
        assert_relative_eq!(
            c.transform_point(&p),
            a.transform_point(&b.transform_point(&p)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn long_composition_chains_stay_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut pose = Pose::identity();
        for _ in 0..1000 {
            pose = pose.compose(&random_pose(&mut rng, 0.05, 0.1));
        }
        let r = pose.rotation_matrix();
        let gram = r.transpose() * r;
        let err = (gram - Matrix3::identity()).norm();
        assert!(err < 1e-6, "orthonormality drift {err}");
    }

    #[test]
    fn warp_with_equal_poses_is_exact_identity() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pose = random_pose(&mut rng, 0.5, 1.0);
        let pixel = Vector2::new(31.75, 60.5);
        let w = warp(&pixel, &pose, &pose, 0.37, &k).unwrap();
        assert_eq!(w.pixel, pixel);
        assert!(w.inside);
    }

    #[test]
    fn forward_motion_pushes_pixels_radially_outward() {
        let k = test_intrinsics();
        let ti = Pose::identity();
        // Camera j sits 0.5 m closer to a fronto-parallel plane at 2 m.
        let tj = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -0.5));
        let log_depth = 2.0_f64.ln();
        for &(px, py) in &[(10.0, 20.0), (100.0, 80.0), (63.5, 10.0), (20.0, 47.5)] {
            let pixel = Vector2::new(px, py);
            let w = warp(&pixel, &ti, &tj, log_depth, &k).unwrap();
            let before = (pixel - Vector2::new(k.cx, k.cy)).norm();
            let after = (w.pixel - Vector2::new(k.cx, k.cy)).norm();
            assert!(after > before, "pixel ({px}, {py}) moved inward");
        }
    }

    #[test]
    fn warp_matches_unfused_composition_oracle() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let ti = random_pose(&mut rng, 0.3, 0.5);
            let tj = random_pose(&mut rng, 0.3, 0.5);
            let pixel =
                Vector2::new(rng.random_range(5.0..120.0), rng.random_range(5.0..90.0));
            let log_depth: f64 = rng.random_range(0.5..2.0);
            // Oracle: go through the world frame without fusing transforms.
            let p_i = backproject(&pixel, log_depth.exp(), &k).unwrap();
            let p_world = ti.inverse().transform_point(&p_i);
            let p_j = tj.transform_point(&p_world);
            if p_j.z <= MIN_PROJECT_DEPTH {
                continue;
            }
            let expect = project_camera(&p_j, &k).unwrap();
            let got = warp(&pixel, &ti, &tj, log_depth, &k).unwrap();
            assert_relative_eq!(got.pixel, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn se3_left_jacobian_inverse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..40 {
            let xi = Vector6::from_fn(|_, _| rng.random_range(-0.9..0.9));
            let base = se3_exp(&xi);
            let jl_inv = se3_left_jacobian_inv(&xi);
            let h = 1e-6;
            for col in 0..6 {
                let mut delta = Vector6::zeros();
                delta[col] = h;
                let up = se3_log(&se3_exp(&delta).compose(&base));
                delta[col] = -h;
                let down = se3_log(&se3_exp(&delta).compose(&base));
                let fd = (up - down) / (2.0 * h);
                for row in 0..6 {
                    assert_abs_diff_eq!(jl_inv[(row, col)], fd[row], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn intrinsics_pyramid_preserves_pixel_centers() {
        let k = Intrinsics::new(100.0, 100.0, 63.5, 47.5, 128, 96).unwrap();
        let half = k.halved().unwrap();
        assert_eq!((half.width, half.height), (64, 48));
        // A ray through the full-resolution center (cx, cy) must pass through
        // the half-resolution center too.
        let p = backproject(&Vector2::new(k.cx, k.cy), 2.0, &k).unwrap();
        let px = project_camera(&p, &half).unwrap();
        assert_relative_eq!(px, Vector2::new(half.cx, half.cy), epsilon = 1e-12);
    }

    #[test]
    fn pose_round_trips_through_quaternion_coeffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pose = random_pose(&mut rng, 0.9, 2.0);
        let [qx, qy, qz, qw] = pose.quaternion_coeffs();
        let again = Pose::from_parts(*pose.translation(), qx, qy, qz, qw).unwrap();
        assert_eq!(again, pose);
    }

    #[test]
    fn from_parts_rejects_unnormalized_quaternions() {
        assert!(Pose::from_parts(Vector3::zeros(), 0.5, 0.5, 0.5, 0.6).is_err());
    }
}
