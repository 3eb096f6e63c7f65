//! SE(3) rigid-body transforms, pinhole camera model, and the pixel warping
//! map with analytic Jacobians.
//!
//! Conventions used throughout the crate:
//! - `T_{a->b}` maps frame-a coordinates into frame-b coordinates;
//!   `a.compose(&b)` is `a * b` (apply `b` first, then `a`).
//! - Camera poses stored in trajectories and datasets are camera-to-world
//!   (TUM convention); world-to-camera extrinsics appear only where the
//!   relative-transform formula needs them.
//! - Pixel coordinates are continuous, with the origin at the center of the
//!   top-left pixel.
//! - Everything is f64; the finite-difference gradient checks demand it.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3};

use crate::error::{Error, Result};

/// Angle threshold below which trigonometric coefficient functions switch to
/// their Taylor series.
const SMALL_ANGLE: f64 = 1e-2;

/// A rigid-body transform: `x_out = rotation * x_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Minimal 6-dof parameterization of a rigid transform: axis-angle rotation
/// (radians) and translation tangent (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Tangent {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Se3Tangent {
    pub fn zero() -> Self {
        Se3Tangent {
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Se3Tangent { rot, trans }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Se3Tangent {
            rot: Vector3::new(v[0], v[1], v[2]),
            trans: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rot.x, self.rot.y, self.rot.z, self.trans.x, self.trans.y, self.trans.z,
        ]
    }

    pub fn negated(&self) -> Self {
        Se3Tangent {
            rot: -self.rot,
            trans: -self.trans,
        }
    }
}

impl Se3Transform {
    pub fn identity() -> Self {
        Se3Transform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts, checking the rotation invariants
    /// (`||R^T R - I||_inf < 1e-9`, `det R = 1 +- 1e-9`).
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Se3Transform {
            rotation,
            translation,
        };
        if !t.rotation_is_orthonormal(1e-9) {
            return Err(Error::InvalidValue(
                "rotation matrix is not orthonormal".into(),
            ));
        }
        Ok(t)
    }

    pub fn rotation_is_orthonormal(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        max_dev < tol && (r.determinant() - 1.0).abs() < tol
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3Transform) -> Se3Transform {
        Se3Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Transform {
        let r_inv = self.rotation.transpose();
        Se3Transform {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Exact (bitwise) identity check. The identity warp must be the exact
    /// identity map on pixels, which the generic project/backproject round
    /// trip cannot guarantee in floating point.
    pub fn is_exact_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let sin_vec = 0.5
            * Vector3::new(
                r[(2, 1)] - r[(1, 2)],
                r[(0, 2)] - r[(2, 0)],
                r[(1, 0)] - r[(0, 1)],
            );
        let cos = 0.5 * (r.trace() - 1.0);
        sin_vec.norm().atan2(cos)
    }
}

/// `T_{prev->curr} = T_{w->curr} * T_{w->prev}^{-1}` for world-to-camera
/// extrinsics of two frames.
pub fn relative_transform(t_w_prev: &Se3Transform, t_w_curr: &Se3Transform) -> Se3Transform {
    t_w_curr.compose(&t_w_prev.inverse())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// sin(t)/t with series fallback near zero.
fn sinc(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    }
}

/// (1 - cos t) / t^2.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        (1.0 - theta.cos()) / (theta * theta)
    }
}

/// (t - sin t) / t^3.
fn theta_minus_sin_over_cube(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// d/dt [(1-cos t)/t^2] divided by t.
fn d_one_minus_cos_over_sq_over_theta(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
    } else {
        let t2 = theta * theta;
        (theta * theta.sin() - 2.0 * (1.0 - theta.cos())) / (t2 * t2)
    }
}

/// d/dt [(t - sin t)/t^3] divided by t.
fn d_theta_minus_sin_over_cube_over_theta(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        -1.0 / 60.0 + t2 / 1260.0 - t2 * t2 / 60480.0
    } else {
        let t2 = theta * theta;
        (theta * (1.0 - theta.cos()) - 3.0 * (theta - theta.sin())) / (t2 * t2 * theta)
    }
}

/// Rodrigues rotation for an axis-angle vector.
fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let hat = skew(omega);
    Matrix3::identity() + sinc(theta) * hat + one_minus_cos_over_sq(theta) * (hat * hat)
}

/// The V matrix of the SE(3) exponential (equals the SO(3) left Jacobian).
fn v_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let hat = skew(omega);
    Matrix3::identity()
        + one_minus_cos_over_sq(theta) * hat
        + theta_minus_sin_over_cube(theta) * (hat * hat)
}

fn v_matrix_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let hat = skew(omega);
    let c = if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * hat + c * (hat * hat)
}

/// SE(3) exponential map. `exp_map(Se3Tangent::zero())` is the identity.
pub fn exp_map(t: &Se3Tangent) -> Se3Transform {
    Se3Transform {
        rotation: rodrigues(&t.rot),
        translation: v_matrix(&t.rot) * t.trans,
    }
}

/// SE(3) logarithm. Fails with [`Error::DegenerateRotation`] when the
/// rotation angle is within 1e-6 of pi (the axis is ambiguous there).
pub fn log_map(t: &Se3Transform) -> Result<Se3Tangent> {
    let theta = t.rotation_angle();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(Error::DegenerateRotation);
    }
    let r = &t.rotation;
    let sin_vec = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
    // sin_vec = sin(theta) * axis; divide through sinc for stability near 0.
    let omega = sin_vec / sinc(theta);
    let v = v_matrix_inverse(&omega) * t.translation;
    Ok(Se3Tangent {
        rot: omega,
        trans: v,
    })
}

/// Pinhole intrinsics. `fx, fy` in pixels, principal point `(cx, cy)` in
/// pixels, image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidValue(format!(
                "focal lengths must be positive (got fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidValue(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics for pyramid level `level`: focal lengths and principal
    /// point divided by `2^level`, image size floor-halved per level.
    pub fn at_level(&self, level: usize) -> CameraIntrinsics {
        let s = (1 << level) as f64;
        let mut w = self.width;
        let mut h = self.height;
        for _ in 0..level {
            w /= 2;
            h /= 2;
        }
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: w,
            height: h,
        }
    }

    /// Unit-depth ray direction through pixel `u`: `K^{-1} u_tilde`.
    pub fn ray_direction(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.x <= (self.width - 1) as f64 && u.y >= 0.0 && u.y <= (self.height - 1) as f64
    }
}

/// Project a camera-frame point to pixel coordinates. Requires `p.z > 0`.
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if p.z <= 0.0 {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Back-project pixel `u` at `depth` (meters along the optical axis) to a
/// camera-frame point. Requires `depth > 0`.
pub fn backproject(k: &CameraIntrinsics, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::BehindCamera { z: depth });
    }
    Ok(k.ray_direction(u) * depth)
}

/// Jacobian of `project` with respect to the camera-frame point.
fn projection_jacobian(k: &CameraIntrinsics, q: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / q.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * q.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * q.y * iz * iz,
    )
}

/// Reproject pixel `u` of the source view (with its depth) through `t` into
/// the destination view. The flag is false when the transformed point ends
/// up behind the camera or outside `[0, w-1] x [0, h-1]`; that is routine,
/// not an error.
pub fn warp_pixel(
    k: &CameraIntrinsics,
    t: &Se3Transform,
    depth: f64,
    u: &Vector2<f64>,
) -> (Vector2<f64>, bool) {
    debug_assert!(depth > 0.0);
    if t.is_exact_identity() {
        return (*u, k.contains(u));
    }
    let p = k.ray_direction(u) * depth;
    let q = t.transform_point(&p);
    if q.z <= 0.0 {
        return (Vector2::zeros(), false);
    }
    let pix = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
    (pix, k.contains(&pix))
}

/// Derivatives of the warped pixel location.
#[derive(Debug, Clone, Copy)]
pub struct WarpJacobian {
    /// d(warped pixel) / d(source depth).
    pub d_depth: Vector2<f64>,
    /// d(warped pixel) / d(pose tangent), tangent ordered [rot, trans].
    pub d_tangent: Matrix2x6<f64>,
}

/// Cached per-tangent quantities for differentiating `exp(tau) * p`.
///
/// For `q(tau) = R(omega) p + V(omega) v`:
///   dq/dv     = V(omega)
///   dq/domega = -[R p]x V(omega) + d(V(omega) v)/domega
/// where the last term is closed-form in `omega, v` and independent of `p`.
#[derive(Debug, Clone)]
pub struct PoseJacContext {
    pub tangent: Se3Tangent,
    pub transform: Se3Transform,
    v_mat: Matrix3<f64>,
    dvv_domega: Matrix3<f64>,
}

impl PoseJacContext {
    pub fn new(tangent: &Se3Tangent) -> Self {
        let omega = tangent.rot;
        let v = tangent.trans;
        let theta = omega.norm();
        let rotation = rodrigues(&omega);
        let v_mat = v_matrix(&omega);
        let translation = v_mat * v;

        let a = one_minus_cos_over_sq(theta);
        let b = theta_minus_sin_over_cube(theta);
        let da_over_theta = d_one_minus_cos_over_sq_over_theta(theta);
        let db_over_theta = d_theta_minus_sin_over_cube_over_theta(theta);
        let wxv = omega.cross(&v);
        let wxwxv = omega.cross(&wxv);
        let dvv_domega = da_over_theta * (wxv * omega.transpose()) - a * skew(&v)
            + db_over_theta * (wxwxv * omega.transpose())
            + b * (omega.dot(&v) * Matrix3::identity() + omega * v.transpose()
                - 2.0 * (v * omega.transpose()));

        PoseJacContext {
            tangent: *tangent,
            transform: Se3Transform {
                rotation,
                translation,
            },
            v_mat,
            dvv_domega,
        }
    }

    /// Transformed point and its 3x6 Jacobian w.r.t. the tangent.
    pub fn point_with_jacobian(&self, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3x6<f64>) {
        let rp = self.transform.rotation * p;
        let q = rp + self.transform.translation;
        let dq_domega = -skew(&rp) * self.v_mat + self.dvv_domega;
        let mut jac = Matrix3x6::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&dq_domega);
        jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&self.v_mat);
        (q, jac)
    }
}

/// Warp a pixel and return the full derivative set, differentiating with
/// respect to the tangent coordinates that generate the pose.
///
/// Returns `None` when the warp is invalid at this configuration.
pub fn warp_with_jacobian(
    k: &CameraIntrinsics,
    ctx: &PoseJacContext,
    depth: f64,
    u: &Vector2<f64>,
) -> Option<(Vector2<f64>, WarpJacobian)> {
    let dir = k.ray_direction(u);
    let p = dir * depth;
    let (q, dq_dtangent) = ctx.point_with_jacobian(&p);
    if q.z <= 0.0 {
        return None;
    }
    let pix = if ctx.transform.is_exact_identity() {
        *u
    } else {
        Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
    };
    if !k.contains(&pix) {
        return None;
    }
    let jp = projection_jacobian(k, &q);
    let d_depth = jp * (ctx.transform.rotation * dir);
    let d_tangent = jp * dq_dtangent;
    Some((pix, WarpJacobian { d_depth, d_tangent }))
}

/// Spec-level entry point: derivatives of `warp_pixel(k, t, depth, u)` at
/// the global tangent `log_map(t)`. Fails with [`Error::InvalidWarp`] when
/// the warp is invalid at this configuration.
pub fn warp_jacobian(
    k: &CameraIntrinsics,
    t: &Se3Transform,
    depth: f64,
    u: &Vector2<f64>,
) -> Result<WarpJacobian> {
    let tangent = log_map(t)?;
    let ctx = PoseJacContext::new(&tangent);
    warp_with_jacobian(k, &ctx, depth, u)
        .map(|(_, jac)| jac)
        .ok_or(Error::InvalidWarp { u: u.x, v: u.y })
}
