//! Pinhole camera, quaternion algebra, 3D covariance construction and the
//! EWA (local affine) projection of covariances onto the image plane.
//!
//! Conventions: quaternions are `(w, x, y, z)` and normalized before use;
//! cameras are right-handed, looking down `+z`, with `x` to the right and `y`
//! down in the image. Pixel `(i, j)` is sampled at the coordinate `(i, j)`.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use crate::error::{Error, Result};

/// Points with camera-frame depth below this are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Added to both diagonal entries of every projected covariance (px²).
pub const LOW_PASS_DILATION: f64 = 0.3;

/// Smallest quaternion norm accepted before normalization.
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Orthonormality tolerance enforced by [`CameraModel::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Unit-norm-independent quaternion in `(w, x, y, z)` order.
pub type Quat = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: Matrix4<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let camera = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Domain("look_at: eye and target coincide".into()));
        }
        let forward = forward.normalize();
        // Image y points down, so the camera's "up" axis is -y.
        let right = (-up).cross(&forward);
        if right.norm() < 1e-12 {
            return Err(Error::Domain("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rigid_transform(&rotation, &translation),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Domain(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Domain("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        let deviation = rotation_deviation(&self.world_to_camera);
        if !(deviation <= ROTATION_TOLERANCE) {
            return Err(Error::Domain(format!(
                "world_to_camera rotation is not orthonormal with det +1 (deviation {deviation:e})"
            )));
        }
        let bottom = self.world_to_camera.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Domain("world_to_camera bottom row must be [0, 0, 0, 1]".into()));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("world_to_camera has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x_world + self.translation()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }
}

/// Builds a row-major 4×4 rigid transform from a rotation and translation.
pub fn rigid_transform(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Largest entry of `|R Rᵀ − I|` combined with `|det R − 1|`.
pub fn rotation_deviation(transform: &Matrix4<f64>) -> f64 {
    let r = transform.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r * r.transpose() - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Nearest rotation (polar factor) of an approximately orthonormal matrix.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Symmetric 3×3 covariance stored as its upper triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Covariance3 {
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.xx, self.xy, self.xz, //
            self.xy, self.yy, self.yz, //
            self.xz, self.yz, self.zz,
        )
    }
}

/// Symmetric 2×2 covariance in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Covariance2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Inverse as `(xx, xy, yy)`; fails unless positive definite.
    pub fn inverse(&self) -> Result<Covariance2> {
        let det = self.det();
        if !(det > 0.0) || !(self.xx > 0.0) {
            return Err(Error::DegenerateCovariance { det });
        }
        let inv_det = 1.0 / det;
        Ok(Covariance2 {
            xx: self.yy * inv_det,
            xy: -self.xy * inv_det,
            yy: self.xx * inv_det,
        })
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let norm = quat_norm(q);
    if !(norm > MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation { norm });
    }
    Ok([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm])
}

/// Hamilton product `a ⊗ b`; `rot(a ⊗ b) = rot(a) · rot(b)`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix of an already-normalized quaternion.
pub(crate) fn unit_quat_to_rotation(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
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

pub fn quat_to_rotation(q: &Quat) -> Result<Matrix3<f64>> {
    Ok(unit_quat_to_rotation(&normalize_quat(q)?))
}

/// `Σ = R · diag(s)² · Rᵀ`.
pub fn build_covariance3d(q: &Quat, scale: &[f64; 3]) -> Result<Covariance3> {
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Domain(format!(
            "scales must be positive and finite, got {scale:?}"
        )));
    }
    let r = quat_to_rotation(q)?;
    Ok(covariance_from_rotation_scale(&r, scale))
}

pub(crate) fn covariance_from_rotation_scale(r: &Matrix3<f64>, scale: &[f64; 3]) -> Covariance3 {
    let m = r * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
    Covariance3::from_matrix(&(m * m.transpose()))
}

/// Local affine approximation of the perspective projection at `x_cam`.
/// Returns `None` when the point is in front of the near plane (culled).
pub fn projection_jacobian(x_cam: &Vector3<f64>, camera: &CameraModel) -> Option<Matrix2x3<f64>> {
    let z = x_cam.z;
    if !(z >= NEAR_PLANE) {
        return None;
    }
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    Some(Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * x_cam.x * inv_z2,
        0.0,
        camera.fy * inv_z,
        -camera.fy * x_cam.y * inv_z2,
    ))
}

/// `J W₃ Σ W₃ᵀ Jᵀ` without the low-pass dilation.
pub(crate) fn project_covariance_raw(
    cov: &Covariance3,
    camera: &CameraModel,
    x_world: &Vector3<f64>,
) -> Option<Covariance2> {
    let x_cam = camera.to_camera(x_world);
    let j = projection_jacobian(&x_cam, camera)?;
    let w = camera.rotation();
    let t = j * w;
    let s = t * cov.to_matrix() * t.transpose();
    Some(Covariance2 {
        xx: s[(0, 0)],
        xy: 0.5 * (s[(0, 1)] + s[(1, 0)]),
        yy: s[(1, 1)],
    })
}

/// Projected screen-space covariance including the [`LOW_PASS_DILATION`].
pub fn project_covariance(
    cov: &Covariance3,
    camera: &CameraModel,
    x_world: &Vector3<f64>,
) -> Option<Covariance2> {
    project_covariance_raw(cov, camera, x_world).map(|c| Covariance2 {
        xx: c.xx + LOW_PASS_DILATION,
        xy: c.xy,
        yy: c.yy + LOW_PASS_DILATION,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub culled: bool,
}

pub fn project_point(x_world: &Vector3<f64>, camera: &CameraModel) -> ProjectedPoint {
    let x_cam = camera.to_camera(x_world);
    let z = x_cam.z;
    ProjectedPoint {
        pixel: Vector2::new(
            camera.fx * x_cam.x / z + camera.cx,
            camera.fy * x_cam.y / z + camera.cy,
        ),
        depth: z,
        culled: !(z >= NEAR_PLANE),
    }
}
