//! Camera and rigid-motion primitives shared by the whole pipeline.
//!
//! Conventions, used everywhere: right-handed coordinates, cameras look down
//! +z, image origin at the top-left corner, pixel centers at integer + 0.5.
//! Distances are meters, pixels are pixels.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pinhole intrinsics. `cx`/`cy` are in pixels from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
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
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::InvalidInput("principal point outside image".into()));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }
}

/// SE(3) transform stored as an orthonormal rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                .into_inner();
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Checks RᵀR = I and det R = +1 within `tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        err <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Nearest orthogonal matrix by SVD projection (polar decomposition).
    pub fn orthonormalized(&self) -> Self {
        Self { rotation: nearest_rotation(&self.rotation), translation: self.translation }
    }
}

/// Projects a general 3x3 matrix onto SO(3).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// `a` applied after `b`: (a ∘ b)(x) = a(b(x)).
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Composes a chain left-to-right, re-orthonormalizing every 16 links to
/// bound float drift.
pub fn compose_chain(transforms: &[RigidTransform]) -> RigidTransform {
    let mut acc = RigidTransform::identity();
    for (i, t) in transforms.iter().enumerate() {
        acc = compose(&acc, t);
        if (i + 1) % 16 == 0 {
            acc = acc.orthonormalized();
        }
    }
    acc
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform { rotation: rt, translation: -(rt * t.translation) }
}

/// A calibrated camera in the rig. `world_from_camera` maps camera-frame
/// points into world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub world_from_camera: RigidTransform,
    pub id: u32,
}

impl Camera {
    pub fn camera_from_world(&self) -> RigidTransform {
        invert(&self.world_from_camera)
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.world_from_camera.translation
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.world_from_camera.rotation * Vector3::z()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// True if the continuous pixel coordinate falls inside the image.
    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x < self.intrinsics.width as f64
            && px.y < self.intrinsics.height as f64
    }
}

/// Perspective projection of a world point. Returns the continuous pixel
/// coordinate and the camera-frame depth, which is negative behind the
/// camera; the caller decides what to do with out-of-frustum results.
pub fn project(point: &Vector3<f64>, camera: &Camera) -> (Vector2<f64>, f64) {
    let p = camera.camera_from_world().apply(point);
    let k = &camera.intrinsics;
    let z = if p.z == 0.0 { f64::MIN_POSITIVE } else { p.z };
    let px = Vector2::new(k.fx * p.x / z + k.cx, k.fy * p.y / z + k.cy);
    (px, p.z)
}

/// Inverse of [`project`] for a known depth. Rejects non-positive depths.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, camera: &Camera) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::InvalidInput(format!("unproject requires depth > 0, got {depth}")));
    }
    let k = &camera.intrinsics;
    let cam_point =
        Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
    Ok(camera.world_from_camera.apply(&cam_point))
}

/// Ray through a pixel center, returned as (origin, unit direction) in world
/// coordinates.
pub fn pixel_ray(camera: &Camera, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
    let k = &camera.intrinsics;
    let dir_cam =
        Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0)
            .normalize();
    let dir = camera.world_from_camera.rotation * dir_cam;
    (camera.center(), dir)
}

/// Builds a camera at `position` looking at `target`. `up` picks the image
/// vertical; the camera-frame y axis points down in world terms because the
/// image origin is top-left.
pub fn look_at(
    intrinsics: CameraIntrinsics,
    position: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
    id: u32,
) -> Camera {
    let forward = (target - position).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    Camera { intrinsics, world_from_camera: RigidTransform { rotation, translation: position }, id }
}

#[derive(Serialize, Deserialize)]
struct TransformRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_from_camera: TransformRecord,
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = t.rotation[(r, c)];
            }
        }
        Self { rotation, translation: [t.translation.x, t.translation.y, t.translation.z] }
    }
}

impl From<&TransformRecord> for RigidTransform {
    fn from(rec: &TransformRecord) -> Self {
        let mut rotation = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = rec.rotation[r * 3 + c];
            }
        }
        Self { rotation, translation: Vector3::from_column_slice(&rec.translation) }
    }
}

/// Serializes a camera rig as a JSON array of per-camera records with
/// row-major rotation entries.
pub fn rig_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            id: c.id,
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            world_from_camera: (&c.world_from_camera).into(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("rig serialization cannot fail")
}

pub fn rig_from_json(json: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(json)?;
    let mut cameras = Vec::with_capacity(records.len());
    let mut seen = std::collections::HashSet::new();
    for rec in &records {
        if !seen.insert(rec.id) {
            return Err(Error::InvalidInput(format!("duplicate camera id {}", rec.id)));
        }
        cameras.push(Camera {
            intrinsics: CameraIntrinsics::new(
                rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height,
            )?,
            world_from_camera: (&rec.world_from_camera).into(),
            id: rec.id,
        });
    }
    Ok(cameras)
}
