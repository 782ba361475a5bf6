//! Synthetic multi-view RGBD sequences with analytic ground truth.
//!
//! Scenes are unions of SDF primitives (sphere, capsule, box, torus), each
//! carrying a layer label (human or object), a flat albedo, and a per-frame
//! rigid pose. The human stand-in is an articulated figure of 11 capsules
//! with scripted joint motion. Rendering is per-pixel sphere tracing with
//! Lambert shading under a fixed directional light.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{
    compose, look_at, pixel_ray, rig_from_json, rig_to_json, Camera, CameraIntrinsics,
    RigidTransform,
};
use crate::iso::{extract_iso, IsoGrid};
use crate::mesh::{write_obj, Mesh};
use crate::raster::{
    read_color_png, read_mask_png, read_pfm, write_color_png, write_mask_png, write_pfm,
    ColorImage, DepthMap, MaskImage,
};
use crate::{Error, Result};

pub const SPHERE_TRACE_MAX_STEPS: usize = 256;
pub const SPHERE_TRACE_TOLERANCE: f64 = 1e-4;
pub const SPHERE_TRACE_MAX_DIST: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Human,
    Object,
}

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis along local y, from (0,-half_length,0) to (0,+half_length,0).
    Capsule { half_length: f64, radius: f64 },
    Box { half_extents: Vector3<f64> },
    /// Ring in the local xz plane.
    Torus { major: f64, minor: f64 },
}

impl Shape {
    /// Exact signed distance in the primitive's local frame.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Capsule { half_length, radius } => {
                let y = p.y.clamp(-half_length, *half_length);
                (p - Vector3::new(0.0, y, 0.0)).norm() - radius
            }
            Shape::Box { half_extents } => {
                let q = p.abs() - half_extents;
                let outside = q.sup(&Vector3::zeros()).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Shape::Torus { major, minor } => {
                let qx = (p.x * p.x + p.z * p.z).sqrt() - major;
                (qx * qx + p.y * p.y).sqrt() - minor
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f32; 3],
    pub layer: Layer,
}

/// A scripted scene: primitives plus one rigid pose per primitive per frame.
#[derive(Debug, Clone)]
pub struct SdfScene {
    pub primitives: Vec<Primitive>,
    /// poses[frame][primitive] = world_from_local.
    pub poses: Vec<Vec<RigidTransform>>,
}

impl SdfScene {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (f, frame) in self.poses.iter().enumerate() {
            if frame.len() != self.primitives.len() {
                return Err(Error::InvalidInput(format!(
                    "frame {f} has {} poses for {} primitives",
                    frame.len(),
                    self.primitives.len()
                )));
            }
        }
        Ok(())
    }

    /// Index of the first object-layer primitive, if any. Scenes carry at
    /// most one rigid object; its pose is the scene's ground-truth track.
    pub fn object_index(&self) -> Option<usize> {
        self.primitives.iter().position(|p| p.layer == Layer::Object)
    }

    pub fn object_pose(&self, frame: usize) -> Option<RigidTransform> {
        self.object_index().map(|i| self.poses[frame][i])
    }
}

/// Signed distance of the scene union at `point`, with the label and albedo
/// of the nearest primitive.
pub fn scene_sdf(scene: &SdfScene, frame: usize, point: &Vector3<f64>) -> (f64, Layer, [f32; 3]) {
    debug_assert!(frame < scene.poses.len(), "frame outside pose script");
    let mut best = (f64::INFINITY, Layer::Human, [0.0f32; 3]);
    for (prim, pose) in scene.primitives.iter().zip(&scene.poses[frame]) {
        let local = crate::geom::invert(pose).apply(point);
        let d = prim.shape.sdf(&local);
        if d < best.0 {
            best = (d, prim.layer, prim.albedo);
        }
    }
    best
}

/// Layer-restricted signed distance (analytic per-layer ground truth).
pub fn layer_sdf(scene: &SdfScene, frame: usize, layer: Layer, point: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for (prim, pose) in scene.primitives.iter().zip(&scene.poses[frame]) {
        if prim.layer != layer {
            continue;
        }
        let local = crate::geom::invert(pose).apply(point);
        best = best.min(prim.shape.sdf(&local));
    }
    best
}

fn scene_normal(scene: &SdfScene, frame: usize, p: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-5;
    let dx = scene_sdf(scene, frame, &(p + Vector3::new(h, 0.0, 0.0))).0
        - scene_sdf(scene, frame, &(p - Vector3::new(h, 0.0, 0.0))).0;
    let dy = scene_sdf(scene, frame, &(p + Vector3::new(0.0, h, 0.0))).0
        - scene_sdf(scene, frame, &(p - Vector3::new(0.0, h, 0.0))).0;
    let dz = scene_sdf(scene, frame, &(p + Vector3::new(0.0, 0.0, h))).0
        - scene_sdf(scene, frame, &(p - Vector3::new(0.0, 0.0, h))).0;
    let n = Vector3::new(dx, dy, dz);
    let norm = n.norm();
    if norm > 1e-12 {
        n / norm
    } else {
        Vector3::y()
    }
}

const LIGHT_DIR: [f64; 3] = [0.35, 0.85, 0.4];
const AMBIENT: f64 = 0.4;
const DIFFUSE: f64 = 0.6;

/// Per-camera synthetic RGBD + layer masks for one frame.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub human_mask: MaskImage,
    pub object_mask: MaskImage,
}

/// Sphere-traces the scene into `camera`. Depth is the camera-frame z of the
/// hit point (0 where nothing is hit); optional zero-mean Gaussian noise with
/// `noise_sigma` meters is added to valid depths, seeded per pixel so output
/// is deterministic under any parallel schedule.
pub fn raycast(
    scene: &SdfScene,
    frame: usize,
    camera: &Camera,
    noise_sigma: f64,
    seed: u64,
) -> ViewRender {
    let w = camera.width();
    let h = camera.height();
    let light = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]).normalize();
    let cam_from_world = camera.camera_from_world();

    let rows: Vec<Vec<(f32, [f32; 3], Option<Layer>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let (origin, dir) = pixel_ray(camera, x, y);
                let mut t = 0.0f64;
                let mut hit = None;
                for _ in 0..SPHERE_TRACE_MAX_STEPS {
                    let p = origin + dir * t;
                    let (d, layer, albedo) = scene_sdf(scene, frame, &p);
                    if d < SPHERE_TRACE_TOLERANCE {
                        // Tighten the hit: keep sliding by the residual SDF.
                        for _ in 0..8 {
                            let p = origin + dir * t;
                            let (d, ..) = scene_sdf(scene, frame, &p);
                            t += d;
                        }
                        hit = Some((t, layer, albedo));
                        break;
                    }
                    t += d;
                    if t > SPHERE_TRACE_MAX_DIST {
                        break;
                    }
                }
                match hit {
                    Some((t, layer, albedo)) => {
                        let p = origin + dir * t;
                        let n = scene_normal(scene, frame, &p);
                        let shade = (AMBIENT + DIFFUSE * n.dot(&light).max(0.0)) as f32;
                        let color = [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade];
                        let mut z = cam_from_world.apply(&p).z;
                        if noise_sigma > 0.0 {
                            z += noise_sigma
                                * gaussian_hash(seed, frame as u64, camera.id as u64, (y * w + x) as u64);
                        }
                        row.push((z.max(1e-6) as f32, color, Some(layer)));
                    }
                    None => row.push((0.0, [0.0; 3], None)),
                }
            }
            row
        })
        .collect();

    let mut out = ViewRender {
        color: ColorImage::new(w, h),
        depth: DepthMap::new(w, h, camera.id),
        human_mask: MaskImage::new(w, h),
        object_mask: MaskImage::new(w, h),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (z, color, layer)) in row.into_iter().enumerate() {
            *out.depth.at_mut(x, y) = z;
            *out.color.at_mut(x, y) = color;
            match layer {
                Some(Layer::Human) => out.human_mask.set(x, y, true),
                Some(Layer::Object) => out.object_mask.set(x, y, true),
                None => {}
            }
        }
    }
    out
}

/// Deterministic standard-normal sample from a 4-word key (splitmix64 based
/// Box-Muller).
fn gaussian_hash(a: u64, b: u64, c: u64, d: u64) -> f64 {
    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E3779B97F4A7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
        x ^ (x >> 31)
    }
    let k = splitmix(a ^ splitmix(b ^ splitmix(c ^ splitmix(d))));
    let u1 = ((splitmix(k) >> 11) as f64 + 1.0) / (u64::MAX >> 11) as f64;
    let u2 = (splitmix(k.wrapping_add(1)) >> 11) as f64 / (u64::MAX >> 11) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Extracted ground-truth mesh for one layer by isosurfacing the analytic
/// SDF on a banded grid.
pub fn gt_layer_mesh(scene: &SdfScene, frame: usize, layer: Layer, voxel: f64) -> Mesh {
    // Bounding box of the layer's primitives, padded.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (prim, pose) in scene.primitives.iter().zip(&scene.poses[frame]) {
        if prim.layer != layer {
            continue;
        }
        let r = match prim.shape {
            Shape::Sphere { radius } => radius,
            Shape::Capsule { half_length, radius } => half_length + radius,
            Shape::Box { half_extents } => half_extents.norm(),
            Shape::Torus { major, minor } => major + minor,
        };
        lo = lo.inf(&(pose.translation - Vector3::repeat(r)));
        hi = hi.sup(&(pose.translation + Vector3::repeat(r)));
    }
    if !lo.x.is_finite() {
        return Mesh::default();
    }
    let pad = 4.0 * voxel;
    lo -= Vector3::repeat(pad);
    hi += Vector3::repeat(pad);
    let dims = [
        ((hi.x - lo.x) / voxel).ceil() as usize + 1,
        ((hi.y - lo.y) / voxel).ceil() as usize + 1,
        ((hi.z - lo.z) / voxel).ceil() as usize + 1,
    ];
    let sdf = |p: &Vector3<f64>| layer_sdf(scene, frame, layer, p);
    let grid = IsoGrid::from_sdf_banded(lo, voxel, dims, sdf);
    extract_iso(
        &grid,
        0.0,
        |p| scene_sdf(scene, frame, p).2,
        |p| {
            let h = 1e-5;
            Vector3::new(
                sdf(&(p + Vector3::new(h, 0.0, 0.0))) - sdf(&(p - Vector3::new(h, 0.0, 0.0))),
                sdf(&(p + Vector3::new(0.0, h, 0.0))) - sdf(&(p - Vector3::new(0.0, h, 0.0))),
                sdf(&(p + Vector3::new(0.0, 0.0, h))) - sdf(&(p - Vector3::new(0.0, 0.0, h))),
            )
        },
    )
}

// --- camera rigs -------------------------------------------------------------

pub fn default_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    // ~45 degree vertical field of view.
    let fy = height as f64 / (2.0 * (22.5f64.to_radians()).tan());
    CameraIntrinsics::new(fy, fy, width as f64 / 2.0, height as f64 / 2.0, width, height)
        .expect("valid synthetic intrinsics")
}

/// `count` cameras uniformly on a horizontal circle, numbered 0..count,
/// looking at `target`.
pub fn ring_rig(
    count: usize,
    radius: f64,
    height: f64,
    target: Vector3<f64>,
    intrinsics: CameraIntrinsics,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let angle = i as f64 / count as f64 * std::f64::consts::TAU;
            let pos = Vector3::new(radius * angle.cos(), height, radius * angle.sin());
            look_at(intrinsics, pos, target, Vector3::y(), i as u32)
        })
        .collect()
}

/// Ring tilted about the x axis so some cameras look down and others up;
/// used where pole coverage matters for geometry oracles.
pub fn tilted_ring_rig(
    count: usize,
    radius: f64,
    center_height: f64,
    tilt_radians: f64,
    target: Vector3<f64>,
    intrinsics: CameraIntrinsics,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let angle = i as f64 / count as f64 * std::f64::consts::TAU;
            let flat = Vector3::new(radius * angle.cos(), 0.0, radius * angle.sin());
            let tilt = RigidTransform::from_axis_angle(Vector3::x(), tilt_radians, Vector3::zeros());
            let pos = tilt.apply(&flat) + Vector3::new(0.0, center_height, 0.0);
            look_at(intrinsics, pos, target, Vector3::y(), i as u32)
        })
        .collect()
}

/// Keeps only cameras with the given ids (for camera-count ablations).
pub fn subset_rig(rig: &[Camera], ids: &[u32]) -> Vec<Camera> {
    rig.iter().filter(|c| ids.contains(&c.id)).copied().collect()
}

// --- scripted scenes ----------------------------------------------------------

/// Joint-motion parameters for the capsule figure.
#[derive(Debug, Clone, Copy)]
pub struct HumanMotion {
    pub arm_swing: f64,
    pub leg_swing: f64,
    pub sway: f64,
    pub period_frames: f64,
}

impl HumanMotion {
    pub fn gentle() -> Self {
        Self { arm_swing: 0.35, leg_swing: 0.18, sway: 0.05, period_frames: 48.0 }
    }

    pub fn still() -> Self {
        Self { arm_swing: 0.0, leg_swing: 0.0, sway: 0.0, period_frames: 48.0 }
    }
}

const SKIN: [f32; 3] = [0.82, 0.62, 0.5];
const SHIRT: [f32; 3] = [0.25, 0.45, 0.75];
const PANTS: [f32; 3] = [0.3, 0.3, 0.35];

/// The 11-capsule articulated figure: torso, head, and two-segment limbs.
/// Returns primitives plus a pose generator per frame.
pub fn capsule_human_primitives() -> Vec<Primitive> {
    let cap = |hl: f64, r: f64, albedo: [f32; 3]| Primitive {
        shape: Shape::Capsule { half_length: hl, radius: r },
        albedo,
        layer: Layer::Human,
    };
    vec![
        cap(0.24, 0.15, SHIRT),  // 0 torso
        cap(0.02, 0.10, SKIN),   // 1 head
        cap(0.12, 0.05, SHIRT),  // 2 left upper arm
        cap(0.11, 0.04, SKIN),   // 3 left lower arm
        cap(0.12, 0.05, SHIRT),  // 4 right upper arm
        cap(0.11, 0.04, SKIN),   // 5 right lower arm
        cap(0.16, 0.07, PANTS),  // 6 left upper leg
        cap(0.15, 0.055, PANTS), // 7 left lower leg
        cap(0.16, 0.07, PANTS),  // 8 right upper leg
        cap(0.15, 0.055, PANTS), // 9 right lower leg
        cap(0.05, 0.065, SHIRT), // 10 pelvis bridge
    ]
}

/// Forward kinematics for the capsule figure at a given frame.
pub fn capsule_human_poses(frame: usize, motion: &HumanMotion) -> Vec<RigidTransform> {
    let t = frame as f64 / motion.period_frames * std::f64::consts::TAU;
    let sway = motion.sway * t.sin();
    let arm = motion.arm_swing * t.sin();
    let leg = motion.leg_swing * (t + std::f64::consts::FRAC_PI_2).sin();

    let rot_x = |a: f64| RigidTransform::from_axis_angle(Vector3::x(), a, Vector3::zeros());
    let rot_z = |a: f64| RigidTransform::from_axis_angle(Vector3::z(), a, Vector3::zeros());
    let shift = RigidTransform::from_translation;

    // Root: pelvis center, with a gentle sway about z.
    let root = compose(&shift(Vector3::new(0.0, 0.98, 0.0)), &rot_z(sway));

    // Capsule local axis is y; "segment" transforms place the capsule so its
    // top cap sits at the joint and it extends downward.
    let segment = |joint: &RigidTransform, bend: RigidTransform, half_len: f64| -> RigidTransform {
        compose(&compose(joint, &bend), &shift(Vector3::new(0.0, -half_len, 0.0)))
    };

    let torso = compose(&root, &shift(Vector3::new(0.0, 0.32, 0.0)));
    let head = compose(&root, &shift(Vector3::new(0.0, 0.68, 0.0)));
    let pelvis = root;

    let l_shoulder = compose(&torso, &shift(Vector3::new(-0.20, 0.16, 0.0)));
    let r_shoulder = compose(&torso, &shift(Vector3::new(0.20, 0.16, 0.0)));
    let l_hip = compose(&root, &shift(Vector3::new(-0.10, -0.05, 0.0)));
    let r_hip = compose(&root, &shift(Vector3::new(0.10, -0.05, 0.0)));

    // Opposite-phase arm swing about x, slight outward tilt about z.
    let l_upper_arm = segment(&l_shoulder, compose(&rot_z(0.12), &rot_x(arm)), 0.12);
    let r_upper_arm = segment(&r_shoulder, compose(&rot_z(-0.12), &rot_x(-arm)), 0.12);
    let l_elbow = compose(&l_upper_arm, &shift(Vector3::new(0.0, -0.13, 0.0)));
    let r_elbow = compose(&r_upper_arm, &shift(Vector3::new(0.0, -0.13, 0.0)));
    let elbow_bend = 0.35 + 0.5 * arm.abs();
    let l_lower_arm = segment(&l_elbow, rot_x(elbow_bend), 0.11);
    let r_lower_arm = segment(&r_elbow, rot_x(elbow_bend), 0.11);

    let l_upper_leg = segment(&l_hip, rot_x(leg), 0.17);
    let r_upper_leg = segment(&r_hip, rot_x(-leg), 0.17);
    let l_knee = compose(&l_upper_leg, &shift(Vector3::new(0.0, -0.18, 0.0)));
    let r_knee = compose(&r_upper_leg, &shift(Vector3::new(0.0, -0.18, 0.0)));
    let knee_bend = -(0.15 + 0.4 * leg.abs());
    let l_lower_leg = segment(&l_knee, rot_x(knee_bend), 0.15);
    let r_lower_leg = segment(&r_knee, rot_x(knee_bend), 0.15);

    vec![
        torso,
        head,
        l_upper_arm,
        l_lower_arm,
        r_upper_arm,
        r_lower_arm,
        l_upper_leg,
        l_lower_leg,
        r_upper_leg,
        r_lower_leg,
        pelvis,
    ]
}

const OBJECT_ALBEDO: [f32; 3] = [0.85, 0.55, 0.15];

/// Standard interaction scene: the capsule human plus a box object orbiting
/// at `orbit_radius`, rotating slowly about its own axis.
pub fn standard_scene(frames: usize, motion: HumanMotion) -> SdfScene {
    let mut primitives = capsule_human_primitives();
    primitives.push(Primitive {
        shape: Shape::Box { half_extents: Vector3::new(0.16, 0.11, 0.08) },
        albedo: OBJECT_ALBEDO,
        layer: Layer::Object,
    });
    let poses = (0..frames)
        .map(|f| {
            let mut frame_poses = capsule_human_poses(f, &motion);
            let orbit = f as f64 * 1.6f64.to_radians() + 0.4;
            let spin = f as f64 * 2.0f64.to_radians();
            let pos = Vector3::new(0.85 * orbit.cos(), 1.02 + 0.05 * (f as f64 * 0.1).sin(), 0.85 * orbit.sin());
            let pose = compose(
                &RigidTransform::from_translation(pos),
                &RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), spin, Vector3::zeros()),
            );
            frame_poses.push(pose);
            frame_poses
        })
        .collect();
    SdfScene { primitives, poses }
}

/// Occlusion scene: a flat panel object first orbits the human fully visible
/// (populating temporal observations), then parks between the human and the
/// azimuth-zero cameras, hiding the torso front from every viewpoint and
/// itself from the far-side cameras.
pub fn occlusion_scene(frames: usize, orbit_frames: usize) -> SdfScene {
    let mut primitives = capsule_human_primitives();
    primitives.push(Primitive {
        shape: Shape::Box { half_extents: Vector3::new(0.24, 0.19, 0.025) },
        albedo: OBJECT_ALBEDO,
        layer: Layer::Object,
    });
    let motion = HumanMotion { arm_swing: 0.15, leg_swing: 0.08, sway: 0.03, period_frames: 48.0 };
    let poses = (0..frames)
        .map(|f| {
            let mut frame_poses = capsule_human_poses(f, &motion);
            let pose = if f < orbit_frames {
                // Full orbit at a radius that never occludes the torso.
                let a = f as f64 / orbit_frames as f64 * std::f64::consts::TAU;
                let pos = Vector3::new(1.05 * a.cos(), 1.05, 1.05 * a.sin());
                // Face the human while orbiting.
                compose(
                    &RigidTransform::from_translation(pos),
                    &RigidTransform::from_axis_angle(Vector3::y(), -a, Vector3::zeros()),
                )
            } else {
                // Parked close in front of the torso on the +x side, facing it.
                let settle = ((f - orbit_frames) as f64 * 0.05).min(1.0);
                let pos = Vector3::new(0.42 + 0.02 * (1.0 - settle), 1.18, 0.0);
                compose(
                    &RigidTransform::from_translation(pos),
                    &RigidTransform::from_axis_angle(Vector3::y(), std::f64::consts::FRAC_PI_2, Vector3::zeros()),
                )
            };
            frame_poses.push(pose);
            frame_poses
        })
        .collect();
    SdfScene { primitives, poses }
}

/// Single-primitive scene helpers for unit tests and tracking harnesses.
pub fn lone_object_scene(shape: Shape, pose_per_frame: Vec<RigidTransform>) -> SdfScene {
    SdfScene {
        primitives: vec![Primitive { shape, albedo: OBJECT_ALBEDO, layer: Layer::Object }],
        poses: pose_per_frame.into_iter().map(|p| vec![p]).collect(),
    }
}

pub fn lone_human_scene(shape: Shape, pose_per_frame: Vec<RigidTransform>) -> SdfScene {
    SdfScene {
        primitives: vec![Primitive { shape, albedo: SHIRT, layer: Layer::Human }],
        poses: pose_per_frame.into_iter().map(|p| vec![p]).collect(),
    }
}

// --- dataset emission ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmitOptions {
    pub noise_sigma: f64,
    pub seed: u64,
    /// Grid step for ground-truth meshes.
    pub gt_voxel: f64,
    /// Ground-truth meshes are written every this many frames (they dominate
    /// dataset size).
    pub gt_mesh_every: usize,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self { noise_sigma: 0.0, seed: 1, gt_voxel: 0.01, gt_mesh_every: 5 }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    frames: usize,
    seed: u64,
    noise_sigma: f64,
    gt_voxel: f64,
    gt_mesh_every: usize,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    frame: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

fn pose_to_record(frame: usize, t: &RigidTransform) -> PoseRecord {
    let mut rotation = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            rotation[r * 3 + c] = t.rotation[(r, c)];
        }
    }
    PoseRecord {
        frame,
        rotation,
        translation: [t.translation.x, t.translation.y, t.translation.z],
    }
}

fn record_to_pose(rec: &PoseRecord) -> RigidTransform {
    let mut rotation = nalgebra::Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            rotation[(r, c)] = rec.rotation[r * 3 + c];
        }
    }
    RigidTransform { rotation, translation: Vector3::from_column_slice(&rec.translation) }
}

pub fn frame_dir(root: &Path, frame: usize) -> PathBuf {
    root.join(format!("frame_{frame:04}"))
}

/// Renders and writes the full sequence: per-frame per-camera color (PNG),
/// depth (PFM), layer masks (PNG), plus ground-truth meshes (OBJ), object
/// poses (JSON), and the rigs. Deterministic for a given seed.
pub fn emit_sequence(
    scene: &SdfScene,
    rig: &[Camera],
    eval_rig: &[Camera],
    frames: usize,
    out_dir: &Path,
    options: &EmitOptions,
) -> Result<()> {
    scene.validate()?;
    if frames > scene.frame_count() {
        return Err(Error::InvalidInput(format!(
            "scene scripts {} frames, requested {frames}",
            scene.frame_count()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("rig.json"), rig_to_json(rig))
        .map_err(|e| Error::io(out_dir.join("rig.json"), e))?;
    if !eval_rig.is_empty() {
        std::fs::write(out_dir.join("eval_rig.json"), rig_to_json(eval_rig))
            .map_err(|e| Error::io(out_dir.join("eval_rig.json"), e))?;
    }
    let meta = DatasetMeta {
        frames,
        seed: options.seed,
        noise_sigma: options.noise_sigma,
        gt_voxel: options.gt_voxel,
        gt_mesh_every: options.gt_mesh_every,
    };
    std::fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(out_dir.join("meta.json"), e))?;

    let gt_dir = out_dir.join("gt");
    std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;

    let mut pose_records = Vec::new();
    for frame in 0..frames {
        let dir = frame_dir(out_dir, frame);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for cam in rig {
            let view = raycast(scene, frame, cam, options.noise_sigma, options.seed);
            write_color_png(&view.color, &dir.join(format!("cam_{}.png", cam.id)))?;
            write_pfm(&view.depth, &dir.join(format!("cam_{}.pfm", cam.id)))?;
            write_mask_png(&view.human_mask, &dir.join(format!("cam_{}.human.png", cam.id)))?;
            write_mask_png(&view.object_mask, &dir.join(format!("cam_{}.object.png", cam.id)))?;
        }
        for cam in eval_rig {
            // Held-out views: clean color + depth for evaluation.
            let view = raycast(scene, frame, cam, 0.0, options.seed);
            write_color_png(&view.color, &dir.join(format!("eval_{}.png", cam.id)))?;
            write_pfm(&view.depth, &dir.join(format!("eval_{}.pfm", cam.id)))?;
            write_mask_png(&view.human_mask, &dir.join(format!("eval_{}.human.png", cam.id)))?;
            write_mask_png(&view.object_mask, &dir.join(format!("eval_{}.object.png", cam.id)))?;
        }
        if let Some(pose) = scene.object_pose(frame) {
            pose_records.push(pose_to_record(frame, &pose));
        }
        if frame % options.gt_mesh_every == 0 {
            let human = gt_layer_mesh(scene, frame, Layer::Human, options.gt_voxel);
            if !human.is_empty() {
                write_obj(&human, &gt_dir.join(format!("human_{frame:04}.obj")))?;
            }
            let object = gt_layer_mesh(scene, frame, Layer::Object, options.gt_voxel);
            if !object.is_empty() {
                write_obj(&object, &gt_dir.join(format!("object_{frame:04}.obj")))?;
            }
        }
    }
    std::fs::write(gt_dir.join("poses.json"), serde_json::to_string_pretty(&pose_records)?)
        .map_err(|e| Error::io(gt_dir.join("poses.json"), e))?;
    Ok(())
}

/// One frame's multi-view input as loaded from disk (or built in memory).
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub frame: usize,
    pub cameras: Vec<Camera>,
    pub views: Vec<ViewRender>,
    pub gt_object_pose: Option<RigidTransform>,
}

impl FrameBundle {
    pub fn from_scene(
        scene: &SdfScene,
        frame: usize,
        rig: &[Camera],
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let views = rig
            .iter()
            .map(|cam| raycast(scene, frame, cam, noise_sigma, seed))
            .collect();
        Self {
            frame,
            cameras: rig.to_vec(),
            views,
            gt_object_pose: scene.object_pose(frame),
        }
    }

    pub fn view_for(&self, camera_id: u32) -> Option<&ViewRender> {
        self.cameras
            .iter()
            .position(|c| c.id == camera_id)
            .map(|i| &self.views[i])
    }
}

/// On-disk dataset handle.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rig: Vec<Camera>,
    pub eval_rig: Vec<Camera>,
    pub frames: usize,
    pub gt_mesh_every: usize,
    pub gt_poses: Vec<Option<RigidTransform>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let rig_json = std::fs::read_to_string(root.join("rig.json"))
            .map_err(|e| Error::io(root.join("rig.json"), e))?;
        let rig = rig_from_json(&rig_json)?;
        let eval_rig = match std::fs::read_to_string(root.join("eval_rig.json")) {
            Ok(json) => rig_from_json(&json)?,
            Err(_) => Vec::new(),
        };
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(root.join("meta.json"))
                .map_err(|e| Error::io(root.join("meta.json"), e))?,
        )?;
        let mut gt_poses = vec![None; meta.frames];
        if let Ok(text) = std::fs::read_to_string(root.join("gt/poses.json")) {
            let records: Vec<PoseRecord> = serde_json::from_str(&text)?;
            for rec in &records {
                if rec.frame < meta.frames {
                    gt_poses[rec.frame] = Some(record_to_pose(rec));
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            rig,
            eval_rig,
            frames: meta.frames,
            gt_mesh_every: meta.gt_mesh_every,
            gt_poses,
        })
    }

    /// Loads a frame restricted to the given camera ids (all when empty).
    pub fn load_frame(&self, frame: usize, camera_ids: &[u32]) -> Result<FrameBundle> {
        let dir = frame_dir(&self.root, frame);
        let cameras: Vec<Camera> = if camera_ids.is_empty() {
            self.rig.clone()
        } else {
            subset_rig(&self.rig, camera_ids)
        };
        let mut views = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let color = read_color_png(&dir.join(format!("cam_{}.png", cam.id)))?;
            let depth = read_pfm(&dir.join(format!("cam_{}.pfm", cam.id)), cam.id)?;
            let human_mask = read_mask_png(&dir.join(format!("cam_{}.human.png", cam.id)))?;
            let object_mask = read_mask_png(&dir.join(format!("cam_{}.object.png", cam.id)))?;
            views.push(ViewRender { color, depth, human_mask, object_mask });
        }
        Ok(FrameBundle {
            frame,
            cameras,
            views,
            gt_object_pose: self.gt_poses.get(frame).copied().flatten(),
        })
    }

    /// Loads a held-out evaluation view (clean color + depth + masks).
    pub fn load_eval_view(&self, frame: usize, camera_id: u32) -> Result<(Camera, ViewRender)> {
        let cam = self
            .eval_rig
            .iter()
            .find(|c| c.id == camera_id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no eval camera {camera_id}")))?;
        let dir = frame_dir(&self.root, frame);
        let color = read_color_png(&dir.join(format!("eval_{camera_id}.png")))?;
        let depth = read_pfm(&dir.join(format!("eval_{camera_id}.pfm")), camera_id)?;
        let human_mask = read_mask_png(&dir.join(format!("eval_{camera_id}.human.png")))?;
        let object_mask = read_mask_png(&dir.join(format!("eval_{camera_id}.object.png")))?;
        Ok((cam, ViewRender { color, depth, human_mask, object_mask }))
    }

    pub fn gt_mesh(&self, frame: usize, layer: Layer) -> Result<Mesh> {
        let name = match layer {
            Layer::Human => format!("gt/human_{frame:04}.obj"),
            Layer::Object => format!("gt/object_{frame:04}.obj"),
        };
        crate::mesh::read_obj(&self.root.join(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, unproject};
    use nalgebra::Vector2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unit_sphere_distances() {
        let scene = lone_object_scene(
            Shape::Sphere { radius: 1.0 },
            vec![RigidTransform::identity()],
        );
        let (d, layer, _) = scene_sdf(&scene, 0, &Vector3::new(0.0, 0.0, 2.0));
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(layer, Layer::Object);
        let (d, ..) = scene_sdf(&scene, 0, &Vector3::zeros());
        assert!((d + 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_and_capsule_surface_samples_have_zero_sdf() {
        let mut rng = StdRng::seed_from_u64(3);
        let b = Shape::Box { half_extents: Vector3::new(0.3, 0.2, 0.1) };
        for _ in 0..500 {
            // Random point on a random face.
            let face = rng.gen_range(0..6usize);
            let u = rng.gen::<f64>() * 2.0 - 1.0;
            let v = rng.gen::<f64>() * 2.0 - 1.0;
            let he = Vector3::new(0.3, 0.2, 0.1);
            let p = match face {
                0 => Vector3::new(he.x, u * he.y, v * he.z),
                1 => Vector3::new(-he.x, u * he.y, v * he.z),
                2 => Vector3::new(u * he.x, he.y, v * he.z),
                3 => Vector3::new(u * he.x, -he.y, v * he.z),
                4 => Vector3::new(u * he.x, v * he.y, he.z),
                _ => Vector3::new(u * he.x, v * he.y, -he.z),
            };
            assert!(b.sdf(&p).abs() < 1e-6, "box sdf {} at surface", b.sdf(&p));
        }
        let c = Shape::Capsule { half_length: 0.2, radius: 0.07 };
        for _ in 0..500 {
            // Cylinder band or caps.
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let p = if rng.gen::<bool>() {
                let y = rng.gen::<f64>() * 0.4 - 0.2;
                Vector3::new(0.07 * theta.cos(), y, 0.07 * theta.sin())
            } else {
                let phi = rng.gen::<f64>() * std::f64::consts::FRAC_PI_2;
                let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                Vector3::new(
                    0.07 * phi.cos() * theta.cos(),
                    s * (0.2 + 0.07 * phi.sin()),
                    0.07 * phi.cos() * theta.sin(),
                )
            };
            assert!(c.sdf(&p).abs() < 1e-6, "capsule sdf {} at surface", c.sdf(&p));
        }
    }

    fn axis_camera(distance: f64) -> Camera {
        look_at(
            default_intrinsics(64, 48),
            Vector3::new(0.0, 0.0, -distance),
            Vector3::zeros(),
            Vector3::y(),
            0,
        )
    }

    #[test]
    fn ray_missing_everything_gives_zero_depth_and_empty_masks() {
        let scene = lone_object_scene(
            Shape::Sphere { radius: 0.1 },
            vec![RigidTransform::from_translation(Vector3::new(5.0, 5.0, 5.0))],
        );
        let cam = axis_camera(2.0);
        let view = raycast(&scene, 0, &cam, 0.0, 1);
        assert_eq!(view.depth.valid_count(), 0);
        assert_eq!(view.human_mask.count(), 0);
        assert_eq!(view.object_mask.count(), 0);
    }

    #[test]
    fn sphere_center_pixel_depth_matches_closed_form() {
        let scene = lone_object_scene(
            Shape::Sphere { radius: 1.0 },
            vec![RigidTransform::identity()],
        );
        let cam = axis_camera(2.0);
        let view = raycast(&scene, 0, &cam, 0.0, 1);
        let d = view.depth.at(32, 24);
        assert!(
            (d as f64 - 1.0).abs() < 1e-4,
            "center depth {d} should be 1.0 within the trace tolerance"
        );
    }

    #[test]
    fn sphere_depth_matches_analytic_over_silhouette_interior() {
        let radius = 0.6;
        let scene =
            lone_object_scene(Shape::Sphere { radius }, vec![RigidTransform::identity()]);
        let cam = axis_camera(2.2);
        let view = raycast(&scene, 0, &cam, 0.0, 1);
        let mut max_err = 0.0f64;
        let mut checked = 0;
        for y in 0..48 {
            for x in 0..64 {
                let (origin, dir) = pixel_ray(&cam, x, y);
                // Analytic ray-sphere intersection.
                let oc = origin;
                let b = oc.dot(&dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    continue;
                }
                let t = -b - disc.sqrt();
                let hit = origin + dir * t;
                let cosine = (-hit.normalize()).dot(&dir);
                if cosine < 0.25 {
                    continue; // grazing band excluded
                }
                let analytic_z = cam.camera_from_world().apply(&hit).z;
                let got = view.depth.at(x, y) as f64;
                assert!(got > 0.0, "expected hit inside silhouette at {x},{y}");
                max_err = max_err.max((got - analytic_z).abs());
                checked += 1;
            }
        }
        assert!(checked > 100);
        assert!(max_err < 1e-3, "max depth error {max_err}");
    }

    #[test]
    fn depth_pixels_unproject_onto_surface() {
        let scene = standard_scene(2, HumanMotion::gentle());
        let cam = ring_rig(6, 2.5, 1.0, Vector3::new(0.0, 1.0, 0.0), default_intrinsics(64, 48))
            [1];
        let view = raycast(&scene, 1, &cam, 0.0, 1);
        for y in 0..48 {
            for x in 0..64 {
                let d = view.depth.at(x, y);
                if d <= 0.0 {
                    continue;
                }
                let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let p = unproject(&px, d as f64, &cam).unwrap();
                let (sdf, ..) = scene_sdf(&scene, 1, &p);
                assert!(
                    sdf.abs() < 2.0 * SPHERE_TRACE_TOLERANCE,
                    "unprojected point off surface by {sdf}"
                );
            }
        }
    }

    #[test]
    fn masks_are_disjoint_and_cover_valid_depth() {
        let scene = standard_scene(2, HumanMotion::gentle());
        let rig = ring_rig(6, 2.5, 1.0, Vector3::new(0.0, 1.0, 0.0), default_intrinsics(64, 48));
        for cam in &rig {
            let view = raycast(&scene, 0, cam, 0.0, 1);
            assert!(crate::raster::masks_partition_depth(
                &view.depth,
                &view.human_mask,
                &view.object_mask
            ));
        }
    }

    #[test]
    fn projection_of_object_center_lands_in_object_mask() {
        let scene = standard_scene(3, HumanMotion::still());
        let rig = ring_rig(6, 2.5, 1.0, Vector3::new(0.0, 1.0, 0.0), default_intrinsics(96, 72));
        let pose = scene.object_pose(2).unwrap();
        let center = pose.translation;
        let mut seen = 0;
        for cam in &rig {
            let (px, depth) = project(&center, cam);
            if depth <= 0.0 || !cam.contains_pixel(&px) {
                continue;
            }
            if view_mask_hit(&raycast(&scene, 2, cam, 0.0, 1), px) {
                seen += 1;
            }
        }
        assert!(seen >= 3, "object center visible as object in only {seen} views");
    }

    fn view_mask_hit(view: &ViewRender, px: Vector2<f64>) -> bool {
        view.object_mask.lookup(&px)
    }

    #[test]
    fn emit_sequence_writes_expected_files_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let scene = standard_scene(3, HumanMotion::gentle());
        let rig = ring_rig(2, 2.5, 1.0, Vector3::new(0.0, 1.0, 0.0), default_intrinsics(32, 24));
        let options = EmitOptions {
            noise_sigma: 0.002,
            seed: 7,
            gt_voxel: 0.02,
            gt_mesh_every: 2,
        };
        let out_a = dir.path().join("a");
        emit_sequence(&scene, &rig, &[], 3, &out_a, &options).unwrap();
        for f in 0..3 {
            for cam in 0..2 {
                for ext in ["png", "pfm", "human.png", "object.png"] {
                    let p = frame_dir(&out_a, f).join(format!("cam_{cam}.{ext}"));
                    assert!(p.exists(), "missing {p:?}");
                }
            }
        }
        assert!(out_a.join("gt/poses.json").exists());
        assert!(out_a.join("gt/human_0000.obj").exists());

        let out_b = dir.path().join("b");
        emit_sequence(&scene, &rig, &[], 3, &out_b, &options).unwrap();
        for f in 0..3 {
            for cam in 0..2 {
                let pa = frame_dir(&out_a, f).join(format!("cam_{cam}.pfm"));
                let pb = frame_dir(&out_b, f).join(format!("cam_{cam}.pfm"));
                assert_eq!(
                    std::fs::read(pa).unwrap(),
                    std::fs::read(pb).unwrap(),
                    "PFM files differ between identical runs"
                );
            }
        }
    }

    #[test]
    fn gt_poses_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scene = standard_scene(4, HumanMotion::gentle());
        let rig = ring_rig(1, 2.5, 1.0, Vector3::new(0.0, 1.0, 0.0), default_intrinsics(16, 12));
        let out = dir.path().join("d");
        emit_sequence(&scene, &rig, &[], 4, &out, &EmitOptions::default()).unwrap();
        let ds = Dataset::open(&out).unwrap();
        for f in 0..4 {
            let expected = scene.object_pose(f).unwrap();
            let got = ds.gt_poses[f].unwrap();
            assert_eq!(expected.rotation, got.rotation);
            assert_eq!(expected.translation, got.translation);
        }
    }

    #[test]
    fn gt_mesh_lies_on_analytic_surface() {
        let scene = lone_object_scene(
            Shape::Box { half_extents: Vector3::new(0.15, 0.1, 0.08) },
            vec![RigidTransform::from_axis_angle(
                Vector3::new(0.3, 1.0, 0.2),
                0.7,
                Vector3::new(0.1, 1.0, -0.05),
            )],
        );
        let mesh = gt_layer_mesh(&scene, 0, Layer::Object, 0.005);
        assert!(!mesh.is_empty());
        let mut rng = StdRng::seed_from_u64(11);
        let samples = mesh.sample_surface(2000, &mut rng);
        let mut mean_abs = 0.0;
        for p in &samples.points {
            mean_abs += scene_sdf(&scene, 0, p).0.abs();
        }
        mean_abs /= samples.len() as f64;
        assert!(mean_abs < 2e-3, "mean |sdf| at GT mesh samples = {mean_abs}");
    }
}
