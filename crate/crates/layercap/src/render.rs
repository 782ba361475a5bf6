//! Perspective triangle rasterization with z-buffering.
//!
//! One rasterizer serves mesh albedo rendering, forward depth warping, and
//! the object re-posing path: triangles carry per-vertex colors and are
//! interpolated perspective-correct.

use nalgebra::{Vector2, Vector3};

use crate::geom::{project, Camera};
use crate::mesh::Mesh;
use crate::raster::{ColorImage, DepthMap, MaskImage};

/// Raster output of a mesh render; `valid` marks pixels covered by geometry.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub valid: MaskImage,
}

impl RenderedView {
    pub fn background(width: usize, height: usize, camera_id: u32) -> Self {
        Self {
            color: ColorImage::new(width, height),
            depth: DepthMap::new(width, height, camera_id),
            valid: MaskImage::new(width, height),
        }
    }
}

struct ProjectedVertex {
    px: Vector2<f64>,
    z: f64,
    color: [f32; 3],
}

/// Rasterizes a mesh into the camera with a z-buffer. Triangles with any
/// vertex at z below `near` are dropped (scenes here keep cameras well away
/// from geometry, so no clipping is needed).
pub fn rasterize_mesh(mesh: &Mesh, camera: &Camera) -> RenderedView {
    let w = camera.width();
    let h = camera.height();
    let mut out = RenderedView::background(w, h, camera.id);
    if mesh.is_empty() {
        return out;
    }
    let near = 0.05;
    let projected: Vec<ProjectedVertex> = mesh
        .vertices
        .iter()
        .zip(&mesh.colors)
        .map(|(v, c)| {
            let (px, z) = project(v, camera);
            ProjectedVertex { px, z, color: *c }
        })
        .collect();

    let mut zbuf = vec![f32::INFINITY; w * h];
    for tri in &mesh.triangles {
        let (a, b, c) = (
            &projected[tri[0] as usize],
            &projected[tri[1] as usize],
            &projected[tri[2] as usize],
        );
        rasterize_triangle(a, b, c, near, w, h, &mut zbuf, &mut out);
    }
    out
}

fn rasterize_triangle(
    a: &ProjectedVertex,
    b: &ProjectedVertex,
    c: &ProjectedVertex,
    near: f64,
    w: usize,
    h: usize,
    zbuf: &mut [f32],
    out: &mut RenderedView,
) {
    if a.z <= near || b.z <= near || c.z <= near {
        return;
    }
    let min_x = a.px.x.min(b.px.x).min(c.px.x).floor().max(0.0) as usize;
    let max_x = (a.px.x.max(b.px.x).max(c.px.x).ceil() as i64).min(w as i64 - 1);
    let min_y = a.px.y.min(b.px.y).min(c.px.y).floor().max(0.0) as usize;
    let max_y = (a.px.y.max(b.px.y).max(c.px.y).ceil() as i64).min(h as i64 - 1);
    if max_x < min_x as i64 || max_y < min_y as i64 {
        return;
    }
    let (max_x, max_y) = (max_x as usize, max_y as usize);

    let edge = |p: &Vector2<f64>, q: &Vector2<f64>, r: &Vector2<f64>| -> f64 {
        (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
    };
    let area = edge(&a.px, &b.px, &c.px);
    if area.abs() < 1e-12 {
        return;
    }
    let inv_area = 1.0 / area;
    let (iza, izb, izc) = (1.0 / a.z, 1.0 / b.z, 1.0 / c.z);

    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let w0 = edge(&b.px, &c.px, &p) * inv_area;
            let w1 = edge(&c.px, &a.px, &p) * inv_area;
            let w2 = edge(&a.px, &b.px, &p) * inv_area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            // Perspective-correct interpolation in 1/z.
            let iz = w0 * iza + w1 * izb + w2 * izc;
            let z = 1.0 / iz;
            let idx = y * w + x;
            if (z as f32) < zbuf[idx] {
                zbuf[idx] = z as f32;
                let f0 = w0 * iza * z;
                let f1 = w1 * izb * z;
                let f2 = w2 * izc * z;
                let mut color = [0.0f32; 3];
                for k in 0..3 {
                    color[k] = (f0 * a.color[k] as f64
                        + f1 * b.color[k] as f64
                        + f2 * c.color[k] as f64) as f32;
                }
                out.color.data[idx] = color;
                out.depth.data[idx] = z as f32;
                out.valid.data[idx] = true;
            }
        }
    }
}

/// Forward-warps a source RGBD view into a target camera by triangulating
/// the depth grid, dropping triangles that span depth discontinuities larger
/// than `max_gap`, and rasterizing the result. An optional mask restricts
/// the warp to one layer. An optional rigid re-posing maps source-time world
/// points to target-time world points before projection.
pub fn warp_depth_color(
    color: &ColorImage,
    depth: &DepthMap,
    src_camera: &Camera,
    dst_camera: &Camera,
    mask: Option<&MaskImage>,
    max_gap: f64,
    repose: Option<&crate::geom::RigidTransform>,
) -> RenderedView {
    let w = depth.width;
    let h = depth.height;
    let mut vertex_ids = vec![u32::MAX; w * h];
    let mut mesh = Mesh::default();
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m.at(x, y) {
                    continue;
                }
            }
            let Some(p) = crate::raster::depth_pixel_to_world(depth, src_camera, x, y) else {
                continue;
            };
            let p = match repose {
                Some(t) => t.apply(&p),
                None => p,
            };
            vertex_ids[y * w + x] = mesh.vertices.len() as u32;
            mesh.vertices.push(p);
            mesh.colors.push(color.at(x, y));
        }
    }
    mesh.normals = vec![Vector3::z(); mesh.vertices.len()];

    let gap_ok = |x0: usize, y0: usize, x1: usize, y1: usize| -> bool {
        let (d0, d1) = (depth.at(x0, y0), depth.at(x1, y1));
        ((d0 - d1).abs() as f64) <= max_gap
    };
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let v00 = vertex_ids[y * w + x];
            let v10 = vertex_ids[y * w + x + 1];
            let v01 = vertex_ids[(y + 1) * w + x];
            let v11 = vertex_ids[(y + 1) * w + x + 1];
            if v00 != u32::MAX && v10 != u32::MAX && v01 != u32::MAX {
                if gap_ok(x, y, x + 1, y) && gap_ok(x, y, x, y + 1) && gap_ok(x + 1, y, x, y + 1) {
                    mesh.triangles.push([v00, v10, v01]);
                }
            }
            if v10 != u32::MAX && v11 != u32::MAX && v01 != u32::MAX {
                if gap_ok(x + 1, y, x + 1, y + 1)
                    && gap_ok(x, y + 1, x + 1, y + 1)
                    && gap_ok(x + 1, y, x, y + 1)
                {
                    mesh.triangles.push([v10, v11, v01]);
                }
            }
        }
    }
    rasterize_mesh(&mesh, dst_camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{look_at, CameraIntrinsics};

    fn camera_at(pos: Vector3<f64>, id: u32) -> Camera {
        look_at(
            CameraIntrinsics::new(80.0, 80.0, 32.0, 24.0, 64, 48).unwrap(),
            pos,
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(0.0, 1.0, 0.0),
            id,
        )
    }

    fn quad_at_z(z: f64, half: f64, color: [f32; 3]) -> Mesh {
        let mut m = Mesh {
            vertices: vec![
                Vector3::new(-half, -half, z),
                Vector3::new(half, -half, z),
                Vector3::new(half, half, z),
                Vector3::new(-half, half, z),
            ],
            normals: vec![],
            colors: vec![color; 4],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        crate::mesh::compute_vertex_normals(&mut m);
        m
    }

    #[test]
    fn center_pixel_hits_quad_at_expected_depth() {
        let cam = camera_at(Vector3::zeros(), 0);
        let view = rasterize_mesh(&quad_at_z(2.0, 0.5, [0.2, 0.4, 0.8]), &cam);
        assert!(view.valid.at(32, 24));
        assert!((view.depth.at(32, 24) - 2.0).abs() < 1e-5);
        let c = view.color.at(32, 24);
        assert!((c[2] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn nearer_triangle_wins_zbuffer() {
        let cam = camera_at(Vector3::zeros(), 0);
        let mut scene = quad_at_z(2.0, 0.5, [1.0, 0.0, 0.0]);
        let near = quad_at_z(1.5, 0.2, [0.0, 1.0, 0.0]);
        let base = scene.vertices.len() as u32;
        scene.vertices.extend(near.vertices);
        scene.colors.extend(near.colors);
        scene.normals.extend(near.normals);
        scene.triangles.extend(near.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        let view = rasterize_mesh(&scene, &cam);
        let c = view.color.at(32, 24);
        assert!(c[1] > 0.9 && c[0] < 0.1);
        assert!((view.depth.at(32, 24) - 1.5).abs() < 1e-5);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let cam = camera_at(Vector3::zeros(), 0);
        let view = rasterize_mesh(&Mesh::default(), &cam);
        assert_eq!(view.valid.count(), 0);
        assert_eq!(view.depth.valid_count(), 0);
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let cam = camera_at(Vector3::zeros(), 0);
        // Populate a synthetic RGBD view of a quad, then warp to the same camera.
        let src = rasterize_mesh(&quad_at_z(2.0, 0.6, [0.3, 0.6, 0.9]), &cam);
        let warped = warp_depth_color(&src.color, &src.depth, &cam, &cam, None, 0.03, None);
        let mut checked = 0;
        for y in 2..46 {
            for x in 2..62 {
                if src.valid.at(x, y) && warped.valid.at(x, y) {
                    let a = src.color.at(x, y);
                    let b = warped.color.at(x, y);
                    for k in 0..3 {
                        assert!((a[k] - b[k]).abs() <= 1.0 / 255.0, "color mismatch at {x},{y}");
                    }
                    assert!((src.depth.at(x, y) - warped.depth.at(x, y)).abs() < 1e-4);
                    checked += 1;
                }
            }
        }
        assert!(checked > 200, "warp produced too few valid pixels: {checked}");
    }
}
