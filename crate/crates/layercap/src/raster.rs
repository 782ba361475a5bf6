//! Raster grids: depth maps, color images, masks, normal maps, and their
//! file formats (PFM for depth, 8-bit PNG for color and masks).
//!
//! All rasters are row-major with the origin at the top-left pixel. Samples
//! at continuous coordinates treat pixel centers as sitting at integer + 0.5.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::geom::{pixel_ray, unproject, Camera};
use crate::{Error, Result};

/// Per-view depth raster in meters; 0 marks pixels with no measurement.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub camera_id: u32,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, camera_id: u32) -> Self {
        Self { width, height, data: vec![0.0; width * height], camera_id }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f32 {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.at(x, y) > 0.0
    }

    /// Depth at the pixel containing the continuous coordinate, or None when
    /// outside the raster or invalid.
    pub fn lookup(&self, px: &Vector2<f64>) -> Option<f32> {
        let (x, y) = self.pixel_of(px)?;
        let d = self.at(x, y);
        (d > 0.0).then_some(d)
    }

    /// Integer pixel containing a continuous coordinate.
    pub fn pixel_of(&self, px: &Vector2<f64>) -> Option<(usize, usize)> {
        if px.x < 0.0 || px.y < 0.0 || px.x >= self.width as f64 || px.y >= self.height as f64 {
            return None;
        }
        Some((px.x as usize, px.y as usize))
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// RGB image with channels in [0,1].
#[derive(Debug, Clone)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32; 3] {
        &mut self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous pixel coordinate, clamped to the
    /// image border. Coordinates are relative to pixel centers.
    pub fn sample_bilinear(&self, px: &Vector2<f64>) -> [f64; 3] {
        bilinear(self.width, self.height, px, |x, y| {
            let c = self.at(x, y);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
    }
}

/// Binary raster; true marks pixels belonging to the layer.
#[derive(Debug, Clone)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn lookup(&self, px: &Vector2<f64>) -> bool {
        if px.x < 0.0 || px.y < 0.0 || px.x >= self.width as f64 || px.y >= self.height as f64 {
            return false;
        }
        self.at(px.x as usize, px.y as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Per-pixel unit normals with a validity flag, in the owning camera's frame
/// (z component is negative for surfaces facing the camera).
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, n: [f32; 3]) {
        let i = y * self.width + x;
        self.data[i] = n;
        self.valid[i] = true;
    }
}

/// Generic bilinear interpolation helper over [f64; N] texels.
pub fn bilinear<const N: usize>(
    width: usize,
    height: usize,
    px: &Vector2<f64>,
    fetch: impl Fn(usize, usize) -> [f64; N],
) -> [f64; N] {
    // Shift so that integer coordinates land on pixel centers.
    let fx = (px.x - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (px.y - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let v00 = fetch(x0, y0);
    let v10 = fetch(x1, y0);
    let v01 = fetch(x0, y1);
    let v11 = fetch(x1, y1);
    let mut out = [0.0; N];
    for c in 0..N {
        let top = v00[c] * (1.0 - ax) + v10[c] * ax;
        let bot = v01[c] * (1.0 - ax) + v11[c] * ax;
        out[c] = top * (1.0 - ay) + bot * ay;
    }
    out
}

/// Unit normals from cross products of unprojected neighbor differences.
/// Pixels adjacent to depth discontinuities (neighbor gap > `max_gap`) or
/// missing neighbors are left invalid. Normals are expressed in the camera
/// frame and oriented towards the camera.
pub fn normals_from_depth(depth: &DepthMap, camera: &Camera, max_gap: f64) -> NormalMap {
    let mut normals = NormalMap::new(depth.width, depth.height);
    let cam_from_world = camera.camera_from_world();
    let unproject_cam = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = depth.at(x, y);
        if d <= 0.0 {
            return None;
        }
        let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let world = unproject(&px, d as f64, camera).ok()?;
        Some(cam_from_world.apply(&world))
    };
    for y in 1..depth.height.saturating_sub(1) {
        for x in 1..depth.width.saturating_sub(1) {
            let d = depth.at(x, y);
            if d <= 0.0 {
                continue;
            }
            let neighbors = [
                depth.at(x - 1, y),
                depth.at(x + 1, y),
                depth.at(x, y - 1),
                depth.at(x, y + 1),
            ];
            if neighbors.iter().any(|n| *n <= 0.0 || (*n - d).abs() as f64 > max_gap) {
                continue;
            }
            let (Some(px0), Some(px1), Some(py0), Some(py1)) = (
                unproject_cam(x - 1, y),
                unproject_cam(x + 1, y),
                unproject_cam(x, y - 1),
                unproject_cam(x, y + 1),
            ) else {
                continue;
            };
            let dx = px1 - px0;
            let dy = py1 - py0;
            let mut n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            // Camera looks down +z; faces visible to it point back at it.
            if n.z > 0.0 {
                n = -n;
            }
            normals.set(x, y, [n.x as f32, n.y as f32, n.z as f32]);
        }
    }
    normals
}

/// Normal map rotated into another camera's frame (direction only).
pub fn rotate_normals(normals: &NormalMap, from: &Camera, to: &Camera) -> NormalMap {
    let rot = to.camera_from_world().rotation * from.world_from_camera.rotation;
    let mut out = NormalMap::new(normals.width, normals.height);
    for i in 0..normals.data.len() {
        if normals.valid[i] {
            let n = normals.data[i];
            let v = rot * Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            out.data[i] = [v.x as f32, v.y as f32, v.z as f32];
            out.valid[i] = true;
        }
    }
    out
}

/// Backprojects every valid depth pixel to a world-space point with its
/// world-space normal. Pixels without a valid normal are skipped. An
/// optional mask restricts the export.
pub fn depth_to_cloud(
    depth: &DepthMap,
    camera: &Camera,
    mask: Option<&MaskImage>,
    max_gap: f64,
) -> crate::mesh::PointCloud {
    let normals = normals_from_depth(depth, camera, max_gap);
    let rot = camera.world_from_camera.rotation;
    let mut points = Vec::new();
    let mut out_normals = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(m) = mask {
                if !m.at(x, y) {
                    continue;
                }
            }
            let d = depth.at(x, y);
            if d <= 0.0 || !normals.is_valid(x, y) {
                continue;
            }
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let p = unproject(&px, d as f64, camera).expect("depth checked positive");
            let n = normals.at(x, y);
            points.push(p);
            out_normals.push(rot * Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64));
        }
    }
    crate::mesh::PointCloud { points, normals: out_normals }
}

/// Half-resolution Gaussian downsample (1-2-1 binomial kernel per axis).
pub fn downsample_half(img: &ColorImage) -> ColorImage {
    let w = (img.width / 2).max(1);
    let h = (img.height / 2).max(1);
    let mut out = ColorImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0;
            for (dy, wy) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                for (dx, wx) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                    let sx = (2 * x as i64 + dx).clamp(0, img.width as i64 - 1) as usize;
                    let sy = (2 * y as i64 + dy).clamp(0, img.height as i64 - 1) as usize;
                    let c = img.at(sx, sy);
                    let wgt = wx * wy;
                    for k in 0..3 {
                        acc[k] += c[k] as f64 * wgt;
                    }
                    wsum += wgt;
                }
            }
            *out.at_mut(x, y) = [
                (acc[0] / wsum) as f32,
                (acc[1] / wsum) as f32,
                (acc[2] / wsum) as f32,
            ];
        }
    }
    out
}

// --- file formats -----------------------------------------------------------

/// Writes a little-endian PFM (scale -1.0). PFM stores rows bottom-to-top.
pub fn write_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + depth.data.len() * 4);
    buf.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).as_bytes());
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            buf.extend_from_slice(&depth.at(x, y).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path, camera_id: u32) -> Result<DepthMap> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    // Header: three whitespace-terminated tokens.
    let mut pos = 0;
    let mut token = || -> Result<String> {
        let mut s = String::new();
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            s.push(bytes[pos] as char);
            pos += 1;
        }
        if pos < bytes.len() {
            pos += 1; // consume single terminating whitespace
        }
        if s.is_empty() {
            return Err(Error::format(path, "truncated PFM header"));
        }
        Ok(s)
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(Error::format(path, format!("expected grayscale PFM, got {magic:?}")));
    }
    let width: usize =
        token()?.parse().map_err(|_| Error::format(path, "bad width"))?;
    let height: usize =
        token()?.parse().map_err(|_| Error::format(path, "bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| Error::format(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, "big-endian PFM not supported"));
    }
    let expected = width * height * 4;
    if bytes.len() < pos + expected {
        return Err(Error::format(path, "truncated PFM payload"));
    }
    let mut depth = DepthMap::new(width, height, camera_id);
    for y in 0..height {
        for x in 0..width {
            let i = pos + ((height - 1 - y) * width + x) * 4;
            let v = f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
            *depth.at_mut(x, y) = v;
        }
    }
    Ok(depth)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(img.data.len() * 3);
    for c in &img.data {
        raw.extend_from_slice(&[to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ColorImage::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = [
            px.0[0] as f32 / 255.0,
            px.0[1] as f32 / 255.0,
            px.0[2] as f32 / 255.0,
        ];
    }
    Ok(out)
}

pub fn write_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(mask.width as u32, mask.height as u32, raw)
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_mask_png(path: &Path) -> Result<MaskImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = MaskImage::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = px.0[0] >= 128;
    }
    Ok(out)
}

/// Writes a raw f32 raster (for debugging dumps); little-endian, row-major.
pub fn write_f32_raw(data: &[f32], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Validates that masks are disjoint and cover exactly the valid-depth area.
pub fn masks_partition_depth(depth: &DepthMap, a: &MaskImage, b: &MaskImage) -> bool {
    for y in 0..depth.height {
        for x in 0..depth.width {
            let valid = depth.is_valid(x, y);
            let ma = a.at(x, y);
            let mb = b.at(x, y);
            if ma && mb {
                return false;
            }
            if (ma || mb) != valid {
                return false;
            }
        }
    }
    true
}

/// Casts a depth pixel back to a world point through its pixel-center ray.
/// The stored depth is the camera-frame z, so this matches `unproject`.
pub fn depth_pixel_to_world(
    depth: &DepthMap,
    camera: &Camera,
    x: usize,
    y: usize,
) -> Option<Vector3<f64>> {
    let d = depth.at(x, y);
    if d <= 0.0 {
        return None;
    }
    let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    unproject(&px, d as f64, camera).ok()
}

/// World point along the pixel ray at Euclidean distance `t` (used by the
/// sphere tracer, which marches in ray length rather than camera z).
pub fn ray_point(camera: &Camera, x: usize, y: usize, t: f64) -> Vector3<f64> {
    let (origin, dir) = pixel_ray(camera, x, y);
    origin + dir * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{look_at, CameraIntrinsics, RigidTransform};
    use approx::assert_relative_eq;

    fn camera() -> Camera {
        Camera {
            intrinsics: CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap(),
            world_from_camera: RigidTransform::identity(),
            id: 0,
        }
    }

    #[test]
    fn bilinear_center_is_exact() {
        let mut img = ColorImage::new(4, 4);
        *img.at_mut(2, 1) = [0.25, 0.5, 0.75];
        let v = img.sample_bilinear(&Vector2::new(2.5, 1.5));
        assert_relative_eq!(v[0], 0.25, epsilon = 1e-7);
        assert_relative_eq!(v[2], 0.75, epsilon = 1e-7);
    }

    #[test]
    fn bilinear_midpoint_averages() {
        let mut img = ColorImage::new(2, 1);
        *img.at_mut(0, 0) = [0.0, 0.0, 0.0];
        *img.at_mut(1, 0) = [1.0, 1.0, 1.0];
        let v = img.sample_bilinear(&Vector2::new(1.0, 0.5));
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut depth = DepthMap::new(7, 5, 3);
        for (i, v) in depth.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin().abs();
        }
        let path = dir.path().join("d.pfm");
        write_pfm(&depth, &path).unwrap();
        let back = read_pfm(&path, 3).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(depth.data, back.data);
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ColorImage::new(5, 4);
        for (i, c) in img.data.iter_mut().enumerate() {
            *c = [(i as f32 / 20.0), 0.5, 1.0 - i as f32 / 20.0];
        }
        let path = dir.path().join("c.png");
        write_color_png(&img, &path).unwrap();
        let back = read_color_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn fronto_parallel_plane_normals_face_camera() {
        let cam = camera();
        let mut depth = DepthMap::new(64, 48, 0);
        depth.data.fill(2.0);
        let normals = normals_from_depth(&depth, &cam, 0.03);
        let n = normals.at(32, 24);
        assert!(normals.is_valid(32, 24));
        assert!((n[0].abs()) < 1e-3 && (n[1].abs()) < 1e-3);
        assert_relative_eq!(n[2], -1.0, epsilon = 1e-3);
    }

    #[test]
    fn invalid_depth_gives_invalid_normals() {
        let cam = camera();
        let mut depth = DepthMap::new(64, 48, 0);
        depth.data.fill(2.0);
        *depth.at_mut(10, 10) = 0.0;
        let normals = normals_from_depth(&cam_depth(&depth), &cam, 0.03);
        assert!(!normals.is_valid(10, 10));
        // neighbors of the hole are invalid too
        assert!(!normals.is_valid(11, 10));
    }

    fn cam_depth(d: &DepthMap) -> DepthMap {
        d.clone()
    }

    #[test]
    fn oblique_plane_normal_matches_analytic() {
        // Plane z = 2 + 0.2x in camera frame.
        let cam = look_at(
            CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap(),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            0,
        );
        let mut depth = DepthMap::new(64, 48, 0);
        for y in 0..48 {
            for x in 0..64 {
                // solve z = 2 + 0.2 * X where X = (u - cx)/fx * z
                let u = x as f64 + 0.5;
                let dirx = (u - 32.0) / 100.0;
                let z = 2.0 / (1.0 - 0.2 * dirx);
                *depth.at_mut(x, y) = z as f32;
            }
        }
        let normals = normals_from_depth(&depth, &cam, 0.5);
        let n = normals.at(32, 24);
        let expected = Vector3::new(0.2, 0.0, -1.0).normalize();
        let got = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        // camera frame x may be flipped depending on look_at handedness
        let angle = got.dot(&expected).abs().min(1.0).acos().to_degrees();
        assert!(angle < 2.0, "normal angle error {angle} deg");
    }
}
