//! Truncated signed distance volumes with weight and albedo channels:
//! projective integration, trilinear sampling with analytic gradients,
//! isosurface extraction, and albedo rendering.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::geom::Camera;
#[cfg(test)]
use crate::geom::RigidTransform;
use crate::iso::{extract_iso, IsoGrid};
use crate::mesh::Mesh;
use crate::raster::{ColorImage, DepthMap, MaskImage};
use crate::render::{rasterize_mesh, RenderedView};
use crate::{Error, Result};

/// Truncation expressed in voxels (mu = TRUNCATION_VOXELS * voxel size).
pub const TRUNCATION_VOXELS: f64 = 4.0;
pub const MAX_WEIGHT: f32 = 64.0;
/// Weight decay applied to stale near-surface voxels contradicted by a
/// far-in-front observation (space carving for topology changes).
pub const CARVE_DECAY: f32 = 0.95;

/// Voxel grid of normalized truncated signed distances in [-1,1] with
/// integration weights and running-average RGB. Grid nodes sit at
/// `origin + index * voxel`.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
    pub rgb: Vec<[f32; 3]>,
}

/// Trilinear sample of the volume at a world point.
#[derive(Debug, Clone, Copy)]
pub struct VoxelQuery {
    pub point: Vector3<f64>,
    pub tsdf: f64,
    pub weight: f64,
    pub valid: bool,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel: f64, dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|d| *d >= 2), "volume needs at least 2 nodes per axis");
        assert!(voxel > 0.0);
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin,
            voxel,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            rgb: vec![[0.0; 3]; n],
        }
    }

    /// Volume sized to enclose `lo..hi` padded by the truncation band.
    pub fn enclosing(lo: Vector3<f64>, hi: Vector3<f64>, voxel: f64) -> Self {
        let pad = TRUNCATION_VOXELS * voxel * 1.5;
        let lo = lo - Vector3::repeat(pad);
        let hi = hi + Vector3::repeat(pad);
        let dims = [
            ((hi.x - lo.x) / voxel).ceil() as usize + 1,
            ((hi.y - lo.y) / voxel).ceil() as usize + 1,
            ((hi.z - lo.z) / voxel).ceil() as usize + 1,
        ];
        Self::new(lo, voxel, dims)
    }

    /// Truncation distance in meters.
    pub fn truncation(&self) -> f64 {
        TRUNCATION_VOXELS * self.voxel
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Integrates one masked depth+color observation. For each voxel whose
    /// (optionally warped) center projects onto a masked valid pixel with
    /// projective sdf > -mu, the normalized tsdf, weight, and rgb running
    /// averages are updated; far-in-front observations additionally decay
    /// stale near-surface voxels. `warp` maps voxel centers from volume
    /// coordinates to the observation's world frame (identity when None).
    pub fn integrate_with(
        &mut self,
        depth: &DepthMap,
        color: Option<&ColorImage>,
        mask: Option<&MaskImage>,
        camera: &Camera,
        warp: Option<&(dyn Fn(Vector3<f64>) -> Option<Vector3<f64>> + Sync)>,
    ) {
        let mu = self.truncation();
        let [nx, ny, nz] = self.dims;
        let cam_from_world = camera.camera_from_world();
        let origin = self.origin;
        let voxel = self.voxel;
        // Raw projective sdf (depth difference along the optical axis)
        // overestimates the true distance for oblique rays; scaling by the
        // incidence cosine recovers the first-order point-to-plane distance.
        // Pixels without a valid depth normal (discontinuities, borders) are
        // excluded; their projective sdf is unreliable.
        let normals = crate::raster::normals_from_depth(depth, camera, 2.0 * mu);
        const MIN_INCIDENCE_COS: f64 = 0.25;

        // Per-voxel updates are independent; parallelize over z-slabs.
        let slab = nx * ny;
        let tsdf = &mut self.tsdf;
        let weight = &mut self.weight;
        let rgb = &mut self.rgb;
        tsdf.par_chunks_mut(slab)
            .zip(weight.par_chunks_mut(slab))
            .zip(rgb.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, ((tsdf_slab, weight_slab), rgb_slab))| {
                if k >= nz {
                    return;
                }
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = j * nx + i;
                        let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel;
                        let p = match warp {
                            Some(f) => match f(p) {
                                Some(q) => q,
                                None => continue,
                            },
                            None => p,
                        };
                        let cam_p = cam_from_world.apply(&p);
                        if cam_p.z <= 0.0 {
                            continue;
                        }
                        let k_in = &camera.intrinsics;
                        let px = Vector2::new(
                            k_in.fx * cam_p.x / cam_p.z + k_in.cx,
                            k_in.fy * cam_p.y / cam_p.z + k_in.cy,
                        );
                        let Some((ux, uy)) = depth.pixel_of(&px) else {
                            continue;
                        };
                        if let Some(m) = mask {
                            if !m.at(ux, uy) {
                                continue;
                            }
                        }
                        if !normals.is_valid(ux, uy) {
                            continue;
                        }
                        let d = depth.at(ux, uy);
                        if d <= 0.0 {
                            continue;
                        }
                        let n = normals.at(ux, uy);
                        let ray = Vector3::new(
                            (ux as f64 + 0.5 - k_in.cx) / k_in.fx,
                            (uy as f64 + 0.5 - k_in.cy) / k_in.fy,
                            1.0,
                        )
                        .normalize();
                        let cos = -(n[0] as f64 * ray.x + n[1] as f64 * ray.y
                            + n[2] as f64 * ray.z);
                        if cos < MIN_INCIDENCE_COS {
                            continue;
                        }
                        let sdf = (d as f64 - cam_p.z) * cos;
                        if sdf <= -mu {
                            continue;
                        }
                        let sample = (sdf / mu).clamp(-1.0, 1.0) as f32;
                        let w_old = weight_slab[idx];
                        if sdf > mu && w_old > 0.0 && tsdf_slab[idx] < 0.5 {
                            // Free-space observation contradicting stored
                            // surface: decay before averaging.
                            weight_slab[idx] = w_old * CARVE_DECAY;
                        }
                        let w = weight_slab[idx];
                        let new_t = (tsdf_slab[idx] * w + sample) / (w + 1.0);
                        tsdf_slab[idx] = new_t.clamp(-1.0, 1.0);
                        if let Some(c) = color {
                            let cpx = c.at(ux, uy);
                            let old = rgb_slab[idx];
                            for ch in 0..3 {
                                rgb_slab[idx][ch] = (old[ch] * w + cpx[ch]) / (w + 1.0);
                            }
                        }
                        weight_slab[idx] = (w + 1.0).min(MAX_WEIGHT);
                    }
                }
            });
    }

    pub fn integrate(
        &mut self,
        depth: &DepthMap,
        color: Option<&ColorImage>,
        mask: Option<&MaskImage>,
        camera: &Camera,
    ) {
        self.integrate_with(depth, color, mask, camera, None);
    }

    /// Mean absolute per-voxel tsdf change that another integration of this
    /// observation would cause (convergence diagnostics).
    pub fn integration_delta(
        &self,
        depth: &DepthMap,
        mask: Option<&MaskImage>,
        camera: &Camera,
    ) -> f64 {
        let mut probe = self.clone();
        probe.integrate(depth, None, mask, camera);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, b) in self.tsdf.iter().zip(&probe.tsdf) {
            if (a - b).abs() > 0.0 {
                sum += (a - b).abs() as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn cell_of(&self, p: &Vector3<f64>) -> Option<([usize; 3], Vector3<f64>)> {
        let rel = (p - self.origin) / self.voxel;
        if rel.x < 0.0 || rel.y < 0.0 || rel.z < 0.0 {
            return None;
        }
        let i = rel.x.floor() as usize;
        let j = rel.y.floor() as usize;
        let k = rel.z.floor() as usize;
        if i + 1 >= self.dims[0] || j + 1 >= self.dims[1] || k + 1 >= self.dims[2] {
            return None;
        }
        Some(([i, j, k], Vector3::new(rel.x - i as f64, rel.y - j as f64, rel.z - k as f64)))
    }

    /// Trilinear interpolation over the eight enclosing voxels; invalid when
    /// outside the grid or when any contributing corner is unobserved.
    pub fn sample(&self, point: &Vector3<f64>) -> VoxelQuery {
        let invalid = VoxelQuery { point: *point, tsdf: 1.0, weight: 0.0, valid: false };
        let Some(([i, j, k], f)) = self.cell_of(point) else {
            return invalid;
        };
        let mut t = 0.0;
        let mut w = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.index(i + dx, j + dy, k + dz);
                    if self.weight[idx] <= 0.0 {
                        return invalid;
                    }
                    let wx = if dx == 1 { f.x } else { 1.0 - f.x };
                    let wy = if dy == 1 { f.y } else { 1.0 - f.y };
                    let wz = if dz == 1 { f.z } else { 1.0 - f.z };
                    let tw = wx * wy * wz;
                    t += tw * self.tsdf[idx] as f64;
                    w += tw * self.weight[idx] as f64;
                }
            }
        }
        VoxelQuery { point: *point, tsdf: t, weight: w, valid: true }
    }

    /// Analytic gradient of the trilinear tsdf interpolant (per meter).
    /// Invalid cells yield None.
    pub fn sample_gradient(&self, point: &Vector3<f64>) -> Option<Vector3<f64>> {
        let ([i, j, k], f) = self.cell_of(point)?;
        let mut values = [0.0f64; 8];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.index(i + dx, j + dy, k + dz);
                    if self.weight[idx] <= 0.0 {
                        return None;
                    }
                    values[(dz << 2) | (dy << 1) | dx] = self.tsdf[idx] as f64;
                }
            }
        }
        let v = |dx: usize, dy: usize, dz: usize| values[(dz << 2) | (dy << 1) | dx];
        let (fx, fy, fz) = (f.x, f.y, f.z);
        let gx = (1.0 - fy) * (1.0 - fz) * (v(1, 0, 0) - v(0, 0, 0))
            + fy * (1.0 - fz) * (v(1, 1, 0) - v(0, 1, 0))
            + (1.0 - fy) * fz * (v(1, 0, 1) - v(0, 0, 1))
            + fy * fz * (v(1, 1, 1) - v(0, 1, 1));
        let gy = (1.0 - fx) * (1.0 - fz) * (v(0, 1, 0) - v(0, 0, 0))
            + fx * (1.0 - fz) * (v(1, 1, 0) - v(1, 0, 0))
            + (1.0 - fx) * fz * (v(0, 1, 1) - v(0, 0, 1))
            + fx * fz * (v(1, 1, 1) - v(1, 0, 1));
        let gz = (1.0 - fx) * (1.0 - fy) * (v(0, 0, 1) - v(0, 0, 0))
            + fx * (1.0 - fy) * (v(1, 0, 1) - v(1, 0, 0))
            + (1.0 - fx) * fy * (v(0, 1, 1) - v(0, 1, 0))
            + fx * fy * (v(1, 1, 1) - v(1, 1, 0));
        Some(Vector3::new(gx, gy, gz) / self.voxel)
    }

    /// Trilinear RGB sample ignoring validity (used for vertex colors).
    pub fn sample_rgb(&self, point: &Vector3<f64>) -> [f32; 3] {
        let Some(([i, j, k], f)) = self.cell_of(point) else {
            return [0.0; 3];
        };
        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.index(i + dx, j + dy, k + dz);
                    if self.weight[idx] <= 0.0 {
                        continue;
                    }
                    let wx = if dx == 1 { f.x } else { 1.0 - f.x };
                    let wy = if dy == 1 { f.y } else { 1.0 - f.y };
                    let wz = if dz == 1 { f.z } else { 1.0 - f.z };
                    let tw = wx * wy * wz;
                    for c in 0..3 {
                        acc[c] += tw * self.rgb[idx][c] as f64;
                    }
                    wsum += tw;
                }
            }
        }
        if wsum <= 1e-12 {
            return [0.0; 3];
        }
        [
            (acc[0] / wsum) as f32,
            (acc[1] / wsum) as f32,
            (acc[2] / wsum) as f32,
        ]
    }

    /// Marching extraction of the tsdf = 0 surface restricted to fully
    /// observed cells, with colors from the rgb channel and normals from the
    /// tsdf gradient.
    pub fn extract_mesh(&self) -> Mesh {
        let grid = IsoGrid {
            origin: self.origin,
            voxel: self.voxel,
            dims: self.dims,
            values: self.tsdf.clone(),
            valid: self.weight.iter().map(|w| *w > 0.0).collect(),
        };
        extract_iso(
            &grid,
            0.0,
            |p| self.sample_rgb(p),
            |p| self.sample_gradient(p).unwrap_or_else(Vector3::z),
        )
    }

    /// Rasterizes the extracted surface into `camera` (albedo image I and
    /// depth map D; pixels without geometry are flagged background).
    pub fn render_albedo(&self, camera: &Camera) -> RenderedView {
        rasterize_mesh(&self.extract_mesh(), camera)
    }

    /// Fills the truncation band around a mesh with exact signed distances
    /// (used for key-volume resets). Voxels outside the band stay
    /// unobserved. Colors come from the mesh's nearest-vertex color.
    pub fn reset_from_mesh(&mut self, mesh: &Mesh) {
        let mu = self.truncation();
        self.tsdf.fill(1.0);
        self.weight.fill(0.0);
        self.rgb.fill([0.0; 3]);
        if mesh.is_empty() {
            return;
        }
        let dist = crate::mesh::MeshDistance::build(mesh);
        let [nx, ny, nz] = self.dims;
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel;
        // Bounding box pruning keeps this linear in the band volume.
        let (lo, hi) = mesh.bounding_box();
        let lo = lo - Vector3::repeat(mu * 1.5);
        let hi = hi + Vector3::repeat(mu * 1.5);
        let updates: Vec<Vec<(usize, f32, [f32; 3])>> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut out = Vec::new();
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel;
                        if p.x < lo.x || p.y < lo.y || p.z < lo.z
                            || p.x > hi.x || p.y > hi.y || p.z > hi.z
                        {
                            continue;
                        }
                        let (d, q, t) = dist.distance(&p);
                        if d > 1.25 * mu {
                            continue;
                        }
                        let tri = mesh.triangles[t];
                        let n = (mesh.normals[tri[0] as usize]
                            + mesh.normals[tri[1] as usize]
                            + mesh.normals[tri[2] as usize])
                            .normalize();
                        let sd = if n.dot(&(p - q)) >= 0.0 { d } else { -d };
                        let color = mesh.colors[tri[0] as usize];
                        out.push((
                            (k * ny + j) * nx + i,
                            (sd / mu).clamp(-1.0, 1.0) as f32,
                            color,
                        ));
                    }
                }
                out
            })
            .collect();
        let _ = slab;
        for batch in updates {
            for (idx, t, c) in batch {
                self.tsdf[idx] = t;
                self.weight[idx] = 1.0;
                self.rgb[idx] = c;
            }
        }
    }

    /// Fills the whole grid from an analytic SDF (tests and oracles).
    pub fn fill_from_sdf(&mut self, sdf: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let mu = self.truncation();
        let [nx, ny, nz] = self.dims;
        let values: Vec<(f32, f32)> = (0..nx * ny * nz)
            .into_par_iter()
            .map(|idx| {
                let i = idx % nx;
                let j = (idx / nx) % ny;
                let k = idx / (nx * ny);
                let p = self.node_position(i, j, k);
                let d = sdf(&p);
                ((d / mu).clamp(-1.0, 1.0) as f32, 1.0f32)
            })
            .collect();
        for (idx, (t, w)) in values.into_iter().enumerate() {
            self.tsdf[idx] = t;
            self.weight[idx] = w;
        }
    }
}

// --- binary snapshot ----------------------------------------------------------

const VOLUME_MAGIC: &[u8; 4] = b"TSDV";

/// Binary snapshot: header (origin, voxel size, dims) + f32 tsdf + f32
/// weight + u8 rgb arrays, all little-endian.
pub fn save_volume(vol: &TsdfVolume, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let write = |f: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        f.write_all(VOLUME_MAGIC)?;
        for v in [vol.origin.x, vol.origin.y, vol.origin.z, vol.voxel] {
            f.write_all(&v.to_le_bytes())?;
        }
        for d in vol.dims {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for t in &vol.tsdf {
            f.write_all(&t.to_le_bytes())?;
        }
        for w in &vol.weight {
            f.write_all(&w.to_le_bytes())?;
        }
        for c in &vol.rgb {
            for ch in c {
                f.write_all(&[(ch.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
        Ok(())
    };
    write(&mut file).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<TsdfVolume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 + 32 + 24 || &bytes[0..4] != VOLUME_MAGIC {
        return Err(Error::format(path, "not a volume snapshot"));
    }
    let mut pos = 4;
    let mut f64_at = |bytes: &[u8]| -> f64 {
        let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    let origin = Vector3::new(f64_at(&bytes), f64_at(&bytes), f64_at(&bytes));
    let voxel = f64_at(&bytes);
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
    }
    let n = dims[0] * dims[1] * dims[2];
    let need = pos + n * 4 + n * 4 + n * 3;
    if bytes.len() < need {
        return Err(Error::format(path, "truncated volume snapshot"));
    }
    let mut vol = TsdfVolume::new(origin, voxel, dims);
    for i in 0..n {
        vol.tsdf[i] = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
    }
    for i in 0..n {
        vol.weight[i] = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
    }
    for i in 0..n {
        vol.rgb[i] = [
            bytes[pos] as f32 / 255.0,
            bytes[pos + 1] as f32 / 255.0,
            bytes[pos + 2] as f32 / 255.0,
        ];
        pos += 3;
    }
    Ok(vol)
}

/// Fuses every masked view of a frame bundle into a fresh volume sized by
/// `lo..hi` (the current-frame volume V_t builder).
pub fn fuse_frame(
    bundle: &crate::synth::FrameBundle,
    layer_mask: impl Fn(&crate::synth::ViewRender) -> &MaskImage,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    voxel: f64,
) -> TsdfVolume {
    let mut vol = TsdfVolume::enclosing(lo, hi, voxel);
    for (cam, view) in bundle.cameras.iter().zip(&bundle.views) {
        vol.integrate(&view.depth, Some(&view.color), Some(layer_mask(view)), cam);
    }
    vol
}
