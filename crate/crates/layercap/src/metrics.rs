//! Image and geometry quality metrics: PSNR, SSIM, MAE on masked color
//! images; Chamfer and P2S on meshes via uniform surface sampling against
//! exact point-to-triangle distances.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, MeshDistance};
use crate::raster::{ColorImage, MaskImage};
use crate::{Error, Result};

/// PSNR is capped here for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn masked_pixels<'a>(
    img: &'a ColorImage,
    reference: &'a ColorImage,
    mask: Option<&'a MaskImage>,
) -> Result<impl Iterator<Item = ([f32; 3], [f32; 3])> + 'a> {
    if img.width != reference.width || img.height != reference.height {
        return Err(Error::InvalidInput("image sizes differ".into()));
    }
    if let Some(m) = mask {
        if m.width != img.width || m.height != img.height {
            return Err(Error::InvalidInput("mask size differs".into()));
        }
        if m.count() == 0 {
            return Err(Error::Empty("metric mask".into()));
        }
    }
    let mask_data = mask.map(|m| &m.data);
    Ok(img
        .data
        .iter()
        .zip(reference.data.iter())
        .enumerate()
        .filter(move |(i, _)| mask_data.map_or(true, |m| m[*i]))
        .map(|(_, (a, b))| (*a, *b)))
}

/// Mean squared error over masked pixels and channels.
pub fn mse(img: &ColorImage, reference: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in masked_pixels(img, reference, mask)? {
        for k in 0..3 {
            let d = a[k] as f64 - b[k] as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::Empty("no pixels under mask".into()));
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99.
pub fn psnr(img: &ColorImage, reference: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    let mse = mse(img, reference, mask)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute error over masked pixels and channels (raw color units;
/// reports elsewhere scale by 100).
pub fn mae(img: &ColorImage, reference: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in masked_pixels(img, reference, mask)? {
        for k in 0..3 {
            sum += (a[k] as f64 - b[k] as f64).abs();
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::Empty("no pixels under mask".into()));
    }
    Ok(sum / count as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn luminance(c: [f32; 3]) -> f64 {
    (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5, K1 0.01,
/// K2 0.03, dynamic range 1.0) on channel-mean luminance; the SSIM map is
/// averaged over masked pixels only. Windows are mirrored at borders.
pub fn ssim(img: &ColorImage, reference: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    if img.width != reference.width || img.height != reference.height {
        return Err(Error::InvalidInput("image sizes differ".into()));
    }
    if let Some(m) = mask {
        if m.count() == 0 {
            return Err(Error::Empty("metric mask".into()));
        }
    }
    let w = img.width;
    let h = img.height;
    let a: Vec<f64> = img.data.iter().map(|c| luminance(*c)).collect();
    let b: Vec<f64> = reference.data.iter().map(|c| luminance(*c)).collect();
    let kernel = gaussian_kernel();
    let half = SSIM_WINDOW / 2;

    let mirror = |v: i64, n: usize| -> usize {
        let n = n as i64;
        let mut v = v;
        if v < 0 {
            v = -v;
        }
        if v >= n {
            v = 2 * n - 2 - v;
        }
        v.clamp(0, n - 1) as usize
    };

    // Separable Gaussian filtering helper.
    let blur = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sx = mirror(x as i64 + i as i64 - half as i64, w);
                    acc += kv * src[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sy = mirror(y as i64 + i as i64 - half as i64, h);
                    acc += kv * tmp[sy * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };

    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let mu_a = blur(&a);
    let mu_b = blur(&b);
    let mu_aa = blur(&aa);
    let mu_bb = blur(&bb);
    let mu_ab = blur(&ab);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..w * h {
        if let Some(m) = mask {
            if !m.data[i] {
                continue;
            }
        }
        let va = mu_aa[i] - mu_a[i] * mu_a[i];
        let vb = mu_bb[i] - mu_b[i] * mu_b[i];
        let cov = mu_ab[i] - mu_a[i] * mu_b[i];
        let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
            / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        sum += s;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no pixels under mask".into()));
    }
    Ok(sum / count as f64)
}

/// Scale used when reporting Chamfer/P2S (values are mean squared meters
/// divided by 1e-4).
pub const CHAMFER_REPORT_SCALE: f64 = 1e-4;

/// One-directional mean squared point-to-surface distance from samples of
/// `mesh` to the surface of `reference`, in squared meters.
pub fn p2s_raw(mesh: &Mesh, reference: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    if mesh.is_empty() || reference.is_empty() {
        return Err(Error::Empty("mesh for distance metric".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let cloud = mesh.sample_surface(samples, &mut rng);
    let dist = MeshDistance::build(reference);
    let mut sum = 0.0;
    for p in &cloud.points {
        let (d, _, _) = dist.distance(p);
        sum += d * d;
    }
    Ok(sum / cloud.len() as f64)
}

/// P2S in the paper's x1e-4 scale.
pub fn p2s(mesh: &Mesh, reference: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    Ok(p2s_raw(mesh, reference, samples, seed)? / CHAMFER_REPORT_SCALE)
}

/// Symmetric mean squared point-to-surface distance (average of the two
/// directions), in squared meters.
pub fn chamfer_raw(a: &Mesh, b: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    let ab = p2s_raw(a, b, samples, seed)?;
    let ba = p2s_raw(b, a, samples, seed.wrapping_add(1))?;
    Ok(0.5 * (ab + ba))
}

/// Chamfer in the paper's x1e-4 scale.
pub fn chamfer(a: &Mesh, b: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    Ok(chamfer_raw(a, b, samples, seed)? / CHAMFER_REPORT_SCALE)
}

/// RMS surface distance in meters (sqrt of symmetric mean squared distance).
pub fn rms_surface_error(a: &Mesh, b: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    Ok(chamfer_raw(a, b, samples, seed)?.sqrt())
}

/// Per-frame and aggregate metric report rows.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub frame: usize,
    pub view: u32,
    pub psnr_db: f64,
    pub ssim: f64,
    /// MAE in 1e-2 color units, matching the reporting convention.
    pub mae_x100: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct GeometryRow {
    pub frame: usize,
    /// Chamfer in 1e-4 m^2 units.
    pub chamfer_x1e4: f64,
    /// P2S in 1e-4 m^2 units.
    pub p2s_x1e4: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub geometry: Vec<GeometryRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_mae_x100: f64,
    pub mean_chamfer_x1e4: f64,
    pub mean_p2s_x1e4: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, geometry: Vec<GeometryRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let g = geometry.len().max(1) as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mean_mae_x100 = rows.iter().map(|r| r.mae_x100).sum::<f64>() / n;
        let mean_chamfer_x1e4 = geometry.iter().map(|r| r.chamfer_x1e4).sum::<f64>() / g;
        let mean_p2s_x1e4 = geometry.iter().map(|r| r.p2s_x1e4).sum::<f64>() / g;
        Self {
            rows,
            geometry,
            mean_psnr_db,
            mean_ssim,
            mean_mae_x100,
            mean_chamfer_x1e4,
            mean_p2s_x1e4,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,view,psnr_db,ssim,mae_x100\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.frame, r.view, r.psnr_db, r.ssim, r.mae_x100
            ));
        }
        out.push_str("frame,chamfer_x1e4,p2s_x1e4\n");
        for r in &self.geometry {
            out.push_str(&format!("{},{},{}\n", r.frame, r.chamfer_x1e4, r.p2s_x1e4));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut img = ColorImage::new(w, h);
        for c in img.data.iter_mut() {
            *c = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    #[test]
    fn identical_images_hit_caps() {
        let img = random_image(16, 16, 1);
        assert_eq!(psnr(&img, &img, None).unwrap(), 99.0);
        assert!((ssim(&img, &img, None).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(mae(&img, &img, None).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_psnr_closed_form() {
        let mut a = ColorImage::new(8, 8);
        let mut b = ColorImage::new(8, 8);
        for c in a.data.iter_mut() {
            *c = [0.5, 0.5, 0.5];
        }
        for c in b.data.iter_mut() {
            *c = [0.6, 0.6, 0.6];
        }
        let p = psnr(&a, &b, None).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "offset 0.1 must give 20 dB, got {p}");
        let m = mae(&a, &b, None).unwrap();
        assert!((m - 0.1).abs() < 1e-7);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let img = random_image(8, 8, 2);
        let mask = MaskImage::new(8, 8);
        assert!(psnr(&img, &img, Some(&mask)).is_err());
        assert!(ssim(&img, &img, Some(&mask)).is_err());
        assert!(mae(&img, &img, Some(&mask)).is_err());
    }

    /// Direct per-pixel SSIM re-implementation (no separable filtering) used
    /// as the independent oracle.
    fn ssim_reference(a: &ColorImage, b: &ColorImage) -> f64 {
        let w = a.width;
        let h = a.height;
        let la: Vec<f64> = a.data.iter().map(|c| luminance(*c)).collect();
        let lb: Vec<f64> = b.data.iter().map(|c| luminance(*c)).collect();
        let kernel = gaussian_kernel();
        let half = (SSIM_WINDOW / 2) as i64;
        let mirror = |v: i64, n: usize| -> usize {
            let n = n as i64;
            let mut v = v;
            if v < 0 {
                v = -v;
            }
            if v >= n {
                v = 2 * n - 2 - v;
            }
            v.clamp(0, n - 1) as usize
        };
        let mut total = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let wgt = kernel[(dy + half) as usize] * kernel[(dx + half) as usize];
                        let sx = mirror(x + dx, w);
                        let sy = mirror(y + dy, h);
                        let va = la[sy * w + sx];
                        let vb = lb[sy * w + sx];
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let c1 = SSIM_K1 * SSIM_K1;
                let c2 = SSIM_K2 * SSIM_K2;
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn ssim_matches_independent_reference() {
        let a = random_image(32, 32, 3);
        let b = random_image(32, 32, 4);
        let fast = ssim(&a, &b, None).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "ssim {fast} vs reference {slow}");
    }

    fn sphere_mesh(radius: f64, voxel: f64) -> Mesh {
        let extent: f64 = radius + 5.0 * voxel;
        let n = (2.0 * extent / voxel).ceil() as usize + 1;
        let grid = crate::iso::IsoGrid::from_fn(
            Vector3::new(-extent, -extent, -extent),
            voxel,
            [n, n, n],
            |p| Some(p.norm() - radius),
        );
        crate::iso::extract_iso(&grid, 0.0, |_| [1.0; 3], |p| *p)
    }

    #[test]
    fn identical_meshes_have_zero_chamfer() {
        let m = sphere_mesh(0.5, 0.05);
        let c = chamfer(&m, &m, 2000, 0).unwrap();
        assert!(c < 1e-6, "self chamfer {c}");
    }

    #[test]
    fn offset_spheres_match_analytic_chamfer() {
        // Spheres of radius 1.0 and 1.01: squared surface distance 1e-4 m^2,
        // so the x1e-4-scaled chamfer should be close to 1.0.
        let a = sphere_mesh(1.0, 0.02);
        let b = sphere_mesh(1.01, 0.02);
        let c = chamfer(&a, &b, 20000, 1).unwrap();
        assert!((c - 1.0).abs() < 0.15, "chamfer {c} expected ~1.0");
    }

    #[test]
    fn chamfer_is_symmetric_within_sampling_noise() {
        let a = sphere_mesh(0.5, 0.04);
        let mut b = sphere_mesh(0.52, 0.04);
        for v in b.vertices.iter_mut() {
            v.x += 0.02;
        }
        let ab = chamfer(&a, &b, 20000, 2).unwrap();
        let ba = chamfer(&b, &a, 20000, 3).unwrap();
        assert!((ab - ba).abs() / ab.max(ba) < 0.05, "chamfer asymmetry {ab} vs {ba}");
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = sphere_mesh(0.5, 0.05);
        assert!(chamfer(&Mesh::default(), &m, 100, 0).is_err());
        assert!(p2s(&m, &Mesh::default(), 100, 0).is_err());
    }
}
