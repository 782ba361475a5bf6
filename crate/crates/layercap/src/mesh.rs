//! Triangle meshes, point clouds, surface sampling, and exact
//! point-to-surface distance queries.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;

use crate::{Error, Result};

/// Indexed triangle mesh with per-vertex normals and RGB colors in [0,1].
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.colors.len() != n {
            return Err(Error::InvalidInput("vertex attribute lengths differ".into()));
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidInput("triangle index out of range".into()));
            }
        }
        for nm in &self.normals {
            if (nm.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput("non-unit vertex normal".into()));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) =
            (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// True when every undirected edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().all(|c| *c == 2)
    }

    /// Uniform area-weighted surface samples: positions with interpolated
    /// normals. Deterministic for a given RNG.
    pub fn sample_surface(&self, count: usize, rng: &mut impl Rng) -> PointCloud {
        assert!(!self.triangles.is_empty(), "cannot sample an empty mesh");
        let areas: Vec<f64> = (0..self.triangles.len()).map(|t| self.triangle_area(t)).collect();
        let total: f64 = areas.iter().sum();
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        let mut points = Vec::with_capacity(count);
        let mut normals = Vec::with_capacity(count);
        for _ in 0..count {
            let r = rng.gen::<f64>() * total;
            let t = cumulative.partition_point(|c| *c < r).min(self.triangles.len() - 1);
            let [ia, ib, ic] = self.triangles[t];
            let (a, b, c) = (
                self.vertices[ia as usize],
                self.vertices[ib as usize],
                self.vertices[ic as usize],
            );
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let w = 1.0 - u - v;
            points.push(a * w + b * u + c * v);
            let n = self.normals[ia as usize] * w
                + self.normals[ib as usize] * u
                + self.normals[ic as usize] * v;
            let norm = n.norm();
            normals.push(if norm > 1e-12 {
                n / norm
            } else {
                (b - a).cross(&(c - a)).normalize()
            });
        }
        PointCloud { points, normals }
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Applies a rigid transform to vertices and normals.
    pub fn transformed(&self, t: &crate::geom::RigidTransform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            normals: self.normals.iter().map(|n| t.apply_vector(n)).collect(),
            colors: self.colors.clone(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Points with unit normals, both in world coordinates.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p;
        }
        c / (self.points.len().max(1) as f64)
    }

    pub fn transformed(&self, t: &crate::geom::RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self.normals.iter().map(|n| t.apply_vector(n)).collect(),
        }
    }

    /// Farthest-point subsample; starts from index 0 for determinism.
    pub fn farthest_point_sample(&self, count: usize) -> PointCloud {
        if self.points.len() <= count {
            return self.clone();
        }
        let mut chosen = Vec::with_capacity(count);
        let mut dist = vec![f64::INFINITY; self.points.len()];
        let mut current = 0usize;
        chosen.push(0usize);
        for _ in 1..count {
            let cp = self.points[current];
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, p) in self.points.iter().enumerate() {
                let d = (p - cp).norm().min(dist[i]);
                dist[i] = d;
                if d > best.1 {
                    best = (i, d);
                }
            }
            current = best.0;
            chosen.push(current);
        }
        PointCloud {
            points: chosen.iter().map(|&i| self.points[i]).collect(),
            normals: chosen.iter().map(|&i| self.normals[i]).collect(),
        }
    }
}

/// Exact point-to-triangle distance queries accelerated by bucketing
/// triangles into a uniform grid by their AABBs.
pub struct MeshDistance {
    mesh: Mesh,
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl MeshDistance {
    pub fn build(mesh: &Mesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let extent = (hi - lo).norm().max(1e-6);
        // Aim for a few triangles per cell.
        let cell = (extent / (mesh.triangles.len() as f64).cbrt().max(1.0)).max(5e-3);
        let mut buckets: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let (a, b, c) = (
                mesh.vertices[tri[0] as usize],
                mesh.vertices[tri[1] as usize],
                mesh.vertices[tri[2] as usize],
            );
            let tlo = a.inf(&b).inf(&c);
            let thi = a.sup(&b).sup(&c);
            let k0 = Self::key(&tlo, cell);
            let k1 = Self::key(&thi, cell);
            for z in k0.2..=k1.2 {
                for y in k0.1..=k1.1 {
                    for x in k0.0..=k1.0 {
                        buckets.entry((x, y, z)).or_default().push(t as u32);
                    }
                }
            }
        }
        Self { mesh: mesh.clone(), cell, buckets }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Unsigned distance from `q` to the mesh surface, with the nearest
    /// surface point and the owning triangle.
    pub fn distance(&self, q: &Vector3<f64>) -> (f64, Vector3<f64>, usize) {
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut best = (f64::INFINITY, Vector3::zeros(), 0usize);
        let mut ring = 0i64;
        loop {
            let ring_min = if ring == 0 { 0.0 } else { (ring - 1) as f64 * self.cell };
            if best.0.is_finite() && best.0 <= ring_min {
                return best;
            }
            let mut any_cell = false;
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(ids) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        any_cell = true;
                        for &t in ids {
                            let tri = self.mesh.triangles[t as usize];
                            let p = closest_point_on_triangle(
                                q,
                                &self.mesh.vertices[tri[0] as usize],
                                &self.mesh.vertices[tri[1] as usize],
                                &self.mesh.vertices[tri[2] as usize],
                            );
                            let d = (p - q).norm();
                            if d < best.0 {
                                best = (d, p, t as usize);
                            }
                        }
                    }
                }
            }
            ring += 1;
            // Escape hatch for queries far outside the populated grid.
            if !any_cell && ring > 2 && best.0.is_finite() {
                return best;
            }
            if ring > 100_000 {
                return best;
            }
        }
    }

    /// Signed distance using the angle-interpolated normal at the closest
    /// point (positive outside for outward-oriented normals).
    pub fn signed_distance(&self, q: &Vector3<f64>) -> f64 {
        let (d, p, t) = self.distance(q);
        let tri = self.mesh.triangles[t];
        let n = (self.mesh.normals[tri[0] as usize]
            + self.mesh.normals[tri[1] as usize]
            + self.mesh.normals[tri[2] as usize])
            .normalize();
        if n.dot(&(q - p)) >= 0.0 {
            d
        } else {
            -d
        }
    }
}

/// Closest point on triangle (a, b, c) to point `p` (Ericson, Real-Time
/// Collision Detection, 5.1.5).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Writes a Wavefront OBJ (positions and normals only).
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(mesh.vertices.len() * 48);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for n in &mesh.normals {
        out.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!(
            "f {0}//{0} {1}//{1} {2}//{2}\n",
            t[0] + 1,
            t[1] + 1,
            t[2] + 1
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut mesh = Mesh::default();
    let mut normals_raw = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let v: Vec<f64> = parts.take(3).map(|s| s.parse().unwrap_or(0.0)).collect();
                if v.len() == 3 {
                    mesh.vertices.push(Vector3::new(v[0], v[1], v[2]));
                }
            }
            Some("vn") => {
                let v: Vec<f64> = parts.take(3).map(|s| s.parse().unwrap_or(0.0)).collect();
                if v.len() == 3 {
                    normals_raw.push(Vector3::new(v[0], v[1], v[2]));
                }
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|tok| {
                        tok.split('/').next().unwrap_or("0").parse::<u32>().unwrap_or(1) - 1
                    })
                    .collect();
                if idx.len() >= 3 {
                    mesh.triangles.push([idx[0], idx[1], idx[2]]);
                }
            }
            _ => {}
        }
    }
    if normals_raw.len() == mesh.vertices.len() {
        mesh.normals = normals_raw.into_iter().map(|n| n.normalize()).collect();
    } else {
        mesh.normals = vec![Vector3::z(); mesh.vertices.len()];
        compute_vertex_normals(&mut mesh);
    }
    mesh.colors = vec![[0.7, 0.7, 0.7]; mesh.vertices.len()];
    Ok(mesh)
}

/// Area-weighted vertex normals from triangle geometry.
pub fn compute_vertex_normals(mesh: &mut Mesh) {
    let mut acc = vec![Vector3::zeros(); mesh.vertices.len()];
    for t in &mesh.triangles {
        let (a, b, c) = (
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    mesh.normals = acc
        .into_iter()
        .map(|n| if n.norm() > 1e-12 { n.normalize() } else { Vector3::z() })
        .collect();
}

/// Writes an ASCII PLY with vertex colors.
pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut emit = || -> std::io::Result<()> {
        writeln!(file, "ply")?;
        writeln!(file, "format ascii 1.0")?;
        writeln!(file, "element vertex {}", mesh.vertices.len())?;
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(file, "property float {p}")?;
        }
        for p in ["red", "green", "blue"] {
            writeln!(file, "property uchar {p}")?;
        }
        writeln!(file, "element face {}", mesh.triangles.len())?;
        writeln!(file, "property list uchar int vertex_indices")?;
        writeln!(file, "end_header")?;
        for i in 0..mesh.vertices.len() {
            let v = mesh.vertices[i];
            let n = mesh.normals[i];
            let c = mesh.colors[i];
            writeln!(
                file,
                "{} {} {} {} {} {} {} {} {}",
                v.x as f32,
                v.y as f32,
                v.z as f32,
                n.x as f32,
                n.y as f32,
                n.z as f32,
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            )?;
        }
        for t in &mesh.triangles {
            writeln!(file, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    };
    emit().map_err(|e| Error::io(path, e))
}
