//! Isosurface extraction from uniform scalar grids.
//!
//! Cells are split into the six Kuhn tetrahedra around the main diagonal,
//! which tile space consistently, so the extracted surface is watertight
//! wherever the grid is fully observed. Vertices land on grid edges by
//! linear interpolation and are welded through edge keys.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::mesh::Mesh;

/// Scalar samples on a lattice of `dims` nodes per axis; node (i,j,k) sits at
/// `origin + (i,j,k) * voxel`. `valid` marks observed nodes; cells with any
/// unobserved corner are skipped during extraction.
#[derive(Debug, Clone)]
pub struct IsoGrid {
    pub origin: Vector3<f64>,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl IsoGrid {
    pub fn new(origin: Vector3<f64>, voxel: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { origin, voxel, dims, values: vec![0.0; n], valid: vec![false; n] }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    /// Evaluates `f` at every node; `None` marks the node unobserved.
    pub fn from_fn(
        origin: Vector3<f64>,
        voxel: f64,
        dims: [usize; 3],
        f: impl Fn(&Vector3<f64>) -> Option<f64> + Sync,
    ) -> Self {
        let mut grid = Self::new(origin, voxel, dims);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.node_position(i, j, k);
                    let idx = grid.index(i, j, k);
                    if let Some(v) = f(&p) {
                        grid.values[idx] = v as f32;
                        grid.valid[idx] = true;
                    }
                }
            }
        }
        grid
    }

    /// Banded fill for 1-Lipschitz fields (exact SDFs): blocks of nodes whose
    /// center value is provably farther from zero than the block radius plus
    /// a safety margin are skipped. Skipped cells cannot contain the surface,
    /// so extraction output is unaffected.
    pub fn from_sdf_banded(
        origin: Vector3<f64>,
        voxel: f64,
        dims: [usize; 3],
        sdf: impl Fn(&Vector3<f64>) -> f64 + Sync,
    ) -> Self {
        const BLOCK: usize = 8;
        let mut grid = Self::new(origin, voxel, dims);
        let cell_diag = voxel * 3.0f64.sqrt();
        let nbx = dims[0].div_ceil(BLOCK);
        let nby = dims[1].div_ceil(BLOCK);
        let nbz = dims[2].div_ceil(BLOCK);
        for bz in 0..nbz {
            for by in 0..nby {
                for bx in 0..nbx {
                    let i0 = bx * BLOCK;
                    let j0 = by * BLOCK;
                    let k0 = bz * BLOCK;
                    let i1 = (i0 + BLOCK).min(dims[0] - 1);
                    let j1 = (j0 + BLOCK).min(dims[1] - 1);
                    let k1 = (k0 + BLOCK).min(dims[2] - 1);
                    let lo = grid.node_position(i0, j0, k0);
                    let hi = grid.node_position(i1, j1, k1);
                    let center = (lo + hi) * 0.5;
                    let half_diag = (hi - lo).norm() * 0.5;
                    if sdf(&center).abs() > half_diag + 2.0 * cell_diag {
                        continue;
                    }
                    for k in k0..=k1 {
                        for j in j0..=j1 {
                            for i in i0..=i1 {
                                let idx = grid.index(i, j, k);
                                if !grid.valid[idx] {
                                    let p = grid.node_position(i, j, k);
                                    grid.values[idx] = sdf(&p) as f32;
                                    grid.valid[idx] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        grid
    }
}

// Corner bit layout: bit0 = +x, bit1 = +y, bit2 = +z.
// Six Kuhn tetrahedra sharing the 0-7 diagonal; face diagonals agree between
// neighboring cells, which is what makes the output watertight.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Extracts the `iso` level set. `color_at` and `normal_at` are evaluated at
/// each welded vertex; `normal_at` should return the outward direction (the
/// field gradient for a signed-distance-like field).
pub fn extract_iso(
    grid: &IsoGrid,
    iso: f32,
    color_at: impl Fn(&Vector3<f64>) -> [f32; 3],
    normal_at: impl Fn(&Vector3<f64>) -> Vector3<f64>,
) -> Mesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = Mesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut edge_vertices: HashMap<(u32, u32), u32> = HashMap::new();

    // Signed field relative to iso; exact zeros are nudged outside so that
    // interpolated vertices never coincide with grid nodes.
    let field = |idx: usize| -> f32 {
        let s = grid.values[idx] - iso;
        if s == 0.0 {
            1e-6
        } else {
            s
        }
    };

    let corner_offsets = |c: usize| -> (usize, usize, usize) { (c & 1, (c >> 1) & 1, (c >> 2) & 1) };

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut idxs = [0usize; 8];
                let mut all_valid = true;
                for c in 0..8 {
                    let (dx, dy, dz) = corner_offsets(c);
                    let idx = grid.index(i + dx, j + dy, k + dz);
                    idxs[c] = idx;
                    all_valid &= grid.valid[idx];
                }
                if !all_valid {
                    continue;
                }
                let vals: [f32; 8] = std::array::from_fn(|c| field(idxs[c]));
                // Quick reject: all corners on one side.
                if vals.iter().all(|v| *v > 0.0) || vals.iter().all(|v| *v < 0.0) {
                    continue;
                }
                for tet in &TETS {
                    emit_tet(grid, &mut mesh, &mut edge_vertices, &idxs, &vals, tet);
                }
            }
        }
    }

    mesh.normals = mesh
        .vertices
        .iter()
        .map(|p| {
            let n = normal_at(p);
            let norm = n.norm();
            if norm > 1e-12 {
                n / norm
            } else {
                Vector3::z()
            }
        })
        .collect();
    mesh.colors = mesh.vertices.iter().map(|p| color_at(p)).collect();
    mesh
}

fn vertex_on(
    grid: &IsoGrid,
    mesh: &mut Mesh,
    edge_vertices: &mut HashMap<(u32, u32), u32>,
    idxs: &[usize; 8],
    vals: &[f32; 8],
    a: usize,
    b: usize,
) -> u32 {
    let (ia, ib) = (idxs[a] as u32, idxs[b] as u32);
    let key = (ia.min(ib), ia.max(ib));
    if let Some(&v) = edge_vertices.get(&key) {
        return v;
    }
    let (va, vb) = (vals[a] as f64, vals[b] as f64);
    let t = (va / (va - vb)).clamp(0.0, 1.0);
    let pa = node_pos(grid, idxs[a]);
    let pb = node_pos(grid, idxs[b]);
    let p = pa + (pb - pa) * t;
    let id = mesh.vertices.len() as u32;
    mesh.vertices.push(p);
    edge_vertices.insert(key, id);
    id
}

fn push_triangle(mesh: &mut Mesh, v0: u32, v1: u32, v2: u32, inside_ref: Vector3<f64>) {
    if v0 == v1 || v1 == v2 || v0 == v2 {
        return;
    }
    let (p0, p1, p2) =
        (mesh.vertices[v0 as usize], mesh.vertices[v1 as usize], mesh.vertices[v2 as usize]);
    let n = (p1 - p0).cross(&(p2 - p0));
    // Wind so the face normal points away from the inside reference.
    let centroid = (p0 + p1 + p2) / 3.0;
    if n.dot(&(centroid - inside_ref)) >= 0.0 {
        mesh.triangles.push([v0, v1, v2]);
    } else {
        mesh.triangles.push([v0, v2, v1]);
    }
}

fn emit_tet(
    grid: &IsoGrid,
    mesh: &mut Mesh,
    edge_vertices: &mut HashMap<(u32, u32), u32>,
    idxs: &[usize; 8],
    vals: &[f32; 8],
    tet: &[usize; 4],
) {
    let mut inside = [0usize; 4];
    let mut outside = [0usize; 4];
    let (mut n_in, mut n_out) = (0, 0);
    for &c in tet {
        if vals[c] < 0.0 {
            inside[n_in] = c;
            n_in += 1;
        } else {
            outside[n_out] = c;
            n_out += 1;
        }
    }
    match (n_in, n_out) {
        (1, 3) => {
            let a = inside[0];
            let ref_p = node_pos(grid, idxs[a]);
            let v0 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a, outside[0]);
            let v1 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a, outside[1]);
            let v2 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a, outside[2]);
            push_triangle(mesh, v0, v1, v2, ref_p);
        }
        (3, 1) => {
            let b = outside[0];
            let ref_p = (node_pos(grid, idxs[inside[0]])
                + node_pos(grid, idxs[inside[1]])
                + node_pos(grid, idxs[inside[2]]))
                / 3.0;
            let v0 = vertex_on(grid, mesh, edge_vertices, idxs, vals, inside[0], b);
            let v1 = vertex_on(grid, mesh, edge_vertices, idxs, vals, inside[1], b);
            let v2 = vertex_on(grid, mesh, edge_vertices, idxs, vals, inside[2], b);
            push_triangle(mesh, v0, v1, v2, ref_p);
        }
        (2, 2) => {
            let (a0, a1) = (inside[0], inside[1]);
            let (b0, b1) = (outside[0], outside[1]);
            let ref_p = (node_pos(grid, idxs[a0]) + node_pos(grid, idxs[a1])) * 0.5;
            let v00 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a0, b0);
            let v01 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a0, b1);
            let v10 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a1, b0);
            let v11 = vertex_on(grid, mesh, edge_vertices, idxs, vals, a1, b1);
            push_triangle(mesh, v00, v01, v11, ref_p);
            push_triangle(mesh, v00, v11, v10, ref_p);
        }
        _ => {}
    }
}

#[inline]
fn node_pos(grid: &IsoGrid, linear: usize) -> Vector3<f64> {
    let nx = grid.dims[0];
    let ny = grid.dims[1];
    let i = linear % nx;
    let j = (linear / nx) % ny;
    let k = linear / (nx * ny);
    grid.node_position(i, j, k)
}
