//! Embedded deformation graph warping and the key-volume lifecycle.
//!
//! A sparse set of nodes sampled on the key mesh each carries a world-frame
//! rigid transform; dense warps blend the k nearest node transforms with
//! Gaussian weights. Node motion is fit to live depth by Gauss-Newton on
//! point-to-plane residuals with an as-rigid-as-possible regularizer, and
//! the key TSDF volume is re-fused through the fitted warp every frame and
//! rebuilt from the reconstructed mesh at a fixed reset period.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::geom::{compose, nearest_rotation, project, unproject, Camera, RigidTransform};
use crate::grid::PointGrid;
use crate::mesh::Mesh;
use crate::raster::{normals_from_depth, DepthMap, MaskImage, NormalMap};
use crate::synth::FrameBundle;
use crate::tsdf::TsdfVolume;
use crate::{Error, Result};

pub const SKINNING_K: usize = 4;
/// Queries farther than this many sigmas from every node are unsupported.
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// Node graph of the motion field. Transforms are world-frame maps from the
/// key frame to the live frame.
#[derive(Debug, Clone)]
pub struct EdGraph {
    pub nodes: Vec<Vector3<f64>>,
    pub transforms: Vec<RigidTransform>,
    pub sigma: f64,
    pub k: usize,
    /// Node adjacency for the ARAP regularizer.
    pub neighbors: Vec<Vec<usize>>,
    index: PointGrid,
}

impl EdGraph {
    /// Poisson-disk-style vertex subsampling at `spacing`; all transforms
    /// start as identity and sigma equals the spacing.
    pub fn build(mesh: &Mesh, spacing: f64) -> Result<Self> {
        if mesh.vertices.is_empty() {
            return Err(Error::Empty("mesh for graph construction".into()));
        }
        assert!(spacing > 0.0);
        let mut nodes: Vec<Vector3<f64>> = Vec::new();
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        let key = |p: &Vector3<f64>| {
            (
                (p.x / spacing).floor() as i64,
                (p.y / spacing).floor() as i64,
                (p.z / spacing).floor() as i64,
            )
        };
        for v in &mesh.vertices {
            let (cx, cy, cz) = key(v);
            let mut blocked = false;
            'scan: for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(ids) = cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                if (nodes[i] - v).norm() < spacing {
                                    blocked = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
            if !blocked {
                cells.entry((cx, cy, cz)).or_default().push(nodes.len());
                nodes.push(*v);
            }
        }
        let index = PointGrid::build(&nodes, spacing.max(1e-6));
        let neighbors = nodes
            .iter()
            .map(|n| {
                index
                    .k_nearest(n, SKINNING_K + 1, f64::INFINITY)
                    .into_iter()
                    .map(|(i, _)| i)
                    .filter(|i| nodes[*i] != *n)
                    .take(SKINNING_K)
                    .collect()
            })
            .collect();
        Ok(Self {
            transforms: vec![RigidTransform::identity(); nodes.len()],
            nodes,
            sigma: spacing,
            k: SKINNING_K,
            neighbors,
            index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Skinning nodes and normalized weights for a query point, or None when
    /// the point is unsupported (no node within the support radius).
    pub fn skinning(&self, point: &Vector3<f64>) -> Option<Vec<(usize, f64)>> {
        let support = SUPPORT_SIGMAS * self.sigma;
        let found = self.index.k_nearest(point, self.k, support);
        if found.is_empty() {
            return None;
        }
        let inv_two_sigma2 = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut weights: Vec<(usize, f64)> = found
            .iter()
            .map(|(i, d)| (*i, (-d * d * inv_two_sigma2).exp()))
            .collect();
        let sum: f64 = weights.iter().map(|(_, w)| *w).sum();
        if sum <= 1e-300 {
            // All nodes at the support fringe; fall back to the nearest.
            return Some(vec![(found[0].0, 1.0)]);
        }
        for (_, w) in weights.iter_mut() {
            *w /= sum;
        }
        Some(weights)
    }

    /// Warped position: weight-blended application of node transforms.
    /// Unsupported points are returned unchanged with `supported = false`.
    pub fn warp_point(&self, point: &Vector3<f64>) -> (Vector3<f64>, bool) {
        match self.skinning(point) {
            Some(weights) => {
                let mut out = Vector3::zeros();
                for (i, w) in &weights {
                    out += self.transforms[*i].apply(point) * *w;
                }
                (out, true)
            }
            None => (*point, false),
        }
    }

    /// Direction vectors warp through the blended rotations.
    pub fn warp_normal(&self, point: &Vector3<f64>, normal: &Vector3<f64>) -> Vector3<f64> {
        match self.skinning(point) {
            Some(weights) => {
                let mut out = Vector3::zeros();
                for (i, w) in &weights {
                    out += self.transforms[*i].rotation * normal * *w;
                }
                let n = out.norm();
                if n > 1e-12 {
                    out / n
                } else {
                    *normal
                }
            }
            None => *normal,
        }
    }

    /// Approximate inverse warp (live to key frame) by fixed-point
    /// iteration; adequate for the gentle deformations the fitter produces.
    pub fn inverse_warp(&self, live: &Vector3<f64>) -> (Vector3<f64>, bool) {
        let mut x = *live;
        let mut supported = false;
        for _ in 0..10 {
            let (fx, ok) = self.warp_point(&x);
            supported = ok;
            if !ok {
                break;
            }
            let residual = fx - live;
            x -= residual;
            if residual.norm() < 1e-9 {
                break;
            }
        }
        (x, supported)
    }

    pub fn to_json(&self) -> String {
        #[derive(serde::Serialize)]
        struct NodeRec {
            position: [f64; 3],
            rotation: [f64; 9],
            translation: [f64; 3],
        }
        let recs: Vec<NodeRec> = self
            .nodes
            .iter()
            .zip(&self.transforms)
            .map(|(n, t)| {
                let mut rotation = [0.0; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        rotation[r * 3 + c] = t.rotation[(r, c)];
                    }
                }
                NodeRec {
                    position: [n.x, n.y, n.z],
                    rotation,
                    translation: [t.translation.x, t.translation.y, t.translation.z],
                }
            })
            .collect();
        serde_json::to_string_pretty(&recs).expect("graph serialization cannot fail")
    }
}

/// Gauss-Newton settings for [`fit_motion`].
#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub max_iterations: usize,
    pub damping: f64,
    pub arap_weight: f64,
    pub max_correspondence_dist: f64,
    pub max_normal_angle_deg: f64,
    /// Upper bound on residual vertices (the key mesh is strided down).
    pub max_residual_points: usize,
    /// Point-to-plane RMS below which the frame counts as converged; this
    /// is the projective-association noise floor, fitting below it only
    /// hallucinates motion.
    pub rms_floor: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            max_iterations: 8,
            damping: 1e-4,
            arap_weight: 5.0,
            max_correspondence_dist: 0.05,
            max_normal_angle_deg: 45.0,
            max_residual_points: 4000,
            rms_floor: 2e-4,
        }
    }
}

/// Energy log of one fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Regularized energy per accepted iteration, starting with the initial
    /// value.
    pub energies: Vec<f64>,
    pub converged: bool,
    /// Point-to-plane RMS over the final correspondences (meters).
    pub rms: f64,
    pub correspondences: usize,
}

struct LiveView<'a> {
    camera: &'a Camera,
    depth: &'a DepthMap,
    mask: &'a MaskImage,
    normals: NormalMap,
}

/// Fits the graph's node transforms to the live masked depth by damped
/// Gauss-Newton on point-to-plane residuals with ARAP regularization between
/// neighboring nodes. Returns the updated graph and the energy log; the
/// energy never increases across accepted iterations.
pub fn fit_motion(
    graph: &EdGraph,
    views: &[(&Camera, &DepthMap, &MaskImage)],
    key_mesh: &Mesh,
    params: &FitParams,
) -> (EdGraph, FitReport) {
    let mut graph = graph.clone();
    let live: Vec<LiveView> = views
        .iter()
        .map(|(camera, depth, mask)| LiveView {
            camera,
            depth,
            mask,
            normals: normals_from_depth(depth, camera, 0.05),
        })
        .collect();

    // Residual vertices: strided subsample of the key mesh with skinning.
    let stride = (key_mesh.vertices.len() / params.max_residual_points).max(1);
    let samples: Vec<(Vector3<f64>, Vector3<f64>, Vec<(usize, f64)>)> = key_mesh
        .vertices
        .iter()
        .step_by(stride)
        .zip(key_mesh.normals.iter().step_by(stride))
        .filter_map(|(v, n)| graph.skinning(v).map(|s| (*v, *n, s)))
        .collect();

    let n_nodes = graph.node_count();
    let cos_gate = params.max_normal_angle_deg.to_radians().cos();
    let mut damping = params.damping;
    let mut report = FitReport {
        energies: Vec::new(),
        converged: false,
        rms: 0.0,
        correspondences: 0,
    };

    for _iter in 0..params.max_iterations {
        // Correspondences and residual rows at the current warp.
        let mut rows: Vec<(Vec<(usize, f64)>, Vector3<f64>, Vec<Vector3<f64>>, f64)> = Vec::new();
        let mut data_energy = 0.0;
        for (v, n_key, skin) in &samples {
            let x = warp_with(&graph, v, skin);
            let n_model = graph.warp_normal(v, n_key);
            let Some((p_live, n_live)) =
                best_correspondence(&x, &n_model, &live, params, cos_gate)
            else {
                continue;
            };
            let r = n_live.dot(&(x - p_live));
            data_energy += r * r;
            let transformed: Vec<Vector3<f64>> = skin
                .iter()
                .map(|(j, w)| graph.transforms[*j].apply(v) * *w)
                .collect();
            rows.push((skin.clone(), n_live, transformed, r));
        }
        report.correspondences = rows.len();

        let arap_terms = arap_residuals(&graph);
        let arap_energy: f64 = arap_terms.iter().map(|(_, _, r)| r.norm_squared()).sum();
        let energy = data_energy + params.arap_weight * arap_energy;
        if report.energies.is_empty() {
            report.energies.push(energy);
        }
        let prev_energy = *report.energies.last().unwrap();

        if rows.is_empty() {
            break;
        }
        if (data_energy / rows.len() as f64).sqrt() < params.rms_floor {
            report.converged = true;
            break;
        }

        // Block-sparse normal equations (upper triangle).
        let mut hessian: BTreeMap<(usize, usize), Matrix6<f64>> = BTreeMap::new();
        let mut rhs = vec![Vector6::<f64>::zeros(); n_nodes];
        for (skin, n_live, transformed, r) in &rows {
            let mut jrows: Vec<(usize, Vector6<f64>)> = Vec::with_capacity(skin.len());
            for ((j, w), y) in skin.iter().zip(transformed) {
                // y = w * T_j(v); left-increment twist gives
                // dr/domega_j = y x n, dr/du_j = w * n.
                let a = y.cross(n_live);
                let b = n_live * *w;
                jrows.push((*j, Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)));
            }
            for (j, ja) in &jrows {
                rhs[*j] -= ja * *r;
                for (k, jb) in &jrows {
                    if j <= k {
                        *hessian.entry((*j, *k)).or_insert_with(Matrix6::zeros) +=
                            ja * jb.transpose();
                    }
                }
            }
        }
        let w_arap = params.arap_weight;
        for (j, k, r) in &arap_terms {
            let yj = graph.transforms[*j].apply(&graph.nodes[*k]);
            let yk = graph.transforms[*k].apply(&graph.nodes[*k]);
            let jj = twist_jacobian(&yj);
            let jk = -twist_jacobian(&yk);
            for axis in 0..3 {
                let ja: Vector6<f64> = jj.row(axis).transpose();
                let jb: Vector6<f64> = jk.row(axis).transpose();
                rhs[*j] -= ja * (w_arap * r[axis]);
                rhs[*k] -= jb * (w_arap * r[axis]);
                *hessian.entry((*j, *j)).or_insert_with(Matrix6::zeros) +=
                    ja * ja.transpose() * w_arap;
                *hessian.entry((*k, *k)).or_insert_with(Matrix6::zeros) +=
                    jb * jb.transpose() * w_arap;
                let (lo, hi, jlo, jhi) =
                    if j <= k { (*j, *k, ja, jb) } else { (*k, *j, jb, ja) };
                *hessian.entry((lo, hi)).or_insert_with(Matrix6::zeros) +=
                    jlo * jhi.transpose() * w_arap;
            }
        }

        // Damped step with acceptance: retry with stronger damping on energy
        // increase so accepted iterations are monotone.
        let mut accepted = false;
        for _try in 0..5 {
            let delta = solve_block_system(&hessian, &rhs, n_nodes, damping);
            let candidate = apply_increments(&graph, &delta);
            let cand_energy = evaluate_energy(&candidate, &samples, &live, params, cos_gate);
            if cand_energy <= prev_energy {
                graph = candidate;
                report.energies.push(cand_energy);
                accepted = true;
                damping = (damping * 0.5).max(params.damping);
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
        let last = report.energies.len() - 1;
        let drop = (report.energies[last - 1] - report.energies[last])
            / report.energies[last - 1].max(1e-30);
        if drop < 1e-6 {
            report.converged = true;
            break;
        }
    }
    if report.energies.len() > 1 {
        report.converged = true;
    }
    let (rms, count) = point_to_plane_rms(&graph, &samples, &live, params, cos_gate);
    report.rms = rms;
    report.correspondences = count;
    (graph, report)
}

fn warp_with(graph: &EdGraph, point: &Vector3<f64>, skin: &[(usize, f64)]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for (i, w) in skin {
        out += graph.transforms[*i].apply(point) * *w;
    }
    out
}

fn twist_jacobian(y: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    // d(exp(w) y + u)/dw = -[y]x ; d/du = I
    let skew = Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0);
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

fn arap_residuals(graph: &EdGraph) -> Vec<(usize, usize, Vector3<f64>)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (j, neighbors) in graph.neighbors.iter().enumerate() {
        for &k in neighbors {
            let key = (j.min(k), j.max(k));
            if !seen.insert(key) {
                continue;
            }
            let g = graph.nodes[k];
            let r = graph.transforms[j].apply(&g) - graph.transforms[k].apply(&g);
            out.push((j, k, r));
        }
    }
    out
}

fn apply_increments(graph: &EdGraph, delta: &[Vector6<f64>]) -> EdGraph {
    let mut out = graph.clone();
    for (t, d) in out.transforms.iter_mut().zip(delta) {
        let omega = Vector3::new(d[0], d[1], d[2]);
        let u = Vector3::new(d[3], d[4], d[5]);
        let angle = omega.norm();
        let rot = if angle > 1e-12 {
            RigidTransform::from_axis_angle(omega / angle, angle, u)
        } else {
            RigidTransform::from_translation(u)
        };
        *t = compose(&rot, t);
        t.rotation = nearest_rotation(&t.rotation);
    }
    out
}

fn best_correspondence(
    x: &Vector3<f64>,
    n_model: &Vector3<f64>,
    live: &[LiveView],
    params: &FitParams,
    cos_gate: f64,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let mut best: Option<(Vector3<f64>, Vector3<f64>, f64)> = None;
    for lv in live {
        let (px, depth_z) = project(x, lv.camera);
        if depth_z <= 0.0 {
            continue;
        }
        let Some((ux, uy)) = lv.depth.pixel_of(&px) else {
            continue;
        };
        if !lv.mask.at(ux, uy) || !lv.normals.is_valid(ux, uy) {
            continue;
        }
        let d = lv.depth.at(ux, uy);
        if d <= 0.0 {
            continue;
        }
        let p_live = unproject(
            &nalgebra::Vector2::new(ux as f64 + 0.5, uy as f64 + 0.5),
            d as f64,
            lv.camera,
        )
        .ok()?;
        let dist = (p_live - *x).norm();
        if dist > params.max_correspondence_dist {
            continue;
        }
        let nl = lv.normals.at(ux, uy);
        let n_live = lv.camera.world_from_camera.rotation
            * Vector3::new(nl[0] as f64, nl[1] as f64, nl[2] as f64);
        if n_live.dot(n_model) < cos_gate {
            continue;
        }
        if best.map_or(true, |(_, _, bd)| dist < bd) {
            best = Some((p_live, n_live, dist));
        }
    }
    best.map(|(p, n, _)| (p, n))
}

fn evaluate_energy(
    graph: &EdGraph,
    samples: &[(Vector3<f64>, Vector3<f64>, Vec<(usize, f64)>)],
    live: &[LiveView],
    params: &FitParams,
    cos_gate: f64,
) -> f64 {
    let mut energy = 0.0;
    for (v, n_key, skin) in samples {
        let x = warp_with(graph, v, skin);
        let n_model = graph.warp_normal(v, n_key);
        if let Some((p_live, n_live)) = best_correspondence(&x, &n_model, live, params, cos_gate)
        {
            let r = n_live.dot(&(x - p_live));
            energy += r * r;
        }
    }
    let arap: f64 = arap_residuals(graph).iter().map(|(_, _, r)| r.norm_squared()).sum();
    energy + params.arap_weight * arap
}

fn point_to_plane_rms(
    graph: &EdGraph,
    samples: &[(Vector3<f64>, Vector3<f64>, Vec<(usize, f64)>)],
    live: &[LiveView],
    params: &FitParams,
    cos_gate: f64,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, n_key, skin) in samples {
        let x = warp_with(graph, v, skin);
        let n_model = graph.warp_normal(v, n_key);
        if let Some((p_live, n_live)) = best_correspondence(&x, &n_model, live, params, cos_gate)
        {
            let r = n_live.dot(&(x - p_live));
            sum += r * r;
            count += 1;
        }
    }
    if count == 0 {
        (f64::INFINITY, 0)
    } else {
        ((sum / count as f64).sqrt(), count)
    }
}

/// Block-Jacobi preconditioned conjugate gradients on the damped normal
/// equations (upper-triangle block storage). Deterministic.
fn solve_block_system(
    hessian: &BTreeMap<(usize, usize), Matrix6<f64>>,
    rhs: &[Vector6<f64>],
    n: usize,
    damping: f64,
) -> Vec<Vector6<f64>> {
    let apply = |x: &[Vector6<f64>]| -> Vec<Vector6<f64>> {
        let mut y = vec![Vector6::zeros(); n];
        for ((j, k), block) in hessian {
            y[*j] += block * x[*k];
            if j != k {
                y[*k] += block.transpose() * x[*j];
            }
        }
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += xi * damping;
        }
        y
    };
    let precond: Vec<Matrix6<f64>> = (0..n)
        .map(|j| {
            let mut d = hessian.get(&(j, j)).copied().unwrap_or_else(Matrix6::zeros);
            d += Matrix6::identity() * damping.max(1e-12);
            d.try_inverse().unwrap_or_else(Matrix6::identity)
        })
        .collect();

    let mut x = vec![Vector6::zeros(); n];
    let mut r: Vec<Vector6<f64>> = rhs.to_vec();
    let mut z: Vec<Vector6<f64>> = r.iter().zip(&precond).map(|(ri, p)| p * ri).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a.dot(b)).sum();
    let rhs_norm: f64 = rhs.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    if rhs_norm < 1e-300 {
        return x;
    }
    for _ in 0..(6 * n).min(400) {
        let ap = apply(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a.dot(b)).sum();
        if pap.abs() < 1e-300 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        let rnorm: f64 = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if rnorm / rhs_norm < 1e-10 {
            break;
        }
        for i in 0..n {
            z[i] = precond[i] * r[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a.dot(b)).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    x
}

/// Key volume plus its motion field and lifecycle bookkeeping.
#[derive(Debug, Clone)]
pub struct KeyVolumeState {
    pub volume: TsdfVolume,
    pub graph: EdGraph,
    pub key_mesh: Mesh,
    pub birth_frame: usize,
    pub reset_period: usize,
    pub node_spacing: f64,
}

/// One lifecycle event per advanced frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum KeyVolumeEvent {
    Fused,
    Reset,
}

impl KeyVolumeState {
    /// Initializes the key volume and graph from a reconstructed mesh.
    pub fn initialize(
        mesh: &Mesh,
        frame: usize,
        voxel: f64,
        node_spacing: f64,
        reset_period: usize,
    ) -> Result<Self> {
        assert!(reset_period >= 1, "reset period must be >= 1");
        let (lo, hi) = mesh.bounding_box();
        let mut volume = TsdfVolume::enclosing(lo, hi, voxel);
        volume.reset_from_mesh(mesh);
        let graph = EdGraph::build(mesh, node_spacing)?;
        Ok(Self {
            volume,
            graph,
            key_mesh: mesh.clone(),
            birth_frame: frame,
            reset_period,
            node_spacing,
        })
    }

    /// Tracks the live frame, fuses masked depth into the key volume through
    /// the fitted warp, and resets the volume from the reconstructed mesh
    /// when the period has elapsed.
    pub fn advance(
        &mut self,
        bundle: &FrameBundle,
        masks: &[&MaskImage],
        reconstructed: &Mesh,
        params: &FitParams,
    ) -> Result<(KeyVolumeEvent, FitReport)> {
        let views: Vec<(&Camera, &DepthMap, &MaskImage)> = bundle
            .cameras
            .iter()
            .zip(&bundle.views)
            .zip(masks)
            .map(|((cam, view), mask)| (cam, &view.depth, *mask))
            .collect();
        let (graph, fit) = fit_motion(&self.graph, &views, &self.key_mesh, params);
        self.graph = graph;

        // Fuse live depth through the forward warp of each voxel center.
        let graph_ref = &self.graph;
        let warp = move |p: Vector3<f64>| -> Option<Vector3<f64>> {
            let (q, ok) = graph_ref.warp_point(&p);
            ok.then_some(q)
        };
        for ((cam, view), mask) in bundle.cameras.iter().zip(&bundle.views).zip(masks) {
            self.volume.integrate_with(
                &view.depth,
                Some(&view.color),
                Some(*mask),
                cam,
                Some(&warp),
            );
        }

        if bundle.frame >= self.birth_frame + self.reset_period && !reconstructed.is_empty() {
            let (lo, hi) = reconstructed.bounding_box();
            let mut volume = TsdfVolume::enclosing(lo, hi, self.volume.voxel);
            volume.reset_from_mesh(reconstructed);
            self.volume = volume;
            self.graph = EdGraph::build(reconstructed, self.node_spacing)?;
            self.key_mesh = reconstructed.clone();
            self.birth_frame = bundle.frame;
            return Ok((KeyVolumeEvent::Reset, fit));
        }
        Ok((KeyVolumeEvent::Fused, fit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        default_intrinsics, lone_human_scene, raycast, tilted_ring_rig, FrameBundle, HumanMotion,
        Shape,
    };
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sphere_mesh(radius: f64, voxel: f64) -> Mesh {
        let mut vol = TsdfVolume::enclosing(
            Vector3::repeat(-radius - 0.1),
            Vector3::repeat(radius + 0.1),
            voxel,
        );
        vol.fill_from_sdf(|p| p.norm() - radius);
        vol.extract_mesh()
    }

    #[test]
    fn single_vertex_mesh_gives_single_node() {
        let mesh = Mesh {
            vertices: vec![Vector3::new(0.1, 0.2, 0.3)],
            normals: vec![Vector3::z()],
            colors: vec![[1.0; 3]],
            triangles: vec![],
        };
        let graph = EdGraph::build(&mesh, 0.05).unwrap();
        assert_eq!(graph.node_count(), 1);
        assert_eq!(graph.nodes[0], Vector3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn empty_mesh_is_rejected() {
        assert!(EdGraph::build(&Mesh::default(), 0.05).is_err());
    }

    #[test]
    fn node_spacing_is_respected() {
        let mesh = sphere_mesh(0.5, 0.02);
        let graph = EdGraph::build(&mesh, 0.1).unwrap();
        for i in 0..graph.node_count() {
            for j in (i + 1)..graph.node_count() {
                let d = (graph.nodes[i] - graph.nodes[j]).norm();
                assert!(d >= 0.1 - 1e-12, "nodes {i},{j} at distance {d}");
            }
        }
    }

    #[test]
    fn node_count_matches_packing_estimate() {
        let mesh = sphere_mesh(0.5, 0.02);
        let spacing = 0.1;
        let graph = EdGraph::build(&mesh, spacing).unwrap();
        let estimate = mesh.surface_area() / (spacing * spacing * std::f64::consts::FRAC_PI_4);
        let count = graph.node_count() as f64;
        assert!(
            count > 0.7 * estimate && count < 1.3 * estimate,
            "count {count} vs packing estimate {estimate}"
        );
    }

    #[test]
    fn identity_transforms_warp_identically() {
        let mesh = sphere_mesh(0.4, 0.03);
        let graph = EdGraph::build(&mesh, 0.08).unwrap();
        let p = Vector3::new(0.35, 0.1, 0.0);
        let (q, supported) = graph.warp_point(&p);
        assert!(supported);
        assert!((q - p).norm() < 1e-12);
    }

    #[test]
    fn equal_node_transforms_act_as_one_rigid_motion() {
        let mesh = sphere_mesh(0.4, 0.03);
        let mut graph = EdGraph::build(&mesh, 0.08).unwrap();
        let t = RigidTransform::from_axis_angle(
            Vector3::new(0.2, 1.0, -0.3),
            0.4,
            Vector3::new(0.05, -0.02, 0.08),
        );
        for tr in graph.transforms.iter_mut() {
            *tr = t;
        }
        let p = Vector3::new(0.3, -0.2, 0.1);
        let (q, supported) = graph.warp_point(&p);
        assert!(supported);
        assert!((q - t.apply(&p)).norm() < 1e-9);
    }

    #[test]
    fn far_points_are_unsupported() {
        let mesh = sphere_mesh(0.3, 0.03);
        let graph = EdGraph::build(&mesh, 0.08).unwrap();
        let (_, supported) = graph.warp_point(&Vector3::new(5.0, 0.0, 0.0));
        assert!(!supported);
    }

    #[test]
    fn skinning_weights_are_partition_of_unity() {
        let mesh = sphere_mesh(0.4, 0.03);
        let graph = EdGraph::build(&mesh, 0.07).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let dir = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let p = dir * 0.4;
            if let Some(weights) = graph.skinning(&p) {
                let sum: f64 = weights.iter().map(|(_, w)| *w).sum();
                assert!((sum - 1.0).abs() < 1e-12, "weights sum {sum}");
            }
        }
    }

    #[test]
    fn inverse_warp_round_trips() {
        let mesh = sphere_mesh(0.4, 0.03);
        let mut graph = EdGraph::build(&mesh, 0.08).unwrap();
        for (i, tr) in graph.transforms.iter_mut().enumerate() {
            let s = (i as f64 * 0.7).sin() * 0.02;
            *tr = RigidTransform::from_axis_angle(
                Vector3::y(),
                s,
                Vector3::new(s, 0.01, -s * 0.5),
            );
        }
        let p = Vector3::new(0.38, 0.05, 0.1);
        let (live, ok) = graph.warp_point(&p);
        assert!(ok);
        let (back, ok2) = graph.inverse_warp(&live);
        assert!(ok2);
        assert!((back - p).norm() < 1e-6, "inverse warp error {}", (back - p).norm());
    }

    fn sphere_views(
        center: Vector3<f64>,
        radius: f64,
    ) -> (Vec<Camera>, Vec<crate::synth::ViewRender>) {
        let scene = lone_human_scene(
            Shape::Sphere { radius },
            vec![RigidTransform::from_translation(center)],
        );
        let rig =
            tilted_ring_rig(6, 1.8, center.y, 0.45, center, default_intrinsics(160, 120));
        let views = rig.iter().map(|c| raycast(&scene, 0, c, 0.0, 1)).collect();
        (rig, views)
    }

    fn energy_non_increasing(report: &FitReport) -> bool {
        report.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12)
    }

    #[test]
    fn fit_on_identical_frame_stays_at_identity() {
        // Live depth rendered from the key mesh itself: residuals are zero,
        // so the fit must not move.
        let radius = 0.3;
        let mesh = sphere_mesh(radius, 0.015);
        let graph = EdGraph::build(&mesh, 0.08).unwrap();
        let rig =
            tilted_ring_rig(6, 1.8, 0.0, 0.45, Vector3::zeros(), default_intrinsics(160, 120));
        let views: Vec<crate::render::RenderedView> =
            rig.iter().map(|c| crate::render::rasterize_mesh(&mesh, c)).collect();
        let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = rig
            .iter()
            .zip(&views)
            .map(|(c, v)| (c, &v.depth, &v.valid))
            .collect();
        let (fitted, report) = fit_motion(&graph, &view_refs, &mesh, &FitParams::default());
        assert!(report.correspondences > 100);
        assert!(energy_non_increasing(&report));
        // Curved geometry has a small association floor (raster normals mix
        // adjacent triangle planes); anything beyond a tiny fraction of a
        // voxel would mean hallucinated motion.
        for (node, t) in fitted.nodes.iter().zip(&fitted.transforms) {
            let motion = (t.apply(node) - node).norm();
            assert!(motion < 1e-3, "node moved {motion}");
            let angle = ((t.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(angle.to_degrees() < 0.5, "rotation {} deg", angle.to_degrees());
        }
    }

    #[test]
    fn fit_on_exactly_consistent_plane_is_identity_to_spec_tolerance() {
        // A planar patch makes the live observation exactly consistent with
        // the key mesh, so the solver must hold identity within 1e-4 m and
        // 0.1 degrees.
        let mut mesh = Mesh {
            vertices: vec![],
            normals: vec![],
            colors: vec![],
            triangles: vec![],
        };
        let n = 14;
        for j in 0..n {
            for i in 0..n {
                mesh.vertices.push(Vector3::new(
                    (i as f64 / (n - 1) as f64 - 0.5) * 0.6,
                    (j as f64 / (n - 1) as f64 - 0.5) * 0.6,
                    0.0,
                ));
                mesh.colors.push([0.5; 3]);
            }
        }
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = (j * n + i) as u32;
                let b = (j * n + i + 1) as u32;
                let c = ((j + 1) * n + i + 1) as u32;
                let d = ((j + 1) * n + i) as u32;
                mesh.triangles.push([a, b, c]);
                mesh.triangles.push([a, c, d]);
            }
        }
        crate::mesh::compute_vertex_normals(&mut mesh);
        let graph = EdGraph::build(&mesh, 0.1).unwrap();
        let cams = [
            crate::geom::look_at(
                default_intrinsics(160, 120),
                Vector3::new(0.0, 0.0, 1.5),
                Vector3::zeros(),
                Vector3::y(),
                0,
            ),
            crate::geom::look_at(
                default_intrinsics(160, 120),
                Vector3::new(0.4, 0.3, 1.4),
                Vector3::zeros(),
                Vector3::y(),
                1,
            ),
        ];
        let views: Vec<crate::render::RenderedView> =
            cams.iter().map(|c| crate::render::rasterize_mesh(&mesh, c)).collect();
        let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = cams
            .iter()
            .zip(&views)
            .map(|(c, v)| (c, &v.depth, &v.valid))
            .collect();
        let (fitted, report) = fit_motion(&graph, &view_refs, &mesh, &FitParams::default());
        assert!(report.correspondences > 50);
        for (node, t) in fitted.nodes.iter().zip(&fitted.transforms) {
            let motion = (t.apply(node) - node).norm();
            assert!(motion < 1e-4, "node moved {motion}");
            let angle = ((t.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(angle.to_degrees() < 0.1, "rotation {} deg", angle.to_degrees());
        }
    }

    #[test]
    fn fit_recovers_small_translation() {
        let radius = 0.3;
        let shift = Vector3::new(0.03, 0.0, 0.0);
        let mesh = sphere_mesh(radius, 0.015);
        let graph = EdGraph::build(&mesh, 0.08).unwrap();
        let (rig, views) = sphere_views(shift, radius);
        let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = rig
            .iter()
            .zip(&views)
            .map(|(c, v)| (c, &v.depth, &v.human_mask))
            .collect();
        let (fitted, report) = fit_motion(&graph, &view_refs, &mesh, &FitParams::default());
        assert!(energy_non_increasing(&report));
        let mut mean_motion = Vector3::zeros();
        for (node, t) in fitted.nodes.iter().zip(&fitted.transforms) {
            mean_motion += t.apply(node) - node;
        }
        mean_motion /= fitted.node_count() as f64;
        assert!(
            (mean_motion - shift).norm() < 0.003,
            "recovered {mean_motion:?} vs shift {shift:?}"
        );
    }

    #[test]
    fn fit_handles_scripted_joint_bend() {
        // Key: vertical capsule hanging from a joint. Live: the same capsule
        // bent 20 degrees about x at the joint.
        let half_length = 0.22;
        let radius = 0.06;
        let base = Vector3::new(0.0, 0.9, 0.0);
        let key_pose = compose(
            &RigidTransform::from_translation(base),
            &RigidTransform::from_translation(Vector3::new(0.0, -half_length, 0.0)),
        );
        let bend = 20.0f64.to_radians();
        let live_pose = compose(
            &compose(
                &RigidTransform::from_translation(base),
                &RigidTransform::from_axis_angle(Vector3::x(), bend, Vector3::zeros()),
            ),
            &RigidTransform::from_translation(Vector3::new(0.0, -half_length, 0.0)),
        );
        let voxel = 0.01;
        let scene_live = lone_human_scene(Shape::Capsule { half_length, radius }, vec![live_pose]);
        let center = base - Vector3::new(0.0, half_length, 0.0);
        let rig = tilted_ring_rig(6, 1.6, center.y, 0.4, center, default_intrinsics(160, 120));
        let views: Vec<crate::synth::ViewRender> =
            rig.iter().map(|c| raycast(&scene_live, 0, c, 0.0, 1)).collect();

        let mut vol = TsdfVolume::enclosing(
            base - Vector3::repeat(2.0 * half_length + radius + 0.1),
            base + Vector3::repeat(half_length + radius + 0.1),
            voxel,
        );
        let inv = crate::geom::invert(&key_pose);
        vol.fill_from_sdf(|p| Shape::Capsule { half_length, radius }.sdf(&inv.apply(p)));
        let key_mesh = vol.extract_mesh();
        assert!(!key_mesh.is_empty());

        let graph = EdGraph::build(&key_mesh, 0.05).unwrap();
        let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = rig
            .iter()
            .zip(&views)
            .map(|(c, v)| (c, &v.depth, &v.human_mask))
            .collect();
        let params = FitParams { max_iterations: 12, ..FitParams::default() };
        let (_fitted, report) = fit_motion(&graph, &view_refs, &key_mesh, &params);
        assert!(energy_non_increasing(&report));
        assert!(
            report.rms < voxel,
            "point-to-plane RMS {} should be under one voxel {voxel}",
            report.rms
        );
    }

    #[test]
    fn advance_resets_on_schedule() {
        let radius = 0.25;
        let frames = 9;
        let scene = lone_human_scene(
            Shape::Sphere { radius },
            vec![RigidTransform::identity(); frames],
        );
        let rig = tilted_ring_rig(4, 1.5, 0.0, 0.4, Vector3::zeros(), default_intrinsics(80, 60));
        let mesh = sphere_mesh(radius, 0.02);
        let mut state = KeyVolumeState::initialize(&mesh, 0, 0.02, 0.1, 3).unwrap();
        let mut resets = Vec::new();
        for f in 1..frames {
            let bundle = FrameBundle::from_scene(&scene, f, &rig, 0.0, 1);
            let masks: Vec<&MaskImage> = bundle.views.iter().map(|v| &v.human_mask).collect();
            let (event, _) =
                state.advance(&bundle, &masks, &mesh, &FitParams::default()).unwrap();
            if event == KeyVolumeEvent::Reset {
                resets.push(f);
            }
        }
        assert_eq!(resets, vec![3, 6], "resets at period multiples");
    }

    #[test]
    fn static_scene_key_volume_converges() {
        let radius = 0.25;
        let frames = 10;
        let scene = lone_human_scene(
            Shape::Sphere { radius },
            vec![RigidTransform::identity(); frames],
        );
        let rig = tilted_ring_rig(4, 1.5, 0.0, 0.4, Vector3::zeros(), default_intrinsics(80, 60));
        let mesh = sphere_mesh(radius, 0.02);
        let mut state = KeyVolumeState::initialize(&mesh, 0, 0.02, 0.1, 100).unwrap();
        let mut deltas = Vec::new();
        for f in 1..frames {
            let bundle = FrameBundle::from_scene(&scene, f, &rig, 0.0, 1);
            let before = state.volume.tsdf.clone();
            let masks: Vec<&MaskImage> = bundle.views.iter().map(|v| &v.human_mask).collect();
            state.advance(&bundle, &masks, &mesh, &FitParams::default()).unwrap();
            let delta: f64 = before
                .iter()
                .zip(&state.volume.tsdf)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            deltas.push(delta);
        }
        let head: f64 = deltas[..3].iter().sum();
        let tail: f64 = deltas[deltas.len() - 3..].iter().sum();
        assert!(tail < head, "tsdf deltas should shrink: head {head} tail {tail} ({deltas:?})");
    }

    #[test]
    fn occluded_region_keeps_previous_values() {
        let radius = 0.25;
        let mesh = sphere_mesh(radius, 0.02);
        let mut state = KeyVolumeState::initialize(&mesh, 0, 0.02, 0.1, 100).unwrap();
        let before = state.volume.clone();

        // Live frame: a wide panel fully occludes the sphere from the single
        // camera, so the human mask is empty.
        let scene = crate::synth::SdfScene {
            primitives: vec![
                crate::synth::Primitive {
                    shape: Shape::Sphere { radius },
                    albedo: [0.5; 3],
                    layer: crate::synth::Layer::Human,
                },
                crate::synth::Primitive {
                    shape: Shape::Box { half_extents: Vector3::new(0.6, 0.6, 0.02) },
                    albedo: [0.8, 0.6, 0.1],
                    layer: crate::synth::Layer::Object,
                },
            ],
            poses: vec![vec![
                RigidTransform::identity(),
                RigidTransform::from_translation(Vector3::new(0.0, 0.0, -0.8)),
            ]],
        };
        let cam = crate::geom::look_at(
            default_intrinsics(80, 60),
            Vector3::new(0.0, 0.0, -1.8),
            Vector3::zeros(),
            Vector3::y(),
            0,
        );
        let bundle = FrameBundle {
            frame: 1,
            cameras: vec![cam],
            views: vec![raycast(&scene, 0, &cam, 0.0, 1)],
            gt_object_pose: None,
        };
        assert_eq!(bundle.views[0].human_mask.count(), 0, "sphere fully occluded");
        let masks: Vec<&MaskImage> = bundle.views.iter().map(|v| &v.human_mask).collect();
        state.advance(&bundle, &masks, &mesh, &FitParams::default()).unwrap();
        assert_eq!(before.tsdf, state.volume.tsdf, "unobserved voxels must not change");
        assert_eq!(before.weight, state.volume.weight);
    }

    #[test]
    fn reset_reproduces_reconstructed_mesh() {
        let mesh = sphere_mesh(0.3, 0.015);
        let state = KeyVolumeState::initialize(&mesh, 0, 0.015, 0.08, 40).unwrap();
        let extracted = state.volume.extract_mesh();
        assert!(!extracted.is_empty());
        let dist_to_input = crate::mesh::MeshDistance::build(&mesh);
        let mut worst = 0.0f64;
        for v in &extracted.vertices {
            worst = worst.max(dist_to_input.distance(v).0);
        }
        let dist_to_extracted = crate::mesh::MeshDistance::build(&extracted);
        for v in &mesh.vertices {
            worst = worst.max(dist_to_extracted.distance(v).0);
        }
        assert!(worst < 0.015, "post-reset Hausdorff {worst}");
    }

    #[test]
    fn gentle_human_motion_warps_near_live_surface() {
        let motion = HumanMotion::gentle();
        let scene = crate::synth::SdfScene {
            primitives: crate::synth::capsule_human_primitives(),
            poses: (0..4).map(|f| crate::synth::capsule_human_poses(f * 3, &motion)).collect(),
        };
        let key_mesh = crate::synth::gt_layer_mesh(&scene, 0, crate::synth::Layer::Human, 0.02);
        let rig = tilted_ring_rig(
            6,
            2.2,
            0.95,
            0.35,
            Vector3::new(0.0, 0.95, 0.0),
            default_intrinsics(160, 120),
        );
        let live_frame = 1;
        let views: Vec<crate::synth::ViewRender> =
            rig.iter().map(|c| raycast(&scene, live_frame, c, 0.0, 1)).collect();
        let graph = EdGraph::build(&key_mesh, 0.09).unwrap();
        let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = rig
            .iter()
            .zip(&views)
            .map(|(c, v)| (c, &v.depth, &v.human_mask))
            .collect();
        let (fitted, report) = fit_motion(&graph, &view_refs, &key_mesh, &FitParams::default());
        assert!(energy_non_increasing(&report));
        let mut dists: Vec<f64> = key_mesh
            .vertices
            .iter()
            .step_by(7)
            .filter_map(|v| {
                let (q, ok) = fitted.warp_point(v);
                ok.then(|| {
                    crate::synth::layer_sdf(&scene, live_frame, crate::synth::Layer::Human, &q)
                        .abs()
                })
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        assert!(median < 0.02, "median warped |sdf| {median}");
    }
}
