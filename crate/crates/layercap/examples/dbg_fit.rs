use layercap::geom::*;
use layercap::raster::*;
use layercap::synth::*;
use layercap::tsdf::TsdfVolume;
use layercap::warp::*;
use nalgebra::Vector3;

fn main() {
    let radius = 0.3;
    let mut vol = TsdfVolume::enclosing(Vector3::repeat(-0.4), Vector3::repeat(0.4), 0.015);
    vol.fill_from_sdf(|p| p.norm() - radius);
    let mesh = vol.extract_mesh();
    let graph = EdGraph::build(&mesh, 0.08).unwrap();
    let rig = tilted_ring_rig(6, 1.8, 0.0, 0.45, Vector3::zeros(), default_intrinsics(160, 120));
    let views: Vec<layercap::render::RenderedView> =
        rig.iter().map(|c| layercap::render::rasterize_mesh(&mesh, c)).collect();
    let view_refs: Vec<(&Camera, &DepthMap, &MaskImage)> = rig
        .iter().zip(&views).map(|(c, v)| (c, &v.depth, &v.valid)).collect();
    let (fitted, report) = fit_motion(&graph, &view_refs, &mesh, &FitParams::default());
    println!("energies: {:?}", report.energies);
    println!("rms {} correspondences {}", report.rms, report.correspondences);
    let mut max_motion = 0.0f64; let mut max_angle = 0.0f64;
    for (node, t) in fitted.nodes.iter().zip(&fitted.transforms) {
        max_motion = max_motion.max((t.apply(node) - node).norm());
        let angle = ((t.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        max_angle = max_angle.max(angle.to_degrees());
    }
    println!("max motion {max_motion} max angle {max_angle}");
}
