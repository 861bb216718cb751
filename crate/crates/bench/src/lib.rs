//! Shared fixtures for the benchmarks.

use triad::pipeline::{synth_intrinsics, synth_keyframe, synth_trajectory, SynthConfig};
use triad::select::select_frames;
use triad::{NoiseModel, Raster, SelectionPolicy, TriangulationInput};

/// A noisy synthetic keyframe at `width`×`height` with the default frame
/// selection, ready to triangulate.
pub struct Fixture {
    pub input: TriangulationInput,
    pub intensity: Raster<1>,
}

pub fn fixture(width: usize, height: usize) -> Fixture {
    let mut cfg = SynthConfig::default();
    cfg.scene.width = width;
    cfg.scene.height = height;
    cfg.focal = width as f64 * 0.9;
    let noise = NoiseModel {
        sigma_flow: 1.0,
        outlier_rate: 0.03,
        ..NoiseModel::default()
    };
    let k = synth_intrinsics(&cfg).expect("valid intrinsics");
    let traj = synth_trajectory(&cfg).expect("valid trajectory");
    let key = traj.len() / 2;
    let kf = synth_keyframe(&cfg, &noise, &k, &traj, key).expect("scene renders");
    let sel = select_frames(&traj, key, &SelectionPolicy::default()).expect("frames");
    let frames = kf
        .flows
        .into_iter()
        .filter(|(j, ..)| sel.indices.contains(j))
        .map(|(j, _, noisy, _)| (noisy, traj.relative_pose(key, j)))
        .collect();
    Fixture {
        input: TriangulationInput::new(k, frames).expect("consistent input"),
        intensity: kf.scene.texture().clone(),
    }
}
