//! Trains briefly on the smoke scene, then writes an interpolated sweep and
//! a few extrapolated frames as PLY files.
//!
//! `cargo run --release --example interpolate_frames -- [out_dir]`

use std::path::PathBuf;

use gmc::motion::{export_frames, MotionModel};
use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "frames_out".into()).into();
    let scene = synthgen::generate(&presets::smoke())?;
    let cfg = TrainConfig {
        iterations: 600,
        alpha_ramp_iters: 300,
        ..Default::default()
    };
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let fit = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let model = MotionModel::build(&fit.field0, &fit.field1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, &cfg.hash())?;

    let sweep: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let manifest = export_frames(&model, &sweep, &scene.start, &out.join("sweep"), None, None)?;
    println!("wrote {} frames to {}", manifest.frames.len(), out.join("sweep").display());
    let beyond = export_frames(&model, &[-0.5, 1.5, 2.0], &scene.start, &out.join("beyond"), None, None)?;
    println!("wrote {} extrapolated frames", beyond.frames.len());

    // the start frame is the input cloud, unchanged
    assert_eq!(model.pose_at(0.0), scene.start.positions);
    let drift = model
        .pose_at(1.0)
        .iter()
        .zip(&model.matches)
        .map(|(p, &j)| (p - scene.end.positions[j]).norm())
        .sum::<f64>()
        / model.len() as f64;
    println!("mean distance from t = 1 to the matched end points {drift:.4}");
    Ok(())
}
