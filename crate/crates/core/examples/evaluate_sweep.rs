//! Scores a learned sweep and a straight-line nearest-neighbor sweep with
//! the scale-invariant EMD and MPED metrics.
//!
//! `cargo run --release --example evaluate_sweep`

use gmc::metrics::{evaluate_sweep, MetricConfig};
use gmc::motion::{MotionModel, StraightLineMotion};
use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};
use gmc::Vec3;

fn main() -> anyhow::Result<()> {
    let scene = synthgen::generate(&presets::smoke())?;
    let cfg = TrainConfig {
        iterations: 800,
        alpha_ramp_iters: 400,
        ..Default::default()
    };
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let fit = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let model = MotionModel::build(&fit.field0, &fit.field1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, &cfg.hash())?;

    let nn = synthgen::euclidean_nn_matches(&scene.start.positions, &scene.end.positions)?;
    let line = StraightLineMotion::new(&scene.start.positions, &scene.end.positions, &nn)?;
    let times: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let metric = MetricConfig::default();
    for (name, frames) in [
        ("learned", times.iter().map(|&t| model.pose_at(t)).collect::<Vec<Vec<Vec3>>>()),
        ("straight line", times.iter().map(|&t| line.pose_at(t)).collect()),
    ] {
        let r = evaluate_sweep(&times, &frames, &scene.start.positions, &scene.end.positions, &metric)?;
        println!("{name:>13}: SI-EMD {:.3}  SI-MPED {:.3}", r.si_emd, r.si_mped);
    }
    Ok(())
}
