//! Trains on the bundled rigid scene and scores the recovered motion.
//!
//! `cargo run --release --example rigid_recovery -- [iterations]`

use std::time::Instant;

use gmc::motion::MotionModel;
use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMC_LOG", "info")).init();
    let iterations: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20_000);
    let scene = synthgen::generate(&presets::rigid(2000))?;
    let cfg = TrainConfig {
        iterations,
        alpha_ramp_iters: iterations / 2,
        ..Default::default()
    };
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let clock = Instant::now();
    let out = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let elapsed = clock.elapsed();
    let model = MotionModel::build(&out.field0, &out.field1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, &cfg.hash())?;
    let acc = synthgen::score_correspondence(&model.matches, &scene.truth, &scene.end.positions)?;
    let tr = synthgen::score_transforms(&model.world_transforms(), &scene.truth, &scene.start.positions, scene.start.bbox_diagonal())?;
    println!("trained {iterations} iterations in {:.1}s", elapsed.as_secs_f64());
    println!("correspondence accuracy {acc:.4}");
    println!("median rotation error {:.3} deg", tr.median_rotation_deg);
    println!("median translation error {:.4} of bbox diagonal", tr.median_translation_frac);
    Ok(())
}
