//! Two identical-looking boxes swap places. Nearest-neighbor matching
//! pairs each box with its own old location; the learned fields follow the
//! features instead.
//!
//! `cargo run --release --example criss_cross -- [iterations]`

use gmc::motion::MotionModel;
use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMC_LOG", "info")).init();
    let iterations: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6000);
    let scene = synthgen::generate(&presets::criss_cross(1000))?;
    let nn = synthgen::euclidean_nn_matches(&scene.start.positions, &scene.end.positions)?;
    println!("nearest-neighbor part accuracy {:.4}", synthgen::part_accuracy(&nn, &scene.truth)?);

    let cfg = TrainConfig {
        iterations,
        alpha_ramp_iters: iterations / 2,
        ..Default::default()
    };
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let out = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let model = MotionModel::build(&out.field0, &out.field1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, &cfg.hash())?;
    println!("learned part accuracy {:.4}", synthgen::part_accuracy(&model.matches, &scene.truth)?);
    println!(
        "point accuracy {:.4}",
        synthgen::score_correspondence(&model.matches, &scene.truth, &scene.end.positions)?
    );
    Ok(())
}
