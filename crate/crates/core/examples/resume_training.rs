//! Interrupts training halfway, restores it from a checkpoint, and checks
//! the result is identical to an uninterrupted run.

use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let scene = synthgen::generate(&presets::smoke())?;
    let cfg = TrainConfig {
        iterations: 200,
        alpha_ramp_iters: 100,
        checkpoint_every: 50,
        ..Default::default()
    };
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;

    let full = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.json");
    let mut first = Trainer::new(g0.clone(), g1.clone(), cfg)?;
    first.run_until(120)?;
    first.save_checkpoint(&path)?;
    drop(first);
    let resumed = Trainer::load_checkpoint(&path, g0, g1)?;
    println!("resuming at iteration {}", resumed.iteration());
    let resumed = resumed.finish()?;

    println!("fields identical: {}", resumed.field0 == full.field0 && resumed.field1 == full.field1);
    println!(
        "final loss {:.6} vs {:.6}",
        resumed.report.total.last().unwrap(),
        full.report.total.last().unwrap()
    );
    Ok(())
}
