//! A box whose lid swings open. Reports per-part transform errors and how
//! well the composed motion preserves local distances.
//!
//! `cargo run --release --example articulated_lid -- [iterations]`

use gmc::isometry::{edge_isometry_loss, EdgeSet, NeighborGraph, DEFAULT_K};
use gmc::motion::MotionModel;
use gmc::synthgen::{self, presets};
use gmc::trainer::{prepare_pair, TrainCloud, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMC_LOG", "info")).init();
    let iterations: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6000);
    let scene = synthgen::generate(&presets::articulated_box(1200, 800, presets::ARTICULATED_GAP))?;
    // the lid's features are uniform, so weaker positions keep it from folding
    let cfg = TrainConfig {
        iterations,
        alpha_ramp_iters: iterations / 2,
        ..Default::default()
    }
    .weak_positions();
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let out = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let model = MotionModel::build(&out.field0, &out.field1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, &cfg.hash())?;

    let score = synthgen::score_transforms(&model.world_transforms(), &scene.truth, &scene.start.positions, scene.start.bbox_diagonal())?;
    for p in &score.parts {
        println!(
            "{:>5}: rotation error {:.2} deg, translation error {:.2}% of the diagonal",
            p.name,
            p.median_rotation_deg,
            100.0 * p.median_translation_frac
        );
    }
    let graph = NeighborGraph::build(&model.start_normalized, DEFAULT_K)?;
    let edges = EdgeSet::new(&model.start_normalized, graph.edges())?;
    let iso = edge_isometry_loss(&edges, &model.end_normalized)?;
    println!(
        "isometry residual of the composed motion {:.2e} over {} edges (position weight {})",
        iso.value, iso.edges, cfg.position_weight
    );
    Ok(())
}
