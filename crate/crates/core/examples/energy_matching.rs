//! Minimum-energy matching between two clouds, exact and with Gumbel
//! perturbation, through both search backends.

use gmc::energy::{match_sides, min_energy_match, EnergyConfig, MatchSide, EMBED_DIM};
use gmc::kdtree::KdTree;
use gmc::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let mut v = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let colors: Vec<Vec3> = (0..n).map(|_| v() * 0.5).collect();
    let mu: Vec<Vec3> = (0..n).map(|_| v()).collect();
    let features = vec![[0.0; 4]; n];
    // the second cloud is the first, slightly displaced
    let moved: Vec<Vec3> = mu.iter().map(|m| m + Vec3::new(0.01, 0.0, 0.0)).collect();
    let a = MatchSide::new(&colors, &features, &mu)?;
    let b = MatchSide::new(&colors, &features, &moved)?;
    let cfg = EnergyConfig::default();

    let exact = match_sides(&a, &b, &cfg, 0.0, &mut rng)?;
    let hits = exact.index.iter().enumerate().filter(|(i, j)| i == *j).count();
    println!("exact: {hits}/{n} identity matches, mean energy {:.5}", exact.mean_energy());

    let tree: KdTree<EMBED_DIM> = KdTree::new(b.embeddings(&cfg));
    let kd = min_energy_match(&a.embeddings(&cfg), &tree, 0.0, &mut rng)?;
    println!("kd-tree agrees with dense search: {}", kd.index == exact.index);

    for scale in [0.001, 0.01, 0.1] {
        let noisy = match_sides(&a, &b, &cfg, scale, &mut rng)?;
        let same = noisy.index.iter().zip(&exact.index).filter(|(x, y)| x == y).count();
        println!("gumbel scale {scale}: {same}/{n} unchanged, mean energy {:.5}", noisy.mean_energy());
    }
    Ok(())
}
