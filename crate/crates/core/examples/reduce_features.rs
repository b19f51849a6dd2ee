//! Projects high-dimensional per-point features down to the four
//! dimensions the fields consume, and reuses the basis on a second cloud.

use gmc::pointset::{FeaturedPointCloud, PcaBasis, REDUCED_DIM};
use gmc::Vec3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<FeaturedPointCloud> {
    let positions = (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let colors = vec![Vec3::new(0.5, 0.5, 0.5); n];
    // two latent classes embedded in `dim` dimensions, plus noise
    let features = Array2::from_shape_fn((n, dim), |(i, j)| {
        let class = (i % 2) as f64;
        class * ((j % 5) as f64 - 2.0) + 0.05 * rng.gen_range(-1.0..1.0)
    });
    Ok(FeaturedPointCloud::new(positions, colors, features)?)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = cloud(500, 64, &mut rng)?;
    let b = cloud(300, 64, &mut rng)?;
    let basis = PcaBasis::fit(a.features.view(), REDUCED_DIM)?;
    let total: f64 = basis.eigenvalues.iter().sum();
    println!("eigenvalues {:?}", basis.eigenvalues.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("leading component carries {:.1}%", 100.0 * basis.eigenvalues[0] / total);
    let ra = basis.project(a.features.view())?;
    let rb = basis.project(b.features.view())?;
    println!("start reduced to {:?}, end reduced to {:?}", ra.dim(), rb.dim());
    println!("first two start points: {:.3} / {:.3}", ra[[0, 0]], ra[[1, 0]]);
    Ok(())
}
