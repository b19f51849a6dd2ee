//! PCA via eigen-decomposition of the feature covariance.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Principal axes fitted on one feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Column means of the fitted features (length `F`).
    pub mean: Vec<f64>,
    /// `k` unit rows of length `F`, by descending eigenvalue. Rows past the
    /// covariance rank are all zeros.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues matching `components`.
    pub eigenvalues: Vec<f64>,
    /// Fewer than `k` nonzero eigenvalues were found.
    pub rank_deficient: bool,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// Fit on the rows of `features` (population covariance, `1/N`).
    pub fn fit(features: ArrayView2<f64>, k: usize) -> Result<PcaBasis> {
        let (n, f) = features.dim();
        if n < k || f < k || k == 0 {
            return Err(Error::shape(
                format!("at least {k} rows and {k} columns"),
                format!("{n}x{f}"),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        let mean = features.mean_axis(Axis(0)).expect("n > 0");
        let centered = &features - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let (values, vectors) = symmetric_eigen(&cov);
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let tol = 1e-12 * top.max(1e-300) + 1e-300;
        let mut rank_deficient = false;
        let mut components = Vec::with_capacity(k);
        let mut eigenvalues = Vec::with_capacity(k);
        for j in 0..k {
            let lambda = values[j];
            if lambda <= tol || top == 0.0 {
                rank_deficient = true;
                components.push(vec![0.0; f]);
                eigenvalues.push(0.0);
                continue;
            }
            let mut v = vectors.column(j).to_vec();
            // sign convention: largest-magnitude entry positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            eigenvalues.push(lambda);
        }
        if rank_deficient {
            log::warn!("feature covariance has rank below {k}; padding with zero components");
        }
        Ok(PcaBasis {
            mean: mean.to_vec(),
            components,
            eigenvalues,
            rank_deficient,
        })
    }

    pub fn project(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} feature columns", self.input_dim()),
                features.ncols(),
            ));
        }
        let mean = Array1::from(self.mean.clone());
        let k = self.output_dim();
        let basis = Array2::from_shape_fn((self.input_dim(), k), |(i, j)| self.components[j][i]);
        Ok((&features - &mean).dot(&basis))
    }
}

/// Projects `features` onto their top-`k` principal axes.
pub fn pca_reduce(features: ArrayView2<f64>, k: usize) -> Result<(Array2<f64>, PcaBasis)> {
    let basis = PcaBasis::fit(features, k)?;
    let reduced = basis.project(features)?;
    Ok((reduced, basis))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, f: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated columns so the spectrum is spread out
        let base = Array2::from_shape_fn((n, f), |_| rng.gen_range(-1.0..1.0));
        let mix = Array2::from_shape_fn((f, f), |(i, j)| if i <= j { 1.0 / (1.0 + j as f64) } else { 0.0 });
        base.dot(&mix)
    }

    #[test]
    fn jacobi_diagonalizes() {
        let x = random(40, 9, 1);
        let a = x.t().dot(&x);
        let (vals, vecs) = symmetric_eigen(&a);
        let recon = vecs.dot(&Array2::from_diag(&Array1::from(vals.clone()))).dot(&vecs.t());
        assert!((&recon - &a).iter().all(|d| d.abs() < 1e-10));
        let gram = vecs.t().dot(&vecs);
        assert!((&gram - &Array2::<f64>::eye(9)).iter().all(|d| d.abs() < 1e-12));
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn axis_aligned_features_give_signed_permutation() {
        // centered columns are mutually orthogonal, so the covariance is diagonal
        let signs = [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let scales = [0.5, 3.0, 1.5, 0.0];
        let feats = Array2::from_shape_fn((8, 4), |(i, j)| {
            let base = if j < 3 { signs[i % 4][j] } else { 0.0 };
            let flip = if i < 4 { 1.0 } else { -1.0 };
            let col = if j == 3 { (i as f64 - 3.5) * 0.25 } else { 0.0 };
            scales[j] * base * flip + col + 7.0
        });
        let (reduced, basis) = pca_reduce(feats.view(), 4).unwrap();
        let centered = &feats - &feats.mean_axis(Axis(0)).unwrap();
        // each reduced column equals +- some centered input column
        for j in 0..4 {
            let r = reduced.column(j);
            let hit = (0..4).any(|c| {
                let x = centered.column(c);
                (&r - &x).iter().all(|d| d.abs() < 1e-9) || (&r + &x).iter().all(|d| d.abs() < 1e-9)
            });
            assert!(hit, "column {j} is not a signed input column");
            let var = r.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - basis.eigenvalues[j]).abs() < 1e-9);
        }
        assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(!basis.rank_deficient);
    }

    #[test]
    fn identical_rows_are_rank_deficient() {
        let feats = Array2::from_shape_fn((10, 6), |(_, j)| j as f64);
        let (reduced, basis) = pca_reduce(feats.view(), 4).unwrap();
        assert!(reduced.iter().all(|v| *v == 0.0));
        assert!(basis.rank_deficient);
    }

    #[test]
    fn too_few_rows_rejected() {
        let feats = Array2::<f64>::zeros((3, 8));
        assert!(pca_reduce(feats.view(), 4).is_err());
    }

    #[test]
    fn basis_is_orthonormal_and_variances_match() {
        let feats = random(100, 32, 7);
        let (reduced, basis) = pca_reduce(feats.view(), 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = basis.components[a].iter().zip(&basis.components[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8);
            }
            let col = reduced.column(a);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 100.0;
            assert!((var - basis.eigenvalues[a]).abs() <= 1e-6 * basis.eigenvalues[a]);
        }
    }
}
