//! Featured point clouds: positions, colors and semantic features for one
//! timestep, plus the normalization shared by both timesteps.

mod pca;
mod ply;

pub use pca::{pca_reduce, symmetric_eigen, PcaBasis};
pub use ply::{load_ply, save_ply, PlyFormat};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vec3_array, Vec3};

/// Width of the reduced feature vector fed to the potential fields.
pub const REDUCED_DIM: usize = 4;

pub type Feature = [f64; REDUCED_DIM];

/// Scale values below this are treated as zero variance.
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedPointCloud {
    pub positions: Vec<Vec3>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<Vec3>,
    /// Raw semantic features, `N x F` (`F` may be zero).
    pub features: Array2<f64>,
    /// PCA-reduced features, `N x 4`.
    pub reduced_features: Option<Vec<Feature>>,
}

impl FeaturedPointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<Vec3>, features: Array2<f64>) -> Result<Self> {
        let features = if features.ncols() == 0 {
            Array2::zeros((positions.len(), 0))
        } else {
            features
        };
        let cloud = FeaturedPointCloud {
            positions,
            colors,
            features,
            reduced_features: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Cloud whose raw features are already the 4-D reduced features.
    pub fn with_reduced(positions: Vec<Vec3>, colors: Vec<Vec3>, reduced: Vec<Feature>) -> Result<Self> {
        let features = features_to_array(&reduced);
        let cloud = FeaturedPointCloud {
            positions,
            colors,
            features,
            reduced_features: Some(reduced),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.colors.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: self.colors.len(),
            });
        }
        if self.features.nrows() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: self.features.nrows(),
            });
        }
        if let Some(r) = &self.reduced_features {
            if r.len() != n {
                return Err(Error::LengthMismatch { left: n, right: r.len() });
            }
        }
        if let Some(c) = self
            .colors
            .iter()
            .flat_map(|c| c.iter())
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Config(format!("color component {c} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn reduced(&self) -> Result<&[Feature]> {
        self.reduced_features
            .as_deref()
            .ok_or_else(|| Error::Config("cloud has no reduced features".into()))
    }

    /// Uses the raw features directly when they are already 4-D.
    pub fn adopt_raw_features_if_reduced(&mut self) -> bool {
        if self.reduced_features.is_none() && self.feature_dim() == REDUCED_DIM {
            self.reduced_features = Some(array_to_features(&self.features));
            true
        } else {
            false
        }
    }

    /// Copy whose raw features are replaced by the reduced ones.
    pub fn reduced_as_raw(&self) -> Result<FeaturedPointCloud> {
        let r = self.reduced()?.to_vec();
        FeaturedPointCloud::with_reduced(self.positions.clone(), self.colors.clone(), r)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.len().max(1) as f64;
        self.positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n
    }

    /// Copy with positions replaced; colors and features kept.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<FeaturedPointCloud> {
        if positions.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: positions.len(),
            });
        }
        Ok(FeaturedPointCloud {
            positions,
            ..self.clone()
        })
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if self.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }
}

pub(crate) fn features_to_array(rows: &[Feature]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), REDUCED_DIM), |(i, j)| rows[i][j])
}

pub(crate) fn array_to_features(a: &Array2<f64>) -> Vec<Feature> {
    a.rows()
        .into_iter()
        .map(|r| std::array::from_fn(|j| r[j]))
        .collect()
}

/// Normalization computed from the start-state cloud and applied to both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    #[serde(with = "vec3_array")]
    pub position_mean: Vec3,
    pub position_scale: f64,
    pub feature_mean: Feature,
    pub feature_scale: f64,
    /// Multiplier on normalized positions (`0.1` or `1.0` in practice).
    pub position_weight: f64,
    /// Set when a zero-variance input forced a scale of 1.
    pub position_scale_clamped: bool,
    pub feature_scale_clamped: bool,
}

impl NormStats {
    /// Centroid and RMS distance to the centroid, for positions and reduced
    /// features alike.
    pub fn compute(reference: &FeaturedPointCloud, position_weight: f64) -> Result<NormStats> {
        if reference.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !(position_weight.is_finite() && position_weight > 0.0) {
            return Err(Error::Config(format!(
                "position weight must be positive, got {position_weight}"
            )));
        }
        let reduced = reference.reduced()?;
        let n = reference.len() as f64;
        let position_mean = reference.centroid();
        let pos_rms = (reference
            .positions
            .iter()
            .map(|p| (p - position_mean).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt();
        let mut feature_mean = [0.0; REDUCED_DIM];
        for f in reduced {
            for k in 0..REDUCED_DIM {
                feature_mean[k] += f[k];
            }
        }
        feature_mean.iter_mut().for_each(|m| *m /= n);
        let feat_rms = (reduced
            .iter()
            .map(|f| (0..REDUCED_DIM).map(|k| (f[k] - feature_mean[k]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n)
            .sqrt();
        let clamp = |s: f64| if s.is_finite() && s > MIN_SCALE { (s, false) } else { (1.0, true) };
        let (position_scale, position_scale_clamped) = clamp(pos_rms);
        let (feature_scale, feature_scale_clamped) = clamp(feat_rms);
        if position_scale_clamped || feature_scale_clamped {
            log::warn!(
                "zero-variance reference cloud; clamped scales (position: {position_scale_clamped}, feature: {feature_scale_clamped})"
            );
        }
        Ok(NormStats {
            position_mean,
            position_scale,
            feature_mean,
            feature_scale,
            position_weight,
            position_scale_clamped,
            feature_scale_clamped,
        })
    }

    pub fn normalize_position(&self, p: &Vec3) -> Vec3 {
        (p - self.position_mean) * (self.position_weight / self.position_scale)
    }

    pub fn denormalize_position(&self, p: &Vec3) -> Vec3 {
        self.position_mean + p * (self.position_scale / self.position_weight)
    }

    /// World-space length of a normalized-space length.
    pub fn world_length(&self, normalized: f64) -> f64 {
        normalized * self.position_scale / self.position_weight
    }

    pub fn normalize_feature(&self, f: &Feature) -> Feature {
        std::array::from_fn(|k| (f[k] - self.feature_mean[k]) / self.feature_scale)
    }

    pub fn denormalize_feature(&self, f: &Feature) -> Feature {
        std::array::from_fn(|k| self.feature_mean[k] + f[k] * self.feature_scale)
    }

    /// Normalized copy: positions and reduced features are standardized,
    /// colors and raw features pass through.
    pub fn normalize(&self, cloud: &FeaturedPointCloud) -> Result<FeaturedPointCloud> {
        let reduced = cloud.reduced()?;
        Ok(FeaturedPointCloud {
            positions: cloud.positions.iter().map(|p| self.normalize_position(p)).collect(),
            colors: cloud.colors.clone(),
            features: cloud.features.clone(),
            reduced_features: Some(reduced.iter().map(|f| self.normalize_feature(f)).collect()),
        })
    }

    pub fn denormalize(&self, cloud: &FeaturedPointCloud) -> Result<FeaturedPointCloud> {
        let reduced = cloud.reduced()?;
        Ok(FeaturedPointCloud {
            positions: cloud.positions.iter().map(|p| self.denormalize_position(p)).collect(),
            colors: cloud.colors.clone(),
            features: cloud.features.clone(),
            reduced_features: Some(reduced.iter().map(|f| self.denormalize_feature(f)).collect()),
        })
    }
}
