//! Per-point relative transforms between the two states and frame
//! synthesis by interpolating them.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{match_sides, EnergyConfig, MatchSide};
use crate::error::{Error, Result};
use crate::field::UnaryField;
use crate::geometry::{slerp, Quaternion, Se3, Vec3};
use crate::nn::Mode;
use crate::pointset::{save_ply, FeaturedPointCloud, NormStats, PlyFormat};
use crate::trainer::TrainCloud;

pub const MOTION_FORMAT: &str = "gmc-motion";
pub const MOTION_VERSION: u32 = 1;
pub const TRANSFORMS_FORMAT: &str = "gmc-transforms";
pub const TRANSFORMS_VERSION: u32 = 1;
pub const FRAMES_FORMAT: &str = "gmc-frames";
pub const FRAMES_VERSION: u32 = 1;

/// Relative motion of every start point, in the normalized frame, plus what
/// is needed to emit world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub stats: NormStats,
    /// `R_r` and `t_r` per start point (normalized units).
    pub relative: Vec<Se3>,
    /// Matched end-cloud index per start point.
    pub matches: Vec<usize>,
    pub energies: Vec<f64>,
    #[serde(with = "crate::geometry::vec3_seq")]
    pub start_normalized: Vec<Vec3>,
    #[serde(with = "crate::geometry::vec3_seq")]
    pub start_world: Vec<Vec3>,
    /// End positions carried through the canonical space, normalized.
    #[serde(with = "crate::geometry::vec3_seq")]
    pub end_normalized: Vec<Vec3>,
}

impl MotionModel {
    /// Matches every start point against the whole end cloud with no
    /// perturbation and composes the two fields at each pair.
    /// `start_world` is the start cloud as loaded, before normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        f0: &UnaryField,
        f1: &UnaryField,
        g0: &TrainCloud,
        g1: &TrainCloud,
        start_world: &[Vec3],
        energy: &EnergyConfig,
        stats: &NormStats,
        config_hash: &str,
    ) -> Result<MotionModel> {
        if !f0.is_finite() || !f1.is_finite() {
            return Err(Error::NonFinite("field parameters".into()));
        }
        if g0.is_empty() || g1.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if start_world.len() != g0.len() {
            return Err(Error::LengthMismatch { left: g0.len(), right: start_world.len() });
        }
        let p0 = f0.to_canonical(&g0.positions, &g0.features, Mode::Eval, None)?;
        let p1 = f1.to_canonical(&g1.positions, &g1.features, Mode::Eval, None)?;
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let m = match_sides(
            &MatchSide::new(&g0.colors, &g0.features, &p0.canonical)?,
            &MatchSide::new(&g1.colors, &g1.features, &p1.canonical)?,
            energy,
            0.0,
            &mut unused,
        )?;
        let mut relative = Vec::with_capacity(g0.len());
        let mut end_normalized = Vec::with_capacity(g0.len());
        for (i, &j) in m.index.iter().enumerate() {
            let r1t = p1.matrices[j].transpose();
            let q = (p1.rotations[j].conjugate() * p0.rotations[i]).normalize()?;
            let t = r1t * (p0.translations[i] - p1.translations[j]);
            relative.push(Se3 { rotation: q, translation: t });
            end_normalized.push(r1t * (p0.canonical[i] - p1.translations[j]));
        }
        let model = MotionModel {
            format: MOTION_FORMAT.into(),
            version: MOTION_VERSION,
            config_hash: config_hash.into(),
            stats: *stats,
            relative,
            matches: m.index,
            energies: m.energy,
            start_normalized: g0.positions.clone(),
            start_world: start_world.to_vec(),
            end_normalized,
        };
        if model.relative.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("relative transforms".into()));
        }
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.relative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relative.is_empty()
    }

    /// Normalized positions at time `t`; `t` outside `[0, 1]` extrapolates.
    pub fn pose_normalized(&self, t: f64) -> Vec<Vec3> {
        self.relative
            .par_iter()
            .zip(&self.start_normalized)
            .map(|(r, mu)| slerp(&Quaternion::IDENTITY, &r.rotation, t).rotate(mu) + r.translation * t)
            .collect()
    }

    /// World positions at time `t`. At `t = 0` these are the start cloud's
    /// world positions bit for bit.
    pub fn pose_at(&self, t: f64) -> Vec<Vec3> {
        let k = self.stats.position_scale / self.stats.position_weight;
        self.pose_normalized(t)
            .into_iter()
            .zip(&self.start_world)
            .zip(&self.start_normalized)
            .map(|((p, w), mu)| w + (p - mu) * k)
            .collect()
    }

    /// World positions of the composed canonical round trip.
    pub fn end_world(&self) -> Vec<Vec3> {
        let k = self.stats.position_scale / self.stats.position_weight;
        self.end_normalized
            .iter()
            .zip(&self.start_world)
            .zip(&self.start_normalized)
            .map(|((p, w), mu)| w + (p - mu) * k)
            .collect()
    }

    /// The relative transforms expressed in world coordinates.
    pub fn world_transforms(&self) -> Vec<Se3> {
        let a = self.stats.position_weight / self.stats.position_scale;
        let m = self.stats.position_mean;
        self.relative
            .iter()
            .map(|r| {
                let rm = r.rotation.rotate(&m);
                Se3 {
                    rotation: r.rotation,
                    translation: m - rm + r.translation / a,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MOTION_FORMAT {
            return Err(Error::Config(format!("not a motion model: format `{}`", self.format)));
        }
        if self.version != MOTION_VERSION {
            return Err(Error::Version {
                what: "motion model",
                found: self.version,
                expected: MOTION_VERSION,
            });
        }
        let n = self.relative.len();
        for len in [self.matches.len(), self.energies.len(), self.start_normalized.len(), self.start_world.len(), self.end_normalized.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if self.relative.iter().any(|r| (r.rotation.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Config("motion model has non-unit rotations".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MotionModel> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: MotionModel = serde_json::from_slice(&bytes)?;
        m.validate()?;
        Ok(m)
    }
}

/// Per-point record of the transforms file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTransform {
    pub rotation: Quaternion,
    #[serde(with = "crate::geometry::vec3_array")]
    pub translation: Vec3,
    #[serde(with = "crate::geometry::vec3_array")]
    pub translation_world: Vec3,
    pub matched: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformsFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub points: Vec<PointTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub t: f64,
    pub file: String,
    pub sha256: String,
}

/// Manifest written next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub start_sha256: Option<String>,
    pub end_sha256: Option<String>,
    pub frames: Vec<FrameEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn transforms_file(model: &MotionModel) -> TransformsFile {
    let world = model.world_transforms();
    TransformsFile {
        format: TRANSFORMS_FORMAT.into(),
        version: TRANSFORMS_VERSION,
        config_hash: model.config_hash.clone(),
        points: model
            .relative
            .iter()
            .zip(&world)
            .enumerate()
            .map(|(i, (r, w))| PointTransform {
                rotation: r.rotation,
                translation: r.translation,
                translation_world: w.translation,
                matched: model.matches[i],
                energy: model.energies[i],
            })
            .collect(),
    }
}

/// Writes `frame_NNN.ply` for each timestep (positions from [`MotionModel::pose_at`],
/// colors and features from `template`), `transforms.json` and
/// `frames.json`. Returns the manifest.
pub fn export_frames(
    model: &MotionModel,
    timesteps: &[f64],
    template: &FeaturedPointCloud,
    out_dir: &Path,
    start_sha256: Option<String>,
    end_sha256: Option<String>,
) -> Result<FrameManifest> {
    if template.len() != model.len() {
        return Err(Error::LengthMismatch {
            left: template.len(),
            right: model.len(),
        });
    }
    if let Some(t) = timesteps.iter().find(|t| !t.is_finite()) {
        return Err(Error::Config(format!("non-finite timestep {t}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut frames = Vec::with_capacity(timesteps.len());
    for (k, &t) in timesteps.iter().enumerate() {
        let name = format!("frame_{k:03}.ply");
        let path = out_dir.join(&name);
        let cloud = template.with_positions(model.pose_at(t))?;
        save_ply(&cloud, &path, PlyFormat::BinaryLittleEndian)?;
        frames.push(FrameEntry {
            t,
            file: name,
            sha256: file_sha256(&path)?,
        });
    }
    let transforms = out_dir.join("transforms.json");
    fs::write(&transforms, serde_json::to_vec_pretty(&transforms_file(model))?).map_err(|e| Error::io(&transforms, e))?;
    let manifest = FrameManifest {
        format: FRAMES_FORMAT.into(),
        version: FRAMES_VERSION,
        config_hash: model.config_hash.clone(),
        start_sha256,
        end_sha256,
        frames,
    };
    let path = out_dir.join("frames.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads `frames.json` and the frame files it lists, in order.
pub fn load_frames(dir: &Path) -> Result<(FrameManifest, Vec<(f64, PathBuf)>)> {
    let path = dir.join("frames.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: FrameManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FRAMES_FORMAT {
        return Err(Error::Config(format!("not a frame manifest: format `{}`", manifest.format)));
    }
    if manifest.version != FRAMES_VERSION {
        return Err(Error::Version {
            what: "frame manifest",
            found: manifest.version,
            expected: FRAMES_VERSION,
        });
    }
    let files = manifest.frames.iter().map(|f| (f.t, dir.join(&f.file))).collect();
    Ok((manifest, files))
}

/// Per-point straight-line trajectories from each start point to a chosen
/// end point.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightLineMotion {
    pub start: Vec<Vec3>,
    pub end: Vec<Vec3>,
}

impl StraightLineMotion {
    pub fn new(start: &[Vec3], end_cloud: &[Vec3], matches: &[usize]) -> Result<StraightLineMotion> {
        if start.len() != matches.len() {
            return Err(Error::LengthMismatch {
                left: start.len(),
                right: matches.len(),
            });
        }
        if let Some(&j) = matches.iter().find(|&&j| j >= end_cloud.len()) {
            return Err(Error::Config(format!("match index {j} out of range")));
        }
        Ok(StraightLineMotion {
            start: start.to_vec(),
            end: matches.iter().map(|&j| end_cloud[j]).collect(),
        })
    }

    pub fn pose_at(&self, t: f64) -> Vec<Vec3> {
        self.start.iter().zip(&self.end).map(|(a, b)| a + (b - a) * t).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::pointset::load_ply;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> TrainCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainCloud {
            positions: (0..n)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            colors: (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect(),
            features: (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect(),
        }
    }

    fn identity_fields() -> (UnaryField, UnaryField) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (
            UnaryField::new(0, &[8], Activation::Relu, &mut rng).unwrap(),
            UnaryField::new(1, &[8], Activation::Relu, &mut rng).unwrap(),
        )
    }

    fn stats() -> NormStats {
        NormStats {
            position_mean: Vec3::new(1.0, 2.0, -3.0),
            position_scale: 2.5,
            feature_mean: [0.0; 4],
            feature_scale: 1.0,
            position_weight: 1.0,
            position_scale_clamped: false,
            feature_scale_clamped: false,
        }
    }

    fn world(g: &TrainCloud) -> Vec<Vec3> {
        g.positions.iter().map(|p| stats().denormalize_position(p)).collect()
    }

    /// Sets the translation head's output bias so the field adds `t`
    /// everywhere.
    fn set_translation(f: &mut UnaryField, t: Vec3) {
        let n = f.translation.num_params();
        let p = f.translation.params_mut();
        p[n - 3] = t.x;
        p[n - 2] = t.y;
        p[n - 1] = t.z;
    }

    /// Sets the rotation head's output bias so the field rotates by `q`
    /// everywhere (the head output is added to the identity quaternion).
    fn set_rotation(f: &mut UnaryField, q: Quaternion) {
        let n = f.rotation.num_params();
        let p = f.rotation.params_mut();
        p[n - 4] = q.w - 1.0;
        p[n - 3] = q.x;
        p[n - 2] = q.y;
        p[n - 1] = q.z;
    }

    #[test]
    fn identity_fields_on_identical_clouds() {
        let (f0, f1) = identity_fields();
        let g = cloud(30, 1);
        let m = MotionModel::build(&f0, &f1, &g, &g, &world(&g), &EnergyConfig::default(), &stats(), "h").unwrap();
        assert_eq!(m.matches, (0..30).collect::<Vec<_>>());
        for r in &m.relative {
            assert!(r.rotation.angle() < 1e-12 && r.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn constant_translation_fields_give_that_offset() {
        let (f0, mut f1) = identity_fields();
        let d = Vec3::new(0.4, -0.2, 0.1);
        set_translation(&mut f1, -d);
        let g0 = cloud(25, 2);
        let g1 = TrainCloud {
            positions: g0.positions.iter().map(|p| p + d).collect(),
            ..g0.clone()
        };
        let m = MotionModel::build(&f0, &f1, &g0, &g1, &world(&g0), &EnergyConfig::default(), &stats(), "h").unwrap();
        assert_eq!(m.matches, (0..25).collect::<Vec<_>>());
        for r in &m.relative {
            assert!((r.translation - d).norm() < 1e-12);
        }
        let end = m.pose_normalized(1.0);
        for i in 0..25 {
            assert!((end[i] - g1.positions[i]).norm() < 1e-12);
        }
    }

    fn rotated_model() -> (MotionModel, Quaternion) {
        let (mut f0, mut f1) = identity_fields();
        let q0 = Quaternion::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.4).unwrap();
        let q1 = Quaternion::from_axis_angle(&Vec3::new(0.0, 0.0, 1.0), -std::f64::consts::FRAC_PI_2 + 0.4).unwrap();
        set_rotation(&mut f0, q0);
        set_translation(&mut f0, Vec3::new(0.1, 0.2, 0.3));
        set_rotation(&mut f1, q1);
        set_translation(&mut f1, Vec3::new(-0.3, 0.0, 0.2));
        let g0 = cloud(20, 3);
        let g1 = cloud(20, 4);
        let m = MotionModel::build(&f0, &f1, &g0, &g1, &world(&g0), &EnergyConfig::default(), &stats(), "h").unwrap();
        (m, (q1.conjugate() * q0).normalize().unwrap())
    }

    #[test]
    fn relative_transform_equals_canonical_round_trip() {
        let (m, q) = rotated_model();
        let end = m.pose_normalized(1.0);
        for i in 0..m.len() {
            assert!(m.relative[i].rotation.angle_to(&q) < 1e-9);
            assert!((m.relative[i].apply(&m.start_normalized[i]) - m.end_normalized[i]).norm() < 1e-9);
            assert!((end[i] - m.end_normalized[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn endpoints() {
        let (m, _) = rotated_model();
        assert_eq!(m.pose_at(0.0), m.start_world);
        let e = m.end_world();
        for (a, b) in m.pose_at(1.0).iter().zip(&e) {
            assert!((a - b).norm() < 1e-9);
        }
        let w = m.world_transforms();
        for i in 0..m.len() {
            assert!((w[i].apply(&m.start_world[i]) - e[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn ninety_degrees_doubles_to_one_eighty() {
        let (f0, mut f1) = identity_fields();
        let q = Quaternion::from_axis_angle(&Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2).unwrap();
        // F1 undoes the rotation, so the relative motion is q itself
        set_rotation(&mut f1, q.conjugate());
        let g0 = cloud(15, 5);
        let g1 = TrainCloud {
            positions: g0.positions.iter().map(|p| q.rotate(p)).collect(),
            ..g0.clone()
        };
        let m = MotionModel::build(&f0, &f1, &g0, &g1, &world(&g0), &EnergyConfig::default(), &stats(), "h").unwrap();
        let p2 = m.pose_normalized(2.0);
        for i in 0..15 {
            let mu = g0.positions[i];
            assert!((p2[i] - Vec3::new(-mu.x, -mu.y, mu.z)).norm() < 1e-9);
        }
    }

    #[test]
    fn trajectories_are_continuous() {
        let (m, _) = rotated_model();
        let max_angle = m.relative.iter().map(|r| r.rotation.angle()).fold(0.0, f64::max);
        let max_radius = m.start_normalized.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let max_t = m.relative.iter().map(|r| r.translation.norm()).fold(0.0, f64::max);
        let c = max_angle * max_radius + max_t;
        let dt = 1e-4;
        let mut prev = m.pose_normalized(-0.2);
        let mut t = -0.2;
        while t < 1.2 {
            t += dt;
            let next = m.pose_normalized(t);
            let step = prev.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(step <= c * dt * (1.0 + 1e-6), "{step} > {}", c * dt);
            prev = next;
        }
    }

    #[test]
    fn non_finite_fields_rejected() {
        let (mut f0, f1) = identity_fields();
        f0.translation.params_mut()[0] = f64::NAN;
        let g = cloud(5, 6);
        assert!(MotionModel::build(&f0, &f1, &g, &g, &world(&g), &EnergyConfig::default(), &stats(), "h").is_err());
    }

    fn template(m: &MotionModel) -> FeaturedPointCloud {
        FeaturedPointCloud::with_reduced(
            m.start_world.clone(),
            vec![Vec3::new(0.5, 0.5, 0.5); m.len()],
            vec![[0.1, 0.2, 0.3, 0.4]; m.len()],
        )
        .unwrap()
    }

    #[test]
    fn export_writes_frames_and_manifest() {
        let (m, _) = rotated_model();
        let dir = tempfile::tempdir().unwrap();
        let ts = [-0.2, -0.1, 0.0, 0.25, 0.5, 0.75, 1.0, 1.1, 1.2];
        let manifest = export_frames(&m, &ts, &template(&m), dir.path(), None, None).unwrap();
        assert_eq!(manifest.frames.len(), 9);
        let (back, files) = load_frames(dir.path()).unwrap();
        assert_eq!(back, manifest);
        let first = load_ply(&files[2].1).unwrap();
        for (a, b) in first.positions.iter().zip(&m.start_world) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        let t: TransformsFile = serde_json::from_slice(&fs::read(dir.path().join("transforms.json")).unwrap()).unwrap();
        assert_eq!(t.points.len(), m.len());
        assert_eq!(t.points[3].matched, m.matches[3]);
    }

    #[test]
    fn empty_timesteps_write_no_frames() {
        let (m, _) = rotated_model();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_frames(&m, &[], &template(&m), dir.path(), None, None).unwrap();
        assert!(manifest.frames.is_empty());
        assert!(!dir.path().join("frame_000.ply").exists());
    }

    #[test]
    fn model_json_round_trip() {
        let (m, _) = rotated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("motion.json");
        m.save(&path).unwrap();
        assert_eq!(MotionModel::load(&path).unwrap(), m);
    }

    #[test]
    fn straight_line_baseline() {
        let a = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::new(0.0, 2.0, 0.0), Vec3::new(4.0, 0.0, 0.0)];
        let s = StraightLineMotion::new(&a, &b, &[1, 0]).unwrap();
        assert_eq!(s.pose_at(0.5), vec![Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.5, 1.0, 0.0)]);
        assert!(StraightLineMotion::new(&a, &b, &[2, 0]).is_err());
    }
}
