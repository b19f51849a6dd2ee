//! Deterministic two-state synthetic scenes with ground-truth
//! correspondences, plus scoring helpers and a Euclidean nearest-neighbor
//! baseline.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quaternion, Se3, Vec3};
use crate::kdtree::KdTree;
use crate::pointset::{Feature, FeaturedPointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box surface centered at the origin.
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    /// Closed cylinder along `z`, centered at the origin.
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Box { size } => size.iter().all(|s| s.is_finite() && *s >= 0.0) && size.iter().filter(|s| **s > 0.0).count() >= 2,
            Shape::Sphere { radius } => radius.is_finite() && radius > 0.0,
            Shape::Cylinder { radius, height } => radius.is_finite() && radius > 0.0 && height.is_finite() && height >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate shape {self:?}")))
        }
    }

    /// Uniform sample on the surface.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Shape::Box { size } => {
                let [a, b, c] = size;
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 5;
                for (k, area) in areas.iter().enumerate() {
                    if pick < *area {
                        face = k;
                        break;
                    }
                    pick -= area;
                }
                let u = rng.gen::<f64>() - 0.5;
                let v = rng.gen::<f64>() - 0.5;
                let sign = if face % 2 == 0 { 0.5 } else { -0.5 };
                match face / 2 {
                    0 => Vec3::new(sign * a, u * b, v * c),
                    1 => Vec3::new(u * a, sign * b, v * c),
                    _ => Vec3::new(u * a, v * b, sign * c),
                }
            }
            Shape::Sphere { radius } => loop {
                let v = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                let n = v.norm();
                if n > 1e-3 && n <= 0.5 {
                    break v * (radius / n);
                }
            },
            Shape::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let pick = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                if pick < side {
                    let z = (rng.gen::<f64>() - 0.5) * height;
                    Vec3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if pick < side + cap { 0.5 * height } else { -0.5 * height };
                    Vec3::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    pub count: usize,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
    pub feature: Feature,
    pub start: Se3,
    pub end: Se3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
    /// Gaussian position noise, drawn independently for each state.
    #[serde(default)]
    pub noise: f64,
    /// Per-point feature jitter, shared by both states.
    #[serde(default = "default_jitter")]
    pub feature_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.01
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Config("scene has no parts".into()));
        }
        for p in &self.parts {
            p.shape.validate()?;
            if p.count == 0 {
                return Err(Error::Config(format!("part `{}` has no points", p.name)));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("part `{}` color outside [0, 1]", p.name)));
            }
            for t in [&p.start, &p.end] {
                if !t.is_finite() || (t.rotation.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!("part `{}` has a non-unit rotation", p.name)));
                }
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.feature_jitter.is_finite() && self.feature_jitter >= 0.0) {
            return Err(Error::Config("noise and feature_jitter must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalizes part rotations so hand-written JSON may use any scale.
    pub fn normalized(mut self) -> Result<SceneSpec> {
        for p in &mut self.parts {
            p.start = Se3::new(p.start.rotation, p.start.translation)?;
            p.end = Se3::new(p.end.rotation, p.end.translation)?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTruth {
    pub name: String,
    pub start: Se3,
    pub end: Se3,
    /// World-space motion of the part, `end * start^-1`.
    pub motion: Se3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Index in the end cloud of each start point's partner.
    pub matches: Vec<usize>,
    /// Part of each start point.
    pub start_part: Vec<usize>,
    /// Part of each end point.
    pub end_part: Vec<usize>,
    pub parts: Vec<PartTruth>,
    pub noise: f64,
    /// Noise-free end positions indexed like the end cloud.
    #[serde(with = "crate::geometry::vec3_seq")]
    pub clean_end: Vec<Vec3>,
}

impl GroundTruth {
    /// World transform carrying start point `i` to its partner.
    pub fn motion_of(&self, i: usize) -> &Se3 {
        &self.parts[self.start_part[i]].motion
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub start: FeaturedPointCloud,
    pub end: FeaturedPointCloud,
    pub truth: GroundTruth,
}

/// Samples every part once, places it by both transforms, and shuffles the
/// end cloud. Bit-deterministic per seed.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.len();
    let jitter = Normal::new(0.0, spec.feature_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut p0 = Vec::with_capacity(n);
    let mut p1 = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut feats: Vec<Feature> = Vec::with_capacity(n);
    let mut part_of = Vec::with_capacity(n);
    for (k, part) in spec.parts.iter().enumerate() {
        for _ in 0..part.count {
            let local = part.shape.sample(&mut rng);
            p0.push(part.start.apply(&local));
            p1.push(part.end.apply(&local));
            colors.push(Vec3::from(part.color));
            let f: Feature = std::array::from_fn(|d| {
                let j = if spec.feature_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                part.feature[d] + j
            });
            feats.push(f);
            part_of.push(k);
        }
    }
    let clean_unshuffled = p1.clone();
    if spec.noise > 0.0 {
        for p in p0.iter_mut() {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
        for p in p1.iter_mut() {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut end_pos = vec![Vec3::zeros(); n];
    let mut clean_end = vec![Vec3::zeros(); n];
    let mut end_colors = vec![Vec3::zeros(); n];
    let mut end_feats = vec![[0.0; 4]; n];
    let mut end_part = vec![0; n];
    for i in 0..n {
        let j = perm[i];
        end_pos[j] = p1[i];
        clean_end[j] = clean_unshuffled[i];
        end_colors[j] = colors[i];
        end_feats[j] = feats[i];
        end_part[j] = part_of[i];
    }
    let parts = spec
        .parts
        .iter()
        .map(|p| PartTruth {
            name: p.name.clone(),
            start: p.start,
            end: p.end,
            motion: p.end.compose(&p.start.inverse()),
        })
        .collect();
    Ok(Scene {
        start: FeaturedPointCloud::with_reduced(p0, colors, feats)?,
        end: FeaturedPointCloud::with_reduced(end_pos, end_colors, end_feats)?,
        truth: GroundTruth {
            matches: perm,
            start_part: part_of,
            end_part,
            parts,
            noise: spec.noise,
            clean_end,
        },
    })
}

/// Fraction of start points matched to their true partner. With noise, a
/// match also counts when it lands within `3 sigma sqrt(3)` of the partner's
/// noise-free position.
pub fn score_correspondence(predicted: &[usize], truth: &GroundTruth, end_positions: &[Vec3]) -> Result<f64> {
    if predicted.len() != truth.matches.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.matches.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(1.0);
    }
    let radius = 3.0 * truth.noise * 3f64.sqrt();
    let hits = predicted
        .iter()
        .zip(&truth.matches)
        .filter(|(&p, &t)| {
            p == t || (truth.noise > 0.0 && p < end_positions.len() && (end_positions[p] - truth.clean_end[t]).norm() <= radius)
        })
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Fraction of start points matched into the correct part.
pub fn part_accuracy(predicted: &[usize], truth: &GroundTruth) -> Result<f64> {
    if predicted.len() != truth.start_part.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.start_part.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(1.0);
    }
    let hits = predicted
        .iter()
        .enumerate()
        .filter(|(i, &j)| j < truth.end_part.len() && truth.end_part[j] == truth.start_part[*i])
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartScore {
    pub name: String,
    pub median_rotation_deg: f64,
    pub median_translation_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformScore {
    pub median_rotation_deg: f64,
    /// Median of `|T_pred(p) - T_true(p)|` over the bbox diagonal.
    pub median_translation_frac: f64,
    pub parts: Vec<PartScore>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Rotation and translation error of predicted world-space per-point
/// transforms against each point's part motion. Translation error is
/// measured at the point itself and divided by `bbox_diagonal`.
pub fn score_transforms(predicted: &[Se3], truth: &GroundTruth, start_positions: &[Vec3], bbox_diagonal: f64) -> Result<TransformScore> {
    let n = truth.start_part.len();
    if predicted.len() != n || start_positions.len() != n {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: n,
        });
    }
    let diag = if bbox_diagonal > 0.0 { bbox_diagonal } else { 1.0 };
    let mut rot = vec![Vec::new(); truth.parts.len()];
    let mut trans = vec![Vec::new(); truth.parts.len()];
    for i in 0..n {
        let k = truth.start_part[i];
        let t = &truth.parts[k].motion;
        let p = &start_positions[i];
        rot[k].push(predicted[i].rotation.angle_to(&t.rotation).to_degrees());
        trans[k].push((predicted[i].apply(p) - t.apply(p)).norm() / diag);
    }
    let parts = truth
        .parts
        .iter()
        .enumerate()
        .map(|(k, p)| PartScore {
            name: p.name.clone(),
            median_rotation_deg: median(rot[k].clone()),
            median_translation_frac: median(trans[k].clone()),
        })
        .collect();
    Ok(TransformScore {
        median_rotation_deg: median(rot.concat()),
        median_translation_frac: median(trans.concat()),
        parts,
    })
}

/// Each start point matched to its Euclidean nearest end point.
pub fn euclidean_nn_matches(start: &[Vec3], end: &[Vec3]) -> Result<Vec<usize>> {
    if end.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let tree = KdTree::new(end.iter().map(|p| [p.x, p.y, p.z]).collect());
    Ok(start
        .iter()
        .map(|p| tree.nearest(&[p.x, p.y, p.z]).expect("non-empty").index)
        .collect())
}

fn rot(axis: [f64; 3], degrees: f64) -> Quaternion {
    Quaternion::from_axis_angle(&Vec3::from(axis), degrees.to_radians()).expect("nonzero axis")
}

fn place(q: Quaternion, t: [f64; 3]) -> Se3 {
    Se3 {
        rotation: q,
        translation: Vec3::from(t),
    }
}

/// Bundled scenes.
pub mod presets {
    use super::*;

    /// Two small parts with a mild motion; fast enough for end-to-end runs.
    pub fn smoke() -> SceneSpec {
        SceneSpec {
            parts: vec![
                PartSpec {
                    name: "block".into(),
                    shape: Shape::Box { size: [0.8, 0.5, 0.3] },
                    count: 160,
                    color: [0.8, 0.3, 0.2],
                    feature: [1.0, 0.0, 0.0, 0.0],
                    start: Se3::IDENTITY,
                    end: place(rot([0.0, 0.0, 1.0], 20.0), [0.3, 0.1, 0.0]),
                },
                PartSpec {
                    name: "ball".into(),
                    shape: Shape::Sphere { radius: 0.25 },
                    count: 120,
                    color: [0.2, 0.4, 0.8],
                    feature: [0.0, 1.0, 0.0, 0.0],
                    start: place(Quaternion::IDENTITY, [0.0, 0.0, 0.6]),
                    end: place(Quaternion::IDENTITY, [0.2, 0.0, 0.7]),
                },
            ],
            noise: 0.0,
            feature_jitter: 0.01,
            seed: 7,
        }
    }

    /// One box moved by a 60 degree rotation and a translation of 1.5
    /// diameters.
    pub fn rigid(count: usize) -> SceneSpec {
        let size = [1.0, 0.6, 0.35];
        let diameter = size.iter().map(|s| s * s).sum::<f64>().sqrt();
        let axis = Vec3::new(0.3, 0.2, 1.0).normalize();
        let shift = Vec3::new(1.0, 0.4, 0.2).normalize() * (1.5 * diameter);
        SceneSpec {
            parts: vec![PartSpec {
                name: "box".into(),
                shape: Shape::Box { size },
                count,
                color: [0.7, 0.6, 0.3],
                feature: [0.5, -0.2, 0.1, 0.3],
                start: Se3::IDENTITY,
                end: place(rot([axis.x, axis.y, axis.z], 60.0), [shift.x, shift.y, shift.z]),
            }],
            noise: 0.0,
            feature_jitter: 0.01,
            seed: 3,
        }
    }

    /// Two same-color boxes with distinct features that trade places.
    pub fn criss_cross(count_per_part: usize) -> SceneSpec {
        let size = [0.6, 0.4, 0.4];
        let left = [-0.8, 0.0, 0.0];
        let right = [0.8, 0.0, 0.0];
        let part = |name: &str, feature: Feature, from: [f64; 3], to: [f64; 3]| PartSpec {
            name: name.into(),
            shape: Shape::Box { size },
            count: count_per_part,
            color: [0.5, 0.5, 0.5],
            feature,
            start: place(Quaternion::IDENTITY, from),
            end: place(Quaternion::IDENTITY, to),
        };
        SceneSpec {
            parts: vec![
                part("left", [1.0, 0.0, 0.0, 0.0], left, right),
                part("right", [-1.0, 0.0, 0.0, 0.0], right, left),
            ],
            noise: 0.0,
            feature_jitter: 0.01,
            seed: 4,
        }
    }

    /// Default lid clearance for [`articulated_box`].
    pub const ARTICULATED_GAP: f64 = 0.7;

    /// A fixed base and a lid swung open by 90 degrees about a hinge along
    /// `y`. The lid floats `gap` above the base so their neighborhoods stay
    /// separate.
    pub fn articulated_box(base_count: usize, lid_count: usize, gap: f64) -> SceneSpec {
        let base = [1.0, 1.0, 0.5];
        let lid = [1.0, 1.0, 0.08];
        let hinge = Vec3::new(0.5, 0.0, 0.5 * base[2] + gap);
        // lid center relative to the hinge line
        let rel = Vec3::new(-0.5 * lid[0], 0.0, 0.5 * lid[2]);
        let start = place(Quaternion::IDENTITY, (hinge + rel).into());
        let q = rot([0.0, 1.0, 0.0], 90.0);
        let end = place(q, (hinge + q.rotate(&rel)).into());
        SceneSpec {
            parts: vec![
                PartSpec {
                    name: "base".into(),
                    shape: Shape::Box { size: base },
                    count: base_count,
                    color: [0.6, 0.4, 0.2],
                    feature: [1.0, 0.5, 0.0, 0.0],
                    start: Se3::IDENTITY,
                    end: Se3::IDENTITY,
                },
                PartSpec {
                    name: "lid".into(),
                    shape: Shape::Box { size: lid },
                    count: lid_count,
                    color: [0.3, 0.5, 0.7],
                    feature: [-1.0, 0.5, 0.0, 0.0],
                    start,
                    end,
                },
            ],
            noise: 0.0,
            feature_jitter: 0.01,
            seed: 5,
        }
    }
}
