//! Unary potential field: a per-timestep map from (feature, position) to an
//! SE(3) transform into the shared canonical space.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Quaternion, Se3, Vec3};
use crate::nn::{Activation, AdamState, Mlp, Mode, Tape};
use crate::pointset::{Feature, REDUCED_DIM};

/// Three normalized position coordinates followed by the reduced feature.
pub const FIELD_INPUT_DIM: usize = 3 + REDUCED_DIM;

/// Raw head outputs this close to `-(1, 0, 0, 0)` have no usable direction.
const MIN_QUAT_NORM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryField {
    /// `0` for the start state, `1` for the end state.
    pub timestep: u8,
    /// Outputs a quaternion offset added to the identity before normalizing.
    pub rotation: Mlp,
    /// Outputs the translation directly.
    pub translation: Mlp,
}

/// Gradients for both heads, in their flat parameter layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl FieldGrads {
    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
    }
}

fn input_row(mu: &Vec3, f: &Feature) -> [f64; FIELD_INPUT_DIM] {
    [mu.x, mu.y, mu.z, f[0], f[1], f[2], f[3]]
}

impl UnaryField {
    /// Fresh field whose output layers are zero, so it starts as the
    /// identity transform everywhere.
    pub fn new<R: Rng + ?Sized>(timestep: u8, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<UnaryField> {
        let sizes = |out: usize| {
            let mut s = vec![FIELD_INPUT_DIM];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Ok(UnaryField {
            timestep,
            rotation: Mlp::new(&sizes(4), activation, true, rng)?,
            translation: Mlp::new(&sizes(3), activation, true, rng)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.is_finite()
    }

    /// Eval-mode transform of one normalized point.
    pub fn transform(&self, feature: &Feature, mu: &Vec3) -> Result<Se3> {
        let pass = self.to_canonical(std::slice::from_ref(mu), std::slice::from_ref(feature), Mode::Eval, None)?;
        Ok(pass.transform(0))
    }

    /// Eval-mode transforms of many normalized points.
    pub fn transforms(&self, positions: &[Vec3], features: &[Feature]) -> Result<Vec<Se3>> {
        let pass = self.to_canonical(positions, features, Mode::Eval, None)?;
        Ok((0..pass.len()).map(|i| pass.transform(i)).collect())
    }

    /// Maps normalized points into canonical space, `mu_hat = R mu + t`.
    ///
    /// `position_mask` (length `3 N`) multiplies the position entries of the
    /// network input in train mode. The geometric `R mu + t` always uses the
    /// true `mu`.
    pub fn to_canonical(
        &self,
        positions: &[Vec3],
        features: &[Feature],
        mode: Mode,
        position_mask: Option<&[f64]>,
    ) -> Result<FieldPass> {
        let n = positions.len();
        if features.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: features.len(),
            });
        }
        let mut input = Array2::zeros((n, FIELD_INPUT_DIM));
        for i in 0..n {
            let row = input_row(&positions[i], &features[i]);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("field input row {i}")));
            }
            input.row_mut(i).as_slice_mut().expect("row-major").copy_from_slice(&row);
        }
        let mask = match (mode, position_mask) {
            (Mode::Train, Some(m)) => {
                if m.len() != 3 * n {
                    return Err(Error::shape(3 * n, m.len()));
                }
                let mut full = Array2::ones((n, FIELD_INPUT_DIM));
                for i in 0..n {
                    for k in 0..3 {
                        full[[i, k]] = m[3 * i + k];
                    }
                }
                Some(full)
            }
            _ => None,
        };
        let (qout, rot_tape) = self.rotation.forward(input.view(), mode, mask.as_ref().map(|m| m.view()))?;
        let (tout, trans_tape) = self.translation.forward(input.view(), mode, mask.as_ref().map(|m| m.view()))?;
        let mut raw = Vec::with_capacity(n);
        let mut rotations = Vec::with_capacity(n);
        let mut matrices = Vec::with_capacity(n);
        let mut translations = Vec::with_capacity(n);
        let mut canonical = Vec::with_capacity(n);
        for i in 0..n {
            let r = Quaternion::new(1.0 + qout[[i, 0]], qout[[i, 1]], qout[[i, 2]], qout[[i, 3]]);
            let norm = r.norm();
            if !(norm.is_finite() && norm > MIN_QUAT_NORM) {
                return Err(Error::DegenerateQuaternion);
            }
            let q = r.scale(1.0 / norm);
            let m = q.matrix_unchecked();
            let t = Vec3::new(tout[[i, 0]], tout[[i, 1]], tout[[i, 2]]);
            canonical.push(m * positions[i] + t);
            raw.push(r);
            rotations.push(q);
            matrices.push(m);
            translations.push(t);
        }
        Ok(FieldPass {
            positions: positions.to_vec(),
            raw,
            rotations,
            matrices,
            translations,
            canonical,
            rot_tape,
            trans_tape,
            grad_rot: vec![Mat3::zeros(); n],
            grad_trans: vec![Vec3::zeros(); n],
        })
    }

    pub fn apply_grads(&mut self, grads: &FieldGrads, rot: &mut AdamState, trans: &mut AdamState) -> Result<bool> {
        if !grads.is_finite() {
            rot.skipped += 1;
            trans.skipped += 1;
            return Ok(false);
        }
        self.rotation.adam_step(&grads.rotation, rot)?;
        self.translation.adam_step(&grads.translation, trans)?;
        Ok(true)
    }
}

/// One batched field evaluation plus gradient accumulators for its outputs.
#[derive(Debug, Clone)]
pub struct FieldPass {
    /// True (undropped) normalized input positions.
    pub positions: Vec<Vec3>,
    /// Quaternions before normalization.
    pub raw: Vec<Quaternion>,
    pub rotations: Vec<Quaternion>,
    pub matrices: Vec<Mat3>,
    pub translations: Vec<Vec3>,
    pub canonical: Vec<Vec3>,
    rot_tape: Tape,
    trans_tape: Tape,
    grad_rot: Vec<Mat3>,
    grad_trans: Vec<Vec3>,
}

impl FieldPass {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn transform(&self, i: usize) -> Se3 {
        Se3 {
            rotation: self.rotations[i],
            translation: self.translations[i],
        }
    }

    /// Adds `dL/d mu_hat_i`.
    pub fn add_canonical_grad(&mut self, i: usize, g: &Vec3) {
        self.grad_rot[i] += g * self.positions[i].transpose();
        self.grad_trans[i] += g;
    }

    /// Adds `dL/dR_i` for the rotation matrix.
    pub fn add_rotation_grad(&mut self, i: usize, g: &Mat3) {
        self.grad_rot[i] += g;
    }

    pub fn add_translation_grad(&mut self, i: usize, g: &Vec3) {
        self.grad_trans[i] += g;
    }

    /// Pulls the accumulated output gradients back to both heads.
    pub fn backward(&self, field: &UnaryField) -> Result<FieldGrads> {
        let n = self.len();
        let mut dq = Array2::zeros((n, 4));
        let mut dt = Array2::zeros((n, 3));
        for i in 0..n {
            let q = self.rotations[i];
            let gq = q.matrix_vjp(&self.grad_rot[i]);
            // through q = r / |r|
            let proj = q.w * gq[0] + q.x * gq[1] + q.y * gq[2] + q.z * gq[3];
            let inv = 1.0 / self.raw[i].norm();
            let qa = [q.w, q.x, q.y, q.z];
            for k in 0..4 {
                dq[[i, k]] = (gq[k] - qa[k] * proj) * inv;
            }
            for k in 0..3 {
                dt[[i, k]] = self.grad_trans[i][k];
            }
        }
        let (rotation, _) = field.rotation.backward(&self.rot_tape, dq.view())?;
        let (translation, _) = field.translation.backward(&self.trans_tape, dt.view())?;
        Ok(FieldGrads { rotation, translation })
    }
}

/// Rows of `(position, feature)` as a field input matrix, for callers that
/// want to drive the heads directly.
pub fn field_inputs(positions: &[Vec3], features: &[Feature]) -> Array2<f64> {
    let mut a = Array2::zeros((positions.len(), FIELD_INPUT_DIM));
    for (i, (p, f)) in positions.iter().zip(features).enumerate() {
        a.row_mut(i).as_slice_mut().expect("row-major").copy_from_slice(&input_row(p, f));
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::make_dropout_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> (Vec<Vec3>, Vec<Feature>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        (p, f)
    }

    /// A field with every parameter perturbed away from its identity init.
    fn busy_field(hidden: &[usize], seed: u64) -> UnaryField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = UnaryField::new(0, hidden, Activation::Tanh, &mut rng).unwrap();
        for p in f.rotation.params_mut().iter_mut().chain(f.translation.params_mut()) {
            *p += rng.gen_range(-0.3..0.3);
        }
        f
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = UnaryField::new(0, &[64, 64, 64], Activation::Relu, &mut rng).unwrap();
        let (p, f) = random_points(50, 2);
        let mask = make_dropout_mask(150, 0.5, &mut rng).unwrap();
        let pass = field.to_canonical(&p, &f, Mode::Train, Some(&mask)).unwrap();
        assert_eq!(pass.canonical, p);
        assert!(pass.rotations.iter().all(|q| *q == Quaternion::IDENTITY));
    }

    #[test]
    fn constant_translation_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut field = UnaryField::new(1, &[8], Activation::Relu, &mut rng).unwrap();
        let t0 = Vec3::new(0.5, -1.0, 2.0);
        let n = field.translation.num_params();
        field.translation.params_mut()[n - 3..].copy_from_slice(&[t0.x, t0.y, t0.z]);
        let (p, f) = random_points(20, 3);
        let pass = field.to_canonical(&p, &f, Mode::Eval, None).unwrap();
        for (c, mu) in pass.canonical.iter().zip(&p) {
            assert_eq!(*c, mu + t0);
        }
    }

    #[test]
    fn identical_inputs_identical_transforms() {
        let field = busy_field(&[16, 16], 5);
        let f = [0.1, 0.2, -0.3, 0.4];
        let mu = Vec3::new(0.3, -0.2, 0.9);
        let a = field.transform(&f, &mu).unwrap();
        let b = field.transform(&f, &mu).unwrap();
        assert_eq!(a, b);
        assert!((a.rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn continuous_in_feature() {
        let field = busy_field(&[16, 16], 6);
        let f = [0.1, 0.2, -0.3, 0.4];
        let mu = Vec3::new(0.3, -0.2, 0.9);
        let base = field.transform(&f, &mu).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..8 {
            let d = 10f64.powi(-k);
            let g = [f[0] + d, f[1] - d, f[2], f[3] + d];
            let t = field.transform(&g, &mu).unwrap();
            let diff = (t.translation - base.translation).norm() + t.rotation.angle_to(&base.rotation);
            assert!(diff <= last + 1e-15);
            last = diff;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn non_finite_input_rejected() {
        let field = busy_field(&[4], 7);
        let r = field.transform(&[f64::NAN, 0.0, 0.0, 0.0], &Vec3::zeros());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn full_drop_keeps_geometric_position() {
        let field = busy_field(&[16], 8);
        let (p, f) = random_points(10, 9);
        let zero_mask = vec![0.0; 30];
        let pass = field.to_canonical(&p, &f, Mode::Train, Some(&zero_mask)).unwrap();
        let origin = vec![Vec3::zeros(); 10];
        let blind = field.to_canonical(&origin, &f, Mode::Eval, None).unwrap();
        for i in 0..10 {
            // the nets saw zeros, but R mu + t used the real mu
            assert_eq!(pass.rotations[i], blind.rotations[i]);
            let want = blind.matrices[i] * p[i] + blind.translations[i];
            assert!((pass.canonical[i] - want).norm() < 1e-14);
        }
    }

    fn head_mut(f: &mut UnaryField, head: usize) -> &mut Mlp {
        if head == 0 {
            &mut f.rotation
        } else {
            &mut f.translation
        }
    }

    fn sum_sq(field: &UnaryField, p: &[Vec3], f: &[Feature]) -> f64 {
        let pass = field.to_canonical(p, f, Mode::Eval, None).unwrap();
        pass.canonical.iter().map(|c| c.norm_squared()).sum()
    }

    #[test]
    fn canonical_gradient_matches_finite_differences() {
        let mut field = busy_field(&[8, 8], 10);
        let (p, f) = random_points(12, 11);
        let mut pass = field.to_canonical(&p, &f, Mode::Eval, None).unwrap();
        for i in 0..p.len() {
            let g = 2.0 * pass.canonical[i];
            pass.add_canonical_grad(i, &g);
        }
        let grads = pass.backward(&field).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for head in 0..2 {
            let count = if head == 0 { field.rotation.num_params() } else { field.translation.num_params() };
            for k in 0..count {
                let orig = head_mut(&mut field, head).params()[k];
                head_mut(&mut field, head).params_mut()[k] = orig + h;
                let up = sum_sq(&field, &p, &f);
                head_mut(&mut field, head).params_mut()[k] = orig - h;
                let down = sum_sq(&field, &p, &f);
                head_mut(&mut field, head).params_mut()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = if head == 0 { grads.rotation[k] } else { grads.translation[k] };
                worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-5));
            }
        }
        assert!(worst <= 1e-4, "worst rel error {worst}");
    }
}
