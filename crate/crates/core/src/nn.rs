//! Dense multilayer perceptron with hand-written reverse mode, Adam, and
//! inverted input dropout.
//!
//! Parameters live in one flat buffer, layer by layer: the `in x out` weight
//! matrix in row-major order followed by the `out` bias. Gradients use the
//! same layout, so the optimizer never needs to know the architecture.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matmul::matmul;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.activation == other.activation && self.params == other.params
    }
}

/// Everything backward needs from one forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    /// Input after masking.
    input: Array2<f64>,
    mask: Option<Array2<f64>>,
    /// Post-activation output of every hidden layer.
    hidden: Vec<Array2<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Kaiming-uniform hidden layers with zero biases. With `zero_last` the
    /// output layer starts at zero so the net outputs exactly zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, zero_last: bool, rng: &mut R) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if zero_last && l + 1 == layers {
                params.extend(std::iter::repeat(0.0).take(fan_in * fan_out));
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            params,
            generation: next_generation(),
        })
    }

    /// Builds a net from explicit flat parameters.
    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::shape(param_count(sizes), params.len()));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            params,
            generation: next_generation(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Any tape recorded before this call becomes stale.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Weight (`in x out`) and bias views of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let weight = ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layout");
        let bias = ArrayView1::from(&self.params[off + i * o..off + i * o + o]);
        (weight, bias)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Batched forward pass over the rows of `x`.
    ///
    /// In train mode `mask` (same shape as `x`) multiplies the input
    /// element-wise; eval mode ignores it.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, mask: Option<ArrayView2<f64>>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("{} input columns", self.input_dim()), x.ncols()));
        }
        let mask = match (mode, mask) {
            (Mode::Train, Some(m)) => {
                if m.dim() != x.dim() {
                    return Err(Error::shape(format!("{:?} mask", x.dim()), format!("{:?}", m.dim())));
                }
                Some(m.to_owned())
            }
            _ => None,
        };
        let input = match &mask {
            Some(m) => &x * m,
            None => x.to_owned(),
        };
        let layers = self.sizes.len() - 1;
        let mut hidden = Vec::with_capacity(layers - 1);
        let mut out = None;
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let prev = if l == 0 { &input } else { &hidden[l - 1] };
            let mut h = matmul(prev.view(), w);
            h += &b;
            if l + 1 < layers {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
                hidden.push(h);
            } else {
                out = Some(h);
            }
        }
        let tape = Tape {
            generation: self.generation,
            input,
            mask,
            hidden,
        };
        Ok((out.expect("at least one layer"), tape))
    }

    /// Single-row convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, x: &[f64], mode: Mode, mask: Option<&[f64]>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let mv = mask.map(|m| ArrayView2::from_shape((1, m.len()), m)).transpose().map_err(|_| Error::shape(x.len(), "mask"))?;
        let (y, _) = self.forward(xv, mode, mv)?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    /// Reverse pass. Returns flat parameter gradients and the gradient with
    /// respect to the unmasked input.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape {
                tape: tape.generation,
                network: self.generation,
            });
        }
        let rows = tape.input.nrows();
        if upstream.dim() != (rows, self.output_dim()) {
            return Err(Error::shape(
                format!("{rows}x{}", self.output_dim()),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let layers = self.sizes.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = upstream.to_owned();
        for l in (0..layers).rev() {
            let prev = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let gw = matmul(prev.t(), delta.view());
            let gb = delta.sum_axis(Axis(0));
            let base = offsets[l];
            grads[base..base + i * o].copy_from_slice(gw.as_slice().expect("standard layout"));
            grads[base + i * o..base + i * o + o].copy_from_slice(gb.as_slice().expect("contiguous"));
            let (w, _) = self.layer(l);
            let mut next = matmul(delta.view(), w.t());
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut next)
                    .and(prev)
                    .for_each(|d, &a| *d *= act.grad_from_output(a));
            }
            delta = next;
        }
        if let Some(m) = &tape.mask {
            delta *= m;
        }
        Ok((grads, delta))
    }
}

/// Adam optimizer state for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `false` (and leaves everything
/// but the skip counter untouched) when any gradient is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(params.len(), format!("{} grads, {} moments", grads.len(), state.m.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - state.beta1.powf(t);
    let c2 = 1.0 - state.beta2.powf(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(true)
}

impl Mlp {
    pub fn adam_step(&mut self, grads: &[f64], state: &mut AdamState) -> Result<bool> {
        adam_step(self.params_mut(), grads, state)
    }
}

/// Inverted-dropout multipliers: each slot is `0` with probability `ratio`
/// and `1 / (1 - ratio)` otherwise.
pub fn make_dropout_mask<R: Rng + ?Sized>(slots: usize, ratio: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("dropout ratio must be in [0, 1), got {ratio}")));
    }
    if ratio == 0.0 {
        return Ok(vec![1.0; slots]);
    }
    let keep = 1.0 / (1.0 - ratio);
    Ok((0..slots).map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep }).collect())
}
