//! Small feed-forward building blocks shared by the encoder, the structural
//! nets, and the decoder: linear layers, leaky-relu MLPs, optional layer
//! normalization and skip connections between equal-width hidden layers.
//!
//! Parameters live as plain tensors; `lift` registers them on a tape (as
//! trainable params or frozen constants) and returns handles used to build
//! the forward graph. `for_each_param` walks tensors in the same fixed order
//! the lift does, which is what keeps optimizer state aligned.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    /// (fan_in, fan_out)
    pub w: Tensor,
    /// (fan_out,)
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Linear { w: Tensor::randn_scaled(&[fan_in, fan_out], std, rng), b: Tensor::zeros(&[fan_out]) }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Per hidden layer: (scale, shift), present when layer norm is on.
    pub ln: Vec<(Tensor, Tensor)>,
    pub layer_norm: bool,
    pub skip: bool,
    pub slope: f64,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]. Hidden layers use leaky-relu.
    pub fn new<R: Rng>(dims: &[usize], layer_norm: bool, skip: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let gain = if i + 2 == dims.len() { 1.0 } else { 2f64.sqrt() };
            layers.push(Linear::init(dims[i], dims[i + 1], gain, rng));
        }
        let ln = if layer_norm {
            dims[1..dims.len() - 1]
                .iter()
                .map(|&h| (Tensor::full(&[h], 1.0), Tensor::zeros(&[h])))
                .collect()
        } else {
            Vec::new()
        };
        Mlp { layers, ln, layer_norm, skip, slope: LEAKY_SLOPE }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap().w.shape()[0]
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for i in 0..self.layers.len() {
            f(&mut self.layers[i].w);
            f(&mut self.layers[i].b);
            if self.layer_norm && i < self.ln.len() {
                f(&mut self.ln[i].0);
                f(&mut self.ln[i].1);
            }
        }
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> MlpVars {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut ln = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push((reg(&layer.w), reg(&layer.b)));
            if self.layer_norm && i < self.ln.len() {
                ln.push((reg(&self.ln[i].0), reg(&self.ln[i].1)));
            }
        }
        MlpVars { layers, ln, layer_norm: self.layer_norm, skip: self.skip, slope: self.slope }
    }

    /// Rebuilds tape handles from vars registered in `for_each_param`
    /// order, advancing `cursor` past the consumed entries. Used where the
    /// caller owns registration, e.g. finite-difference checks.
    pub fn vars_from_slice(&self, vars: &[Var], cursor: &mut usize) -> MlpVars {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut ln = Vec::new();
        for i in 0..self.layers.len() {
            layers.push((vars[*cursor], vars[*cursor + 1]));
            *cursor += 2;
            if self.layer_norm && i < self.ln.len() {
                ln.push((vars[*cursor], vars[*cursor + 1]));
                *cursor += 2;
            }
        }
        MlpVars { layers, ln, layer_norm: self.layer_norm, skip: self.skip, slope: self.slope }
    }

    /// Tape-free forward for evaluation paths. Must agree with the lifted
    /// apply bit for bit (covered by a unit test).
    pub fn apply_plain(&self, x: &Tensor) -> Result<Tensor> {
        use crate::autodiff::{binary_broadcast, matmul2};
        let mut h = x.clone();
        let n_layers = self.layers.len();
        let mut prev_hidden: Option<Tensor> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = matmul2(&h, &layer.w, false, false)?;
            z = binary_broadcast(&z, &layer.b, |a, b| a + b)?;
            if i + 1 == n_layers {
                return Ok(z);
            }
            if self.layer_norm {
                z = layer_norm_plain(&z, &self.ln[i].0, &self.ln[i].1);
            }
            let mut a = z.map(|v| if v > 0.0 { v } else { self.slope * v });
            if self.skip {
                if let Some(p) = &prev_hidden {
                    if p.shape() == a.shape() {
                        a = binary_broadcast(&a, p, |x, y| x + y)?;
                    }
                }
                prev_hidden = Some(a.clone());
            }
            h = a;
        }
        unreachable!()
    }
}

fn layer_norm_plain(z: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let hdim = *z.shape().last().unwrap();
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(hdim) {
        let mean = row.iter().sum::<f64>() / hdim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hdim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale.data()[j] + shift.data()[j];
        }
    }
    out
}

pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub ln: Vec<(Var, Var)>,
    pub layer_norm: bool,
    pub skip: bool,
    pub slope: f64,
}

impl MlpVars {
    /// Forward over rows: x is (N, input_dim) -> (N, output_dim).
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let n_layers = self.layers.len();
        let mut h = x;
        let mut prev_hidden: Option<Var> = None;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut z = tape.add(tape.matmul(h, w)?, b)?;
            if i + 1 == n_layers {
                return Ok(z);
            }
            if self.layer_norm {
                z = layer_norm_on_tape(tape, z, self.ln[i].0, self.ln[i].1)?;
            }
            let mut a = tape.leaky_relu(z, self.slope);
            if self.skip {
                if let Some(p) = prev_hidden {
                    if tape.shape_of(p) == tape.shape_of(a) {
                        a = tape.add(a, p)?;
                    }
                }
                prev_hidden = Some(a);
            }
            h = a;
        }
        unreachable!()
    }
}

/// Normalize rows to zero mean / unit variance over the last axis, then apply
/// a learned affine.
pub fn layer_norm_on_tape(tape: &Tape, z: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape_of(z);
    let last = shape.len() - 1;
    let hdim = shape[last] as f64;
    let mean = tape.scale(tape.sum_axes(z, &[last], true)?, 1.0 / hdim);
    let centered = tape.sub(z, mean)?;
    let var = tape.scale(tape.sum_axes(tape.square(centered), &[last], true)?, 1.0 / hdim);
    let inv = tape.sqrt(tape.add_scalar(var, LN_EPS))?;
    let normed = tape.div(centered, inv)?;
    tape.add(tape.mul(normed, scale)?, shift)
}
