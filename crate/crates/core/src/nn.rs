//! Small feedforward networks with hand-written reverse-mode gradients, an
//! Adam optimizer, policy/discriminator heads and a finite-difference
//! gradient checker.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its
//! `out x in` weight matrix row-major followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture descriptor; serialized as the header of a parameter blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub version: u32,
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

/// Intermediate values recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Rectifier hidden layers, linear output, uniform fan-in init.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        Self::with_activations(sizes, Activation::Relu, Activation::Identity, rng)
    }

    pub fn with_activations<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&n| n > 0),
            "bad layer sizes {sizes:?}"
        );
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend((0..w[1]).map(|_| rng.random_range(-bound..bound)));
        }
        Self {
            arch: Architecture {
                version: BLOB_VERSION,
                sizes: sizes.to_vec(),
                hidden,
                output,
            },
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&n| n > 0),
            "bad layer sizes {sizes:?}"
        );
        Self {
            arch: Architecture {
                version: BLOB_VERSION,
                sizes: sizes.to_vec(),
                hidden: Activation::Relu,
                output: Activation::Identity,
            },
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if arch.version != BLOB_VERSION {
            return Err(Error::invalid(format!(
                "unsupported parameter blob version {}",
                arch.version
            )));
        }
        if arch.sizes.len() < 2 || param_count(&arch.sizes) != params.len() {
            return Err(Error::shape(param_count(&arch.sizes), params.len()));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of weight `(row, col)` of layer `layer`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        self.layer_offset(layer) + row * self.arch.sizes[layer] + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        let (fan_in, fan_out) = (self.arch.sizes[layer], self.arch.sizes[layer + 1]);
        debug_assert!(row < fan_out);
        self.layer_offset(layer) + fan_in * fan_out + row
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.arch.sizes[..=layer])
    }

    fn n_layers(&self) -> usize {
        self.arch.sizes.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.arch.output
        } else {
            self.arch.hidden
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), input.len()));
        }
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut x = input.to_vec();
        let mut offset = 0;
        for layer in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.arch.sizes[layer], self.arch.sizes[layer + 1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let z: Vec<f64> = (0..fan_out)
                .map(|r| {
                    bias[r]
                        + weights[r * fan_in..(r + 1) * fan_in]
                            .iter()
                            .zip(&x)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                })
                .collect();
            let act = self.activation(layer);
            let y = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, y));
            pre.push(z);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Trace { inputs, pre, output: x })
    }

    /// Accumulates `d(loss)/d(params)` into `grads` given `d(loss)/d(output)`,
    /// and returns `d(loss)/d(input)`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grads: &mut GradientBuffer) -> Result<Vec<f64>> {
        if trace.pre.len() != self.n_layers() || trace.inputs.iter().zip(&self.arch.sizes).any(|(x, &n)| x.len() != n) {
            return Err(Error::invalid("trace does not belong to this network"));
        }
        if grad_output.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), grad_output.len()));
        }
        if grads.0.len() != self.n_params() {
            return Err(Error::shape(self.n_params(), grads.0.len()));
        }
        let mut upstream = grad_output.to_vec();
        for layer in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.arch.sizes[layer], self.arch.sizes[layer + 1]);
            let offset = self.layer_offset(layer);
            let act = self.activation(layer);
            let out = if layer + 1 == self.n_layers() {
                &trace.output
            } else {
                &trace.inputs[layer + 1]
            };
            let dz: Vec<f64> = (0..fan_out)
                .map(|r| upstream[r] * act.derivative(trace.pre[layer][r], out[r]))
                .collect();
            let x = &trace.inputs[layer];
            let mut dx = vec![0.0; fan_in];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = offset + r * fan_in;
                for c in 0..fan_in {
                    grads.0[row + c] += g * x[c];
                    dx[c] += g * self.params[row + c];
                }
                grads.0[offset + fan_in * fan_out + r] += dz[r];
            }
            upstream = dx;
        }
        Ok(upstream)
    }

    pub fn zero_grad(&self) -> GradientBuffer {
        GradientBuffer(vec![0.0; self.n_params()])
    }
}

/// Per-parameter gradient accumulator mirroring an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Adam with bias correction. `step` descends; negate gradients to ascend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), params.len().max(grads.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Smoothly bounded log standard deviation and its derivative.
pub fn bounded_log_std(raw: f64) -> (f64, f64) {
    let t = raw.tanh();
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    (LOG_STD_MIN + half * (t + 1.0), half * (1.0 - t * t))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density and gradients of a tanh-squashed diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianEval {
    pub log_prob: f64,
    /// d log_prob / d mean, per action dimension.
    pub d_mean: Vec<f64>,
    /// d log_prob / d raw log-std, per action dimension.
    pub d_raw_log_std: Vec<f64>,
}

/// Largest |a| accepted before the inverse squash saturates.
pub const ACTION_BOUND: f64 = 1.0 - 1e-6;

/// `log pi(a)` for a fixed action in (-1, 1)^k, including the
/// change-of-variables term of the tanh squash.
pub fn squashed_gaussian_log_prob(mean: &[f64], raw_log_std: &[f64], action: &[f64]) -> Result<SquashedGaussianEval> {
    if mean.len() != action.len() || raw_log_std.len() != action.len() {
        return Err(Error::shape(action.len(), mean.len()));
    }
    let mut out = SquashedGaussianEval {
        log_prob: 0.0,
        d_mean: Vec::with_capacity(action.len()),
        d_raw_log_std: Vec::with_capacity(action.len()),
    };
    for i in 0..action.len() {
        let a = action[i].clamp(-ACTION_BOUND, ACTION_BOUND);
        let u = a.atanh();
        let (log_std, dls) = bounded_log_std(raw_log_std[i]);
        let std = log_std.exp();
        let z = (u - mean[i]) / std;
        out.log_prob += -0.5 * z * z - log_std - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        out.d_mean.push(z / std);
        out.d_raw_log_std.push((z * z - 1.0) * dls);
    }
    Ok(out)
}

/// A reparameterized draw `a = tanh(mean + std * eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    /// Total derivative of `log_prob` w.r.t. mean with `eps` held fixed.
    pub dlogp_d_mean: Vec<f64>,
    pub dlogp_d_raw: Vec<f64>,
    /// d action / d mean and d action / d raw log-std (diagonal).
    pub da_d_mean: Vec<f64>,
    pub da_d_raw: Vec<f64>,
}

pub fn squashed_gaussian_rsample(mean: &[f64], raw_log_std: &[f64], eps: &[f64]) -> SquashedGaussianSample {
    let k = mean.len();
    let mut out = SquashedGaussianSample {
        action: Vec::with_capacity(k),
        log_prob: 0.0,
        dlogp_d_mean: Vec::with_capacity(k),
        dlogp_d_raw: Vec::with_capacity(k),
        da_d_mean: Vec::with_capacity(k),
        da_d_raw: Vec::with_capacity(k),
    };
    for i in 0..k {
        let (log_std, dls) = bounded_log_std(raw_log_std[i]);
        let std = log_std.exp();
        let u = mean[i] + std * eps[i];
        let a = u.tanh();
        out.action.push(a);
        out.log_prob += -0.5 * eps[i] * eps[i] - log_std - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        // d/du of -log(1 - tanh^2 u) is 2 tanh u.
        out.dlogp_d_mean.push(2.0 * a);
        out.dlogp_d_raw.push((-1.0 + 2.0 * a * std * eps[i]) * dls);
        let sech2 = 1.0 - a * a;
        out.da_d_mean.push(sech2);
        out.da_d_raw.push(sech2 * std * eps[i] * dls);
    }
    out
}

/// Central finite-difference check of `analytic` against `loss` on the
/// parameter indices in `coords`. Returns the largest relative error,
/// measured as `|g - fd| / max(|g|, |fd|, floor)`.
pub fn max_relative_gradient_error<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    floor: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = loss(&probe);
            probe[i] = orig - step;
            let down = loss(&probe);
            probe[i] = orig;
            let fd = (up - down) / (2.0 * step);
            (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Up to `n` distinct random coordinates of a parameter vector.
pub fn sample_coords<R: Rng + ?Sized>(n_params: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if n >= n_params {
        return (0..n_params).collect();
    }
    rand::seq::index::sample(rng, n_params, n).into_vec()
}
