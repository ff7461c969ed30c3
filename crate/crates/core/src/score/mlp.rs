//! A small fully connected score network with hand-written reverse mode.
//!
//! Input layout per row is `[x; emb(t); cond]`; the network output lives
//! in state space (same width as `x`).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::Rng;

use super::{check_batch, ScoreModel};
use crate::math::{cos, exp, sin, sqrt, tanh};
use crate::error::{check_len, contract, Result};
use crate::rng;
use crate::sde::NonUniformSde;

/// Width of the sinusoidal time features.
pub const TIME_EMBED_DIM: usize = 8;

/// `[sin(w_k t), cos(w_k t)]` for `w_k = (pi / 2) 2^k`, `k = 0..4`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let w = FRAC_PI_2 * (1u32 << k) as f64;
        out[2 * k] = sin(w * t);
        out[2 * k + 1] = cos(w * t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => tanh(z),
            Activation::Silu => z / (1.0 + exp(-z)),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let th = tanh(z);
                1.0 - th * th
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + exp(-z));
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Silu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Silu),
            _ => None,
        }
    }
}

/// Multi-layer perceptron. Parameters are stored flat, layer by layer, each
/// layer as its row-major weight matrix (`out x in`) followed by its bias.
/// Hidden layers use `activation`; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dim: usize,
    cond_dim: usize,
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl Mlp {
    /// Zero-initialised network with hidden widths `hidden`.
    pub fn zeros(dim: usize, cond_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        if dim == 0 {
            return Err(contract("score network needs a positive state dimension"));
        }
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim + TIME_EMBED_DIM + cond_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        if sizes.contains(&0) {
            return Err(contract("layer widths must be positive"));
        }
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dim,
            cond_dim,
            sizes,
            activation,
            params: vec![0.0; n],
        })
    }

    /// Gaussian initialisation with variance `1 / fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(dim, cond_dim, hidden, activation)?;
        let mut offset = 0;
        for w in mlp.sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / sqrt(fan_in as f64);
            for p in &mut mlp.params[offset..offset + fan_in * fan_out] {
                *p = scale * rng::normal(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    /// Rebuilds a network from serialized parts.
    pub fn from_parts(
        dim: usize,
        cond_dim: usize,
        sizes: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes[0] != dim + TIME_EMBED_DIM + cond_dim || *sizes.last().unwrap() != dim {
            return Err(contract("layer sizes inconsistent with input and output dimensions"));
        }
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        check_len("network parameters", n, params.len())?;
        Ok(Self {
            dim,
            cond_dim,
            sizes,
            activation,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out)
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let o = offset;
            offset += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn assemble_input(&self, x: &[f64], cond: &[f64], t: f64, input: &mut [f64]) {
        input[..self.dim].copy_from_slice(x);
        input[self.dim..self.dim + TIME_EMBED_DIM].copy_from_slice(&time_embedding(t));
        input[self.dim + TIME_EMBED_DIM..].copy_from_slice(cond);
    }

    /// Forward pass recording every layer's pre-activation and activation.
    pub fn forward_tape(&self, x: &[f64], cond: &[f64], t: &[f64]) -> Result<ForwardTape> {
        let n = t.len();
        check_len("network input rows", n * self.dim, x.len())?;
        check_len("network condition rows", n * self.cond_dim, cond.len())?;
        let n_layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut input = vec![0.0; n * self.sizes[0]];
        for r in 0..n {
            self.assemble_input(
                &x[r * self.dim..(r + 1) * self.dim],
                &cond[r * self.cond_dim..(r + 1) * self.cond_dim],
                t[r],
                &mut input[r * self.sizes[0]..(r + 1) * self.sizes[0]],
            );
        }
        acts.push(input);
        for (l, (offset, fan_in, fan_out)) in self.layers().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let a_in = &acts[l];
            let mut z = vec![0.0; n * fan_out];
            for r in 0..n {
                let xin = &a_in[r * fan_in..(r + 1) * fan_in];
                for j in 0..fan_out {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    z[r * fan_out + j] = b[j] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let last = l + 1 == n_layers;
            let a_out = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            acts.push(a_out);
        }
        Ok(ForwardTape {
            rows: n,
            sizes: self.sizes.clone(),
            pre,
            acts,
        })
    }

    /// Reverse-mode gradient of the loss with respect to every parameter,
    /// given `dL/d output` for the rows recorded in `tape`.
    pub fn backward(&self, tape: &ForwardTape, grad_out: &[f64]) -> Result<Vec<f64>> {
        if tape.sizes != self.sizes {
            return Err(contract("forward tape was recorded by a different network"));
        }
        let n = tape.rows;
        check_len("output gradient", n * self.dim, grad_out.len())?;
        let mut grads = vec![0.0; self.params.len()];
        let layers: Vec<_> = self.layers().collect();
        let mut delta = grad_out.to_vec();
        for l in (0..layers.len()).rev() {
            let (offset, fan_in, fan_out) = layers[l];
            if l + 1 != layers.len() {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= self.activation.derivative(z);
                }
            }
            let a_in = &tape.acts[l];
            let (gw, rest) = grads[offset..].split_at_mut(fan_in * fan_out);
            let gb = &mut rest[..fan_out];
            for r in 0..n {
                let dr = &delta[r * fan_out..(r + 1) * fan_out];
                let xr = &a_in[r * fan_in..(r + 1) * fan_in];
                for j in 0..fan_out {
                    let dj = dr[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (g, &xi) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(xr) {
                        *g += dj * xi;
                    }
                }
            }
            if l > 0 {
                let w = &self.params[offset..offset + fan_in * fan_out];
                let mut next = vec![0.0; n * fan_in];
                for r in 0..n {
                    let dr = &delta[r * fan_out..(r + 1) * fan_out];
                    let nr = &mut next[r * fan_in..(r + 1) * fan_in];
                    for j in 0..fan_out {
                        let dj = dr[j];
                        if dj == 0.0 {
                            continue;
                        }
                        for (o, &wji) in nr.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                            *o += dj * wji;
                        }
                    }
                }
                delta = next;
            }
        }
        Ok(grads)
    }
}

/// Cached intermediate values of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    rows: usize,
    sizes: Vec<usize>,
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl ScoreModel for Mlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self, x, cond, t, out)?;
        let tape = self.forward_tape(x, cond, t)?;
        out.copy_from_slice(tape.output());
        Ok(())
    }
}

/// Input scale `1 / sqrt(m^2 + s^2)`: unit variance for unit-variance data.
pub(crate) fn input_scale(mean_scale: f64, std: f64) -> f64 {
    1.0 / sqrt(mean_scale * mean_scale + std * std)
}

/// Network preconditioned by the perturbation kernel of each coordinate:
/// `s(x, t) = net(x / sqrt(m(t)^2 + s(t)^2), t) / s(t)`.
#[derive(Debug, Clone)]
pub struct KernelScaled<M> {
    pub inner: M,
    pub sde: NonUniformSde,
}

impl<M: ScoreModel> KernelScaled<M> {
    pub fn new(inner: M, sde: NonUniformSde) -> Result<Self> {
        check_len("scaled network dimension", sde.dim(), inner.dim())?;
        Ok(Self { inner, sde })
    }
}

impl<M: ScoreModel> ScoreModel for KernelScaled<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self, x, cond, t, out)?;
        let d = self.dim();
        let mut xin = x.to_vec();
        let mut stds = Vec::with_capacity(x.len());
        let mut last_t = f64::NAN;
        let (mut m, mut s) = (Vec::new(), Vec::new());
        for (r, &time) in t.iter().enumerate() {
            if time != last_t {
                (m, s) = self.sde.kernel_vectors(time)?;
                last_t = time;
            }
            for i in 0..d {
                xin[r * d + i] *= input_scale(m[i], s[i]);
            }
            stds.extend_from_slice(&s);
        }
        self.inner.score_batch(&xin, cond, t, out)?;
        for (o, s) in out.iter_mut().zip(&stds) {
            *o /= s;
        }
        Ok(())
    }
}
