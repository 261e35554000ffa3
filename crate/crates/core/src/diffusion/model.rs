//! Conditional MLP noise predictor with hand-written reverse-mode gradients.
//!
//! Input row: `[x_t | sinusoidal(t) | cond_embedding]`. Every linear layer but
//! the last is followed by SiLU, and the input image is optionally added to
//! the output. Weights are stored `in × out` row-major so a
//! batch forward is one GEMM per layer. The condition table has one extra
//! row, the null condition, at index `cond_count`.

use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b, RngState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Flattened image length (height × width).
    pub image_len: usize,
    pub hidden: usize,
    /// Number of linear layers, at least 2.
    pub layers: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Number of real conditions; the null condition is extra.
    pub cond_count: usize,
    /// Adds `x_t` to the network output, so the layers learn the residual
    /// `ε − x_t`.
    #[serde(default = "yes")]
    pub skip: bool,
}

fn yes() -> bool {
    true
}

impl DenoiserConfig {
    /// 16×16 greyscale, three layers of width 256.
    pub fn toy(cond_count: usize) -> Self {
        Self {
            image_len: 256,
            hidden: 256,
            layers: 3,
            time_dim: 32,
            cond_dim: 32,
            cond_count,
            skip: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image_len + self.time_dim + self.cond_dim
    }

    pub fn null_condition(&self) -> usize {
        self.cond_count
    }

    fn validate(&self) -> Result<(), DiffusionError> {
        if self.layers < 2 {
            return Err(DiffusionError::Config("denoiser needs at least 2 layers".into()));
        }
        if self.image_len == 0 || self.hidden == 0 || self.cond_dim == 0 {
            return Err(DiffusionError::Config("zero-sized denoiser dimension".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(DiffusionError::Config("time_dim must be even and nonzero".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let input = if l == 0 { self.input_dim() } else { self.hidden };
                let output = if l + 1 == self.layers { self.image_len } else { self.hidden };
                (input, output)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    cond_table: Vec<f32>,
    layers: Vec<Linear>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    batch: usize,
    conds: Vec<usize>,
    /// Input to each layer (the first is the assembled input row block).
    inputs: Vec<Vec<f32>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f32>>,
}

impl ForwardCache {
    /// Post-SiLU activations of the last hidden layer, `batch × hidden`.
    pub fn penultimate(&self) -> &[f32] {
        self.inputs.last().expect("at least two layers")
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f32) -> f32 {
    z * sigmoid(z)
}

fn silu_grad(z: f32) -> f32 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal timestep features: `sin(t·ω_i)` then `cos(t·ω_i)` with
/// `ω_i = 10000^(−i/half)`.
pub fn time_embedding(t: usize, dim: usize, out: &mut [f32]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = libm::exp(-(10000f64).ln() * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg) as f32;
        out[half + i] = libm::cos(arg) as f32;
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut RngState) -> Result<Self, DiffusionError> {
        config.validate()?;
        let rows = config.cond_count + 1;
        let cond_table = (0..rows * config.cond_dim)
            .map(|_| rng.standard_normal() as f32)
            .collect();
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let std = (1.0 / i as f64).sqrt();
                Linear {
                    in_dim: i,
                    out_dim: o,
                    weight: (0..i * o).map(|_| (rng.standard_normal() * std) as f32).collect(),
                    bias: vec![0.0; o],
                }
            })
            .collect();
        Ok(Self {
            config,
            cond_table,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Named parameter buffers in a fixed order: condition table, then each
    /// layer's weight and bias.
    pub fn params(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![("cond_table".into(), &self.cond_table)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.weight"), &layer.weight));
            out.push((format!("layer{l}.bias"), &layer.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.cond_table];
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Shapes of the buffers returned by [`Denoiser::params`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![self.config.cond_count + 1, self.config.cond_dim]];
        for layer in &self.layers {
            out.push(vec![layer.in_dim, layer.out_dim]);
            out.push(vec![layer.out_dim]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Rebuilds a model from buffers in [`Denoiser::params`] order.
    pub fn from_params(config: DenoiserConfig, buffers: Vec<Vec<f32>>) -> Result<Self, DiffusionError> {
        config.validate()?;
        let dims = config.layer_dims();
        if buffers.len() != 1 + 2 * dims.len() {
            return Err(DiffusionError::Config(format!(
                "expected {} parameter buffers, got {}",
                1 + 2 * dims.len(),
                buffers.len()
            )));
        }
        let mut it = buffers.into_iter();
        let cond_table = it.next().expect("length checked");
        if cond_table.len() != (config.cond_count + 1) * config.cond_dim {
            return Err(DiffusionError::Config("cond_table size mismatch".into()));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (l, (i, o)) in dims.into_iter().enumerate() {
            let weight = it.next().expect("length checked");
            let bias = it.next().expect("length checked");
            if weight.len() != i * o || bias.len() != o {
                return Err(DiffusionError::Config(format!("layer {l} size mismatch")));
            }
            layers.push(Linear {
                in_dim: i,
                out_dim: o,
                weight,
                bias,
            });
        }
        Ok(Self {
            config,
            cond_table,
            layers,
        })
    }

    pub(crate) fn check_cond(&self, cond: usize) -> Result<(), DiffusionError> {
        if cond > self.config.cond_count {
            return Err(DiffusionError::UnknownCondition {
                cond,
                vocab: self.config.cond_count,
            });
        }
        Ok(())
    }

    /// Batched forward. `x` is `batch × image_len`; returns the predicted
    /// noise (same layout) and the activation cache.
    pub fn forward(
        &self,
        x: &[f32],
        ts: &[usize],
        conds: &[usize],
    ) -> Result<(Vec<f32>, ForwardCache), DiffusionError> {
        let c = &self.config;
        let batch = ts.len();
        if conds.len() != batch || x.len() != batch * c.image_len {
            return Err(DiffusionError::Shape(format!(
                "batch of {batch} timesteps, {} conditions, {} inputs",
                conds.len(),
                x.len()
            )));
        }
        for &cond in conds {
            self.check_cond(cond)?;
        }
        let width = c.input_dim();
        let mut input = vec![0.0f32; batch * width];
        for b in 0..batch {
            let row = &mut input[b * width..(b + 1) * width];
            row[..c.image_len].copy_from_slice(&x[b * c.image_len..(b + 1) * c.image_len]);
            time_embedding(ts[b], c.time_dim, &mut row[c.image_len..c.image_len + c.time_dim]);
            row[c.image_len + c.time_dim..]
                .copy_from_slice(&self.cond_table[conds[b] * c.cond_dim..(conds[b] + 1) * c.cond_dim]);
        }

        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        let mut output = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(batch * layer.out_dim);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            matmul(
                inputs.last().expect("non-empty"),
                &layer.weight,
                &mut z,
                batch,
                layer.in_dim,
                layer.out_dim,
                true,
            );
            if l == last {
                if c.skip {
                    for (o, &xv) in z.iter_mut().zip(x) {
                        *o += xv;
                    }
                }
                output = z;
            } else {
                let a = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
                inputs.push(a);
            }
        }
        Ok((
            output,
            ForwardCache {
                batch,
                conds: conds.to_vec(),
                inputs,
                pre,
            },
        ))
    }

    /// Single-sample convenience wrapper.
    pub fn predict(&self, x: &[f32], t: usize, cond: usize) -> Result<Vec<f32>, DiffusionError> {
        Ok(self.forward(x, &[t], &[cond])?.0)
    }

    /// Reverse pass. `grad_out` is `∂loss/∂output` for the cached batch.
    /// Returns gradients in [`Denoiser::params`] order.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f32]) -> Vec<Vec<f32>> {
        let c = &self.config;
        let batch = cache.batch;
        let n = self.layers.len();
        let mut layer_grads: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(n);
        let mut dz = grad_out.to_vec();
        let mut d_input = Vec::new();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let a_prev = &cache.inputs[l];
            let mut dw = vec![0.0f32; layer.in_dim * layer.out_dim];
            matmul_at_b(a_prev, &dz, &mut dw, batch, layer.in_dim, layer.out_dim, false);
            let mut db = vec![0.0f32; layer.out_dim];
            for row in dz.chunks_exact(layer.out_dim) {
                for (g, &v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
            let mut da = vec![0.0f32; batch * layer.in_dim];
            matmul_a_bt(&dz, &layer.weight, &mut da, batch, layer.out_dim, layer.in_dim, false);
            layer_grads.push((dw, db));
            if l > 0 {
                let z = &cache.pre[l - 1];
                dz = da.iter().zip(z).map(|(&g, &zv)| g * silu_grad(zv)).collect();
            } else {
                d_input = da;
            }
        }
        let mut d_cond = vec![0.0f32; self.cond_table.len()];
        let width = c.input_dim();
        let offset = c.image_len + c.time_dim;
        for (b, &cond) in cache.conds.iter().enumerate() {
            let src = &d_input[b * width + offset..(b + 1) * width];
            let dst = &mut d_cond[cond * c.cond_dim..(cond + 1) * c.cond_dim];
            for (g, &v) in dst.iter_mut().zip(src) {
                *g += v;
            }
        }
        let mut out = vec![d_cond];
        for (dw, db) in layer_grads.into_iter().rev() {
            out.push(dw);
            out.push(db);
        }
        out
    }
}
