//! Low-rank additive adapters on every weight matrix.
//!
//! Each input-major weight matrix `W` (`inputs x outputs`) gets a delta
//! `U V` with `U` of shape `inputs x rank` and `V` of shape `rank x outputs`.
//! `V` starts at zero, so a fresh adapter materializes to the base
//! parameters exactly. Biases and the condition table stay frozen.

use super::{LayerSlot, ParamVector};
use crate::error::{Error, Result};
use crate::rng::{standard_normal2, Stream};

#[derive(Debug, Clone, Copy)]
struct FactorSlot {
    layer: LayerSlot,
    u: usize,
    v: usize,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    rank: usize,
    base: ParamVector,
    factors: Vec<f64>,
    slots: Vec<FactorSlot>,
}

impl Adapter {
    pub fn new(base: ParamVector, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        let mut slots = Vec::new();
        let mut offset = 0;
        for layer in &base.shape().layers {
            let u = offset;
            let v = u + layer.inputs * rank;
            offset = v + rank * layer.outputs;
            slots.push(FactorSlot { layer: *layer, u, v });
        }
        let mut factors = vec![0.0; offset];
        let mut rng = Stream::new(seed, "adapter-init").rng(0);
        for slot in &slots {
            let std = 1.0 / (slot.layer.inputs as f64).sqrt();
            for pair in factors[slot.u..slot.v].chunks_mut(2) {
                let z = standard_normal2(&mut rng);
                for (f, zi) in pair.iter_mut().zip(z) {
                    *f = zi * std;
                }
            }
        }
        Ok(Adapter {
            rank,
            base,
            factors,
            slots,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn base(&self) -> &ParamVector {
        &self.base
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [f64] {
        &mut self.factors
    }

    /// `theta + delta` as a full parameter vector.
    pub fn materialize(&self) -> ParamVector {
        let mut out = self.base.clone();
        let r = self.rank;
        let values = out.values_mut();
        for s in &self.slots {
            let (n_in, n_out) = (s.layer.inputs, s.layer.outputs);
            let u = &self.factors[s.u..s.v];
            let v = &self.factors[s.v..s.v + r * n_out];
            for i in 0..n_in {
                let w = &mut values[s.layer.w + i * n_out..s.layer.w + (i + 1) * n_out];
                for k in 0..r {
                    let a = u[i * r + k];
                    for (wo, vo) in w.iter_mut().zip(&v[k * n_out..(k + 1) * n_out]) {
                        *wo += a * vo;
                    }
                }
            }
        }
        out
    }

    /// Chain rule from a full-parameter gradient to the factor gradient.
    pub fn project_grad(&self, full: &[f64], out: &mut [f64]) {
        let r = self.rank;
        out.fill(0.0);
        for s in &self.slots {
            let (n_in, n_out) = (s.layer.inputs, s.layer.outputs);
            let g = &full[s.layer.w..s.layer.w + n_in * n_out];
            let u = &self.factors[s.u..s.v];
            let v = &self.factors[s.v..s.v + r * n_out];
            let (du, dv) = out[s.u..s.v + r * n_out].split_at_mut(n_in * r);
            for i in 0..n_in {
                let gi = &g[i * n_out..(i + 1) * n_out];
                for k in 0..r {
                    let vk = &v[k * n_out..(k + 1) * n_out];
                    du[i * r + k] = gi.iter().zip(vk).map(|(a, b)| a * b).sum();
                    let a = u[i * r + k];
                    for (d, gio) in dv[k * n_out..(k + 1) * n_out].iter_mut().zip(gi) {
                        *d += a * gio;
                    }
                }
            }
        }
    }
}
