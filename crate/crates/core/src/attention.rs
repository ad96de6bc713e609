//! Multi-scale deformable attention and plain multi-head self-attention.

use std::f64::consts::PI;

use detr_tensor::{ms_deform_sample, multi_head_attention, LevelShape, Parameter, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::backbone::NUM_LEVELS;
use crate::config::RefDim;
use crate::error::{DetrError, Result};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub d_model: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize, points: usize) -> Result<Self> {
        if heads == 0 || points == 0 || d_model % heads != 0 {
            return Err(DetrError::Config(format!(
                "attention needs heads >= 1, points >= 1 and d_model divisible by heads (d={d_model}, M={heads}, K={points})"
            )));
        }
        Ok(Self { heads, points, levels: NUM_LEVELS, d_model })
    }

    /// Sampling points per query over all heads and levels.
    pub fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Per-query sampling parameters. `offsets` is `[N, M·L·K·2]`, `weights` is
/// `[N, M·L·K]`, both ordered (head, level, point).
#[derive(Debug, Clone)]
pub struct SamplingField {
    pub offsets: Tensor,
    pub weights: Tensor,
}

/// Turns references and offsets into absolute sampling locations.
///
/// Box references scale offsets by half their width and height; point
/// references add them unscaled.
pub fn sampling_locations(refs: &Tensor, offsets: &Tensor, samples: usize) -> Result<Tensor> {
    let (n, r) = (refs.shape().first().copied().unwrap_or(0), refs.shape().get(1).copied().unwrap_or(0));
    if refs.ndim() != 2 || !(r == 2 || r == 4) || offsets.shape() != [n, samples * 2] {
        return Err(DetrError::Tensor(detr_tensor::TensorError::Shape {
            op: "sampling_locations",
            lhs: refs.shape().to_vec(),
            rhs: offsets.shape().to_vec(),
        }));
    }
    let (rd, od) = (refs.data(), offsets.data());
    let mut out = vec![0.0; n * samples * 2];
    for q in 0..n {
        let rf = &rd[q * r..(q + 1) * r];
        let (sx, sy) = if r == 4 { (rf[2] / 2.0, rf[3] / 2.0) } else { (1.0, 1.0) };
        for s in 0..samples {
            let i = (q * samples + s) * 2;
            out[i] = rf[0] + od[i] * sx;
            out[i + 1] = rf[1] + od[i + 1] * sy;
        }
    }
    let (refs_c, offs_c) = (refs.clone(), offsets.clone());
    Ok(Tensor::from_op(vec![n, samples * 2], out, &[refs, offsets], move || {
        Box::new(move |g| {
            let (rd, od) = (refs_c.data(), offs_c.data());
            let mut gr = vec![0.0; n * r];
            let mut go = vec![0.0; n * samples * 2];
            for q in 0..n {
                let rf = &rd[q * r..(q + 1) * r];
                let (sx, sy) = if r == 4 { (rf[2] / 2.0, rf[3] / 2.0) } else { (1.0, 1.0) };
                for s in 0..samples {
                    let i = (q * samples + s) * 2;
                    gr[q * r] += g[i];
                    gr[q * r + 1] += g[i + 1];
                    go[i] = g[i] * sx;
                    go[i + 1] = g[i + 1] * sy;
                    if r == 4 {
                        gr[q * r + 2] += g[i] * od[i] / 2.0;
                        gr[q * r + 3] += g[i + 1] * od[i + 1] / 2.0;
                    }
                }
            }
            vec![Some(gr), Some(go)]
        })
    }))
}

#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub cfg: AttentionConfig,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out_proj: Linear,
}

/// Initial offsets: K points on a circle per (head, level), rotated per head.
pub fn radial_offsets(cfg: &AttentionConfig, mode: RefDim) -> Vec<f64> {
    let mut bias = Vec::with_capacity(cfg.samples() * 2);
    for m in 0..cfg.heads {
        for l in 0..cfg.levels {
            let radius = match mode {
                RefDim::Box => 0.25 * (l + 1) as f64,
                RefDim::Point => 0.0625 * (1 << l) as f64,
            };
            for k in 0..cfg.points {
                let theta = 2.0 * PI * (k as f64 / cfg.points as f64 + m as f64 / (cfg.heads * cfg.points) as f64);
                bias.push(radius * theta.cos());
                bias.push(radius * theta.sin());
            }
        }
    }
    bias
}

impl DeformableAttention {
    pub fn new(name: &str, cfg: AttentionConfig, mode: RefDim, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, s) = (cfg.d_model, cfg.samples());
        Ok(Self {
            cfg,
            value_proj: Linear::new(&format!("{name}.value_proj"), d, d, rng)?,
            offsets: Linear::from_values(&format!("{name}.sampling_offsets"), d, 2 * s, vec![0.0; d * 2 * s], radial_offsets(&cfg, mode))?,
            weights: Linear::zeros(&format!("{name}.attention_weights"), d, s)?,
            out_proj: Linear::new(&format!("{name}.output_proj"), d, d, rng)?,
        })
    }

    pub fn sampling_field(&self, query: &Tensor) -> Result<SamplingField> {
        let n = query.shape()[0];
        let c = self.cfg;
        let logits = self.weights.forward(query)?;
        let weights = logits
            .reshape(&[n * c.heads, c.levels * c.points])?
            .softmax(1)?
            .reshape(&[n, c.samples()])?;
        Ok(SamplingField { offsets: self.offsets.forward(query)?, weights })
    }

    /// `query: [N,D]`, `refs: [N,2|4]`, `value: [S,D]` laid out level by level.
    pub fn forward(&self, query: &Tensor, refs: &Tensor, value: &Tensor, levels: &[LevelShape]) -> Result<Tensor> {
        if levels.len() != self.cfg.levels {
            return Err(DetrError::Size(format!(
                "deformable attention expects {} levels, got {}",
                self.cfg.levels,
                levels.len()
            )));
        }
        let field = self.sampling_field(query)?;
        let loc = sampling_locations(refs, &field.offsets, self.cfg.samples())?;
        let v = self.value_proj.forward(value)?;
        let sampled = ms_deform_sample(&v, levels, &loc, &field.weights, self.cfg.heads, self.cfg.points)?;
        self.out_proj.forward(&sampled)
    }

    pub fn params(&self) -> Vec<Parameter> {
        [&self.value_proj, &self.offsets, &self.weights, &self.out_proj]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Scaled dot-product attention among a set of queries.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl SelfAttention {
    pub fn new(name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            heads,
            q_proj: Linear::new(&format!("{name}.q_proj"), d, d, rng)?,
            k_proj: Linear::new(&format!("{name}.k_proj"), d, d, rng)?,
            v_proj: Linear::new(&format!("{name}.v_proj"), d, d, rng)?,
            out_proj: Linear::new(&format!("{name}.out_proj"), d, d, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.q_proj.forward(x)?;
        let k = self.k_proj.forward(x)?;
        let v = self.v_proj.forward(x)?;
        self.out_proj.forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }
}
