//! Plain convolutional backbone producing a four-level pyramid.

use detr_tensor::{LevelShape, Parameter, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{DetrError, Result};
use crate::nn::ConvNorm;

pub const NUM_LEVELS: usize = 4;
pub const STRIDES: [usize; NUM_LEVELS] = [8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `[D, H_l, W_l]` per level, finest first.
    pub levels: Vec<Tensor>,
    pub strides: [usize; NUM_LEVELS],
    pub d_model: usize,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<LevelShape> {
        self.levels
            .iter()
            .map(|t| LevelShape { h: t.shape()[1], w: t.shape()[2] })
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.shapes().iter().map(LevelShape::cells).sum()
    }
}

/// Zero-pads a `[C,H,W]` image on the bottom and right to `[C,H2,W2]`.
pub fn pad_image(x: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(DetrError::Size(format!("image must be [C,H,W], got {:?}", x.shape())));
    };
    if h2 < h || w2 < w {
        return Err(DetrError::Size(format!("cannot pad {h}x{w} down to {h2}x{w2}")));
    }
    if (h2, w2) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            let (s, d) = (ch * h * w + y * w, ch * h2 * w2 + y * w2);
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(Tensor::from_op(vec![c, h2, w2], out, &[x], move || {
        Box::new(move |g| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    let (s, d) = (ch * h * w + y * w, ch * h2 * w2 + y * w2);
                    gx[s..s + w].copy_from_slice(&g[d..d + w]);
                }
            }
            vec![Some(gx)]
        })
    }))
}

/// Stage 1 (two stride-2 blocks) reaches stride 4; stages 2-4 each halve
/// again and feed the first three pyramid levels through 1×1 projections.
/// The fourth level is a stride-2 3×3 convolution on the last stage.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: [ConvNorm; 2],
    pub stages: [ConvNorm; 3],
    pub proj: [ConvNorm; 3],
    pub extra: ConvNorm,
    pub d_model: usize,
}

impl Backbone {
    pub fn new(channels: [usize; 4], d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [c1, c2, c3, c4] = channels;
        Ok(Self {
            stem: [
                ConvNorm::new("backbone.stem.0", 3, c1, 3, 2, true, rng)?,
                ConvNorm::new("backbone.stem.1", c1, c1, 3, 2, true, rng)?,
            ],
            stages: [
                ConvNorm::new("backbone.stage2", c1, c2, 3, 2, true, rng)?,
                ConvNorm::new("backbone.stage3", c2, c3, 3, 2, true, rng)?,
                ConvNorm::new("backbone.stage4", c3, c4, 3, 2, true, rng)?,
            ],
            proj: [
                ConvNorm::new("backbone.proj3", c2, d_model, 1, 1, false, rng)?,
                ConvNorm::new("backbone.proj4", c3, d_model, 1, 1, false, rng)?,
                ConvNorm::new("backbone.proj5", c4, d_model, 1, 1, false, rng)?,
            ],
            extra: ConvNorm::new("backbone.proj6", c4, d_model, 3, 2, false, rng)?,
            d_model,
        })
    }

    pub fn extract_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let [c, h, w] = *image.shape() else {
            return Err(DetrError::Size(format!("image must be [3,H,W], got {:?}", image.shape())));
        };
        if c != 3 {
            return Err(DetrError::Size(format!("image must have 3 channels, got {c}")));
        }
        if h < 64 || w < 64 {
            return Err(DetrError::Size(format!("image {h}x{w} is smaller than 64 px")));
        }
        let x = pad_image(image, h.div_ceil(64) * 64, w.div_ceil(64) * 64)?;
        let mut x = self.stem[1].forward(&self.stem[0].forward(&x)?)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for (stage, proj) in self.stages.iter().zip(&self.proj) {
            x = stage.forward(&x)?;
            levels.push(proj.forward(&x)?);
        }
        levels.push(self.extra.forward(&x)?);
        debug_assert!(levels.iter().all(|l| l.shape()[0] == self.d_model));
        Ok(FeaturePyramid { levels, strides: STRIDES, d_model: self.d_model })
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.stem
            .iter()
            .chain(&self.stages)
            .chain(&self.proj)
            .chain(std::iter::once(&self.extra))
            .flat_map(ConvNorm::params)
            .collect()
    }
}
