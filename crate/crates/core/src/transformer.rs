//! Deformable encoder over pyramid tokens and the container decoder.

use detr_tensor::{concat_cols, concat_rows, LevelShape, Parameter, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, DeformableAttention, SelfAttention};
use crate::backbone::FeaturePyramid;
use crate::boxes::BoxCXCYWH;
use crate::config::RefDim;
use crate::error::Result;
use crate::heads::{DetectionHead, DetectionSet};
use crate::nn::{normal, FeedForward, LayerNorm};

const TEMPERATURE: f64 = 10000.0;
pub const INV_SIGMOID_EPS: f64 = 1e-5;

/// Sinusoidal embedding of each coordinate in `coords` (values in `[0,1]`),
/// `dim` channels per coordinate, concatenated in coordinate order.
pub fn sine_embed(coords: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &v in coords {
        let x = v * 2.0 * std::f64::consts::PI;
        for i in 0..dim / 2 {
            let t = x / TEMPERATURE.powf(2.0 * i as f64 / dim as f64);
            out.push(t.sin());
            out.push(t.cos());
        }
    }
    out
}

/// Flattened encoder tokens with their level and cell-center position.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    /// `[S, D]`, level-major and row-major inside a level.
    pub features: Tensor,
    pub level_index: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub shapes: Vec<LevelShape>,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.level_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level_index.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.features.shape()[1]
    }

    /// `[S, 2]` cell centers.
    pub fn position_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 2], self.positions.iter().flatten().copied().collect())
            .expect("positions are S x 2")
    }
}

/// Flattens a pyramid into tokens without any encoding.
pub fn flatten_pyramid(pyramid: &FeaturePyramid) -> Result<EncoderMemory> {
    let shapes = pyramid.shapes();
    let mut parts = Vec::with_capacity(shapes.len());
    let mut level_index = Vec::new();
    let mut positions = Vec::new();
    for (l, (t, s)) in pyramid.levels.iter().zip(&shapes).enumerate() {
        let d = t.shape()[0];
        parts.push(t.reshape(&[d, s.cells()])?.transpose()?);
        for y in 0..s.h {
            for x in 0..s.w {
                level_index.push(l);
                positions.push([(x as f64 + 0.5) / s.w as f64, (y as f64 + 0.5) / s.h as f64]);
            }
        }
    }
    Ok(EncoderMemory { features: concat_rows(&parts)?, level_index, positions, shapes })
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(name: &str, cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: DeformableAttention::new(&format!("{name}.attn"), cfg, RefDim::Point, rng)?,
            norm1: LayerNorm::new(&format!("{name}.norm1"), d)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), d, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward(&self, src: &Tensor, pos: &Tensor, refs: &Tensor, shapes: &[LevelShape]) -> Result<Tensor> {
        let attn = self.attn.forward(&src.add(pos)?, refs, src, shapes)?;
        let src = self.norm1.forward(&src.add(&attn)?)?;
        self.norm2.forward(&src.add(&self.ffn.forward(&src)?)?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.attn.params();
        p.extend(self.norm1.params());
        p.extend(self.ffn.params());
        p.extend(self.norm2.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub level_embed: Parameter,
}

impl Encoder {
    pub fn new(num_layers: usize, cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| EncoderLayer::new(&format!("encoder.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let level_embed = Parameter::new(
            "encoder.level_embed",
            &[cfg.levels, cfg.d_model],
            normal(rng, cfg.levels * cfg.d_model, 1.0),
        )?;
        Ok(Self { layers, level_embed })
    }

    pub fn encode(&self, pyramid: &FeaturePyramid) -> Result<EncoderMemory> {
        let mut mem = flatten_pyramid(pyramid)?;
        if self.layers.is_empty() {
            return Ok(mem);
        }
        let d = mem.d_model();
        let sine: Vec<f64> = mem.positions.iter().flat_map(|p| sine_embed(p, d / 2)).collect();
        let pos = Tensor::new(&[mem.len(), d], sine)?.add(&self.level_embed.tensor().gather_rows(&mem.level_index)?)?;
        let refs = mem.position_tensor();
        let mut x = mem.features.clone();
        for layer in &self.layers {
            x = layer.forward(&x, &pos, &refs, &mem.shapes)?;
        }
        mem.features = x;
        Ok(mem)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p: Vec<Parameter> = self.layers.iter().flat_map(EncoderLayer::params).collect();
        p.push(self.level_embed.clone());
        p
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attn: DeformableAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(name: &str, cfg: AttentionConfig, mode: RefDim, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: SelfAttention::new(&format!("{name}.self_attn"), d, cfg.heads, rng)?,
            norm1: LayerNorm::new(&format!("{name}.norm1"), d)?,
            cross_attn: DeformableAttention::new(&format!("{name}.cross_attn"), cfg, mode, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), d)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), d, rng)?,
            norm3: LayerNorm::new(&format!("{name}.norm3"), d)?,
        })
    }

    pub fn forward(&self, tgt: &Tensor, pos: &Tensor, refs: &Tensor, memory: &EncoderMemory) -> Result<Tensor> {
        let sa = self.self_attn.forward(&tgt.add(pos)?)?;
        let tgt = self.norm1.forward(&tgt.add(&sa)?)?;
        let ca = self.cross_attn.forward(&tgt.add(pos)?, refs, &memory.features, &memory.shapes)?;
        let tgt = self.norm2.forward(&tgt.add(&ca)?)?;
        self.norm3.forward(&tgt.add(&self.ffn.forward(&tgt)?)?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.self_attn.params();
        p.extend(self.norm1.params());
        p.extend(self.cross_attn.params());
        p.extend(self.norm2.params());
        p.extend(self.ffn.params());
        p.extend(self.norm3.params());
        p
    }
}

/// Paired reference and query for every detection hypothesis.
#[derive(Debug, Clone)]
pub struct Containers {
    /// `[N, D]`.
    pub queries: Tensor,
    /// `[N, 2]` centers or `[N, 4]` boxes.
    pub refs: Tensor,
    pub source_index: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Point([f64; 2]),
    Box(BoxCXCYWH),
}

impl Reference {
    pub fn center(&self) -> [f64; 2] {
        match self {
            Reference::Point(c) => *c,
            Reference::Box(b) => [b.cx, b.cy],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectContainer {
    pub query: Vec<f64>,
    pub reference: Reference,
    pub source_index: Option<usize>,
}

impl Containers {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }

    pub fn ref_dim(&self) -> RefDim {
        if self.refs.shape()[1] == 2 {
            RefDim::Point
        } else {
            RefDim::Box
        }
    }

    /// Reference centers, one `[cx, cy]` per container.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let r = self.refs.shape()[1];
        self.refs.data().chunks(r).map(|c| [c[0], c[1]]).collect()
    }

    pub fn get(&self, i: usize) -> ObjectContainer {
        let d = self.queries.shape()[1];
        let r = self.refs.shape()[1];
        let rf = &self.refs.data()[i * r..(i + 1) * r];
        ObjectContainer {
            query: self.queries.data()[i * d..(i + 1) * d].to_vec(),
            reference: if r == 4 { Reference::Box(BoxCXCYWH::from_slice(rf)) } else { Reference::Point([rf[0], rf[1]]) },
            source_index: self.source_index[i],
        }
    }
}

/// Positional query term derived from the references (constant).
pub fn reference_embed(refs: &Tensor, d: usize) -> Result<Tensor> {
    let (n, r) = (refs.shape()[0], refs.shape()[1]);
    let per = d / r;
    let mut out = Vec::with_capacity(n * d);
    for row in refs.data().chunks(r) {
        let mut e = sine_embed(row, per);
        e.resize(d, 0.0);
        out.extend(e);
    }
    Ok(Tensor::new(&[n, d], out)?)
}

/// `sigmoid(delta + inverse_sigmoid(ref))`; point references leave the size
/// logits at zero.
pub fn refine_boxes(refs: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let base = refs.inverse_sigmoid(INV_SIGMOID_EPS);
    let base = if refs.shape()[1] == 2 { concat_cols(&[base, Tensor::zeros(&[refs.shape()[0], 2])])? } else { base };
    Ok(base.add(delta)?.sigmoid())
}

/// One decoder layer's predictions plus the references it consumed.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub set: DetectionSet,
    pub refs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(num_layers: usize, cfg: AttentionConfig, mode: RefDim, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(&format!("decoder.{i}"), cfg, mode, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Runs every layer and predicts after each one. References are refined
    /// from each layer's boxes and detached before the next layer.
    pub fn decode(&self, containers: &Containers, memory: &EncoderMemory, head: &DetectionHead) -> Result<Vec<LayerOutput>> {
        let d = memory.d_model();
        let point = containers.ref_dim() == RefDim::Point;
        let mut tgt = containers.queries.clone();
        let mut refs = containers.refs.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pos = reference_embed(&refs, d)?;
            tgt = layer.forward(&tgt, &pos, &refs, memory)?;
            let (logits, delta) = head.forward(&tgt)?;
            let boxes = refine_boxes(&refs, &delta)?;
            let next = if point { boxes.detach().narrow_cols(0, 2)? } else { boxes.detach() };
            outs.push(LayerOutput { set: DetectionSet { logits, boxes }, refs });
            refs = next;
        }
        Ok(outs)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.layers.iter().flat_map(DecoderLayer::params).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(16, 4, 2).unwrap()
    }

    fn pyramid(seed: u64, d: usize) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Backbone::new([4, 4, 4, 4], d, &mut rng).unwrap();
        let img = Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        b.extract_pyramid(&img).unwrap()
    }

    #[test]
    fn empty_encoder_is_the_flattened_pyramid() {
        let p = pyramid(1, 16);
        let enc = Encoder::new(0, cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mem = enc.encode(&p).unwrap();
        assert_eq!(mem.len(), 85);
        // Token (level 1, y=2, x=3) holds channel c of that cell.
        let t = 64 + 2 * 4 + 3;
        for c in 0..16 {
            assert_eq!(mem.features.data()[t * 16 + c], p.levels[1].data()[c * 16 + 2 * 4 + 3]);
        }
        assert_eq!(mem.positions[t], [3.5 / 4.0, 2.5 / 4.0]);
        assert_eq!(mem.level_index[t], 1);
    }

    #[test]
    fn encoder_is_finite_and_deterministic_over_seeds() {
        let p = pyramid(2, 16);
        for seed in 0..100 {
            let enc = Encoder::new(3, cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let a = enc.encode(&p).unwrap();
            assert!(a.features.is_finite(), "seed {seed}");
            if seed % 25 == 0 {
                assert_eq!(a.features.data(), enc.encode(&p).unwrap().features.data());
            }
        }
    }

    #[test]
    fn positions_are_cell_centers_in_unit_square() {
        let mem = flatten_pyramid(&pyramid(3, 16)).unwrap();
        assert!(mem.positions.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(mem.positions[84], [0.5, 0.5]);
    }

    #[test]
    fn refinement_with_zero_delta_is_identity() {
        let refs = Tensor::new(&[2, 4], vec![0.3, 0.7, 0.1, 0.25, 0.5, 0.5, 0.9, 0.05]).unwrap();
        let out = refine_boxes(&refs, &Tensor::zeros(&[2, 4])).unwrap();
        for (a, b) in out.data().iter().zip(refs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let pts = Tensor::new(&[1, 2], vec![0.2, 0.6]).unwrap();
        let out = refine_boxes(&pts, &Tensor::zeros(&[1, 4])).unwrap();
        assert!((out.data()[0] - 0.2).abs() < 1e-12 && (out.data()[2] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn refined_boxes_are_valid(r in prop::collection::vec(0.01f64..0.99, 4), d in prop::collection::vec(-30.0f64..30.0, 4)) {
            let out = refine_boxes(&Tensor::new(&[1, 4], r).unwrap(), &Tensor::new(&[1, 4], d).unwrap()).unwrap();
            prop_assert!(BoxCXCYWH::from_slice(out.data()).is_valid());
        }
    }
}
