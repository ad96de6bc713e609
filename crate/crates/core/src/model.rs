//! The full detector: backbone, encoder, dense part and sparse decoder.

use std::collections::HashSet;

use detr_tensor::{Parameter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::{InitStrategy, ModelConfig, ObjectnessMode, TrainConfig};
use crate::error::Result;
use crate::heads::{dense_predict, objectness, prior_bias, AnchorSet, ContainerInit, DetectionHead, DetectionSet};
use crate::loss::{set_loss, LossInputs, LossOutput, SetLossConfig};
use crate::matching::LossWeights;
use crate::nn::Linear;
use crate::transformer::{Containers, Decoder, Encoder, EncoderMemory, LayerOutput};
use crate::data::GroundTruth;

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Present only with dense initialization.
    pub dense_head: Option<DetectionHead>,
    pub sparse_head: DetectionHead,
    /// Class-agnostic foreground logit for the dense part.
    pub foreground: Option<Linear>,
    pub init: ContainerInit,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub memory: EncoderMemory,
    pub dense: Option<DetectionSet>,
    pub foreground: Option<Tensor>,
    pub objectness: Option<Vec<f64>>,
    pub containers: Containers,
    pub layers: Vec<LayerOutput>,
}

impl ForwardOutput {
    /// Predictions of the last decoder layer.
    pub fn final_set(&self) -> &DetectionSet {
        &self.layers.last().expect("at least one decoder layer").set
    }

    pub fn layer_sets(&self) -> Vec<DetectionSet> {
        self.layers.iter().map(|l| l.set.clone()).collect()
    }

    /// Named intermediate tensors in forward order, for diagnostics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = Vec::new();
        for (i, l) in self.pyramid.levels.iter().enumerate() {
            v.push((format!("pyramid.level{i}"), l));
        }
        v.push(("memory.features".into(), &self.memory.features));
        if let Some(d) = &self.dense {
            v.push(("dense.logits".into(), &d.logits));
            v.push(("dense.boxes".into(), &d.boxes));
        }
        if let Some(f) = &self.foreground {
            v.push(("dense.foreground".into(), f));
        }
        v.push(("containers.queries".into(), &self.containers.queries));
        v.push(("containers.refs".into(), &self.containers.refs));
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("decoder.{i}.logits"), &l.set.logits));
            v.push((format!("decoder.{i}.boxes"), &l.set.boxes));
        }
        v
    }
}

impl Detector {
    /// `n_queries` sizes the learned query table of non-dense strategies.
    pub fn new(cfg: &ModelConfig, n_queries: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let attn = AttentionConfig::new(d, cfg.heads, cfg.points)?;
        let backbone = Backbone::new(cfg.backbone_channels, d, &mut rng)?;
        let encoder = Encoder::new(cfg.encoder_layers, attn, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder_layers, attn, cfg.ref_dim, &mut rng)?;
        let dense = cfg.init == InitStrategy::Dense;
        let (dense_head, sparse_head) = if !dense {
            (None, DetectionHead::new("head", d, cfg.num_classes, cfg.head_hidden, &mut rng)?)
        } else if cfg.share_head {
            let h = DetectionHead::new("head", d, cfg.num_classes, cfg.head_hidden, &mut rng)?;
            (Some(h.clone()), h)
        } else {
            (
                Some(DetectionHead::new("dense_head", d, cfg.num_classes, cfg.head_hidden, &mut rng)?),
                DetectionHead::new("sparse_head", d, cfg.num_classes, cfg.head_hidden, &mut rng)?,
            )
        };
        let foreground = if dense && cfg.objectness == ObjectnessMode::Agnostic {
            Some(Linear::from_values("foreground", d, 1, vec![0.0; d], vec![prior_bias()])?)
        } else {
            None
        };
        let init = ContainerInit::new(cfg.init, cfg.ref_dim, cfg.anchor_scale, n_queries, d, &mut rng)?;
        Ok(Self { config: cfg.clone(), backbone, encoder, decoder, dense_head, sparse_head, foreground, init })
    }

    pub fn from_train_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(&cfg.model, cfg.schedule.n_start, cfg.seed)
    }

    /// Dense and sparse heads are the same parameter objects.
    pub fn heads_shared(&self) -> bool {
        self.dense_head.as_ref().is_some_and(|h| h.same_as(&self.sparse_head))
    }

    /// Largest proposal count this model can serve for an image with `tokens` encoder tokens.
    pub fn max_proposals(&self, tokens: usize) -> usize {
        match &self.init.query_embed {
            None => tokens,
            Some(t) => t.shape()[0],
        }
    }

    /// Runs the whole model with `k` proposals, capped at what the image
    /// (dense) or the learned query table (others) can provide.
    pub fn forward(&self, image: &Tensor, k: usize) -> Result<ForwardOutput> {
        let pyramid = self.backbone.extract_pyramid(image)?;
        let memory = self.encoder.encode(&pyramid)?;
        let k = k.min(self.max_proposals(memory.len()));
        let (dense, foreground, scores) = match &self.dense_head {
            Some(head) => {
                let set = dense_predict(&memory, &AnchorSet::new(&memory, self.config.anchor_scale), head)?;
                let fg = self.foreground.as_ref().map(|l| l.forward(&memory.features)).transpose()?;
                let scores = objectness(&set.logits, self.config.objectness, fg.as_ref())?;
                (Some(set), fg, Some(scores))
            }
            None => (None, None, None),
        };
        let containers = self.init.init(&memory, dense.as_ref().zip(scores.as_deref()), k)?;
        let layers = self.decoder.decode(&containers, &memory, &self.sparse_head)?;
        Ok(ForwardOutput { pyramid, memory, dense, foreground, objectness: scores, containers, layers })
    }

    pub fn loss(&self, out: &ForwardOutput, truth: &GroundTruth, w: &LossWeights, cfg: SetLossConfig) -> Result<LossOutput> {
        let sets = out.layer_sets();
        set_loss(
            LossInputs { layers: &sets, dense: out.dense.as_ref(), foreground: out.foreground.as_ref() },
            truth,
            w,
            cfg,
        )
    }

    /// Every trainable parameter once, in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut all = self.backbone.params();
        all.extend(self.encoder.params());
        all.extend(self.decoder.params());
        if let Some(h) = &self.dense_head {
            all.extend(h.params());
        }
        all.extend(self.sparse_head.params());
        if let Some(f) = &self.foreground {
            all.extend(f.params());
        }
        all.extend(self.init.params());
        let mut seen: Vec<Parameter> = Vec::with_capacity(all.len());
        for p in all {
            if !seen.iter().any(|q| q.ptr_eq(&p)) {
                seen.push(p);
            }
        }
        debug_assert_eq!(seen.iter().map(Parameter::name).collect::<HashSet<_>>().len(), seen.len());
        seen
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Parameter::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(init: InitStrategy, share: bool) -> Detector {
        let cfg = ModelConfig {
            d_model: 16,
            heads: 4,
            points: 2,
            head_hidden: 16,
            backbone_channels: [4, 8, 8, 8],
            init,
            share_head: share,
            ..ModelConfig::default()
        };
        Detector::new(&cfg, 20, 0).unwrap()
    }

    fn image() -> Tensor {
        Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect()).unwrap()
    }

    #[test]
    fn parameter_names_are_unique() {
        for share in [true, false] {
            let m = small(InitStrategy::Dense, share);
            let names: Vec<String> = m.parameters().iter().map(|p| p.name().to_string()).collect();
            let set: HashSet<_> = names.iter().collect();
            assert_eq!(set.len(), names.len());
            assert_eq!(m.heads_shared(), share);
        }
    }

    #[test]
    fn shared_head_mutation_is_visible_through_both() {
        let m = small(InitStrategy::Dense, true);
        let dense = m.dense_head.as_ref().unwrap();
        dense.class.bias.set_data(vec![0.5, 0.25, -1.0]).unwrap();
        assert_eq!(m.sparse_head.class.bias.data(), vec![0.5, 0.25, -1.0]);
    }

    #[test]
    fn dense_forward_caps_proposals_at_token_count() {
        let m = small(InitStrategy::Dense, true);
        let out = m.forward(&image(), 300).unwrap();
        assert_eq!(out.containers.len(), 85);
        assert_eq!(out.final_set().len(), 85);
        let out = m.forward(&image(), 10).unwrap();
        assert_eq!(out.containers.len(), 10);
    }

    #[test]
    fn learnable_forward_and_backward() {
        let m = small(InitStrategy::Learnable, true);
        let out = m.forward(&image(), 7).unwrap();
        assert_eq!(out.final_set().len(), 7);
        let truth = GroundTruth { boxes: vec![crate::boxes::BoxCXCYWH::new(0.5, 0.5, 0.2, 0.2)], labels: vec![1] };
        let loss = m.loss(&out, &truth, &LossWeights::default(), SetLossConfig::default()).unwrap();
        loss.total.backward().unwrap();
        let ref_proj = m.init.ref_proj.as_ref().unwrap();
        assert!(ref_proj.weight.grad().unwrap().iter().any(|g| *g != 0.0));
    }
}
