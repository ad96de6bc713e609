//! Dense prediction over encoder tokens and sparse container initialization.

use std::cmp::Ordering;

use detr_tensor::{Parameter, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BoxCXCYWH;
use crate::config::{InitStrategy, ObjectnessMode, ProposalSchedule, RefDim};
use crate::error::{config_err, DetrError, Result};
use crate::nn::{normal, Linear, Mlp};
use crate::transformer::{refine_boxes, Containers, EncoderMemory};

/// Initial foreground probability of every class logit.
pub const PRIOR_PROB: f64 = 0.01;

pub fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

/// One square anchor per token, `base_scale·2^l` wide on level `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BoxCXCYWH>,
    pub base_scale: f64,
}

impl AnchorSet {
    pub fn new(memory: &EncoderMemory, base_scale: f64) -> Self {
        let boxes = memory
            .positions
            .iter()
            .zip(&memory.level_index)
            .map(|(p, &l)| {
                let s = (base_scale * (1u64 << l) as f64).min(1.0);
                BoxCXCYWH::new(p[0], p[1], s, s)
            })
            .collect();
        Self { boxes, base_scale }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 4], self.boxes.iter().flat_map(|b| b.to_array()).collect())
            .expect("anchors are S x 4")
    }
}

/// Class logits and boxes for a set of predictions.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    /// `[N, C]`.
    pub logits: Tensor,
    /// `[N, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn box_list(&self) -> Vec<BoxCXCYWH> {
        self.boxes.data().chunks(4).map(BoxCXCYWH::from_slice).collect()
    }

    /// Rows `idx` of both tensors, gradients preserved.
    pub fn select(&self, idx: &[usize]) -> Result<DetectionSet> {
        Ok(DetectionSet { logits: self.logits.gather_rows(idx)?, boxes: self.boxes.gather_rows(idx)? })
    }
}

/// Classification projection plus a box-delta perceptron.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub class: Linear,
    pub bbox: Mlp,
}

impl DetectionHead {
    pub fn new(name: &str, d: usize, classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let class = Linear::new(&format!("{name}.class"), d, classes, rng)?;
        class.bias.set_data(vec![prior_bias(); classes])?;
        Ok(Self { class, bbox: Mlp::new(&format!("{name}.bbox"), &[d, hidden, hidden, 4], true, rng)? })
    }

    /// `(logits [N,C], box deltas [N,4])`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.class.forward(x)?, self.bbox.forward(x)?))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.class.params();
        p.extend(self.bbox.params());
        p
    }

    pub fn same_as(&self, other: &DetectionHead) -> bool {
        self.params().iter().zip(other.params()).all(|(a, b)| a.ptr_eq(&b))
    }
}

/// Per-token predictions with anchors refined in inverse-sigmoid space.
pub fn dense_predict(memory: &EncoderMemory, anchors: &AnchorSet, head: &DetectionHead) -> Result<DetectionSet> {
    if anchors.len() != memory.len() {
        return Err(DetrError::Size(format!("{} anchors for {} tokens", anchors.len(), memory.len())));
    }
    let (logits, delta) = head.forward(&memory.features)?;
    Ok(DetectionSet { logits, boxes: refine_boxes(&anchors.tensor(), &delta)? })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Foreground score per row: the best class probability, or the sigmoid of
/// the auxiliary foreground logit in class-agnostic mode.
pub fn objectness(logits: &Tensor, mode: ObjectnessMode, foreground: Option<&Tensor>) -> Result<Vec<f64>> {
    let c = logits.shape()[1];
    match mode {
        ObjectnessMode::Specific => Ok(logits
            .data()
            .chunks(c)
            .map(|row| sigmoid(row.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
            .collect()),
        ObjectnessMode::Agnostic => {
            let fg = foreground.ok_or_else(|| config_err("class-agnostic objectness needs a foreground head"))?;
            Ok(fg.data().iter().map(|&x| sigmoid(x)).collect())
        }
    }
}

/// Indices of the `k` highest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DetrError::Numeric("NaN objectness score".into()));
    }
    if k > scores.len() {
        return Err(config_err(format!("cannot select {k} proposals from {} tokens", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].partial_cmp(&scores[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx)
}

/// Centers of the first `k` cells of a `⌈√k⌉` square grid, row-major.
pub fn grid_centers(k: usize) -> Vec<[f64; 2]> {
    let g = (k as f64).sqrt().ceil() as usize;
    (0..k)
        .map(|i| [((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64])
        .collect()
}

/// `k` points evenly spaced along the unit-square border, clockwise from
/// the top-left corner.
pub fn border_centers(k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|i| {
            let t = 4.0 * i as f64 / k as f64;
            let f = t.fract();
            match t as usize {
                0 => [f, 0.0],
                1 => [1.0, f],
                2 => [1.0 - f, 1.0],
                _ => [0.0, 1.0 - f],
            }
        })
        .collect()
}

/// Learned state used by the non-dense strategies.
#[derive(Debug, Clone)]
pub struct ContainerInit {
    pub strategy: InitStrategy,
    pub ref_dim: RefDim,
    /// Size of non-dense box references.
    pub base_scale: f64,
    /// `[n_max, D]` learned queries; absent for the dense strategy.
    pub query_embed: Option<Parameter>,
    /// Query → center projection for the learnable strategy.
    pub ref_proj: Option<Linear>,
}

impl ContainerInit {
    pub fn new(
        strategy: InitStrategy,
        ref_dim: RefDim,
        base_scale: f64,
        n_max: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dense = strategy == InitStrategy::Dense;
        let query_embed = if dense {
            None
        } else {
            Some(Parameter::new("query_embed", &[n_max, d], normal(rng, n_max * d, 1.0))?)
        };
        let ref_proj = if strategy == InitStrategy::Learnable {
            Some(Linear::new("ref_proj", d, 2, rng)?)
        } else {
            None
        };
        Ok(Self { strategy, ref_dim, base_scale, query_embed, ref_proj })
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p: Vec<Parameter> = self.query_embed.iter().cloned().collect();
        if let Some(l) = &self.ref_proj {
            p.extend(l.params());
        }
        p
    }

    fn fixed_refs(&self, centers: Vec<[f64; 2]>) -> Result<Tensor> {
        let k = centers.len();
        Ok(match self.ref_dim {
            RefDim::Point => Tensor::new(&[k, 2], centers.into_iter().flatten().collect())?,
            RefDim::Box => Tensor::new(
                &[k, 4],
                centers.into_iter().flat_map(|c| [c[0], c[1], self.base_scale, self.base_scale]).collect(),
            )?,
        })
    }

    /// Builds `k` containers. The dense strategy needs the dense predictions
    /// and their objectness; the others ignore them.
    pub fn init(
        &self,
        memory: &EncoderMemory,
        dense: Option<(&DetectionSet, &[f64])>,
        k: usize,
    ) -> Result<Containers> {
        if k == 0 {
            return Err(config_err("at least one proposal is required"));
        }
        if self.strategy == InitStrategy::Dense {
            let (set, scores) = dense.ok_or_else(|| config_err("dense initialization needs dense predictions"))?;
            let idx = top_k(scores, k)?;
            let boxes = set.boxes.detach().gather_rows(&idx)?;
            let refs = match self.ref_dim {
                RefDim::Box => boxes,
                RefDim::Point => boxes.narrow_cols(0, 2)?,
            };
            return Ok(Containers {
                queries: memory.features.gather_rows(&idx)?,
                refs,
                source_index: idx.into_iter().map(Some).collect(),
            });
        }
        let table = self.query_embed.as_ref().expect("non-dense strategies own a query table");
        let n_max = table.shape()[0];
        if k > n_max {
            return Err(config_err(format!("{k} proposals exceed the {n_max} learned queries")));
        }
        let rows: Vec<usize> = (0..k).collect();
        let queries = table.tensor().gather_rows(&rows)?;
        let refs = match self.strategy {
            InitStrategy::Learnable => {
                let proj = self.ref_proj.as_ref().expect("learnable strategy owns a projection");
                let centers = proj.forward(&queries)?.sigmoid();
                match self.ref_dim {
                    RefDim::Point => centers,
                    RefDim::Box => detr_tensor::concat_cols(&[centers, Tensor::full(&[k, 2], self.base_scale)])?,
                }
            }
            InitStrategy::Grid => self.fixed_refs(grid_centers(k))?,
            InitStrategy::Center => self.fixed_refs(vec![[0.5, 0.5]; k])?,
            InitStrategy::Border => self.fixed_refs(border_centers(k))?,
            InitStrategy::Dense => unreachable!(),
        };
        Ok(Containers { queries, refs, source_index: vec![None; k] })
    }
}

/// Proposal count at `epoch`: linear from `n_start` to `n_end` over
/// `decay_epochs` (the whole run by default), then flat.
pub fn proposals_at(schedule: &ProposalSchedule, epoch: usize, total_epochs: usize) -> usize {
    let decay = schedule.decay_epochs.unwrap_or(total_epochs);
    let frac = if decay == 0 { 1.0 } else { (epoch as f64 / decay as f64).min(1.0) };
    let (a, b) = (schedule.n_start as f64, schedule.n_end as f64);
    (a + (b - a) * frac).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::transformer::Encoder;
    use crate::attention::AttentionConfig;
    use detr_tensor::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn memory(seed: u64) -> EncoderMemory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Backbone::new([4, 4, 4, 4], 16, &mut rng).unwrap();
        let e = Encoder::new(1, AttentionConfig::new(16, 4, 2).unwrap(), &mut rng).unwrap();
        let img = Tensor::new(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        e.encode(&b.extract_pyramid(&img).unwrap()).unwrap()
    }

    #[test]
    fn anchors_follow_levels() {
        let mem = memory(0);
        let a = AnchorSet::new(&mem, 0.05);
        assert_eq!(a.len(), 85);
        assert_eq!(a.boxes[0], BoxCXCYWH::new(1.0 / 16.0, 1.0 / 16.0, 0.05, 0.05));
        assert!((a.boxes[84].w - 0.4).abs() < 1e-15);
        assert!(a.boxes.iter().all(BoxCXCYWH::is_valid));
    }

    #[test]
    fn zero_regression_returns_anchors() {
        let mem = memory(1);
        let anchors = AnchorSet::new(&mem, 0.05);
        let head = DetectionHead::new("h", 16, 3, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let set = dense_predict(&mem, &anchors, &head).unwrap();
        assert_eq!(set.len(), 85);
        for (p, a) in set.box_list().iter().zip(&anchors.boxes) {
            assert!(p.l1(a) < 1e-10);
        }
    }

    #[test]
    fn dense_logit_gradients() {
        let mem = memory(2);
        let head = DetectionHead::new("h", 16, 3, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = mem.features.gather_rows(&[0, 10, 70, 84]).unwrap().detach();
        let probe = Tensor::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let f = |x: &[Tensor]| x[0].linear(&x[1], &x[2]).unwrap().mul(&probe).unwrap().sum();
        let inputs = [feats, head.class.weight.tensor().detach(), head.class.bias.tensor().detach()];
        let r = check_gradients(f, &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn objectness_examples() {
        let l = Tensor::new(&[1, 3], vec![0.0, 2.0, -1.0]).unwrap();
        let s = objectness(&l, ObjectnessMode::Specific, None).unwrap();
        assert!((s[0] - 0.880797077977882).abs() < 1e-12);
        let one = Tensor::new(&[2, 1], vec![0.3, -0.2]).unwrap();
        let s = objectness(&one, ObjectnessMode::Specific, None).unwrap();
        assert_eq!(s, vec![sigmoid(0.3), sigmoid(-0.2)]);
        let eq = Tensor::new(&[3, 2], vec![1.0; 6]).unwrap();
        let s = objectness(&eq, ObjectnessMode::Specific, None).unwrap();
        assert!(s.iter().all(|v| *v == s[0]));
        assert_eq!(top_k(&s, 3).unwrap(), vec![0, 1, 2]);
        assert!(objectness(&eq, ObjectnessMode::Agnostic, None).is_err());
        let fg = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        assert_eq!(objectness(&eq, ObjectnessMode::Agnostic, Some(&fg)).unwrap()[0], 0.5);
    }

    #[test]
    fn grid_center_and_border() {
        assert_eq!(grid_centers(4), vec![[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]);
        assert_eq!(grid_centers(1), vec![[0.5, 0.5]]);
        let b = border_centers(8);
        assert_eq!(b[0], [0.0, 0.0]);
        assert_eq!(b[2], [1.0, 0.0]);
        assert_eq!(b[5], [0.5, 1.0]);
        for p in b {
            assert!(p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0);
        }
    }

    #[test]
    fn non_dense_strategies() {
        let mem = memory(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let center = ContainerInit::new(InitStrategy::Center, RefDim::Box, 0.05, 10, 16, &mut rng).unwrap();
        let c = center.init(&mem, None, 3).unwrap();
        assert_eq!(c.refs.data(), &[0.5, 0.5, 0.05, 0.05].repeat(3)[..]);
        let grid = ContainerInit::new(InitStrategy::Grid, RefDim::Point, 0.05, 10, 16, &mut rng).unwrap();
        assert_eq!(grid.init(&mem, None, 4).unwrap().centers(), grid_centers(4));
        assert!(grid.init(&mem, None, 11).is_err());
        let learn = ContainerInit::new(InitStrategy::Learnable, RefDim::Box, 0.05, 10, 16, &mut rng).unwrap();
        let c = learn.init(&mem, None, 5).unwrap();
        assert!(c.refs.requires_grad());
        assert_eq!(c.refs.shape(), &[5, 4]);
        assert_eq!(learn.params().len(), 3);
    }

    #[test]
    fn dense_with_k_equal_n_is_a_sorted_permutation() {
        let mem = memory(4);
        let head = DetectionHead::new("h", 16, 3, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let set = dense_predict(&mem, &AnchorSet::new(&mem, 0.05), &head).unwrap();
        let scores = objectness(&set.logits, ObjectnessMode::Specific, None).unwrap();
        let init = ContainerInit::new(InitStrategy::Dense, RefDim::Box, 0.05, 0, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = init.init(&mem, Some((&set, &scores)), mem.len()).unwrap();
        let idx: Vec<usize> = c.source_index.iter().map(|s| s.unwrap()).collect();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..85).collect::<Vec<_>>());
        assert!(idx.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
        assert!(!c.refs.requires_grad());
        assert!(c.queries.requires_grad());
        assert!(init.init(&mem, Some((&set, &scores)), 86).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = ProposalSchedule::default();
        assert_eq!(proposals_at(&s, 0, 36), 300);
        assert_eq!(proposals_at(&s, 36, 36), 100);
        assert_eq!(proposals_at(&s, 18, 36), 200);
        let s = ProposalSchedule { decay_epochs: Some(10), ..s };
        assert_eq!(proposals_at(&s, 10, 36), 100);
        assert_eq!(proposals_at(&s, 30, 36), 100);
        assert_eq!(proposals_at(&s, 5, 36), 200);
    }

    #[test]
    fn shared_head_mutation_is_visible() {
        let a = DetectionHead::new("h", 4, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = a.clone();
        assert!(a.same_as(&b));
        a.class.bias.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(b.class.bias.data(), vec![3.0, 4.0]);
        let c = DetectionHead::new("h", 4, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!a.same_as(&c));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn top_k_matches_sort_oracle(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.5, 0.9, 1.0]), 0..40), k_frac in 0.0f64..=1.0) {
            let k = (scores.len() as f64 * k_frac).floor() as usize;
            let mut oracle: Vec<usize> = (0..scores.len()).collect();
            oracle.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
            oracle.truncate(k);
            let got = top_k(&scores, k).unwrap();
            prop_assert_eq!(&got, &oracle);
            let worst = got.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in (0..scores.len()).filter(|i| !got.contains(i)) {
                prop_assert!(scores[i] <= worst);
            }
        }

        #[test]
        fn schedule_is_monotone_and_bounded(start in 1usize..400, drop in 0usize..400, total in 1usize..50, decay in prop::option::of(1usize..50)) {
            let s = ProposalSchedule { n_start: start + drop, n_end: start, decay_epochs: decay };
            let mut prev = usize::MAX;
            for e in 0..=total {
                let k = proposals_at(&s, e, total);
                prop_assert!(k <= s.n_start && k >= s.n_end && k <= prev);
                prev = k;
            }
        }
    }
}
