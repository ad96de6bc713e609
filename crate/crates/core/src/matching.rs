//! Bipartite matching between predictions and ground truth.

use std::cmp::Ordering;

use detr_tensor::focal_term;

use crate::boxes::BoxCXCYWH;
use crate::data::GroundTruth;
use crate::error::{DetrError, Result};
use crate::heads::DetectionSet;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Optimal assignment of every row of `a` (rows ≤ cols) plus the dual
/// potentials certifying it.
struct Solved {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method with potentials, O(r²·c).
fn solve_rect(a: &[Vec<f64>]) -> Solved {
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    Solved { col_of_row, u: u[1..].to_vec(), v: v[1..].to_vec() }
}

/// Minimum-cost matching restricted to the given prediction and truth
/// indices; returns cost and pairs in original indices.
fn solve_subset(cost: &[Vec<f64>], preds: &[usize], truths: &[usize]) -> (f64, Vec<(usize, usize)>, Option<Solved>) {
    if preds.is_empty() || truths.is_empty() {
        return (0.0, Vec::new(), None);
    }
    let transpose = preds.len() > truths.len();
    let (rows, cols) = if transpose { (truths, preds) } else { (preds, truths) };
    let a: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| if transpose { cost[c][r] } else { cost[r][c] }).collect())
        .collect();
    let solved = solve_rect(&a);
    let mut pairs: Vec<(usize, usize)> = solved
        .col_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| if transpose { (cols[j], rows[i]) } else { (rows[i], cols[j]) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(p, t)| cost[p][t]).sum();
    (total, pairs, Some(solved))
}

/// Minimum-cost injective assignment of `min(N, G)` pairs.
///
/// Among equal-cost optima (within a relative 1e-9) the lexicographically
/// smallest prediction-sorted pair list is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != g) {
        return Err(DetrError::Size("cost matrix rows differ in length".into()));
    }
    if let Some((i, j)) = (0..n).flat_map(|i| (0..g).map(move |j| (i, j))).find(|&(i, j)| !cost[i][j].is_finite()) {
        return Err(DetrError::Numeric(format!("non-finite matching cost at ({i}, {j})")));
    }
    if n == 0 || g == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    let all_p: Vec<usize> = (0..n).collect();
    let all_t: Vec<usize> = (0..g).collect();
    let (opt, first, solved) = solve_subset(cost, &all_p, &all_t);
    let solved = solved.expect("non-empty problem");
    let transpose = n > g;
    let reduced = |p: usize, t: usize| {
        if transpose {
            cost[p][t] - solved.u[t] - solved.v[p]
        } else {
            cost[p][t] - solved.u[p] - solved.v[t]
        }
    };
    let scale = 1.0 + cost.iter().flatten().map(|c| c.abs()).fold(0.0, f64::max) * n.min(g) as f64;
    let tol = 1e-9 * scale;
    let target = n.min(g);

    // Fix pairs one at a time, smallest feasible first, keeping optimality.
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut chosen_cost = 0.0;
    let mut used_t = vec![false; g];
    let mut next_p = 0;
    'outer: while chosen.len() < target {
        for p in next_p..n {
            for t in 0..g {
                if used_t[t] || reduced(p, t) > tol {
                    continue;
                }
                let rest_p: Vec<usize> = (p + 1..n).collect();
                let rest_t: Vec<usize> = (0..g).filter(|&j| !used_t[j] && j != t).collect();
                if rest_p.len().min(rest_t.len()) != target - chosen.len() - 1 {
                    continue;
                }
                let (rest, _, _) = solve_subset(cost, &rest_p, &rest_t);
                if (chosen_cost + cost[p][t] + rest - opt).abs() <= tol {
                    chosen.push((p, t));
                    chosen_cost += cost[p][t];
                    used_t[t] = true;
                    next_p = p + 1;
                    continue 'outer;
                }
            }
        }
        // Only reachable through rounding trouble; the plain optimum stands.
        chosen = first;
        break;
    }
    let total_cost = chosen.iter().map(|&(p, t)| cost[p][t]).sum();
    Ok(MatchResult { pairs: chosen, total_cost })
}

/// Loss weights and focal parameters shared by matching and the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 2.0, lambda_l1: 5.0, lambda_giou: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl From<&crate::config::LossConfig> for LossWeights {
    fn from(c: &crate::config::LossConfig) -> Self {
        Self {
            lambda_cls: c.lambda_cls,
            lambda_l1: c.lambda_l1,
            lambda_giou: c.lambda_giou,
            focal_alpha: c.focal_alpha,
            focal_gamma: c.focal_gamma,
        }
    }
}

/// Classification matching cost: positive focal term minus negative term.
pub fn focal_cost(logit: f64, w: &LossWeights) -> f64 {
    focal_term(logit, true, w.focal_alpha, w.focal_gamma) - focal_term(logit, false, w.focal_alpha, w.focal_gamma)
}

/// `N × G` matrix of weighted classification, L1 and (1 − GIoU) costs.
pub fn match_cost(pred: &DetectionSet, truth: &GroundTruth, w: &LossWeights) -> Vec<Vec<f64>> {
    let c = pred.num_classes();
    let boxes = pred.box_list();
    pred.logits
        .data()
        .chunks(c)
        .zip(&boxes)
        .map(|(logits, b)| {
            truth
                .boxes
                .iter()
                .zip(&truth.labels)
                .map(|(t, &label)| {
                    w.lambda_cls * focal_cost(logits[label], w)
                        + w.lambda_l1 * b.l1(t)
                        + w.lambda_giou * (1.0 - b.giou(t))
                })
                .collect()
        })
        .collect()
}

pub fn iou_matrix(pred: &[BoxCXCYWH], truth: &[BoxCXCYWH]) -> Vec<Vec<f64>> {
    pred.iter().map(|p| truth.iter().map(|t| p.iou(t)).collect()).collect()
}

/// One-to-many positives: every truth claims its `n` highest-IoU
/// predictions (ties to the lower index); a prediction claimed by several
/// truths keeps the one it overlaps most (ties to the lower truth index).
pub fn assign_1to_n(iou: &[Vec<f64>], n: usize) -> Vec<(usize, usize)> {
    let np = iou.len();
    let g = iou.first().map_or(0, Vec::len);
    let mut best: Vec<Option<usize>> = vec![None; np];
    for t in 0..g {
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| iou[b][t].partial_cmp(&iou[a][t]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for &p in order.iter().take(n) {
            match best[p] {
                Some(prev) if iou[p][prev] >= iou[p][t] => {}
                _ => best[p] = Some(t),
            }
        }
    }
    best.iter().enumerate().filter_map(|(p, t)| t.map(|t| (p, t))).collect()
}

/// Positive `(prediction, truth)` pairs under the configured rule: Hungarian
/// matching on the full cost for `n = 1`, IoU top-`n` otherwise.
pub fn assign(pred: &DetectionSet, truth: &GroundTruth, w: &LossWeights, n: usize) -> Result<Vec<(usize, usize)>> {
    if n <= 1 {
        return Ok(hungarian(&match_cost(pred, truth, w))?.pairs);
    }
    Ok(assign_1to_n(&iou_matrix(&pred.box_list(), &truth.boxes), n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use detr_tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn two_by_two() {
        let r = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn empty_sides() {
        let r = hungarian(&[vec![], vec![]]).unwrap();
        assert!(r.pairs.is_empty() && r.total_cost == 0.0);
        assert!(hungarian(&[]).unwrap().pairs.is_empty());
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(hungarian(&[vec![1.0, f64::NAN]]), Err(DetrError::Numeric(_))));
    }

    #[test]
    fn ties_take_the_smallest_pair_list() {
        let r = hungarian(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        let r = hungarian(&[vec![5.0, 0.0, 0.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
    }

    #[test]
    fn perfect_prediction_costs_only_classification() {
        let w = LossWeights::default();
        let b = BoxCXCYWH::new(0.4, 0.5, 0.2, 0.3);
        let set = DetectionSet {
            logits: Tensor::new(&[1, 2], vec![-20.0, 20.0]).unwrap(),
            boxes: Tensor::new(&[1, 4], b.to_array().to_vec()).unwrap(),
        };
        let truth = GroundTruth { boxes: vec![b], labels: vec![1] };
        let c = match_cost(&set, &truth, &w);
        assert!((c[0][0] - w.lambda_cls * focal_cost(20.0, &w)).abs() < 1e-12);
    }

    #[test]
    fn identical_predictions_give_identical_rows() {
        let set = DetectionSet {
            logits: Tensor::new(&[2, 2], vec![0.3, -0.1, 0.3, -0.1]).unwrap(),
            boxes: Tensor::new(&[2, 4], [0.5, 0.5, 0.2, 0.2].repeat(2)).unwrap(),
        };
        let truth = GroundTruth {
            boxes: vec![BoxCXCYWH::new(0.3, 0.3, 0.1, 0.2), BoxCXCYWH::new(0.6, 0.6, 0.3, 0.3)],
            labels: vec![0, 1],
        };
        let c = match_cost(&set, &truth, &LossWeights::default());
        assert_eq!(c[0], c[1]);
    }

    #[test]
    fn cost_grows_as_prediction_moves_away() {
        let truth = GroundTruth { boxes: vec![BoxCXCYWH::new(0.3, 0.4, 0.2, 0.2)], labels: vec![0] };
        let w = LossWeights::default();
        let mut prev = f64::NEG_INFINITY;
        for step in 0..40 {
            let dx = step as f64 * 0.015;
            let set = DetectionSet {
                logits: Tensor::new(&[1, 1], vec![0.0]).unwrap(),
                boxes: Tensor::new(&[1, 4], vec![0.3 + dx, 0.4, 0.2, 0.2]).unwrap(),
            };
            let c = match_cost(&set, &truth, &w)[0][0];
            assert!(c > prev, "step {step}");
            prev = c;
        }
    }

    #[test]
    fn one_to_n_examples() {
        // G=1, n=5, N=3.
        let iou = vec![vec![0.1], vec![0.0], vec![0.7]];
        assert_eq!(assign_1to_n(&iou, 5), vec![(0, 0), (1, 0), (2, 0)]);
        // Shared prediction keeps the higher-IoU truth.
        let iou = vec![vec![0.6, 0.8], vec![0.5, 0.0], vec![0.0, 0.4]];
        assert_eq!(assign_1to_n(&iou, 2), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn n_equal_one_is_hungarian() {
        let set = DetectionSet {
            logits: Tensor::new(&[3, 2], vec![0.1, -0.3, 1.0, 0.2, -1.0, 0.5]).unwrap(),
            boxes: Tensor::new(&[3, 4], vec![0.2, 0.2, 0.1, 0.1, 0.5, 0.5, 0.3, 0.2, 0.8, 0.7, 0.2, 0.2]).unwrap(),
        };
        let truth = GroundTruth {
            boxes: vec![BoxCXCYWH::new(0.75, 0.7, 0.2, 0.25), BoxCXCYWH::new(0.25, 0.2, 0.1, 0.1)],
            labels: vec![1, 0],
        };
        let w = LossWeights::default();
        assert_eq!(assign(&set, &truth, &w, 1).unwrap(), hungarian(&match_cost(&set, &truth, &w)).unwrap().pairs);
    }

    fn matrix(n: usize, g: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, g), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn pairs_are_injective_and_complete(n in 0usize..12, g in 0usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..g).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
            let r = hungarian(&cost).unwrap();
            prop_assert_eq!(r.pairs.len(), n.min(g));
            let mut ps: Vec<_> = r.pairs.iter().map(|p| p.0).collect();
            let mut ts: Vec<_> = r.pairs.iter().map(|p| p.1).collect();
            ps.dedup();
            ts.sort();
            ts.dedup();
            prop_assert_eq!(ps.len(), r.pairs.len());
            prop_assert_eq!(ts.len(), r.pairs.len());
        }

        #[test]
        fn one_to_n_nests(iou in matrix(8, 3).prop_map(|m| m.into_iter().map(|r| r.into_iter().map(|v| (v + 5.0) / 10.0).collect()).collect::<Vec<Vec<f64>>>())) {
            let small: Vec<usize> = assign_1to_n(&iou, 2).iter().map(|p| p.0).collect();
            let big: Vec<usize> = assign_1to_n(&iou, 4).iter().map(|p| p.0).collect();
            prop_assert!(small.iter().all(|p| big.contains(p)));
        }
    }
}
