//! Training objective: bipartite matching between predictions and ground
//! truth, focal classification loss, L1 + GIoU box losses, referring BCE,
//! and the weighted total.

use crate::tensor::{Graph, NodeId, Tensor2D, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("box has non-positive width or height: {0:?}")]
    InvalidBox([f64; 4]),
    #[error("loss weights must be non-negative")]
    NegativeWeight,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub refer: f64,
    #[serde(rename = "struct")]
    pub struct_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            refer: 2.0,
            struct_: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if [self.cls, self.l1, self.giou, self.refer, self.struct_]
            .iter()
            .any(|w| *w < 0.0)
        {
            return Err(ObjectiveError::NegativeWeight);
        }
        Ok(())
    }
}

/// Focal loss defaults inherited from the detection literature.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Score clamp used inside every log.
pub const SCORE_EPS: f64 = 1e-7;

// ── Plain box geometry ───────────────────────────────────────────────

fn to_corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn iou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ca = to_corners(a);
    let cb = to_corners(b);
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ca = to_corners(a);
    let cb = to_corners(b);
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let cw = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let ch = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    let enclosing = cw * ch;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

// ── Assignment ───────────────────────────────────────────────────────

/// Minimum-cost assignment of rows to columns for `rows <= cols`
/// (shortest augmenting path with potentials). Returns `row -> col`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(
        n <= m,
        "assignment needs rows <= cols, got {n} rows and {m} cols"
    );
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched = vec![0usize; m + 1]; // col -> row, 1-based, 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if matched[j] != 0 {
            row_to_col[matched[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Extracted per-query predictions of one frame.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub boxes: Vec<[f64; 4]>,
    pub class_scores: Vec<f64>,
    pub ref_scores: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Ground-truth record used by matching and the losses.
#[derive(Debug, Clone)]
pub struct GtObject {
    pub id: u64,
    pub bbox: [f64; 4],
    pub referred: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Assignment {
    /// (prediction index, ground-truth index), injective on both sides.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

/// DETR-style matching with cost
/// `cls_w * (1 - score) + l1_w * ||b - b̂||_1 + giou_w * (1 - GIoU)`.
pub fn hungarian_match(
    predictions: &Predictions,
    gt: &[GtObject],
    weights: &LossWeights,
) -> Result<Assignment, ObjectiveError> {
    weights.validate()?;
    for g in gt {
        if g.bbox[2] <= 0.0 || g.bbox[3] <= 0.0 {
            return Err(ObjectiveError::InvalidBox(g.bbox));
        }
    }
    let n_pred = predictions.len();
    let n_gt = gt.len();
    let mut assignment = Assignment::default();
    if n_gt == 0 || n_pred == 0 {
        assignment.unmatched_predictions = (0..n_pred).collect();
        return Ok(assignment);
    }
    let pair_cost = |p: usize, g: usize| -> f64 {
        let l1: f64 = predictions.boxes[p]
            .iter()
            .zip(&gt[g].bbox)
            .map(|(a, b)| (a - b).abs())
            .sum();
        weights.cls * (1.0 - predictions.class_scores[p])
            + weights.l1 * l1
            + weights.giou * (1.0 - giou_cxcywh(predictions.boxes[p], gt[g].bbox))
    };
    if n_gt <= n_pred {
        let cost: Vec<Vec<f64>> = (0..n_gt)
            .map(|g| (0..n_pred).map(|p| pair_cost(p, g)).collect())
            .collect();
        let gt_to_pred = min_cost_assignment(&cost);
        for (g, &p) in gt_to_pred.iter().enumerate() {
            assignment.pairs.push((p, g));
        }
    } else {
        let cost: Vec<Vec<f64>> = (0..n_pred)
            .map(|p| (0..n_gt).map(|g| pair_cost(p, g)).collect())
            .collect();
        let pred_to_gt = min_cost_assignment(&cost);
        for (p, &g) in pred_to_gt.iter().enumerate() {
            assignment.pairs.push((p, g));
        }
    }
    assignment.pairs.sort_unstable();
    let matched: std::collections::BTreeSet<usize> =
        assignment.pairs.iter().map(|&(p, _)| p).collect();
    assignment.unmatched_predictions = (0..n_pred).filter(|p| !matched.contains(p)).collect();
    Ok(assignment)
}

// ── Losses ───────────────────────────────────────────────────────────

fn one_minus(g: &mut Graph, x: NodeId) -> NodeId {
    let neg = g.neg(x);
    g.add_const(neg, 1.0)
}

/// Focal loss over all scores, mean-reduced:
/// `-alpha (1-p)^gamma log p` on positives, `-(1-alpha) p^gamma log(1-p)`
/// on negatives.
pub fn focal_loss(
    g: &mut Graph,
    scores: NodeId,
    targets: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<NodeId, ObjectiveError> {
    let n = g.value(scores).rows();
    debug_assert_eq!(targets.len(), n);
    let p = g.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = one_minus(g, p);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let pow = |g: &mut Graph, base: NodeId| -> Result<NodeId, TensorError> {
        // base^gamma = exp(gamma * ln base); base is clamped positive
        let lb = g.ln(base);
        let scaled = g.scale(lb, gamma);
        Ok(g.exp(scaled))
    };
    let q_pow = pow(g, q)?;
    let p_pow = pow(g, p)?;
    let pos_term = g.mul_elem(q_pow, ln_p)?;
    let pos_term = g.scale(pos_term, -alpha);
    let neg_term = g.mul_elem(p_pow, ln_q)?;
    let neg_term = g.scale(neg_term, -(1.0 - alpha));
    let pos_mask = g.constant(Tensor2D::from_vec(n, 1, targets.to_vec())?);
    let neg_mask = one_minus(g, pos_mask);
    let pos = g.mul_elem(pos_term, pos_mask)?;
    let neg = g.mul_elem(neg_term, neg_mask)?;
    let total = g.add(pos, neg)?;
    Ok(g.mean_all(total))
}

/// Binary cross-entropy, mean-reduced, with the standard score clamp.
pub fn bce_loss(
    g: &mut Graph,
    scores: NodeId,
    targets: &[f64],
) -> Result<NodeId, ObjectiveError> {
    let n = g.value(scores).rows();
    debug_assert_eq!(targets.len(), n);
    let p = g.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = one_minus(g, p);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let pos_mask = g.constant(Tensor2D::from_vec(n, 1, targets.to_vec())?);
    let neg_mask = one_minus(g, pos_mask);
    let pos = g.mul_elem(ln_p, pos_mask)?;
    let neg = g.mul_elem(ln_q, neg_mask)?;
    let sum = g.add(pos, neg)?;
    let mean = g.mean_all(sum);
    Ok(g.neg(mean))
}

fn col(g: &mut Graph, x: NodeId, j: usize) -> Result<NodeId, TensorError> {
    g.slice_cols(x, j, 1)
}

/// L1 and GIoU losses between M predicted boxes (graph node, M x 4,
/// center-size) and M ground-truth boxes, both mean-reduced over M.
pub fn box_losses(
    g: &mut Graph,
    pred_boxes: NodeId,
    gt_boxes: &[[f64; 4]],
) -> Result<(NodeId, NodeId), ObjectiveError> {
    let m = gt_boxes.len();
    debug_assert_eq!(g.value(pred_boxes).shape(), (m, 4));
    for b in gt_boxes {
        if b[2] <= 0.0 || b[3] <= 0.0 {
            return Err(ObjectiveError::InvalidBox(*b));
        }
    }
    let gt_flat: Vec<f64> = gt_boxes.iter().flatten().copied().collect();
    let gt = g.constant(Tensor2D::from_vec(m, 4, gt_flat)?);

    let diff = g.sub(pred_boxes, gt)?;
    let l1_abs = g.abs(diff);
    let l1_sum = g.sum_all(l1_abs);
    let l1 = g.scale(l1_sum, 1.0 / m as f64);

    let corners = |g: &mut Graph, boxes: NodeId| -> Result<[NodeId; 4], TensorError> {
        let cx = col(g, boxes, 0)?;
        let cy = col(g, boxes, 1)?;
        let w = col(g, boxes, 2)?;
        let h = col(g, boxes, 3)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([
            g.sub(cx, hw)?,
            g.sub(cy, hh)?,
            g.add(cx, hw)?,
            g.add(cy, hh)?,
        ])
    };
    let [px1, py1, px2, py2] = corners(g, pred_boxes)?;
    let [gx1, gy1, gx2, gy2] = corners(g, gt)?;

    let xi1 = g.max_elem(px1, gx1)?;
    let yi1 = g.max_elem(py1, gy1)?;
    let xi2 = g.min_elem(px2, gx2)?;
    let yi2 = g.min_elem(py2, gy2)?;
    let iw_raw = g.sub(xi2, xi1)?;
    let iw = g.relu(iw_raw);
    let ih_raw = g.sub(yi2, yi1)?;
    let ih = g.relu(ih_raw);
    let inter = g.mul_elem(iw, ih)?;

    let pw = col(g, pred_boxes, 2)?;
    let ph = col(g, pred_boxes, 3)?;
    let area_p = g.mul_elem(pw, ph)?;
    let gw = col(g, gt, 2)?;
    let gh = col(g, gt, 3)?;
    let area_g = g.mul_elem(gw, gh)?;
    let areas = g.add(area_p, area_g)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div_elem(inter, union)?;

    let xc1 = g.min_elem(px1, gx1)?;
    let yc1 = g.min_elem(py1, gy1)?;
    let xc2 = g.max_elem(px2, gx2)?;
    let yc2 = g.max_elem(py2, gy2)?;
    let cw = g.sub(xc2, xc1)?;
    let ch = g.sub(yc2, yc1)?;
    let enclosing = g.mul_elem(cw, ch)?;
    let slack = g.sub(enclosing, union)?;
    let penalty = g.div_elem(slack, enclosing)?;
    let giou = g.sub(iou, penalty)?;
    let loss_each = one_minus(g, giou);
    let giou_sum = g.sum_all(loss_each);
    let giou_loss = g.scale(giou_sum, 1.0 / m as f64);

    Ok((l1, giou_loss))
}

/// Per-frame loss terms for one query set (detection or track).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossNodes {
    pub cls: Option<NodeId>,
    pub l1: Option<NodeId>,
    pub giou: Option<NodeId>,
    pub refer: Option<NodeId>,
}

/// Weighted total of Eq-style terms. The track set is dropped on the first
/// frame; the struct term enters regardless when supplied.
pub fn total_loss(
    g: &mut Graph,
    det: &LossNodes,
    tra: Option<&LossNodes>,
    struct_loss: Option<NodeId>,
    weights: &LossWeights,
    is_first_frame: bool,
) -> Result<NodeId, ObjectiveError> {
    weights.validate()?;
    let mut total = g.scalar(0.0);
    let add_terms = |g: &mut Graph, terms: &LossNodes, total: NodeId| -> Result<NodeId, TensorError> {
        let mut acc = total;
        for (node, w) in [
            (terms.cls, weights.cls),
            (terms.l1, weights.l1),
            (terms.giou, weights.giou),
            (terms.refer, weights.refer),
        ] {
            if let Some(n) = node {
                let scaled = g.scale(n, w);
                acc = g.add(acc, scaled)?;
            }
        }
        Ok(acc)
    };
    total = add_terms(g, det, total)?;
    if let (Some(tra), false) = (tra, is_first_frame) {
        total = add_terms(g, tra, total)?;
    }
    if let Some(s) = struct_loss {
        let scaled = g.scale(s, weights.struct_);
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
        // enumerate all injections of rows into columns
        let n = cost.len();
        let m = cost[0].len();
        let mut best = f64::INFINITY;
        let mut cols: Vec<usize> = (0..m).collect();
        permute_k(&mut cols, 0, n, &mut |chosen| {
            let total: f64 = chosen.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute_k(cols: &mut Vec<usize>, depth: usize, k: usize, f: &mut impl FnMut(&[usize])) {
        if depth == k {
            f(&cols[..k]);
            return;
        }
        for i in depth..cols.len() {
            cols.swap(depth, i);
            permute_k(cols, depth + 1, k, f);
            cols.swap(depth, i);
        }
    }

    #[test]
    fn assignment_matches_brute_force_on_200_seeds() {
        for seed in 0..200u64 {
            let mut rng = SplitMix64::new(seed);
            let n = 1 + rng.next_below(4);
            let m = n + rng.next_below(3);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.uniform(0.0, 10.0)).collect())
                .collect();
            let assign = min_cost_assignment(&cost);
            let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
            let best = brute_force_min_cost(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "seed {seed}: {total} vs {best}"
            );
            // injectivity
            let mut seen = std::collections::BTreeSet::new();
            for &c in &assign {
                assert!(seen.insert(c));
            }
        }
    }

    fn single_pred(score: f64, bbox: [f64; 4]) -> Predictions {
        Predictions {
            boxes: vec![bbox],
            class_scores: vec![score],
            ref_scores: vec![0.5],
        }
    }

    #[test]
    fn exact_match_costs_only_class_term() {
        let w = LossWeights::default();
        let b = [0.5, 0.5, 0.2, 0.2];
        let preds = single_pred(0.8, b);
        let gt = vec![GtObject {
            id: 1,
            bbox: b,
            referred: true,
        }];
        let a = hungarian_match(&preds, &gt, &w).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        // cost of the matched pair is cls_w * (1 - score); check via giou = 1, l1 = 0
        assert_eq!(giou_cxcywh(b, b), 1.0);
    }

    #[test]
    fn mirror_pair_matches_brute_force() {
        let w = LossWeights::default();
        for seed in 0..50u64 {
            let mut rng = SplitMix64::new(seed);
            let mk_box = |rng: &mut SplitMix64| {
                [
                    rng.uniform(0.2, 0.8),
                    rng.uniform(0.2, 0.8),
                    rng.uniform(0.05, 0.2),
                    rng.uniform(0.05, 0.2),
                ]
            };
            let preds = Predictions {
                boxes: vec![mk_box(&mut rng), mk_box(&mut rng)],
                class_scores: vec![rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)],
                ref_scores: vec![0.5, 0.5],
            };
            let gt = vec![
                GtObject { id: 1, bbox: mk_box(&mut rng), referred: true },
                GtObject { id: 2, bbox: mk_box(&mut rng), referred: false },
            ];
            let a = hungarian_match(&preds, &gt, &w).unwrap();
            let cost_of = |p: usize, g: usize| {
                let l1: f64 = preds.boxes[p]
                    .iter()
                    .zip(&gt[g].bbox)
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                w.cls * (1.0 - preds.class_scores[p])
                    + w.l1 * l1
                    + w.giou * (1.0 - giou_cxcywh(preds.boxes[p], gt[g].bbox))
            };
            let got: f64 = a.pairs.iter().map(|&(p, g)| cost_of(p, g)).sum();
            let best = (cost_of(0, 0) + cost_of(1, 1)).min(cost_of(0, 1) + cost_of(1, 0));
            assert!((got - best).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn empty_gt_leaves_all_unmatched() {
        let preds = single_pred(0.9, [0.5, 0.5, 0.1, 0.1]);
        let a = hungarian_match(&preds, &[], &LossWeights::default()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_predictions, vec![0]);
    }

    // direct scalar formula the graph version is checked against
    fn focal_oracle(scores: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
        let mut total = 0.0;
        for (&p, &y) in scores.iter().zip(targets) {
            let p = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            total += if y > 0.5 {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            };
        }
        total / scores.len() as f64
    }

    #[test]
    fn focal_perfect_positive_contributes_nothing() {
        let mut g = Graph::new();
        let s = g.constant(Tensor2D::from_vec(1, 1, vec![1.0]).unwrap());
        let loss = focal_loss(&mut g, s, &[1.0], FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn focal_degenerates_to_half_bce() {
        let scores = [0.3, 0.8, 0.6];
        let targets = [1.0, 0.0, 1.0];
        let mut g = Graph::new();
        let s = g.constant(Tensor2D::from_vec(3, 1, scores.to_vec()).unwrap());
        let focal = focal_loss(&mut g, s, &targets, 0.5, 0.0).unwrap();
        let bce = bce_loss(&mut g, s, &targets).unwrap();
        let half = g.scale(bce, 0.5);
        assert!((g.value(focal).item() - g.value(half).item()).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_scalar_oracle() {
        let mut rng = SplitMix64::new(77);
        let scores: Vec<f64> = (0..12).map(|_| rng.uniform(0.01, 0.99)).collect();
        let targets: Vec<f64> = (0..12).map(|_| if rng.chance(0.4) { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let s = g.constant(Tensor2D::from_vec(12, 1, scores.clone()).unwrap());
        let loss = focal_loss(&mut g, s, &targets, FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        let want = focal_oracle(&scores, &targets, FOCAL_ALPHA, FOCAL_GAMMA);
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_have_zero_losses() {
        let b = [0.4, 0.6, 0.2, 0.1];
        let mut g = Graph::new();
        let pred = g.constant(Tensor2D::from_vec(1, 4, b.to_vec()).unwrap());
        let (l1, giou) = box_losses(&mut g, pred, &[b]).unwrap();
        assert!(g.value(l1).item().abs() < 1e-15);
        assert!(g.value(giou).item().abs() < 1e-12);
    }

    #[test]
    fn distant_disjoint_boxes_approach_giou_limit() {
        let a = [0.05, 0.05, 0.02, 0.02];
        let b = [0.95, 0.95, 0.02, 0.02];
        assert_eq!(iou_cxcywh(a, b), 0.0);
        let g_val = giou_cxcywh(a, b);
        assert!(g_val < -0.97, "giou = {g_val}");
        let mut g = Graph::new();
        let pred = g.constant(Tensor2D::from_vec(1, 4, a.to_vec()).unwrap());
        let (_, giou_loss) = box_losses(&mut g, pred, &[b]).unwrap();
        assert!(g.value(giou_loss).item() > 1.97);
    }

    #[test]
    fn giou_equals_iou_when_contained() {
        let outer = [0.5, 0.5, 0.4, 0.4];
        let inner = [0.5, 0.5, 0.1, 0.1];
        let i = iou_cxcywh(outer, inner);
        let gv = giou_cxcywh(outer, inner);
        assert!((i - gv).abs() < 1e-12);
    }

    #[test]
    fn giou_matches_rasterization_oracle() {
        let mut rng = SplitMix64::new(31);
        let a = [
            rng.uniform(0.3, 0.5),
            rng.uniform(0.3, 0.5),
            rng.uniform(0.2, 0.4),
            rng.uniform(0.2, 0.4),
        ];
        let b = [
            rng.uniform(0.4, 0.6),
            rng.uniform(0.4, 0.6),
            rng.uniform(0.2, 0.4),
            rng.uniform(0.2, 0.4),
        ];
        // area oracle on a 1000x1000 raster
        let n = 1000usize;
        let ca = to_corners(a);
        let cb = to_corners(b);
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut enclosing = 0usize;
        let ec = [
            ca[0].min(cb[0]),
            ca[1].min(cb[1]),
            ca[2].max(cb[2]),
            ca[3].max(cb[3]),
        ];
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                let in_a = x >= ca[0] && x <= ca[2] && y >= ca[1] && y <= ca[3];
                let in_b = x >= cb[0] && x <= cb[2] && y >= cb[1] && y <= cb[3];
                let in_e = x >= ec[0] && x <= ec[2] && y >= ec[1] && y <= ec[3];
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
                if in_e {
                    enclosing += 1;
                }
            }
        }
        let cell = 1.0 / (n * n) as f64;
        let iou_r = inter as f64 / union as f64;
        let giou_r = iou_r
            - ((enclosing - union) as f64 * cell) / (enclosing as f64 * cell);
        let giou_a = giou_cxcywh(a, b);
        assert!((giou_a - giou_r).abs() < 1e-3, "{giou_a} vs {giou_r}");
    }

    #[test]
    fn nonpositive_gt_box_is_rejected() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor2D::from_vec(1, 4, vec![0.5, 0.5, 0.1, 0.1]).unwrap());
        let err = box_losses(&mut g, pred, &[[0.5, 0.5, 0.0, 0.1]]).unwrap_err();
        assert!(matches!(err, ObjectiveError::InvalidBox(_)));
    }

    #[test]
    fn paper_weights_total_thirteen() {
        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let det = LossNodes {
            cls: Some(one),
            l1: Some(one),
            giou: Some(one),
            refer: Some(one),
        };
        let total = total_loss(
            &mut g,
            &det,
            None,
            Some(one),
            &LossWeights::default(),
            true,
        )
        .unwrap();
        assert_eq!(g.value(total).item(), 13.0);
    }

    #[test]
    fn zero_components_zero_total() {
        let mut g = Graph::new();
        let zero = g.scalar(0.0);
        let det = LossNodes {
            cls: Some(zero),
            l1: Some(zero),
            giou: Some(zero),
            refer: Some(zero),
        };
        let total =
            total_loss(&mut g, &det, None, Some(zero), &LossWeights::default(), false).unwrap();
        assert_eq!(g.value(total).item(), 0.0);
    }

    #[test]
    fn first_frame_excludes_track_terms() {
        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let det = LossNodes {
            cls: Some(one),
            ..Default::default()
        };
        let tra = LossNodes {
            cls: Some(one),
            l1: Some(one),
            giou: Some(one),
            refer: Some(one),
        };
        let w = LossWeights::default();
        let first = total_loss(&mut g, &det, Some(&tra), None, &w, true).unwrap();
        assert_eq!(g.value(first).item(), 2.0);
        let later = total_loss(&mut g, &det, Some(&tra), None, &w, false).unwrap();
        assert_eq!(g.value(later).item(), 2.0 + 13.0 - 2.0);
    }

    #[test]
    fn total_is_monotone_in_components() {
        let mut g = Graph::new();
        let small = g.scalar(0.5);
        let big = g.scalar(0.9);
        let w = LossWeights::default();
        let det_small = LossNodes {
            cls: Some(small),
            l1: Some(small),
            giou: Some(small),
            refer: Some(small),
        };
        let det_big = LossNodes {
            cls: Some(big),
            l1: Some(small),
            giou: Some(small),
            refer: Some(small),
        };
        let a = total_loss(&mut g, &det_small, None, None, &w, true).unwrap();
        let b = total_loss(&mut g, &det_big, None, None, &w, true).unwrap();
        assert!(g.value(b).item() >= g.value(a).item());
    }

    #[test]
    fn bce_zero_at_clamped_exact_labels() {
        let mut g = Graph::new();
        let s = g.constant(
            Tensor2D::from_vec(2, 1, vec![1.0 - SCORE_EPS, SCORE_EPS]).unwrap(),
        );
        let loss = bce_loss(&mut g, s, &[1.0, 0.0]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn referring_bce_gradient_checks_out() {
        let mut store = crate::tensor::ParamStore::new();
        store
            .insert("logits", Tensor2D::from_vec(4, 1, vec![0.3, -0.2, 0.8, -1.0]).unwrap())
            .unwrap();
        let targets = [1.0, 0.0, 1.0, 0.0];
        let report = crate::tensor::finite_diff_check(&mut store, 1e-5, |g, s| {
            let logits = g.param(s, "logits")?;
            let scores = g.sigmoid(logits);
            let loss = bce_loss(g, scores, &targets).map_err(|e| match e {
                ObjectiveError::Tensor(t) => t,
                other => TensorError::Invalid(other.to_string()),
            })?;
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }
}
