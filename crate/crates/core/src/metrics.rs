//! HOTA-family evaluation: detection accuracy, association accuracy, their
//! geometric-mean combination per localization threshold, and the auxiliary
//! recall/precision/localization scores, averaged over an alpha grid.

use crate::objective::{iou_cxcywh, min_cost_assignment};
use serde::Serialize;
use std::collections::BTreeMap;

/// One identified detection (prediction or ground truth).
#[derive(Debug, Clone)]
pub struct Detection {
    pub id: u64,
    pub bbox: [f64; 4],
}

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameDets {
    pub t: usize,
    pub preds: Vec<Detection>,
    pub gts: Vec<Detection>,
}

/// Outcome of matching one frame at one threshold.
#[derive(Debug, Clone, Default)]
pub struct FrameMatch {
    /// (pred id, gt id, IoU) of every true positive.
    pub tp: Vec<(u64, u64, f64)>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

/// Maximum-IoU-sum bipartite matching restricted to pairs with IoU >= alpha.
pub fn match_frame(preds: &[Detection], gts: &[Detection], alpha: f64) -> FrameMatch {
    const INFEASIBLE: f64 = 1e9;
    let mut result = FrameMatch::default();
    if preds.is_empty() || gts.is_empty() {
        result.fp = preds.iter().map(|p| p.id).collect();
        result.fn_ = gts.iter().map(|g| g.id).collect();
        return result;
    }
    let iou = |p: usize, g: usize| iou_cxcywh(preds[p].bbox, gts[g].bbox);
    let feasible = |v: f64| v >= alpha;
    // rows = smaller side; cost = -IoU for feasible pairs
    let swap = preds.len() > gts.len();
    let (n, m) = if swap {
        (gts.len(), preds.len())
    } else {
        (preds.len(), gts.len())
    };
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..m)
                .map(|c| {
                    let v = if swap { iou(c, r) } else { iou(r, c) };
                    if feasible(v) {
                        -v
                    } else {
                        INFEASIBLE
                    }
                })
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let mut matched_pred = vec![false; preds.len()];
    let mut matched_gt = vec![false; gts.len()];
    for (r, &c) in assign.iter().enumerate() {
        let (p, g) = if swap { (c, r) } else { (r, c) };
        let v = iou(p, g);
        if feasible(v) {
            matched_pred[p] = true;
            matched_gt[g] = true;
            result.tp.push((preds[p].id, gts[g].id, v));
        }
    }
    for (p, det) in preds.iter().enumerate() {
        if !matched_pred[p] {
            result.fp.push(det.id);
        }
    }
    for (g, det) in gts.iter().enumerate() {
        if !matched_gt[g] {
            result.fn_.push(det.id);
        }
    }
    result
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaMetrics {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

/// Alpha-averaged scores plus the per-alpha breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub detre: f64,
    pub detpr: f64,
    pub assre: f64,
    pub asspr: f64,
    pub loca: f64,
    pub per_alpha: Vec<AlphaMetrics>,
    /// No ground truth and no predictions anywhere: scored as vacuous
    /// perfection so sweeps stay NaN-free.
    pub vacuous: bool,
}

pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Evaluate a sequence at every alpha in the grid and average.
pub fn evaluate(sequence: &[FrameDets], alphas: &[f64]) -> EvalReport {
    let any_pred = sequence.iter().any(|f| !f.preds.is_empty());
    let any_gt = sequence.iter().any(|f| !f.gts.is_empty());
    if !any_pred && !any_gt {
        let per_alpha = alphas
            .iter()
            .map(|&alpha| AlphaMetrics {
                alpha,
                hota: 1.0,
                deta: 1.0,
                assa: 1.0,
                detre: 1.0,
                detpr: 1.0,
                assre: 1.0,
                asspr: 1.0,
                loca: 1.0,
                tp: 0,
                fn_: 0,
                fp: 0,
            })
            .collect();
        return EvalReport {
            hota: 1.0,
            deta: 1.0,
            assa: 1.0,
            detre: 1.0,
            detpr: 1.0,
            assre: 1.0,
            asspr: 1.0,
            loca: 1.0,
            per_alpha,
            vacuous: true,
        };
    }

    let mut gt_count: BTreeMap<u64, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u64, usize> = BTreeMap::new();
    for frame in sequence {
        for g in &frame.gts {
            *gt_count.entry(g.id).or_default() += 1;
        }
        for p in &frame.preds {
            *pred_count.entry(p.id).or_default() += 1;
        }
    }

    let mut per_alpha = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut tps: Vec<(u64, u64, f64)> = Vec::new();
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for frame in sequence {
            let m = match_frame(&frame.preds, &frame.gts, alpha);
            fp += m.fp.len();
            fn_ += m.fn_.len();
            tps.extend(m.tp);
        }
        let tp = tps.len();
        let mut pair_count: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for &(p, g, _) in &tps {
            *pair_count.entry((p, g)).or_default() += 1;
        }
        let deta = ratio(tp as f64, (tp + fn_ + fp) as f64);
        let detre = ratio(tp as f64, (tp + fn_) as f64);
        let detpr = ratio(tp as f64, (tp + fp) as f64);
        let (mut assa, mut assre, mut asspr, mut loca) = (0.0, 0.0, 0.0, 0.0);
        if tp > 0 {
            for &(p, g, iou) in &tps {
                let tpa = pair_count[&(p, g)] as f64;
                let fna = gt_count[&g] as f64 - tpa;
                let fpa = pred_count[&p] as f64 - tpa;
                assa += tpa / (tpa + fna + fpa);
                assre += tpa / (tpa + fna);
                asspr += tpa / (tpa + fpa);
                loca += iou;
            }
            assa /= tp as f64;
            assre /= tp as f64;
            asspr /= tp as f64;
            loca /= tp as f64;
        }
        per_alpha.push(AlphaMetrics {
            alpha,
            hota: (deta * assa).sqrt(),
            deta,
            assa,
            detre,
            detpr,
            assre,
            asspr,
            loca,
            tp,
            fn_,
            fp,
        });
    }
    let avg = |f: fn(&AlphaMetrics) -> f64| -> f64 {
        per_alpha.iter().map(f).sum::<f64>() / per_alpha.len() as f64
    };
    EvalReport {
        hota: avg(|a| a.hota),
        deta: avg(|a| a.deta),
        assa: avg(|a| a.assa),
        detre: avg(|a| a.detre),
        detpr: avg(|a| a.detpr),
        assre: avg(|a| a.assre),
        asspr: avg(|a| a.asspr),
        loca: avg(|a| a.loca),
        per_alpha,
        vacuous: false,
    }
}

/// CSV rows: one line per alpha plus the aggregate.
pub fn report_csv(label: &str, report: &EvalReport) -> String {
    let mut out = String::from(
        "label,alpha,hota,deta,assa,detre,detpr,assre,asspr,loca,tp,fn,fp\n",
    );
    for a in &report.per_alpha {
        out.push_str(&format!(
            "{label},{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            a.alpha,
            a.hota,
            a.deta,
            a.assa,
            a.detre,
            a.detpr,
            a.assre,
            a.asspr,
            a.loca,
            a.tp,
            a.fn_,
            a.fp
        ));
    }
    out.push_str(&format!(
        "{label},mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},,,\n",
        report.hota,
        report.deta,
        report.assa,
        report.detre,
        report.detpr,
        report.assre,
        report.asspr,
        report.loca
    ));
    out
}
