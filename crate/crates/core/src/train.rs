//! Training driver: iterates scenes frame by frame, matches detection
//! queries to newborn objects, supervises track queries by persistent
//! identity, adds the consistency loss while enabled, and steps a
//! first-order optimizer after every frame. Fully deterministic given the
//! seed; aborts with a diagnostic if any loss term goes non-finite.

use crate::config::{OptimizerKind, RunConfig};
use crate::decouple::Lexicon;
use crate::encode::{embed_scene, EncodeError, VisualFeatures};
use crate::metrics::{default_alpha_grid, evaluate};
use crate::model::{encode_expression, CdrmtModel, ExprEncoding, ExprError};
use crate::objective::{
    bce_loss, box_losses, focal_loss, hungarian_match, total_loss, GtObject, LossNodes,
    ObjectiveError, Predictions, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::psdql::TrackQuery;
use crate::rng::combine;
use crate::scc::{loss_struct, SccError};
use crate::scene::{gen_scenes, referring_oracle, GeneratorConfig, SceneError, SceneFrame};
use crate::tensor::{Graph, ParamStore, Tensor2D, TensorError};
use crate::track::{
    referring_f1, run_tracking, tracks_to_frame_dets, ModelInference, TrackError,
};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in term `{term}` (value {value}) at epoch {epoch}, scene {scene}, frame {frame}")]
    NonFinite {
        term: &'static str,
        value: f64,
        epoch: usize,
        scene: usize,
        frame: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Scc(#[from] SccError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Scenes plus the expression inventory trained and evaluated against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Vec<SceneFrame>>,
    pub expressions: Vec<String>,
}

/// Bundled synthetic benchmark: 8 scenes x 20 frames x <= 6 objects with 12
/// expressions covering category, color, side, and motion-state axes.
pub fn toy_benchmark(seed: u64) -> Dataset {
    let mut scenes = Vec::new();
    for i in 0..8u64 {
        let config = GeneratorConfig {
            frames: 20,
            objects: 4 + (i % 3) as usize,
            parked_fraction: 0.4,
            turn_prob: 0.1,
            late_entry_prob: 0.15,
        };
        scenes.push(gen_scenes(&config, combine(seed, 0xbe9c4 + i)).expect("valid config"));
    }
    Dataset {
        scenes,
        expressions: vec![
            "cars".into(),
            "people".into(),
            "black cars".into(),
            "white cars".into(),
            "cars in the left".into(),
            "cars in the right".into(),
            "people in the left".into(),
            "moving cars".into(),
            "parked cars".into(),
            "walking people".into(),
            "standing people".into(),
            "black cars in the right".into(),
        ],
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

enum Optimizer {
    Sgd,
    Adam {
        m: Vec<Tensor2D>,
        v: Vec<Tensor2D>,
        t: u64,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: store
                    .iter()
                    .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                    .collect(),
                v: store
                    .iter()
                    .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                    .collect(),
                t: 0,
            },
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr_for: impl Fn(&str) -> f64) {
        match self {
            Optimizer::Sgd => store.sgd_step(lr_for),
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let bc1 = 1.0 - B1.powi(*t as i32);
                let bc2 = 1.0 - B2.powi(*t as i32);
                for (slot, p) in store_params_mut(store).enumerate() {
                    let lr = lr_for(&p.name);
                    let ms = m[slot].data_mut();
                    let vs = v[slot].data_mut();
                    for ((val, &grad), (mi, vi)) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(ms.iter_mut().zip(vs.iter_mut()))
                    {
                        *mi = B1 * *mi + (1.0 - B1) * grad;
                        *vi = B2 * *vi + (1.0 - B2) * grad * grad;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *val -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

// ParamStore iteration with mutable access, in slot order.
fn store_params_mut(store: &mut ParamStore) -> impl Iterator<Item = &mut crate::tensor::Parameter> {
    store.iter_mut()
}

// ── Training loop ────────────────────────────────────────────────────

struct TrainTrack {
    obj_id: u64,
    features: Vec<f64>,
    misses: u32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// CSV loss log: one row per processed frame.
    pub loss_log: String,
    pub steps: usize,
    pub final_loss: f64,
}

pub const LOSS_LOG_HEADER: &str =
    "epoch,scene,expr,frame,det_cls,det_l1,det_giou,det_ref,tra_cls,tra_l1,tra_giou,tra_ref,struct,total\n";

pub fn train_loop(
    model: &mut CdrmtModel,
    dataset: &Dataset,
    config: &RunConfig,
    lexicon: &Lexicon,
) -> Result<TrainOutcome, TrainError> {
    let seed = config.seed.0;
    let dims = model.dims;
    // caches shared across epochs
    let exprs: Vec<ExprEncoding> = dataset
        .expressions
        .iter()
        .map(|e| encode_expression(e, lexicon, &dims, seed))
        .collect::<Result<_, _>>()?;
    let visuals: Vec<Vec<VisualFeatures>> = dataset
        .scenes
        .iter()
        .map(|frames| {
            frames
                .iter()
                .map(|f| embed_scene(f, dims.grid_h, dims.grid_w, dims.channels, seed))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let referred: Vec<Vec<Vec<BTreeSet<u64>>>> = dataset
        .scenes
        .iter()
        .map(|frames| {
            dataset
                .expressions
                .iter()
                .map(|e| {
                    frames
                        .iter()
                        .map(|f| referring_oracle(e, f, lexicon))
                        .collect::<Result<_, _>>()
                })
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;

    let mut optimizer = Optimizer::new(config.train.optimizer, &model.store);
    let mut log = String::from(LOSS_LOG_HEADER);
    let mut steps = 0usize;
    let mut final_loss = 0.0f64;
    let n_expr = dataset.expressions.len();
    let per_scene = if config.train.exprs_per_scene == 0 {
        n_expr
    } else {
        config.train.exprs_per_scene.min(n_expr)
    };

    for epoch in 0..config.train.epochs {
        let decayed = epoch as f64 >= config.train.decay_at * config.train.epochs as f64;
        let scale = if decayed { 0.1 } else { 1.0 };
        let lr_for = |name: &str| {
            scale
                * if name.starts_with("encode.") {
                    config.train.lr_embed
                } else {
                    config.train.lr_core
                }
        };
        for (scene_idx, frames) in dataset.scenes.iter().enumerate() {
            for k in 0..per_scene {
                let expr_idx = (epoch * per_scene + scene_idx + k * 3) % n_expr;
                let expr = &exprs[expr_idx];
                let mut tracks: Vec<TrainTrack> = Vec::new();
                let tracks_enabled = epoch >= config.train.track_start_epoch;
                for (frame_idx, frame) in frames.iter().enumerate() {
                    let loss_row = train_frame(
                        model,
                        &mut optimizer,
                        &visuals[scene_idx][frame_idx],
                        frame,
                        expr,
                        &referred[scene_idx][expr_idx][frame_idx],
                        &mut tracks,
                        tracks_enabled,
                        config,
                        &lr_for,
                    )
                    .map_err(|e| contextualize(e, epoch, scene_idx, frame_idx))?;
                    steps += 1;
                    final_loss = loss_row[9];
                    let _ = write!(
                        log,
                        "{epoch},{scene_idx},{expr_idx},{frame_idx},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                        loss_row[0],
                        loss_row[1],
                        loss_row[2],
                        loss_row[3],
                        loss_row[4],
                        loss_row[5],
                        loss_row[6],
                        loss_row[7],
                        loss_row[8],
                        loss_row[9],
                    );
                }
            }
        }
    }
    Ok(TrainOutcome {
        loss_log: log,
        steps,
        final_loss,
    })
}

fn contextualize(e: TrainError, epoch: usize, scene: usize, frame: usize) -> TrainError {
    match e {
        TrainError::NonFinite { term, value, .. } => TrainError::NonFinite {
            term,
            value,
            epoch,
            scene,
            frame,
        },
        other => other,
    }
}

fn check_finite(term: &'static str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            term,
            value,
            epoch: 0,
            scene: 0,
            frame: 0,
        })
    }
}

/// One frame: forward, match, losses, backward, step, track-carry update.
/// Returns the logged loss values
/// `[det_cls, det_l1, det_giou, det_ref, tra_cls, tra_l1, tra_giou, tra_ref, struct, total]`.
#[allow(clippy::too_many_arguments)]
fn train_frame(
    model: &mut CdrmtModel,
    optimizer: &mut Optimizer,
    visual: &VisualFeatures,
    frame: &SceneFrame,
    expr: &ExprEncoding,
    referred: &BTreeSet<u64>,
    tracks: &mut Vec<TrainTrack>,
    tracks_enabled: bool,
    config: &RunConfig,
    lr_for: &impl Fn(&str) -> f64,
) -> Result<[f64; 10], TrainError> {
    let n = model.dims.n_queries;
    let queries: Vec<TrackQuery> = tracks
        .iter()
        .map(|t| TrackQuery {
            identity: t.obj_id,
            features: t.features.clone(),
            misses: t.misses,
        })
        .collect();
    let mut g = Graph::new();
    let fw = model.forward_frame(&mut g, visual, expr, &queries, &config.injection)?;

    let gt: Vec<GtObject> = frame
        .objects
        .iter()
        .map(|o| GtObject {
            id: o.id,
            bbox: o.bbox,
            referred: referred.contains(&o.id),
        })
        .collect();
    let owned: BTreeSet<u64> = tracks
        .iter()
        .map(|t| t.obj_id)
        .filter(|id| gt.iter().any(|o| o.id == *id))
        .collect();
    let newborn_gt: Vec<&GtObject> = gt.iter().filter(|o| !owned.contains(&o.id)).collect();

    // split head nodes into detect and track rows
    let det_boxes = g.slice_rows(fw.heads.boxes, 0, n)?;
    let det_class = g.slice_rows(fw.heads.class, 0, n)?;
    let det_ref = g.slice_rows(fw.heads.referring, 0, n)?;

    // detection matching on plain values
    let det_preds = Predictions {
        boxes: (0..n)
            .map(|i| {
                let b = g.value(det_boxes);
                [b.get(i, 0), b.get(i, 1), b.get(i, 2), b.get(i, 3)]
            })
            .collect(),
        class_scores: g.value(det_class).data().to_vec(),
        ref_scores: g.value(det_ref).data().to_vec(),
    };
    let newborn_objs: Vec<GtObject> = newborn_gt.iter().map(|o| (*o).clone()).collect();
    let assignment = hungarian_match(&det_preds, &newborn_objs, &config.weights)?;

    let mut det_terms = LossNodes::default();
    let mut cls_targets = vec![0.0f64; n];
    for &(p, _) in &assignment.pairs {
        cls_targets[p] = 1.0;
    }
    det_terms.cls = Some(focal_loss(&mut g, det_class, &cls_targets, FOCAL_ALPHA, FOCAL_GAMMA)?);
    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let gt_boxes: Vec<[f64; 4]> = assignment
            .pairs
            .iter()
            .map(|&(_, gi)| newborn_objs[gi].bbox)
            .collect();
        let matched_boxes = g.gather_rows(det_boxes, &rows)?;
        let (l1, giou) = box_losses(&mut g, matched_boxes, &gt_boxes)?;
        det_terms.l1 = Some(l1);
        det_terms.giou = Some(giou);
        let matched_ref = g.gather_rows(det_ref, &rows)?;
        let ref_labels: Vec<f64> = assignment
            .pairs
            .iter()
            .map(|&(_, gi)| if newborn_objs[gi].referred { 1.0 } else { 0.0 })
            .collect();
        det_terms.refer = Some(bce_loss(&mut g, matched_ref, &ref_labels)?);
    }

    // track supervision by persistent identity
    let mut tra_terms = LossNodes::default();
    let m = tracks.len();
    if m > 0 {
        let tra_class = g.slice_rows(fw.heads.class, n, m)?;
        let tra_boxes = g.slice_rows(fw.heads.boxes, n, m)?;
        let tra_ref = g.slice_rows(fw.heads.referring, n, m)?;
        let mut tra_cls_targets = vec![0.0f64; m];
        let mut present_rows: Vec<usize> = Vec::new();
        let mut present_boxes: Vec<[f64; 4]> = Vec::new();
        let mut present_ref_labels: Vec<f64> = Vec::new();
        for (slot, t) in tracks.iter().enumerate() {
            if let Some(obj) = gt.iter().find(|o| o.id == t.obj_id) {
                tra_cls_targets[slot] = 1.0;
                present_rows.push(slot);
                present_boxes.push(obj.bbox);
                present_ref_labels.push(if obj.referred { 1.0 } else { 0.0 });
            }
        }
        tra_terms.cls = Some(focal_loss(
            &mut g,
            tra_class,
            &tra_cls_targets,
            FOCAL_ALPHA,
            FOCAL_GAMMA,
        )?);
        if !present_rows.is_empty() {
            let matched = g.gather_rows(tra_boxes, &present_rows)?;
            let (l1, giou) = box_losses(&mut g, matched, &present_boxes)?;
            tra_terms.l1 = Some(l1);
            tra_terms.giou = Some(giou);
            let matched_ref = g.gather_rows(tra_ref, &present_rows)?;
            tra_terms.refer = Some(bce_loss(&mut g, matched_ref, &present_ref_labels)?);
        }
    }

    // consistency branch only while its weight is live
    let struct_node = if config.weights.struct_ > 0.0 {
        let scc = model.forward_scc(&mut g, &fw)?;
        Some(loss_struct(&mut g, &scc.orig, &scc.recon, config.lambda_angle.0)?)
    } else {
        None
    };

    let is_first = frame.t == 0;
    let total = total_loss(
        &mut g,
        &det_terms,
        if m > 0 { Some(&tra_terms) } else { None },
        struct_node,
        &config.weights,
        is_first,
    )?;

    let val = |node: Option<crate::tensor::NodeId>| node.map(|n| g.value(n).item()).unwrap_or(0.0);
    let row = [
        check_finite("det_cls", val(det_terms.cls))?,
        check_finite("det_l1", val(det_terms.l1))?,
        check_finite("det_giou", val(det_terms.giou))?,
        check_finite("det_ref", val(det_terms.refer))?,
        check_finite("tra_cls", val(tra_terms.cls))?,
        check_finite("tra_l1", val(tra_terms.l1))?,
        check_finite("tra_giou", val(tra_terms.giou))?,
        check_finite("tra_ref", val(tra_terms.refer))?,
        check_finite("struct", val(struct_node))?,
        check_finite("total", g.value(total).item())?,
    ];

    g.backward(total)?;
    model.store.zero_grads();
    g.write_grads(&mut model.store);
    optimizer.step(&mut model.store, lr_for);

    // carry update: survivors keep features from the decoder output
    let dec = g.value(fw.decoder_out).clone();
    let miss_limit = config.thresholds.miss_limit;
    let mut next: Vec<TrainTrack> = Vec::new();
    for (slot, t) in tracks.drain(..).enumerate() {
        let row_idx = n + slot;
        if gt.iter().any(|o| o.id == t.obj_id) {
            next.push(TrainTrack {
                obj_id: t.obj_id,
                features: dec.row(row_idx).to_vec(),
                misses: 0,
            });
        } else {
            let misses = t.misses + 1;
            if misses < miss_limit {
                next.push(TrainTrack {
                    obj_id: t.obj_id,
                    features: t.features,
                    misses,
                });
            }
        }
    }
    if tracks_enabled {
        for &(p, gi) in &assignment.pairs {
            if det_preds.class_scores[p] > config.thresholds.confidence {
                next.push(TrainTrack {
                    obj_id: newborn_objs[gi].id,
                    features: dec.row(p).to_vec(),
                    misses: 0,
                });
            }
        }
    }
    *tracks = next;
    Ok(row)
}

// ── Benchmark evaluation ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PairScore {
    pub scene: usize,
    pub expression: String,
    pub f1: f64,
    pub hota: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone)]
pub struct BenchmarkEval {
    /// Micro-averaged per-frame referring F1 over every (scene, expression).
    pub f1: f64,
    /// Mean HOTA over non-vacuous (scene, expression) pairs.
    pub hota: f64,
    pub pairs: Vec<PairScore>,
}

pub fn evaluate_benchmark(
    model: &CdrmtModel,
    dataset: &Dataset,
    config: &RunConfig,
    lexicon: &Lexicon,
) -> Result<BenchmarkEval, TrainError> {
    let mut pairs = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (scene_idx, frames) in dataset.scenes.iter().enumerate() {
        for expression in &dataset.expressions {
            let expr = encode_expression(expression, lexicon, &model.dims, config.seed.0)?;
            let mut inference = ModelInference {
                model,
                expr: &expr,
                injection: config.injection,
                seed: config.seed.0,
            };
            let tracks = run_tracking(&mut inference, frames, &config.thresholds)?;
            let gt = crate::scene::oracle_track(expression, frames, lexicon)?;
            let dets = tracks_to_frame_dets(&tracks, frames, &gt);
            for fd in &dets {
                let m = crate::metrics::match_frame(&fd.preds, &fd.gts, 0.5);
                tp += m.tp.len();
                fp += m.fp.len();
                fn_ += m.fn_.len();
            }
            let report = evaluate(&dets, &default_alpha_grid());
            pairs.push(PairScore {
                scene: scene_idx,
                expression: expression.clone(),
                f1: referring_f1(&dets),
                hota: report.hota,
                vacuous: report.vacuous,
            });
        }
    }
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        let p = tp as f64 / (tp + fp).max(1) as f64;
        let r = tp as f64 / (tp + fn_).max(1) as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let live: Vec<&PairScore> = pairs.iter().filter(|p| !p.vacuous).collect();
    let hota = if live.is_empty() {
        1.0
    } else {
        live.iter().map(|p| p.hota).sum::<f64>() / live.len() as f64
    };
    Ok(BenchmarkEval { f1, hota, pairs })
}
