//! Online tracking loop: per-frame inference, two-stage score filtering,
//! and track lifecycle management with stable identities.
//!
//! Stage 1 keeps detections whose class score clears the confidence cut;
//! stage 2 keeps those whose referring score clears `beta_ref`. Surviving
//! query features carry to the next frame as track queries; a track missing
//! for `miss_limit` consecutive frames terminates. Newborn identities are
//! assigned in ascending detection-row order, which keeps the loop
//! predictable for the oracle-backed test double.

use crate::config::Thresholds;
use crate::decouple::Lexicon;
use crate::encode::{embed_scene, EncodeError, VisualFeatures};
use crate::metrics::{Detection, FrameDets};
use crate::model::{CdrmtModel, ExprEncoding};
use crate::psdql::{InjectionConfig, TrackQuery};
use crate::scene::{referring_oracle, ReferredIds, SceneError, SceneFrame};
use crate::tensor::{Graph, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("empty frame sequence")]
    EmptyFrames,
    #[error("inference produced {got} rows, expected {want}")]
    RowMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Per-row outputs of one frame of inference. Rows `0..n_detect` are
/// detection queries, the rest align with the carried track list.
#[derive(Debug, Clone)]
pub struct FramePredictions {
    pub boxes: Vec<[f64; 4]>,
    pub class_scores: Vec<f64>,
    pub ref_scores: Vec<f64>,
    /// Query output features carried forward by survivors.
    pub features: Vec<Vec<f64>>,
    pub n_detect: usize,
}

pub trait FrameInference {
    fn infer(
        &mut self,
        frame: &SceneFrame,
        tracks: &[TrackQuery],
    ) -> Result<FramePredictions, TrackError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub ref_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub identity: u64,
    pub points: Vec<TrackPoint>,
}

/// Run the full loop over a frame sequence.
pub fn run_tracking(
    inference: &mut dyn FrameInference,
    frames: &[SceneFrame],
    thresholds: &Thresholds,
) -> Result<Vec<Track>, TrackError> {
    if frames.is_empty() {
        return Err(TrackError::EmptyFrames);
    }
    struct Live {
        query: TrackQuery,
        points: Vec<TrackPoint>,
    }
    let mut live: Vec<Live> = Vec::new();
    let mut finished: Vec<Track> = Vec::new();
    let mut next_identity: u64 = 1;

    for frame in frames {
        let queries: Vec<TrackQuery> = live.iter().map(|l| l.query.clone()).collect();
        let preds = inference.infer(frame, &queries)?;
        let want = preds.n_detect + queries.len();
        if preds.boxes.len() != want
            || preds.class_scores.len() != want
            || preds.ref_scores.len() != want
            || preds.features.len() != want
        {
            return Err(TrackError::RowMismatch {
                got: preds.boxes.len(),
                want,
            });
        }
        let keeps = |row: usize| {
            preds.class_scores[row] > thresholds.confidence
                && preds.ref_scores[row] > thresholds.beta_ref
        };
        // track rows first: update or miss
        let mut still_live: Vec<Live> = Vec::new();
        for (slot, mut l) in live.into_iter().enumerate() {
            let row = preds.n_detect + slot;
            if keeps(row) {
                l.query.features = preds.features[row].clone();
                l.query.misses = 0;
                l.points.push(TrackPoint {
                    t: frame.t,
                    bbox: preds.boxes[row],
                    ref_score: preds.ref_scores[row],
                });
                still_live.push(l);
            } else {
                l.query.misses += 1;
                if l.query.misses >= thresholds.miss_limit {
                    finished.push(Track {
                        identity: l.query.identity,
                        points: l.points,
                    });
                } else {
                    still_live.push(l);
                }
            }
        }
        live = still_live;
        // newborns from detection rows, ascending row order
        for row in 0..preds.n_detect {
            if keeps(row) {
                let identity = next_identity;
                next_identity += 1;
                live.push(Live {
                    query: TrackQuery {
                        identity,
                        features: preds.features[row].clone(),
                        misses: 0,
                    },
                    points: vec![TrackPoint {
                        t: frame.t,
                        bbox: preds.boxes[row],
                        ref_score: preds.ref_scores[row],
                    }],
                });
            }
        }
    }
    finished.extend(live.into_iter().map(|l| Track {
        identity: l.query.identity,
        points: l.points,
    }));
    finished.sort_by_key(|t| t.identity);
    Ok(finished)
}

// ── Model-backed inference ───────────────────────────────────────────

pub struct ModelInference<'a> {
    pub model: &'a CdrmtModel,
    pub expr: &'a ExprEncoding,
    pub injection: InjectionConfig,
    pub seed: u64,
}

impl ModelInference<'_> {
    fn embed(&self, frame: &SceneFrame) -> Result<VisualFeatures, EncodeError> {
        let dims = &self.model.dims;
        embed_scene(frame, dims.grid_h, dims.grid_w, dims.channels, self.seed)
    }
}

impl FrameInference for ModelInference<'_> {
    fn infer(
        &mut self,
        frame: &SceneFrame,
        tracks: &[TrackQuery],
    ) -> Result<FramePredictions, TrackError> {
        let visual = self.embed(frame)?;
        let mut g = Graph::new();
        let fw = self
            .model
            .forward_frame(&mut g, &visual, self.expr, tracks, &self.injection)?;
        let boxes_t = g.value(fw.heads.boxes);
        let rows = boxes_t.rows();
        let boxes = (0..rows)
            .map(|i| [
                boxes_t.get(i, 0),
                boxes_t.get(i, 1),
                boxes_t.get(i, 2),
                boxes_t.get(i, 3),
            ])
            .collect();
        let class_scores = g.value(fw.heads.class).data().to_vec();
        let ref_scores = g.value(fw.heads.referring).data().to_vec();
        let dec = g.value(fw.decoder_out);
        let features = (0..rows).map(|i| dec.row(i).to_vec()).collect();
        Ok(FramePredictions {
            boxes,
            class_scores,
            ref_scores,
            features,
            n_detect: fw.n_detect,
        })
    }
}

// ── Oracle-backed test double ────────────────────────────────────────

/// Inference double whose heads emit oracle-perfect scores and boxes. It
/// mirrors the loop's newborn-identity policy (ascending detect-row order,
/// counter starting at 1) to keep its identity-to-object map in sync.
pub struct OracleInference {
    pub expression: String,
    pub lexicon: Lexicon,
    pub n_detect: usize,
    pub thresholds: Thresholds,
    ident_to_obj: BTreeMap<u64, u64>,
    next_identity: u64,
}

impl OracleInference {
    pub fn new(expression: &str, lexicon: Lexicon, n_detect: usize, thresholds: Thresholds) -> Self {
        OracleInference {
            expression: expression.to_string(),
            lexicon,
            n_detect,
            thresholds,
            ident_to_obj: BTreeMap::new(),
            next_identity: 1,
        }
    }

    const HIT: f64 = 0.99;
    const MISS: f64 = 0.01;
}

impl FrameInference for OracleInference {
    fn infer(
        &mut self,
        frame: &SceneFrame,
        tracks: &[TrackQuery],
    ) -> Result<FramePredictions, TrackError> {
        let referred = referring_oracle(&self.expression, frame, &self.lexicon)?;
        let box_of = |id: u64| frame.objects.iter().find(|o| o.id == id).map(|o| o.bbox);
        let rows = self.n_detect + tracks.len();
        let mut preds = FramePredictions {
            boxes: vec![[0.5, 0.5, 0.1, 0.1]; rows],
            class_scores: vec![Self::MISS; rows],
            ref_scores: vec![Self::MISS; rows],
            features: vec![vec![0.0]; rows],
            n_detect: self.n_detect,
        };
        let mut covered: Vec<u64> = Vec::new();
        for (slot, track) in tracks.iter().enumerate() {
            let row = self.n_detect + slot;
            let obj = self.ident_to_obj.get(&track.identity).copied();
            if let Some(obj) = obj {
                if referred.contains(&obj) {
                    if let Some(bbox) = box_of(obj) {
                        preds.boxes[row] = bbox;
                        preds.class_scores[row] = Self::HIT;
                        preds.ref_scores[row] = Self::HIT;
                        preds.features[row] = vec![obj as f64];
                        covered.push(obj);
                    }
                }
            }
        }
        let newborn: Vec<u64> = referred
            .iter()
            .copied()
            .filter(|id| !covered.contains(id))
            .collect();
        let spawns = Self::HIT > self.thresholds.confidence && Self::HIT > self.thresholds.beta_ref;
        for (k, obj) in newborn.iter().enumerate().take(self.n_detect) {
            preds.boxes[k] = box_of(*obj).expect("referred object present");
            preds.class_scores[k] = Self::HIT;
            preds.ref_scores[k] = Self::HIT;
            preds.features[k] = vec![*obj as f64];
            if spawns {
                self.ident_to_obj.insert(self.next_identity + k as u64, *obj);
            }
        }
        if spawns {
            self.next_identity += newborn.len().min(self.n_detect) as u64;
        }
        Ok(preds)
    }
}


// ── Evaluation adapters ──────────────────────────────────────────────

/// Pair predicted tracks with oracle ground truth per frame for HOTA.
pub fn tracks_to_frame_dets(
    tracks: &[Track],
    frames: &[SceneFrame],
    referred: &[ReferredIds],
) -> Vec<FrameDets> {
    let ref_by_t: BTreeMap<usize, &ReferredIds> = referred.iter().map(|r| (r.t, r)).collect();
    frames
        .iter()
        .map(|frame| {
            let gts = ref_by_t
                .get(&frame.t)
                .map(|r| {
                    frame
                        .objects
                        .iter()
                        .filter(|o| r.ids.contains(&o.id))
                        .map(|o| Detection {
                            id: o.id,
                            bbox: o.bbox,
                        })
                        .collect()
                })
                .unwrap_or_default();
            let preds = tracks
                .iter()
                .filter_map(|tr| {
                    tr.points
                        .iter()
                        .find(|p| p.t == frame.t)
                        .map(|p| Detection {
                            id: tr.identity,
                            bbox: p.bbox,
                        })
                })
                .collect();
            FrameDets {
                t: frame.t,
                preds,
                gts,
            }
        })
        .collect()
}

/// Micro-averaged per-frame referring F1: predictions match ground truth
/// greedily through max-IoU assignment at 0.5.
pub fn referring_f1(sequence: &[FrameDets]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for frame in sequence {
        let m = crate::metrics::match_frame(&frame.preds, &frame.gts, 0.5);
        tp += m.tp.len();
        fp += m.fp.len();
        fn_ += m.fn_.len();
    }
    if tp == 0 && fp == 0 && fn_ == 0 {
        return 1.0;
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + fn_).max(1) as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Tracking output as JSONL: one line per frame with live track boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackFrameRow {
    pub t: usize,
    pub tracks: Vec<TrackRowEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRowEntry {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

pub fn tracks_to_rows(tracks: &[Track], frames: &[SceneFrame]) -> Vec<TrackFrameRow> {
    frames
        .iter()
        .map(|frame| TrackFrameRow {
            t: frame.t,
            tracks: tracks
                .iter()
                .filter_map(|tr| {
                    tr.points.iter().find(|p| p.t == frame.t).map(|p| TrackRowEntry {
                        id: tr.identity,
                        bbox: p.bbox,
                    })
                })
                .collect(),
        })
        .collect()
}

pub fn write_track_rows(path: &std::path::Path, rows: &[TrackFrameRow]) -> Result<(), SceneError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_track_rows(path: &std::path::Path) -> Result<Vec<TrackFrameRow>, SceneError> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}
