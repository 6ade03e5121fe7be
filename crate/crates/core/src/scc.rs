//! Structural consistency constraint.
//!
//! Training-only supervisory path: visual proxy features are read off the
//! self-attended grid through stream-conditioned cross-attention, a one-block
//! text decoder reconstructs sentence-level embeddings from them, and the
//! losses compare the *geometry* of the original and reconstructed embedding
//! sets — normalized pairwise distances and vertex angles under a Huber
//! penalty — rather than matching embeddings point by point. The struct loss
//! is invariant under similarity transforms of either space; the point-wise
//! baseline is kept for the ablation axis.

use crate::bif::{cross_attend, ffn_residual, register_attention, register_ffn};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor2D, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SccError {
    #[error("insufficient embedding set: need at least {need}, got {got}")]
    InsufficientSet { need: usize, got: usize },
    #[error("embedding sets are not aligned: {0} vs {1} members")]
    Misaligned(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Default balance between the distance and angle terms.
pub const DEFAULT_LAMBDA_ANGLE: f64 = 0.4;

/// Numerical floor for the mean pairwise distance normalizers.
pub const MEAN_DIST_FLOOR: f64 = 1e-8;

/// Edges shorter than this are skipped when forming vertex angles.
pub const DEGENERATE_EDGE: f64 = 1e-8;

/// Sentence-level embedding labels: static object, spatial motion, global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingLabel {
    So,
    Sm,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    Original,
    Reconstructed,
}

/// One expression's three labeled embeddings in one space.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub space: EmbeddingSpace,
    /// Exactly one member per label, in (so, sm, g) order.
    pub members: [(EmbeddingLabel, Vec<f64>); 3],
}

impl EmbeddingSet {
    pub fn new(space: EmbeddingSpace, so: Vec<f64>, sm: Vec<f64>, g: Vec<f64>) -> Self {
        EmbeddingSet {
            space,
            members: [
                (EmbeddingLabel::So, so),
                (EmbeddingLabel::Sm, sm),
                (EmbeddingLabel::G, g),
            ],
        }
    }

    pub fn vectors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.members.iter().map(|(_, v)| v)
    }
}

/// Flatten a batch of embedding sets into the pooled vector list the losses
/// operate on (per-expression members first, batch order preserved).
pub fn pool_sets(sets: &[EmbeddingSet]) -> Vec<Vec<f64>> {
    sets.iter().flat_map(|s| s.vectors().cloned()).collect()
}

// ── Parameters ───────────────────────────────────────────────────────

pub fn register_scc(
    store: &mut ParamStore,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    register_attention(store, "scc.proxy_so", d, rng)?;
    register_attention(store, "scc.proxy_sm", d, rng)?;
    register_attention(store, "scc.dec.ca", d, rng)?;
    register_ffn(store, "scc.dec.ffn", d, rng)?;
    for name in ["scc.q_so", "scc.q_sm", "scc.q_g"] {
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..d).map(|_| rng.uniform(-bound, bound)).collect();
        store.insert(name, Tensor2D::from_vec(1, d, data)?)?;
    }
    Ok(())
}

// ── Forward pieces ───────────────────────────────────────────────────

/// Stream-conditioned visual proxies: `F_i = V + LN(CA(V, S_i, S_i))` for
/// the static and motion streams.
pub fn proxy_features(
    g: &mut Graph,
    store: &ParamStore,
    tilde_visual: NodeId,
    s_so: NodeId,
    s_sm: NodeId,
    eps: f64,
) -> Result<(NodeId, NodeId), TensorError> {
    let f_so = cross_attend(g, store, "scc.proxy_so", tilde_visual, s_so, eps)?;
    let f_sm = cross_attend(g, store, "scc.proxy_sm", tilde_visual, s_sm, eps)?;
    Ok((f_so, f_sm))
}

/// One decoder block turning proxy features into a reconstructed sentence
/// embedding: the learnable query row cross-attends into the features, then
/// a feed-forward residual. Self-attention of a single row is skipped.
pub fn reconstruct_text(
    g: &mut Graph,
    store: &ParamStore,
    features: NodeId,
    query_name: &str,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let q = g.param(store, query_name)?;
    let attended = cross_attend(g, store, "scc.dec.ca", q, features, eps)?;
    ffn_residual(g, store, "scc.dec.ffn", attended, eps)
}

// ── Losses (graph versions) ──────────────────────────────────────────

fn euclid_dist(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let diff = g.sub(a, b)?;
    let sq = g.mul_elem(diff, diff)?;
    let s = g.sum_all(sq);
    Ok(g.sqrt(s))
}

/// Distance-preservation loss over all distinct pairs of the pooled sets:
/// Huber of the difference of mean-normalized pairwise distances.
pub fn loss_dist(
    g: &mut Graph,
    orig: &[NodeId],
    recon: &[NodeId],
) -> Result<NodeId, SccError> {
    if orig.len() != recon.len() {
        return Err(SccError::Misaligned(orig.len(), recon.len()));
    }
    if orig.len() < 2 {
        return Err(SccError::InsufficientSet {
            need: 2,
            got: orig.len(),
        });
    }
    let n = orig.len();
    let mut d_orig = Vec::new();
    let mut d_recon = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            d_orig.push(euclid_dist(g, orig[i], orig[j])?);
            d_recon.push(euclid_dist(g, recon[i], recon[j])?);
        }
    }
    let mean_of = |g: &mut Graph, ds: &[NodeId]| -> Result<NodeId, TensorError> {
        let mut acc = ds[0];
        for &d in &ds[1..] {
            acc = g.add(acc, d)?;
        }
        let mean = g.scale(acc, 1.0 / ds.len() as f64);
        let floor = g.scalar(MEAN_DIST_FLOOR);
        g.max_elem(mean, floor)
    };
    let mean_orig = mean_of(g, &d_orig)?;
    let mean_recon = mean_of(g, &d_recon)?;
    let mut total = g.scalar(0.0);
    for (&a, &b) in d_orig.iter().zip(&d_recon) {
        let na = g.div_elem(a, mean_orig)?;
        let nb = g.div_elem(b, mean_recon)?;
        let diff = g.sub(na, nb)?;
        let h = g.huber(diff);
        total = g.add(total, h)?;
    }
    Ok(total)
}

fn vertex_cos(
    g: &mut Graph,
    vertex: NodeId,
    arm1: NodeId,
    arm2: NodeId,
) -> Result<(NodeId, f64, f64), TensorError> {
    let u = g.sub(arm1, vertex)?;
    let v = g.sub(arm2, vertex)?;
    let uv = g.mul_elem(u, v)?;
    let dot = g.sum_all(uv);
    let uu = g.mul_elem(u, u)?;
    let nu = g.sum_all(uu);
    let nu = g.sqrt(nu);
    let vv = g.mul_elem(v, v)?;
    let nv = g.sum_all(vv);
    let nv = g.sqrt(nv);
    let nu_val = g.value(nu).item();
    let nv_val = g.value(nv).item();
    let prod = g.mul_elem(nu, nv)?;
    let cos = g.div_elem(dot, prod)?;
    Ok((cos, nu_val, nv_val))
}

/// Angle-preservation loss: one vertex angle per member of each unordered
/// triple; angles with a degenerate edge in either space are skipped.
pub fn loss_angle(
    g: &mut Graph,
    orig: &[NodeId],
    recon: &[NodeId],
) -> Result<NodeId, SccError> {
    if orig.len() != recon.len() {
        return Err(SccError::Misaligned(orig.len(), recon.len()));
    }
    if orig.len() < 3 {
        return Err(SccError::InsufficientSet {
            need: 3,
            got: orig.len(),
        });
    }
    let n = orig.len();
    let mut total = g.scalar(0.0);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for (a, b, c) in [(i, j, k), (j, i, k), (k, i, j)] {
                    let (cos_o, no1, no2) = vertex_cos(g, orig[a], orig[b], orig[c])?;
                    let (cos_r, nr1, nr2) = vertex_cos(g, recon[a], recon[b], recon[c])?;
                    if no1 < DEGENERATE_EDGE
                        || no2 < DEGENERATE_EDGE
                        || nr1 < DEGENERATE_EDGE
                        || nr2 < DEGENERATE_EDGE
                    {
                        continue;
                    }
                    let diff = g.sub(cos_o, cos_r)?;
                    let h = g.huber(diff);
                    total = g.add(total, h)?;
                }
            }
        }
    }
    Ok(total)
}

/// `loss_dist + lambda_angle * loss_angle`.
pub fn loss_struct(
    g: &mut Graph,
    orig: &[NodeId],
    recon: &[NodeId],
    lambda_angle: f64,
) -> Result<NodeId, SccError> {
    let dist = loss_dist(g, orig, recon)?;
    let angle = loss_angle(g, orig, recon)?;
    let scaled = g.scale(angle, lambda_angle);
    Ok(g.add(dist, scaled)?)
}

/// Point-wise baseline: Huber of each aligned embedding distance.
pub fn loss_pointwise(
    g: &mut Graph,
    orig: &[NodeId],
    recon: &[NodeId],
) -> Result<NodeId, SccError> {
    if orig.len() != recon.len() {
        return Err(SccError::Misaligned(orig.len(), recon.len()));
    }
    let mut total = g.scalar(0.0);
    for (&a, &b) in orig.iter().zip(recon) {
        let d = euclid_dist(g, a, b)?;
        let h = g.huber(d);
        total = g.add(total, h)?;
    }
    Ok(total)
}

// ── Plain-value wrappers ─────────────────────────────────────────────

fn as_nodes(g: &mut Graph, vs: &[Vec<f64>]) -> Vec<NodeId> {
    vs.iter()
        .map(|v| g.constant(Tensor2D::row_vector(v.clone())))
        .collect()
}

/// All four losses on plain vectors, for the standalone loss mode.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub dist: f64,
    pub angle: f64,
    #[serde(rename = "struct")]
    pub struct_: f64,
    pub pointwise: f64,
}

pub fn losses_of(
    orig: &[Vec<f64>],
    recon: &[Vec<f64>],
    lambda_angle: f64,
) -> Result<LossBreakdown, SccError> {
    let mut g = Graph::new();
    let o = as_nodes(&mut g, orig);
    let r = as_nodes(&mut g, recon);
    let dist = loss_dist(&mut g, &o, &r)?;
    let angle = loss_angle(&mut g, &o, &r)?;
    let point = loss_pointwise(&mut g, &o, &r)?;
    let dist_v = g.value(dist).item();
    let angle_v = g.value(angle).item();
    Ok(LossBreakdown {
        dist: dist_v,
        angle: angle_v,
        struct_: dist_v + lambda_angle * angle_v,
        pointwise: g.value(point).item(),
    })
}
