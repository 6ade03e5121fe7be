//! Progressive semantic-decoupled query learning.
//!
//! Object queries receive the static-attribute features before the first
//! half of the decoder layers and the spatial-motion features before the
//! second half. The injection itself (QSI) is a rank-structured additive
//! update whose factors pass through the gated Attention Active Module.
//! Per the printed form, the score matrix of the injection carries no
//! softmax; a config flag enables the softmax variant for comparison.

use crate::bif::{attention, ffn_residual, register_attention, register_ffn};
use crate::rng::SplitMix64;
use crate::tensor::{linear, silu, Graph, NodeId, ParamStore, Tensor2D, TensorError};
use serde::{Deserialize, Serialize};

/// Detection queries plus carried-over track queries for one frame.
#[derive(Debug, Clone)]
pub struct QueryState {
    /// Number of detection query rows (fixed per model config).
    pub n_detect: usize,
    /// Carried track queries with stable identities.
    pub tracks: Vec<TrackQuery>,
    pub frame: usize,
}

#[derive(Debug, Clone)]
pub struct TrackQuery {
    pub identity: u64,
    /// 1 x d feature row carried from the previous frame (detached).
    pub features: Vec<f64>,
    pub misses: u32,
}

impl QueryState {
    pub fn fresh(n_detect: usize) -> Self {
        QueryState {
            n_detect,
            tracks: Vec::new(),
            frame: 0,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.n_detect + self.tracks.len()
    }

    /// Track features as an M x d matrix (row order = track order).
    pub fn track_matrix(&self, d: usize) -> Result<Option<Tensor2D>, TensorError> {
        if self.tracks.is_empty() {
            return Ok(None);
        }
        let mut data = Vec::with_capacity(self.tracks.len() * d);
        for t in &self.tracks {
            if t.features.len() != d {
                return Err(TensorError::Invalid(format!(
                    "track feature width {} does not match model dim {d}",
                    t.features.len()
                )));
            }
            data.extend_from_slice(&t.features);
        }
        Ok(Some(Tensor2D::from_vec(self.tracks.len(), d, data)?))
    }
}

/// Injection switches mirroring the ablation axes: which query sets receive
/// semantics, in which order, and whether the score matrix is softmaxed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub inject_detect: bool,
    pub inject_track: bool,
    /// Static features first (the paper's schedule) or motion first.
    pub motion_first: bool,
    /// Softmax the injection scores (comparison variant, off by default).
    pub softmax_scores: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            inject_detect: true,
            inject_track: true,
            motion_first: false,
            softmax_scores: false,
        }
    }
}

// ── Attention Active Module ──────────────────────────────────────────

pub fn register_aam(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    store.insert_linear_init(&format!("{prefix}.psi2.w"), d, d, rng)?;
    store.insert(&format!("{prefix}.psi2.b"), Tensor2D::zeros(1, d))?;
    store.insert_linear_init(&format!("{prefix}.psi1.w"), d + 2, d, rng)?;
    store.insert(&format!("{prefix}.psi1.b"), Tensor2D::zeros(1, d))?;
    Ok(())
}

/// Gated enhancement `X + X ⊙ σ(Ψ1[Ψ2(X), Max(X), Avg(X)])`. Max/Avg pool
/// over the feature axis to per-row scalars occupying the two extra
/// columns, keeping the gate row-aligned with X.
pub fn aam_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let psi2_w = g.param(store, &format!("{prefix}.psi2.w"))?;
    let psi2_b = g.param(store, &format!("{prefix}.psi2.b"))?;
    let transformed = linear(g, x, psi2_w, psi2_b)?;
    let max_col = g.row_max(x);
    let avg_col = g.row_mean(x);
    let with_max = g.concat_cols(transformed, max_col)?;
    let stacked = g.concat_cols(with_max, avg_col)?;
    let psi1_w = g.param(store, &format!("{prefix}.psi1.w"))?;
    let psi1_b = g.param(store, &format!("{prefix}.psi1.b"))?;
    let pre_gate = linear(g, stacked, psi1_w, psi1_b)?;
    let gate = g.sigmoid(pre_gate);
    let gated = g.mul_elem(x, gate)?;
    g.add(x, gated)
}

/// `Q + (AAM(Q) AAM(f)ᵀ / sqrt(d)) AAM(f)`, sharing one AAM parameter set
/// between the query and the semantic side of a stage.
pub fn qsi_forward(
    g: &mut Graph,
    store: &ParamStore,
    aam_prefix: &str,
    queries: NodeId,
    features: NodeId,
    softmax_scores: bool,
) -> Result<NodeId, TensorError> {
    let d = g.value(queries).cols();
    if g.value(features).cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "qsi_forward",
            lhs_rows: g.value(queries).rows(),
            lhs_cols: d,
            rhs_rows: g.value(features).rows(),
            rhs_cols: g.value(features).cols(),
        });
    }
    let aq = aam_forward(g, store, aam_prefix, queries)?;
    let af = aam_forward(g, store, aam_prefix, features)?;
    let aft = g.transpose(af);
    let raw = g.matmul(aq, aft)?;
    let scores = g.scale(raw, 1.0 / (d as f64).sqrt());
    let scores = if softmax_scores {
        g.row_softmax(scores)
    } else {
        scores
    };
    let delta = g.matmul(scores, af)?;
    g.add(queries, delta)
}

// ── Decoder ──────────────────────────────────────────────────────────

pub fn register_decoder(
    store: &mut ParamStore,
    layers: usize,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    for i in 0..layers {
        register_attention(store, &format!("dec.{i}.sa"), d, rng)?;
        register_attention(store, &format!("dec.{i}.ca"), d, rng)?;
        register_ffn(store, &format!("dec.{i}.ffn"), d, rng)?;
    }
    register_aam(store, "qsi.so.aam", d, rng)?;
    register_aam(store, "qsi.sm.aam", d, rng)?;
    Ok(())
}

/// One decoder layer: query self-attention, cross-attention into the
/// context features, feed-forward; all residual. The per-query anchor
/// (`query_pos`) is added to attention queries and keys at every layer so
/// queries keep a stable identity through the stack, and the spatial
/// encoding conditions the cross-attention keys.
pub fn decoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: NodeId,
    query_pos: NodeId,
    context: NodeId,
    context_pos: Option<NodeId>,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let sa_in = g.add(queries, query_pos)?;
    let (sa_out, _) = attention(g, store, &format!("{prefix}.sa"), sa_in, sa_in, queries)?;
    let sa_normed = ln_block(g, store, &format!("{prefix}.sa"), sa_out, eps)?;
    let after_sa = g.add(queries, sa_normed)?;

    let ca_q = g.add(after_sa, query_pos)?;
    let ca_k = match context_pos {
        Some(p) => g.add(context, p)?,
        None => context,
    };
    let (ca_out, _) = attention(g, store, &format!("{prefix}.ca"), ca_q, ca_k, context)?;
    let ca_normed = ln_block(g, store, &format!("{prefix}.ca"), ca_out, eps)?;
    let after_ca = g.add(after_sa, ca_normed)?;

    ffn_residual(g, store, &format!("{prefix}.ffn"), after_ca, eps)
}

fn ln_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let gamma = g.param(store, &format!("{prefix}.ln.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.ln.beta"))?;
    crate::tensor::layer_norm_g(g, x, gamma, beta, eps)
}

fn inject(
    g: &mut Graph,
    store: &ParamStore,
    aam_prefix: &str,
    queries: NodeId,
    features: NodeId,
    n_detect: usize,
    cfg: &InjectionConfig,
) -> Result<NodeId, TensorError> {
    let total = g.value(queries).rows();
    let n_track = total - n_detect;
    match (cfg.inject_detect, cfg.inject_track) {
        (true, true) => qsi_forward(g, store, aam_prefix, queries, features, cfg.softmax_scores),
        (false, false) => Ok(queries),
        (true, false) => {
            let det = g.slice_rows(queries, 0, n_detect)?;
            let injected = qsi_forward(g, store, aam_prefix, det, features, cfg.softmax_scores)?;
            if n_track == 0 {
                Ok(injected)
            } else {
                let tra = g.slice_rows(queries, n_detect, n_track)?;
                g.concat_rows(injected, tra)
            }
        }
        (false, true) => {
            if n_track == 0 {
                return Ok(queries);
            }
            let det = g.slice_rows(queries, 0, n_detect)?;
            let tra = g.slice_rows(queries, n_detect, n_track)?;
            let injected = qsi_forward(g, store, aam_prefix, tra, features, cfg.softmax_scores)?;
            g.concat_rows(det, injected)
        }
    }
}

/// Full two-phase decoder: inject the first semantic stream, run layers
/// `0..L/2`, inject the second stream, run layers `L/2..L`. Row count is
/// preserved: detect rows first, track rows after. The raw input queries
/// double as the per-layer anchor.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    queries: NodeId,
    n_detect: usize,
    context: NodeId,
    context_pos: Option<NodeId>,
    f_so: NodeId,
    f_sm: NodeId,
    layers: usize,
    cfg: &InjectionConfig,
    eps: f64,
) -> Result<NodeId, TensorError> {
    if layers < 2 || layers % 2 != 0 {
        return Err(TensorError::Invalid(format!(
            "decoder layer count must be even and >= 2, got {layers}"
        )));
    }
    let (first_feats, first_aam, second_feats, second_aam) = if cfg.motion_first {
        (f_sm, "qsi.sm.aam", f_so, "qsi.so.aam")
    } else {
        (f_so, "qsi.so.aam", f_sm, "qsi.sm.aam")
    };
    let query_pos = queries;
    let mut cur = inject(g, store, first_aam, queries, first_feats, n_detect, cfg)?;
    for i in 0..layers / 2 {
        cur = decoder_layer(
            g,
            store,
            &format!("dec.{i}"),
            cur,
            query_pos,
            context,
            context_pos,
            eps,
        )?;
    }
    cur = inject(g, store, second_aam, cur, second_feats, n_detect, cfg)?;
    for i in layers / 2..layers {
        cur = decoder_layer(
            g,
            store,
            &format!("dec.{i}"),
            cur,
            query_pos,
            context,
            context_pos,
            eps,
        )?;
    }
    Ok(cur)
}

// ── Prediction heads ─────────────────────────────────────────────────

pub fn register_heads(
    store: &mut ParamStore,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    store.insert_linear_init("heads.box.w1", d, d, rng)?;
    store.insert("heads.box.b1", Tensor2D::zeros(1, d))?;
    store.insert_linear_init("heads.box.w2", d, d, rng)?;
    store.insert("heads.box.b2", Tensor2D::zeros(1, d))?;
    store.insert_linear_init("heads.box.w3", d, 4, rng)?;
    store.insert("heads.box.b3", Tensor2D::zeros(1, 4))?;
    store.insert_linear_init("heads.cls.w", d, 1, rng)?;
    store.insert("heads.cls.b", Tensor2D::zeros(1, 1))?;
    store.insert_linear_init("heads.ref.w", d, 1, rng)?;
    store.insert("heads.ref.b", Tensor2D::zeros(1, 1))?;
    Ok(())
}

/// Box, class-score and referring-score nodes for a query matrix.
pub struct HeadNodes {
    /// N x 4 boxes in (0,1), center-size form.
    pub boxes: NodeId,
    /// N x 1 class scores in (0,1).
    pub class: NodeId,
    /// N x 1 referring scores in (0,1).
    pub referring: NodeId,
}

/// Boxes via a three-layer MLP with logistic squashing; class and referring
/// scores via linear + logistic.
pub fn predict_heads(
    g: &mut Graph,
    store: &ParamStore,
    queries: NodeId,
) -> Result<HeadNodes, TensorError> {
    let w1 = g.param(store, "heads.box.w1")?;
    let b1 = g.param(store, "heads.box.b1")?;
    let w2 = g.param(store, "heads.box.w2")?;
    let b2 = g.param(store, "heads.box.b2")?;
    let w3 = g.param(store, "heads.box.w3")?;
    let b3 = g.param(store, "heads.box.b3")?;
    let h1 = linear(g, queries, w1, b1)?;
    let h1 = silu(g, h1)?;
    let h2 = linear(g, h1, w2, b2)?;
    let h2 = silu(g, h2)?;
    let box_logits = linear(g, h2, w3, b3)?;
    let boxes = g.sigmoid(box_logits);

    let cls_w = g.param(store, "heads.cls.w")?;
    let cls_b = g.param(store, "heads.cls.b")?;
    let cls_logits = linear(g, queries, cls_w, cls_b)?;
    let class = g.sigmoid(cls_logits);

    let ref_w = g.param(store, "heads.ref.w")?;
    let ref_b = g.param(store, "heads.ref.b")?;
    let ref_logits = linear(g, queries, ref_w, ref_b)?;
    let referring = g.sigmoid(ref_logits);

    Ok(HeadNodes {
        boxes,
        class,
        referring,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bif::register_context;
    use crate::tensor::finite_diff_check;

    const EPS: f64 = 1e-5;

    fn rand_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor2D {
        let mut rng = SplitMix64::new(seed);
        Tensor2D::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect(),
        )
        .unwrap()
    }

    fn aam_store(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        register_aam(&mut store, "aam", d, &mut rng).unwrap();
        store
    }

    #[test]
    fn aam_zero_is_fixed_point() {
        let d = 6;
        let store = aam_store(d, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor2D::zeros(3, d));
        let y = aam_forward(&mut g, &store, "aam", x).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn aam_large_negative_bias_turns_gate_off() {
        let d = 4;
        let mut store = aam_store(d, 2);
        store
            .set_value("aam.psi1.b", Tensor2D::filled(1, d, -60.0))
            .unwrap();
        let x_val = rand_tensor(3, d, 3, 1.0);
        let mut g = Graph::new();
        let x = g.constant(x_val.clone());
        let y = aam_forward(&mut g, &store, "aam", x).unwrap();
        assert!(g.value(y).max_abs_diff(&x_val) < 1e-15);
    }

    #[test]
    fn aam_gradient_checks_out() {
        let d = 4;
        let mut store = aam_store(d, 4);
        let x_val = rand_tensor(3, d, 5, 0.8);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let x = g.constant(x_val.clone());
            let y = aam_forward(g, s, "aam", x)?;
            let sq = g.mul_elem(y, y)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }

    #[test]
    fn qsi_null_semantics_is_bit_exact_identity() {
        let d = 6;
        let store = aam_store(d, 6);
        let q_val = rand_tensor(5, d, 7, 1.0);
        let mut g = Graph::new();
        let q = g.constant(q_val.clone());
        let f = g.constant(Tensor2D::zeros(2, d));
        let out = qsi_forward(&mut g, &store, "aam", q, f, false).unwrap();
        for (a, b) in g.value(out).data().iter().zip(q_val.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn qsi_single_feature_row_is_rank_one_update() {
        let d = 4;
        let store = aam_store(d, 8);
        let q_val = rand_tensor(3, d, 9, 1.0);
        let f_val = rand_tensor(1, d, 10, 1.0);
        let mut g = Graph::new();
        let q = g.constant(q_val.clone());
        let f = g.constant(f_val);
        let out = qsi_forward(&mut g, &store, "aam", q, f, false).unwrap();
        // recompute the rank-1 form from the AAM outputs
        let mut g2 = Graph::new();
        let q2 = g2.constant(q_val.clone());
        let f2 = g2.constant(g.value(f).clone());
        let gq = aam_forward(&mut g2, &store, "aam", q2).unwrap();
        let u = aam_forward(&mut g2, &store, "aam", f2).unwrap();
        let u_val = g2.value(u).clone(); // 1 x d
        let gq_val = g2.value(gq).clone(); // N x d
        for i in 0..3 {
            let score: f64 = (0..d).map(|j| gq_val.get(i, j) * u_val.get(0, j)).sum::<f64>()
                / (d as f64).sqrt();
            for j in 0..d {
                let want = q_val.get(i, j) + score * u_val.get(0, j);
                assert!((g.value(out).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qsi_gradient_checks_out() {
        let d = 4;
        let mut store = aam_store(d, 11);
        store
            .insert("input.q", rand_tensor(3, d, 12, 0.8))
            .unwrap();
        store
            .insert("input.f", rand_tensor(2, d, 13, 0.8))
            .unwrap();
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let q = g.param(s, "input.q")?;
            let f = g.param(s, "input.f")?;
            let out = qsi_forward(g, s, "aam", q, f, false)?;
            let sq = g.mul_elem(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }

    fn decoder_store(d: usize, layers: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        register_decoder(&mut store, layers, d, &mut rng).unwrap();
        register_context(&mut store, 1, d, &mut rng).unwrap();
        store
    }

    #[test]
    fn decoder_rejects_odd_layer_count() {
        let d = 4;
        let store = decoder_store(d, 3, 14);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(3, d, 15, 1.0));
        let ctx = g.constant(rand_tensor(4, d, 16, 1.0));
        let f = g.constant(Tensor2D::zeros(1, d));
        let err = decoder_forward(
            &mut g,
            &store,
            q,
            3,
            ctx,
            None,
            f,
            f,
            3,
            &InjectionConfig::default(),
            EPS,
        )
        .unwrap_err();
        assert!(err.to_string().contains("even"));
    }

    #[test]
    fn decoder_minimal_schedule_and_row_preservation() {
        let d = 4;
        let store = decoder_store(d, 2, 17);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(5, d, 18, 1.0));
        let ctx = g.constant(rand_tensor(4, d, 19, 1.0));
        let f_so = g.constant(rand_tensor(2, d, 20, 1.0));
        let f_sm = g.constant(rand_tensor(1, d, 21, 1.0));
        let out = decoder_forward(
            &mut g,
            &store,
            q,
            5,
            ctx,
            None,
            f_so,
            f_sm,
            2,
            &InjectionConfig::default(),
            EPS,
        )
        .unwrap();
        assert_eq!(g.value(out).shape(), (5, d));
    }

    #[test]
    fn zero_injection_equals_plain_decoder() {
        let d = 4;
        let layers = 2;
        let store = decoder_store(d, layers, 22);
        let q_val = rand_tensor(4, d, 23, 1.0);
        let ctx_val = rand_tensor(4, d, 24, 1.0);

        let mut g = Graph::new();
        let q = g.constant(q_val.clone());
        let ctx = g.constant(ctx_val.clone());
        let zero = g.constant(Tensor2D::zeros(1, d));
        let injected = decoder_forward(
            &mut g,
            &store,
            q,
            4,
            ctx,
            None,
            zero,
            zero,
            layers,
            &InjectionConfig::default(),
            EPS,
        )
        .unwrap();

        let mut g2 = Graph::new();
        let q2 = g2.constant(q_val);
        let ctx2 = g2.constant(ctx_val);
        let mut cur = q2;
        for i in 0..layers {
            cur = decoder_layer(&mut g2, &store, &format!("dec.{i}"), cur, q2, ctx2, None, EPS)
                .unwrap();
        }
        assert_eq!(g.value(injected).max_abs_diff(g2.value(cur)), 0.0);
    }

    #[test]
    fn injection_order_changes_output() {
        let d = 4;
        let layers = 2;
        let store = decoder_store(d, layers, 25);
        let q_val = rand_tensor(4, d, 26, 1.0);
        let ctx_val = rand_tensor(4, d, 27, 1.0);
        let so_val = rand_tensor(2, d, 28, 1.0);
        let sm_val = rand_tensor(2, d, 29, 1.0);
        let run = |motion_first: bool| {
            let mut g = Graph::new();
            let q = g.constant(q_val.clone());
            let ctx = g.constant(ctx_val.clone());
            let so = g.constant(so_val.clone());
            let sm = g.constant(sm_val.clone());
            let cfg = InjectionConfig {
                motion_first,
                ..InjectionConfig::default()
            };
            let out =
                decoder_forward(&mut g, &store, q, 4, ctx, None, so, sm, layers, &cfg, EPS)
                    .unwrap();
            g.value(out).clone()
        };
        let a = run(false);
        let b = run(true);
        assert!(a.max_abs_diff(&b) > 1e-6, "injection order had no effect");
    }

    #[test]
    fn phase_one_is_isolated_from_motion_features() {
        // changing f_sm must not alter any activation computed in the first
        // phase; equivalently the first-phase output is identical
        let d = 4;
        let layers = 4;
        let store = decoder_store(d, layers, 30);
        let q_val = rand_tensor(3, d, 31, 1.0);
        let ctx_val = rand_tensor(4, d, 32, 1.0);
        let so_val = rand_tensor(1, d, 33, 1.0);
        let phase_one = |sm_val: Tensor2D| {
            let mut g = Graph::new();
            let q = g.constant(q_val.clone());
            let ctx = g.constant(ctx_val.clone());
            let so = g.constant(so_val.clone());
            let _sm = g.constant(sm_val);
            let cfg = InjectionConfig::default();
            let injected = inject(&mut g, &store, "qsi.so.aam", q, so, 3, &cfg).unwrap();
            let mut cur = injected;
            for i in 0..layers / 2 {
                cur = decoder_layer(&mut g, &store, &format!("dec.{i}"), cur, q, ctx, None, EPS)
                    .unwrap();
            }
            g.value(cur).clone()
        };
        let a = phase_one(rand_tensor(2, d, 34, 1.0));
        let b = phase_one(rand_tensor(2, d, 35, 5.0));
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn heads_at_zero_weights_emit_half_everything() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(36);
        register_heads(&mut store, d, &mut rng).unwrap();
        for name in ["heads.box.w1", "heads.box.w2"] {
            store.set_value(name, Tensor2D::zeros(d, d)).unwrap();
        }
        store.set_value("heads.box.w3", Tensor2D::zeros(d, 4)).unwrap();
        store.set_value("heads.cls.w", Tensor2D::zeros(d, 1)).unwrap();
        store.set_value("heads.ref.w", Tensor2D::zeros(d, 1)).unwrap();
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(3, d, 37, 1.0));
        let heads = predict_heads(&mut g, &store, q).unwrap();
        for &v in g.value(heads.boxes).data() {
            assert_eq!(v, 0.5);
        }
        for &v in g.value(heads.class).data() {
            assert_eq!(v, 0.5);
        }
        for &v in g.value(heads.referring).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn head_scores_stay_in_open_unit_interval() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(38);
        register_heads(&mut store, d, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(8, d, 39, 10.0));
        let heads = predict_heads(&mut g, &store, q).unwrap();
        for node in [heads.boxes, heads.class, heads.referring] {
            for &v in g.value(node).data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn heads_gradient_checks_out() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(40);
        register_heads(&mut store, d, &mut rng).unwrap();
        let q_val = rand_tensor(3, d, 41, 0.8);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let q = g.constant(q_val.clone());
            let heads = predict_heads(g, s, q)?;
            let b = g.sum_all(heads.boxes);
            let c = g.sum_all(heads.class);
            let r = g.sum_all(heads.referring);
            let bc = g.add(b, c)?;
            g.add(bc, r)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }
}
