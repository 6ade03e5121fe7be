//! Bidirectional interactive fusion: modality-specific self-attention,
//! cross-modal attention in both directions, and feed-forward refinement,
//! all with `x + LN(branch(x))` residuals. A stack of the same
//! self-attention blocks stands in for the deformable context encoder.

use crate::rng::SplitMix64;
use crate::tensor::{layer_norm_g, linear, silu, Graph, NodeId, ParamStore, Tensor2D, TensorError};

/// Hidden width of every feed-forward block, as a multiple of the model dim.
pub const FFN_HIDDEN_RATIO: usize = 4;

// ── Parameter registration ───────────────────────────────────────────

/// Register `wq/wk/wv` projections plus the LN affine of one attention
/// block under `prefix`.
pub fn register_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    store.insert_linear_init(&format!("{prefix}.wq"), d, d, rng)?;
    store.insert_linear_init(&format!("{prefix}.wk"), d, d, rng)?;
    store.insert_linear_init(&format!("{prefix}.wv"), d, d, rng)?;
    store.insert(&format!("{prefix}.ln.gamma"), Tensor2D::filled(1, d, 1.0))?;
    store.insert(&format!("{prefix}.ln.beta"), Tensor2D::zeros(1, d))?;
    Ok(())
}

/// Register a two-layer feed-forward block (width `FFN_HIDDEN_RATIO * d`)
/// plus its LN affine under `prefix`.
pub fn register_ffn(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    let hidden = FFN_HIDDEN_RATIO * d;
    store.insert_linear_init(&format!("{prefix}.w1"), d, hidden, rng)?;
    store.insert(&format!("{prefix}.b1"), Tensor2D::zeros(1, hidden))?;
    store.insert_linear_init(&format!("{prefix}.w2"), hidden, d, rng)?;
    store.insert(&format!("{prefix}.b2"), Tensor2D::zeros(1, d))?;
    store.insert(&format!("{prefix}.ln.gamma"), Tensor2D::filled(1, d, 1.0))?;
    store.insert(&format!("{prefix}.ln.beta"), Tensor2D::zeros(1, d))?;
    Ok(())
}

pub fn register_bif(
    store: &mut ParamStore,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    register_attention(store, "bif.vis.sa", d, rng)?;
    register_attention(store, "bif.text.sa", d, rng)?;
    register_attention(store, "bif.cross.vis", d, rng)?;
    register_attention(store, "bif.cross.text", d, rng)?;
    register_ffn(store, "bif.vis.ffn", d, rng)?;
    register_ffn(store, "bif.text.ffn", d, rng)?;
    Ok(())
}

pub fn register_context(
    store: &mut ParamStore,
    layers: usize,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<(), TensorError> {
    for i in 0..layers {
        register_attention(store, &format!("ctx.{i}.sa"), d, rng)?;
        register_ffn(store, &format!("ctx.{i}.ffn"), d, rng)?;
    }
    Ok(())
}

// ── Positional encodings ─────────────────────────────────────────────

/// Fixed sinusoidal encoding by token index.
pub fn text_positional(len: usize, d: usize) -> Tensor2D {
    let mut pe = Tensor2D::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// 2-D sinusoidal encoding by cell row/column: the first half of the
/// channels encodes the row, the second half the column.
pub fn grid_positional(h: usize, w: usize, d: usize) -> Tensor2D {
    let half = d / 2;
    let row_pe = text_positional(h, half);
    let col_pe = text_positional(w, d - half);
    let mut pe = Tensor2D::zeros(h * w, d);
    for i in 0..h {
        for j in 0..w {
            let r = i * w + j;
            for c in 0..half {
                pe.set(r, c, row_pe.get(i, c));
            }
            for c in 0..d - half {
                pe.set(r, half + c, col_pe.get(j, c));
            }
        }
    }
    pe
}

// ── Attention blocks ─────────────────────────────────────────────────

/// Scaled dot-product attention. Returns (output, attention weights) so
/// tests can assert row-stochasticity directly.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    query: NodeId,
    key: NodeId,
    value: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let d = g.value(query).cols();
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let q = g.matmul(query, wq)?;
    let k = g.matmul(key, wk)?;
    let v = g.matmul(value, wv)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.row_softmax(scaled);
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

fn ln_of(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let gamma = g.param(store, &format!("{prefix}.ln.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.ln.beta"))?;
    layer_norm_g(g, x, gamma, beta, eps)
}

/// `x + LN(SA(x + pos))`. `pos` is truncated to the row count of `x` and
/// may be `None` for position-free inputs (e.g. object queries).
pub fn self_attend(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    pos: Option<&Tensor2D>,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let rows = g.value(x).rows();
    let xp = match pos {
        Some(p) => {
            if p.rows() < rows {
                return Err(TensorError::BadShape {
                    op: "self_attend",
                    expected: "positional encoding with at least as many rows as x",
                    rows: p.rows(),
                    cols: p.cols(),
                });
            }
            let truncated = Tensor2D::from_vec(
                rows,
                p.cols(),
                p.data()[..rows * p.cols()].to_vec(),
            )?;
            let pc = g.constant(truncated);
            g.add(x, pc)?
        }
        None => x,
    };
    let (sa, _) = attention(g, store, prefix, xp, xp, xp)?;
    let normed = ln_of(g, store, prefix, sa, eps)?;
    g.add(x, normed)
}

/// `q + LN(CA(q, kv, kv))`.
pub fn cross_attend(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    query: NodeId,
    kv: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    if g.value(query).cols() != g.value(kv).cols() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attend",
            lhs_rows: g.value(query).rows(),
            lhs_cols: g.value(query).cols(),
            rhs_rows: g.value(kv).rows(),
            rhs_cols: g.value(kv).cols(),
        });
    }
    let (ca, _) = attention(g, store, prefix, query, kv, kv)?;
    let normed = ln_of(g, store, prefix, ca, eps)?;
    g.add(query, normed)
}

/// `x + LN(MLP(x))` with a silu-gated two-layer MLP.
pub fn ffn_residual(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = linear(g, x, w1, b1)?;
    let gated = silu(g, h)?;
    let out = linear(g, gated, w2, b2)?;
    let normed = ln_of(g, store, prefix, out, eps)?;
    g.add(x, normed)
}

/// Fused features of one frame: the self-attended visual features feed the
/// training-only consistency path, the fused pair feeds everything else.
pub struct BifOutput {
    /// Self-attended visual features (pre cross-attention).
    pub tilde_visual: NodeId,
    /// Fused visual features.
    pub visual: NodeId,
    /// Fused text features.
    pub text: NodeId,
}

/// Self-attention per modality, cross-attention in both directions,
/// feed-forward refinement per modality.
pub fn bif_forward(
    g: &mut Graph,
    store: &ParamStore,
    vis: NodeId,
    text: NodeId,
    pos_v: &Tensor2D,
    pos_l: &Tensor2D,
    eps: f64,
) -> Result<BifOutput, TensorError> {
    let tilde_v = self_attend(g, store, "bif.vis.sa", vis, Some(pos_v), eps)?;
    let tilde_s = self_attend(g, store, "bif.text.sa", text, Some(pos_l), eps)?;
    let v_cross = cross_attend(g, store, "bif.cross.vis", tilde_v, tilde_s, eps)?;
    let s_cross = cross_attend(g, store, "bif.cross.text", tilde_s, tilde_v, eps)?;
    let v_hat = ffn_residual(g, store, "bif.vis.ffn", v_cross, eps)?;
    let s_hat = ffn_residual(g, store, "bif.text.ffn", s_cross, eps)?;
    Ok(BifOutput {
        tilde_visual: tilde_v,
        visual: v_hat,
        text: s_hat,
    })
}

/// One context layer: self-attention then feed-forward, both residual.
pub fn context_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    pos_v: &Tensor2D,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let y = self_attend(g, store, &format!("{prefix}.sa"), x, Some(pos_v), eps)?;
    ffn_residual(g, store, &format!("{prefix}.ffn"), y, eps)
}

/// Stack of `layers` context layers over the fused visual features.
pub fn context_encode(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    pos_v: &Tensor2D,
    layers: usize,
    eps: f64,
) -> Result<NodeId, TensorError> {
    if layers == 0 {
        return Err(TensorError::Invalid(
            "context encoder needs at least one layer".into(),
        ));
    }
    let mut cur = x;
    for i in 0..layers {
        cur = context_layer(g, store, &format!("ctx.{i}"), cur, pos_v, eps)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn zero_value_projection(store: &mut ParamStore, prefix: &str, d: usize) {
        store
            .set_value(&format!("{prefix}.wv"), Tensor2D::zeros(d, d))
            .unwrap();
    }

    fn zero_ffn(store: &mut ParamStore, prefix: &str, d: usize) {
        store
            .set_value(&format!("{prefix}.w2"), Tensor2D::zeros(FFN_HIDDEN_RATIO * d, d))
            .unwrap();
    }

    #[test]
    fn self_attend_residual_identity_with_zero_values() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        register_attention(&mut store, "sa", d, &mut rng).unwrap();
        zero_value_projection(&mut store, "sa", d);
        let x_val = rand_tensor(4, d, 2, 1.0);
        let pos = text_positional(8, d);
        let mut g = Graph::new();
        let x = g.constant(x_val.clone());
        let y = self_attend(&mut g, &store, "sa", x, Some(&pos), EPS).unwrap();
        assert_eq!(g.value(y).max_abs_diff(&x_val), 0.0);
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        register_attention(&mut store, "sa", d, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(1, d, 4, 1.0));
        let (_, attn) = attention(&mut g, &store, "sa", x, x, x).unwrap();
        assert_eq!(g.value(attn).shape(), (1, 1));
        assert_eq!(g.value(attn).get(0, 0), 1.0);
    }

    #[test]
    fn self_attend_gradient_checks_out() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(5);
        register_attention(&mut store, "sa", d, &mut rng).unwrap();
        let x_val = rand_tensor(3, d, 6, 0.8);
        let pos = text_positional(3, d);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let x = g.constant(x_val.clone());
            let y = self_attend(g, s, "sa", x, Some(&pos), EPS)?;
            let sq = g.mul_elem(y, y)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }

    #[test]
    fn cross_attend_residual_identity_with_zero_values() {
        let d = 5;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(7);
        register_attention(&mut store, "ca", d, &mut rng).unwrap();
        zero_value_projection(&mut store, "ca", d);
        let q_val = rand_tensor(3, d, 8, 1.0);
        let mut g = Graph::new();
        let q = g.constant(q_val.clone());
        let kv = g.constant(rand_tensor(6, d, 9, 1.0));
        let y = cross_attend(&mut g, &store, "ca", q, kv, EPS).unwrap();
        assert_eq!(g.value(y).max_abs_diff(&q_val), 0.0);
    }

    #[test]
    fn single_key_attention_collapses_to_value_row() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(11);
        register_attention(&mut store, "ca", d, &mut rng).unwrap();
        let kv_val = rand_tensor(1, d, 12, 1.0);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(3, d, 13, 1.0));
        let kv = g.constant(kv_val.clone());
        let (out, attn) = attention(&mut g, &store, "ca", q, kv, kv).unwrap();
        let rv = kv_val.matmul(store.value("ca.wv").unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(attn).get(i, 0), 1.0);
            for j in 0..d {
                assert!((g.value(out).get(i, j) - rv.get(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(15);
        register_attention(&mut store, "a", d, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(5, d, 16, 2.0));
        let kv = g.constant(rand_tensor(7, d, 17, 2.0));
        let (_, attn) = attention(&mut g, &store, "a", q, kv, kv).unwrap();
        for i in 0..5 {
            let sum: f64 = g.value(attn).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    fn bif_store(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        register_bif(&mut store, d, &mut rng).unwrap();
        store
    }

    #[test]
    fn bif_zero_interaction_reduces_to_self_attention() {
        let d = 6;
        let mut store = bif_store(d, 21);
        zero_value_projection(&mut store, "bif.cross.vis", d);
        zero_value_projection(&mut store, "bif.cross.text", d);
        zero_ffn(&mut store, "bif.vis.ffn", d);
        zero_ffn(&mut store, "bif.text.ffn", d);
        let pos_v = grid_positional(2, 3, d);
        let pos_l = text_positional(4, d);
        let vis_val = rand_tensor(6, d, 22, 1.0);
        let text_val = rand_tensor(4, d, 23, 1.0);

        let mut g = Graph::new();
        let vis = g.constant(vis_val);
        let text = g.constant(text_val);
        let out = bif_forward(&mut g, &store, vis, text, &pos_v, &pos_l, EPS).unwrap();
        // with zeroed cross-value and FFN paths, fusion cannot leak across
        // modalities: outputs equal the self-attended features exactly
        let want_v = g.value(out.tilde_visual).clone();
        assert_eq!(g.value(out.visual).max_abs_diff(&want_v), 0.0);
        let mut g2 = Graph::new();
        let text2 = g2.constant(g.value(text).clone());
        let want_s = self_attend(&mut g2, &store, "bif.text.sa", text2, Some(&pos_l), EPS).unwrap();
        assert_eq!(
            g.value(out.text).max_abs_diff(g2.value(want_s)),
            0.0
        );
    }

    #[test]
    fn bif_preserves_shapes() {
        let d = 8;
        let store = bif_store(d, 31);
        let pos_v = grid_positional(3, 3, d);
        let pos_l = text_positional(5, d);
        let mut g = Graph::new();
        let vis = g.constant(rand_tensor(9, d, 32, 1.0));
        let text = g.constant(rand_tensor(5, d, 33, 1.0));
        let out = bif_forward(&mut g, &store, vis, text, &pos_v, &pos_l, EPS).unwrap();
        assert_eq!(g.value(out.visual).shape(), (9, d));
        assert_eq!(g.value(out.text).shape(), (5, d));
    }

    #[test]
    fn bif_full_gradient_checks_out() {
        let d = 4;
        let mut store = bif_store(d, 41);
        let pos_v = grid_positional(2, 2, d);
        let pos_l = text_positional(3, d);
        let vis_val = rand_tensor(4, d, 42, 0.7);
        let text_val = rand_tensor(3, d, 43, 0.7);
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let vis = g.constant(vis_val.clone());
            let text = g.constant(text_val.clone());
            let out = bif_forward(g, s, vis, text, &pos_v, &pos_l, EPS)?;
            let sv = g.mul_elem(out.visual, out.visual)?;
            let st = g.mul_elem(out.text, out.text)?;
            let a = g.sum_all(sv);
            let b = g.sum_all(st);
            g.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err = {}", report.max_rel_err);
    }

    #[test]
    fn text_permutation_permutes_text_and_fixes_visual() {
        let d = 6;
        let store = bif_store(d, 51);
        let pos_v = grid_positional(2, 2, d);
        let zero_pos_l = Tensor2D::zeros(8, d);
        let text_val = rand_tensor(4, d, 52, 1.0);
        let vis_val = rand_tensor(4, d, 53, 1.0);
        // permutation (reverse rows)
        let perm: Vec<usize> = (0..4).rev().collect();
        let permuted = {
            let mut rows = Vec::new();
            for &i in &perm {
                rows.push(text_val.row(i).to_vec());
            }
            Tensor2D::from_rows(&rows).unwrap()
        };
        let run = |text: Tensor2D| {
            let mut g = Graph::new();
            let vis = g.constant(vis_val.clone());
            let t = g.constant(text);
            let out = bif_forward(&mut g, &store, vis, t, &pos_v, &zero_pos_l, EPS).unwrap();
            (
                g.value(out.visual).clone(),
                g.value(out.text).clone(),
            )
        };
        let (v0, s0) = run(text_val);
        let (v1, s1) = run(permuted);
        assert!(v0.max_abs_diff(&v1) < 1e-12, "visual changed under permutation");
        for (out_row, &src) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((s1.get(out_row, j) - s0.get(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_identity_with_zeroed_projections() {
        let d = 5;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(61);
        register_context(&mut store, 1, d, &mut rng).unwrap();
        zero_value_projection(&mut store, "ctx.0.sa", d);
        zero_ffn(&mut store, "ctx.0.ffn", d);
        let pos_v = grid_positional(2, 2, d);
        let x_val = rand_tensor(4, d, 62, 1.0);
        let mut g = Graph::new();
        let x = g.constant(x_val.clone());
        let y = context_encode(&mut g, &store, x, &pos_v, 1, EPS).unwrap();
        assert_eq!(g.value(y).max_abs_diff(&x_val), 0.0);
    }

    #[test]
    fn context_preserves_shape_for_any_depth() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(63);
        register_context(&mut store, 3, d, &mut rng).unwrap();
        let pos_v = grid_positional(2, 3, d);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(6, d, 64, 1.0));
        for layers in 1..=3 {
            let y = context_encode(&mut g, &store, x, &pos_v, layers, EPS).unwrap();
            assert_eq!(g.value(y).shape(), (6, d));
        }
    }

    #[test]
    fn two_layers_compose_from_single_layers() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(65);
        register_context(&mut store, 2, d, &mut rng).unwrap();
        let pos_v = grid_positional(2, 2, d);
        let x_val = rand_tensor(4, d, 66, 1.0);

        let mut g = Graph::new();
        let x = g.constant(x_val.clone());
        let stacked = context_encode(&mut g, &store, x, &pos_v, 2, EPS).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.constant(x_val);
        let first = context_layer(&mut g2, &store, "ctx.0", x2, &pos_v, EPS).unwrap();
        let second = context_layer(&mut g2, &store, "ctx.1", first, &pos_v, EPS).unwrap();

        assert_eq!(g.value(stacked).max_abs_diff(g2.value(second)), 0.0);
    }
}
