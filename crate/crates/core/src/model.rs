//! The assembled per-frame network: input projections, fusion, context
//! encoding, decoupled-feature fusion, the two-phase decoder and heads,
//! plus the training-only consistency branch.

use crate::bif::{
    bif_forward, context_encode, grid_positional, register_bif, register_context,
    text_positional,
};
use crate::config::ModelDims;
use crate::decouple::{decouple, DecoupleError, Lexicon};
use crate::encode::{embed_text, fuse_decoupled_features, EncodeError, FuseParams, TextEmbedding, VisualFeatures};
use crate::psdql::{
    decoder_forward, predict_heads, register_decoder, register_heads, HeadNodes,
    InjectionConfig, TrackQuery,
};
use crate::rng::{combine, SplitMix64};
use crate::scc::{proxy_features, reconstruct_text, register_scc};
use crate::tensor::{linear, Graph, NodeId, ParamStore, Tensor2D, TensorError};

pub const LN_EPS: f64 = crate::tensor::LAYER_NORM_EPS;

/// Token embeddings of one expression and its decoupled streams. These are
/// pure functions of the expression and seed, so they are computed once per
/// expression and shared across frames.
#[derive(Debug, Clone)]
pub struct ExprEncoding {
    pub expression: String,
    pub full: TextEmbedding,
    pub so: TextEmbedding,
    pub sm: TextEmbedding,
}

pub fn encode_expression(
    expression: &str,
    lexicon: &Lexicon,
    dims: &ModelDims,
    seed: u64,
) -> Result<ExprEncoding, ExprError> {
    let d = decouple(expression, lexicon)?;
    let full_tokens: Vec<&str> = d.original.iter().map(String::as_str).collect();
    let so_tokens = d.static_stream();
    let sm_tokens = d.motion_stream();
    let text_seed = combine(seed, 0x7e27);
    Ok(ExprEncoding {
        expression: expression.to_string(),
        full: embed_text(&full_tokens, dims.text_dim, text_seed, dims.vocab_hash)?,
        so: embed_text(&so_tokens, dims.text_dim, text_seed, dims.vocab_hash)?,
        sm: embed_text(&sm_tokens, dims.text_dim, text_seed, dims.vocab_hash)?,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum ExprError {
    #[error(transparent)]
    Decouple(#[from] DecoupleError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Parameters plus the fixed positional encodings.
pub struct CdrmtModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub pos_v: Tensor2D,
    pub pos_l: Tensor2D,
}

/// Longest token sequence the text positional table covers.
pub const MAX_TOKENS: usize = 64;

impl CdrmtModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, TensorError> {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(combine(seed, 0x0de1));
        let d = dims.d;
        store.insert_linear_init("encode.vis_in.w", dims.channels, d, &mut rng)?;
        store.insert("encode.vis_in.b", Tensor2D::zeros(1, d))?;
        store.insert_linear_init("encode.text_in.w", dims.text_dim, d, &mut rng)?;
        store.insert("encode.text_in.b", Tensor2D::zeros(1, d))?;
        FuseParams::register(&mut store, "fuse", dims.text_dim, d, &mut rng)?;
        register_bif(&mut store, d, &mut rng)?;
        register_context(&mut store, dims.bif_layers, d, &mut rng)?;
        let bound = 1.0 / (d as f64).sqrt();
        let detect_init: Vec<f64> = (0..dims.n_queries * d)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        store.insert(
            "queries.detect",
            Tensor2D::from_vec(dims.n_queries, d, detect_init)?,
        )?;
        register_decoder(&mut store, dims.decoder_layers, d, &mut rng)?;
        register_heads(&mut store, d, &mut rng)?;
        register_scc(&mut store, d, &mut rng)?;
        Ok(CdrmtModel {
            pos_v: grid_positional(dims.grid_h, dims.grid_w, d),
            pos_l: text_positional(MAX_TOKENS, d),
            dims,
            store,
        })
    }

    fn project_text(
        &self,
        g: &mut Graph,
        tokens: &Tensor2D,
    ) -> Result<NodeId, TensorError> {
        let x = g.constant(tokens.clone());
        let w = g.param(&self.store, "encode.text_in.w")?;
        let b = g.param(&self.store, "encode.text_in.b")?;
        linear(g, x, w, b)
    }

    /// Build the full per-frame graph up to the prediction heads.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        visual: &VisualFeatures,
        expr: &ExprEncoding,
        tracks: &[TrackQuery],
        injection: &InjectionConfig,
    ) -> Result<FrameForward, TensorError> {
        let d = self.dims.d;
        let grid = g.constant(visual.grid.clone());
        let vw = g.param(&self.store, "encode.vis_in.w")?;
        let vb = g.param(&self.store, "encode.vis_in.b")?;
        let vis = linear(g, grid, vw, vb)?;
        let text_proj = self.project_text(g, &expr.full.tokens)?;

        let bif = bif_forward(g, &self.store, vis, text_proj, &self.pos_v, &self.pos_l, LN_EPS)?;
        let context = context_encode(
            g,
            &self.store,
            bif.visual,
            &self.pos_v,
            self.dims.bif_layers,
            LN_EPS,
        )?;

        let so_raw = g.constant(expr.so.tokens.clone());
        let sm_raw = g.constant(expr.sm.tokens.clone());
        let f_so = fuse_decoupled_features(g, &self.store, "fuse", so_raw, bif.text, LN_EPS)?;
        let f_sm = fuse_decoupled_features(g, &self.store, "fuse", sm_raw, bif.text, LN_EPS)?;
        let s_so_proj = self.project_text(g, &expr.so.tokens)?;
        let s_sm_proj = self.project_text(g, &expr.sm.tokens)?;

        let detect = g.param(&self.store, "queries.detect")?;
        let queries = if tracks.is_empty() {
            detect
        } else {
            let mut data = Vec::with_capacity(tracks.len() * d);
            for t in tracks {
                if t.features.len() != d {
                    return Err(TensorError::Invalid(format!(
                        "track feature width {} does not match model dim {d}",
                        t.features.len()
                    )));
                }
                data.extend_from_slice(&t.features);
            }
            let track_mat = g.constant(Tensor2D::from_vec(tracks.len(), d, data)?);
            g.concat_rows(detect, track_mat)?
        };
        let ctx_pos = g.constant(self.pos_v.clone());
        let decoder_out = decoder_forward(
            g,
            &self.store,
            queries,
            self.dims.n_queries,
            context,
            Some(ctx_pos),
            f_so,
            f_sm,
            self.dims.decoder_layers,
            injection,
            LN_EPS,
        )?;
        let heads = predict_heads(g, &self.store, decoder_out)?;
        Ok(FrameForward {
            tilde_visual: bif.tilde_visual,
            s_hat: bif.text,
            text_proj,
            context,
            f_so,
            f_sm,
            s_so_proj,
            s_sm_proj,
            decoder_out,
            heads,
            n_detect: self.dims.n_queries,
            n_track: tracks.len(),
        })
    }

    /// Training-only consistency branch: original pooled embeddings and
    /// their reconstructions from the visual proxies.
    pub fn forward_scc(
        &self,
        g: &mut Graph,
        fw: &FrameForward,
    ) -> Result<SccForward, TensorError> {
        let e_so = g.col_mean(fw.s_so_proj);
        let e_sm = g.col_mean(fw.s_sm_proj);
        let e_g = g.col_mean(fw.text_proj);
        let (proxy_so, proxy_sm) = proxy_features(
            g,
            &self.store,
            fw.tilde_visual,
            fw.s_so_proj,
            fw.s_sm_proj,
            LN_EPS,
        )?;
        let r_so = reconstruct_text(g, &self.store, proxy_so, "scc.q_so", LN_EPS)?;
        let r_sm = reconstruct_text(g, &self.store, proxy_sm, "scc.q_sm", LN_EPS)?;
        let r_g = reconstruct_text(g, &self.store, fw.context, "scc.q_g", LN_EPS)?;
        Ok(SccForward {
            orig: vec![e_so, e_sm, e_g],
            recon: vec![r_so, r_sm, r_g],
        })
    }
}

/// Node handles of one frame's forward pass.
pub struct FrameForward {
    pub tilde_visual: NodeId,
    pub s_hat: NodeId,
    pub text_proj: NodeId,
    pub context: NodeId,
    pub f_so: NodeId,
    pub f_sm: NodeId,
    pub s_so_proj: NodeId,
    pub s_sm_proj: NodeId,
    pub decoder_out: NodeId,
    pub heads: HeadNodes,
    pub n_detect: usize,
    pub n_track: usize,
}

/// Embedding nodes of the consistency branch, in (so, sm, g) label order.
pub struct SccForward {
    pub orig: Vec<NodeId>,
    pub recon: Vec<NodeId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::encode::embed_scene;
    use crate::scene::{gen_scenes, GeneratorConfig};

    fn small_dims() -> ModelDims {
        ModelDims {
            d: 8,
            text_dim: 8,
            channels: 12,
            grid_h: 3,
            grid_w: 3,
            n_queries: 4,
            decoder_layers: 2,
            bif_layers: 1,
            vocab_hash: 64,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let dims = small_dims();
        let model = CdrmtModel::new(dims, 7).unwrap();
        let lexicon = Lexicon::default_lexicon();
        let expr = encode_expression("black cars in the right", &lexicon, &dims, 7).unwrap();
        let frames = gen_scenes(
            &GeneratorConfig {
                frames: 2,
                objects: 3,
                ..GeneratorConfig::default()
            },
            3,
        )
        .unwrap();
        let visual = embed_scene(&frames[0], dims.grid_h, dims.grid_w, dims.channels, 7).unwrap();
        let run = || {
            let mut g = Graph::new();
            let fw = model
                .forward_frame(&mut g, &visual, &expr, &[], &InjectionConfig::default())
                .unwrap();
            (
                g.value(fw.decoder_out).clone(),
                g.value(fw.heads.boxes).clone(),
                g.value(fw.context).clone(),
            )
        };
        let (dec_a, boxes_a, ctx_a) = run();
        let (dec_b, boxes_b, _) = run();
        assert_eq!(dec_a.shape(), (4, 8));
        assert_eq!(boxes_a.shape(), (4, 4));
        assert_eq!(ctx_a.shape(), (9, 8));
        assert_eq!(dec_a, dec_b);
        assert_eq!(boxes_a, boxes_b);
    }

    #[test]
    fn track_rows_extend_query_set() {
        let dims = small_dims();
        let model = CdrmtModel::new(dims, 9).unwrap();
        let lexicon = Lexicon::default_lexicon();
        let expr = encode_expression("cars", &lexicon, &dims, 9).unwrap();
        let frames = gen_scenes(
            &GeneratorConfig {
                frames: 1,
                objects: 2,
                ..GeneratorConfig::default()
            },
            4,
        )
        .unwrap();
        let visual = embed_scene(&frames[0], dims.grid_h, dims.grid_w, dims.channels, 9).unwrap();
        let tracks = vec![TrackQuery {
            identity: 5,
            features: vec![0.1; 8],
            misses: 0,
        }];
        let mut g = Graph::new();
        let fw = model
            .forward_frame(&mut g, &visual, &expr, &tracks, &InjectionConfig::default())
            .unwrap();
        assert_eq!(g.value(fw.decoder_out).shape(), (5, 8));
        assert_eq!(g.value(fw.heads.class).shape(), (5, 1));
    }

    #[test]
    fn scc_branch_produces_aligned_triples() {
        let dims = small_dims();
        let model = CdrmtModel::new(dims, 11).unwrap();
        let lexicon = Lexicon::default_lexicon();
        let expr = encode_expression("moving vehicles", &lexicon, &dims, 11).unwrap();
        let frames = gen_scenes(
            &GeneratorConfig {
                frames: 1,
                objects: 2,
                ..GeneratorConfig::default()
            },
            5,
        )
        .unwrap();
        let visual = embed_scene(&frames[0], dims.grid_h, dims.grid_w, dims.channels, 11).unwrap();
        let mut g = Graph::new();
        let fw = model
            .forward_frame(&mut g, &visual, &expr, &[], &InjectionConfig::default())
            .unwrap();
        let scc = model.forward_scc(&mut g, &fw).unwrap();
        assert_eq!(scc.orig.len(), 3);
        assert_eq!(scc.recon.len(), 3);
        for &n in scc.orig.iter().chain(&scc.recon) {
            assert_eq!(g.value(n).shape(), (1, 8));
        }
    }
}
