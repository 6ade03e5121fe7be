//! Deterministic stand-ins for the pretrained text and visual encoders.
//!
//! Tokens embed through a seeded hash of their spelling; scenes rasterize
//! into an attribute grid (category/color one-hots plus velocity channels)
//! with a low-amplitude seeded noise floor. Both are pure functions of
//! their inputs and the seed.

use crate::rng::{combine, hash_str, SplitMix64};
use crate::scene::{category_index, color_index, validate_box, SceneFrame, SceneError};
use crate::tensor::{layer_norm, linear, Graph, NodeId, ParamStore, Tensor2D, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("embedding dim must be >= 4, got {0}")]
    DimTooSmall(usize),
    #[error("channel count {got} too small for attribute layout (need >= {need})")]
    ChannelsTooSmall { got: usize, need: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Reserved spelling an empty stream is padded with.
pub const PAD_TOKEN: &str = "<pad>";

/// Amplitude of the seeded background noise in the visual grid.
pub const NOISE_AMPLITUDE: f64 = 0.01;

/// Token matrix (L x D) plus its average-pooled sentence row (1 x D).
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: Tensor2D,
    pub pooled: Tensor2D,
}

/// Attribute grid (HW x C) with its spatial extent.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub grid: Tensor2D,
    pub height: usize,
    pub width: usize,
}

/// Embed tokens into an L x D matrix. Each token hashes into one of
/// `vocab_hash` buckets; the bucket and seed key a deterministic stream of
/// uniform entries, so identical spellings always embed identically. An
/// empty token list embeds as a single PAD row.
pub fn embed_text(
    tokens: &[&str],
    dim: usize,
    seed: u64,
    vocab_hash: usize,
) -> Result<TextEmbedding, EncodeError> {
    if dim < 4 {
        return Err(EncodeError::DimTooSmall(dim));
    }
    let padded: Vec<&str> = if tokens.is_empty() {
        vec![PAD_TOKEN]
    } else {
        tokens.to_vec()
    };
    let l = padded.len();
    let mut data = Vec::with_capacity(l * dim);
    for tok in &padded {
        let bucket = (hash_str(tok) % vocab_hash.max(1) as u64) as u64;
        let mut stream = SplitMix64::new(combine(seed, bucket));
        for _ in 0..dim {
            data.push(stream.uniform(-1.0, 1.0));
        }
    }
    let tokens_mat = Tensor2D::from_vec(l, dim, data)?;
    let mut pooled = Tensor2D::zeros(1, dim);
    for i in 0..l {
        for j in 0..dim {
            pooled.data_mut()[j] += tokens_mat.get(i, j);
        }
    }
    for v in pooled.data_mut() {
        *v /= l as f64;
    }
    Ok(TextEmbedding {
        tokens: tokens_mat,
        pooled,
    })
}

/// Channels needed by the attribute layout before free channels start:
/// 2 category one-hots, 6 color one-hots, 2 velocity channels.
pub const ATTRIBUTE_CHANNELS: usize = 2 + crate::scene::COLORS.len() + 2;

/// Deterministic attribute encoding of one object: category one-hot block,
/// color one-hot block, then the two velocity components; remaining
/// channels zero.
pub fn object_encoding(obj: &crate::scene::SceneObject, channels: usize) -> Vec<f64> {
    let mut enc = vec![0.0; channels];
    enc[category_index(obj.cat)] = 1.0;
    if let Some(ci) = color_index(&obj.color) {
        enc[2 + ci] = 1.0;
    }
    let vel_base = 2 + crate::scene::COLORS.len();
    enc[vel_base] = obj.speed[0];
    enc[vel_base + 1] = obj.speed[1];
    enc
}

/// Rasterize a frame into an HW x C grid. A cell holds the sum of the
/// attribute encodings of every object whose box contains the cell center,
/// plus a seeded noise floor of amplitude 0.01.
pub fn embed_scene(
    frame: &SceneFrame,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<VisualFeatures, EncodeError> {
    if channels < ATTRIBUTE_CHANNELS {
        return Err(EncodeError::ChannelsTooSmall {
            got: channels,
            need: ATTRIBUTE_CHANNELS,
        });
    }
    for obj in &frame.objects {
        validate_box(&obj.bbox)?;
    }
    let mut grid = Tensor2D::zeros(height * width, channels);
    let mut noise = SplitMix64::new(combine(seed, 0x6e01_5e));
    for v in grid.data_mut() {
        *v = noise.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
    }
    for obj in &frame.objects {
        let enc = object_encoding(obj, channels);
        let [cx, cy, w, h] = obj.bbox;
        for i in 0..height {
            let y = (i as f64 + 0.5) / height as f64;
            if (y - cy).abs() > h / 2.0 {
                continue;
            }
            for j in 0..width {
                let x = (j as f64 + 0.5) / width as f64;
                if (x - cx).abs() > w / 2.0 {
                    continue;
                }
                let row = i * width + j;
                for c in 0..channels {
                    let cur = grid.get(row, c);
                    grid.set(row, c, cur + enc[c]);
                }
            }
        }
    }
    Ok(VisualFeatures {
        grid,
        height,
        width,
    })
}

/// Parameter names used by [`fuse_decoupled_features`].
pub struct FuseParams;

impl FuseParams {
    pub const IN_W: &'static str = "fuse.in.w";
    pub const IN_B: &'static str = "fuse.in.b";
    pub const LN_GAMMA: &'static str = "fuse.ln.gamma";
    pub const LN_BETA: &'static str = "fuse.ln.beta";
    pub const OUT_W: &'static str = "fuse.out.w";
    pub const OUT_B: &'static str = "fuse.out.b";

    /// Register the fuse parameters for text dim `text_dim` and model dim
    /// `d` under `prefix`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        text_dim: usize,
        d: usize,
        rng: &mut SplitMix64,
    ) -> Result<(), TensorError> {
        store.insert_linear_init(&format!("{prefix}.in.w"), text_dim, d, rng)?;
        store.insert(&format!("{prefix}.in.b"), Tensor2D::zeros(1, d))?;
        store.insert(&format!("{prefix}.ln.gamma"), Tensor2D::filled(1, 2 * d, 1.0))?;
        store.insert(&format!("{prefix}.ln.beta"), Tensor2D::zeros(1, 2 * d))?;
        store.insert_linear_init(&format!("{prefix}.out.w"), 2 * d, d, rng)?;
        store.insert(&format!("{prefix}.out.b"), Tensor2D::zeros(1, d))?;
        Ok(())
    }
}

/// Blend a decoupled stream embedding with the fused sentence feature:
/// project the stream to model width, add the mean-pooled sentence context,
/// concatenate with the plain projection along channels, layer-normalize,
/// and project 2d -> d. `f` enters as a graph node of shape K x D.
pub fn fuse_decoupled_features(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f: NodeId,
    s_hat: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let k = g.value(f).rows();
    let in_w = g.param(store, &format!("{prefix}.in.w"))?;
    let in_b = g.param(store, &format!("{prefix}.in.b"))?;
    let proj = linear(g, f, in_w, in_b)?;
    let pooled = g.col_mean(s_hat);
    let pooled_b = g.broadcast_row(pooled, k)?;
    let left = g.add(proj, pooled_b)?;
    let cat = g.concat_cols(left, proj)?;
    let gamma = g.param(store, &format!("{prefix}.ln.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.ln.beta"))?;
    let normed = crate::tensor::layer_norm_g(g, cat, gamma, beta, eps)?;
    let out_w = g.param(store, &format!("{prefix}.out.w"))?;
    let out_b = g.param(store, &format!("{prefix}.out.b"))?;
    linear(g, normed, out_w, out_b)
}

/// Plain-value helper mirroring [`fuse_decoupled_features`] for tests.
pub fn fuse_reference(
    store: &ParamStore,
    prefix: &str,
    f: &Tensor2D,
    s_hat: &Tensor2D,
    eps: f64,
) -> Result<Tensor2D, TensorError> {
    let proj = f
        .matmul(store.value(&format!("{prefix}.in.w"))?)?
        .add(&broadcast_rows(
            store.value(&format!("{prefix}.in.b"))?,
            f.rows(),
        ))?;
    let mut pooled = Tensor2D::zeros(1, s_hat.cols());
    for i in 0..s_hat.rows() {
        for j in 0..s_hat.cols() {
            pooled.data_mut()[j] += s_hat.get(i, j) / s_hat.rows() as f64;
        }
    }
    let left = proj.add(&broadcast_rows(&pooled, f.rows()))?;
    let mut cat = Tensor2D::zeros(f.rows(), 2 * proj.cols());
    for i in 0..f.rows() {
        for j in 0..proj.cols() {
            cat.set(i, j, left.get(i, j));
            cat.set(i, proj.cols() + j, proj.get(i, j));
        }
    }
    let normed = layer_norm(
        &cat,
        store.value(&format!("{prefix}.ln.gamma"))?,
        store.value(&format!("{prefix}.ln.beta"))?,
        eps,
    )?;
    let out = normed
        .matmul(store.value(&format!("{prefix}.out.w"))?)?
        .add(&broadcast_rows(
            store.value(&format!("{prefix}.out.b"))?,
            f.rows(),
        ))?;
    Ok(out)
}

fn broadcast_rows(row: &Tensor2D, rows: usize) -> Tensor2D {
    let mut out = Tensor2D::zeros(rows, row.cols());
    for i in 0..rows {
        for j in 0..row.cols() {
            out.set(i, j, row.get(0, j));
        }
    }
    out
}
