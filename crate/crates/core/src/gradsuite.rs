//! Named finite-difference suites covering every differentiable operation
//! in the pipeline. The CLI `gradcheck` command and the acceptance tests
//! run the same registry.
//!
//! Suites run at compact dims so a full sweep of central differences over
//! every parameter scalar finishes in seconds while exercising the same
//! shape-generic code paths as the toy defaults.

use crate::bif::{bif_forward, context_encode, grid_positional, register_bif, register_context, text_positional};
use crate::encode::{fuse_decoupled_features, FuseParams};
use crate::objective::{bce_loss, box_losses, focal_loss, ObjectiveError, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::psdql::{
    aam_forward, decoder_forward, predict_heads, qsi_forward, register_aam, register_decoder,
    register_heads, InjectionConfig,
};
use crate::rng::SplitMix64;
use crate::scc::{loss_angle, loss_dist, loss_struct, proxy_features, reconstruct_text, register_scc, SccError};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, NodeId, ParamStore, Tensor2D, TensorError};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub struct SuiteResult {
    pub module: &'static str,
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < FD_TOLERANCE
    }
}

fn rand_tensor(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Tensor2D {
    Tensor2D::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect(),
    )
    .expect("shape consistent")
}

fn project_loss(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    // contract the output against a fixed random matrix so every entry
    // contributes to the scalar
    let (r, c) = g.value(out).shape();
    let mut rng = SplitMix64::new(seed);
    let probe = g.constant(rand_tensor(&mut rng, r, c, 1.0));
    let prod = g.mul_elem(out, probe)?;
    let s = g.sum_all(prod);
    let sq = g.mul_elem(out, out)?;
    let reg = g.sum_all(sq);
    let reg = g.scale(reg, 0.5);
    g.add(s, reg)
}

fn scc_to_tensor(e: SccError) -> TensorError {
    match e {
        SccError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn obj_to_tensor(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

type SuiteFn = fn() -> Result<GradCheckReport, TensorError>;

pub struct Suite {
    pub module: &'static str,
    pub name: &'static str,
    run: SuiteFn,
}

impl Suite {
    pub fn run(&self) -> Result<SuiteResult, TensorError> {
        Ok(SuiteResult {
            module: self.module,
            name: self.name,
            report: (self.run)()?,
        })
    }
}

pub fn all_suites() -> Vec<Suite> {
    vec![
        Suite { module: "encoders", name: "fuse_decoupled_features", run: suite_fuse },
        Suite { module: "bif", name: "bif_forward", run: suite_bif_forward },
        Suite { module: "bif", name: "context_encode", run: suite_context },
        Suite { module: "psdql", name: "aam_forward", run: suite_aam },
        Suite { module: "psdql", name: "qsi_forward", run: suite_qsi },
        Suite { module: "psdql", name: "decoder_forward", run: suite_decoder },
        Suite { module: "psdql", name: "predict_heads", run: suite_heads },
        Suite { module: "scc", name: "proxy_features", run: suite_proxy },
        Suite { module: "scc", name: "reconstruct_text", run: suite_reconstruct },
        Suite { module: "scc", name: "loss_dist", run: suite_loss_dist },
        Suite { module: "scc", name: "loss_angle", run: suite_loss_angle },
        Suite { module: "scc", name: "loss_struct", run: suite_loss_struct },
        Suite { module: "objective", name: "focal_loss", run: suite_focal },
        Suite { module: "objective", name: "box_losses", run: suite_box },
        Suite { module: "objective", name: "referring_bce", run: suite_ref },
    ]
}

fn suite_fuse() -> Result<GradCheckReport, TensorError> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(101);
    FuseParams::register(&mut store, "fuse", 6, 6, &mut rng)?;
    store.insert("in.f", rand_tensor(&mut rng, 2, 6, 0.8))?;
    let s_hat = rand_tensor(&mut rng, 3, 6, 0.8);
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let f = g.param(s, "in.f")?;
        let sh = g.constant(s_hat.clone());
        let out = fuse_decoupled_features(g, s, "fuse", f, sh, EPS)?;
        project_loss(g, out, 7)
    })
}

fn suite_bif_forward() -> Result<GradCheckReport, TensorError> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(102);
    register_bif(&mut store, d, &mut rng)?;
    store.insert("in.vis", rand_tensor(&mut rng, 4, d, 0.7))?;
    store.insert("in.text", rand_tensor(&mut rng, 3, d, 0.7))?;
    let pos_v = grid_positional(2, 2, d);
    let pos_l = text_positional(3, d);
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let vis = g.param(s, "in.vis")?;
        let text = g.param(s, "in.text")?;
        let out = bif_forward(g, s, vis, text, &pos_v, &pos_l, EPS)?;
        let a = project_loss(g, out.visual, 8)?;
        let b = project_loss(g, out.text, 9)?;
        g.add(a, b)
    })
}

fn suite_context() -> Result<GradCheckReport, TensorError> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(103);
    register_context(&mut store, 2, d, &mut rng)?;
    store.insert("in.x", rand_tensor(&mut rng, 4, d, 0.7))?;
    let pos_v = grid_positional(2, 2, d);
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let x = g.param(s, "in.x")?;
        let out = context_encode(g, s, x, &pos_v, 2, EPS)?;
        project_loss(g, out, 10)
    })
}

fn suite_aam() -> Result<GradCheckReport, TensorError> {
    let d = 5;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(104);
    register_aam(&mut store, "aam", d, &mut rng)?;
    store.insert("in.x", rand_tensor(&mut rng, 3, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let x = g.param(s, "in.x")?;
        let out = aam_forward(g, s, "aam", x)?;
        project_loss(g, out, 11)
    })
}

fn suite_qsi() -> Result<GradCheckReport, TensorError> {
    let d = 5;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(105);
    register_aam(&mut store, "aam", d, &mut rng)?;
    store.insert("in.q", rand_tensor(&mut rng, 4, d, 0.8))?;
    store.insert("in.f", rand_tensor(&mut rng, 2, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let q = g.param(s, "in.q")?;
        let f = g.param(s, "in.f")?;
        let out = qsi_forward(g, s, "aam", q, f, false)?;
        project_loss(g, out, 12)
    })
}

fn suite_decoder() -> Result<GradCheckReport, TensorError> {
    let d = 4;
    let layers = 2;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(106);
    register_decoder(&mut store, layers, d, &mut rng)?;
    store.insert("in.q", rand_tensor(&mut rng, 3, d, 0.8))?;
    store.insert("in.ctx", rand_tensor(&mut rng, 4, d, 0.8))?;
    store.insert("in.so", rand_tensor(&mut rng, 2, d, 0.8))?;
    store.insert("in.sm", rand_tensor(&mut rng, 1, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let q = g.param(s, "in.q")?;
        let ctx = g.param(s, "in.ctx")?;
        let so = g.param(s, "in.so")?;
        let sm = g.param(s, "in.sm")?;
        let out = decoder_forward(
            g,
            s,
            q,
            3,
            ctx,
            None,
            so,
            sm,
            layers,
            &InjectionConfig::default(),
            EPS,
        )?;
        project_loss(g, out, 13)
    })
}

fn suite_heads() -> Result<GradCheckReport, TensorError> {
    let d = 5;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(107);
    register_heads(&mut store, d, &mut rng)?;
    store.insert("in.q", rand_tensor(&mut rng, 3, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let q = g.param(s, "in.q")?;
        let heads = predict_heads(g, s, q)?;
        let a = project_loss(g, heads.boxes, 14)?;
        let b = project_loss(g, heads.class, 15)?;
        let c = project_loss(g, heads.referring, 16)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    })
}

fn suite_proxy() -> Result<GradCheckReport, TensorError> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(108);
    register_scc(&mut store, d, &mut rng)?;
    store.insert("in.v", rand_tensor(&mut rng, 4, d, 0.8))?;
    store.insert("in.so", rand_tensor(&mut rng, 2, d, 0.8))?;
    store.insert("in.sm", rand_tensor(&mut rng, 2, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let v = g.param(s, "in.v")?;
        let so = g.param(s, "in.so")?;
        let sm = g.param(s, "in.sm")?;
        let (f_so, f_sm) = proxy_features(g, s, v, so, sm, EPS)?;
        let a = project_loss(g, f_so, 17)?;
        let b = project_loss(g, f_sm, 18)?;
        g.add(a, b)
    })
}

fn suite_reconstruct() -> Result<GradCheckReport, TensorError> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(109);
    register_scc(&mut store, d, &mut rng)?;
    store.insert("in.f", rand_tensor(&mut rng, 3, d, 0.8))?;
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let f = g.param(s, "in.f")?;
        let out = reconstruct_text(g, s, f, "scc.q_g", EPS)?;
        project_loss(g, out, 19)
    })
}

fn embeddings_store(seed: u64, n: usize, d: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    store
        .insert("e.orig", rand_tensor(&mut rng, n, d, 1.0))
        .expect("fresh store");
    store
        .insert("e.recon", rand_tensor(&mut rng, n, d, 1.0))
        .expect("fresh store");
    store
}

fn embedding_nodes(
    g: &mut Graph,
    s: &ParamStore,
    n: usize,
) -> Result<(Vec<NodeId>, Vec<NodeId>), TensorError> {
    let o = g.param(s, "e.orig")?;
    let r = g.param(s, "e.recon")?;
    let orig = (0..n)
        .map(|i| g.slice_rows(o, i, 1))
        .collect::<Result<_, _>>()?;
    let recon = (0..n)
        .map(|i| g.slice_rows(r, i, 1))
        .collect::<Result<_, _>>()?;
    Ok((orig, recon))
}

fn suite_loss_dist() -> Result<GradCheckReport, TensorError> {
    let mut store = embeddings_store(110, 4, 3);
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let (orig, recon) = embedding_nodes(g, s, 4)?;
        loss_dist(g, &orig, &recon).map_err(scc_to_tensor)
    })
}

fn suite_loss_angle() -> Result<GradCheckReport, TensorError> {
    let mut store = embeddings_store(111, 4, 3);
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let (orig, recon) = embedding_nodes(g, s, 4)?;
        loss_angle(g, &orig, &recon).map_err(scc_to_tensor)
    })
}

fn suite_loss_struct() -> Result<GradCheckReport, TensorError> {
    let mut store = embeddings_store(112, 4, 3);
    finite_diff_check(&mut store, FD_STEP, |g, s| {
        let (orig, recon) = embedding_nodes(g, s, 4)?;
        loss_struct(g, &orig, &recon, 0.4).map_err(scc_to_tensor)
    })
}

fn suite_focal() -> Result<GradCheckReport, TensorError> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(113);
    store.insert("logits", rand_tensor(&mut rng, 6, 1, 1.5))?;
    let targets: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let logits = g.param(s, "logits")?;
        let scores = g.sigmoid(logits);
        focal_loss(g, scores, &targets, FOCAL_ALPHA, FOCAL_GAMMA).map_err(obj_to_tensor)
    })
}

fn suite_box() -> Result<GradCheckReport, TensorError> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(114);
    store.insert("box_logits", rand_tensor(&mut rng, 3, 4, 0.6))?;
    let gt = vec![
        [0.4, 0.5, 0.3, 0.25],
        [0.6, 0.4, 0.2, 0.3],
        [0.5, 0.6, 0.35, 0.2],
    ];
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let logits = g.param(s, "box_logits")?;
        let boxes = g.sigmoid(logits);
        let (l1, giou) = box_losses(g, boxes, &gt).map_err(obj_to_tensor)?;
        g.add(l1, giou)
    })
}

fn suite_ref() -> Result<GradCheckReport, TensorError> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(115);
    store.insert("logits", rand_tensor(&mut rng, 5, 1, 1.2))?;
    let targets: Vec<f64> = (0..5).map(|i| if i < 2 { 1.0 } else { 0.0 }).collect();
    finite_diff_check(&mut store, FD_STEP, move |g, s| {
        let logits = g.param(s, "logits")?;
        let scores = g.sigmoid(logits);
        bce_loss(g, scores, &targets).map_err(obj_to_tensor)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_tolerance() {
        for suite in all_suites() {
            let result = suite.run().unwrap();
            assert!(
                result.passed(),
                "{}/{}: max rel err {}",
                result.module,
                result.name,
                result.report.max_rel_err
            );
        }
    }
}
