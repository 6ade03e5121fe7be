//! Central finite-difference verification of tape gradients.

use super::{Graph, NodeId, ParamStore, Tensor2D, TensorError};

/// Outcome of one finite-difference sweep over every parameter scalar.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub scalars_checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare tape gradients of a scalar loss against central differences over
/// every scalar of every parameter in `store`. The loss builder must be
/// deterministic; two baseline evaluations are compared to enforce that.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    step: f64,
    build_loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step must be in (0, 1e-2], got {step}"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = build_loss(&mut g, store)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NotScalar {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.item())
    };

    let base_a = eval(store)?;
    let base_b = eval(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    // Analytic gradients.
    let mut g = Graph::new();
    let loss = build_loss(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    g.write_grads(store);
    let analytic: Vec<Tensor2D> = store.iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        scalars_checked: 0,
    };
    for slot in 0..store.len() {
        let n = store.value_at(slot).data().len();
        for idx in 0..n {
            store.perturb(slot, idx, step);
            let plus = eval(store)?;
            store.perturb(slot, idx, -2.0 * step);
            let minus = eval(store)?;
            store.perturb(slot, idx, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[slot].data()[idx];
            let e = rel_err(a, numeric);
            report.scalars_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((names[slot].clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
