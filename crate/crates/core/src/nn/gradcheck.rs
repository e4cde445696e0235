use super::graph::{Graph, NodeId};
use super::ParamStore;
use crate::{Error, Result};

/// Floor of the relative-error denominator; keeps near-zero gradients from
/// inflating the ratio.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose `±h` perturbation crossed a ReLU kink or another branch.
    pub skipped_kinks: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, for every scalar of every parameter.
///
/// Entries whose perturbation changes the graph's kink signature (a ReLU
/// flips, a variance floor engages) are not differentiable there and are
/// counted in `skipped_kinks` instead.
pub fn grad_check<F>(params: &ParamStore, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> NodeId,
{
    let eval = |p: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(p);
        let out = build(&mut g);
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss is not finite during gradient check".into()));
        }
        Ok((v, g.kink_signature()))
    };

    let mut g = Graph::new(params);
    let out = build(&mut g);
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("loss is not finite during gradient check".into()));
    }
    let base_sig = g.kink_signature();
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut work = params.clone();
    for id in params.ids() {
        let analytic = grads.get_or_zeros(id, params);
        for k in 0..params.get(id).data().len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let (fp, sp) = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let (fm, sm) = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic.data()[k], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
