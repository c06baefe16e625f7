//! Analytic-versus-numerical gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::Transformer;
use super::{cross_entropy_sum, shift_right};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Name of the parameter tensor holding the worst entry.
    pub worst_param: String,
    pub all_finite: bool,
}

/// Mean token cross-entropy of a batch of `(input ids, target ids)` pairs,
/// normalized by the total number of target tokens.
fn batch_loss<S: Scalar>(model: &Transformer<S>, batch: &[(Vec<u32>, Vec<u32>)], grads: Option<&mut [S]>) -> Result<S> {
    let total: usize = batch.iter().map(|(_, y)| y.len()).sum();
    if total == 0 {
        return Err(Error::Empty("gradient check batch has no target tokens"));
    }
    let scale = S::one() / S::from_usize_lossy(total);
    let mut loss = S::zero();
    let mut grads = grads;
    for (x, y) in batch {
        let y_in = shift_right(y);
        let mask = vec![false; y.len()];
        match grads.as_deref_mut() {
            Some(g) => {
                let (logits, cache) = model.forward_train(x, &y_in, None)?;
                let (sum, _, dlogits) = cross_entropy_sum(&logits, y, &mask, Some(scale))?;
                model.backward(&cache, &dlogits.expect("gradient requested"), g);
                loss += sum;
            }
            None => {
                let logits = model.forward(x, &y_in)?;
                loss += cross_entropy_sum(&logits, y, &mask, None)?.0;
            }
        }
    }
    Ok(loss * scale)
}

fn central_difference<S: Scalar>(
    probe: &mut Transformer<S>,
    batch: &[(Vec<u32>, Vec<u32>)],
    idx: usize,
    eps: f64,
) -> Result<f64> {
    let orig = probe.params.data[idx];
    let eps_s = S::from_f64_lossy(eps);
    probe.params.data[idx] = orig + eps_s;
    let plus = batch_loss(probe, batch, None)?.to_f64_lossy();
    probe.params.data[idx] = orig - eps_s;
    let minus = batch_loss(probe, batch, None)?.to_f64_lossy();
    probe.params.data[idx] = orig;
    // use the perturbation actually representable in S
    let step = (orig + eps_s).to_f64_lossy() - (orig - eps_s).to_f64_lossy();
    Ok((plus - minus) / step)
}

/// Compares backpropagated gradients with central differences
/// `(L(w + eps) - L(w - eps)) / 2 eps` on `n_samples` parameters drawn
/// uniformly from the tensors accepted by `filter`. With `richardson` the
/// differences at `eps` and `2 eps` are combined as `(4 D(eps) - D(2 eps)) / 3`,
/// cancelling the leading truncation term.
///
/// Relative error is `|a - n| / max(|a|, |n|)` (zero when both vanish).
pub fn grad_check<S: Scalar>(
    model: &Transformer<S>,
    batch: &[(Vec<u32>, Vec<u32>)],
    eps: f64,
    n_samples: usize,
    seed: u64,
    richardson: bool,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let mut grads = model.params.zeros_like();
    batch_loss(model, batch, Some(&mut grads))?;
    let all_finite = grads.iter().all(|g| g.is_finite());

    let candidates: Vec<usize> = model
        .params
        .infos()
        .iter()
        .filter(|i| filter(&i.name))
        .flat_map(|i| i.range())
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no parameters match the gradient-check filter".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples.min(candidates.len());
    let picks = sample(&mut rng, candidates.len(), n);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst_param: String::new(),
        all_finite,
    };
    for pick in picks {
        let idx = candidates[pick];
        let numeric = if richardson {
            let d1 = central_difference(&mut probe, batch, idx, eps)?;
            let d2 = central_difference(&mut probe, batch, idx, 2.0 * eps)?;
            (4.0 * d1 - d2) / 3.0
        } else {
            central_difference(&mut probe, batch, idx, eps)?
        };
        let analytic = grads[idx].to_f64_lossy();
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom == 0.0 { 0.0 } else { abs / denom };
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_relative_error || report.worst_param.is_empty() {
            report.max_relative_error = report.max_relative_error.max(rel);
            let info = model.params.infos().iter().find(|i| i.range().contains(&idx)).expect("index in store");
            report.worst_param = info.name.clone();
        }
    }
    Ok(report)
}
