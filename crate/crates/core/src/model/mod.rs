//! From-scratch encoder-decoder transformer: `h = E(x)`,
//! `y_t = D(h, y_1..y_{t-1})`, with manual backpropagation.

mod checkpoint;
mod config;
mod decode;
mod gradcheck;
mod layers;
mod params;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::ModelConfig;
pub use decode::DecodeOutput;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamInfo, ParamStore};
pub use transformer::{ForwardCache, Transformer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::tokenizer::PAD_ID;

/// Decoder input for teacher forcing: the start token followed by the
/// target shifted right by one.
pub fn shift_right(y_out: &[u32]) -> Vec<u32> {
    let mut y_in = Vec::with_capacity(y_out.len());
    y_in.push(PAD_ID);
    y_in.extend_from_slice(&y_out[..y_out.len().saturating_sub(1)]);
    y_in
}

/// Mean token-level cross-entropy over positions where `pad_mask` is false.
pub fn token_cross_entropy<S: Scalar>(logits: &Mat<S>, targets: &[u32], pad_mask: &[bool]) -> Result<S> {
    let (sum, count, _) = cross_entropy_sum(logits, targets, pad_mask, None)?;
    Ok(sum / S::from_usize_lossy(count))
}

/// Summed cross-entropy and the number of scored positions. When `grad_scale`
/// is given, also returns `d(scale * sum) / d logits`.
pub(crate) fn cross_entropy_sum<S: Scalar>(
    logits: &Mat<S>,
    targets: &[u32],
    pad_mask: &[bool],
    grad_scale: Option<S>,
) -> Result<(S, usize, Option<Mat<S>>)> {
    if logits.rows != targets.len() || targets.len() != pad_mask.len() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            pad_mask.len()
        )));
    }
    let count = pad_mask.iter().filter(|p| !**p).count();
    if count == 0 {
        return Err(Error::Empty("every target position is padding"));
    }
    let mut grad = grad_scale.map(|_| Mat::zeros(logits.rows, logits.cols));
    let mut total = S::zero();
    for (r, (&t, &pad)) in targets.iter().zip(pad_mask).enumerate() {
        if pad {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t as usize];
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            let gr = g.row_mut(r);
            for (j, &v) in row.iter().enumerate() {
                gr[j] = (v - log_z).exp() * scale;
            }
            gr[t as usize] -= scale;
        }
    }
    Ok((total, count, grad))
}
