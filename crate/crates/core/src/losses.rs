//! The five loss terms and their weighted sum.
//!
//! Stop-gradient rules are enforced by the argument types: the pseudo-label
//! loss receives weak-view logits as plain values, and the self-supervised
//! loss refuses a target that still carries gradient.

use serde::{Deserialize, Serialize};

use crate::energy::{free_energy_score, softmax_confidence};
use crate::error::{Error, Result};
use crate::network::ParamVars;
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Mean cross-entropy `H(y_i, softmax(o_i))` against one-hot labels.
pub fn supervised_loss(tape: &mut Tape, logits: Var, onehot: &Tensor) -> Result<Var> {
    if tape.shape(logits) != onehot.shape() {
        return Err(Error::shape("supervised_loss", tape.shape(logits), onehot.shape()));
    }
    for (i, row) in onehot.row_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Contract(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    if onehot.rows() == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let per_row = cross_entropy_rows(tape, logits, onehot)?;
    tape.mean(per_row)
}

/// Per-row cross-entropy against one-hot targets `t`, evaluated as
/// `log sum_j exp(q_ij - q_iy)`. Shifting by the target logit before the
/// reduction avoids the cancellation in `lse(q_i) - q_iy` when the target
/// class dominates.
fn cross_entropy_rows(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let t = tape.constant(targets.clone())?;
    let picked = tape.mul(logits, t)?;
    let picked = tape.row_sum(picked)?;
    let ones = tape.constant(Tensor::filled(1, targets.cols(), 1.0))?;
    let spread = tape.matmul(picked, ones)?;
    let shifted = tape.sub(logits, spread)?;
    tape.row_log_sum_exp(shifted)
}

/// `-(1/n) sum_i cos(h(v_i), z_i)` with `z` acting as a constant.
pub fn self_supervised_loss(tape: &mut Tape, h_of_v: Var, z: Var) -> Result<Var> {
    if tape.requires_grad(z) {
        return Err(Error::Contract(
            "self-supervised target must be detached from the graph".into(),
        ));
    }
    let n = tape.shape(h_of_v).0;
    if n == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let cos = tape.row_cosine(h_of_v, z)?;
    let s = tape.sum(cos)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Rows whose free energy is strictly below `tau_id`.
pub fn energy_inlier_mask(weak_logits: &Tensor, tau_id: f64, beta: f64) -> Vec<bool> {
    free_energy_score(weak_logits, beta)
        .into_iter()
        .map(|s| s < tau_id)
        .collect()
}

/// Rows whose free energy is strictly above `tau_ood`.
pub fn energy_outlier_mask(weak_logits: &Tensor, tau_ood: f64, beta: f64) -> Vec<bool> {
    free_energy_score(weak_logits, beta)
        .into_iter()
        .map(|s| s > tau_ood)
        .collect()
}

/// Rows whose largest softmax probability reaches `threshold` (FixMatch rule).
pub fn confidence_mask(weak_logits: &Tensor, threshold: f64) -> Vec<bool> {
    softmax_confidence(weak_logits)
        .into_iter()
        .map(|c| c >= threshold)
        .collect()
}

/// Pseudo-label cross-entropy `(1/n) sum_i mask_i H(onehot(argmax w_i), softmax(q_i))`.
///
/// The weak logits `w` are plain values, so no gradient reaches them. The
/// normalizer is the full batch size `n`, not the number of selected rows.
/// Returns the loss and the number of selected rows.
pub fn masked_pseudo_label_loss(
    tape: &mut Tape,
    weak_logits: &Tensor,
    strong_logits: Var,
    mask: &[bool],
) -> Result<(Var, usize)> {
    if weak_logits.shape() != tape.shape(strong_logits) {
        return Err(Error::shape(
            "pseudo_label_loss",
            weak_logits.shape(),
            tape.shape(strong_logits),
        ));
    }
    if mask.len() != weak_logits.rows() {
        return Err(Error::shape(
            "pseudo_label_loss",
            (weak_logits.rows(), 1),
            (mask.len(), 1),
        ));
    }
    let selected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if selected.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0))?, 0));
    }
    let classes = weak_logits.cols();
    let mut targets = Tensor::zeros(selected.len(), classes);
    for (r, &i) in selected.iter().enumerate() {
        targets.set(r, argmax(weak_logits.row(i)), 1.0);
    }
    let q = tape.gather_rows(strong_logits, selected.clone())?;
    let ce = cross_entropy_rows(tape, q, &targets)?;
    let s = tape.sum(ce)?;
    let loss = tape.scale(s, 1.0 / mask.len() as f64)?;
    Ok((loss, selected.len()))
}

/// Pseudo-label loss with pseudo-inliers chosen by `s(w_i) < tau_id`.
pub fn pseudo_label_loss(
    tape: &mut Tape,
    weak_logits: &Tensor,
    strong_logits: Var,
    tau_id: f64,
    beta: f64,
) -> Result<(Var, usize)> {
    let mask = energy_inlier_mask(weak_logits, tau_id, beta);
    masked_pseudo_label_loss(tape, weak_logits, strong_logits, &mask)
}

/// Differentiable free energy per row, `-(1/beta) log sum exp(beta * x)`.
pub fn free_energy_var(tape: &mut Tape, logits: Var, beta: f64) -> Result<Var> {
    let scaled = if beta == 1.0 { logits } else { tape.scale(logits, beta)? };
    let lse = tape.row_log_sum_exp(scaled)?;
    tape.scale(lse, -1.0 / beta)
}

/// Squared hinge on the energy of pseudo-outliers (`s(w_i) > tau_ood`):
/// mean over the selected rows of `max(0, m_ood - s(w_i))^2`, or 0 when no
/// row is selected. Gradient flows into the weak logits.
pub fn energy_reg_loss(
    tape: &mut Tape,
    weak_logits: Var,
    tau_ood: f64,
    m_ood: f64,
    beta: f64,
) -> Result<(Var, usize)> {
    let mask = energy_outlier_mask(tape.value(weak_logits), tau_ood, beta);
    let selected: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if selected.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0))?, 0));
    }
    let count = selected.len();
    let w = tape.gather_rows(weak_logits, selected)?;
    let s = free_energy_var(tape, w, beta)?;
    let neg = tape.scale(s, -1.0)?;
    let gap = tape.add_scalar(neg, m_ood)?;
    let hinge = tape.max_with_constant(gap, 0.0)?;
    let sq = tape.square(hinge)?;
    let total = tape.sum(sq)?;
    Ok((tape.scale(total, 1.0 / count as f64)?, count))
}

/// `1/2 * ||theta||^2` over every weight matrix of `f`, `g` and `h` (biases excluded).
pub fn weight_decay_loss(tape: &mut Tape, params: &ParamVars) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for w in params.weights() {
        let sq = tape.square(w)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    tape.scale(acc, 0.5)
}

/// Weights of the four auxiliary terms; the supervised term has weight 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_p: f64,
    pub w_s: f64,
    pub w_e: f64,
    pub w_w: f64,
}

/// Scalar loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_l: Var,
    pub l_p: Var,
    pub l_s: Var,
    pub l_e: Var,
    pub l_w: Var,
    pub inlier_mask_count: usize,
    pub outlier_mask_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_l: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub l_e: f64,
    pub l_w: f64,
    pub total: f64,
    pub inlier_mask_count: usize,
    pub outlier_mask_count: usize,
}

/// `l_l + w_p l_p + w_s l_s + w_e l_e + w_w l_w`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    for (name, w) in [
        ("w_p", weights.w_p),
        ("w_s", weights.w_s),
        ("w_e", weights.w_e),
        ("w_w", weights.w_w),
    ] {
        if !(w >= 0.0) {
            return Err(Error::Contract(format!("loss weight {name} must be >= 0, got {w}")));
        }
    }
    let mut total = terms.l_l;
    for (term, w) in [
        (terms.l_p, weights.w_p),
        (terms.l_s, weights.w_s),
        (terms.l_e, weights.w_e),
        (terms.l_w, weights.w_w),
    ] {
        let scaled = tape.scale(term, w)?;
        total = tape.add(total, scaled)?;
    }
    let item = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        l_l: item(terms.l_l)?,
        l_p: item(terms.l_p)?,
        l_s: item(terms.l_s)?,
        l_e: item(terms.l_e)?,
        l_w: item(terms.l_w)?,
        total: item(total)?,
        inlier_mask_count: terms.inlier_mask_count,
        outlier_mask_count: terms.outlier_mask_count,
    };
    Ok((total, breakdown))
}
