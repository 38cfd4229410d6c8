//! Finite-difference checks of every loss term on small random instances.
//!
//! Instances are drawn so that no ReLU pre-activation, argmax or mask
//! decision sits within [`MARGIN`] of its switching point, which keeps the
//! central differences on one smooth piece of the loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::OpenSetBatch;
use crate::energy::free_energy_score;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::losses::{total_loss, LossWeights};
use crate::network::{ModelDims, ModelParams};
use crate::rng::{self, tag};
use crate::tape::{Primitive, Tape};
use crate::tensor::Tensor;
use crate::trainer::{record_terms, PseudoLabelRule, StepPlan};

/// Minimum distance of every kink or decision boundary from the instance.
pub const MARGIN: f64 = 1e-3;

/// Pass mark for the worst relative error of any term.
pub const TOLERANCE: f64 = 1e-4;

const MAX_ATTEMPTS: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Supervised,
    SelfSupervised,
    PseudoLabel,
    EnergyReg,
    WeightDecay,
    Composite,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Supervised,
        Term::SelfSupervised,
        Term::PseudoLabel,
        Term::EnergyReg,
        Term::WeightDecay,
        Term::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Supervised => "l_l",
            Term::SelfSupervised => "l_s",
            Term::PseudoLabel => "l_p",
            Term::EnergyReg => "l_e",
            Term::WeightDecay => "l_w",
            Term::Composite => "total",
        }
    }
}

/// Weights of the composite check. `w_e` is raised well above its training
/// default so the hinge term is visible in the summed gradient.
pub const COMPOSITE_WEIGHTS: LossWeights = LossWeights {
    w_p: 1.0,
    w_s: 5.0,
    w_e: 0.5,
    w_w: 5e-4,
};

/// A small network, batch and thresholds with every decision well clear of
/// its boundary.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParams,
    pub batch: OpenSetBatch,
    /// Weak-view features at `params`, held fixed as the self-supervised target.
    pub target: Tensor,
    pub plan: StepPlan,
}

pub fn instance_dims() -> ModelDims {
    ModelDims {
        input_dim: 3,
        hidden_sizes: vec![5],
        feature_dim: 4,
        num_classes: 3,
    }
}

fn normal_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

/// Smallest absolute hidden pre-activation over all rows of `x`.
fn min_preactivation(params: &ModelParams, x: &Tensor) -> Result<f64> {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    let n = params.backbone.len();
    for layer in &params.backbone[..n - 1] {
        h = layer.forward(&h)?;
        min = h.data().iter().fold(min, |m, v| m.min(v.abs()));
        h = h.relu();
    }
    Ok(min)
}

fn top_two_gap(row: &[f64]) -> f64 {
    let mut s = row.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() < 2 {
        f64::INFINITY
    } else {
        s[0] - s[1]
    }
}

/// Midpoint of the widest gap between consecutive sorted scores in the index
/// range `lo..hi`, with the gap size.
fn widest_gap(sorted: &[f64], lo: usize, hi: usize) -> (f64, f64) {
    (lo..hi)
        .map(|i| ((sorted[i] + sorted[i + 1]) / 2.0, sorted[i + 1] - sorted[i]))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty range")
}

fn try_instance(seed: u64, attempt: u64) -> Result<Option<Instance>> {
    let mut rng = rng::stream(seed, tag::GRADCHECK, attempt);
    let dims = instance_dims();
    let mut params = ModelParams::init(rng.random(), &dims)?;
    for t in params.tensors_mut() {
        if t.rows() == 1 {
            *t = normal_tensor(&mut rng, 1, t.cols(), 0.3);
        }
    }
    let (b, nu, d, c) = (3, 4, dims.input_dim, dims.num_classes);
    let labeled_x = normal_tensor(&mut rng, b, d, 1.0);
    let mut labeled_onehot = Tensor::zeros(b, c);
    for r in 0..b {
        labeled_onehot.set(r, rng.random_range(0..c), 1.0);
    }
    let weak = normal_tensor(&mut rng, nu, d, 1.0);
    let strong = normal_tensor(&mut rng, nu, d, 1.0);

    for x in [&labeled_x, &weak, &strong] {
        if min_preactivation(&params, x)? < MARGIN {
            return Ok(None);
        }
    }
    let weak_logits = params.predict(&weak)?;
    if weak_logits.row_iter().any(|r| top_two_gap(r) < MARGIN) {
        return Ok(None);
    }
    let target = params.forward_features(&weak)?;
    if target.row_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
        return Ok(None);
    }

    // Split the weak-view energies into inliers, a middle band and outliers.
    let mut scores = free_energy_score(&weak_logits, 1.0);
    scores.sort_by(f64::total_cmp);
    let (tau_id, gap_id) = widest_gap(&scores, 0, 1);
    let (tau_ood, gap_ood) = widest_gap(&scores, 1, nu - 1);
    if gap_id < 2.0 * MARGIN || gap_ood < 2.0 * MARGIN {
        return Ok(None);
    }
    let m_ood = scores[nu - 1] + 0.5;

    Ok(Some(Instance {
        params,
        batch: OpenSetBatch {
            labeled_x,
            labeled_onehot,
            unlabeled_weak: weak,
            unlabeled_strong: strong,
        },
        target,
        plan: StepPlan {
            weights: COMPOSITE_WEIGHTS,
            pseudo: PseudoLabelRule::Energy { tau_id },
            hinge: Some((tau_ood, m_ood)),
            beta: 1.0,
            lr: 0.0,
        },
    }))
}

/// The first admissible instance for `seed`.
pub fn instance(seed: u64) -> Result<Instance> {
    for attempt in 0..MAX_ATTEMPTS {
        if let Some(inst) = try_instance(seed, attempt)? {
            return Ok(inst);
        }
    }
    Err(Error::Degenerate(format!(
        "no admissible gradient-check instance for seed {seed} in {MAX_ATTEMPTS} attempts"
    )))
}

/// Value and analytic gradient of `term` at flat parameters `flat`.
///
/// `fault` scales the adjoint of one primitive, for mutation testing.
pub fn term_value_and_grad(
    inst: &Instance,
    term: Term,
    flat: &[f64],
    fault: Option<(Primitive, f64)>,
) -> Result<(f64, Vec<f64>)> {
    let mut params = inst.params.clone();
    params.set_flat(flat)?;
    let mut tape = Tape::new();
    if let Some((p, f)) = fault {
        tape.inject_adjoint_fault(p, f);
    }
    let vars = params.register(&mut tape)?;
    let terms = record_terms(&mut tape, &vars, &inst.batch, &inst.plan, Some(&inst.target))?;
    let root = match term {
        Term::Supervised => terms.l_l,
        Term::SelfSupervised => terms.l_s,
        Term::PseudoLabel => terms.l_p,
        Term::EnergyReg => terms.l_e,
        Term::WeightDecay => terms.l_w,
        Term::Composite => total_loss(&mut tape, &terms, &inst.plan.weights)?.0,
    };
    let value = tape.value(root).item()?;
    let mut grads = tape.backward(root)?;
    Ok((value, vars.flat_grad(&mut grads)?))
}

pub fn check_term(seed: u64, term: Term, eps: f64, fault: Option<(Primitive, f64)>) -> Result<GradCheckReport> {
    let inst = instance(seed)?;
    let base = inst.params.to_flat();
    grad_check(|p| term_value_and_grad(&inst, term, p, fault), &base, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_has_mixed_masks() {
        let inst = instance(0).unwrap();
        let mut tape = Tape::new();
        let vars = inst.params.register(&mut tape).unwrap();
        let t = record_terms(&mut tape, &vars, &inst.batch, &inst.plan, Some(&inst.target)).unwrap();
        assert_eq!(t.inlier_mask_count, 1);
        assert!(t.outlier_mask_count >= 1 && t.outlier_mask_count <= 2);
        assert!(tape.value(t.l_e).item().unwrap() > 0.0);
    }

    #[test]
    fn every_term_passes_on_one_seed() {
        for term in Term::ALL {
            let r = check_term(1, term, 1e-5, None).unwrap();
            assert!(r.max_relative_error < TOLERANCE, "{term:?} {r:?}");
        }
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let r = check_term(1, Term::Composite, 1e-5, Some((Primitive::MatMul, 1.5))).unwrap();
        assert!(r.max_relative_error > 1e-2);
    }
}
