//! Training objectives: the four-head supervised loss with a fused
//! cross-entropy term, prototype consistency losses, the warm-up schedule and
//! the total loss.

mod consistency;
mod seg;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{softmax_backward, ClassMap};
use crate::prototypes::PrototypeError;
use crate::registry::UnknownStrategy;

pub use consistency::{
    consistency_losses, consistency_terms, ConsistencyOutput, ConsistencyPlan, PoolMember, PoolSpec, TermItem,
    TermSpec,
};
pub use seg::{
    ce_loss, dice_loss, focal_loss, iou_loss, seg_loss_registry, CrossEntropy, Focal, LossGrad, SegLoss, SoftDice,
    SoftIou, LOG_EPS, SMOOTH,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss component `{component}` = {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    UnknownLoss(#[from] UnknownStrategy),
    #[error("head losses must name each of ce, dice, focal, iou once; got {0:?}")]
    BadHeadLosses(Vec<String>),
}

/// Every loss component of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_focal: f64,
    pub l_iou: f64,
    pub l_fused: f64,
    pub l_seg: f64,
    pub l_lc: f64,
    pub l_uc1: f64,
    pub l_uc2: f64,
    pub total: f64,
    pub lambda_con: f64,
}

impl LossReport {
    fn components(&self) -> [(&'static str, f64); 11] {
        [
            ("l_ce", self.l_ce),
            ("l_dice", self.l_dice),
            ("l_focal", self.l_focal),
            ("l_iou", self.l_iou),
            ("l_fused", self.l_fused),
            ("l_seg", self.l_seg),
            ("l_lc", self.l_lc),
            ("l_uc1", self.l_uc1),
            ("l_uc2", self.l_uc2),
            ("total", self.total),
            ("lambda_con", self.lambda_con),
        ]
    }

    pub fn check_finite(&self) -> Result<(), LossError> {
        match self.components().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((component, value)) => Err(LossError::NonFiniteLoss { component, value }),
            None => Ok(()),
        }
    }
}

/// Gaussian warm-up `lambda_max * exp(-5 (1 - iter/total)^2)`.
pub fn ramp_lambda(iter: usize, total_iters: usize, lambda_max: f64) -> f64 {
    if total_iters == 0 {
        return lambda_max;
    }
    let t = (iter as f64 / total_iters as f64).clamp(0.0, 1.0);
    (lambda_max * (-5.0 * (1.0 - t).powi(2)).exp()).clamp(0.0, lambda_max)
}

/// `l_seg + l_lc + lambda_con (l_uc1 + l_uc2)`.
pub fn total_loss(l_seg: f64, l_lc: f64, l_uc1: f64, l_uc2: f64, lambda_con: f64) -> Result<f64, LossError> {
    for (component, value) in
        [("l_seg", l_seg), ("l_lc", l_lc), ("l_uc1", l_uc1), ("l_uc2", l_uc2), ("lambda_con", lambda_con)]
    {
        if !value.is_finite() {
            return Err(LossError::NonFiniteLoss { component, value });
        }
    }
    let total = l_seg + l_lc + lambda_con * (l_uc1 + l_uc2);
    if !total.is_finite() {
        return Err(LossError::NonFiniteLoss { component: "total", value: total });
    }
    Ok(total)
}

/// Resolves the per-head loss list (head `i` gets entry `i`).
pub fn head_losses(names: &[String], focal_gamma: f64) -> Result<Vec<Arc<dyn SegLoss>>, LossError> {
    let mut sorted = names.to_vec();
    sorted.sort();
    if sorted != ["ce", "dice", "focal", "iou"] {
        return Err(LossError::BadHeadLosses(names.to_vec()));
    }
    let reg = seg_loss_registry(focal_gamma);
    names.iter().map(|n| reg.get(n).map_err(LossError::from)).collect()
}

pub fn default_head_losses() -> Vec<String> {
    ["ce", "dice", "focal", "iou"].map(String::from).to_vec()
}

/// Supervised components plus gradients with respect to each head's logits.
#[derive(Debug, Clone)]
pub struct SupervisedOutput {
    pub report: LossReport,
    /// `[head][sample]` gradient of `l_seg` on the head logits.
    pub logit_grads: Vec<Vec<ClassMap>>,
}

/// `l_seg = (sum_i loss_i(head_i)) / K + ce(mean of heads)`.
///
/// `head_probs` is `[head][sample]`; `targets` are per-sample class weights.
pub fn supervised_loss(
    head_probs: &[Vec<ClassMap>],
    targets: &[ClassMap],
    losses: &[Arc<dyn SegLoss>],
) -> Result<SupervisedOutput, LossError> {
    let k = head_probs.len();
    if k == 0 || k != losses.len() {
        return Err(LossError::ShapeMismatch(format!("{k} heads, {} losses", losses.len())));
    }
    let n = targets.len();
    let mut mean: Vec<ClassMap> = targets.iter().map(|t| ClassMap::zeros(t.shape, t.channels)).collect();
    for head in head_probs {
        if head.len() != n {
            return Err(LossError::ShapeMismatch(format!("{} predictions, {n} targets", head.len())));
        }
        for (m, p) in mean.iter_mut().zip(head) {
            if !m.same_layout(p) {
                return Err(LossError::ShapeMismatch("head output layout differs from target".into()));
            }
            for (a, b) in m.data.iter_mut().zip(&p.data) {
                *a += b / k as f64;
            }
        }
    }
    let fused = CrossEntropy.value_and_grad(&mean, targets)?;
    let mut report = LossReport { l_fused: fused.value, ..Default::default() };
    let mut logit_grads = Vec::with_capacity(k);
    let mut sum = 0.0;
    for (head, loss) in head_probs.iter().zip(losses) {
        let lg = loss.value_and_grad(head, targets)?;
        match loss.name() {
            "ce" => report.l_ce = lg.value,
            "dice" => report.l_dice = lg.value,
            "focal" => report.l_focal = lg.value,
            "iou" => report.l_iou = lg.value,
            _ => {}
        }
        sum += lg.value;
        let grads = head
            .iter()
            .zip(&lg.grad)
            .zip(&fused.grad)
            .map(|((p, g), gf)| {
                let mut gp = ClassMap::zeros(p.shape, p.channels);
                for ((o, a), b) in gp.data.iter_mut().zip(&g.data).zip(&gf.data) {
                    *o = a / k as f64 + b / k as f64;
                }
                softmax_backward(p, &gp)
            })
            .collect();
        logit_grads.push(grads);
    }
    report.l_seg = sum / k as f64 + report.l_fused;
    Ok(SupervisedOutput { report, logit_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::softmax_channels;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ramp_examples() {
        assert_eq!(ramp_lambda(100, 100, 1.0), 1.0);
        assert_abs_diff_eq!(ramp_lambda(0, 100, 1.0), 0.006738, epsilon = 1e-6);
        assert_abs_diff_eq!(ramp_lambda(50, 100, 1.0), 0.286505, epsilon = 1e-6);
        assert_eq!(ramp_lambda(14000, 14000, 1.0), 1.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 2.0, 5.0, 7.0, 0.0).unwrap(), 3.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 0.5).unwrap(), 3.0);
        assert!(matches!(
            total_loss(f64::NAN, 1.0, 1.0, 1.0, 0.5),
            Err(LossError::NonFiniteLoss { component: "l_seg", .. })
        ));
    }

    #[test]
    fn head_loss_list_validated() {
        assert_eq!(head_losses(&default_head_losses(), 2.0).unwrap().len(), 4);
        let dup = ["ce", "ce", "focal", "iou"].map(String::from).to_vec();
        assert!(matches!(head_losses(&dup, 2.0), Err(LossError::BadHeadLosses(_))));
    }

    fn toy(seed: u64) -> (Vec<Vec<ClassMap>>, Vec<Vec<ClassMap>>, Vec<ClassMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 2, 2];
        let logits: Vec<Vec<ClassMap>> = (0..4)
            .map(|_| (0..2).map(|_| ClassMap::new(shape, 2, (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect())
            .collect();
        let probs = logits.iter().map(|h| h.iter().map(softmax_channels).collect()).collect();
        let targets = (0..2)
            .map(|_| ClassMap::one_hot(&(0..8).map(|_| rng.gen_range(0..2)).collect::<Vec<u8>>(), shape, 2))
            .collect();
        (logits, probs, targets)
    }

    #[test]
    fn supervised_matches_hand_assembly() {
        let (_, probs, targets) = toy(3);
        let losses = head_losses(&default_head_losses(), 2.0).unwrap();
        let out = supervised_loss(&probs, &targets, &losses).unwrap().report;
        let mean: Vec<ClassMap> = (0..2)
            .map(|s| {
                let data = (0..16).map(|i| probs.iter().map(|h| h[s].data[i]).sum::<f64>() / 4.0).collect();
                ClassMap::new([2, 2, 2], 2, data)
            })
            .collect();
        let ce = ce_loss(&probs[0], &targets).unwrap();
        let dice = dice_loss(&probs[1], &targets).unwrap();
        let focal = focal_loss(&probs[2], &targets, 2.0).unwrap();
        let iou = iou_loss(&probs[3], &targets).unwrap();
        let fused = ce_loss(&mean, &targets).unwrap();
        assert_abs_diff_eq!(out.l_seg, (ce + dice + focal + iou) / 4.0 + fused, epsilon = 1e-12);
        assert_eq!(out.l_seg, (out.l_ce + out.l_dice + out.l_focal + out.l_iou) / 4.0 + out.l_fused);
    }

    #[test]
    fn perfect_heads_give_small_seg_loss() {
        let t = ClassMap::one_hot(&[0, 1, 1, 0], [1, 2, 2], 2);
        let losses = head_losses(&default_head_losses(), 2.0).unwrap();
        let out = supervised_loss(&vec![vec![t.clone()]; 4], &[t], &losses).unwrap();
        assert!(out.report.l_seg <= 1e-3);
    }

    #[test]
    fn supervised_gradients_match_finite_differences() {
        let (logits, probs, targets) = toy(5);
        let losses = head_losses(&default_head_losses(), 2.0).unwrap();
        let out = supervised_loss(&probs, &targets, &losses).unwrap();
        let f = |z: &[Vec<ClassMap>]| {
            let p: Vec<Vec<ClassMap>> = z.iter().map(|h| h.iter().map(softmax_channels).collect()).collect();
            supervised_loss(&p, &targets, &losses).unwrap().report.l_seg
        };
        let h = 1e-5;
        for k in 0..4 {
            for s in 0..2 {
                for i in 0..16 {
                    let mut plus = logits.clone();
                    plus[k][s].data[i] += h;
                    let mut minus = logits.clone();
                    minus[k][s].data[i] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let g = out.logit_grads[k][s].data[i];
                    assert!((g - fd).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-3, "{g} vs {fd}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ramp_monotone_and_bounded(a in 0usize..1000, b in 0usize..1000, total in 1usize..1000) {
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            let (x, y) = (ramp_lambda(lo, total, 1.0), ramp_lambda(hi, total, 1.0));
            prop_assert!(x <= y);
            prop_assert!(x >= (-5.0f64).exp() - 1e-15 && y <= 1.0);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..300) {
            let (_, probs, targets) = toy(seed);
            for loss in head_losses(&default_head_losses(), 2.0).unwrap() {
                let v = loss.value(&probs[0], &targets).unwrap();
                prop_assert!(v.is_finite() && v >= -1e-9);
            }
        }
    }
}
