//! Segmentation losses on batches of class-probability maps, each with its
//! gradient with respect to the probabilities.
//!
//! Targets are per-voxel class weights: one-hot for ground truth, possibly
//! sub-stochastic for reliability-weighted pseudo-labels. Voxel means run over
//! every voxel of every sample in the batch; Dice and IoU sums run over the
//! whole batch per class.

use std::sync::Arc;

use super::LossError;
use crate::grid::ClassMap;
use crate::registry::Registry;

/// Guard inside `ln(p + eps)`.
pub const LOG_EPS: f64 = 1e-8;
/// Smoothing term of the overlap losses.
pub const SMOOTH: f64 = 1e-5;

/// A loss value and its gradient with respect to each probability map.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<ClassMap>,
}

pub trait SegLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn value_and_grad(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<LossGrad, LossError>;

    fn value(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<f64, LossError> {
        Ok(self.value_and_grad(probs, targets)?.value)
    }
}

fn check(probs: &[ClassMap], targets: &[ClassMap]) -> Result<usize, LossError> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!("{} prediction maps, {} targets", probs.len(), targets.len())));
    }
    let c = probs[0].channels;
    for (p, t) in probs.iter().zip(targets) {
        if !p.same_layout(t) || p.channels != c {
            return Err(LossError::ShapeMismatch(format!(
                "prediction {:?}x{} vs target {:?}x{}",
                p.shape, p.channels, t.shape, t.channels
            )));
        }
    }
    Ok(probs.iter().map(ClassMap::voxels).sum())
}

fn zeros_like(maps: &[ClassMap]) -> Vec<ClassMap> {
    maps.iter().map(|m| ClassMap::zeros(m.shape, m.channels)).collect()
}

/// Mean over voxels of `-sum_c t_c ln(p_c + eps)`.
pub struct CrossEntropy;

impl SegLoss for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn value_and_grad(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<LossGrad, LossError> {
        let n = check(probs, targets)? as f64;
        let mut grad = zeros_like(probs);
        let mut total = 0.0;
        for ((p, t), g) in probs.iter().zip(targets).zip(&mut grad) {
            for ((&p, &t), g) in p.data.iter().zip(&t.data).zip(&mut g.data) {
                if t != 0.0 {
                    total -= t * (p + LOG_EPS).ln();
                    *g = -t / ((p + LOG_EPS) * n);
                }
            }
        }
        Ok(LossGrad { value: total / n, grad })
    }
}

/// Soft focal loss `-sum_c t_c (1 - p_c)^gamma ln(p_c + eps)`, voxel mean.
pub struct Focal {
    pub gamma: f64,
}

impl SegLoss for Focal {
    fn name(&self) -> &'static str {
        "focal"
    }

    fn value_and_grad(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<LossGrad, LossError> {
        let n = check(probs, targets)? as f64;
        let gamma = self.gamma;
        let mut grad = zeros_like(probs);
        let mut total = 0.0;
        for ((p, t), g) in probs.iter().zip(targets).zip(&mut grad) {
            for ((&p, &t), g) in p.data.iter().zip(&t.data).zip(&mut g.data) {
                if t == 0.0 {
                    continue;
                }
                let q = (1.0 - p).max(0.0);
                let log = (p + LOG_EPS).ln();
                total -= t * q.powf(gamma) * log;
                // d/dp of q^gamma is -gamma q^(gamma-1); zero at gamma = 0.
                let dmod = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
                *g = -t * (dmod * log + q.powf(gamma) / (p + LOG_EPS)) / n;
            }
        }
        Ok(LossGrad { value: total / n, grad })
    }
}

/// Per-class batch sums `(sum p t, sum p, sum t)`.
fn overlap_sums(probs: &[ClassMap], targets: &[ClassMap]) -> Vec<[f64; 3]> {
    let c = probs[0].channels;
    let mut sums = vec![[0.0; 3]; c];
    for (p, t) in probs.iter().zip(targets) {
        for (i, (&p, &t)) in p.data.iter().zip(&t.data).enumerate() {
            let s = &mut sums[i % c];
            s[0] += p * t;
            s[1] += p;
            s[2] += t;
        }
    }
    sums
}

/// `1 - mean_c (2 sum p t + s) / (sum p + sum t + s)`.
pub struct SoftDice;

impl SegLoss for SoftDice {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn value_and_grad(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<LossGrad, LossError> {
        check(probs, targets)?;
        let sums = overlap_sums(probs, targets);
        let c = sums.len() as f64;
        let score: f64 = sums.iter().map(|[i, p, t]| (2.0 * i + SMOOTH) / (p + t + SMOOTH)).sum::<f64>() / c;
        let mut grad = zeros_like(probs);
        let k = sums.len();
        for (t, g) in targets.iter().zip(&mut grad) {
            for (idx, (&t, g)) in t.data.iter().zip(&mut g.data).enumerate() {
                let [i, p, tt] = sums[idx % k];
                let den = p + tt + SMOOTH;
                *g = -(2.0 * t * den - (2.0 * i + SMOOTH)) / (den * den) / c;
            }
        }
        Ok(LossGrad { value: 1.0 - score, grad })
    }
}

/// `1 - mean_c (sum p t + s) / (sum p + sum t - sum p t + s)`.
pub struct SoftIou;

impl SegLoss for SoftIou {
    fn name(&self) -> &'static str {
        "iou"
    }

    fn value_and_grad(&self, probs: &[ClassMap], targets: &[ClassMap]) -> Result<LossGrad, LossError> {
        check(probs, targets)?;
        let sums = overlap_sums(probs, targets);
        let c = sums.len() as f64;
        let score: f64 = sums.iter().map(|[i, p, t]| (i + SMOOTH) / (p + t - i + SMOOTH)).sum::<f64>() / c;
        let mut grad = zeros_like(probs);
        let k = sums.len();
        for (t, g) in targets.iter().zip(&mut grad) {
            for (idx, (&t, g)) in t.data.iter().zip(&mut g.data).enumerate() {
                let [i, p, tt] = sums[idx % k];
                let u = p + tt - i + SMOOTH;
                *g = -(t * u - (i + SMOOTH) * (1.0 - t)) / (u * u) / c;
            }
        }
        Ok(LossGrad { value: 1.0 - score, grad })
    }
}

/// Registry of the four head losses; `focal_gamma` parameterizes `focal`.
pub fn seg_loss_registry(focal_gamma: f64) -> Registry<dyn SegLoss> {
    let mut reg: Registry<dyn SegLoss> = Registry::new("segmentation loss");
    reg.register("ce", Arc::new(CrossEntropy));
    reg.register("dice", Arc::new(SoftDice));
    reg.register("focal", Arc::new(Focal { gamma: focal_gamma }));
    reg.register("iou", Arc::new(SoftIou));
    reg
}

pub fn ce_loss(probs: &[ClassMap], targets: &[ClassMap]) -> Result<f64, LossError> {
    CrossEntropy.value(probs, targets)
}

pub fn dice_loss(probs: &[ClassMap], targets: &[ClassMap]) -> Result<f64, LossError> {
    SoftDice.value(probs, targets)
}

pub fn focal_loss(probs: &[ClassMap], targets: &[ClassMap], gamma: f64) -> Result<f64, LossError> {
    Focal { gamma }.value(probs, targets)
}

pub fn iou_loss(probs: &[ClassMap], targets: &[ClassMap]) -> Result<f64, LossError> {
    SoftIou.value(probs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{softmax_backward, softmax_channels};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(labels: &[u8], c: usize) -> ClassMap {
        ClassMap::one_hot(labels, [1, 1, labels.len()], c)
    }

    #[test]
    fn ce_examples() {
        let t = one_hot(&[0, 1], 2);
        assert!(ce_loss(&[t.clone()], &[t.clone()]).unwrap() <= 1e-6);
        let uniform = ClassMap::new([1, 1, 2], 2, vec![0.5; 4]);
        assert_abs_diff_eq!(ce_loss(&[uniform.clone()], &[t]).unwrap(), 2f64.ln(), epsilon = 1e-7);
        let zero = ClassMap::zeros([1, 1, 2], 2);
        assert_eq!(ce_loss(&[uniform], &[zero]).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let t = one_hot(&[0, 1, 1, 0, 2], 3);
        for loss in [&CrossEntropy as &dyn SegLoss, &SoftDice, &Focal { gamma: 2.0 }, &SoftIou] {
            assert!(loss.value(&[t.clone()], &[t.clone()]).unwrap() <= 1e-4, "{}", loss.name());
        }
    }

    #[test]
    fn focal_gamma_zero_is_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = ClassMap::new([2, 2, 2], 3, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let p = softmax_channels(&logits);
        let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3)).collect();
        let t = ClassMap::one_hot(&labels, [2, 2, 2], 3);
        let a = focal_loss(&[p.clone()], &[t.clone()], 0.0).unwrap();
        let b = ce_loss(&[p], &[t]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ClassMap::zeros([1, 1, 2], 2);
        let b = ClassMap::zeros([1, 1, 3], 2);
        assert!(matches!(ce_loss(&[a.clone()], &[b]), Err(LossError::ShapeMismatch(_))));
        assert!(matches!(dice_loss(&[a], &[]), Err(LossError::ShapeMismatch(_))));
    }

    #[test]
    fn registry_has_four_losses() {
        assert_eq!(seg_loss_registry(2.0).names(), vec!["ce", "dice", "focal", "iou"]);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = [2, 2, 2];
        for soft in [false, true] {
            let logits: Vec<ClassMap> =
                (0..2).map(|_| ClassMap::new(shape, 2, (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect();
            let targets: Vec<ClassMap> = (0..2)
                .map(|_| {
                    let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2)).collect();
                    let mut t = ClassMap::one_hot(&labels, shape, 2);
                    if soft {
                        t.data.iter_mut().for_each(|x| *x *= rng.gen_range(0.0..1.0));
                    }
                    t
                })
                .collect();
            for loss in [&CrossEntropy as &dyn SegLoss, &SoftDice, &Focal { gamma: 2.0 }, &SoftIou] {
                let f = |z: &[ClassMap]| {
                    let p: Vec<_> = z.iter().map(softmax_channels).collect();
                    loss.value(&p, &targets).unwrap()
                };
                let probs: Vec<_> = logits.iter().map(softmax_channels).collect();
                let lg = loss.value_and_grad(&probs, &targets).unwrap();
                let h = 1e-5;
                for s in 0..2 {
                    let dz = softmax_backward(&probs[s], &lg.grad[s]);
                    for i in 0..16 {
                        let mut plus = logits.clone();
                        plus[s].data[i] += h;
                        let mut minus = logits.clone();
                        minus[s].data[i] -= h;
                        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                        let rel = (dz.data[i] - fd).abs() / fd.abs().max(dz.data[i].abs()).max(1e-6);
                        assert!(rel < 1e-3, "{} soft={soft} grad {} vs fd {}", loss.name(), dz.data[i], fd);
                    }
                }
            }
        }
    }
}
