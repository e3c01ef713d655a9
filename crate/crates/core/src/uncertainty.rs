//! Joint uncertainty quantification over the teacher's head ensemble.
//!
//! Two confidence maps are combined: one from the spread of the heads
//! (ensemble variance) and one from the entropy of the pseudo-label. Both are
//! normalized by their sum over the volume. The product drives a reliability
//! map that weights the raw pseudo-labels.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ClassMap, ScalarMap, Shape3};
use crate::model::PredictionSet;
use crate::registry::Registry;

/// Guard for every normalizing sum.
pub const NORM_EPS: f64 = 1e-8;
const DISTRIBUTION_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("voxel {voxel} is not a probability distribution (sum {sum}, min {min})")]
    NotADistribution { voxel: usize, sum: f64, min: f64 },
    #[error("need at least 2 heads for ensemble variance, got {0}")]
    TooFewHeads(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("cannot write reliability slices: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Entropy,
    Variance,
    EntropyNorm,
    DistNorm,
    Juq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub kind: UncertaintyKind,
    pub map: ScalarMap,
}

/// Per-voxel weights in [0, 1]; `mode` names the strategy that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityMap {
    pub mode: String,
    pub map: ScalarMap,
}

/// Raw pseudo-label, its reliability-weighted version and the hard argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub probs: ClassMap,
    pub refined: ClassMap,
    pub hard: Vec<u8>,
}

fn check_distribution(probs: &ClassMap) -> Result<(), UncertaintyError> {
    for v in 0..probs.voxels() {
        let row = probs.voxel(v);
        let sum: f64 = row.iter().sum();
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > DISTRIBUTION_TOL || min < -DISTRIBUTION_TOL || !sum.is_finite() {
            return Err(UncertaintyError::NotADistribution { voxel: v, sum, min });
        }
    }
    Ok(())
}

/// `-sum_c p ln p` per voxel (natural log, `0 ln 0 = 0`).
pub fn entropy_map(probs: &ClassMap) -> Result<UncertaintyMap, UncertaintyError> {
    check_distribution(probs)?;
    let data = (0..probs.voxels())
        .map(|v| {
            probs
                .voxel(v)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    Ok(UncertaintyMap { kind: UncertaintyKind::Entropy, map: ScalarMap::new(probs.shape, data) })
}

/// Disagreement of the heads: population variance across heads for each
/// class, averaged over classes.
pub fn head_variance(pred: &PredictionSet) -> Result<UncertaintyMap, UncertaintyError> {
    let k = pred.head_probs.len();
    if k < 2 {
        return Err(UncertaintyError::TooFewHeads(k));
    }
    let first = &pred.head_probs[0];
    for h in &pred.head_probs[1..] {
        if !h.same_layout(first) {
            return Err(UncertaintyError::ShapeMismatch(first.shape, h.shape));
        }
    }
    let c = first.channels;
    let data = (0..first.voxels())
        .map(|v| {
            let mut total = 0.0;
            for class in 0..c {
                let vals = pred.head_probs.iter().map(|h| h.voxel(v)[class]);
                let mean = vals.clone().sum::<f64>() / k as f64;
                total += vals.map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
            }
            total / c as f64
        })
        .collect();
    Ok(UncertaintyMap { kind: UncertaintyKind::Variance, map: ScalarMap::new(first.shape, data) })
}

/// `exp(-Var_p / (sum Var + eps))`.
pub fn dist_uncertainty_norm(pred: &PredictionSet) -> Result<UncertaintyMap, UncertaintyError> {
    let var = head_variance(pred)?.map;
    let total = var.sum() + NORM_EPS;
    let data = var.data.iter().map(|&x| (-x / total).exp()).collect();
    Ok(UncertaintyMap { kind: UncertaintyKind::DistNorm, map: ScalarMap::new(var.shape, data) })
}

/// `1 - e_p / (sum e + eps)`; all ones when the entropy sums to zero.
pub fn entropy_norm(e: &UncertaintyMap) -> UncertaintyMap {
    let total = e.map.sum();
    let data = if total <= 0.0 {
        vec![1.0; e.map.len()]
    } else {
        e.map.data.iter().map(|&x| (1.0 - x / (total + NORM_EPS)).clamp(0.0, 1.0)).collect()
    };
    UncertaintyMap { kind: UncertaintyKind::EntropyNorm, map: ScalarMap::new(e.map.shape, data) }
}

/// Voxelwise product of two normalized maps.
pub fn combine_juq(dist: &UncertaintyMap, ent: &UncertaintyMap) -> Result<UncertaintyMap, UncertaintyError> {
    if dist.map.shape != ent.map.shape {
        return Err(UncertaintyError::ShapeMismatch(dist.map.shape, ent.map.shape));
    }
    let data = dist.map.data.iter().zip(&ent.map.data).map(|(a, b)| a * b).collect();
    Ok(UncertaintyMap { kind: UncertaintyKind::Juq, map: ScalarMap::new(dist.map.shape, data) })
}

/// Joint map: ensemble-variance confidence times entropy confidence of the
/// pseudo-label probabilities `pl_probs`.
pub fn juq(pred: &PredictionSet, pl_probs: &ClassMap) -> Result<UncertaintyMap, UncertaintyError> {
    if pred.mean_probs.shape != pl_probs.shape {
        return Err(UncertaintyError::ShapeMismatch(pred.mean_probs.shape, pl_probs.shape));
    }
    let dist = dist_uncertainty_norm(pred)?;
    let ent = entropy_norm(&entropy_map(pl_probs)?);
    combine_juq(&dist, &ent)
}

/// Turns a nonnegative uncertainty-style map into voxel weights.
pub trait ReliabilityStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn reliability(&self, j: &ScalarMap) -> ScalarMap;
}

/// `(1/N) * (1 - j_p / (sum j + eps))` with `N` the voxel count.
pub struct VerbatimReliability;

impl ReliabilityStrategy for VerbatimReliability {
    fn name(&self) -> &'static str {
        "verbatim"
    }

    fn reliability(&self, j: &ScalarMap) -> ScalarMap {
        let n = j.len() as f64;
        let total = j.sum() + NORM_EPS;
        ScalarMap::new(j.shape, j.data.iter().map(|&x| ((1.0 - x / total) / n).clamp(0.0, 1.0)).collect())
    }
}

/// `1 - (j_p - min) / (max - min + eps)`.
pub struct MinMaxReliability;

impl ReliabilityStrategy for MinMaxReliability {
    fn name(&self) -> &'static str {
        "minmax"
    }

    fn reliability(&self, j: &ScalarMap) -> ScalarMap {
        let (lo, hi) = j.min_max();
        let range = hi - lo + NORM_EPS;
        ScalarMap::new(j.shape, j.data.iter().map(|&x| (1.0 - (x - lo) / range).clamp(0.0, 1.0)).collect())
    }
}

pub fn reliability_registry() -> Registry<dyn ReliabilityStrategy> {
    let mut reg: Registry<dyn ReliabilityStrategy> = Registry::new("reliability mode");
    reg.register("verbatim", Arc::new(VerbatimReliability));
    reg.register("minmax", Arc::new(MinMaxReliability));
    reg
}

pub fn reliability_map(j: &UncertaintyMap, strategy: &dyn ReliabilityStrategy) -> ReliabilityMap {
    ReliabilityMap { mode: strategy.name().to_string(), map: strategy.reliability(&j.map) }
}

/// `refined = r * probs` per voxel; `hard` is its argmax (lowest class wins ties).
pub fn refine_pseudo_labels(pl_probs: &ClassMap, r: &ReliabilityMap) -> Result<PseudoLabel, UncertaintyError> {
    if pl_probs.shape != r.map.shape {
        return Err(UncertaintyError::ShapeMismatch(pl_probs.shape, r.map.shape));
    }
    let c = pl_probs.channels;
    let mut refined = pl_probs.clone();
    for (v, &w) in r.map.data.iter().enumerate() {
        for x in &mut refined.data[v * c..(v + 1) * c] {
            *x *= w;
        }
    }
    let hard = refined.argmax();
    Ok(PseudoLabel { probs: pl_probs.clone(), refined, hard })
}

/// Writes one grayscale PNG per slice along `axis`. Values are scaled to
/// [0, 255] with the min/max of the whole volume so slices are comparable.
pub fn export_reliability_slices(
    map: &ScalarMap,
    axis: usize,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, UncertaintyError> {
    if axis > 2 {
        return Err(UncertaintyError::Export(format!("axis {axis} out of range")));
    }
    std::fs::create_dir_all(dir).map_err(|e| UncertaintyError::Export(e.to_string()))?;
    let (lo, hi) = map.min_max();
    let scale = |x: f64| -> u8 {
        if hi > lo {
            (((x - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        } else if hi > 0.0 {
            255
        } else {
            0
        }
    };
    let s = map.shape;
    // Remaining axes in order form (rows, cols) of each image.
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut paths = Vec::with_capacity(s[axis]);
    for k in 0..s[axis] {
        let mut img = image::GrayImage::new(s[ca] as u32, s[ra] as u32);
        for r in 0..s[ra] {
            for c in 0..s[ca] {
                let mut p = [0; 3];
                p[axis] = k;
                p[ra] = r;
                p[ca] = c;
                let v = map.data[crate::grid::flat_index(s, p[0], p[1], p[2])];
                img.put_pixel(c as u32, r as u32, image::Luma([scale(v)]));
            }
        }
        let path = dir.join(format!("{prefix}_{k:03}.png"));
        img.save(&path).map_err(|e| UncertaintyError::Export(e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn probs(shape: Shape3, rows: &[[f64; 2]]) -> ClassMap {
        ClassMap::new(shape, 2, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    fn scalar(data: Vec<f64>) -> UncertaintyMap {
        let n = data.len();
        UncertaintyMap { kind: UncertaintyKind::Juq, map: ScalarMap::new([1, 1, n], data) }
    }

    #[test]
    fn entropy_examples() {
        let e = entropy_map(&probs([1, 1, 3], &[[0.5, 0.5], [1.0, 0.0], [0.9, 0.1]])).unwrap();
        assert_abs_diff_eq!(e.map.data[0], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(e.map.data[1], 0.0);
        assert_abs_diff_eq!(e.map.data[2], 0.325083, epsilon = 1e-6);
        assert!(matches!(
            entropy_map(&probs([1, 1, 1], &[[0.7, 0.7]])),
            Err(UncertaintyError::NotADistribution { .. })
        ));
    }

    fn pred_from_heads(heads: Vec<ClassMap>) -> PredictionSet {
        PredictionSet::from_heads(heads)
    }

    #[test]
    fn dist_norm_examples() {
        let h = probs([1, 1, 2], &[[0.3, 0.7], [0.6, 0.4]]);
        let same = pred_from_heads(vec![h.clone(); 4]);
        assert!(dist_uncertainty_norm(&same).unwrap().map.data.iter().all(|&x| x == 1.0));

        // Var = (1, 0): heads (0.5 +- 1) on voxel 0 would leave the simplex, so
        // feed the variance formula through a two-voxel map with ratio 1:0.
        let a = probs([1, 1, 2], &[[0.0, 1.0], [0.5, 0.5]]);
        let b = probs([1, 1, 2], &[[1.0, 0.0], [0.5, 0.5]]);
        let pred = pred_from_heads(vec![a.clone(), b.clone(), a, b]);
        let d = dist_uncertainty_norm(&pred).unwrap().map.data;
        assert_abs_diff_eq!(d[0], (-1.0f64).exp(), epsilon = 1e-7);
        assert_abs_diff_eq!(d[1], 1.0, epsilon = 1e-12);

        let one = pred_from_heads(vec![h]);
        assert!(matches!(dist_uncertainty_norm(&one), Err(UncertaintyError::TooFewHeads(1))));
    }

    #[test]
    fn constant_variance_gives_exp_minus_inverse_n() {
        let n = 5;
        let a = ClassMap::new([1, 1, n], 2, [0.2, 0.8].repeat(n));
        let b = ClassMap::new([1, 1, n], 2, [0.6, 0.4].repeat(n));
        let pred = pred_from_heads(vec![a.clone(), b.clone(), a, b]);
        for &x in &dist_uncertainty_norm(&pred).unwrap().map.data {
            assert_abs_diff_eq!(x, (-1.0 / n as f64).exp(), epsilon = 1e-7);
        }
    }

    #[test]
    fn entropy_norm_examples() {
        let e = UncertaintyMap { kind: UncertaintyKind::Entropy, map: ScalarMap::new([1, 1, 2], vec![2f64.ln(), 0.0]) };
        let n = entropy_norm(&e).map.data;
        assert_abs_diff_eq!(n[0], 0.0, epsilon = 1e-7);
        assert_eq!(n[1], 1.0);
        let zero = UncertaintyMap { kind: UncertaintyKind::Entropy, map: ScalarMap::filled([2, 2, 2], 0.0) };
        assert!(entropy_norm(&zero).map.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn juq_identity_and_product() {
        let ones = UncertaintyMap { kind: UncertaintyKind::DistNorm, map: ScalarMap::filled([1, 1, 3], 1.0) };
        let other = UncertaintyMap { kind: UncertaintyKind::EntropyNorm, map: ScalarMap::new([1, 1, 3], vec![0.1, 0.5, 0.9]) };
        assert_eq!(combine_juq(&ones, &other).unwrap().map.data, other.map.data);
        let half = UncertaintyMap { kind: UncertaintyKind::DistNorm, map: ScalarMap::filled([1, 1, 1], 0.5) };
        assert_eq!(combine_juq(&half, &half).unwrap().map.data, vec![0.25]);
    }

    #[test]
    fn reliability_examples() {
        let r = reliability_map(&scalar(vec![1.0, 0.0]), &VerbatimReliability).map.data;
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(r[1], 0.5, epsilon = 1e-12);
        let flat = reliability_map(&scalar(vec![0.3; 4]), &MinMaxReliability).map.data;
        assert!(flat.iter().all(|&x| x == 1.0));
        let spread = reliability_map(&scalar(vec![0.2, 0.9, 0.5]), &MinMaxReliability).map;
        let (lo, hi) = spread.min_max();
        assert_abs_diff_eq!(lo, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn registry_names() {
        let reg = reliability_registry();
        assert_eq!(reg.names(), vec!["minmax", "verbatim"]);
        assert!(reg.get("no_such_mode").is_err());
    }

    #[test]
    fn refine_examples() {
        let p = probs([1, 1, 2], &[[0.6, 0.4], [0.2, 0.8]]);
        let ones = ReliabilityMap { mode: "x".into(), map: ScalarMap::filled([1, 1, 2], 1.0) };
        let pl = refine_pseudo_labels(&p, &ones).unwrap();
        assert_eq!(pl.refined, p);
        assert_eq!(pl.hard, vec![0, 1]);
        let half = ReliabilityMap { mode: "x".into(), map: ScalarMap::filled([1, 1, 2], 0.5) };
        let pl = refine_pseudo_labels(&p, &half).unwrap();
        assert_abs_diff_eq!(pl.refined.voxel(0)[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(pl.refined.voxel(0)[1], 0.2, epsilon = 1e-12);
        assert_eq!(pl.hard[0], 0);
    }

    #[test]
    fn slices_written() {
        let dir = tempfile::tempdir().unwrap();
        let map = ScalarMap::new([3, 4, 5], (0..60).map(|v| v as f64).collect());
        let paths = export_reliability_slices(&map, 2, dir.path(), "juq").unwrap();
        assert_eq!(paths.len(), 5);
        let img = image::open(&paths[0]).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        let last = image::open(&paths[4]).unwrap().to_luma8();
        assert_eq!(last.get_pixel(3, 2)[0], 255);
    }

    fn random_heads(c: usize, n: usize, seed: u64) -> Vec<ClassMap> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|_| {
                let mut data = Vec::with_capacity(n * c);
                for _ in 0..n {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    data.extend(raw.iter().map(|x| x / s));
                }
                ClassMap::new([1, 1, n], c, data)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn normalized_maps_in_unit_interval(seed in 0u64..500, c in 2usize..4, n in 1usize..30) {
            let pred = pred_from_heads(random_heads(c, n, seed));
            let e = entropy_map(&pred.mean_probs).unwrap();
            for &x in &e.map.data {
                prop_assert!(x >= 0.0 && x <= (c as f64).ln() + 1e-12);
            }
            let j = juq(&pred, &pred.mean_probs).unwrap();
            for m in [dist_uncertainty_norm(&pred).unwrap(), entropy_norm(&e), j.clone()] {
                for &x in &m.map.data {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
            for strat in [&VerbatimReliability as &dyn ReliabilityStrategy, &MinMaxReliability] {
                for &x in &reliability_map(&j, strat).map.data {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
        }

        #[test]
        fn hard_labels_ignore_uniform_scale(seed in 0u64..500, scale in 0.001f64..10.0) {
            let pred = pred_from_heads(random_heads(3, 20, seed));
            let j = juq(&pred, &pred.mean_probs).unwrap();
            let r = reliability_map(&j, &MinMaxReliability);
            let mut scaled = r.clone();
            scaled.map.data.iter_mut().for_each(|x| *x *= scale);
            let a = refine_pseudo_labels(&pred.mean_probs, &r).unwrap();
            let b = refine_pseudo_labels(&pred.mean_probs, &scaled).unwrap();
            // Voxels with zero reliability tie at class 0 either way.
            prop_assert_eq!(a.hard, b.hard);
        }

        #[test]
        fn more_disagreement_never_raises_dist_norm(seed in 0u64..300, bump in 0.0f64..0.4) {
            let mut heads = random_heads(2, 6, seed);
            heads.truncate(2);
            let before = dist_uncertainty_norm(&pred_from_heads(heads.clone())).unwrap().map.data[0];
            // Push the two heads apart on voxel 0.
            let p0 = heads[0].voxel(0)[0];
            let p1 = heads[1].voxel(0)[0];
            let (lo, hi) = if p0 <= p1 { (0, 1) } else { (1, 0) };
            let lo_v = (heads[lo].voxel(0)[0] - bump).max(0.0);
            let hi_v = (heads[hi].voxel(0)[0] + bump).min(1.0);
            heads[lo].voxel_mut(0).copy_from_slice(&[lo_v, 1.0 - lo_v]);
            heads[hi].voxel_mut(0).copy_from_slice(&[hi_v, 1.0 - hi_v]);
            let after = dist_uncertainty_norm(&pred_from_heads(heads)).unwrap().map.data[0];
            prop_assert!(after <= before + 1e-12);
        }
    }
}
