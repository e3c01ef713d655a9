//! Class prototypes by masked average pooling, two-stage fusion and
//! feature-to-prototype cosine similarity.
//!
//! Every forward operation has a matching backward so consistency losses can
//! push gradients into the prototype features of the student, both directly
//! through the similarity map and indirectly through the pooled prototypes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{softmax_backward, softmax_in_place, ClassMap};
use crate::uncertainty::{PseudoLabel, ReliabilityMap};

/// Denominator guard for weighted pooling and cosine similarity.
pub const PROTO_EPS: f64 = 1e-8;

/// Similarity assigned to classes without a valid prototype.
const INVALID_SIMILARITY: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum PrototypeError {
    #[error("no class has a valid prototype")]
    NoValidPrototypes,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// One vector per class; invalid classes hold zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub vectors: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

impl ClassPrototype {
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self { vectors: vec![vec![0.0; dim]; num_classes], valid: vec![false; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }
}

/// Unlabeled (`p_u`) and global (`p`) prototypes with the coefficients used.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrototypes {
    pub unlabeled: ClassPrototype,
    pub global: ClassPrototype,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_con: f64,
}

/// Cosine similarities per voxel and class, and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub data: ClassMap,
    pub probs: ClassMap,
}

/// Mean feature over the voxels where `mask` is set; `None` for an empty mask.
pub fn masked_average_pool(features: &ClassMap, mask: &[bool]) -> Option<Vec<f64>> {
    assert_eq!(mask.len(), features.voxels(), "mask length");
    let mut acc = vec![0.0; features.channels];
    let mut count = 0usize;
    for (v, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (a, x) in acc.iter_mut().zip(features.voxel(v)) {
            *a += x;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Some(acc)
}

/// One sample entering a prototype pool: its features, the hard class map
/// acting as mask and optional per-voxel weights.
#[derive(Debug, Clone, Copy)]
pub struct PoolSample<'a> {
    pub features: &'a ClassMap,
    pub hard: &'a [u8],
    pub weights: Option<&'a [f64]>,
}

impl PoolSample<'_> {
    fn check(&self) -> Result<(), PrototypeError> {
        let n = self.features.voxels();
        if self.hard.len() != n || self.weights.is_some_and(|w| w.len() != n) {
            return Err(PrototypeError::ShapeMismatch(format!(
                "features have {n} voxels, mask {} and weights {:?}",
                self.hard.len(),
                self.weights.map(<[f64]>::len)
            )));
        }
        Ok(())
    }

    /// Per-class weighted sums `(sum w f, sum w, count)`.
    fn class_sums(&self, num_classes: usize) -> Vec<(Vec<f64>, f64, usize)> {
        let dim = self.features.channels;
        let mut sums = vec![(vec![0.0; dim], 0.0, 0usize); num_classes];
        for (v, &c) in self.hard.iter().enumerate() {
            let Some(slot) = sums.get_mut(c as usize) else { continue };
            let w = self.weights.map_or(1.0, |w| w[v]);
            for (a, x) in slot.0.iter_mut().zip(self.features.voxel(v)) {
                *a += w * x;
            }
            slot.1 += w;
            slot.2 += 1;
        }
        sums
    }

    /// Denominator of the per-sample pool for a class.
    fn denominator(&self, weight_sum: f64, count: usize) -> f64 {
        match self.weights {
            None => count as f64,
            Some(_) => weight_sum + PROTO_EPS,
        }
    }
}

/// Pools every sample separately, then averages the per-sample vectors over
/// the samples where the class is present.
pub fn pool_prototypes(samples: &[PoolSample<'_>], num_classes: usize) -> Result<ClassPrototype, PrototypeError> {
    let dim = samples.first().map_or(num_classes, |s| s.features.channels);
    let mut out = ClassPrototype::empty(num_classes, dim);
    let mut present = vec![0usize; num_classes];
    for s in samples {
        s.check()?;
        if s.features.channels != dim {
            return Err(PrototypeError::ShapeMismatch("feature widths differ".into()));
        }
        for (c, (sum, wsum, count)) in s.class_sums(num_classes).into_iter().enumerate() {
            if count == 0 {
                continue;
            }
            let denom = s.denominator(wsum, count);
            for (o, x) in out.vectors[c].iter_mut().zip(&sum) {
                *o += x / denom;
            }
            present[c] += 1;
        }
    }
    for c in 0..num_classes {
        if present[c] > 0 {
            out.valid[c] = true;
            out.vectors[c].iter_mut().for_each(|x| *x /= present[c] as f64);
        }
    }
    Ok(out)
}

/// Gradient of [`pool_prototypes`] with respect to each sample's features.
pub fn pool_prototypes_backward(samples: &[PoolSample<'_>], grad: &[Vec<f64>]) -> Vec<ClassMap> {
    let num_classes = grad.len();
    let mut present = vec![0usize; num_classes];
    let all_sums: Vec<_> = samples.iter().map(|s| s.class_sums(num_classes)).collect();
    for sums in &all_sums {
        for (c, s) in sums.iter().enumerate() {
            present[c] += (s.2 > 0) as usize;
        }
    }
    samples
        .iter()
        .zip(&all_sums)
        .map(|(s, sums)| {
            let scale: Vec<f64> = sums
                .iter()
                .enumerate()
                .map(|(c, &(_, wsum, count))| {
                    if count == 0 {
                        0.0
                    } else {
                        1.0 / (s.denominator(wsum, count) * present[c] as f64)
                    }
                })
                .collect();
            let mut g = ClassMap::zeros(s.features.shape, s.features.channels);
            for (v, &c) in s.hard.iter().enumerate() {
                let c = c as usize;
                if c >= num_classes {
                    continue;
                }
                let k = scale[c] * s.weights.map_or(1.0, |w| w[v]);
                for (o, x) in g.voxel_mut(v).iter_mut().zip(&grad[c]) {
                    *o = k * x;
                }
            }
            g
        })
        .collect()
}

/// Labeled prototypes `p_l` from ground-truth (or mixed) label maps.
pub fn labeled_prototypes(
    features: &[ClassMap],
    labels: &[&[u8]],
    num_classes: usize,
) -> Result<ClassPrototype, PrototypeError> {
    if features.len() != labels.len() {
        return Err(PrototypeError::ShapeMismatch(format!("{} feature maps, {} labels", features.len(), labels.len())));
    }
    let samples: Vec<_> =
        features.iter().zip(labels).map(|(f, l)| PoolSample { features: f, hard: l, weights: None }).collect();
    pool_prototypes(&samples, num_classes)
}

/// Reliability-weighted prototypes of one unlabeled stream, masked by the
/// hard refined pseudo-labels.
pub fn unlabeled_prototypes(
    features: &[ClassMap],
    pl: &[PseudoLabel],
    r: &[ReliabilityMap],
) -> Result<ClassPrototype, PrototypeError> {
    if features.len() != pl.len() || pl.len() != r.len() {
        return Err(PrototypeError::ShapeMismatch(format!(
            "{} feature maps, {} pseudo-labels, {} reliability maps",
            features.len(),
            pl.len(),
            r.len()
        )));
    }
    let num_classes = pl.first().map_or(0, |p| p.probs.channels);
    let samples: Vec<_> = features
        .iter()
        .zip(pl)
        .zip(r)
        .map(|((f, p), r)| PoolSample { features: f, hard: &p.hard, weights: Some(&r.map.data) })
        .collect();
    pool_prototypes(&samples, num_classes)
}

/// Per-class coefficients applied to the two inputs of a fusion.
pub type FusionCoefficients = Vec<[f64; 2]>;

/// `wa * a + wb * b` per class; a class valid on one side only takes that side
/// unscaled.
fn fuse_pair(a: &ClassPrototype, b: &ClassPrototype, wa: f64, wb: f64) -> (ClassPrototype, FusionCoefficients) {
    assert_eq!(a.num_classes(), b.num_classes(), "prototype class counts");
    let dim = a.dim().max(b.dim());
    let mut out = ClassPrototype::empty(a.num_classes(), dim);
    let mut coef = vec![[0.0; 2]; a.num_classes()];
    for c in 0..a.num_classes() {
        coef[c] = match (a.valid[c], b.valid[c]) {
            (true, true) => [wa, wb],
            (true, false) => [1.0, 0.0],
            (false, true) => [0.0, 1.0],
            (false, false) => continue,
        };
        out.valid[c] = true;
        for (i, o) in out.vectors[c].iter_mut().enumerate() {
            let x = a.vectors[c].get(i).copied().unwrap_or(0.0);
            let y = b.vectors[c].get(i).copied().unwrap_or(0.0);
            *o = coef[c][0] * x + coef[c][1] * y;
        }
    }
    (out, coef)
}

/// Splits a gradient on a fused prototype into gradients on its two inputs.
pub fn fuse_backward(coef: &FusionCoefficients, grad: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let side = |k: usize| grad.iter().zip(coef).map(|(g, w)| g.iter().map(|x| w[k] * x).collect()).collect();
    (side(0), side(1))
}

/// `p_u = lambda1 * p_u1 + lambda2 * p_u2`.
pub fn fuse_unlabeled(p_u1: &ClassPrototype, p_u2: &ClassPrototype, lambda1: f64, lambda2: f64) -> ClassPrototype {
    fuse_unlabeled_with_coefficients(p_u1, p_u2, lambda1, lambda2).0
}

pub fn fuse_unlabeled_with_coefficients(
    p_u1: &ClassPrototype,
    p_u2: &ClassPrototype,
    lambda1: f64,
    lambda2: f64,
) -> (ClassPrototype, FusionCoefficients) {
    fuse_pair(p_u1, p_u2, lambda1, lambda2)
}

/// `p = ((2 - lambda_con) p_l + lambda_con p_u) / 2`.
pub fn fuse_global(p_l: &ClassPrototype, p_u: &ClassPrototype, lambda_con: f64) -> ClassPrototype {
    fuse_global_with_coefficients(p_l, p_u, lambda_con).0
}

pub fn fuse_global_with_coefficients(
    p_l: &ClassPrototype,
    p_u: &ClassPrototype,
    lambda_con: f64,
) -> (ClassPrototype, FusionCoefficients) {
    fuse_pair(p_l, p_u, (2.0 - lambda_con) / 2.0, lambda_con / 2.0)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of every voxel feature to every valid prototype,
/// softmaxed over classes at temperature `tau`.
pub fn similarity_map(protos: &ClassPrototype, features: &ClassMap, tau: f64) -> Result<SimilarityMap, PrototypeError> {
    if !(tau > 0.0) {
        return Err(PrototypeError::BadTemperature(tau));
    }
    if !protos.any_valid() {
        return Err(PrototypeError::NoValidPrototypes);
    }
    if protos.dim() != features.channels {
        return Err(PrototypeError::ShapeMismatch(format!(
            "prototype dim {} vs feature channels {}",
            protos.dim(),
            features.channels
        )));
    }
    let c = protos.num_classes();
    let qn: Vec<f64> = protos.vectors.iter().map(|q| norm(q)).collect();
    let mut data = ClassMap::zeros(features.shape, c);
    let mut probs = ClassMap::zeros(features.shape, c);
    for v in 0..features.voxels() {
        let f = features.voxel(v);
        let nf = norm(f);
        let row = data.voxel_mut(v);
        for k in 0..c {
            row[k] = if protos.valid[k] {
                (dot(f, &protos.vectors[k]) / (nf * qn[k] + PROTO_EPS)).clamp(-1.0, 1.0)
            } else {
                INVALID_SIMILARITY
            };
        }
        let p = probs.voxel_mut(v);
        for k in 0..c {
            p[k] = data.voxel(v)[k] / tau;
        }
        softmax_in_place(p);
    }
    Ok(SimilarityMap { data, probs })
}

/// Pulls a gradient on `sim.probs` back to the features and the prototypes.
pub fn similarity_backward(
    protos: &ClassPrototype,
    features: &ClassMap,
    sim: &SimilarityMap,
    grad_probs: &ClassMap,
    tau: f64,
) -> (ClassMap, Vec<Vec<f64>>) {
    let dz = softmax_backward(&sim.probs, grad_probs);
    let c = protos.num_classes();
    let dim = features.channels;
    let qn: Vec<f64> = protos.vectors.iter().map(|q| norm(q)).collect();
    let mut gf = ClassMap::zeros(features.shape, dim);
    let mut gq = vec![vec![0.0; dim]; c];
    for v in 0..features.voxels() {
        let f = features.voxel(v);
        let nf = norm(f);
        let g = dz.voxel(v);
        for k in (0..c).filter(|&k| protos.valid[k]) {
            let ds = g[k] / tau;
            if ds == 0.0 {
                continue;
            }
            let q = &protos.vectors[k];
            let nq = qn[k];
            let denom = nf * nq + PROTO_EPS;
            let a = dot(f, q);
            let df = gf.voxel_mut(v);
            for i in 0..dim {
                let mut d = q[i] / denom;
                if nf > 0.0 {
                    d -= a * nq * f[i] / (nf * denom * denom);
                }
                df[i] += ds * d;
                let mut e = f[i] / denom;
                if nq > 0.0 {
                    e -= a * nf * q[i] / (nq * denom * denom);
                }
                gq[k][i] += ds * e;
            }
        }
    }
    (gf, gq)
}
