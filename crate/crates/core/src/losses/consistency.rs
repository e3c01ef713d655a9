//! Prototype consistency losses with gradients into the prototype features.
//!
//! A [`ConsistencyPlan`] describes which samples of the student batch feed
//! which prototype pool and which (averaged) feature maps are compared with
//! which targets. The trainer's combination strategies only build plans; the
//! arithmetic lives here.

use super::seg::{CrossEntropy, SegLoss};
use super::LossError;
use crate::grid::ClassMap;
use crate::prototypes::{
    fuse_backward, fuse_global_with_coefficients, fuse_unlabeled_with_coefficients, pool_prototypes,
    pool_prototypes_backward, similarity_backward, similarity_map, ClassPrototype, FusedPrototypes, PoolSample,
    SimilarityMap,
};

/// One batch sample contributing to a prototype pool.
#[derive(Debug, Clone)]
pub struct PoolMember {
    pub sample: usize,
    pub hard: Vec<u8>,
    /// Per-voxel weights; `None` is plain masked averaging.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct PoolSpec {
    pub members: Vec<PoolMember>,
}

/// One compared map: the mean of the features of `sources` against `target`.
#[derive(Debug, Clone)]
pub struct TermItem {
    pub sources: Vec<usize>,
    pub target: ClassMap,
}

/// A cross-entropy term averaged over all voxels of all its items.
#[derive(Debug, Clone, Default)]
pub struct TermSpec {
    pub items: Vec<TermItem>,
}

#[derive(Debug, Clone)]
pub struct ConsistencyPlan {
    pub num_classes: usize,
    pub labeled: PoolSpec,
    /// Zero, one or two unlabeled pools. Two pools are fused with
    /// `lambda1`/`lambda2`; a single pool is used as is.
    pub unlabeled: Vec<PoolSpec>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_con: f64,
    pub tau: f64,
    pub lc: TermSpec,
    pub uc1: TermSpec,
    /// Summed into `l_uc2`.
    pub uc2: Vec<TermSpec>,
}

#[derive(Debug, Clone)]
pub struct ConsistencyOutput {
    pub l_lc: f64,
    pub l_uc1: f64,
    pub l_uc2: f64,
    pub labeled: ClassPrototype,
    pub unlabeled_streams: Vec<ClassPrototype>,
    pub fused: FusedPrototypes,
    /// Gradient of `l_lc + lambda_con (l_uc1 + l_uc2)` per batch sample.
    pub feature_grads: Vec<ClassMap>,
}

fn samples<'a>(pool: &'a PoolSpec, features: &'a [ClassMap]) -> Vec<PoolSample<'a>> {
    pool.members
        .iter()
        .map(|m| PoolSample { features: &features[m.sample], hard: &m.hard, weights: m.weights.as_deref() })
        .collect()
}

fn mean_features(features: &[ClassMap], sources: &[usize]) -> Result<ClassMap, LossError> {
    let first = features
        .get(sources[0])
        .ok_or_else(|| LossError::ShapeMismatch(format!("sample {} outside batch", sources[0])))?;
    let mut out = ClassMap::zeros(first.shape, first.channels);
    for &s in sources {
        let f = features.get(s).ok_or_else(|| LossError::ShapeMismatch(format!("sample {s} outside batch")))?;
        if !f.same_layout(first) {
            return Err(LossError::ShapeMismatch("feature maps differ in layout".into()));
        }
        for (o, x) in out.data.iter_mut().zip(&f.data) {
            *o += x;
        }
    }
    let k = sources.len() as f64;
    out.data.iter_mut().for_each(|x| *x /= k);
    Ok(out)
}

/// Evaluates one term; when `weight` is nonzero its gradient is added to
/// `feature_grads` and `proto_grad`.
fn run_term(
    term: &TermSpec,
    protos: &ClassPrototype,
    features: &[ClassMap],
    tau: f64,
    weight: f64,
    feature_grads: &mut [ClassMap],
    proto_grad: &mut [Vec<f64>],
) -> Result<f64, LossError> {
    if term.items.is_empty() {
        return Ok(0.0);
    }
    let mut means = Vec::with_capacity(term.items.len());
    let mut sims: Vec<SimilarityMap> = Vec::with_capacity(term.items.len());
    for item in &term.items {
        let f = mean_features(features, &item.sources)?;
        sims.push(similarity_map(protos, &f, tau)?);
        means.push(f);
    }
    let probs: Vec<ClassMap> = sims.iter().map(|s| s.probs.clone()).collect();
    let targets: Vec<ClassMap> = term.items.iter().map(|i| i.target.clone()).collect();
    let lg = CrossEntropy.value_and_grad(&probs, &targets)?;
    if weight != 0.0 {
        for (((item, f), sim), g) in term.items.iter().zip(&means).zip(&sims).zip(&lg.grad) {
            let (gf, gq) = similarity_backward(protos, f, sim, g, tau);
            let share = weight / item.sources.len() as f64;
            for &s in &item.sources {
                for (o, x) in feature_grads[s].data.iter_mut().zip(&gf.data) {
                    *o += share * x;
                }
            }
            for (pg, q) in proto_grad.iter_mut().zip(&gq) {
                for (o, x) in pg.iter_mut().zip(q) {
                    *o += weight * x;
                }
            }
        }
    }
    Ok(lg.value)
}

fn add_pool_grads(pool: &PoolSpec, features: &[ClassMap], grad: &[Vec<f64>], feature_grads: &mut [ClassMap]) {
    let s = samples(pool, features);
    for (m, g) in pool.members.iter().zip(pool_prototypes_backward(&s, grad)) {
        for (o, x) in feature_grads[m.sample].data.iter_mut().zip(&g.data) {
            *o += x;
        }
    }
}

/// Builds all prototypes of `plan`, evaluates the three consistency losses and
/// backpropagates their weighted sum into `features`.
pub fn consistency_losses(features: &[ClassMap], plan: &ConsistencyPlan) -> Result<ConsistencyOutput, LossError> {
    let c = plan.num_classes;
    let dim = features.first().map_or(c, |f| f.channels);
    let labeled = pool_prototypes(&samples(&plan.labeled, features), c)?;
    let streams = plan
        .unlabeled
        .iter()
        .map(|p| pool_prototypes(&samples(p, features), c))
        .collect::<Result<Vec<_>, _>>()?;
    let (unlabeled, u_coef) = match streams.as_slice() {
        [] => (ClassPrototype::empty(c, dim), None),
        [one] => (one.clone(), None),
        [a, b] => {
            let (u, coef) = fuse_unlabeled_with_coefficients(a, b, plan.lambda1, plan.lambda2);
            (u, Some(coef))
        }
        _ => return Err(LossError::ShapeMismatch(format!("{} unlabeled pools; at most 2", streams.len()))),
    };
    let (global, g_coef) = fuse_global_with_coefficients(&labeled, &unlabeled, plan.lambda_con);

    let mut feature_grads: Vec<ClassMap> = features.iter().map(|f| ClassMap::zeros(f.shape, f.channels)).collect();
    let mut proto_grad = vec![vec![0.0; dim]; c];
    let l_lc = run_term(&plan.lc, &global, features, plan.tau, 1.0, &mut feature_grads, &mut proto_grad)?;
    let l_uc1 =
        run_term(&plan.uc1, &global, features, plan.tau, plan.lambda_con, &mut feature_grads, &mut proto_grad)?;
    let mut l_uc2 = 0.0;
    for term in &plan.uc2 {
        l_uc2 += run_term(term, &global, features, plan.tau, plan.lambda_con, &mut feature_grads, &mut proto_grad)?;
    }

    let (g_l, g_u) = fuse_backward(&g_coef, &proto_grad);
    add_pool_grads(&plan.labeled, features, &g_l, &mut feature_grads);
    match (plan.unlabeled.as_slice(), u_coef) {
        ([one], _) => add_pool_grads(one, features, &g_u, &mut feature_grads),
        ([a, b], Some(coef)) => {
            let (g1, g2) = fuse_backward(&coef, &g_u);
            add_pool_grads(a, features, &g1, &mut feature_grads);
            add_pool_grads(b, features, &g2, &mut feature_grads);
        }
        _ => {}
    }

    Ok(ConsistencyOutput {
        l_lc,
        l_uc1,
        l_uc2,
        labeled,
        unlabeled_streams: streams,
        fused: FusedPrototypes {
            unlabeled,
            global,
            lambda1: plan.lambda1,
            lambda2: plan.lambda2,
            lambda_con: plan.lambda_con,
        },
        feature_grads,
    })
}

/// The three consistency losses from precomputed similarity maps:
/// `l_lc = ce(sim_l, labels)`, `l_uc1 = ce(sim_u, pl)` and
/// `l_uc2 = ce(sim_u1, pl) + ce(sim_u2, pl)`.
pub fn consistency_terms(
    sim_l: &[SimilarityMap],
    sim_u: &[SimilarityMap],
    sim_u1: &[SimilarityMap],
    sim_u2: &[SimilarityMap],
    labels: &[ClassMap],
    refined_pl: &[ClassMap],
) -> Result<(f64, f64, f64), LossError> {
    let probs = |s: &[SimilarityMap]| s.iter().map(|m| m.probs.clone()).collect::<Vec<_>>();
    let l_lc = CrossEntropy.value(&probs(sim_l), labels)?;
    let l_uc1 = CrossEntropy.value(&probs(sim_u), refined_pl)?;
    let l_uc2 = CrossEntropy.value(&probs(sim_u1), refined_pl)? + CrossEntropy.value(&probs(sim_u2), refined_pl)?;
    Ok((l_lc, l_uc1, l_uc2))
}
