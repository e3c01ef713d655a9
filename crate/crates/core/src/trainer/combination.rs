//! How the original and augmented unlabeled streams feed prototype pooling
//! and the consistency terms. Each strategy turns the teacher's per-stream
//! uncertainty into a [`ConsistencyPlan`].

use std::sync::Arc;

use super::TrainError;
use crate::grid::ClassMap;
use crate::losses::{ConsistencyPlan, PoolMember, PoolSpec, TermItem, TermSpec};
use crate::model::PredictionSet;
use crate::registry::Registry;
use crate::uncertainty::{refine_pseudo_labels, PseudoLabel, ReliabilityMap, UncertaintyMap};

/// Teacher output for one unlabeled sample with its uncertainty products.
#[derive(Debug, Clone)]
pub struct TeacherStream {
    pub pred: PredictionSet,
    pub juq: UncertaintyMap,
    pub reliability: ReliabilityMap,
    /// Pseudo-label refined with this sample's own reliability map.
    pub pseudo: PseudoLabel,
}

/// Inputs of a plan. The student batch is laid out as the labeled samples,
/// then the original unlabeled samples (`u1`), then their augmented versions
/// (`u2`), with `u2[i]` built from `u1[i]`.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub num_classes: usize,
    pub patch: [usize; 3],
    pub labels: &'a [Vec<u8>],
    pub u1: &'a [TeacherStream],
    pub u2: &'a [TeacherStream],
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_con: f64,
    pub tau: f64,
}

impl PlanContext<'_> {
    fn u1_index(&self, i: usize) -> usize {
        self.labels.len() + i
    }

    fn u2_index(&self, i: usize) -> usize {
        self.labels.len() + self.u1.len() + i
    }

    fn base_plan(&self) -> ConsistencyPlan {
        let shape = self.patch;
        let labeled = PoolSpec {
            members: self
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| PoolMember { sample: i, hard: l.clone(), weights: None })
                .collect(),
        };
        let lc = TermSpec {
            items: self
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| TermItem { sources: vec![i], target: ClassMap::one_hot(l, shape, self.num_classes) })
                .collect(),
        };
        ConsistencyPlan {
            num_classes: self.num_classes,
            labeled,
            unlabeled: Vec::new(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_con: self.lambda_con,
            tau: self.tau,
            lc,
            uc1: TermSpec::default(),
            uc2: Vec::new(),
        }
    }
}

fn member(sample: usize, pl: &PseudoLabel, r: &ReliabilityMap) -> PoolMember {
    PoolMember { sample, hard: pl.hard.clone(), weights: Some(r.map.data.clone()) }
}

/// Consistency terms shared by the two-stream strategies: the averaged
/// features of both streams and each stream alone, all against the augmented
/// stream's refined pseudo-labels `targets`.
fn two_stream_terms(ctx: &PlanContext<'_>, plan: &mut ConsistencyPlan, targets: &[ClassMap]) {
    let n = ctx.u1.len();
    plan.uc1 = TermSpec {
        items: (0..n)
            .map(|i| TermItem { sources: vec![ctx.u1_index(i), ctx.u2_index(i)], target: targets[i].clone() })
            .collect(),
    };
    let single = |index: &dyn Fn(usize) -> usize| TermSpec {
        items: (0..n).map(|i| TermItem { sources: vec![index(i)], target: targets[i].clone() }).collect(),
    };
    plan.uc2 = vec![single(&|i| ctx.u1_index(i)), single(&|i| ctx.u2_index(i))];
}

pub trait CombinationStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether unlabeled samples go through the teacher and the student.
    fn uses_unlabeled(&self) -> bool {
        true
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError>;
}

fn check_streams(ctx: &PlanContext<'_>) -> Result<(), TrainError> {
    if ctx.u1.len() != ctx.u2.len() || ctx.u1.is_empty() {
        return Err(TrainError::Batch(format!(
            "unlabeled streams have {} and {} samples",
            ctx.u1.len(),
            ctx.u2.len()
        )));
    }
    Ok(())
}

/// Both streams pool with their own reliability maps; both unlabeled
/// prototype sets are fused and both consistency terms are used.
pub struct SeparateMultiProto;

impl CombinationStrategy for SeparateMultiProto {
    fn name(&self) -> &'static str {
        "separate_multi_proto"
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError> {
        check_streams(ctx)?;
        let mut plan = ctx.base_plan();
        let pool = |streams: &[TeacherStream], index: &dyn Fn(usize) -> usize| PoolSpec {
            members: streams.iter().enumerate().map(|(i, s)| member(index(i), &s.pseudo, &s.reliability)).collect(),
        };
        plan.unlabeled = vec![pool(ctx.u1, &|i| ctx.u1_index(i)), pool(ctx.u2, &|i| ctx.u2_index(i))];
        let targets: Vec<ClassMap> = ctx.u2.iter().map(|s| s.pseudo.refined.clone()).collect();
        two_stream_terms(ctx, &mut plan, &targets);
        Ok(plan)
    }
}

/// The augmented stream's reliability map weights (and masks) the original
/// stream's pooling.
pub struct AugMapOnOrig;

impl CombinationStrategy for AugMapOnOrig {
    fn name(&self) -> &'static str {
        "aug_map_on_orig"
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError> {
        check_streams(ctx)?;
        let mut plan = ctx.base_plan();
        let mut u1 = PoolSpec::default();
        for (i, (orig, aug)) in ctx.u1.iter().zip(ctx.u2).enumerate() {
            let pl = refine_pseudo_labels(&orig.pred.mean_probs, &aug.reliability)?;
            u1.members.push(member(ctx.u1_index(i), &pl, &aug.reliability));
        }
        let u2 = PoolSpec {
            members: ctx.u2.iter().enumerate().map(|(i, s)| member(ctx.u2_index(i), &s.pseudo, &s.reliability)).collect(),
        };
        plan.unlabeled = vec![u1, u2];
        let targets: Vec<ClassMap> = ctx.u2.iter().map(|s| s.pseudo.refined.clone()).collect();
        two_stream_terms(ctx, &mut plan, &targets);
        Ok(plan)
    }
}

/// The original stream's reliability map refines the augmented stream's
/// pseudo-labels and weights its pooling.
pub struct OrigMapOnAug;

impl CombinationStrategy for OrigMapOnAug {
    fn name(&self) -> &'static str {
        "orig_map_on_aug"
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError> {
        check_streams(ctx)?;
        let mut plan = ctx.base_plan();
        let u1 = PoolSpec {
            members: ctx.u1.iter().enumerate().map(|(i, s)| member(ctx.u1_index(i), &s.pseudo, &s.reliability)).collect(),
        };
        let mut u2 = PoolSpec::default();
        let mut targets = Vec::with_capacity(ctx.u2.len());
        for (i, (orig, aug)) in ctx.u1.iter().zip(ctx.u2).enumerate() {
            let pl = refine_pseudo_labels(&aug.pred.mean_probs, &orig.reliability)?;
            u2.members.push(member(ctx.u2_index(i), &pl, &orig.reliability));
            targets.push(pl.refined);
        }
        plan.unlabeled = vec![u1, u2];
        two_stream_terms(ctx, &mut plan, &targets);
        Ok(plan)
    }
}

/// Original and augmented samples form one unlabeled set: one prototype pool
/// and one consistency term, each sample against its own refined
/// pseudo-label. There is no second term.
pub struct Concat;

impl CombinationStrategy for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError> {
        check_streams(ctx)?;
        let mut plan = ctx.base_plan();
        let all: Vec<(usize, &TeacherStream)> = ctx
            .u1
            .iter()
            .enumerate()
            .map(|(i, s)| (ctx.u1_index(i), s))
            .chain(ctx.u2.iter().enumerate().map(|(i, s)| (ctx.u2_index(i), s)))
            .collect();
        plan.unlabeled = vec![PoolSpec { members: all.iter().map(|(i, s)| member(*i, &s.pseudo, &s.reliability)).collect() }];
        plan.uc1 = TermSpec {
            items: all.iter().map(|(i, s)| TermItem { sources: vec![*i], target: s.pseudo.refined.clone() }).collect(),
        };
        Ok(plan)
    }
}

/// Labeled data only: `p = p_l` and the loss is `l_seg + l_lc`. Used as the
/// ablation baseline.
pub struct SupervisedOnly;

impl CombinationStrategy for SupervisedOnly {
    fn name(&self) -> &'static str {
        "supervised_only"
    }

    fn uses_unlabeled(&self) -> bool {
        false
    }

    fn plan(&self, ctx: &PlanContext<'_>) -> Result<ConsistencyPlan, TrainError> {
        Ok(ctx.base_plan())
    }
}

pub fn combination_registry() -> Registry<dyn CombinationStrategy> {
    let mut reg: Registry<dyn CombinationStrategy> = Registry::new("combination mode");
    reg.register("separate_multi_proto", Arc::new(SeparateMultiProto));
    reg.register("aug_map_on_orig", Arc::new(AugMapOnOrig));
    reg.register("orig_map_on_aug", Arc::new(OrigMapOnAug));
    reg.register("concat", Arc::new(Concat));
    reg.register("supervised_only", Arc::new(SupervisedOnly));
    reg
}
