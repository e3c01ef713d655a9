//! CutMix copy-paste for the labeled and unlabeled streams, plus optional
//! flips and in-plane rotations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{flat_index, voxel_count, Shape3};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("cannot mix labels when only one of the two samples is labeled")]
    LabelArityMismatch,
    #[error("labeled batch size must be even, got {0}")]
    OddBatch(usize),
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("patch {0:?} too small for a cut box (every axis must be >= 4)")]
    PatchTooSmall(Shape3),
}

/// A single training patch. `label` is absent for unlabeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shape: Shape3,
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, shape: Shape3, image: Vec<f32>, label: Option<Vec<u8>>) -> Self {
        let n = voxel_count(shape);
        assert_eq!(image.len(), n, "image length");
        if let Some(l) = &label {
            assert_eq!(l.len(), n, "label length");
        }
        Self { id: id.into(), shape, image, label }
    }
}

/// Axis-aligned box with a dense 0/1 rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMask {
    pub shape: Shape3,
    pub origin: Shape3,
    pub extent: Shape3,
    pub data: Vec<u8>,
}

impl CutMask {
    /// Renders the box `origin..origin+extent` inside `shape`.
    pub fn from_box(shape: Shape3, origin: Shape3, extent: Shape3) -> Self {
        assert!((0..3).all(|i| origin[i] + extent[i] <= shape[i]), "box outside patch");
        let mut data = vec![0u8; voxel_count(shape)];
        for h in origin[0]..origin[0] + extent[0] {
            for w in origin[1]..origin[1] + extent[1] {
                let row = flat_index(shape, h, w, origin[2]);
                data[row..row + extent[2]].fill(1);
            }
        }
        Self { shape, origin, extent, data }
    }

    pub fn inside(&self, v: usize) -> bool {
        self.data[v] != 0
    }

    pub fn fraction(&self) -> f64 {
        voxel_count(self.extent) as f64 / voxel_count(self.shape) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_a: String,
    pub source_b: String,
    pub origin: Shape3,
    pub extent: Shape3,
}

/// Output of [`cutmix`]: `b` pasted into `a` inside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: Sample,
    pub provenance: Provenance,
}

/// Draws a cut box whose per-axis extent is `floor(U[0.25, 0.5] * axis)`
/// (at least 1), placed uniformly inside the patch.
pub fn generate_cut_mask<R: Rng + ?Sized>(patch: Shape3, rng: &mut R) -> Result<CutMask, AugmentError> {
    if patch.iter().any(|&s| s < 4) {
        return Err(AugmentError::PatchTooSmall(patch));
    }
    let mut extent = [0; 3];
    let mut origin = [0; 3];
    for i in 0..3 {
        let frac: f64 = rng.gen_range(0.25..=0.5);
        extent[i] = ((frac * patch[i] as f64).floor() as usize).clamp(1, patch[i]);
        origin[i] = rng.gen_range(0..=patch[i] - extent[i]);
    }
    Ok(CutMask::from_box(patch, origin, extent))
}

/// Voxelwise `a * (1 - m) + b * m`. Labels are mixed with the same mask when
/// both samples carry them.
pub fn cutmix(a: &Sample, b: &Sample, m: &CutMask) -> Result<AugmentedSample, AugmentError> {
    if a.shape != b.shape {
        return Err(AugmentError::ShapeMismatch(a.shape, b.shape));
    }
    if a.shape != m.shape {
        return Err(AugmentError::ShapeMismatch(a.shape, m.shape));
    }
    let pick = |v: usize| m.inside(v);
    let image = (0..a.image.len()).map(|v| if pick(v) { b.image[v] } else { a.image[v] }).collect();
    let label = match (&a.label, &b.label) {
        (Some(la), Some(lb)) => Some((0..la.len()).map(|v| if pick(v) { lb[v] } else { la[v] }).collect()),
        (None, None) => None,
        _ => return Err(AugmentError::LabelArityMismatch),
    };
    Ok(AugmentedSample {
        sample: Sample { id: format!("{}+{}", a.id, b.id), shape: a.shape, image, label },
        provenance: Provenance {
            source_a: a.id.clone(),
            source_b: b.id.clone(),
            origin: m.origin,
            extent: m.extent,
        },
    })
}

/// The `B` originals followed by `B/2` CutMix samples built from consecutive
/// pairs `(0,1), (2,3), ...`: `3B/2` samples in total.
pub fn augment_labeled_batch<R: Rng + ?Sized>(batch: &[Sample], rng: &mut R) -> Result<Vec<Sample>, AugmentError> {
    if batch.len() < 2 {
        return Err(AugmentError::BatchTooSmall(batch.len()));
    }
    if batch.len() % 2 != 0 {
        return Err(AugmentError::OddBatch(batch.len()));
    }
    let mut out = batch.to_vec();
    for pair in batch.chunks_exact(2) {
        let m = generate_cut_mask(pair[0].shape, rng)?;
        out.push(cutmix(&pair[0], &pair[1], &m)?.sample);
    }
    Ok(out)
}

/// Sample `i` mixed with sample `(i + 1) % B`, each with a fresh mask.
/// Only images are mixed; pseudo-labels are produced later by the teacher.
pub fn augment_unlabeled_batch<R: Rng + ?Sized>(batch: &[Sample], rng: &mut R) -> Result<Vec<Sample>, AugmentError> {
    if batch.len() < 2 {
        return Err(AugmentError::BatchTooSmall(batch.len()));
    }
    let strip = |s: &Sample| Sample { label: None, ..s.clone() };
    (0..batch.len())
        .map(|i| {
            let m = generate_cut_mask(batch[i].shape, rng)?;
            Ok(cutmix(&strip(&batch[i]), &strip(&batch[(i + 1) % batch.len()]), &m)?.sample)
        })
        .collect()
}

/// Geometric transform: optional flips per axis, then `quarter_turns`
/// rotations by 90 degrees in the H-W plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipRotate {
    pub flip: [bool; 3],
    pub quarter_turns: u8,
}

impl FlipRotate {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        Self { flip, quarter_turns: rng.gen_range(0..4) }
    }

    pub fn output_shape(&self, shape: Shape3) -> Shape3 {
        if self.quarter_turns % 2 == 1 {
            [shape[1], shape[0], shape[2]]
        } else {
            shape
        }
    }

    /// Source voxel for each output voxel.
    fn source_index(&self, shape: Shape3, out: [usize; 3]) -> usize {
        // Undo the rotation first (it was applied last).
        let [oh, ow, d] = out;
        let [h, w] = match self.quarter_turns % 4 {
            0 => [oh, ow],
            // (h, w) -> (w, H-1-h)
            1 => [shape[0] - 1 - ow, oh],
            2 => [shape[0] - 1 - oh, shape[1] - 1 - ow],
            _ => [ow, shape[1] - 1 - oh],
        };
        let mut p = [h, w, d];
        for i in 0..3 {
            if self.flip[i] {
                p[i] = shape[i] - 1 - p[i];
            }
        }
        flat_index(shape, p[0], p[1], p[2])
    }

    pub fn apply<T: Copy>(&self, data: &[T], shape: Shape3) -> Vec<T> {
        let out_shape = self.output_shape(shape);
        let mut out = Vec::with_capacity(data.len());
        for h in 0..out_shape[0] {
            for w in 0..out_shape[1] {
                for d in 0..out_shape[2] {
                    out.push(data[self.source_index(shape, [h, w, d])]);
                }
            }
        }
        out
    }

    pub fn apply_sample(&self, s: &Sample) -> Sample {
        Sample {
            id: s.id.clone(),
            shape: self.output_shape(s.shape),
            image: self.apply(&s.image, s.shape),
            label: s.label.as_ref().map(|l| self.apply(l, s.shape)),
        }
    }
}

/// Independent flips (p = 0.5 per axis) and a random multiple of 90 degrees
/// in the H-W plane, applied identically to image and label.
pub fn random_flip_rotate<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Sample {
    FlipRotate::draw(rng).apply_sample(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, shape: Shape3, base: f32, labeled: bool) -> Sample {
        let n = voxel_count(shape);
        let image = (0..n).map(|v| base + v as f32).collect();
        let label = labeled.then(|| (0..n).map(|v| (v % 2) as u8 + if base > 0.0 { 1 } else { 0 }).collect());
        Sample::new(id, shape, image, label)
    }

    #[test]
    fn extents_for_eight_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let m = generate_cut_mask([8, 8, 8], &mut rng).unwrap();
            assert!(m.extent.iter().all(|e| (2..=4).contains(e)), "{:?}", m.extent);
            let f = m.fraction();
            assert!((0.25f64.powi(3) - 1e-12..=0.125 + 1e-12).contains(&f));
            let ones = m.data.iter().filter(|&&x| x == 1).count();
            assert_eq!(ones, voxel_count(m.extent));
        }
    }

    #[test]
    fn cut_mask_deterministic() {
        let a = generate_cut_mask([16, 12, 8], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_cut_mask([16, 12, 8], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(generate_cut_mask([3, 8, 8], &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn degenerate_masks() {
        let shape = [4, 4, 4];
        let a = sample("a", shape, 0.0, true);
        let b = sample("b", shape, 1000.0, true);
        let none = CutMask::from_box(shape, [0; 3], [0; 3]);
        assert_eq!(cutmix(&a, &b, &none).unwrap().sample.image, a.image);
        let all = CutMask::from_box(shape, [0; 3], shape);
        let mixed = cutmix(&a, &b, &all).unwrap().sample;
        assert_eq!(mixed.image, b.image);
        assert_eq!(mixed.label, b.label);
    }

    #[test]
    fn label_arity_and_shape_errors() {
        let shape = [4, 4, 4];
        let m = CutMask::from_box(shape, [1; 3], [2; 3]);
        let a = sample("a", shape, 0.0, true);
        let b = sample("b", shape, 1.0, false);
        assert_eq!(cutmix(&a, &b, &m), Err(AugmentError::LabelArityMismatch));
        let c = sample("c", [4, 4, 8], 1.0, true);
        assert!(matches!(cutmix(&a, &c, &m), Err(AugmentError::ShapeMismatch(..))));
    }

    #[test]
    fn labeled_batch_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [2usize, 4, 8] {
            let batch: Vec<Sample> = (0..b).map(|i| sample(&format!("s{i}"), [8, 8, 8], i as f32 * 1e4, true)).collect();
            let out = augment_labeled_batch(&batch, &mut rng).unwrap();
            assert_eq!(out.len(), 3 * b / 2);
            assert_eq!(&out[..b], &batch[..]);
            assert_eq!(out[b].id, "s0+s1");
        }
        let three: Vec<Sample> = (0..3).map(|i| sample("s", [8, 8, 8], i as f32, true)).collect();
        assert_eq!(augment_labeled_batch(&three, &mut rng), Err(AugmentError::OddBatch(3)));
    }

    #[test]
    fn unlabeled_ring_pairing() {
        let shape = [8, 8, 8];
        let batch = vec![sample("u0", shape, 0.0, false), sample("u1", shape, 1e4, false)];
        let out = augment_unlabeled_batch(&batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].id, "u0+u1");
        assert_eq!(out[1].id, "u1+u0");
        for s in &out {
            assert!(s.label.is_none());
        }
        let same = vec![sample("x", shape, 2.0, false); 2];
        let out = augment_unlabeled_batch(&same, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(out.iter().all(|s| s.image == same[0].image));
        let again = augment_unlabeled_batch(&batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let out2 = augment_unlabeled_batch(&batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, out2);
    }

    #[test]
    fn flip_rotate_identity_and_involution() {
        let s = sample("a", [4, 4, 3], 0.0, true);
        assert_eq!(FlipRotate::default().apply_sample(&s), s);
        let half = FlipRotate { flip: [false; 3], quarter_turns: 2 };
        assert_eq!(half.apply_sample(&half.apply_sample(&s)), s);
        let quarter = FlipRotate { flip: [false; 3], quarter_turns: 1 };
        let mut r = s.clone();
        for _ in 0..4 {
            r = quarter.apply_sample(&r);
        }
        assert_eq!(r, s);
    }

    #[test]
    fn marker_moves_with_label() {
        let shape = [5, 3, 2];
        let n = voxel_count(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let at = rng.gen_range(0..n);
            let mut image = vec![0.0f32; n];
            image[at] = 1.0;
            let mut label = vec![0u8; n];
            label[at] = 1;
            let s = Sample::new("m", shape, image, Some(label));
            let t = random_flip_rotate(&s, &mut rng);
            let img_pos = t.image.iter().position(|&x| x == 1.0).unwrap();
            let lab_pos = t.label.as_ref().unwrap().iter().position(|&x| x == 1).unwrap();
            assert_eq!(img_pos, lab_pos);
        }
    }

    proptest! {
        #[test]
        fn cutmix_is_voxelwise_exhaustive(seed in 0u64..1000, h in 4usize..10, w in 4usize..10, d in 4usize..10) {
            let shape = [h, w, d];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = sample("a", shape, 0.0, true);
            let b = sample("b", shape, 1e5, true);
            let m = generate_cut_mask(shape, &mut rng).unwrap();
            let out = cutmix(&a, &b, &m).unwrap().sample;
            let lab = out.label.unwrap();
            for v in 0..voxel_count(shape) {
                let from_b = m.inside(v);
                prop_assert_eq!(out.image[v], if from_b { b.image[v] } else { a.image[v] });
                prop_assert_eq!(lab[v], if from_b { b.label.as_ref().unwrap()[v] } else { a.label.as_ref().unwrap()[v] });
            }
        }
    }
}
