use serde::{Deserialize, Serialize};

use super::VolumeError;
use crate::grid::{voxel_count, ClassMap, Shape3};

/// Patch corners tiling a volume; every voxel is covered at least once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: Shape3,
    pub stride: Shape3,
    pub origins: Vec<Shape3>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    // A stride longer than the patch would leave gaps.
    let mut out: Vec<usize> = (0..=last).step_by(stride.min(patch)).collect();
    if *out.last().expect("origin 0 always present") != last {
        out.push(last);
    }
    out
}

/// Plans sliding-window origins; the final origin on each axis is clamped to
/// `shape - patch` so the tiling is exhaustive.
pub fn plan_sliding_window(shape: Shape3, patch: Shape3, stride: Shape3) -> Result<PatchGrid, VolumeError> {
    if (0..3).any(|i| patch[i] > shape[i]) {
        return Err(VolumeError::PatchLargerThanVolume { patch, shape });
    }
    if patch.iter().chain(stride.iter()).any(|&s| s == 0) {
        return Err(VolumeError::BadWindow(format!("patch {patch:?} and stride {stride:?} must be positive")));
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|i| axis_origins(shape[i], patch[i], stride[i])).collect();
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &h in &axes[0] {
        for &w in &axes[1] {
            for &d in &axes[2] {
                origins.push([h, w, d]);
            }
        }
    }
    Ok(PatchGrid { patch_size: patch, stride, origins })
}

/// Averages overlapping patch predictions into a full-volume map.
pub fn assemble_prediction(patch_probs: &[ClassMap], grid: &PatchGrid, shape: Shape3) -> Result<ClassMap, VolumeError> {
    if patch_probs.len() != grid.origins.len() {
        return Err(VolumeError::CountMismatch { expected: grid.origins.len(), found: patch_probs.len() });
    }
    let channels = patch_probs.first().map(|p| p.channels).unwrap_or(1);
    let patch = grid.patch_size;
    let mut acc = ClassMap::zeros(shape, channels);
    let mut hits = vec![0u32; voxel_count(shape)];
    for (probs, origin) in patch_probs.iter().zip(&grid.origins) {
        if probs.shape != patch || probs.channels != channels {
            return Err(VolumeError::ShapeMismatch {
                expected: voxel_count(patch) * channels,
                found: probs.data.len(),
            });
        }
        let mut src = 0;
        for h in 0..patch[0] {
            for w in 0..patch[1] {
                let row = ((origin[0] + h) * shape[1] + origin[1] + w) * shape[2] + origin[2];
                for d in 0..patch[2] {
                    let v = row + d;
                    hits[v] += 1;
                    let dst = acc.voxel_mut(v);
                    for (a, b) in dst.iter_mut().zip(probs.voxel(src)) {
                        *a += b;
                    }
                    src += 1;
                }
            }
        }
    }
    for (v, &n) in hits.iter().enumerate() {
        let inv = 1.0 / n.max(1) as f64;
        acc.voxel_mut(v).iter_mut().for_each(|x| *x *= inv);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whole_volume_patch_is_single_origin() {
        let g = plan_sliding_window([112, 112, 80], [112, 112, 80], [18, 18, 4]).unwrap();
        assert_eq!(g.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn clamped_last_origin() {
        let g = plan_sliding_window([10, 10, 10], [8, 8, 8], [4, 4, 4]).unwrap();
        assert_eq!(g.origins.len(), 8);
        assert_eq!(g.origins[0], [0, 0, 0]);
        assert_eq!(g.origins[1], [0, 0, 2]);
        assert_eq!(g.origins[7], [2, 2, 2]);
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(matches!(
            plan_sliding_window([5, 5, 5], [6, 6, 6], [1, 1, 1]),
            Err(VolumeError::PatchLargerThanVolume { .. })
        ));
    }

    #[test]
    fn overlap_is_averaged() {
        // Two 1x1x2 patches overlapping on the middle voxel of a 1x1x3 volume.
        let grid = plan_sliding_window([1, 1, 3], [1, 1, 2], [1, 1, 1]).unwrap();
        assert_eq!(grid.origins, vec![[0, 0, 0], [0, 0, 1]]);
        let a = ClassMap::new([1, 1, 2], 2, vec![1.0, 0.0, 1.0, 0.0]);
        let b = ClassMap::new([1, 1, 2], 2, vec![0.0, 1.0, 0.0, 1.0]);
        let out = assemble_prediction(&[a, b], &grid, [1, 1, 3]).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn single_and_disjoint_patches_copy() {
        let probs = ClassMap::new([1, 1, 2], 2, vec![0.25, 0.75, 0.6, 0.4]);
        let grid = plan_sliding_window([1, 1, 2], [1, 1, 2], [1, 1, 1]).unwrap();
        assert_eq!(assemble_prediction(&[probs.clone()], &grid, [1, 1, 2]).unwrap(), probs);

        let grid = plan_sliding_window([1, 1, 4], [1, 1, 2], [1, 1, 2]).unwrap();
        let other = ClassMap::new([1, 1, 2], 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = assemble_prediction(&[probs.clone(), other.clone()], &grid, [1, 1, 4]).unwrap();
        assert_eq!(&out.data[..4], &probs.data[..]);
        assert_eq!(&out.data[4..], &other.data[..]);
    }

    #[test]
    fn count_mismatch() {
        let grid = plan_sliding_window([1, 1, 4], [1, 1, 2], [1, 1, 2]).unwrap();
        let p = ClassMap::zeros([1, 1, 2], 2);
        assert!(matches!(
            assemble_prediction(&[p], &grid, [1, 1, 4]),
            Err(VolumeError::CountMismatch { expected: 2, found: 1 })
        ));
    }

    fn shape_and_patch() -> impl Strategy<Value = (Shape3, Shape3, Shape3)> {
        (1usize..=16, 1usize..=16, 1usize..=16).prop_flat_map(|(h, w, d)| {
            (
                Just([h, w, d]),
                (1..=h, 1..=w, 1..=d),
            )
        })
        .prop_flat_map(|(shape, (a, b, c))| (Just(shape), Just([a, b, c]), (1usize..20, 1usize..20, 1usize..20).prop_map(|(x, y, z)| [x, y, z])))
    }

    proptest! {
        #[test]
        fn tiling_covers_every_voxel((shape, patch, stride) in shape_and_patch()) {
            let grid = plan_sliding_window(shape, patch, stride).unwrap();
            let mut covered = vec![false; voxel_count(shape)];
            let mut prev: Option<Shape3> = None;
            for o in &grid.origins {
                prop_assert!((0..3).all(|i| o[i] + patch[i] <= shape[i]));
                if let Some(p) = prev { prop_assert!(p < *o); }
                prev = Some(*o);
                for h in 0..patch[0] { for w in 0..patch[1] { for d in 0..patch[2] {
                    covered[crate::grid::flat_index(shape, o[0] + h, o[1] + w, o[2] + d)] = true;
                }}}
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn constant_patches_assemble_to_constant((shape, patch, stride) in shape_and_patch(), p in 0.0f64..1.0) {
            let grid = plan_sliding_window(shape, patch, stride).unwrap();
            let tile = ClassMap::new(patch, 2, [p, 1.0 - p].repeat(voxel_count(patch)));
            let tiles = vec![tile; grid.origins.len()];
            let out = assemble_prediction(&tiles, &grid, shape).unwrap();
            for v in 0..out.voxels() {
                prop_assert!((out.voxel(v)[0] - p).abs() < 1e-12);
                prop_assert!((out.voxel(v).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}
