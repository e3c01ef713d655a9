//! Ellipsoid phantoms with exact labels for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, Volume, VolumeError};
use crate::grid::{voxel_count, Shape3};

const NOISE_SIGMA: f64 = 0.1;
const RADIUS_FRACTION: std::ops::Range<f64> = 0.14..0.24;
const FOREGROUND_RANGE: std::ops::RangeInclusive<f64> = 0.02..=0.4;

/// One generated case.
pub type SynthCase = (Volume, LabelVolume);

fn base_intensity(class: u8, num_classes: usize) -> f64 {
    class as f64 / (num_classes - 1) as f64
}

fn paint_ellipsoid(labels: &mut [u8], shape: Shape3, center: [f64; 3], radii: [f64; 3], class: u8) {
    let lo = |a: usize| ((center[a] - radii[a]).floor().max(0.0)) as usize;
    let hi = |a: usize| ((center[a] + radii[a]).ceil() as usize).min(shape[a] - 1);
    for h in lo(0)..=hi(0) {
        let dh = (h as f64 - center[0]) / radii[0];
        for w in lo(1)..=hi(1) {
            let dw = (w as f64 - center[1]) / radii[1];
            for d in lo(2)..=hi(2) {
                let dd = (d as f64 - center[2]) / radii[2];
                if dh * dh + dw * dw + dd * dd <= 1.0 {
                    labels[(h * shape[1] + w) * shape[2] + d] = class;
                }
            }
        }
    }
}

/// Generates `n_volumes` phantoms: 1-3 random axis-aligned ellipsoids per
/// foreground class over a noisy background. Deterministic given `seed`.
/// Layouts whose foreground fraction falls outside [0.02, 0.4] are redrawn.
pub fn synth_dataset(
    n_volumes: usize,
    shape: Shape3,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SynthCase>, VolumeError> {
    if shape.iter().any(|&s| s < 16) {
        return Err(VolumeError::InvalidArgument(format!("synthetic volumes need every axis >= 16, got {shape:?}")));
    }
    if !(2..=3).contains(&num_classes) {
        return Err(VolumeError::InvalidArgument(format!("synthetic volumes support 2 or 3 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let n = voxel_count(shape);
    let mut out = Vec::with_capacity(n_volumes);
    for i in 0..n_volumes {
        let labels = loop {
            let mut labels = vec![0u8; n];
            for class in 1..num_classes as u8 {
                for _ in 0..rng.gen_range(1..=3) {
                    let radii = [0, 1, 2].map(|a| rng.gen_range(RADIUS_FRACTION) * shape[a] as f64);
                    let center = [0, 1, 2].map(|a| rng.gen_range(radii[a]..shape[a] as f64 - 1.0 - radii[a]));
                    paint_ellipsoid(&mut labels, shape, center, radii, class);
                }
            }
            let fg = labels.iter().filter(|&&l| l != 0).count() as f64 / n as f64;
            if FOREGROUND_RANGE.contains(&fg) {
                break labels;
            }
        };
        let data = labels
            .iter()
            .map(|&l| (base_intensity(l, num_classes) + noise.sample(&mut rng)) as f32)
            .collect();
        let name = format!("case_{i:03}");
        out.push((Volume::new(name, shape, data)?, LabelVolume::new(shape, num_classes, labels)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(2, [16, 16, 16], 2, 7).unwrap();
        let b = synth_dataset(2, [16, 16, 16], 2, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(2, [16, 16, 16], 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_and_foreground_fraction() {
        for classes in [2usize, 3] {
            for (img, lab) in synth_dataset(6, [24, 20, 16], classes, 11).unwrap() {
                assert!(lab.data.iter().all(|&l| (l as usize) < classes));
                let fg = lab.foreground_fraction();
                assert!((0.02..=0.4).contains(&fg), "fraction {fg}");
                assert!(img.data.iter().all(|v| v.is_finite()));
                if classes == 2 {
                    assert!(lab.data.iter().all(|&l| l <= 1));
                }
            }
        }
    }

    #[test]
    fn intensities_follow_labels() {
        let (img, lab) = synth_dataset(1, [32, 32, 32], 2, 3).unwrap().remove(0);
        let mean_of = |class: u8| {
            let vals: Vec<f64> = img.data.iter().zip(&lab.data).filter(|(_, &l)| l == class).map(|(&v, _)| v as f64).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(mean_of(0).abs() < 0.02);
        assert!((mean_of(1) - 1.0).abs() < 0.02);
    }

    #[test]
    fn rejects_small_shapes_and_class_counts() {
        assert!(synth_dataset(1, [8, 16, 16], 2, 0).is_err());
        assert!(synth_dataset(1, [16, 16, 16], 4, 0).is_err());
    }
}
