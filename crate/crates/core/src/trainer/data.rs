//! Dataset layout on disk, in-memory training data and per-iteration batch
//! sampling.
//!
//! A dataset directory holds `images/<name>.{json,bin}`,
//! `labels/<name>.{json,bin}` and `splits.json`.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::augmentation::{augment_labeled_batch, augment_unlabeled_batch, FlipRotate, Sample};
use crate::grid::Shape3;
use crate::volume_io::{
    load_labels_raw, load_volume_raw, normalize_intensity, save_labels_raw, save_volume_raw, LabelVolume, SynthCase,
    Volume, VolumeError,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join("splits.json");
        let text = std::fs::read_to_string(&path).map_err(|e| TrainError::Io { path: path.clone(), source: e })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn image_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("images").join(format!("{name}.json"))
}

pub fn label_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("labels").join(format!("{name}.json"))
}

/// Writes every case (image and label) plus `splits.json`.
pub fn write_dataset(dir: &Path, cases: &[SynthCase], splits: &Splits) -> Result<(), TrainError> {
    for (vol, lab) in cases {
        save_volume_raw(&image_path(dir, &vol.name), vol)?;
        save_labels_raw(&label_path(dir, &vol.name), vol.spacing, lab)?;
    }
    let path = dir.join("splits.json");
    let text = serde_json::to_string_pretty(splits).expect("splits serialize");
    std::fs::write(&path, text).map_err(|source| TrainError::Io { path, source })
}

pub fn load_case(dir: &Path, name: &str, num_classes: usize) -> Result<(Volume, LabelVolume), VolumeError> {
    let vol = load_volume_raw(&image_path(dir, name))?;
    let lab = load_labels_raw(&label_path(dir, name), Some(num_classes))?;
    if vol.shape != lab.shape {
        return Err(VolumeError::ShapeMismatch { expected: vol.voxels(), found: lab.data.len() });
    }
    Ok((vol, lab))
}

/// Intensity-normalized volumes ready for patch sampling.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub labeled: Vec<(Volume, LabelVolume)>,
    pub unlabeled: Vec<Volume>,
}

impl TrainingData {
    pub fn new(labeled: Vec<(Volume, LabelVolume)>, unlabeled: Vec<Volume>) -> Result<Self, TrainError> {
        if labeled.is_empty() {
            return Err(TrainError::Data("no labeled volumes".into()));
        }
        for (v, l) in &labeled {
            if v.shape != l.shape {
                return Err(TrainError::Data(format!("{}: image {:?} vs label {:?}", v.name, v.shape, l.shape)));
            }
        }
        Ok(Self {
            labeled: labeled.into_iter().map(|(v, l)| (normalize_intensity(&v).volume, l)).collect(),
            unlabeled: unlabeled.iter().map(|v| normalize_intensity(v).volume).collect(),
        })
    }

    /// Loads the labeled and unlabeled splits; unlabeled label files are
    /// never read.
    pub fn load(dir: &Path, num_classes: usize) -> Result<Self, TrainError> {
        let splits = Splits::load(dir)?;
        let labeled = splits
            .labeled
            .iter()
            .map(|n| load_case(dir, n, num_classes))
            .collect::<Result<Vec<_>, _>>()?;
        let unlabeled = splits
            .unlabeled
            .iter()
            .map(|n| load_volume_raw(&image_path(dir, n)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(labeled, unlabeled)
    }

    pub fn from_cases(cases: &[SynthCase], splits: &Splits) -> Result<Self, TrainError> {
        let find = |name: &String| {
            cases
                .iter()
                .find(|(v, _)| &v.name == name)
                .ok_or_else(|| TrainError::Data(format!("case `{name}` not in dataset")))
        };
        let labeled = splits.labeled.iter().map(|n| find(n).cloned()).collect::<Result<Vec<_>, _>>()?;
        let unlabeled = splits.unlabeled.iter().map(|n| find(n).map(|c| c.0.clone())).collect::<Result<Vec<_>, _>>()?;
        Self::new(labeled, unlabeled)
    }
}

/// One iteration's student inputs.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Originals followed by their CutMix samples; all carry labels.
    pub labeled: Vec<Sample>,
    /// Original unlabeled crops.
    pub u1: Vec<Sample>,
    /// `u2[i]` mixes `u1[i]` with `u1[(i + 1) % n]`.
    pub u2: Vec<Sample>,
}

fn pick<R: Rng>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    if len >= count {
        index::sample(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..len)).collect()
    }
}

fn random_crop<R: Rng>(rng: &mut R, shape: Shape3, patch: Shape3) -> Result<Shape3, TrainError> {
    if (0..3).any(|i| patch[i] > shape[i]) {
        return Err(VolumeError::PatchLargerThanVolume { patch, shape }.into());
    }
    Ok([0, 1, 2].map(|i| rng.gen_range(0..=shape[i] - patch[i])))
}

fn geometric<R: Rng>(rng: &mut R, s: Sample, patch: Shape3) -> Sample {
    let mut t = FlipRotate::draw(rng);
    if patch[0] != patch[1] {
        // Rotations in the H-W plane would change a non-square patch's shape.
        t.quarter_turns = 0;
    }
    t.apply_sample(&s)
}

/// Random labeled crops, one CutMix per pair.
pub fn sample_labeled(
    data: &TrainingData,
    batch: usize,
    patch: Shape3,
    flip_rotate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>, TrainError> {
    let mut samples = Vec::with_capacity(batch);
    for i in pick(rng, data.labeled.len(), batch) {
        let (vol, lab) = &data.labeled[i];
        let origin = random_crop(rng, vol.shape, patch)?;
        let s = Sample::new(vol.name.clone(), patch, vol.crop(origin, patch), Some(lab.crop(origin, patch)));
        samples.push(if flip_rotate { geometric(rng, s, patch) } else { s });
    }
    Ok(augment_labeled_batch(&samples, rng)?)
}

/// Random unlabeled crops and their CutMix partners.
pub fn sample_unlabeled(
    data: &TrainingData,
    batch: usize,
    patch: Shape3,
    flip_rotate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    if data.unlabeled.is_empty() {
        return Err(TrainError::Data("no unlabeled volumes".into()));
    }
    let mut u1 = Vec::with_capacity(batch);
    for i in pick(rng, data.unlabeled.len(), batch) {
        let vol = &data.unlabeled[i];
        let origin = random_crop(rng, vol.shape, patch)?;
        let s = Sample::new(vol.name.clone(), patch, vol.crop(origin, patch), None);
        u1.push(if flip_rotate { geometric(rng, s, patch) } else { s });
    }
    let u2 = augment_unlabeled_batch(&u1, rng)?;
    Ok((u1, u2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::synth_dataset;
    use rand::SeedableRng;

    fn small() -> (Vec<SynthCase>, Splits) {
        let cases = synth_dataset(4, [16, 16, 16], 2, 3).unwrap();
        let splits = Splits {
            labeled: vec!["case_000".into()],
            unlabeled: vec!["case_001".into(), "case_002".into()],
            test: vec!["case_003".into()],
        };
        (cases, splits)
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (cases, splits) = small();
        write_dataset(dir.path(), &cases, &splits).unwrap();
        assert_eq!(Splits::load(dir.path()).unwrap(), splits);
        let loaded = TrainingData::load(dir.path(), 2).unwrap();
        let direct = TrainingData::from_cases(&cases, &splits).unwrap();
        assert_eq!(loaded.labeled[0].1, direct.labeled[0].1);
        assert_eq!(loaded.unlabeled[1].data, direct.unlabeled[1].data);
    }

    #[test]
    fn batches_have_expected_layout_and_repeat_per_seed() {
        let (cases, splits) = small();
        let data = TrainingData::from_cases(&cases, &splits).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let l = sample_labeled(&data, 2, [8, 8, 8], true, &mut rng).unwrap();
            let (u1, u2) = sample_unlabeled(&data, 2, [8, 8, 8], false, &mut rng).unwrap();
            (l, u1, u2)
        };
        let (l, u1, u2) = draw();
        assert_eq!(l.len(), 3);
        assert!(l.iter().all(|s| s.label.is_some() && s.shape == [8, 8, 8]));
        assert_eq!((u1.len(), u2.len()), (2, 2));
        assert!(u2.iter().all(|s| s.label.is_none()));
        let (l2, _, u2b) = draw();
        assert_eq!(l[2].image, l2[2].image);
        assert_eq!(u2[1].image, u2b[1].image);
    }

    #[test]
    fn oversized_patch_rejected() {
        let (cases, splits) = small();
        let data = TrainingData::from_cases(&cases, &splits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_labeled(&data, 2, [32, 8, 8], false, &mut rng).is_err());
    }
}
