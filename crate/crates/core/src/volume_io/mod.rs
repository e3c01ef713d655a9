//! Volume ingestion: containers, intensity normalization, sliding-window
//! tiling and the synthetic phantom generator.

mod nifti_io;
mod raw;
mod synth;
mod window;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{voxel_count, Shape3};

pub use nifti_io::{load_labels_nifti, load_volume_nifti, save_labels_nifti, save_volume_nifti};
pub use raw::{load_labels_raw, load_volume_raw, save_labels_raw, save_volume_raw, RawHeader};
pub use synth::{synth_dataset, SynthCase};
pub use window::{assemble_prediction, plan_sliding_window, PatchGrid};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("volume contains NaN or infinite values")]
    NonFiniteData,
    #[error("label value {value} outside 0..{num_classes}")]
    LabelOutOfRange { value: u8, num_classes: usize },
    #[error("patch {patch:?} larger than volume {shape:?}")]
    PatchLargerThanVolume { patch: Shape3, shape: Shape3 },
    #[error("invalid window geometry: {0}")]
    BadWindow(String),
    #[error("expected {expected} patch predictions, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("nifti: {0}")]
    Nifti(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    Nifti,
    RawJson,
}

impl VolumeFormat {
    /// Guesses the container from a file name.
    pub fn from_path(path: &std::path::Path) -> Self {
        let name = path.to_string_lossy();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::RawJson
        }
    }
}

/// Scalar intensity grid in (H, W, D) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub shape: Shape3,
    /// Physical voxel size in mm along each axis.
    pub spacing: [f64; 3],
    pub name: String,
}

impl Volume {
    pub fn new(name: impl Into<String>, shape: Shape3, data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::with_spacing(name, shape, [1.0; 3], data)
    }

    pub fn with_spacing(
        name: impl Into<String>,
        shape: Shape3,
        spacing: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let expected = voxel_count(shape);
        if shape.iter().any(|&s| s == 0) || expected != data.len() {
            return Err(VolumeError::ShapeMismatch { expected, found: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteData);
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadHeader {
                path: PathBuf::new(),
                reason: format!("spacing must be positive, got {spacing:?}"),
            });
        }
        Ok(Self { data, shape, spacing, name: name.into() })
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    /// Copies the sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: Shape3, size: Shape3) -> Vec<f32> {
        crop_block(&self.data, self.shape, origin, size)
    }
}

/// Integer class map paired with a [`Volume`]. Class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub data: Vec<u8>,
    pub shape: Shape3,
    pub num_classes: usize,
}

impl LabelVolume {
    pub fn new(shape: Shape3, num_classes: usize, data: Vec<u8>) -> Result<Self, VolumeError> {
        let expected = voxel_count(shape);
        if expected != data.len() {
            return Err(VolumeError::ShapeMismatch { expected, found: data.len() });
        }
        if let Some(&value) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(VolumeError::LabelOutOfRange { value, num_classes });
        }
        Ok(Self { data, shape, num_classes })
    }

    pub fn crop(&self, origin: Shape3, size: Shape3) -> Vec<u8> {
        crop_block(&self.data, self.shape, origin, size)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }
}

pub(crate) fn crop_block<T: Copy>(data: &[T], shape: Shape3, origin: Shape3, size: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for h in 0..size[0] {
        for w in 0..size[1] {
            let start = ((origin[0] + h) * shape[1] + origin[1] + w) * shape[2] + origin[2];
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeWarning {
    ConstantVolume,
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume,
    pub warning: Option<NormalizeWarning>,
}

/// Rescales intensities to zero mean and unit (population) variance.
///
/// A constant volume has no defined scale; it comes back as all zeros with
/// [`NormalizeWarning::ConstantVolume`] set.
pub fn normalize_intensity(v: &Volume) -> Normalized {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut volume = v.clone();
    if var <= 0.0 {
        log::warn!("volume `{}` is constant; normalized to zeros", v.name);
        volume.data.iter_mut().for_each(|x| *x = 0.0);
        return Normalized { volume, warning: Some(NormalizeWarning::ConstantVolume) };
    }
    let std = var.sqrt();
    for x in volume.data.iter_mut() {
        *x = ((*x as f64 - mean) / std) as f32;
    }
    Normalized { volume, warning: None }
}

/// Loads a volume from either container.
pub fn load_volume(path: &std::path::Path, format: VolumeFormat) -> Result<Volume, VolumeError> {
    match format {
        VolumeFormat::Nifti => load_volume_nifti(path),
        VolumeFormat::RawJson => load_volume_raw(path),
    }
}

pub fn load_labels(
    path: &std::path::Path,
    format: VolumeFormat,
    num_classes: usize,
) -> Result<LabelVolume, VolumeError> {
    match format {
        VolumeFormat::Nifti => load_labels_nifti(path, num_classes),
        VolumeFormat::RawJson => load_labels_raw(path, Some(num_classes)),
    }
}
