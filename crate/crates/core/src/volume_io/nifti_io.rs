//! NIfTI-1 read/write backed by the `nifti` crate.

use std::path::Path;

use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{LabelVolume, Volume, VolumeError};

fn nifti_err(e: impl std::fmt::Display) -> VolumeError {
    VolumeError::Nifti(e.to_string())
}

fn read_array<T>(path: &Path) -> Result<(Vec<T>, [usize; 3], [f64; 3]), VolumeError>
where
    T: nifti::volume::element::DataElement + Copy,
{
    if !path.exists() {
        return Err(VolumeError::UnreadableFile {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let header = obj.header().clone();
    let array = obj.into_volume().into_ndarray::<T>().map_err(nifti_err)?;
    let dims = array.shape().to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(VolumeError::Nifti(format!("expected a 3D volume, found dims {dims:?}")));
    }
    let shape = [dims[0], dims[1], dims[2]];
    let spacing = [1, 2, 3].map(|i| {
        let s = header.pixdim[i] as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    // Logical iteration order is row-major regardless of the on-disk layout.
    Ok((array.iter().copied().collect(), shape, spacing))
}

pub fn load_volume_nifti(path: &Path) -> Result<Volume, VolumeError> {
    let (data, shape, spacing) = read_array::<f32>(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    Volume::with_spacing(name, shape, spacing, data)
}

pub fn load_labels_nifti(path: &Path, num_classes: usize) -> Result<LabelVolume, VolumeError> {
    let (data, shape, _) = read_array::<f32>(path)?;
    let labels = data
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v > u8::MAX as f32 {
                Err(VolumeError::Nifti(format!("non-integer label value {v}")))
            } else {
                Ok(v as u8)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    LabelVolume::new(shape, num_classes, labels)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header
}

pub fn save_volume_nifti(path: &Path, v: &Volume) -> Result<(), VolumeError> {
    let array = Array3::from_shape_vec(v.shape, v.data.clone()).map_err(nifti_err)?;
    let header = header_for(v.spacing);
    WriterOptions::new(path).reference_header(&header).write_nifti(&array).map_err(nifti_err)
}

pub fn save_labels_nifti(path: &Path, spacing: [f64; 3], l: &LabelVolume) -> Result<(), VolumeError> {
    let array = Array3::from_shape_vec(l.shape, l.data.clone()).map_err(nifti_err)?;
    let header = header_for(spacing);
    WriterOptions::new(path).reference_header(&header).write_nifti(&array).map_err(nifti_err)
}
