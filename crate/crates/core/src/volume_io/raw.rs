//! `<name>.json` header + `<name>.bin` little-endian blob container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Volume, VolumeError};
use crate::grid::voxel_count;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

/// Accepts `stem`, `stem.json` or `stem.bin` and returns both file paths.
fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

fn read(path: &Path) -> Result<Vec<u8>, VolumeError> {
    fs::read(path).map_err(|source| VolumeError::UnreadableFile { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), VolumeError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| VolumeError::UnreadableFile { path: parent.to_path_buf(), source })?;
        }
    }
    fs::write(path, bytes).map_err(|source| VolumeError::UnreadableFile { path: path.to_path_buf(), source })
}

fn read_header(path: &Path) -> Result<RawHeader, VolumeError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| VolumeError::BadHeader { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn load_volume_raw(path: &Path) -> Result<Volume, VolumeError> {
    let (json, bin) = container_paths(path);
    let header = read_header(&json)?;
    if header.dtype != "float32" {
        return Err(VolumeError::BadHeader {
            path: json,
            reason: format!("expected dtype float32, found {}", header.dtype),
        });
    }
    let blob = read(&bin)?;
    let expected = voxel_count(header.shape);
    if blob.len() != expected * 4 {
        return Err(VolumeError::ShapeMismatch { expected, found: blob.len() / 4 });
    }
    let data: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let name = bin.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Volume::with_spacing(name, header.shape, header.spacing, data)
}

pub fn save_volume_raw(path: &Path, v: &Volume) -> Result<(), VolumeError> {
    let (json, bin) = container_paths(path);
    let header = RawHeader { shape: v.shape, spacing: v.spacing, dtype: "float32".into(), num_classes: None };
    let blob: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write(&bin, &blob)?;
    write(&json, serde_json::to_string(&header).expect("header serializes").as_bytes())
}

/// Loads a uint8 label map. `num_classes` overrides the header value when given.
pub fn load_labels_raw(path: &Path, num_classes: Option<usize>) -> Result<LabelVolume, VolumeError> {
    let (json, bin) = container_paths(path);
    let header = read_header(&json)?;
    if header.dtype != "uint8" {
        return Err(VolumeError::BadHeader {
            path: json,
            reason: format!("expected dtype uint8, found {}", header.dtype),
        });
    }
    let classes = num_classes.or(header.num_classes).ok_or_else(|| VolumeError::BadHeader {
        path: json.clone(),
        reason: "num_classes missing".into(),
    })?;
    let blob = read(&bin)?;
    let expected = voxel_count(header.shape);
    if blob.len() != expected {
        return Err(VolumeError::ShapeMismatch { expected, found: blob.len() });
    }
    LabelVolume::new(header.shape, classes, blob)
}

pub fn save_labels_raw(path: &Path, spacing: [f64; 3], l: &LabelVolume) -> Result<(), VolumeError> {
    let (json, bin) = container_paths(path);
    let header = RawHeader {
        shape: l.shape,
        spacing,
        dtype: "uint8".into(),
        num_classes: Some(l.num_classes),
    };
    write(&bin, &l.data)?;
    write(&json, serde_json::to_string(&header).expect("header serializes").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new("zeros", [4, 4, 4], vec![0.0; 64]).unwrap();
        save_volume_raw(&dir.path().join("zeros"), &v).unwrap();
        let back = load_volume_raw(&dir.path().join("zeros.json")).unwrap();
        assert_eq!(back.shape, [4, 4, 4]);
        assert_eq!(back.data, v.data);
        assert_eq!(back.name, "zeros");
    }

    #[test]
    fn short_blob_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(stem.with_extension("json"), r#"{"shape":[4,4,4],"spacing":[1,1,1],"dtype":"float32"}"#).unwrap();
        fs::write(stem.with_extension("bin"), vec![0u8; 63 * 4]).unwrap();
        assert!(matches!(
            load_volume_raw(&stem),
            Err(VolumeError::ShapeMismatch { expected: 64, found: 63 })
        ));
    }

    #[test]
    fn missing_file_is_unreadable() {
        assert!(matches!(
            load_volume_raw(Path::new("/nonexistent/vol")),
            Err(VolumeError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nan");
        fs::write(stem.with_extension("json"), r#"{"shape":[1,1,2],"spacing":[1,1,1],"dtype":"float32"}"#).unwrap();
        let blob: Vec<u8> = [1.0f32, f32::NAN].iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(stem.with_extension("bin"), blob).unwrap();
        assert!(matches!(load_volume_raw(&stem), Err(VolumeError::NonFiniteData)));
    }

    proptest! {
        #[test]
        fn raw_round_trip_is_exact(
            dims in (1usize..6, 1usize..6, 1usize..6),
            seed in any::<u64>(),
            sx in 0.1f64..4.0,
        ) {
            let shape = [dims.0, dims.1, dims.2];
            let n = voxel_count(shape);
            let mut s = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits(((s >> 33) as u32) & 0x7f7f_ffff)
            }).collect();
            let v = Volume::with_spacing("p", shape, [sx, 1.0, 2.5], data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_volume_raw(&dir.path().join("p"), &v).unwrap();
            let back = load_volume_raw(&dir.path().join("p")).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
