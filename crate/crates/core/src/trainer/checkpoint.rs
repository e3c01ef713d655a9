//! `EPCL1` checkpoint container: magic bytes, a little-endian `u64` header
//! length, a JSON header, then little-endian `f32` blobs for the student,
//! teacher and both optimizer moments in parameter order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, TrainState};
use crate::model::{Adam, ParamEntry, ParamSet, TeacherStudentPair};

pub const MAGIC: &[u8; 5] = b"EPCL1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    iteration: usize,
    seed: u64,
    ema_decay: f64,
    adam: AdamHeader,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::BadCheckpoint(msg.into())
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes the state; the write goes to a temporary sibling that is then
/// renamed over `path`.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<(), TrainError> {
    let student = &state.pair.student;
    let header = Header {
        config: config.clone(),
        iteration: state.iteration,
        seed: config.seed,
        ema_decay: state.pair.ema_decay,
        adam: AdamHeader {
            lr: state.adam.lr,
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            eps: state.adam.eps,
            step: state.adam.step,
        },
        params: student.entries.iter().map(|e| (e.name.clone(), e.dims.clone())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(json.len() + 13 + student.num_scalars() * 16);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for e in &student.entries {
        push_f32s(&mut bytes, &e.data);
    }
    for e in &state.pair.teacher.entries {
        push_f32s(&mut bytes, &e.data);
    }
    for m in &state.adam.m {
        push_f32s(&mut bytes, m);
    }
    for v in &state.adam.v {
        push_f32s(&mut bytes, v);
    }

    let io = |source| TrainError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TrainError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("blob too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Reads a checkpoint back into its config and training state.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState), TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad(format!("{} is not an EPCL1 checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("header: {e}")))?;
    let sizes: Vec<usize> = header.params.iter().map(|(_, d)| d.iter().product()).collect();
    let read_set = |r: &mut Reader<'_>| -> Result<Vec<Vec<f32>>, TrainError> {
        sizes.iter().map(|&n| r.f32s(n)).collect()
    };
    let student_data = read_set(&mut r)?;
    let teacher_data = read_set(&mut r)?;
    let m = read_set(&mut r)?;
    let v = read_set(&mut r)?;
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let build = |data: Vec<Vec<f32>>| ParamSet {
        entries: header
            .params
            .iter()
            .zip(data)
            .map(|((name, dims), data)| ParamEntry { name: name.clone(), dims: dims.clone(), data })
            .collect(),
    };
    let a = &header.adam;
    let state = TrainState {
        iteration: header.iteration,
        pair: TeacherStudentPair { student: build(student_data), teacher: build(teacher_data), ema_decay: header.ema_decay },
        adam: Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v },
    };
    if header.seed != header.config.seed {
        return Err(bad("seed in header disagrees with config"));
    }
    Ok((header.config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VNet;

    fn state() -> (TrainConfig, TrainState) {
        let config = TrainConfig { patch_size: Some([8, 8, 8]), ..TrainConfig::tiny() };
        let (_, params) = VNet::init(config.backbone(), 3).unwrap();
        let mut adam = Adam::new(&params, 0.001);
        adam.step = 7;
        adam.m[0][0] = 0.25;
        let mut pair = TeacherStudentPair::new(params, 0.99);
        pair.teacher.entries[1].data[0] = -3.5;
        (config, TrainState { iteration: 42, pair, adam })
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.epcl");
        let (config, st) = state();
        save_checkpoint(&path, &config, &st).unwrap();
        let (c2, s2) = load_checkpoint(&path).unwrap();
        assert_eq!(c2, config);
        assert_eq!(s2, st);
        assert!(!dir.path().join("a.epcl.tmp").exists());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.epcl");
        let (config, st) = state();
        save_checkpoint(&path, &config, &st).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::BadCheckpoint(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::BadCheckpoint(_))));
    }
}
