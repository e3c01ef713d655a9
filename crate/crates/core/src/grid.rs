//! Dense voxel maps shared by the uncertainty, prototype and loss code.
//!
//! All maps use (H, W, D) row-major voxel order. Multi-channel maps are
//! stored voxel-major (channel-last): `data[voxel * channels + c]`.

use serde::{Deserialize, Serialize};

pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, h: usize, w: usize, d: usize) -> usize {
    (h * shape[1] + w) * shape[2] + d
}

#[inline]
pub fn unflatten(shape: Shape3, idx: usize) -> [usize; 3] {
    let d = idx % shape[2];
    let w = (idx / shape[2]) % shape[1];
    let h = idx / (shape[1] * shape[2]);
    [h, w, d]
}

/// One scalar per voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    pub shape: Shape3,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Self {
        assert_eq!(voxel_count(shape), data.len(), "scalar map length");
        Self { shape, data }
    }

    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self { shape, data: vec![value; voxel_count(shape)] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance over voxels.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }
}

/// `channels` values per voxel: class probabilities, logits, prototype
/// features or similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub shape: Shape3,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ClassMap {
    pub fn new(shape: Shape3, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(voxel_count(shape) * channels, data.len(), "class map length");
        Self { shape, channels, data }
    }

    pub fn zeros(shape: Shape3, channels: usize) -> Self {
        Self { shape, channels, data: vec![0.0; voxel_count(shape) * channels] }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, v: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[v * c..(v + 1) * c]
    }

    pub fn same_layout(&self, other: &ClassMap) -> bool {
        self.shape == other.shape && self.channels == other.channels
    }

    /// One-hot encoding of an integer label map.
    pub fn one_hot(labels: &[u8], shape: Shape3, channels: usize) -> Self {
        let mut out = Self::zeros(shape, channels);
        for (v, &l) in labels.iter().enumerate() {
            out.data[v * channels + l as usize] = 1.0;
        }
        out
    }

    /// Per-voxel argmax; ties resolve to the lowest channel index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.voxels())
            .map(|v| {
                let row = self.voxel(v);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Numerically stable softmax over the channel axis of every voxel.
pub fn softmax_channels(logits: &ClassMap) -> ClassMap {
    let mut out = logits.clone();
    for v in 0..out.voxels() {
        softmax_in_place(out.voxel_mut(v));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_c = p_c (g_c - sum_k g_k p_k)`.
pub fn softmax_backward(probs: &ClassMap, grad_probs: &ClassMap) -> ClassMap {
    let mut out = ClassMap::zeros(probs.shape, probs.channels);
    for v in 0..probs.voxels() {
        let p = probs.voxel(v);
        let g = grad_probs.voxel(v);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let dz = out.voxel_mut(v);
        for c in 0..p.len() {
            dz[c] = p[c] * (g[c] - dot);
        }
    }
    out
}
