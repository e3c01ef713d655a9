use serde::{Deserialize, Serialize};

use crate::grid::{voxel_count, ClassMap, Shape3};

/// Batch of channel-last f32 volumes: `[batch][h][w][d][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub batch: usize,
    pub shape: Shape3,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(batch: usize, shape: Shape3, channels: usize) -> Self {
        Self { batch, shape, channels, data: vec![0.0; batch * voxel_count(shape) * channels] }
    }

    pub fn from_data(batch: usize, shape: Shape3, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), batch * voxel_count(shape) * channels, "tensor length");
        Self { batch, shape, channels, data }
    }

    /// Stacks single-channel images into a batch.
    pub fn from_images(shape: Shape3, images: &[&[f32]]) -> Self {
        let mut data = Vec::with_capacity(images.len() * voxel_count(shape));
        for img in images {
            assert_eq!(img.len(), voxel_count(shape), "image length");
            data.extend_from_slice(img);
        }
        Self { batch: images.len(), shape, channels: 1, data }
    }

    pub fn sample_len(&self) -> usize {
        voxel_count(self.shape) * self.channels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.batch == other.batch && self.shape == other.shape && self.channels == other.channels
    }

    pub fn to_class_map(&self, i: usize) -> ClassMap {
        ClassMap::new(self.shape, self.channels, self.sample(i).iter().map(|&x| x as f64).collect())
    }

    /// Packs per-sample f64 maps (e.g. gradients) back into a batch tensor.
    pub fn from_class_maps(maps: &[ClassMap]) -> Self {
        let first = &maps[0];
        let mut data = Vec::with_capacity(maps.len() * first.data.len());
        for m in maps {
            assert!(m.same_layout(first), "class map layouts differ");
            data.extend(m.data.iter().map(|&x| x as f32));
        }
        Self { batch: maps.len(), shape: first.shape, channels: first.channels, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_layout(other), "tensor layouts differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
