//! Semi-supervised 3D segmentation with prototype consistency learning.
//!
//! A mean-teacher pair is trained on a few labeled and many unlabeled
//! volumes. The teacher's head ensemble yields pseudo-labels weighted by a
//! joint entropy/variance reliability map; class prototypes pooled from
//! labeled, unlabeled and CutMix-augmented streams are fused and compared to
//! voxel features through cosine similarity maps.

pub mod augmentation;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod registry;
pub mod trainer;
pub mod uncertainty;
pub mod volume_io;
