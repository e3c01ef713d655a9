//! Segmentation backbone, prototype head, mean-teacher weight management and
//! the optimizer.

mod graph;
pub mod kernels;
mod optim;
mod planar;
mod tensor;
mod vnet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{NodeId, ParamEntry, ParamGrads, ParamSet, Tape};
pub use optim::Adam;
pub use tensor::Tensor;
pub use vnet::{prototype_memory, BackboneConfig, ForwardNodes, PredictionSet, PrototypeMemory, VNet, NUM_HEADS};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("bad spatial size: {0}")]
    BadSpatialSize(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid backbone config: {0}")]
    BadConfig(String),
}

/// Student and teacher weights of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudentPair {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub ema_decay: f64,
}

impl TeacherStudentPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ParamSet, ema_decay: f64) -> Self {
        Self { teacher: student.clone(), student, ema_decay }
    }

    pub fn ema_update(&mut self) -> Result<(), ModelError> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

/// `teacher <- d * teacher + (1 - d) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<(), ModelError> {
    if !teacher.same_layout(student) {
        return Err(ModelError::ShapeMismatch("teacher and student layouts differ".into()));
    }
    let d = decay as f32;
    let rest = (1.0 - decay) as f32;
    for (t, s) in teacher.entries.iter_mut().zip(&student.entries) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = d * *a + rest * b;
        }
    }
    Ok(())
}
