use serde::{Deserialize, Serialize};

use super::graph::{ParamGrads, ParamSet};
use super::ModelError;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<(), ModelError> {
        if grads.0.len() != params.entries.len() || self.m.len() != params.entries.len() {
            return Err(ModelError::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.0[i]);
            if g.len() != entry.data.len() {
                return Err(ModelError::ShapeMismatch(format!("gradient for `{}` has wrong length", entry.name)));
            }
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                entry.data[j] -= step_size * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::new();
        ps.push("x", vec![3], vec![1.0, -2.0, 0.5]);
        let grads = ParamGrads(vec![vec![4.0, -0.1, 0.0]]);
        let mut adam = Adam::new(&ps, 0.001);
        adam.update(&mut ps, &grads).unwrap();
        let d = &ps.entries[0].data;
        assert!((d[0] - 0.999).abs() < 1e-6);
        assert!((d[1] + 1.999).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", vec![2], vec![3.0, -4.0]);
        let mut adam = Adam::new(&ps, 0.05);
        for _ in 0..2000 {
            let g = ParamGrads(vec![ps.entries[0].data.iter().map(|x| 2.0 * x).collect()]);
            adam.update(&mut ps, &g).unwrap();
        }
        assert!(ps.entries[0].data.iter().all(|x| x.abs() < 1e-2));
    }
}
