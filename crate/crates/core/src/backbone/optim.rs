use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSelection, SegmentationModel};

/// Adam over a fixed parameter selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    indices: Vec<usize>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &SegmentationModel, selection: &ParamSelection, lr: f64) -> Self {
        let zeros = |&i: &usize| vec![0.0f32; model.param_at(i).len()];
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            indices: selection.indices.clone(),
            m: selection.indices.iter().map(zeros).collect(),
            v: selection.indices.iter().map(zeros).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
    }

    pub fn step(&mut self, model: &mut SegmentationModel, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, &idx) in self.indices.iter().enumerate() {
            let Some(g) = grads.get(idx) else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = model.param_at_mut(idx);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                p[j] = (p[j] as f64 - update) as f32;
            }
        }
    }
}
