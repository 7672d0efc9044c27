use crate::autodiff::Mat;
use crate::nn::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers mirror the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self, id: ParamId) -> (&Mat, &Mat) {
        (&self.first[id.index()], &self.second[id.index()])
    }

    /// Apply one update to the parameters listed in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Mat)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
