//! AdamW with global-norm gradient clipping.

use crate::config::TrainConfig;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub grad_clip: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to the trainable parameters in `grads`. Returns
    /// the gradient norm before clipping. Frozen parameters are rejected.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<f64> {
        let norm = grads.iter().map(|(_, g)| g.norm().powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, grad) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                return Err(Error::State(format!("optimizer asked to update frozen {}", p.name)));
            }
            if p.value.shape() != grad.shape() {
                return Err(dim_err!("{}: grad {:?} vs value {:?}", p.name, grad.shape(), p.value.shape()));
            }
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, &g) in grad.data().iter().enumerate() {
                let g = g * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
            }
            if self.lr == 0.0 {
                continue;
            }
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}
