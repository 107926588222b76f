//! SGD (Nesterov momentum) and Adam / AdamW over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{EntryKind, ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f32,
    pub nesterov: bool,
    /// L2 penalty added to the gradient.
    pub weight_decay: f32,
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) {
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        let SgdConfig {
            momentum,
            nesterov,
            weight_decay,
        } = self.cfg;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let Some(g) = grads.0.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let w = entry.value.data_mut();
            let buf = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((wv, &gv), bv) in w.iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + weight_decay * *wv;
                *bv = momentum * *bv + d;
                let step = if nesterov { d + momentum * *bv } else { *bv };
                *wv -= lr * step;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn adam(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr, beta1, beta2)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let Some(g) = grads.0.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((wv, &gv), mv), vv) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                if c.weight_decay != 0.0 {
                    *wv -= c.lr * c.weight_decay * *wv;
                }
                *wv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn sgd_nesterov_matches_hand_computation() {
        let mut s = store_with(1.0);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
        });
        let g = ParamGrads(vec![Some(Tensor::scalar(1.0))]);
        opt.step(&mut s, &g, 0.1);
        // buf = 1, step = 1 + 0.9 = 1.9
        assert!((s.entries()[0].value.data()[0] - (1.0 - 0.19)).abs() < 1e-6);
        opt.step(&mut s, &g, 0.1);
        // buf = 1.9, step = 1 + 1.71 = 2.71
        assert!((s.entries()[0].value.data()[0] - (0.81 - 0.271)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = store_with(0.0);
        let mut opt = Adam::new(AdamConfig::adam(2e-4, 0.5, 0.999));
        opt.step(&mut s, &ParamGrads(vec![Some(Tensor::scalar(3.0))]));
        assert!((s.entries()[0].value.data()[0] + 2e-4).abs() < 1e-8);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut s = store_with(1.0);
        let mut opt = Adam::new(AdamConfig::adamw(0.1, 0.5, 0.999, 0.5));
        opt.step(&mut s, &ParamGrads(vec![Some(Tensor::scalar(0.0))]));
        assert!((s.entries()[0].value.data()[0] - 0.95).abs() < 1e-6);
    }
}
