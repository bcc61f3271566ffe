use evlight_core::checkpoint::OptimizerState;
use evlight_core::params::ParamStore;
use evlight_core::Tensor;

use crate::error::{config_ensure, Result};

/// Adam without weight decay. Parameters and both moments are rounded to
/// `f32` after every step, which is what checkpoints store, so a resumed
/// run continues from exactly the same state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, betas: [f64; 2], eps: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape().to_vec()))
                .collect()
        };
        Self {
            lr,
            betas,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn restore(
        store: &ParamStore,
        lr: f64,
        betas: [f64; 2],
        eps: f64,
        state: OptimizerState,
    ) -> Result<Self> {
        config_ensure!(
            state.m.len() == store.len() && state.v.len() == store.len(),
            "optimizer state holds {} moments for {} parameters",
            state.m.len(),
            store.len()
        );
        for (id, (m, v)) in store.ids().zip(state.m.iter().zip(&state.v)) {
            let shape = store.get(id).shape();
            config_ensure!(
                m.shape() == shape && v.shape() == shape,
                "optimizer moment shape differs for `{}`",
                store.name(id)
            );
        }
        Ok(Self {
            lr,
            betas,
            eps,
            step: state.step,
            m: state.m,
            v: state.v,
        })
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// `grads[i]` belongs to the i-th parameter in store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = (b1 * m[j] + (1.0 - b1) * g[j]) as f32 as f64;
                v[j] = (b2 * v[j] + (1.0 - b2) * g[j] * g[j]) as f32 as f64;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            store.get_mut(id).round_to_f32();
        }
    }
}
