use omg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// SGD with classical momentum: `v = mu * v + g`, `theta -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub buffers: Vec<Option<Tensor<f32>>>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(momentum: f64, params: usize) -> Self {
        Sgd { momentum, buffers: vec![None; params], steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64) -> Result<()> {
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient shape {:?} for parameter of shape {:?}", g.shape(), p.shape())));
            }
            let v = self.buffers[id.0].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        self.steps += 1;
        Ok(())
    }
}
