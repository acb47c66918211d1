use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 || lr < 0.0 {
            return Err(Error::contract(format!(
                "optimizer needs lr >= 0, momentum in [0,1), weight decay >= 0; got {lr}, {momentum}, {weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        })
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// One update, `grads` aligned with the iteration order of `params`:
    /// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
    pub fn sgd_step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!("{} grads for {} params", grads.len(), params.len())));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        }
        for ((param, grad), buf) in params.tensors_mut().zip(grads).zip(&mut self.buffers) {
            if param.shape() != grad.shape() || buf.shape() != param.shape() {
                return Err(Error::dim(format!(
                    "sgd: param {:?}, grad {:?}, buffer {:?}",
                    param.shape(),
                    grad.shape(),
                    buf.shape()
                )));
            }
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}
