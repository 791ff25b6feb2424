use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::Tensor;

/// SGD with momentum; L2 weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    /// Apply one update. `grads` follows [`Model::parameters_mut`] order.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.parameters_mut();
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.data.len())
        {
            self.velocity = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        let factor = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + factor * gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` towards zero over `epochs`, evaluated at
/// the start of `epoch`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}
