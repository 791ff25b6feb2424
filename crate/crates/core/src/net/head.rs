use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Std of the per-element Gaussian jitter added to imprinted proxies.
const IMPRINT_JITTER: f64 = 0.01;

/// Cosine classifier with `k` unit-norm proxies per class slot, a learnable
/// scale and a fixed margin.
///
/// The scale is projected back to at least its initial value after every
/// update. With the margin taken off the true class, the first gradients on
/// the scale point below zero, and a negative scale rewards pushing the true
/// class away.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyHead {
    dim: usize,
    k: usize,
    margin: f64,
    scale: f64,
    scale_floor: f64,
    /// Class id held by each slot, in slot order.
    classes: Vec<u32>,
    /// `[slots · k, dim]`, row-major.
    proxies: Vec<f64>,
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl ProxyHead {
    pub fn new(dim: usize, k: usize, margin: f64, scale: f64) -> Result<Self> {
        if dim == 0 || k == 0 {
            return Err(Error::Config("proxy head needs nonzero feature dim and proxy count".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) || !margin.is_finite() {
            return Err(Error::Config(format!("invalid scale {scale} or margin {margin}")));
        }
        Ok(ProxyHead {
            dim,
            k,
            margin,
            scale,
            scale_floor: scale,
            classes: Vec::new(),
            proxies: Vec::new(),
        })
    }

    /// Rebuild a head from stored parts (used by snapshot loading).
    pub(crate) fn from_parts(
        dim: usize,
        k: usize,
        margin: f64,
        scale: f64,
        scale_floor: f64,
        classes: Vec<u32>,
        proxies: Vec<f64>,
    ) -> Result<Self> {
        let mut head = Self::new(dim, k, margin, scale_floor)?;
        head.scale = scale;
        if proxies.len() != classes.len() * k * dim {
            return Err(Error::contract("proxy buffer does not match class registry"));
        }
        head.classes = classes;
        head.proxies = proxies;
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn proxies_per_class(&self) -> usize {
        self.k
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Lower bound the scale is held to (its initial value).
    pub fn scale_floor(&self) -> f64 {
        self.scale_floor
    }

    pub fn slots(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn slot_of(&self, class: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn proxies(&self) -> &[f64] {
        &self.proxies
    }

    /// Proxy matrix `[slots · k, dim]`, or `None` before the first growth.
    pub fn proxy_tensor(&self) -> Option<Tensor> {
        if self.classes.is_empty() {
            return None;
        }
        Some(
            Tensor::new(vec![self.classes.len() * self.k, self.dim], self.proxies.clone())
                .expect("proxy buffer matches registry"),
        )
    }

    pub(crate) fn buffers_mut(&mut self) -> (Option<&mut [f64]>, &mut f64) {
        let proxies = if self.proxies.is_empty() {
            None
        } else {
            Some(self.proxies.as_mut_slice())
        };
        (proxies, &mut self.scale)
    }

    /// Add one slot per new class, each with `k` proxies imprinted from the
    /// unit-normalized class-mean embedding plus small Gaussian jitter.
    /// Existing slots are left untouched.
    pub fn grow(&mut self, new_classes: &[u32], embeddings: &[Vec<f64>], rng: &mut impl Rng) -> Result<()> {
        if new_classes.len() != embeddings.len() {
            return Err(Error::contract(format!(
                "{} new classes but {} embeddings",
                new_classes.len(),
                embeddings.len()
            )));
        }
        for (i, c) in new_classes.iter().enumerate() {
            if self.classes.contains(c) || new_classes[..i].contains(c) {
                return Err(Error::contract(format!("class {c} already has a slot")));
            }
        }
        if let Some(e) = embeddings.iter().find(|e| e.len() != self.dim) {
            return Err(Error::dim(
                "grow_head",
                format!("embedding of length {} for feature dim {}", e.len(), self.dim),
            ));
        }
        let jitter = Normal::new(0.0, IMPRINT_JITTER).expect("positive std");
        let standard = Normal::new(0.0, 1.0).expect("positive std");
        for (&class, emb) in new_classes.iter().zip(embeddings) {
            let mut mean = emb.clone();
            if unit(&mut mean) < 1e-12 {
                warn!("class {class}: zero-norm embedding, imprinting a random direction");
                mean = (0..self.dim).map(|_| standard.sample(rng)).collect();
                unit(&mut mean);
            }
            for _ in 0..self.k {
                let mut p: Vec<f64> = mean.iter().map(|m| m + jitter.sample(rng)).collect();
                unit(&mut p);
                self.proxies.extend_from_slice(&p);
            }
            self.classes.push(class);
        }
        Ok(())
    }

    /// Project every proxy back onto the unit sphere and the scale back
    /// above its floor.
    pub fn renormalize(&mut self) {
        for row in self.proxies.chunks_mut(self.dim) {
            unit(row);
        }
        self.scale = self.scale.max(self.scale_floor);
    }
}

/// Margin-shifted softmax cross-entropy over class similarities.
///
/// `scores` are aggregated proxy similarities `[B, C]`; the true class has
/// `margin` subtracted, every logit is multiplied by `scale` (a one-element
/// variable), and the loss is the batch mean of the negative
/// log-probability of the true slot.
pub fn lsc_loss(tape: &mut Tape, scores: Var, scale: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(
            "lsc_loss",
            format!("{} labels for scores {shape:?}", labels.len()),
        ));
    }
    let classes = shape[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label slot {bad} outside {classes} known classes")));
    }
    let mut shift = vec![0.0; labels.len() * classes];
    for (b, &l) in labels.iter().enumerate() {
        shift[b * classes + l] = margin;
    }
    let shift = tape.constant(Tensor::new(shape, shift)?);
    let shifted = tape.sub(scores, shift)?;
    let logits = tape.scale_by(shifted, scale)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}
