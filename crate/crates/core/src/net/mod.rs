//! Convolutional backbone, pooled features and the growing proxy classifier.

mod gradcam;
mod head;
mod snapshot;

pub use gradcam::{gradcam_from_scores, gradcam_importance, GradCamScore};
pub use head::{lsc_loss, ProxyHead};
pub use snapshot::SNAPSHOT_VERSION;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Stabilizer used when normalizing pooled features and proxies.
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// 2×2 max-pool after the block when set.
    pub pool_after: Vec<bool>,
    /// ReLU on the last block. Off leaves signed last-layer maps.
    pub last_relu: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            input_size: 32,
            channels: vec![16, 32, 64],
            kernel: 3,
            pool_after: vec![true, true, false],
            last_relu: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one layer with nonzero channels".into()));
        }
        if self.pool_after.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "{} pool flags for {} layers",
                self.pool_after.len(),
                self.channels.len()
            )));
        }
        if self.kernel.is_multiple_of(2) || self.in_channels == 0 {
            return Err(Error::Config("kernel must be odd and input channels nonzero".into()));
        }
        if self.last_map_size() < 2 {
            return Err(Error::Config(format!(
                "input {}px leaves last-layer maps smaller than 2x2",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side of each layer's output before its optional pool.
    pub fn map_sizes(&self) -> Vec<usize> {
        let mut side = self.input_size;
        let mut out = Vec::with_capacity(self.channels.len());
        for &pool in &self.pool_after {
            out.push(side);
            if pool {
                side /= 2;
            }
        }
        out
    }

    pub fn last_map_size(&self) -> usize {
        self.map_sizes().last().copied().unwrap_or(0)
    }

    pub fn final_channels(&self) -> usize {
        *self.channels.last().expect("validated backbone has layers")
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub proxies_per_class: usize,
    pub margin: f64,
    pub scale_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            proxies_per_class: 10,
            margin: 0.6,
            scale_init: 1.0,
        }
    }
}

/// Convolution blocks `conv -> ReLU -> optional max-pool`; the last ReLU
/// can be switched off.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Backbone {
    /// He-normal weights, zero biases.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            let fan_in = cin * config.kernel * config.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..cout * fan_in).map(|_| normal.sample(rng)).collect();
            weights.push(Tensor::new(vec![cout, cin, config.kernel, config.kernel], data)?);
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        Ok(Backbone { config, weights, biases })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &cout in &config.channels {
            weights.push(Tensor::zeros(&[cout, cin, config.kernel, config.kernel]));
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        Ok(Backbone { config, weights, biases })
    }
}

/// Per-layer maps, pooled last-layer feature and class similarities of one
/// forward pass. All handles refer to the tape the pass was recorded on.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// Post-activation output of every block, `[B, C_i, H_i, W_i]`.
    pub layers: Vec<Var>,
    /// Global average of the last layer, `[B, C_L]`.
    pub pooled: Var,
    /// Aggregated cosine similarity per class slot, `[B, slots]`.
    pub scores: Var,
}

impl FeatureBundle {
    pub fn last_layer(&self) -> Var {
        *self.layers.last().expect("bundle has at least one layer")
    }
}

/// Model parameters placed on a tape for one pass.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub proxies: Option<Var>,
    pub scale: Var,
}

impl BoundModel {
    /// Parameter handles in the order of [`Model::parameters_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(*w);
            v.push(*b);
        }
        v.extend(self.proxies);
        v.push(self.scale);
        v
    }
}

/// Backbone, global average pooling and proxy head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: ProxyHead,
}

/// Mutable view of one parameter buffer for the optimizer.
pub struct ParamMut<'a> {
    pub data: &'a mut [f64],
    /// Whether weight decay applies (biases and the scale are exempt).
    pub decay: bool,
}

impl Model {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let head = ProxyHead::new(
            config.backbone.final_channels(),
            config.proxies_per_class,
            config.margin,
            config.scale_init,
        )?;
        Ok(Model { backbone, head })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config.clone(),
            proxies_per_class: self.head.proxies_per_class(),
            margin: self.head.margin(),
            scale_init: self.head.scale_floor(),
        }
    }

    /// Register every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let conv_w = self
            .backbone
            .weights
            .iter()
            .map(|w| tape.leaf(w.clone(), trainable))
            .collect();
        let conv_b = self
            .backbone
            .biases
            .iter()
            .map(|b| tape.leaf(b.clone(), trainable))
            .collect();
        let proxies = self.head.proxy_tensor().map(|p| tape.leaf(p, trainable));
        let scale = tape.leaf(Tensor::scalar(self.head.scale()), trainable);
        BoundModel {
            conv_w,
            conv_b,
            proxies,
            scale,
        }
    }

    /// Parameter buffers in the order of [`BoundModel::vars`].
    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (w, b) in self.backbone.weights.iter_mut().zip(self.backbone.biases.iter_mut()) {
            out.push(ParamMut {
                data: w.data_mut(),
                decay: true,
            });
            out.push(ParamMut {
                data: b.data_mut(),
                decay: false,
            });
        }
        let (proxies, scale) = self.head.buffers_mut();
        if let Some(p) = proxies {
            out.push(ParamMut { data: p, decay: true });
        }
        out.push(ParamMut {
            data: std::slice::from_mut(scale),
            decay: false,
        });
        out
    }

    /// Stack images (`[C, H, W]` each, row-major) into a batch tensor.
    pub fn batch_from_images(&self, images: &[&[f32]]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let cfg = &self.backbone.config;
        let len = cfg.input_len();
        let mut data = Vec::with_capacity(images.len() * len);
        for (i, img) in images.iter().enumerate() {
            if img.len() != len {
                return Err(Error::dim(
                    "batch",
                    format!("image {i} has {} values, model expects {len}", img.len()),
                ));
            }
            data.extend(img.iter().map(|&v| v as f64));
        }
        Tensor::new(
            vec![images.len(), cfg.in_channels, cfg.input_size, cfg.input_size],
            data,
        )
    }

    /// Backbone only: per-layer maps and the pooled last-layer feature.
    pub fn forward_features(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<(Vec<Var>, Var)> {
        let cfg = &self.backbone.config;
        let expect = [cfg.in_channels, cfg.input_size, cfg.input_size];
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::dim(
                "forward",
                format!("input {shape:?} does not match [B, {}, {}, {}]", expect[0], expect[1], expect[2]),
            ));
        }
        let pad = cfg.kernel / 2;
        let mut h = x;
        let mut layers = Vec::with_capacity(cfg.channels.len());
        for (i, &pool) in cfg.pool_after.iter().enumerate() {
            let z = tape.conv2d(h, bound.conv_w[i], bound.conv_b[i], 1, pad)?;
            let a = if i + 1 < cfg.channels.len() || cfg.last_relu {
                tape.relu(z)?
            } else {
                z
            };
            layers.push(a);
            h = if pool { tape.max_pool2d(a, 2)? } else { a };
        }
        let pooled = tape.global_avg_pool(*layers.last().expect("validated backbone"))?;
        Ok((layers, pooled))
    }

    /// Class similarities for pooled features `[B, D]`.
    pub fn head_scores(&self, tape: &mut Tape, bound: &BoundModel, pooled: Var) -> Result<Var> {
        let proxies = bound
            .proxies
            .ok_or_else(|| Error::contract("classifier head has no class slots"))?;
        let f = tape.normalize_rows(pooled, NORM_EPS)?;
        let p = tape.normalize_rows(proxies, NORM_EPS)?;
        let pt = tape.transpose(p)?;
        let sims = tape.matmul(f, pt)?;
        tape.proxy_aggregate(sims, self.head.proxies_per_class())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<FeatureBundle> {
        let (layers, pooled) = self.forward_features(tape, bound, x)?;
        let scores = self.head_scores(tape, bound, pooled)?;
        Ok(FeatureBundle {
            layers,
            pooled,
            scores,
        })
    }

    /// Gradient-free forward returning pooled features `[B, D]` and class
    /// similarities `[B, slots]` as plain tensors.
    pub fn infer(&self, batch: Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let bundle = self.forward(&mut tape, &bound, x)?;
        Ok((tape.value(bundle.pooled).clone(), tape.value(bundle.scores).clone()))
    }

    /// Pooled features only (usable before the head has any slot).
    pub fn embed(&self, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch);
        let (_, pooled) = self.forward_features(&mut tape, &bound, x)?;
        Ok(tape.value(pooled).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                input_size: 8,
                channels: vec![4, 6],
                kernel: 3,
                pool_after: vec![true, false],
                last_relu: true,
            },
            proxies_per_class: 3,
            margin: 0.6,
            scale_init: 1.0,
        }
    }

    #[test]
    fn zero_weights_zero_input_gives_zero_features() {
        let cfg = small_config();
        let model = Model {
            backbone: Backbone::zeros(cfg.backbone.clone()).unwrap(),
            head: ProxyHead::new(6, 3, 0.6, 1.0).unwrap(),
        };
        let feats = model.embed(Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert!(feats.data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 1, 8, 8]));
        let (layers, _) = model.forward_features(&mut tape, &bound, x).unwrap();
        for l in layers {
            assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn score_shape_is_batch_by_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(&small_config(), &mut rng).unwrap();
        let emb = vec![vec![1.0; 6], vec![-1.0; 6]];
        model.head.grow(&[7, 9], &emb, &mut rng).unwrap();
        let x = Tensor::new(vec![5, 1, 8, 8], (0..320).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let (pooled, scores) = model.infer(x).unwrap();
        assert_eq!(pooled.shape(), &[5, 6]);
        assert_eq!(scores.shape(), &[5, 2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let a = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(a.embed(x.clone()).unwrap(), a.embed(x).unwrap());
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let model = Model::new(&small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            model.embed(Tensor::zeros(&[1, 3, 8, 8])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pooled_is_global_average_of_last_layer() {
        let model = Model::new(&small_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap());
        let (layers, pooled) = model.forward_features(&mut tape, &bound, x).unwrap();
        let last = tape.value(*layers.last().unwrap());
        let plane = last.shape()[2] * last.shape()[3];
        for (c, &p) in tape.value(pooled).data().iter().enumerate() {
            let m = last.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
            assert!((m - p).abs() < 1e-10);
        }
    }

    #[test]
    fn default_backbone_keeps_last_maps_at_least_two_wide() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.map_sizes(), vec![32, 16, 8]);
        let tiny = BackboneConfig {
            input_size: 4,
            ..cfg
        };
        assert!(tiny.validate().is_err());
    }
}
