//! Experiment configuration: flat `section.key = value` text.
//!
//! ```text
//! # comments start with '#'
//! data.source = synthetic
//! stream.base = 5
//! ssim.p = 0.1
//! sweep.mode = none, s2il
//! run.seeds = 0, 1, 2
//! ```
//!
//! [`ExperimentConfig::echo`] writes every key, and parsing the echo gives
//! back an equal value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticConfig;
use crate::distill::SsimParams;
use crate::engine::{DistillMode, TrainConfig};
use crate::error::{Error, Result};
use crate::exemplar::MemoryPolicy;
use crate::net::{BackboneConfig, GradCamScore};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

/// Lists of values to cross; an empty axis keeps the base setting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepAxes {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    /// Component tags such as `lcs` or `cs`.
    pub components: Vec<String>,
    pub modes: Vec<DistillMode>,
}

/// One cell of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub mode: DistillMode,
    pub ssim: SsimParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub base_classes: usize,
    pub increment: usize,
    pub order_seed: u64,
    /// Channels, kernel and pooling; input size and channels come from the data.
    pub backbone: BackboneConfig,
    pub proxies_per_class: usize,
    pub margin: f64,
    pub scale_init: f64,
    /// Seed and oracle flag are set per run from `seeds` and `oracle`.
    pub train: TrainConfig,
    pub fd_weights: Option<PathBuf>,
    pub sweep: SweepAxes,
    pub seeds: Vec<u64>,
    /// Also train the oracle for every seed.
    pub oracle: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            base_classes: 5,
            increment: 1,
            order_seed: 1993,
            backbone: BackboneConfig::default(),
            proxies_per_class: 10,
            margin: 0.6,
            scale_init: 1.0,
            train: TrainConfig::default(),
            fd_weights: None,
            sweep: SweepAxes::default(),
            seeds: vec![0],
            oracle: false,
            output: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    match v.trim() {
        "" | "none" => None,
        p => Some(PathBuf::from(p)),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut synth = SyntheticConfig::default();
        let mut source = None;
        let mut memory_kind = "budget".to_string();
        let mut memory_size = 2000usize;
        for (k, v) in &entries {
            let v = v.as_str();
            let t = &mut cfg.train;
            match k.as_str() {
                "data.source" => source = Some(v.to_string()),
                "data.classes" => synth.classes = parse_num(k, v)?,
                "data.per_class" => synth.per_class = parse_num(k, v)?,
                "data.size" => synth.size = parse_num(k, v)?,
                "data.noise" => synth.noise = parse_num(k, v)?,
                "data.seed" => synth.seed = parse_num(k, v)?,
                "stream.base" => cfg.base_classes = parse_num(k, v)?,
                "stream.increment" => cfg.increment = parse_num(k, v)?,
                "stream.order_seed" => cfg.order_seed = parse_num(k, v)?,
                "model.channels" => cfg.backbone.channels = parse_list(k, v)?,
                "model.pool" => {
                    cfg.backbone.pool_after = v
                        .split(',')
                        .map(|s| parse_bool(k, s))
                        .collect::<Result<_>>()?
                }
                "model.kernel" => cfg.backbone.kernel = parse_num(k, v)?,
                "model.last_relu" => cfg.backbone.last_relu = parse_bool(k, v)?,
                "model.proxies" => cfg.proxies_per_class = parse_num(k, v)?,
                "model.margin" => cfg.margin = parse_num(k, v)?,
                "model.scale" => cfg.scale_init = parse_num(k, v)?,
                "train.epochs" => t.epochs = parse_num(k, v)?,
                "train.batch" => t.batch = parse_num(k, v)?,
                "train.lr" => t.lr = parse_num(k, v)?,
                "train.incremental_lr" => {
                    t.incremental_lr = match v {
                        "none" => None,
                        _ => Some(parse_num(k, v)?),
                    }
                }
                "train.momentum" => t.momentum = parse_num(k, v)?,
                "train.weight_decay" => t.weight_decay = parse_num(k, v)?,
                "train.lambda" => t.lambda_base = parse_num(k, v)?,
                "train.clip" => {
                    t.clip_norm = match v {
                        "none" => None,
                        _ => Some(parse_num(k, v)?),
                    }
                }
                "train.mode" => t.mode = v.parse()?,
                "train.finetune_epochs" => t.finetune_epochs = parse_num(k, v)?,
                "train.finetune_lr" => t.finetune_lr = parse_num(k, v)?,
                "train.finetune_distill" => t.finetune_distill = parse_bool(k, v)?,
                "ssim.p" => t.ssim.p = parse_num(k, v)?,
                "ssim.q" => t.ssim.q = parse_num(k, v)?,
                "ssim.r" => t.ssim.r = parse_num(k, v)?,
                "ssim.c1" => t.ssim.c1 = parse_num(k, v)?,
                "ssim.c2" => t.ssim.c2 = parse_num(k, v)?,
                "ssim.c3" => t.ssim.c3 = parse_num(k, v)?,
                "ssim.components" => t.ssim.set_components(v)?,
                "ssim.power" => t.ssim.power = v.parse()?,
                "fd.weights" => cfg.fd_weights = opt_path(v),
                "exemplar.policy" => memory_kind = v.to_string(),
                "exemplar.size" => memory_size = parse_num(k, v)?,
                "exemplar.normalize" => t.herding_normalize = parse_bool(k, v)?,
                "analysis.gradcam" => {
                    t.gradcam = match v {
                        "off" | "none" => None,
                        "logit" => Some(GradCamScore::Logit),
                        "probability" => Some(GradCamScore::Probability),
                        _ => return Err(Error::Config(format!("`{k}`: expected off, logit or probability"))),
                    }
                }
                "sweep.p" => cfg.sweep.p = parse_list(k, v)?,
                "sweep.q" => cfg.sweep.q = parse_list(k, v)?,
                "sweep.r" => cfg.sweep.r = parse_list(k, v)?,
                "sweep.components" => {
                    cfg.sweep.components = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                "sweep.mode" => cfg.sweep.modes = parse_list(k, v)?,
                "run.seeds" => cfg.seeds = parse_list(k, v)?,
                "run.oracle" => cfg.oracle = parse_bool(k, v)?,
                "output.dir" => cfg.output = PathBuf::from(v),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.data = match source.as_deref() {
            None | Some("synthetic") => DataSource::Synthetic(synth),
            Some(p) => DataSource::File(PathBuf::from(p)),
        };
        cfg.train.memory = match memory_kind.as_str() {
            "budget" => MemoryPolicy::Budget(memory_size),
            "per_class" => MemoryPolicy::PerClass(memory_size),
            other => return Err(Error::Config(format!("unknown exemplar policy `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if self.backbone.channels.len() != self.backbone.pool_after.len() {
            return Err(Error::Config("model.channels and model.pool differ in length".into()));
        }
        if self.increment == 0 || self.base_classes == 0 {
            return Err(Error::Config("stream.base and stream.increment must be positive".into()));
        }
        for tag in &self.sweep.components {
            SsimParams::default().set_components(tag)?;
        }
        let mut probe = self.train.clone();
        if probe.mode == DistillMode::FdWeighted || self.sweep.modes.contains(&DistillMode::FdWeighted) {
            if self.fd_weights.is_none() {
                return Err(Error::Config("fd_weighted needs fd.weights".into()));
            }
            probe.fd_weights = Some(crate::distill::FdWeights::ones(&[1]));
        }
        probe.validate()
    }

    /// Every key with its current value.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic(synth) => {
                put("data.source", "synthetic".into());
                put("data.classes", synth.classes.to_string());
                put("data.per_class", synth.per_class.to_string());
                put("data.size", synth.size.to_string());
                put("data.noise", synth.noise.to_string());
                put("data.seed", synth.seed.to_string());
            }
            DataSource::File(p) => put("data.source", p.display().to_string()),
        }
        put("stream.base", self.base_classes.to_string());
        put("stream.increment", self.increment.to_string());
        put("stream.order_seed", self.order_seed.to_string());
        put("model.channels", join(&self.backbone.channels));
        put("model.pool", join(&self.backbone.pool_after));
        put("model.kernel", self.backbone.kernel.to_string());
        put("model.last_relu", self.backbone.last_relu.to_string());
        put("model.proxies", self.proxies_per_class.to_string());
        put("model.margin", self.margin.to_string());
        put("model.scale", self.scale_init.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch", t.batch.to_string());
        put("train.lr", t.lr.to_string());
        put("train.incremental_lr", t.incremental_lr.map_or("none".into(), |r| r.to_string()));
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.lambda", t.lambda_base.to_string());
        put("train.clip", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        put("train.mode", t.mode.to_string());
        put("train.finetune_epochs", t.finetune_epochs.to_string());
        put("train.finetune_lr", t.finetune_lr.to_string());
        put("train.finetune_distill", t.finetune_distill.to_string());
        put("ssim.p", t.ssim.p.to_string());
        put("ssim.q", t.ssim.q.to_string());
        put("ssim.r", t.ssim.r.to_string());
        put("ssim.c1", t.ssim.c1.to_string());
        put("ssim.c2", t.ssim.c2.to_string());
        put("ssim.c3", t.ssim.c3.to_string());
        put("ssim.components", t.ssim.components_tag());
        put("ssim.power", t.ssim.power.to_string());
        put(
            "fd.weights",
            self.fd_weights.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        let (kind, size) = match t.memory {
            MemoryPolicy::Budget(n) => ("budget", n),
            MemoryPolicy::PerClass(n) => ("per_class", n),
        };
        put("exemplar.policy", kind.into());
        put("exemplar.size", size.to_string());
        put("exemplar.normalize", t.herding_normalize.to_string());
        put(
            "analysis.gradcam",
            match t.gradcam {
                None => "off",
                Some(GradCamScore::Logit) => "logit",
                Some(GradCamScore::Probability) => "probability",
            }
            .into(),
        );
        put("sweep.p", join(&self.sweep.p));
        put("sweep.q", join(&self.sweep.q));
        put("sweep.r", join(&self.sweep.r));
        put("sweep.components", self.sweep.components.join(", "));
        put("sweep.mode", join(&self.sweep.modes));
        put("run.seeds", join(&self.seeds));
        put("run.oracle", self.oracle.to_string());
        put("output.dir", self.output.display().to_string());
        s
    }

    /// The sweep grid in row-major order (mode, p, q, r, components). Only
/// s2il points expand over the SSIM axes.
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        let base = &self.train.ssim;
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let modes = if self.sweep.modes.is_empty() {
            vec![self.train.mode]
        } else {
            self.sweep.modes.clone()
        };
        let comps = if self.sweep.components.is_empty() {
            vec![base.components_tag()]
        } else {
            self.sweep.components.clone()
        };
        let sw = &self.sweep;
        let plain_s2il = sw.p.is_empty() && sw.q.is_empty() && sw.r.is_empty() && sw.components.is_empty();
        let mut out = Vec::new();
        for &mode in &modes {
            if mode != DistillMode::S2il {
                out.push(SweepPoint {
                    label: mode.to_string(),
                    mode,
                    ssim: *base,
                });
                continue;
            }
            for p in or(&self.sweep.p, base.p) {
                for q in or(&self.sweep.q, base.q) {
                    for r in or(&self.sweep.r, base.r) {
                        for tag in &comps {
                            let mut ssim = *base;
                            ssim.p = p;
                            ssim.q = q;
                            ssim.r = r;
                            ssim.set_components(tag)?;
                            ssim.validate()?;
                            let label = if plain_s2il {
                                mode.to_string()
                            } else {
                                format!("{mode}_p{p}_q{q}_r{r}_{tag}")
                            };
                            out.push(SweepPoint { label, mode, ssim });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_echo_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "\
            # toy run\n\
            data.classes = 6\n\
            data.noise = 0.35\n\
            stream.base = 2\n\
            stream.increment = 2\n\
            model.channels = 4, 8\n\
            model.pool = 1, 0\n\
            train.clip = 1.5\n\
            ssim.components = cs\n\
            exemplar.policy = per_class\n\
            exemplar.size = 7\n\
            sweep.mode = none, s2il\n\
            sweep.r = 1, 8\n\
            run.seeds = 3, 4\n\
            analysis.gradcam = logit\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.memory, MemoryPolicy::PerClass(7));
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
        let labels: Vec<String> = cfg.sweep_points().unwrap().into_iter().map(|p| p.label).collect();
        assert_eq!(labels, ["none", "s2il_p0.1_q8_r1_cs", "s2il_p0.1_q8_r8_cs"]);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in ["nonsense", "foo.bar = 1", "train.lr = fast", "train.lr = 1\ntrain.lr = 2", "sweep.mode = warp"] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
