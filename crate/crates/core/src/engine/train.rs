use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, Sgd};
use super::stream::{lambda_schedule, TaskStream};
use crate::data::Dataset;
use crate::distill::{baseline_fd_loss, s2il_loss, FdWeights, SsimParams};
use crate::error::{Error, Result};
use crate::exemplar::{herding_select, ExemplarStore, MemoryPolicy};
use crate::metrics::{GradCamRecord, RunRecord};
use crate::net::{gradcam_importance, lsc_loss, FeatureBundle, GradCamScore, Model, ModelConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Samples per inference pass.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistillMode {
    #[default]
    None,
    /// Unweighted squared-norm distillation on every layer.
    Fd,
    /// Importance-weighted squared-norm distillation.
    FdWeighted,
    /// Structural similarity on the last layer.
    S2il,
}

impl DistillMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::None => "none",
            DistillMode::Fd => "fd",
            DistillMode::FdWeighted => "fd_weighted",
            DistillMode::S2il => "s2il",
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(DistillMode::None),
            "fd" => Ok(DistillMode::Fd),
            "fd_weighted" => Ok(DistillMode::FdWeighted),
            "s2il" => Ok(DistillMode::S2il),
            other => Err(Error::Config(format!("unknown distillation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate for tasks after the first; `lr` when unset.
    pub incremental_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_base: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_distill: bool,
    pub seed: u64,
    pub mode: DistillMode,
    pub oracle: bool,
    pub ssim: SsimParams,
    pub fd_weights: Option<FdWeights>,
    pub memory: MemoryPolicy,
    pub herding_normalize: bool,
    /// Global gradient-norm clip applied before each update.
    pub clip_norm: Option<f64>,
    /// Record base-class Grad-CAM importances when set.
    pub gradcam: Option<GradCamScore>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 32,
            lr: 0.1,
            incremental_lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_base: 4.0,
            finetune_epochs: 10,
            finetune_lr: 0.05,
            finetune_distill: true,
            seed: 0,
            mode: DistillMode::None,
            oracle: false,
            ssim: SsimParams::default(),
            fd_weights: None,
            memory: MemoryPolicy::Budget(2000),
            herding_normalize: true,
            clip_norm: None,
            gradcam: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr, self.incremental_lr.unwrap_or(self.lr), self.finetune_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lambda_base < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1); decay and lambda nonnegative".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("gradient clip norm must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.mode == DistillMode::FdWeighted && self.fd_weights.is_none() {
            return Err(Error::Config("fd_weighted distillation needs an importance weights file".into()));
        }
        self.ssim.validate()
    }
}

/// Frozen previous-task model with its features cached per sample.
pub struct Teacher<'a> {
    model: &'a Model,
    /// Per sample: one flattened map block per cached layer, then the pooled vector.
    cache: HashMap<usize, Vec<Vec<f64>>>,
    layers: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl<'a> Teacher<'a> {
    fn layers_for(model: &Model, mode: DistillMode) -> Vec<usize> {
        let n = model.backbone.config.channels.len();
        match mode {
            DistillMode::None => vec![],
            DistillMode::S2il => vec![n - 1],
            DistillMode::Fd | DistillMode::FdWeighted => (0..n).collect(),
        }
    }

    pub fn new(model: &'a Model, mode: DistillMode) -> Self {
        Teacher {
            model,
            cache: HashMap::new(),
            layers: Self::layers_for(model, mode),
            shapes: Vec::new(),
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Compute and cache teacher features for `ids` not seen before.
    pub fn warm(&mut self, ds: &Dataset, ids: &[usize]) -> Result<()> {
        let missing: Vec<usize> = ids.iter().copied().filter(|i| !self.cache.contains_key(i)).collect();
        for chunk in missing.chunks(EVAL_CHUNK) {
            let images: Vec<&[f32]> = chunk.iter().map(|&i| ds.image(i)).collect();
            let batch = self.model.batch_from_images(&images)?;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false);
            let x = tape.constant(batch);
            let (maps, pooled) = self.model.forward_features(&mut tape, &bound, x)?;
            let mut vars: Vec<Var> = self.layers.iter().map(|&l| maps[l]).collect();
            vars.push(pooled);
            self.shapes = vars.iter().map(|&v| tape.shape(v)[1..].to_vec()).collect();
            for (b, &id) in chunk.iter().enumerate() {
                let per: Vec<Vec<f64>> = vars
                    .iter()
                    .map(|&v| {
                        let t = tape.value(v);
                        let n = t.len() / t.shape()[0];
                        t.data()[b * n..(b + 1) * n].to_vec()
                    })
                    .collect();
                self.cache.insert(id, per);
            }
        }
        Ok(())
    }

    /// Cached features for a batch: one tensor per cached layer, then pooled.
    fn batch(&self, ids: &[usize]) -> Result<Vec<Tensor>> {
        (0..self.shapes.len())
            .map(|k| {
                let mut data = Vec::new();
                for id in ids {
                    let entry = self
                        .cache
                        .get(id)
                        .ok_or_else(|| Error::contract(format!("teacher features missing for sample {id}")))?;
                    data.extend_from_slice(&entry[k]);
                }
                let mut shape = vec![ids.len()];
                shape.extend_from_slice(&self.shapes[k]);
                Tensor::new(shape, data)
            })
            .collect()
    }
}

/// Distillation term for the current batch, or `None` when disabled.
fn distill_term(
    tape: &mut Tape,
    bundle: &FeatureBundle,
    teacher: &Teacher<'_>,
    ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<Var>> {
    if cfg.mode == DistillMode::None {
        return Ok(None);
    }
    let feats = teacher.batch(ids)?;
    let mut vars: Vec<Var> = feats.into_iter().map(|t| tape.constant(t)).collect();
    let pooled = vars.pop().expect("pooled feature is always cached");
    let term = match cfg.mode {
        DistillMode::S2il => s2il_loss(tape, bundle.last_layer(), vars[0], &cfg.ssim)?,
        DistillMode::Fd | DistillMode::FdWeighted => {
            let prev = FeatureBundle {
                layers: vars,
                pooled,
                scores: pooled,
            };
            let weights = if cfg.mode == DistillMode::FdWeighted {
                cfg.fd_weights.as_ref()
            } else {
                None
            };
            baseline_fd_loss(tape, bundle, &prev, weights)?
        }
        DistillMode::None => unreachable!(),
    };
    Ok(Some(term))
}

/// What happened during one optimization phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    /// Training draws per class.
    pub draws: BTreeMap<u32, usize>,
    /// Every sample id that appeared in a batch.
    pub seen_ids: Vec<usize>,
    /// Distillation value on each batch, in order.
    pub distill: Vec<f64>,
    pub mean_loss: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    model: &mut Model,
    ds: &Dataset,
    pool: &[usize],
    teacher: Option<&Teacher<'_>>,
    lambda: f64,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    task: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseStats> {
    let mut stats = PhaseStats::default();
    let mut seen = vec![false; ds.len()];
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    sgd.clip_norm = cfg.clip_norm;
    let mut order = pool.to_vec();
    order.sort_unstable();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let rate = cosine_lr(lr, epoch, epochs);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, ids) in order.chunks(cfg.batch).enumerate() {
            let images: Vec<&[f32]> = ids.iter().map(|&i| ds.image(i)).collect();
            let slots = ids
                .iter()
                .map(|&i| {
                    let c = ds.label(i) as u32;
                    model
                        .head
                        .slot_of(c)
                        .ok_or_else(|| Error::contract(format!("class {c} has no head slot")))
                })
                .collect::<Result<Vec<_>>>()?;
            for &i in ids {
                seen[i] = true;
                *stats.draws.entry(ds.label(i) as u32).or_default() += 1;
            }

            let step = (|| -> Result<(f64, Option<f64>, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let x = tape.constant(model.batch_from_images(&images)?);
                let bundle = model.forward(&mut tape, &bound, x)?;
                let cls = lsc_loss(&mut tape, bundle.scores, bound.scale, &slots, model.head.margin())?;
                let distill = match teacher {
                    Some(t) => distill_term(&mut tape, &bundle, t, ids, cfg)?,
                    None => None,
                };
                let dval = distill.map(|d| tape.value(d).data()[0]);
                let loss = match distill {
                    Some(d) if lambda > 0.0 => {
                        let w = tape.mul_scalar(d, lambda)?;
                        tape.add(cls, w)?
                    }
                    _ => cls,
                };
                let value = tape.value(loss).data()[0];
                let mut grads = tape.backward(loss)?;
                let g = bound
                    .vars()
                    .into_iter()
                    .map(|v| grads.take(v).expect("bound parameters require grad"))
                    .collect();
                Ok((value, dval, g))
            })();
            let (value, dval, grads) = match step {
                Ok(s) => s,
                Err(Error::NumericGuard { op, detail }) => {
                    error!("task {task} epoch {epoch} batch {bi}: {op}: {detail}; sample ids {ids:?}");
                    return Err(Error::NonFiniteLoss {
                        task,
                        epoch,
                        batch: bi,
                        value: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                error!("task {task} epoch {epoch} batch {bi}: loss {value}; sample ids {ids:?}");
                return Err(Error::NonFiniteLoss {
                    task,
                    epoch,
                    batch: bi,
                    value,
                });
            }
            stats.distill.extend(dval);
            sgd.step(model, &grads, rate)?;
            model.head.renormalize();
            total += value;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        debug!("task {task} epoch {epoch}: lr {rate:.4} loss {mean:.5}");
        stats.mean_loss.push(mean);
    }
    stats.seen_ids = (0..ds.len()).filter(|&i| seen[i]).collect();
    Ok(stats)
}

/// Mean pooled feature of each class over the given sample ids.
fn class_means(model: &Model, ds: &Dataset, classes: &[u32], pool: &[usize]) -> Result<Vec<Vec<f64>>> {
    classes
        .iter()
        .map(|&c| {
            let ids: Vec<usize> = pool.iter().copied().filter(|&i| ds.label(i) as u32 == c).collect();
            let feats = embed_ids(model, ds, &ids)?;
            let dim = model.head.dim();
            let mut mean = vec![0.0; dim];
            for f in &feats {
                mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= feats.len().max(1) as f64);
            Ok(mean)
        })
        .collect()
}

fn embed_ids(model: &Model, ds: &Dataset, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let images: Vec<&[f32]> = chunk.iter().map(|&i| ds.image(i)).collect();
        let pooled = model.embed(model.batch_from_images(&images)?)?;
        let d = pooled.shape()[1];
        out.extend(pooled.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Result of the main phase of one task.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub model: Model,
    pub lambda: f64,
    pub stats: PhaseStats,
}

fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Main training phase of task `t`.
///
/// Task 0 starts from a seeded random model and uses the classification
/// loss only. Later tasks copy the previous model, grow the head by
/// imprinting and train on the new data plus the exemplars (or, for the
/// oracle, all training data seen so far) with the selected distillation
/// term against the frozen previous model.
pub fn train_task(
    prev: Option<&Model>,
    model_cfg: &ModelConfig,
    ds: &Dataset,
    stream: &TaskStream,
    t: usize,
    store: &ExemplarStore,
    cfg: &TrainConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    let cur_task = stream
        .tasks
        .get(t)
        .ok_or_else(|| Error::contract(format!("task {t} outside the stream")))?;
    let mut rng = task_rng(cfg.seed, 1 + t as u64);
    let mut model = match (t, prev) {
        (0, _) => Model::new(model_cfg, &mut task_rng(cfg.seed, 0))?,
        (_, Some(m)) => m.clone(),
        (_, None) => return Err(Error::contract(format!("task {t} needs the previous model"))),
    };

    let pool: Vec<usize> = if t == 0 {
        cur_task.train.clone()
    } else if cfg.oracle {
        stream.tasks[..=t].iter().flat_map(|s| s.train.iter().copied()).collect()
    } else {
        for c in stream.seen(t - 1) {
            if store.get(c).is_none_or(<[usize]>::is_empty) {
                return Err(Error::contract(format!("no exemplars stored for past class {c}")));
            }
        }
        cur_task.train.iter().copied().chain(store.ids()).collect()
    };

    let means = class_means(&model, ds, &cur_task.classes, &cur_task.train)?;
    model.head.grow(&cur_task.classes, &means, &mut rng)?;

    let lambda = if t == 0 || cfg.oracle || cfg.mode == DistillMode::None {
        0.0
    } else {
        lambda_schedule(cfg.lambda_base, stream.seen(t).len(), cur_task.classes.len())?
    };
    let mut teacher = match (t, prev) {
        (0, _) => None,
        _ if cfg.oracle => None,
        (_, p) => p.map(|m| Teacher::new(m, cfg.mode)),
    };
    if let Some(te) = teacher.as_mut() {
        te.warm(ds, &pool)?;
    }
    info!(
        "task {t}: {} classes, {} training samples, lambda {lambda:.4}",
        cur_task.classes.len(),
        pool.len()
    );
    let stats = optimize(
        &mut model,
        ds,
        &pool,
        teacher.as_ref(),
        lambda,
        cfg.epochs,
        if t == 0 { cfg.lr } else { cfg.incremental_lr.unwrap_or(cfg.lr) },
        cfg,
        t,
        &mut rng,
    )?;
    Ok(TaskOutcome { model, lambda, stats })
}

/// Add herding-ordered exemplars for task `t`'s classes and shrink older
/// classes to their new quota.
pub fn update_exemplars(
    model: &Model,
    ds: &Dataset,
    stream: &TaskStream,
    t: usize,
    store: &mut ExemplarStore,
    normalize: bool,
) -> Result<()> {
    let cur_task = &stream.tasks[t];
    let quotas = store.quotas_with(&cur_task.classes)?;
    for &c in &cur_task.classes {
        let ids: Vec<usize> = cur_task.train.iter().copied().filter(|&i| ds.label(i) as u32 == c).collect();
        let feats = embed_ids(model, ds, &ids)?;
        let k = quotas[&c].min(ids.len());
        store.insert(c, herding_select(&ids, &feats, k, normalize)?)?;
    }
    store.rebalance()
}

/// Fine-tune on an equal number of exemplars per seen class.
pub fn finetune_balanced(
    model: &mut Model,
    teacher: Option<&Model>,
    ds: &Dataset,
    stream: &TaskStream,
    t: usize,
    store: &ExemplarStore,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<PhaseStats> {
    let seen = stream.seen(t);
    let counts: Vec<usize> = seen.iter().map(|&c| store.get(c).map_or(0, <[usize]>::len)).collect();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {} has no samples for fine-tuning", seen[k])));
    }
    if cfg.finetune_epochs == 0 {
        return Ok(PhaseStats::default());
    }
    let per = *counts.iter().min().expect("at least one class");
    let pool: Vec<usize> = seen.iter().flat_map(|&c| store.get(c).unwrap()[..per].to_vec()).collect();
    let (mut te, lam) = match teacher {
        Some(m) if cfg.finetune_distill && cfg.mode != DistillMode::None => (Some(Teacher::new(m, cfg.mode)), lambda),
        _ => (None, 0.0),
    };
    if let Some(te) = te.as_mut() {
        te.warm(ds, &pool)?;
    }
    let mut rng = task_rng(cfg.seed, 1000 + t as u64);
    optimize(
        model,
        ds,
        &pool,
        te.as_ref(),
        lam,
        cfg.finetune_epochs,
        cfg.finetune_lr,
        cfg,
        t,
        &mut rng,
    )
}

/// Predicted class for each sample.
pub fn predict(model: &Model, ds: &Dataset, ids: &[usize]) -> Result<Vec<u32>> {
    let run = |chunk: &[usize]| -> Result<Vec<u32>> {
        let images: Vec<&[f32]> = chunk.iter().map(|&i| ds.image(i)).collect();
        let (_, scores) = model.infer(model.batch_from_images(&images)?)?;
        let k = scores.shape()[1];
        Ok(scores
            .data()
            .chunks(k)
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                model.head.classes()[best.0]
            })
            .collect())
    };
    let chunks: Vec<&[usize]> = ids.chunks(EVAL_CHUNK).collect();
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<u32>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(|c| run(c)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<u32>>> = chunks.iter().map(|c| run(c)).collect();
    let mut out = Vec::with_capacity(ids.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Row `a[t][0..=t]`: per task, the mean of its classes' test accuracies.
pub fn evaluate(model: &Model, ds: &Dataset, stream: &TaskStream, t: usize) -> Result<Vec<f64>> {
    let ids: Vec<usize> = stream.tasks[..=t].iter().flat_map(|s| s.test.iter().copied()).collect();
    let preds = predict(model, ds, &ids)?;
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&id, &p) in ids.iter().zip(&preds) {
        let c = ds.label(id) as u32;
        let e = hits.entry(c).or_default();
        e.0 += usize::from(p == c);
        e.1 += 1;
    }
    Ok(stream.tasks[..=t]
        .iter()
        .map(|s| {
            s.classes
                .iter()
                .map(|c| {
                    let (h, n) = hits[c];
                    h as f64 / n as f64
                })
                .sum::<f64>()
                / s.classes.len() as f64
        })
        .collect())
}

/// Everything produced by a full pass over the stream.
#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub record: RunRecord,
    pub base_model: Model,
    pub final_model: Model,
    /// Main-phase statistics per task.
    pub stats: Vec<PhaseStats>,
}

/// Train tasks `0..=T` in order and evaluate after each.
pub fn run_stream(
    ds: &Dataset,
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
) -> Result<StreamOutcome> {
    cfg.validate()?;
    let mut record = RunRecord {
        mode: cfg.mode.to_string(),
        oracle: cfg.oracle,
        seed: cfg.seed,
        task_classes: stream.tasks.iter().map(|s| s.classes.clone()).collect(),
        acc: Vec::new(),
        overall: Vec::new(),
        lambdas: Vec::new(),
        checksums: Vec::new(),
        exemplars: BTreeMap::new(),
        gradcam: None,
    };
    let mut store = ExemplarStore::new(cfg.memory);
    let mut prev: Option<Model> = None;
    let mut base_model = None;
    let mut all_stats = Vec::new();
    for t in 0..stream.tasks.len() {
        let TaskOutcome {
            mut model,
            lambda,
            stats,
        } = train_task(prev.as_ref(), model_cfg, ds, stream, t, &store, cfg)?;
        if !cfg.oracle {
            update_exemplars(&model, ds, stream, t, &mut store, cfg.herding_normalize)?;
            if t > 0 {
                finetune_balanced(&mut model, prev.as_ref(), ds, stream, t, &store, lambda, cfg)?;
            }
        }
        let row = evaluate(&model, ds, stream, t)?;
        info!("task {t}: accuracy row {row:?}");
        record.push_row(row)?;
        record.lambdas.push(lambda);
        record.checksums.push(model.checksum());
        if let Some(dir) = checkpoints {
            model.save(&dir.join(format!("task{t:02}.s2im")))?;
        }
        if t == 0 {
            base_model = Some(model.clone());
        }
        all_stats.push(stats);
        prev = Some(model);
    }
    let final_model = prev.expect("stream has at least one task");
    let base_model = base_model.expect("stream has at least one task");
    record.exemplars = store.classes().clone();
    if let Some(score) = cfg.gradcam {
        record.gradcam = Some(gradcam_record(&base_model, &final_model, ds, stream, score)?);
    }
    Ok(StreamOutcome {
        record,
        base_model,
        final_model,
        stats: all_stats,
    })
}

/// Importances of each base class on its test samples, before and after.
pub fn gradcam_record(
    base: &Model,
    last: &Model,
    ds: &Dataset,
    stream: &TaskStream,
    score: GradCamScore,
) -> Result<GradCamRecord> {
    let classes = stream.tasks[0].classes.clone();
    let mut alpha_base = Vec::new();
    let mut alpha_final = Vec::new();
    for &c in &classes {
        let images: Vec<&[f32]> = stream.tasks[0]
            .test
            .iter()
            .filter(|&&i| ds.label(i) as u32 == c)
            .map(|&i| ds.image(i))
            .collect();
        let slot = |m: &Model| m.head.slot_of(c).ok_or_else(|| Error::contract(format!("class {c} lost its slot")));
        alpha_base.push(gradcam_importance(base, &images, slot(base)?, score)?);
        alpha_final.push(gradcam_importance(last, &images, slot(last)?, score)?);
    }
    Ok(GradCamRecord {
        classes,
        alpha_base,
        alpha_final,
    })
}
