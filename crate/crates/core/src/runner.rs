//! Experiment orchestration: sweep points × seeds, oracle runs, manifests
//! and report files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, SweepPoint};
use crate::data::{generate_synthetic, Dataset};
use crate::distill::FdWeights;
use crate::engine::{build_stream, run_stream, DistillMode, TaskStream, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{oracle_deviation, write_accuracy_csv, RunRecord};
use crate::net::ModelConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILED_MARKER: &str = "FAILED";
/// Caps how many runs train at once.
pub const THREADS_ENV: &str = "S2IL_THREADS";

/// Label given to oracle runs.
pub const ORACLE_LABEL: &str = "oracle";

/// One finished stream pass with its headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: String,
    pub aia: f64,
    pub bt: Option<f64>,
    pub fgt: Option<f64>,
    pub final_accuracy: f64,
    pub record: RunRecord,
}

/// `D_l` of one run against the oracle of the same seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub label: String,
    pub seed: u64,
    pub class: u32,
    pub value: f64,
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

/// Seed aggregate of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub aia: MeanStd,
    pub bt: Option<MeanStd>,
    pub fgt: Option<MeanStd>,
    pub final_accuracy: MeanStd,
    /// Seed-mean `D_l` per base class.
    pub deviation: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub error: Option<String>,
    /// Echo of the configuration; parses back to the same config.
    pub config: String,
    pub class_order: Vec<u32>,
    pub runs: Vec<RunEntry>,
    pub deviations: Vec<DeviationRow>,
    pub summary: Vec<PointSummary>,
}

impl Manifest {
    pub fn run(&self, label: &str, seed: u64) -> Option<&RunEntry> {
        self.runs.iter().find(|r| r.label == label && r.record.seed == seed)
    }

    pub fn point(&self, label: &str) -> Option<&PointSummary> {
        self.summary.iter().find(|p| p.label == label)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            detail: e.to_string(),
        })
    }
}

/// Load or generate the dataset a config points at.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(synth) => generate_synthetic(synth),
        DataSource::File(path) => Dataset::load(path),
    }
}

/// Model shape for a dataset: input geometry comes from the images.
pub fn model_config(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ModelConfig> {
    if ds.height != ds.width {
        return Err(Error::Config(format!("images are {}x{}; only square inputs are supported", ds.height, ds.width)));
    }
    let mut backbone = cfg.backbone.clone();
    backbone.in_channels = ds.channels;
    backbone.input_size = ds.height;
    backbone.validate()?;
    Ok(ModelConfig {
        backbone,
        proxies_per_class: cfg.proxies_per_class,
        margin: cfg.margin,
        scale_init: cfg.scale_init,
    })
}

#[derive(Clone, Debug)]
struct Job {
    label: String,
    train: TrainConfig,
}

fn jobs(cfg: &ExperimentConfig, points: &[SweepPoint], weights: Option<&FdWeights>) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for p in points {
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.mode = p.mode;
            train.ssim = p.ssim;
            train.oracle = false;
            train.fd_weights = weights.cloned();
            out.push(Job {
                label: p.label.clone(),
                train,
            });
        }
        if cfg.oracle {
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.mode = DistillMode::None;
            train.oracle = true;
            train.fd_weights = None;
            out.push(Job {
                label: ORACLE_LABEL.into(),
                train,
            });
        }
    }
    out
}

fn entry(label: String, record: RunRecord) -> Result<RunEntry> {
    let multi = record.tasks() > 1;
    Ok(RunEntry {
        label,
        aia: record.aia()?,
        bt: if multi { Some(record.bt()?) } else { None },
        fgt: if multi { Some(record.fgt()?) } else { None },
        final_accuracy: record.final_accuracy().unwrap_or(0.0),
        record,
    })
}

fn run_one(ds: &Dataset, stream: &TaskStream, model_cfg: &ModelConfig, job: &Job) -> Result<RunEntry> {
    info!("run {} seed {}", job.label, job.train.seed);
    let out = run_stream(ds, stream, model_cfg, &job.train, None)?;
    entry(job.label.clone(), out.record)
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn execute(ds: &Dataset, stream: &TaskStream, model_cfg: &ModelConfig, jobs: &[Job]) -> Vec<Result<RunEntry>> {
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(|j| run_one(ds, stream, model_cfg, j)).collect()),
        Err(_) => jobs.iter().map(|j| run_one(ds, stream, model_cfg, j)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn execute(ds: &Dataset, stream: &TaskStream, model_cfg: &ModelConfig, jobs: &[Job]) -> Vec<Result<RunEntry>> {
    let _ = thread_cap();
    jobs.iter().map(|j| run_one(ds, stream, model_cfg, j)).collect()
}

/// `D_l` for every non-oracle run that has an oracle partner of the same seed.
pub fn deviations(runs: &[RunEntry]) -> Result<Vec<DeviationRow>> {
    let mut rows = Vec::new();
    for run in runs.iter().filter(|r| !r.record.oracle) {
        let Some(m) = &run.record.gradcam else { continue };
        let oracle = runs
            .iter()
            .find(|o| o.record.oracle && o.record.seed == run.record.seed)
            .and_then(|o| o.record.gradcam.as_ref());
        let Some(o) = oracle else { continue };
        if m.classes != o.classes {
            return Err(Error::contract("oracle and model Grad-CAM cover different classes"));
        }
        for (k, &class) in m.classes.iter().enumerate() {
            let d = oracle_deviation(&m.alpha_final[k], &m.alpha_base[k], &o.alpha_final[k], &o.alpha_base[k])?;
            rows.push(DeviationRow {
                label: run.label.clone(),
                seed: run.record.seed,
                class,
                value: d.value,
                excluded: d.excluded,
            });
        }
    }
    Ok(rows)
}

/// Seed aggregates per label, in order of first appearance.
pub fn summarize(runs: &[RunEntry], deviations: &[DeviationRow]) -> Vec<PointSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let mine: Vec<&RunEntry> = runs.iter().filter(|r| r.label == label).collect();
            let pick = |f: &dyn Fn(&RunEntry) -> Option<f64>| -> Option<MeanStd> {
                let v: Option<Vec<f64>> = mine.iter().map(|r| f(r)).collect();
                v.and_then(|v| MeanStd::of(&v))
            };
            let mut per_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for d in deviations.iter().filter(|d| d.label == label) {
                per_class.entry(d.class).or_default().push(d.value);
            }
            PointSummary {
                label: label.to_string(),
                seeds: mine.iter().map(|r| r.record.seed).collect(),
                aia: pick(&|r| Some(r.aia)).expect("label has runs"),
                bt: pick(&|r| r.bt),
                fgt: pick(&|r| r.fgt),
                final_accuracy: pick(&|r| Some(r.final_accuracy)).expect("label has runs"),
                deviation: per_class
                    .into_iter()
                    .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
                    .collect(),
            }
        })
        .collect()
}

/// Run every sweep point for every seed (plus oracles) and return the manifest.
///
/// Failed runs do not stop the others; the manifest is then marked failed
/// and the first error is returned alongside it.
pub fn run_experiment(cfg: &ExperimentConfig) -> (Manifest, Option<Error>) {
    let mut manifest = Manifest {
        status: "running".into(),
        error: None,
        config: cfg.echo(),
        class_order: Vec::new(),
        runs: Vec::new(),
        deviations: Vec::new(),
        summary: Vec::new(),
    };
    let fail = |mut m: Manifest, e: Error| {
        error!("{e}");
        m.status = "failed".into();
        m.error = Some(e.to_string());
        (m, Some(e))
    };
    let prepared = (|| -> Result<_> {
        cfg.validate()?;
        let ds = load_dataset(cfg)?;
        let stream = build_stream(&ds, cfg.base_classes, cfg.increment, cfg.order_seed)?;
        let model_cfg = model_config(cfg, &ds)?;
        let weights = match &cfg.fd_weights {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let w = FdWeights::parse(&text)?;
                w.validate()?;
                Some(w)
            }
            None => None,
        };
        let points = cfg.sweep_points()?;
        Ok((ds, stream, model_cfg, jobs(cfg, &points, weights.as_ref())))
    })();
    let (ds, stream, model_cfg, jobs) = match prepared {
        Ok(p) => p,
        Err(e) => return fail(manifest, e),
    };
    manifest.class_order = stream.class_order.clone();
    let mut first_err = None;
    for res in execute(&ds, &stream, &model_cfg, &jobs) {
        match res {
            Ok(e) => manifest.runs.push(e),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match deviations(&manifest.runs) {
        Ok(d) => manifest.deviations = d,
        Err(e) => {
            first_err.get_or_insert(e);
        }
    }
    manifest.summary = summarize(&manifest.runs, &manifest.deviations);
    match first_err {
        Some(e) => fail(manifest, e),
        None => {
            manifest.status = "complete".into();
            (manifest, None)
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Per-run metrics, one row per headline metric and one per `(class, D_l)`.
pub fn write_metrics_csv<W: Write>(out: W, m: &Manifest) -> Result<()> {
    let path = Path::new(METRICS_FILE);
    let err = csv_err(path);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "mode", "oracle", "seed", "metric", "class", "value"]).map_err(&err)?;
    for r in &m.runs {
        let base = [r.label.clone(), r.record.mode.clone(), r.record.oracle.to_string(), r.record.seed.to_string()];
        for (name, v) in [
            ("aia", Some(r.aia)),
            ("bt", r.bt),
            ("fgt", r.fgt),
            ("final_accuracy", Some(r.final_accuracy)),
        ] {
            let mut row = base.to_vec();
            row.extend([name.to_string(), String::new(), opt(v)]);
            w.write_record(&row).map_err(&err)?;
        }
        for d in m.deviations.iter().filter(|d| d.label == r.label && d.seed == r.record.seed) {
            let mut row = base.to_vec();
            row.extend(["d_l".to_string(), d.class.to_string(), format!("{:.6}", d.value)]);
            w.write_record(&row).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seed aggregates: one row per `(point, metric)`.
pub fn write_summary_csv<W: Write>(out: W, m: &Manifest) -> Result<()> {
    let path = Path::new(SUMMARY_FILE);
    let err = csv_err(path);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "metric", "class", "mean", "std", "n"]).map_err(&err)?;
    for p in &m.summary {
        for (name, v) in [
            ("aia", Some(&p.aia)),
            ("bt", p.bt.as_ref()),
            ("fgt", p.fgt.as_ref()),
            ("final_accuracy", Some(&p.final_accuracy)),
        ] {
            if let Some(s) = v {
                w.write_record([
                    p.label.clone(),
                    name.into(),
                    String::new(),
                    format!("{:.6}", s.mean),
                    format!("{:.6}", s.std),
                    s.n.to_string(),
                ])
                .map_err(&err)?;
            }
        }
        for (c, v) in &p.deviation {
            w.write_record([
                p.label.clone(),
                "d_l".into(),
                c.to_string(),
                format!("{v:.6}"),
                String::new(),
                String::new(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create(path: PathBuf) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(&path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Write the manifest and every report into `dir`. A failed manifest also
/// leaves a `FAILED` marker; a complete one removes any stale marker.
pub fn write_outputs(dir: &Path, m: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(m).map_err(|e| Error::Contract(format!("manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let named: Vec<(String, &RunRecord)> = m.runs.iter().map(|r| (r.label.clone(), &r.record)).collect();
    write_accuracy_csv(create(dir.join(ACCURACY_FILE))?, &named)?;
    write_metrics_csv(create(dir.join(METRICS_FILE))?, m)?;
    write_summary_csv(create(dir.join(SUMMARY_FILE))?, m)?;
    let marker = dir.join(FAILED_MARKER);
    if m.status == "failed" {
        let text = m.error.clone().unwrap_or_default();
        std::fs::write(&marker, text).map_err(|e| Error::io(&marker, e))?;
    } else if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(())
}

fn fmt_ms(s: Option<&MeanStd>) -> String {
    s.map_or("-".into(), |s| format!("{:.2} ± {:.2}", s.mean, s.std))
}

/// Plain-text table of the seed aggregates.
pub fn render_report(m: &Manifest) -> String {
    let mut out = format!("status: {}\n", m.status);
    if let Some(e) = &m.error {
        out.push_str(&format!("error: {e}\n"));
    }
    out.push_str(&format!(
        "{:<28} {:>5} {:>16} {:>16} {:>16} {:>16} {:>10}\n",
        "run", "seeds", "AIA", "BT", "Fgt", "final", "mean D_l"
    ));
    for p in &m.summary {
        let dl = if p.deviation.is_empty() {
            "-".to_string()
        } else {
            format!("{:.4}", p.deviation.values().sum::<f64>() / p.deviation.len() as f64)
        };
        let fin = MeanStd {
            mean: 100.0 * p.final_accuracy.mean,
            std: 100.0 * p.final_accuracy.std,
            n: p.final_accuracy.n,
        };
        out.push_str(&format!(
            "{:<28} {:>5} {:>16} {:>16} {:>16} {:>16} {:>10}\n",
            p.label,
            p.seeds.len(),
            fmt_ms(Some(&p.aia)),
            fmt_ms(p.bt.as_ref()),
            fmt_ms(p.fgt.as_ref()),
            fmt_ms(Some(&fin)),
            dl
        ));
    }
    out
}
