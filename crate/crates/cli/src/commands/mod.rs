pub mod anneal;
pub mod evaluate;
pub mod generate;
pub mod report;
pub mod train;
pub mod traverse;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deft_core::checkpoint::{checkpoint_precision, decode_checkpoint};
use deft_core::datasets::{load_dataset, LabeledDataset};
use deft_core::metrics::{evaluate_model, EvalConfig, MetricReport, MiMatrix};
use deft_core::model::VaeModel;
use deft_core::traversal::TraversalGrid;

use crate::config::RunConfig;

/// Write `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_sidecar(cfg: &RunConfig, command: &str, path: &Path) -> Result<()> {
    write_file(path, cfg.sidecar(command))
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("precision must be f32 or f64, got {other:?}"),
        }
    }
}

/// A checkpoint loaded at whatever precision it was saved with.
pub enum AnyModel {
    F32(VaeModel<f32>),
    F64(VaeModel<f64>),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ctx = || format!("decoding checkpoint {}", path.display());
        Ok(match checkpoint_precision(&bytes).with_context(ctx)? {
            32 => AnyModel::F32(decode_checkpoint(&bytes).with_context(ctx)?),
            _ => AnyModel::F64(decode_checkpoint(&bytes).with_context(ctx)?),
        })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            AnyModel::F32(m) => m.latent_dim(),
            AnyModel::F64(m) => m.latent_dim(),
        }
    }

    pub fn evaluate(&self, ds: &LabeledDataset, cfg: &EvalConfig) -> Result<(MetricReport, MiMatrix)> {
        Ok(match self {
            AnyModel::F32(m) => evaluate_model(m, ds, cfg)?,
            AnyModel::F64(m) => evaluate_model(m, ds, cfg)?,
        })
    }

    /// Posterior mean of image `index` of `ds`.
    pub fn encode_one(&self, ds: &LabeledDataset, index: usize) -> Result<Vec<f64>> {
        if index >= ds.len() {
            bail!("image index {index} out of range for {} images", ds.len());
        }
        Ok(match self {
            AnyModel::F32(m) => m.encode(&ds.batch::<f32>(&[index]))?.0.to_f64_vec(),
            AnyModel::F64(m) => m.encode(&ds.batch::<f64>(&[index]))?.0.to_f64_vec(),
        })
    }

    pub fn traverse(&self, base: &[f64], low: f64, high: f64, steps: usize) -> Result<TraversalGrid> {
        Ok(match self {
            AnyModel::F32(m) => TraversalGrid::build(m, base, low, high, steps)?,
            AnyModel::F64(m) => TraversalGrid::build(m, base, low, high, steps)?,
        })
    }
}

/// Header and row of a metrics CSV, keyed by checkpoint file name.
pub fn report_header(r: &MetricReport) -> String {
    format!("checkpoint,{}", r.csv_header())
}

pub fn report_row(checkpoint: &str, r: &MetricReport) -> String {
    format!("{checkpoint},{}", r.csv_row())
}

/// Evaluation settings shared by `train` and `evaluate`.
pub fn eval_config(cfg: &mut RunConfig) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    Ok(EvalConfig {
        bins: cfg.get("eval_bins", d.bins)?,
        samples: cfg.opt("eval_samples")?,
        seed: cfg.get("eval_seed", d.seed)?,
        batch_size: cfg.get("eval_batch_size", d.batch_size)?,
    })
}

/// Run `f` over `items` on up to `threads` scoped workers; results come
/// back in item order.
pub fn parallel_map<I: Sync, R: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let workers = threads.clamp(1, items.len().max(1));
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every item ran")).collect()
}
