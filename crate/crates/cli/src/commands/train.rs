use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deft_core::metrics::EvalConfig;
use deft_core::nn::ArchScale;
use deft_core::objectives::DEFAULT_CAPACITY_GAMMA;
use deft_core::trainer::{
    run_baseline, run_deft, write_trace, BaselineConfig, BaselineObjective, GammaMode, RunOptions, StageSchedule,
    TrainingTrace, DEFAULT_BATCH_SIZE, DEFAULT_GAMMA, DEFAULT_LEARNING_RATE,
};
use deft_core::Real;

use super::{eval_config, parallel_map, read_dataset, report_header, report_row, write_file, write_sidecar, Precision};
use crate::config::RunConfig;

enum Plan {
    Deft(StageSchedule),
    Baseline(BaselineConfig),
}

fn baseline_objective(cfg: &mut RunConfig, name: &str) -> Result<BaselineObjective> {
    Ok(match BaselineObjective::with_defaults(name)? {
        BaselineObjective::Elbo => BaselineObjective::Elbo,
        BaselineObjective::BetaVae { beta } => BaselineObjective::BetaVae { beta: cfg.get("beta", beta)? },
        BaselineObjective::AnnealedVae { c_max, .. } => BaselineObjective::AnnealedVae {
            c_max: cfg.get("c_max", c_max)?,
            gamma: cfg.get("capacity_gamma", DEFAULT_CAPACITY_GAMMA)?,
        },
        BaselineObjective::BetaTcVae { beta } => BaselineObjective::BetaTcVae { beta: cfg.get("beta", beta)? },
        BaselineObjective::CascadeVaec { beta_low, beta_high } => BaselineObjective::CascadeVaec {
            beta_low: cfg.get("beta_low", beta_low)?,
            beta_high: cfg.get("beta_high", beta_high)?,
        },
    })
}

/// Stage-end metrics of a trace as CSV rows keyed by checkpoint name.
pub fn metrics_csv(trace: &TrainingTrace) -> Option<String> {
    let ends: Vec<_> = trace.stage_ends().filter(|r| r.metrics.is_some()).collect();
    let first = ends.first()?.metrics.as_ref()?;
    let mut s = format!("{}\n", report_header(first));
    for r in ends {
        let name = match &r.checkpoint {
            Some(p) => p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            None => format!("stage_{}", r.stage),
        };
        writeln!(s, "{}", report_row(&name, r.metrics.as_ref()?)).unwrap();
    }
    Some(s)
}

fn train_seed<T: Real>(plan: &Plan, ds: &deft_core::datasets::LabeledDataset, opts: &RunOptions, seed: u64) -> Result<TrainingTrace> {
    let out = match plan {
        Plan::Deft(s) => run_deft::<T>(&StageSchedule { seed, ..s.clone() }, ds, opts)?,
        Plan::Baseline(b) => run_baseline::<T>(&BaselineConfig { seed, ..b.clone() }, ds, opts)?,
    };
    Ok(out.trace)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let objective = cfg.str_or("objective", "deft");
    let seeds: Vec<u64> = cfg.list("seeds", &[0])?;
    let threads = cfg.get("threads", 1usize)?;
    let precision = Precision::parse(&cfg.str_or("precision", "f32"))?;
    let learning_rate = cfg.get("lr", DEFAULT_LEARNING_RATE)?;
    let batch_size = cfg.get("batch_size", DEFAULT_BATCH_SIZE)?;
    let scale = ArchScale::parse(&cfg.str_or("scale", "desk"))?;
    let log_interval = cfg.get("log_interval", 100u64)?;
    let eval: Option<EvalConfig> = if cfg.get("eval", true)? { Some(eval_config(cfg)?) } else { None };
    let ds = read_dataset(&data)?;
    let plan = if objective == "deft" {
        let betas: Vec<f64> = cfg.list("betas", &[20.0, 4.0])?;
        let latents_per_group = cfg.get("latents_per_group", 1usize)?;
        let epochs: Option<u64> = cfg.opt("epochs_per_stage")?;
        let steps_per_stage = match epochs {
            Some(e) => StageSchedule::steps_for_epochs(e, ds.len(), batch_size),
            None => cfg.get("steps_per_stage", 1000u64)?,
        };
        let s = StageSchedule {
            gamma: cfg.get("gamma", DEFAULT_GAMMA)?,
            gamma_mode: GammaMode::parse(&cfg.str_or("gamma_mode", GammaMode::LearningRate.name()))?,
            steps_per_stage,
            learning_rate,
            batch_size,
            seed: 0,
            scale,
            ..StageSchedule::new(betas.len(), latents_per_group, betas)
        };
        s.validate()?;
        Plan::Deft(s)
    } else {
        let obj = baseline_objective(cfg, &objective)?;
        Plan::Baseline(BaselineConfig {
            objective: obj,
            latent_dim: cfg.get("latent_dim", 10usize)?,
            scale,
            steps: cfg.get("steps", 1000u64)?,
            learning_rate,
            batch_size,
            seed: 0,
        })
    };
    cfg.finish()?;
    if seeds.is_empty() {
        bail!("seeds list is empty");
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_sidecar(cfg, "train", &out.join("resolved.cfg"))?;
    let results = parallel_map(&seeds, threads, |&seed| -> Result<()> {
        let dir = seed_dir(&out, seed);
        std::fs::create_dir_all(&dir)?;
        let opts = RunOptions {
            log_interval,
            checkpoint_dir: Some(dir.clone()),
            eval: eval.clone(),
        };
        let trace = match precision {
            Precision::F32 => train_seed::<f32>(&plan, &ds, &opts, seed)?,
            Precision::F64 => train_seed::<f64>(&plan, &ds, &opts, seed)?,
        };
        write_trace(&trace, &dir)?;
        if let Some(csv) = metrics_csv(&trace) {
            write_file(&dir.join("metrics.csv"), csv)?;
        }
        Ok(())
    });
    for (seed, r) in seeds.iter().zip(results) {
        r.with_context(|| format!("seed {seed}"))?;
        println!("seed {seed}: {}", seed_dir(&out, *seed).display());
    }
    Ok(())
}
