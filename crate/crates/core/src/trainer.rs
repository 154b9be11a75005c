//! Staged multi-encoder training and the single-encoder baseline trainer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::checkpoint::save_checkpoint;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvalConfig, MetricReport};
use crate::model::{ModelConfig, VaeModel};
use crate::nn::ArchScale;
use crate::objectives::{capacity_schedule, objective_loss, LossBreakdown, Objective, DEFAULT_CAPACITY_GAMMA};
use crate::params::{adam_step, AdamConfig, Gradients, ParamId};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_GAMMA: f64 = 0.1;

/// How the backward scale reaches the inactive encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaMode {
    /// Inactive encoders step at `gamma · lr`. Their displacement per step
    /// is `gamma` times that of an unscaled step.
    LearningRate,
    /// Inactive encoders' raw gradients are multiplied by `gamma` before
    /// Adam. Adam normalizes gradient scale away, so apart from `gamma = 0`
    /// this barely changes the update.
    Gradient,
}

impl GammaMode {
    pub fn name(self) -> &'static str {
        match self {
            GammaMode::LearningRate => "learning_rate",
            GammaMode::Gradient => "gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learning_rate" | "lr" => Ok(GammaMode::LearningRate),
            "gradient" | "grad" => Ok(GammaMode::Gradient),
            other => Err(Error::InvalidArgument(format!("unknown gamma mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub groups: usize,
    pub latents_per_group: usize,
    /// One pressure per stage, strictly decreasing.
    pub betas: Vec<f64>,
    pub gamma: f64,
    pub gamma_mode: GammaMode,
    /// Minibatch steps per stage.
    pub steps_per_stage: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub scale: ArchScale,
}

impl StageSchedule {
    pub fn new(groups: usize, latents_per_group: usize, betas: Vec<f64>) -> Self {
        Self {
            groups,
            latents_per_group,
            betas,
            gamma: DEFAULT_GAMMA,
            gamma_mode: GammaMode::LearningRate,
            steps_per_stage: 1000,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            scale: ArchScale::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.latents_per_group == 0 {
            return Err(Error::InvalidArgument("schedule needs G >= 1 and K >= 1".into()));
        }
        if self.betas.len() != self.groups {
            return Err(Error::InvalidArgument(format!(
                "{} betas for {} stages",
                self.betas.len(),
                self.groups
            )));
        }
        if self.betas.iter().any(|b| !(*b >= 0.0)) || self.betas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "betas must be nonnegative and strictly decreasing, got {:?}",
                self.betas
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Steps covering `epochs` passes over `dataset_len` samples.
    pub fn steps_for_epochs(epochs: u64, dataset_len: usize, batch_size: usize) -> u64 {
        epochs * dataset_len.div_ceil(batch_size.max(1)).max(1) as u64
    }

    pub fn model_config(&self, dataset: &LabeledDataset) -> ModelConfig {
        let mut c = ModelConfig::deft(self.groups, self.latents_per_group, dataset.resolution, dataset.channels);
        c.scale = self.scale;
        c
    }
}

/// Reshuffled passes over the dataset, wrapping across epoch boundaries.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            n,
            batch: batch.min(n).max(1),
            order: Vec::new(),
            pos: n,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn standard_normal<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Forward and backward pass of `objective`; gradients are installed on the
/// model's parameters (zero for unreached ones).
pub fn compute_gradients<T: Real>(
    model: &mut VaeModel<T>,
    images: &Tensor<T>,
    noise: Tensor<T>,
    objective: Objective,
) -> Result<LossBreakdown> {
    let (grads, breakdown): (Gradients<T>, LossBreakdown) = {
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, images, noise)?;
        let (loss, breakdown) = objective_loss(&mut g, &out, images, objective)?;
        (g.backward(loss)?, breakdown)
    };
    model.params.set_grads(&grads);
    Ok(breakdown)
}

/// Apply Adam to the installed gradients: the decoder and encoder `stage`
/// (0-based) at `lr`, every other encoder with the `gamma` scaling.
pub fn apply_stage_update<T: Real>(
    model: &mut VaeModel<T>,
    stage: usize,
    gamma: f64,
    mode: GammaMode,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    let groups = model.encoders.len();
    if stage >= groups {
        return Err(Error::OutOfRange(format!("stage {} of {groups}", stage + 1)));
    }
    let mut full: Vec<ParamId> = model.decoder_param_ids();
    full.extend(model.encoder_param_ids(stage));
    adam_step(&mut model.params, &full, lr, adam)?;
    let inactive: Vec<ParamId> = (0..groups)
        .filter(|&i| i != stage)
        .flat_map(|i| model.encoder_param_ids(i))
        .collect();
    match mode {
        GammaMode::LearningRate => adam_step(&mut model.params, &inactive, gamma * lr, adam),
        GammaMode::Gradient => {
            let g = T::lit(gamma);
            for &id in &inactive {
                let p = model.params.get_mut(id);
                p.grad = p.grad.map(|v| v * g);
            }
            adam_step(&mut model.params, &inactive, lr, adam)
        }
    }
}

/// One staged step: β-VAE gradients on the whole model, then
/// [`apply_stage_update`]. `stage` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn deft_update_step<T: Real>(
    model: &mut VaeModel<T>,
    images: &Tensor<T>,
    noise: Tensor<T>,
    stage: usize,
    beta: f64,
    gamma: f64,
    mode: GammaMode,
    lr: f64,
) -> Result<LossBreakdown> {
    if stage == 0 || stage > model.encoders.len() {
        return Err(Error::OutOfRange(format!(
            "stage {stage} not in 1..={}",
            model.encoders.len()
        )));
    }
    let b = compute_gradients(model, images, noise, Objective::BetaVae { beta })?;
    apply_stage_update(model, stage - 1, gamma, mode, lr, &AdamConfig::default())?;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub stage: usize,
    pub loss: LossBreakdown,
    pub metrics: Option<MetricReport>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainingTrace {
    /// CSV with a fixed column set; absent values are empty cells.
    pub fn to_csv(&self) -> String {
        let dims = self.records.first().map_or(0, |r| r.loss.kl_per_dim.len());
        let mut s = String::from("iteration,stage,objective,total,recon,kl_total");
        for d in 0..dims {
            write!(s, ",kl_{d}").unwrap();
        }
        s.push_str(",capacity,mi,tc,dwkl,mig,nmi1,nmi2,checkpoint\n");
        for r in &self.records {
            let l = &r.loss;
            write!(s, "{},{},{},{},{},{}", r.iteration, r.stage, l.objective, l.total, l.recon, l.kl_total).unwrap();
            for k in &l.kl_per_dim {
                write!(s, ",{k}").unwrap();
            }
            let m = r.metrics.as_ref();
            let name = r
                .checkpoint
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            writeln!(
                s,
                ",{},{},{},{},{},{},{},{}",
                opt(l.capacity),
                opt(l.mi),
                opt(l.tc),
                opt(l.dwkl),
                opt(m.map(|m| m.mig)),
                opt(m.map(|m| m.nmi1)),
                opt(m.map(|m| m.nmi2)),
                name
            )
            .unwrap();
        }
        s
    }

    /// Records that close a stage (those carrying a checkpoint or metrics).
    pub fn stage_ends(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records
            .iter()
            .filter(|r| r.checkpoint.is_some() || r.metrics.is_some())
    }
}

/// Side outputs of a training run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Record the loss every this many steps (and always at stage ends).
    pub log_interval: u64,
    /// Write `stage_<j>.ckpt` (or `final.ckpt`) here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate metrics on the training set at stage ends.
    pub eval: Option<EvalConfig>,
}

pub struct RunOutput<T> {
    pub model: VaeModel<T>,
    pub trace: TrainingTrace,
}

fn check_dataset(config: &ModelConfig, dataset: &LabeledDataset) -> Result<()> {
    if config.resolution != dataset.resolution || config.channels != dataset.channels {
        return Err(Error::Shape(format!(
            "model wants {}x{} images with {} channels, dataset has {}x{} with {}",
            config.resolution, config.resolution, config.channels, dataset.resolution, dataset.resolution, dataset.channels
        )));
    }
    Ok(())
}

fn stage_end<T: Real>(
    model: &VaeModel<T>,
    dataset: &LabeledDataset,
    opts: &RunOptions,
    file: &str,
) -> Result<(Option<MetricReport>, Option<PathBuf>)> {
    let metrics = match &opts.eval {
        Some(cfg) => Some(evaluate_model(model, dataset, cfg)?.0),
        None => None,
    };
    let ckpt = match &opts.checkpoint_dir {
        Some(dir) => {
            let p = dir.join(file);
            save_checkpoint(model, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok((metrics, ckpt))
}

fn should_log(step: u64, interval: u64) -> bool {
    interval > 0 && step % interval == 0
}

/// Train a fresh multi-encoder model stage by stage.
pub fn run_deft<T: Real>(
    schedule: &StageSchedule,
    dataset: &LabeledDataset,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    schedule.validate()?;
    let config = schedule.model_config(dataset);
    check_dataset(&config, dataset)?;
    let mut model = VaeModel::<T>::new(config, schedule.seed)?;
    let mut sampler = BatchSampler::new(dataset.len(), schedule.batch_size, rng::stream(schedule.seed, "batches", 0));
    let mut noise_rng = rng::stream(schedule.seed, "noise", 0);
    let d = model.latent_dim();
    let mut trace = TrainingTrace::default();
    let mut step = 0u64;
    for (j, &beta) in schedule.betas.iter().enumerate() {
        let stage = j + 1;
        model.reset_encoder_optimizers();
        let mut last = None;
        for s in 0..schedule.steps_per_stage {
            let idx = sampler.next_batch();
            let x = dataset.batch::<T>(&idx);
            let noise = standard_normal::<T, _>(&[idx.len(), d], &mut noise_rng);
            let b = deft_update_step(
                &mut model,
                &x,
                noise,
                stage,
                beta,
                schedule.gamma,
                schedule.gamma_mode,
                schedule.learning_rate,
            )?;
            step += 1;
            if should_log(step, opts.log_interval) && s + 1 < schedule.steps_per_stage {
                trace.records.push(TraceRecord {
                    iteration: step,
                    stage,
                    loss: b.clone(),
                    metrics: None,
                    checkpoint: None,
                });
            }
            last = Some(b);
        }
        let (metrics, checkpoint) = stage_end(&model, dataset, opts, &format!("stage_{stage}.ckpt"))?;
        if let Some(loss) = last {
            trace.records.push(TraceRecord {
                iteration: step,
                stage,
                loss,
                metrics,
                checkpoint,
            });
        }
    }
    Ok(RunOutput { model, trace })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineObjective {
    Elbo,
    BetaVae { beta: f64 },
    AnnealedVae { c_max: f64, gamma: f64 },
    BetaTcVae { beta: f64 },
    CascadeVaec { beta_low: f64, beta_high: f64 },
}

impl BaselineObjective {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineObjective::Elbo => "elbo",
            BaselineObjective::BetaVae { .. } => "beta_vae",
            BaselineObjective::AnnealedVae { .. } => "annealed_vae",
            BaselineObjective::BetaTcVae { .. } => "beta_tcvae",
            BaselineObjective::CascadeVaec { .. } => "cascade_vaec",
        }
    }

    /// Objective by name with its default hyperparameters.
    pub fn with_defaults(name: &str) -> Result<Self> {
        Ok(match name {
            "elbo" => BaselineObjective::Elbo,
            "beta_vae" => BaselineObjective::BetaVae { beta: 4.0 },
            "annealed_vae" => BaselineObjective::AnnealedVae {
                c_max: 25.0,
                gamma: DEFAULT_CAPACITY_GAMMA,
            },
            "beta_tcvae" => BaselineObjective::BetaTcVae { beta: 6.0 },
            "cascade_vaec" => BaselineObjective::CascadeVaec {
                beta_low: 1.0,
                beta_high: 10.0,
            },
            other => return Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        })
    }

    /// Concrete objective at 0-based step `t` of `total`.
    pub fn at(&self, t: u64, total: u64, latent_dim: usize, dataset_size: usize) -> Objective {
        match *self {
            BaselineObjective::Elbo => Objective::Elbo,
            BaselineObjective::BetaVae { beta } => Objective::BetaVae { beta },
            BaselineObjective::AnnealedVae { c_max, gamma } => Objective::AnnealedVae {
                capacity: capacity_schedule(t, total, c_max),
                gamma,
            },
            BaselineObjective::BetaTcVae { beta } => Objective::BetaTcVae { beta, dataset_size },
            BaselineObjective::CascadeVaec { beta_low, beta_high } => Objective::CascadeVaec {
                stage: cascade_stage(t, total, latent_dim),
                beta_low,
                beta_high,
            },
        }
    }
}

/// Relieved-dimension count at 0-based step `t`: total steps split evenly
/// over the `d` dimensions.
pub fn cascade_stage(t: u64, total: u64, d: usize) -> usize {
    if total == 0 {
        return d;
    }
    (1 + (t as u128 * d as u128 / total as u128) as usize).min(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub objective: BaselineObjective,
    pub latent_dim: usize,
    pub scale: ArchScale,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(objective: BaselineObjective) -> Self {
        Self {
            objective,
            latent_dim: 10,
            scale: ArchScale::Desk,
            steps: 1000,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Train a single standard encoder/decoder with a baseline objective.
pub fn run_baseline<T: Real>(
    cfg: &BaselineConfig,
    dataset: &LabeledDataset,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || cfg.latent_dim == 0 {
        return Err(Error::InvalidArgument("batch size, learning rate and latent dim must be positive".into()));
    }
    let config = ModelConfig::baseline(cfg.latent_dim, dataset.resolution, dataset.channels, cfg.scale);
    check_dataset(&config, dataset)?;
    let mut model = VaeModel::<T>::new(config, cfg.seed)?;
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch_size, rng::stream(cfg.seed, "batches", 0));
    let mut noise_rng = rng::stream(cfg.seed, "noise", 0);
    let ids = model.all_param_ids();
    let adam = AdamConfig::default();
    let mut trace = TrainingTrace::default();
    let mut last = None;
    for t in 0..cfg.steps {
        let idx = sampler.next_batch();
        let x = dataset.batch::<T>(&idx);
        let noise = standard_normal::<T, _>(&[idx.len(), cfg.latent_dim], &mut noise_rng);
        let objective = cfg.objective.at(t, cfg.steps, cfg.latent_dim, dataset.len());
        let b = compute_gradients(&mut model, &x, noise, objective)?;
        adam_step(&mut model.params, &ids, cfg.learning_rate, &adam)?;
        let step = t + 1;
        if should_log(step, opts.log_interval) && step < cfg.steps {
            trace.records.push(TraceRecord {
                iteration: step,
                stage: 1,
                loss: b.clone(),
                metrics: None,
                checkpoint: None,
            });
        }
        last = Some(b);
    }
    let (metrics, checkpoint) = stage_end(&model, dataset, opts, "final.ckpt")?;
    if let Some(loss) = last {
        trace.records.push(TraceRecord {
            iteration: cfg.steps,
            stage: 1,
            loss,
            metrics,
            checkpoint,
        });
    }
    Ok(RunOutput { model, trace })
}

/// Write `trace.csv` under `dir`.
pub fn write_trace(trace: &TrainingTrace, dir: &Path) -> Result<PathBuf> {
    let p = dir.join("trace.csv");
    std::fs::write(&p, trace.to_csv())?;
    Ok(p)
}
