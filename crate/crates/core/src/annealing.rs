//! Annealing test: train a fresh small β-VAE while β decays linearly from a
//! large value to 1, probing the mean posterior KL (an upper bound on
//! I(x; z)) as it goes. The information freezing point is the largest β at
//! which that KL exceeds a threshold.

use std::fmt::Write as _;

use crate::datasets::{fixed_factor_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::bernoulli_nll;
use crate::model::{ModelConfig, VaeModel};
use crate::objectives::{kl_diag_gaussian, Objective};
use crate::params::{adam_step, AdamConfig};
use crate::rng;
use crate::tensor::Real;
use crate::trainer::{compute_gradients, standard_normal, BatchSampler, DEFAULT_LEARNING_RATE};

pub const DEFAULT_IFP_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub iters: u64,
    pub probe_interval: u64,
    pub latents: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            beta_start: 200.0,
            beta_end: 1.0,
            iters: 5000,
            probe_interval: 50,
            latents: 4,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_interval == 0 || self.iters < 2 * self.probe_interval {
            return Err(Error::InvalidArgument(format!(
                "need iters >= 2 * probe_interval > 0 (iters {}, probe {})",
                self.iters, self.probe_interval
            )));
        }
        if !(self.beta_start > self.beta_end && self.beta_end >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need beta_start > beta_end >= 0, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.latents == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("latents, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// β in force at 1-based iteration `t`; reaches `beta_end` at `iters`.
    pub fn beta_at(&self, t: u64) -> f64 {
        self.beta_start - (self.beta_start - self.beta_end) * t as f64 / self.iters as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: u64,
    pub beta: f64,
    pub mean_kl: f64,
    pub recon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealCurve {
    pub beta_start: f64,
    pub beta_end: f64,
    pub total_iters: u64,
    pub points: Vec<CurvePoint>,
}

impl AnnealCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,beta,mean_kl,recon\n");
        for p in &self.points {
            writeln!(s, "{},{},{},{}", p.iteration, p.beta, p.mean_kl, p.recon).unwrap();
        }
        s
    }
}

/// Mean per-sample KL and reconstruction NLL over the whole slice, decoding
/// the posterior means.
fn probe<T: Real>(model: &VaeModel<T>, slice: &LabeledDataset) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..slice.len()).collect();
    let mut kl = 0.0;
    let mut recon = 0.0;
    for chunk in idx.chunks(256) {
        let x = slice.batch::<T>(chunk);
        let (mu, lv) = model.encode(&x)?;
        let logits = model.decode(&mu)?;
        let (m, l) = (mu.to_f64_vec(), lv.to_f64_vec());
        let d = model.latent_dim();
        for r in 0..chunk.len() {
            kl += kl_diag_gaussian(&m[r * d..(r + 1) * d], &l[r * d..(r + 1) * d]);
        }
        recon += bernoulli_nll(&logits.to_f64_vec(), &x.to_f64_vec(), 1);
    }
    let n = slice.len() as f64;
    Ok((kl / n, recon / n))
}

/// Anneal a fresh single-group lite β-VAE on `slice`.
pub fn annealing_test<T: Real>(slice: &LabeledDataset, cfg: &AnnealConfig) -> Result<AnnealCurve> {
    cfg.validate()?;
    if slice.is_empty() {
        return Err(Error::InvalidArgument("empty annealing slice".into()));
    }
    let config = ModelConfig::deft(1, cfg.latents, slice.resolution, slice.channels);
    let mut model = VaeModel::<T>::new(config, cfg.seed)?;
    let mut sampler = BatchSampler::new(slice.len(), cfg.batch_size, rng::stream(cfg.seed, "batches", 0));
    let mut noise_rng = rng::stream(cfg.seed, "noise", 0);
    let ids = model.all_param_ids();
    let adam = AdamConfig::default();
    let mut points = Vec::with_capacity((cfg.iters / cfg.probe_interval) as usize);
    for t in 1..=cfg.iters {
        let beta = cfg.beta_at(t);
        let idx = sampler.next_batch();
        let x = slice.batch::<T>(&idx);
        let noise = standard_normal::<T, _>(&[idx.len(), cfg.latents], &mut noise_rng);
        compute_gradients(&mut model, &x, noise, Objective::BetaVae { beta })?;
        adam_step(&mut model.params, &ids, cfg.learning_rate, &adam)?;
        if t % cfg.probe_interval == 0 {
            let (mean_kl, recon) = probe(&model, slice)?;
            if !(mean_kl.is_finite() && recon.is_finite()) {
                return Err(Error::NonFinite(format!("annealing probe at iteration {t}")));
            }
            points.push(CurvePoint {
                iteration: t,
                beta,
                mean_kl,
                recon,
            });
        }
    }
    Ok(AnnealCurve {
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
        total_iters: cfg.iters,
        points,
    })
}

/// Largest probed β whose mean KL exceeds `threshold`.
pub fn detect_ifp(curve: &AnnealCurve, threshold: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.mean_kl > threshold)
        .map(|p| p.beta)
        .max_by(f64::total_cmp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IfpSample {
    pub repeat: usize,
    pub factor: Option<usize>,
    pub ifp_beta: Option<f64>,
    pub base_labels: Vec<u16>,
    pub curve: AnnealCurve,
}

/// Repeated annealing on random fixed-factor slices. Repeat `r` draws its
/// slice and its model from seeds derived from `cfg.seed` and `r`, so the
/// result does not depend on how repeats are scheduled across threads.
pub fn ifp_distribution<T: Real>(
    dataset: &LabeledDataset,
    factor: usize,
    repeats: usize,
    cfg: &AnnealConfig,
    threshold: f64,
    threads: usize,
) -> Result<Vec<IfpSample>> {
    cfg.validate()?;
    if factor >= dataset.num_factors() {
        return Err(Error::OutOfRange(format!("factor {factor} of {}", dataset.num_factors())));
    }
    if dataset.schema.factors[factor].cardinality < 2 {
        return Err(Error::InvalidArgument(format!("factor {factor} has a single value")));
    }
    let one = |r: usize| -> Result<IfpSample> {
        let mut pick = rng::stream(cfg.seed, "ifp_slice", r as u64);
        let slice = fixed_factor_batch(dataset, factor, &mut pick)?;
        let run_cfg = AnnealConfig {
            seed: rng::derive_seed(cfg.seed, "ifp_run", r as u64),
            ..cfg.clone()
        };
        let curve = annealing_test::<T>(&slice, &run_cfg)?;
        let mut base = slice.label_row(0).to_vec();
        base[factor] = 0;
        Ok(IfpSample {
            repeat: r,
            factor: Some(factor),
            ifp_beta: detect_ifp(&curve, threshold),
            base_labels: base,
            curve,
        })
    };
    let workers = threads.clamp(1, repeats.max(1));
    let mut slots: Vec<Option<Result<IfpSample>>> = (0..repeats).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || {
                    (w..repeats)
                        .step_by(workers)
                        .map(|r| (r, one(r)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (r, res) in h.join().expect("annealing worker panicked") {
                slots[r] = Some(res);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every repeat ran")).collect()
}

pub fn ifp_csv(samples: &[IfpSample]) -> String {
    let mut s = String::from("repeat,factor,ifp_beta\n");
    for x in samples {
        writeln!(
            s,
            "{},{},{}",
            x.repeat,
            x.factor.map(|f| f.to_string()).unwrap_or_default(),
            x.ifp_beta.map(|b| b.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    s
}

/// First differences of the mean KL, paired with the β of the later probe.
pub fn increment_curve(curve: &AnnealCurve) -> Result<Vec<(f64, f64)>> {
    if curve.points.len() < 2 {
        return Err(Error::InvalidArgument("increment curve needs at least two probes".into()));
    }
    Ok(curve
        .points
        .windows(2)
        .map(|w| (w[1].beta, w[1].mean_kl - w[0].mean_kl))
        .collect())
}

pub fn increments_csv(inc: &[(f64, f64)]) -> String {
    let mut s = String::from("beta,delta_kl\n");
    for (b, d) in inc {
        writeln!(s, "{b},{d}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(kls: &[(f64, f64)]) -> AnnealCurve {
        AnnealCurve {
            beta_start: 200.0,
            beta_end: 1.0,
            total_iters: kls.len() as u64,
            points: kls
                .iter()
                .enumerate()
                .map(|(i, &(beta, mean_kl))| CurvePoint {
                    iteration: i as u64 + 1,
                    beta,
                    mean_kl,
                    recon: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn constructed_crossing() {
        let c = curve(&[(50.0, 0.0), (40.0, 0.0), (30.0, 0.5), (20.0, 0.5)]);
        assert_eq!(detect_ifp(&c, 0.1), Some(30.0));
        assert_eq!(detect_ifp(&curve(&[(50.0, 0.0), (40.0, 0.0)]), 0.1), None);
    }

    #[test]
    fn linear_kl_has_constant_increments() {
        let c = curve(&[(4.0, 0.0), (3.0, 0.5), (2.0, 1.0), (1.0, 1.5)]);
        let inc = increment_curve(&c).unwrap();
        assert!(inc.iter().all(|&(_, d)| (d - 0.5).abs() < 1e-12));
        assert_eq!(inc[0].0, 3.0);
    }

    #[test]
    fn beta_schedule_endpoints() {
        let cfg = AnnealConfig::default();
        assert_eq!(cfg.beta_at(0), 200.0);
        assert_eq!(cfg.beta_at(cfg.iters), 1.0);
        assert!(AnnealConfig { iters: 99, ..cfg }.validate().is_err());
    }
}
