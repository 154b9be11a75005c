//! Training objectives. Every objective is the batch mean of a per-sample
//! loss: Bernoulli reconstruction NLL plus some penalty built from the
//! diagonal-Gaussian posterior. All information quantities are in nats.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::VaeOutputs;
use crate::tensor::{Real, Tensor};

/// Weight on `|KL - C|` in the capacity objective when none is given.
pub const DEFAULT_CAPACITY_GAMMA: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Elbo,
    BetaVae { beta: f64 },
    /// Capacity-annealed objective `recon + gamma·|KL - capacity|`.
    AnnealedVae { capacity: f64, gamma: f64 },
    /// Minibatch-weighted-sampling β-TCVAE. `dataset_size` is `N` in the
    /// `1/(N·M)` weighting.
    BetaTcVae { beta: f64, dataset_size: usize },
    /// Dimensions `1..=stage` get `beta_low`, the rest `beta_high`.
    CascadeVaec { stage: usize, beta_low: f64, beta_high: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Elbo => "elbo",
            Objective::BetaVae { .. } => "beta_vae",
            Objective::AnnealedVae { .. } => "annealed_vae",
            Objective::BetaTcVae { .. } => "beta_tcvae",
            Objective::CascadeVaec { .. } => "cascade_vaec",
        }
    }
}

/// Loss value and its diagnostic decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub objective: &'static str,
    pub total: f64,
    pub recon: f64,
    pub kl_per_dim: Vec<f64>,
    pub kl_total: f64,
    pub capacity: Option<f64>,
    pub mi: Option<f64>,
    pub tc: Option<f64>,
    pub dwkl: Option<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl_total]
            .iter()
            .chain(&self.kl_per_dim)
            .chain(self.capacity.iter())
            .chain(self.mi.iter())
            .chain(self.tc.iter())
            .chain(self.dwkl.iter())
            .all(|v| v.is_finite())
    }
}

/// Linear capacity ramp `C = c_max · t / t_max`.
pub fn capacity_schedule(t: u64, t_max: u64, c_max: f64) -> f64 {
    if t_max == 0 {
        return c_max;
    }
    c_max * t.min(t_max) as f64 / t_max as f64
}

struct Common {
    recon: NodeId,
    kl_dim: NodeId,
}

fn common_terms<T: Real>(g: &mut Graph<'_, T>, out: &VaeOutputs, target: &Tensor<T>) -> Result<Common> {
    let batch = g.shape(out.mu)[0];
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv = 1.0 / batch as f64;
    let recon_ps = g.bernoulli_nll(out.logits, target.clone())?;
    let recon_sum = g.sum_all(recon_ps)?;
    let recon = g.scale(recon_sum, inv)?;
    let kl = g.diag_gaussian_kl(out.mu, out.logvar)?;
    let kl_sum = g.sum_axis(kl, 0)?;
    let kl_dim = g.scale(kl_sum, inv)?;
    Ok(Common { recon, kl_dim })
}

fn mean<T: Real>(g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
    let n = g.shape(x)[0];
    let s = g.sum_all(x)?;
    g.scale(s, 1.0 / n as f64)
}

/// `recon + Σ_d w_d · KL_d`
fn weighted_kl_loss<T: Real>(
    g: &mut Graph<'_, T>,
    c: &Common,
    weights: &[f64],
) -> Result<NodeId> {
    let w = Tensor::from_f64(&[weights.len()], weights)?;
    let w = g.input(w);
    let weighted = g.mul(c.kl_dim, w)?;
    let penalty = g.sum_all(weighted)?;
    g.add(c.recon, penalty)
}

/// Record the objective on the graph; returns the scalar loss node and the
/// breakdown of its value.
pub fn objective_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
    objective: Objective,
) -> Result<(NodeId, LossBreakdown)> {
    let c = common_terms(g, out, target)?;
    let dims = g.shape(c.kl_dim)[0];
    let mut capacity = None;
    let (mut mi, mut tc, mut dwkl) = (None, None, None);

    let total = match objective {
        Objective::Elbo => weighted_kl_loss(g, &c, &vec![1.0; dims])?,
        Objective::BetaVae { beta } => {
            if !(beta >= 0.0) {
                return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
            }
            weighted_kl_loss(g, &c, &vec![beta; dims])?
        }
        Objective::CascadeVaec {
            stage,
            beta_low,
            beta_high,
        } => {
            if stage == 0 || stage > dims {
                return Err(Error::OutOfRange(format!("cascade stage {stage} not in 1..={dims}")));
            }
            let w: Vec<f64> = (0..dims)
                .map(|d| if d < stage { beta_low } else { beta_high })
                .collect();
            weighted_kl_loss(g, &c, &w)?
        }
        Objective::AnnealedVae {
            capacity: cap,
            gamma,
        } => {
            if !(cap >= 0.0) {
                return Err(Error::InvalidArgument(format!("capacity must be >= 0, got {cap}")));
            }
            capacity = Some(cap);
            let kl_total = g.sum_all(c.kl_dim)?;
            let shifted = g.add_scalar(kl_total, -cap)?;
            let gap = g.abs(shifted)?;
            let penalty = g.scale(gap, gamma)?;
            g.add(c.recon, penalty)?
        }
        Objective::BetaTcVae { beta, dataset_size } => {
            let batch = g.shape(out.z)[0];
            if batch < 2 {
                return Err(Error::InvalidArgument(format!(
                    "total-correlation estimate needs a batch of at least 2, got {batch}"
                )));
            }
            if dataset_size == 0 {
                return Err(Error::InvalidArgument("dataset size must be positive".into()));
            }
            let log_nm = ((dataset_size as f64) * (batch as f64)).ln();
            // log q(z|x)
            let own = g.gaussian_log_density(out.z, out.mu, out.logvar)?;
            let log_qzx = g.sum_axis(own, 1)?;
            // log p(z)
            let prior = g.std_normal_log_density(out.z)?;
            let log_pz = g.sum_axis(prior, 1)?;
            // [i, j, d] = log q(z_i,d | x_j)
            let pair = g.pairwise_gaussian_log_density(out.z, out.mu, out.logvar)?;
            let joint = g.sum_axis(pair, 2)?;
            let lse_joint = g.logsumexp_axis(joint, 1)?;
            let log_qz = g.add_scalar(lse_joint, -log_nm)?;
            let lse_marg = g.logsumexp_axis(pair, 1)?;
            let marg = g.add_scalar(lse_marg, -log_nm)?;
            let log_qz_prod = g.sum_axis(marg, 1)?;

            let mi_ps = g.sub(log_qzx, log_qz)?;
            let tc_ps = g.sub(log_qz, log_qz_prod)?;
            let dw_ps = g.sub(log_qz_prod, log_pz)?;
            let mi_n = mean(g, mi_ps)?;
            let tc_n = mean(g, tc_ps)?;
            let dw_n = mean(g, dw_ps)?;
            mi = Some(g.scalar(mi_n));
            tc = Some(g.scalar(tc_n));
            dwkl = Some(g.scalar(dw_n));

            let tc_w = g.scale(tc_n, beta)?;
            let a = g.add(c.recon, mi_n)?;
            let b = g.add(a, tc_w)?;
            g.add(b, dw_n)?
        }
    };

    let kl_per_dim = g.value(c.kl_dim).to_f64_vec();
    let breakdown = LossBreakdown {
        objective: objective.name(),
        total: g.scalar(total),
        recon: g.scalar(c.recon),
        kl_total: kl_per_dim.iter().sum(),
        kl_per_dim,
        capacity,
        mi,
        tc,
        dwkl,
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", objective.name())));
    }
    Ok((total, breakdown))
}

/// Negative ELBO.
pub fn elbo_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
) -> Result<(NodeId, LossBreakdown)> {
    objective_loss(g, out, target, Objective::Elbo)
}

pub fn beta_vae_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
    beta: f64,
) -> Result<(NodeId, LossBreakdown)> {
    objective_loss(g, out, target, Objective::BetaVae { beta })
}

pub fn annealed_vae_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
    capacity: f64,
    gamma: f64,
) -> Result<(NodeId, LossBreakdown)> {
    objective_loss(g, out, target, Objective::AnnealedVae { capacity, gamma })
}

pub fn beta_tcvae_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
    beta: f64,
    dataset_size: usize,
) -> Result<(NodeId, LossBreakdown)> {
    objective_loss(g, out, target, Objective::BetaTcVae { beta, dataset_size })
}

pub fn cascade_vaec_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &VaeOutputs,
    target: &Tensor<T>,
    stage: usize,
    beta_low: f64,
    beta_high: f64,
) -> Result<(NodeId, LossBreakdown)> {
    objective_loss(
        g,
        out,
        target,
        Objective::CascadeVaec {
            stage,
            beta_low,
            beta_high,
        },
    )
}

/// Per-sample KL of a diagonal Gaussian from the unit prior, in nats.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[cfg(test)]
mod tests;
