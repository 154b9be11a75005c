#![allow(dead_code)]

//! Finite-difference gradient oracle shared by the gradient suite and the
//! acceptance harness.

use deft_core::autodiff::{Graph, NodeId};
use deft_core::model::VaeOutputs;
use deft_core::objectives::{kl_diag_gaussian, objective_loss, Objective};
use deft_core::params::ParamStore;
use deft_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Linear,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Reshape,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Exp,
    Abs,
    SliceCols,
    ConcatCols,
    SumAll,
    SumAxis,
    LogSumExp,
    DiagGaussianKl,
    BernoulliNll,
    Reparameterize,
    GaussianLogDensity,
    StdNormalLogDensity,
    PairwiseGaussianLogDensity,
    SmallNet,
    Elbo,
    BetaVae,
    AnnealedVae,
    BetaTcVae,
    CascadeVaec,
}

pub const LAYER_OPS: &[Op] = &[
    Op::Linear,
    Op::Conv2d,
    Op::ConvTranspose2d,
    Op::Relu,
    Op::Reshape,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Scale,
    Op::AddScalar,
    Op::Exp,
    Op::Abs,
    Op::SliceCols,
    Op::ConcatCols,
    Op::SumAll,
    Op::SumAxis,
    Op::LogSumExp,
    Op::DiagGaussianKl,
    Op::BernoulliNll,
    Op::Reparameterize,
    Op::GaussianLogDensity,
    Op::StdNormalLogDensity,
    Op::PairwiseGaussianLogDensity,
    Op::SmallNet,
];

pub const OBJECTIVE_OPS: &[Op] = &[Op::Elbo, Op::BetaVae, Op::AnnealedVae, Op::BetaTcVae, Op::CascadeVaec];

/// A random scalar function of some parameter tensors.
#[derive(Clone, Debug)]
pub struct Case {
    pub op: Op,
    pub params: Vec<Tensor<f64>>,
    pub consts: Vec<Tensor<f64>>,
    pub scalars: Vec<f64>,
    pub ints: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero so kinks stay out of finite-difference reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

impl Case {
    pub fn random(op: Op, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64).wrapping_mul(0x9E37_79B9));
        let r = &mut rng;
        let b = r.gen_range(2..5);
        let d = r.gen_range(1..5);
        let mut c = Case {
            op,
            params: vec![],
            consts: vec![],
            scalars: vec![],
            ints: vec![],
        };
        match op {
            Op::Linear => {
                let (i, o) = (r.gen_range(1..6), r.gen_range(1..6));
                c.params = vec![uniform(r, &[b, i], -1.0, 1.0), uniform(r, &[o, i], -1.0, 1.0), uniform(r, &[o], -1.0, 1.0)];
                c.consts = vec![uniform(r, &[b, o], -1.0, 1.0)];
            }
            Op::Conv2d | Op::ConvTranspose2d => {
                let (ci, co) = (r.gen_range(1..3), r.gen_range(1..3));
                let hw = if op == Op::Conv2d { [4, 8][r.gen_range(0..2)] } else { [2, 4][r.gen_range(0..2)] };
                let n = r.gen_range(1..3);
                let w_shape = if op == Op::Conv2d { [co, ci, 4, 4] } else { [ci, co, 4, 4] };
                let out = if op == Op::Conv2d { hw / 2 } else { hw * 2 };
                c.params = vec![uniform(r, &[n, ci, hw, hw], -1.0, 1.0), uniform(r, &w_shape, -0.5, 0.5), uniform(r, &[co], -0.5, 0.5)];
                c.consts = vec![uniform(r, &[n, co, out, out], -1.0, 1.0)];
            }
            Op::Relu | Op::Abs => {
                let mut x = away_from_zero(r, &[b, d]);
                // At least one live unit.
                x.data_mut()[0] = x.data()[0].abs();
                c.params = vec![x];
                c.consts = vec![uniform(r, &[b, d], -1.0, 1.0)];
            }
            Op::Reshape | Op::Exp | Op::AddScalar | Op::Scale | Op::SumAll | Op::StdNormalLogDensity => {
                c.params = vec![uniform(r, &[b, d], -2.0, 2.0)];
                c.consts = vec![uniform(r, &[b, d], -1.0, 1.0)];
                c.scalars = vec![r.gen_range(-3.0..3.0)];
            }
            Op::Add | Op::Sub | Op::Mul => {
                c.params = vec![uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 2.0)];
                c.consts = vec![uniform(r, &[b, d], -1.0, 1.0)];
            }
            Op::SliceCols => {
                let w = r.gen_range(2..6);
                let start = r.gen_range(0..w - 1);
                let len = r.gen_range(1..w - start + 1);
                c.params = vec![uniform(r, &[b, w], -2.0, 2.0)];
                c.consts = vec![uniform(r, &[b, len], -1.0, 1.0)];
                c.ints = vec![start, len];
            }
            Op::ConcatCols => {
                let (w1, w2) = (r.gen_range(1..4), r.gen_range(1..4));
                c.params = vec![uniform(r, &[b, w1], -2.0, 2.0), uniform(r, &[b, w2], -2.0, 2.0)];
                c.consts = vec![uniform(r, &[b, w1 + w2], -1.0, 1.0)];
            }
            Op::SumAxis | Op::LogSumExp => {
                let e = r.gen_range(2..4);
                let axis = r.gen_range(0..3);
                let shape = [b, d, e];
                let mut out = shape.to_vec();
                out.remove(axis);
                c.params = vec![uniform(r, &shape, -3.0, 3.0)];
                c.consts = vec![uniform(r, &out, -1.0, 1.0)];
                c.ints = vec![axis];
            }
            Op::DiagGaussianKl | Op::Reparameterize => {
                c.params = vec![uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 1.0)];
                c.consts = vec![uniform(r, &[b, d], -1.0, 1.0), uniform(r, &[b, d], -2.0, 2.0)];
            }
            Op::BernoulliNll => {
                let p = r.gen_range(1..8);
                c.params = vec![uniform(r, &[b, p], -4.0, 4.0)];
                c.consts = vec![uniform(r, &[b, p], 0.0, 1.0), uniform(r, &[b], -1.0, 1.0)];
            }
            Op::GaussianLogDensity => {
                c.params = vec![uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 1.0)];
                c.consts = vec![uniform(r, &[b, d], -1.0, 1.0)];
            }
            Op::PairwiseGaussianLogDensity => {
                c.params = vec![uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, d], -2.0, 1.0)];
                c.consts = vec![uniform(r, &[b, b, d], -1.0, 1.0)];
            }
            Op::SmallNet => {
                // conv(1 -> 2, 8x8 -> 4x4) -> relu -> dense(32 -> 3), with
                // inputs resampled until no pre-activation sits near the kink.
                loop {
                    let x = uniform(r, &[2, 1, 8, 8], 0.0, 1.0);
                    let w = uniform(r, &[2, 1, 4, 4], -0.5, 0.5);
                    let bias = uniform(r, &[2], -0.2, 0.2);
                    let store = ParamStore::new();
                    let mut g = Graph::new(&store);
                    let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(bias.clone()));
                    let y = g.conv2d(xn, wn, bn, 2, 1).unwrap();
                    if g.value(y).data().iter().all(|v| v.abs() > 1e-3) {
                        c.params = vec![w, bias, uniform(r, &[3, 32], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)];
                        c.consts = vec![x, uniform(r, &[2, 3], -1.0, 1.0)];
                        break;
                    }
                }
            }
            Op::Elbo | Op::BetaVae | Op::AnnealedVae | Op::BetaTcVae | Op::CascadeVaec => {
                let p = r.gen_range(2..7);
                let mu = uniform(r, &[b, d], -1.5, 1.5);
                let lv = uniform(r, &[b, d], -1.5, 1.0);
                c.params = vec![mu.clone(), lv.clone(), uniform(r, &[b, p], -3.0, 3.0)];
                c.consts = vec![uniform(r, &[b, d], -2.0, 2.0), uniform(r, &[b, p], 0.0, 1.0)];
                c.scalars = vec![r.gen_range(0.5..8.0), r.gen_range(0.5..8.0)];
                if op == Op::AnnealedVae {
                    // Keep |KL - C| well away from its kink.
                    let kl: f64 = (0..b)
                        .map(|i| kl_diag_gaussian(&mu.data()[i * d..(i + 1) * d], &lv.data()[i * d..(i + 1) * d]))
                        .sum::<f64>()
                        / b as f64;
                    let gap = r.gen_range(0.5..2.0);
                    c.scalars[1] = if r.gen_bool(0.5) { kl + gap } else { (kl - gap).max(0.0) };
                    if (c.scalars[1] - kl).abs() < 0.1 {
                        c.scalars[1] = kl + gap;
                    }
                }
                c.ints = vec![r.gen_range(1..d + 1), r.gen_range(b..1000)];
            }
        }
        c
    }

    fn konst<T: Real>(&self, g: &mut Graph<'_, T>, i: usize) -> NodeId {
        g.input(self.consts[i].cast())
    }

    /// `Σ y ⊙ R` for the case's fixed random projection `R`.
    fn project<T: Real>(&self, g: &mut Graph<'_, T>, y: NodeId, i: usize) -> Result<NodeId> {
        let r = self.konst(g, i);
        let m = g.mul(y, r)?;
        g.sum_all(m)
    }

    pub fn build<T: Real>(&self, g: &mut Graph<'_, T>, p: &[NodeId]) -> Result<NodeId> {
        let s = &self.scalars;
        match self.op {
            Op::Linear => {
                let y = g.linear(p[0], p[1], p[2])?;
                let q = g.mul(y, y)?;
                let q = g.scale(q, 0.5)?;
                let l = self.project(g, y, 0)?;
                let sq = g.sum_all(q)?;
                g.add(l, sq)
            }
            Op::Conv2d | Op::ConvTranspose2d => {
                let y = if self.op == Op::Conv2d {
                    g.conv2d(p[0], p[1], p[2], 2, 1)?
                } else {
                    g.conv_transpose2d(p[0], p[1], p[2], 2, 1)?
                };
                let q = g.mul(y, y)?;
                let q = g.scale(q, 0.5)?;
                let l = self.project(g, y, 0)?;
                let sq = g.sum_all(q)?;
                g.add(l, sq)
            }
            Op::Relu => {
                let y = g.relu(p[0])?;
                let y2 = g.mul(y, y)?;
                self.project(g, y2, 0)
            }
            Op::Abs => {
                let y = g.abs(p[0])?;
                let y2 = g.mul(y, p[0])?;
                self.project(g, y2, 0)
            }
            Op::Reshape => {
                let shape = g.shape(p[0]).to_vec();
                let flat = g.reshape(p[0], &[shape.iter().product()])?;
                let e = g.exp(flat)?;
                let back = g.reshape(e, &shape)?;
                self.project(g, back, 0)
            }
            Op::Exp => {
                let y = g.exp(p[0])?;
                self.project(g, y, 0)
            }
            Op::AddScalar => {
                let y = g.add_scalar(p[0], s[0])?;
                let y = g.mul(y, y)?;
                self.project(g, y, 0)
            }
            Op::Scale => {
                let y = g.scale(p[0], s[0])?;
                let y = g.mul(y, p[0])?;
                self.project(g, y, 0)
            }
            Op::SumAll => {
                let e = g.exp(p[0])?;
                let t = g.sum_all(e)?;
                g.mul(t, t)
            }
            Op::StdNormalLogDensity => {
                let y = g.std_normal_log_density(p[0])?;
                self.project(g, y, 0)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let y = match self.op {
                    Op::Add => g.add(p[0], p[1])?,
                    Op::Sub => g.sub(p[0], p[1])?,
                    _ => g.mul(p[0], p[1])?,
                };
                let y = g.mul(y, p[0])?;
                self.project(g, y, 0)
            }
            Op::SliceCols => {
                let y = g.slice_cols(p[0], self.ints[0], self.ints[1])?;
                let y = g.exp(y)?;
                self.project(g, y, 0)
            }
            Op::ConcatCols => {
                let y = g.concat_cols(&[p[0], p[1]])?;
                let y = g.exp(y)?;
                self.project(g, y, 0)
            }
            Op::SumAxis => {
                let e = g.exp(p[0])?;
                let y = g.sum_axis(e, self.ints[0])?;
                self.project(g, y, 0)
            }
            Op::LogSumExp => {
                let y = g.logsumexp_axis(p[0], self.ints[0])?;
                self.project(g, y, 0)
            }
            Op::DiagGaussianKl => {
                let y = g.diag_gaussian_kl(p[0], p[1])?;
                self.project(g, y, 0)
            }
            Op::Reparameterize => {
                let z = g.reparameterize(p[0], p[1], self.consts[1].cast())?;
                let z = g.mul(z, z)?;
                self.project(g, z, 0)
            }
            Op::BernoulliNll => {
                let y = g.bernoulli_nll(p[0], self.consts[0].cast())?;
                self.project(g, y, 1)
            }
            Op::GaussianLogDensity => {
                let y = g.gaussian_log_density(p[0], p[1], p[2])?;
                self.project(g, y, 0)
            }
            Op::PairwiseGaussianLogDensity => {
                let y = g.pairwise_gaussian_log_density(p[0], p[1], p[2])?;
                self.project(g, y, 0)
            }
            Op::SmallNet => {
                let x = self.konst(g, 0);
                let h = g.conv2d(x, p[0], p[1], 2, 1)?;
                let h = g.relu(h)?;
                let h = g.reshape(h, &[2, 32])?;
                let y = g.linear(h, p[2], p[3])?;
                let y = g.exp(y)?;
                self.project(g, y, 1)
            }
            Op::Elbo | Op::BetaVae | Op::AnnealedVae | Op::BetaTcVae | Op::CascadeVaec => {
                let objective = match self.op {
                    Op::Elbo => Objective::Elbo,
                    Op::BetaVae => Objective::BetaVae { beta: s[0] },
                    Op::AnnealedVae => Objective::AnnealedVae {
                        capacity: s[1],
                        gamma: s[0],
                    },
                    Op::BetaTcVae => Objective::BetaTcVae {
                        beta: s[0],
                        dataset_size: self.ints[1],
                    },
                    _ => Objective::CascadeVaec {
                        stage: self.ints[0],
                        beta_low: s[0].min(s[1]),
                        beta_high: s[0].max(s[1]),
                    },
                };
                let z = g.reparameterize(p[0], p[1], self.consts[0].cast())?;
                let out = VaeOutputs {
                    mu: p[0],
                    logvar: p[1],
                    z,
                    logits: p[2],
                };
                Ok(objective_loss(g, &out, &self.consts[1].cast(), objective)?.0)
            }
        }
    }

    fn store<T: Real>(&self, params: &[Tensor<f64>]) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (i, t) in params.iter().enumerate() {
            store.add(format!("p{i}"), t.cast());
        }
        store
    }

    pub fn value(&self, params: &[Tensor<f64>]) -> f64 {
        let store = self.store::<f64>(params);
        let mut g = Graph::new(&store);
        let nodes: Vec<NodeId> = store.ids().map(|id| g.param(id)).collect();
        let l = self.build(&mut g, &nodes).expect("forward");
        g.scalar(l)
    }

    /// Analytic gradient in precision `T`, widened to f64.
    pub fn analytic<T: Real>(&self) -> Vec<Vec<f64>> {
        let store = self.store::<T>(&self.params);
        let mut g = Graph::new(&store);
        let nodes: Vec<NodeId> = store.ids().map(|id| g.param(id)).collect();
        let l = self.build(&mut g, &nodes).expect("forward");
        let grads = g.backward(l).expect("backward");
        store
            .ids()
            .zip(&self.params)
            .map(|(id, p)| grads.get(id).map_or(vec![0.0; p.len()], |t| t.to_f64_vec()))
            .collect()
    }

    /// Central differences in f64 with step `h`.
    pub fn numeric(&self, h: f64) -> Vec<Vec<f64>> {
        let mut params = self.params.clone();
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut gi = Vec::with_capacity(params[i].len());
            for k in 0..params[i].len() {
                let orig = params[i].data()[k];
                params[i].data_mut()[k] = orig + h;
                let up = self.value(&params);
                params[i].data_mut()[k] = orig - h;
                let down = self.value(&params);
                params[i].data_mut()[k] = orig;
                gi.push((up - down) / (2.0 * h));
            }
            out.push(gi);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Largest elementwise relative error over entries whose analytic gradient
/// exceeds `floor` in magnitude.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    let checked = analytic.iter().flatten().filter(|a| a.abs() > floor).count();
    assert!(checked > 0, "no gradient entry above {floor}");
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&a, &n) in a.iter().zip(n) {
            if a.abs() <= floor {
                continue;
            }
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        }
    }
    worst
}

pub const FD_STEP: f64 = 1e-4;
