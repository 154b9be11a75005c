use super::*;
use crate::params::ParamStore;

struct Toy {
    mu: Tensor<f64>,
    lv: Tensor<f64>,
    noise: Tensor<f64>,
    logits: Tensor<f64>,
    target: Tensor<f64>,
}

fn toy(b: usize, d: usize, p: usize) -> Toy {
    let f = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect() };
    Toy {
        mu: Tensor::from_f64(&[b, d], &f(b * d, 0.7)).unwrap(),
        lv: Tensor::from_f64(&[b, d], &f(b * d, 1.3).iter().map(|v| 0.5 * v).collect::<Vec<_>>()).unwrap(),
        noise: Tensor::from_f64(&[b, d], &f(b * d, 2.1)).unwrap(),
        logits: Tensor::from_f64(&[b, p], &f(b * p, 0.9).iter().map(|v| 3.0 * v).collect::<Vec<_>>()).unwrap(),
        target: Tensor::from_f64(&[b, p], &f(b * p, 0.4).iter().map(|v| v.abs()).collect::<Vec<_>>()).unwrap(),
    }
}

fn eval(t: &Toy, obj: Objective) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mu = g.input(t.mu.clone());
    let logvar = g.input(t.lv.clone());
    let z = g.reparameterize(mu, logvar, t.noise.clone())?;
    let logits = g.input(t.logits.clone());
    let out = VaeOutputs { mu, logvar, z, logits };
    objective_loss(&mut g, &out, &t.target, obj).map(|(_, b)| b)
}

#[test]
fn capacity_ramp() {
    assert_eq!(capacity_schedule(0, 100, 25.0), 0.0);
    assert_eq!(capacity_schedule(100, 100, 25.0), 25.0);
    assert_eq!(capacity_schedule(50, 100, 25.0), 12.5);
}

#[test]
fn beta_one_is_elbo() {
    let t = toy(4, 3, 5);
    assert_eq!(eval(&t, Objective::Elbo).unwrap().total, eval(&t, Objective::BetaVae { beta: 1.0 }).unwrap().total);
}

#[test]
fn beta_zero_is_reconstruction_only() {
    let b = eval(&toy(4, 3, 5), Objective::BetaVae { beta: 0.0 }).unwrap();
    assert_eq!(b.total, b.recon);
    assert!(eval(&toy(4, 3, 5), Objective::BetaVae { beta: -1.0 }).is_err());
}

#[test]
fn kl_total_is_sum_of_dims() {
    let b = eval(&toy(4, 3, 5), Objective::Elbo).unwrap();
    let s: f64 = b.kl_per_dim.iter().sum();
    assert!((b.kl_total - s).abs() <= 1e-12 * s.abs());
}

#[test]
fn cascade_stage_bounds() {
    let t = toy(2, 3, 4);
    let c = |stage| Objective::CascadeVaec { stage, beta_low: 1.0, beta_high: 10.0 };
    assert!(eval(&t, c(0)).is_err());
    assert!(eval(&t, c(4)).is_err());
    let b = eval(&t, c(1)).unwrap();
    let want = b.recon + b.kl_per_dim[0] + 10.0 * (b.kl_per_dim[1] + b.kl_per_dim[2]);
    assert!((b.total - want).abs() < 1e-12 * want);
}

#[test]
fn annealed_penalty_vanishes_at_capacity() {
    let t = toy(3, 2, 4);
    let kl = eval(&t, Objective::Elbo).unwrap().kl_total;
    let b = eval(&t, Objective::AnnealedVae { capacity: kl, gamma: 1000.0 }).unwrap();
    assert!((b.total - b.recon).abs() < 1e-9);
}

#[test]
fn tcvae_needs_two_samples() {
    let t = toy(1, 2, 4);
    assert!(eval(&t, Objective::BetaTcVae { beta: 6.0, dataset_size: 10 }).is_err());
    let t = toy(4, 2, 4);
    let b = eval(&t, Objective::BetaTcVae { beta: 6.0, dataset_size: 10 }).unwrap();
    let sum = b.mi.unwrap() + 6.0 * b.tc.unwrap() + b.dwkl.unwrap();
    assert!((b.total - b.recon - sum).abs() < 1e-10);
}

#[test]
fn closed_form_kl_helper() {
    assert_eq!(kl_diag_gaussian(&[1.0], &[0.0]), 0.5);
    assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}
