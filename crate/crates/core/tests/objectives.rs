use deft_core::autodiff::Graph;
use deft_core::datasets::{generate_grid_dataset, FactorSchema};
use deft_core::model::{ModelConfig, VaeModel, VaeOutputs};
use deft_core::nn::ArchScale;
use deft_core::objectives::*;
use deft_core::params::ParamStore;
use deft_core::rng;
use deft_core::trainer::standard_normal;
use deft_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn eval_model(model: &VaeModel<f32>, x: &Tensor<f32>, noise: &Tensor<f32>, obj: Objective) -> (LossBreakdown, Vec<Vec<f32>>) {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, x, noise.clone()).unwrap();
    let (loss, b) = objective_loss(&mut g, &out, x, obj).unwrap();
    let grads = g.backward(loss).unwrap();
    let gv = model.params.ids().map(|id| grads.get(id).unwrap().data().to_vec()).collect();
    (b, gv)
}

fn batches() -> (VaeModel<f32>, Vec<(Tensor<f32>, Tensor<f32>)>) {
    let ds = generate_grid_dataset(&FactorSchema::new(&[("shape", 3), ("posX", 4), ("posY", 4)]).unwrap(), 16).unwrap();
    let model = VaeModel::<f32>::new(ModelConfig::deft(2, 2, 16, 1), 11).unwrap();
    let mut r = rng::stream(4, "test", 0);
    let out = (0..10)
        .map(|_| {
            let idx: Vec<usize> = (0..8).map(|_| r.gen_range(0..ds.len())).collect();
            (ds.batch::<f32>(&idx), standard_normal::<f32, _>(&[8, 4], &mut r))
        })
        .collect();
    (model, out)
}

#[test]
fn beta_one_equals_elbo_bitwise() {
    let (model, bs) = batches();
    for (x, n) in &bs {
        let (a, ga) = eval_model(&model, x, n, Objective::Elbo);
        let (b, gb) = eval_model(&model, x, n, Objective::BetaVae { beta: 1.0 });
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(ga, gb);
    }
}

#[test]
fn equal_cascade_pressures_equal_beta_vae_bitwise() {
    let (model, bs) = batches();
    for (i, (x, n)) in bs.iter().enumerate() {
        let beta = 0.5 + i as f64 * 1.7;
        let stage = 1 + i % 4;
        let (a, ga) = eval_model(&model, x, n, Objective::BetaVae { beta });
        let (b, gb) = eval_model(&model, x, n, Objective::CascadeVaec { stage, beta_low: beta, beta_high: beta });
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(ga, gb);
    }
}

#[test]
fn beta_four_is_recon_plus_four_kl() {
    let (model, bs) = batches();
    let (x, n) = &bs[0];
    let (b, _) = eval_model(&model, x, n, Objective::BetaVae { beta: 4.0 });
    let want = b.recon + 4.0 * b.kl_total;
    assert!((b.total - want).abs() <= 1e-5 * want.abs());
    let (b0, _) = eval_model(&model, x, n, Objective::BetaVae { beta: 0.0 });
    assert_eq!(b0.total, b0.recon);
}

#[test]
fn cascade_full_stage_weights_everything_low() {
    let (model, bs) = batches();
    let (x, n) = &bs[1];
    let (a, _) = eval_model(&model, x, n, Objective::CascadeVaec { stage: 4, beta_low: 2.0, beta_high: 9.0 });
    let (b, _) = eval_model(&model, x, n, Objective::BetaVae { beta: 2.0 });
    assert_eq!(a.total, b.total);
}

/// Leaf-parameter objective evaluation in f64.
fn leaf_eval(mu: &[f64], lv: &[f64], logits: &[f64], noise: &[f64], target: &[f64], b: usize, obj: Objective) -> (LossBreakdown, Vec<Vec<f64>>) {
    let d = mu.len() / b;
    let p = logits.len() / b;
    let mut store = ParamStore::<f64>::new();
    let ids = [
        store.add("mu", Tensor::from_f64(&[b, d], mu).unwrap()),
        store.add("lv", Tensor::from_f64(&[b, d], lv).unwrap()),
        store.add("logits", Tensor::from_f64(&[b, p], logits).unwrap()),
    ];
    let mut g = Graph::new(&store);
    let (m, l, lo) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
    let z = g.reparameterize(m, l, Tensor::from_f64(&[b, d], noise).unwrap()).unwrap();
    let out = VaeOutputs { mu: m, logvar: l, z, logits: lo };
    let (loss, br) = objective_loss(&mut g, &out, &Tensor::from_f64(&[b, p], target).unwrap(), obj).unwrap();
    let grads = g.backward(loss).unwrap();
    (br, ids.iter().map(|&id| grads.get(id).unwrap().to_f64_vec()).collect())
}

fn random_leaf(seed: u64, b: usize, d: usize, p: usize) -> [Vec<f64>; 5] {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.gen_range(lo..hi)).collect::<Vec<f64>>();
    [u(b * d, -1.5, 1.5), u(b * d, -1.0, 1.0), u(b * p, -3.0, 3.0), u(b * d, -2.0, 2.0), u(b * p, 0.0, 1.0)]
}

#[test]
fn elbo_matches_direct_formula() {
    let (b, d, p) = (3, 2, 5);
    let [mu, lv, logits, noise, target] = random_leaf(1, b, d, p);
    let (br, _) = leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::Elbo);
    let sig = |l: f64| 1.0 / (1.0 + (-l).exp());
    let recon: f64 = logits
        .iter()
        .zip(&target)
        .map(|(&l, &t)| -(t * sig(l).ln() + (1.0 - t) * (1.0 - sig(l)).ln()))
        .sum::<f64>()
        / b as f64;
    let kl: f64 = (0..b * d).map(|i| 0.5 * (mu[i] * mu[i] + lv[i].exp() - 1.0 - lv[i])).sum::<f64>() / b as f64;
    assert!((br.recon - recon).abs() < 1e-10 * recon);
    assert!((br.kl_total - kl).abs() < 1e-12 * kl.max(1.0));
    assert!((br.total - recon - kl).abs() < 1e-10 * br.total);
}

#[test]
fn prior_posterior_gives_zero_kl() {
    let (b, d, p) = (2, 3, 4);
    let [_, _, logits, noise, target] = random_leaf(2, b, d, p);
    let (br, _) = leaf_eval(&vec![0.0; b * d], &vec![0.0; b * d], &logits, &noise, &target, b, Objective::Elbo);
    assert_eq!(br.kl_total, 0.0);
}

#[test]
fn beta_gradient_difference_is_the_kl_gradient() {
    let (b, d, p) = (4, 3, 5);
    let [mu, lv, logits, noise, target] = random_leaf(3, b, d, p);
    let (_, g2) = leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::BetaVae { beta: 2.0 });
    let (_, g1) = leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::BetaVae { beta: 1.0 });
    // Finite differences of the batch-mean KL alone.
    let kl = |mu: &[f64], lv: &[f64]| (0..b).map(|i| kl_diag_gaussian(&mu[i * d..(i + 1) * d], &lv[i * d..(i + 1) * d])).sum::<f64>() / b as f64;
    let h = 1e-5;
    for k in 0..b * d {
        let (mut up, mut dn) = (mu.clone(), mu.clone());
        up[k] += h;
        dn[k] -= h;
        let fd_mu = (kl(&up, &lv) - kl(&dn, &lv)) / (2.0 * h);
        let (mut up, mut dn) = (lv.clone(), lv.clone());
        up[k] += h;
        dn[k] -= h;
        let fd_lv = (kl(&mu, &up) - kl(&mu, &dn)) / (2.0 * h);
        assert!((g2[0][k] - g1[0][k] - fd_mu).abs() < 1e-8, "mu {k}");
        assert!((g2[1][k] - g1[1][k] - fd_lv).abs() < 1e-8, "logvar {k}");
    }
}

#[test]
fn annealed_penalty_shapes() {
    let (b, d, p) = (3, 2, 4);
    let [mu, lv, logits, noise, target] = random_leaf(4, b, d, p);
    let (e, _) = leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::Elbo);
    let at = |c: f64| leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::AnnealedVae { capacity: c, gamma: 1000.0 }).0;
    let zero = at(0.0);
    assert!((zero.total - zero.recon - 1000.0 * e.kl_total).abs() < 1e-9 * zero.total);
    let hit = at(e.kl_total);
    assert!((hit.total - hit.recon).abs() < 1e-9);
    // Continuity in C.
    for c in [0.3, 1.0, e.kl_total, 2.5] {
        assert!((at(c + 1e-9).total - at(c).total).abs() < 1e-5);
    }
}

#[test]
fn capacity_schedule_midpoint() {
    assert_eq!(capacity_schedule(0, 1000, 25.0), 0.0);
    assert_eq!(capacity_schedule(1000, 1000, 25.0), 25.0);
    assert_eq!(capacity_schedule(500, 1000, 25.0), 12.5);
}

#[test]
fn single_latent_has_zero_total_correlation() {
    let (b, d, p) = (6, 1, 3);
    let [mu, lv, logits, noise, target] = random_leaf(5, b, d, p);
    let (br, _) = leaf_eval(&mu, &lv, &logits, &noise, &target, b, Objective::BetaTcVae { beta: 6.0, dataset_size: 100 });
    assert!(br.tc.unwrap().abs() < 1e-12);
}

#[test]
fn total_correlation_matches_gaussian_closed_form() {
    // Means drawn from a correlated Gaussian, isotropic posterior noise: the
    // aggregate posterior is N(0, S + s²I), whose total correlation is
    // -0.5·ln(1 - r²) with r the aggregate correlation. The minibatch
    // weighted estimator with weight 1/(N·M) carries a (D - 1)·ln N offset
    // when the batch is the whole dataset (N = M).
    let n = 2000;
    let (rho, s2): (f64, f64) = (0.9, 0.25);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut mu = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let a: f64 = r.sample(StandardNormal);
        let e: f64 = r.sample(StandardNormal);
        mu.push(a);
        mu.push(rho * a + (1.0 - rho * rho).sqrt() * e);
    }
    let lv = vec![s2.ln(); 2 * n];
    let noise: Vec<f64> = (0..2 * n).map(|_| r.sample(StandardNormal)).collect();
    let (br, _) = leaf_eval(&mu, &lv, &vec![0.0; n], &noise, &vec![0.5; n], n, Objective::BetaTcVae { beta: 1.0, dataset_size: n });
    let corr = rho / (1.0 + s2);
    let closed = -0.5 * (1.0 - corr * corr).ln();
    let est = br.tc.unwrap() - (n as f64).ln();
    assert!((est - closed).abs() < 0.05, "estimate {est}, closed form {closed}");
}

#[test]
fn decomposition_sums_to_kl_on_a_frozen_model() {
    let ds = generate_grid_dataset(&FactorSchema::new(&[("shape", 3), ("scale", 2), ("posX", 4), ("posY", 4)]).unwrap(), 16).unwrap();
    let model = VaeModel::<f32>::new(ModelConfig::baseline(10, 16, 1, ArchScale::Desk), 21).unwrap();
    let mut r = rng::stream(21, "batches", 0);
    let (mut sum_terms, mut sum_kl) = (0.0, 0.0);
    for _ in 0..100 {
        let idx: Vec<usize> = (0..64).map(|_| r.gen_range(0..ds.len())).collect();
        let x = ds.batch::<f32>(&idx);
        let noise = standard_normal::<f32, _>(&[64, 10], &mut r);
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &x, noise).unwrap();
        let (_, b) = objective_loss(&mut g, &out, &x, Objective::BetaTcVae { beta: 1.0, dataset_size: ds.len() }).unwrap();
        sum_terms += b.mi.unwrap() + b.tc.unwrap() + b.dwkl.unwrap();
        sum_kl += b.kl_total;
    }
    let rel = (sum_terms - sum_kl).abs() / sum_kl;
    assert!(sum_kl > 0.1);
    assert!(rel < 0.05, "decomposition {sum_terms} vs KL {sum_kl}");
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let d = r.gen_range(1..4);
        let mu: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..1.5)).collect();
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut v = 0.0;
            for k in 0..d {
                let e: f64 = r.sample(StandardNormal);
                let z = mu[k] + (0.5 * lv[k]).exp() * e;
                // log q - log p for one dimension.
                v += -0.5 * lv[k] - 0.5 * e * e + 0.5 * z * z;
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = kl_diag_gaussian(&mu, &lv);
        assert!((mean - exact).abs() < 3.0 * se + 1e-12, "{exact} vs {mean} ± {se}");
    }
    assert_eq!(kl_diag_gaussian(&[1.0], &[0.0]), 0.5);
}

#[test]
fn reparameterized_samples_have_the_posterior_variance() {
    let n = 100_000;
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let noise: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mu = g.input(Tensor::full(&[n, 1], 0.7));
    let lv = g.input(Tensor::full(&[n, 1], 0.4f64));
    let z = g.reparameterize(mu, lv, Tensor::from_f64(&[n, 1], &noise).unwrap()).unwrap();
    let zs = g.value(z).to_f64_vec();
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Standard error of a Gaussian sample variance: σ²·sqrt(2 / (n - 1)).
    let want = 0.4f64.exp();
    let se = want * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - want).abs() < 3.0 * se, "{var} vs {want}");
}

#[test]
fn bernoulli_loss_matches_direct_formula() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let (b, p) = (3, 7);
    let l: Vec<f64> = (0..b * p).map(|_| r.gen_range(-6.0..6.0)).collect();
    let t: Vec<f64> = (0..b * p).map(|_| r.gen_range(0.0..1.0)).collect();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let ln = g.input(Tensor::from_f64(&[b, p], &l).unwrap());
    let y = g.bernoulli_nll(ln, Tensor::from_f64(&[b, p], &t).unwrap()).unwrap();
    let got = g.value(y).to_f64_vec();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for i in 0..b {
        let want: f64 = (0..p)
            .map(|k| {
                let (l, t) = (l[i * p + k], t[i * p + k]);
                -(t * sig(l).ln() + (1.0 - t) * (1.0 - sig(l)).ln())
            })
            .sum();
        assert!((got[i] - want).abs() < 1e-12 * want.max(1.0));
    }
}
