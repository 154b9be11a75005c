//! Count-based information measures and the disentanglement scores built on
//! them. Everything is in nats; normalized scores divide by factor entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::rng;
use crate::tensor::Real;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;

/// Quantized latent columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Discretized {
    /// One code vector per latent dimension.
    pub codes: Vec<Vec<usize>>,
    /// Dimensions whose values were all equal (mapped to bin 0).
    pub constant: Vec<bool>,
}

/// Quantile binning of each column of a row-major `[n, d]` matrix. Equal
/// values share the bin of their first occurrence in sorted order.
pub fn discretize_latents(values: &[f64], n: usize, d: usize, bins: usize) -> Result<Discretized> {
    if values.len() != n * d {
        return Err(Error::Shape(format!("{} values for a {n}x{d} matrix", values.len())));
    }
    if bins < 2 || n < bins {
        return Err(Error::InvalidArgument(format!(
            "need bins >= 2 and at least as many samples as bins (bins {bins}, samples {n})"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent values".into()));
    }
    let mut codes = Vec::with_capacity(d);
    let mut constant = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| values[i * d + j]).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut code = vec![0usize; n];
        let mut first_rank = 0;
        for (rank, &i) in order.iter().enumerate() {
            if rank > 0 && col[i] != col[order[rank - 1]] {
                first_rank = rank;
            }
            code[i] = first_rank * bins / n;
        }
        constant.push(col.iter().all(|&v| v == col[0]));
        codes.push(code);
    }
    Ok(Discretized { codes, constant })
}

/// Relabel to `0..k` in sorted order of the original values.
fn compress(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

fn counts(codes: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &x in codes {
        c[x] += 1;
    }
    c
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Accumulates `(1/N) Σ c · ln(num/den)` with cells grouped by their reduced
/// ratio, so equal count structures give bitwise-equal sums no matter how
/// the cells are labeled or ordered. Independence makes every ratio 1 and
/// the sum exactly 0.
struct RatioSum {
    n: u128,
    groups: BTreeMap<(u128, u128), u128>,
}

impl RatioSum {
    fn new(n: usize) -> Self {
        Self { n: n as u128, groups: BTreeMap::new() }
    }

    fn add(&mut self, weight: usize, num: u128, den: u128) {
        let g = gcd(num, den);
        *self.groups.entry((num / g, den / g)).or_insert(0) += weight as u128;
    }

    fn total(&self) -> f64 {
        let s: f64 = self
            .groups
            .iter()
            .map(|(&(num, den), &w)| w as f64 * (num as f64 / den as f64).ln())
            .sum();
        s / self.n as f64
    }
}

/// Plug-in Shannon entropy of the empirical distribution.
pub fn entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let (codes, k) = compress(labels);
    let mut acc = RatioSum::new(labels.len());
    for c in counts(&codes, k).into_iter().filter(|&c| c > 0) {
        // Same ratio as a deterministic joint cell: N·c / (c·c).
        acc.add(c, labels.len() as u128 * c as u128, (c as u128) * (c as u128));
    }
    acc.total()
}

/// Plug-in mutual information from the joint count table.
pub fn discrete_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("label lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("mutual information of empty samples".into()));
    }
    let (ca, ka) = compress(a);
    let (cb, kb) = compress(b);
    let mut joint = vec![0usize; ka * kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        joint[x * kb + y] += 1;
    }
    let (na, nb) = (counts(&ca, ka), counts(&cb, kb));
    let mut acc = RatioSum::new(a.len());
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                acc.add(c, a.len() as u128 * c as u128, na[x] as u128 * nb[y] as u128);
            }
        }
    }
    Ok(acc.total().max(0.0))
}

/// `values[j * num_factors + k] = I(z_j; c_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiMatrix {
    pub num_latents: usize,
    pub num_factors: usize,
    pub values: Vec<f64>,
    pub factor_entropies: Vec<f64>,
}

impl MiMatrix {
    pub fn new(num_latents: usize, num_factors: usize, values: Vec<f64>, factor_entropies: Vec<f64>) -> Result<Self> {
        if values.len() != num_latents * num_factors || factor_entropies.len() != num_factors {
            return Err(Error::Shape(format!(
                "MI matrix {num_latents}x{num_factors} with {} values and {} entropies",
                values.len(),
                factor_entropies.len()
            )));
        }
        Ok(Self {
            num_latents,
            num_factors,
            values,
            factor_entropies,
        })
    }

    /// MI between every code column and every factor column.
    pub fn from_codes(latent_codes: &[Vec<usize>], factor_labels: &[Vec<usize>]) -> Result<Self> {
        let mut values = Vec::with_capacity(latent_codes.len() * factor_labels.len());
        for z in latent_codes {
            for c in factor_labels {
                values.push(discrete_mutual_information(z, c)?);
            }
        }
        let ent = factor_labels.iter().map(|c| entropy(c)).collect();
        Self::new(latent_codes.len(), factor_labels.len(), values, ent)
    }

    pub fn get(&self, latent: usize, factor: usize) -> f64 {
        self.values[latent * self.num_factors + factor]
    }

    pub fn to_csv(&self, factor_names: &[String]) -> String {
        let mut s = String::from("latent");
        for name in factor_names {
            write!(s, ",{name}").unwrap();
        }
        s.push('\n');
        for j in 0..self.num_latents {
            write!(s, "{j}").unwrap();
            for k in 0..self.num_factors {
                write!(s, ",{}", self.get(j, k)).unwrap();
            }
            s.push('\n');
        }
        s.push_str("entropy");
        for h in &self.factor_entropies {
            write!(s, ",{h}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// `m`-th largest normalized MI for factor `k` and the latent achieving it.
/// Ties go to the lowest latent index.
pub fn nmi_rank(mi: &MiMatrix, k: usize, m: usize) -> Result<(f64, usize)> {
    if k >= mi.num_factors {
        return Err(Error::OutOfRange(format!("factor {k} of {}", mi.num_factors)));
    }
    if m == 0 || m > mi.num_latents {
        return Err(Error::OutOfRange(format!("rank {m} of {} latents", mi.num_latents)));
    }
    let h = mi.factor_entropies[k];
    if h <= 0.0 {
        return Err(Error::Undefined(format!("factor {k} has zero entropy")));
    }
    let mut order: Vec<usize> = (0..mi.num_latents).collect();
    order.sort_by(|&a, &b| mi.get(b, k).total_cmp(&mi.get(a, k)).then(a.cmp(&b)));
    let j = order[m - 1];
    Ok((mi.get(j, k) / h, j))
}

fn top_two(mi: &MiMatrix) -> Result<Vec<((f64, usize), (f64, usize))>> {
    if mi.num_latents < 2 {
        return Err(Error::InvalidArgument("gap scores need at least two latents".into()));
    }
    (0..mi.num_factors)
        .map(|k| Ok((nmi_rank(mi, k, 1)?, nmi_rank(mi, k, 2)?)))
        .collect()
}

/// Mean over factors of the gap between the top two normalized MIs.
pub fn mig(mi: &MiMatrix) -> Result<f64> {
    if mi.num_factors == 0 {
        return Err(Error::InvalidArgument("no factors".into()));
    }
    let gaps: f64 = top_two(mi)?.iter().map(|((a, _), (b, _))| a - b).sum();
    Ok(gaps / mi.num_factors as f64)
}

/// Sums over factors of the top-1 and top-2 normalized MIs.
pub fn nmi1_nmi2(mi: &MiMatrix) -> Result<(f64, f64)> {
    let t = top_two(mi)?;
    Ok((t.iter().map(|(a, _)| a.0).sum(), t.iter().map(|(_, b)| b.0).sum()))
}

/// Fraction of scores strictly below `threshold`.
pub fn failure_rate(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("failure rate of no scores".into()));
    }
    Ok(scores.iter().filter(|&&s| s < threshold).count() as f64 / scores.len() as f64)
}

/// Median and quartiles of a score set across seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile `q` of sorted `v`, interpolating linearly between order
/// statistics at position `q·(n−1)`.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("quartiles need at least one non-NaN value".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorScore {
    pub name: String,
    pub nmi1: f64,
    pub nmi2: f64,
    pub top_latent: usize,
    pub runner_up: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mig: f64,
    pub nmi1: f64,
    pub nmi2: f64,
    pub factors: Vec<FactorScore>,
    /// Latent dimensions that were constant over the evaluated samples.
    pub constant_latents: Vec<usize>,
    /// Mean reconstruction NLL from posterior means, when a model was evaluated.
    pub recon: Option<f64>,
}

impl MetricReport {
    pub fn from_matrix(mi: &MiMatrix, factor_names: &[String]) -> Result<Self> {
        let t = top_two(mi)?;
        let factors = t
            .iter()
            .zip(factor_names)
            .map(|(((a, ja), (b, jb)), name)| FactorScore {
                name: name.clone(),
                nmi1: *a,
                nmi2: *b,
                top_latent: *ja,
                runner_up: *jb,
            })
            .collect();
        Ok(Self {
            mig: mig(mi)?,
            nmi1: t.iter().map(|(a, _)| a.0).sum(),
            nmi2: t.iter().map(|(_, b)| b.0).sum(),
            factors,
            constant_latents: Vec::new(),
            recon: None,
        })
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("mig,nmi1,nmi2,recon");
        for f in &self.factors {
            write!(s, ",nmi1_{0},nmi2_{0},top_{0}", f.name).unwrap();
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{}",
            self.mig,
            self.nmi1,
            self.nmi2,
            self.recon.map(|r| r.to_string()).unwrap_or_default()
        );
        for f in &self.factors {
            write!(s, ",{},{},{}", f.nmi1, f.nmi2, f.top_latent).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub bins: usize,
    /// Evaluate on a random subset of this size; `None` uses every sample.
    pub samples: Option<usize>,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            samples: None,
            seed: 0,
            batch_size: 256,
        }
    }
}

/// Mean Bernoulli NLL per sample of `logits` against `target`, both `[n, p]`.
pub fn bernoulli_nll(logits: &[f64], target: &[f64], n: usize) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(target)
        .map(|(&l, &t)| l.max(0.0) - t * l + (-l.abs()).exp().ln_1p())
        .sum();
    total / n as f64
}

/// Posterior means of `indices`, row-major `[len, latent_dim]`, plus mean
/// reconstruction NLL of decoding those means.
pub fn encode_means<T: Real>(
    model: &VaeModel<T>,
    dataset: &LabeledDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut means = Vec::with_capacity(indices.len() * model.latent_dim());
    let mut recon = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = dataset.batch::<T>(chunk);
        let (mu, _) = model.encode(&x)?;
        let logits = model.decode(&mu)?;
        recon += bernoulli_nll(&logits.to_f64_vec(), &x.to_f64_vec(), 1);
        means.extend(mu.to_f64_vec());
    }
    Ok((means, recon / indices.len() as f64))
}

/// Encode with posterior means, quantize, and score against the labels.
pub fn evaluate_model<T: Real>(
    model: &VaeModel<T>,
    dataset: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<(MetricReport, MiMatrix)> {
    if model.image_shape() != [dataset.channels, dataset.resolution, dataset.resolution] {
        return Err(Error::Shape(format!(
            "model expects {:?} images, dataset has {}x{}x{}",
            model.image_shape(),
            dataset.channels,
            dataset.resolution,
            dataset.resolution
        )));
    }
    let n = dataset.len();
    let indices: Vec<usize> = match cfg.samples {
        Some(s) if s < n => {
            let mut r = rng::stream(cfg.seed, "eval", 0);
            let mut v = sample(&mut r, n, s).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let (means, recon) = encode_means(model, dataset, &indices, cfg.batch_size)?;
    let d = model.latent_dim();
    let disc = discretize_latents(&means, indices.len(), d, cfg.bins)?;
    let factors: Vec<Vec<usize>> = (0..dataset.num_factors())
        .map(|k| indices.iter().map(|&i| dataset.label_row(i)[k] as usize).collect())
        .collect();
    let mi = MiMatrix::from_codes(&disc.codes, &factors)?;
    let names: Vec<String> = dataset.schema.factors.iter().map(|f| f.name.clone()).collect();
    let mut report = MetricReport::from_matrix(&mi, &names)?;
    report.constant_latents = (0..d).filter(|&j| disc.constant[j]).collect();
    report.recon = Some(recon);
    Ok((report, mi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy(&[3, 3, 3]), 0.0);
        assert!((entropy(&[0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-15);
        let want = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((entropy(&[1, 1, 1, 0]) - want).abs() < 1e-15);
    }

    #[test]
    fn self_information_is_entropy() {
        let a = [0, 1, 1, 2, 2, 2, 5, 5];
        assert_eq!(discrete_mutual_information(&a, &a).unwrap(), entropy(&a));
    }

    #[test]
    fn mi_rejects_length_mismatch() {
        assert!(discrete_mutual_information(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn two_bin_split() {
        let d = discretize_latents(&[0.1, 0.4, 0.2, 0.3], 4, 1, 2).unwrap();
        assert_eq!(d.codes[0], vec![0, 1, 0, 1]);
        let c = discretize_latents(&[1.0; 5], 5, 1, 2).unwrap();
        assert_eq!(c.codes[0], vec![0; 5]);
        assert_eq!(c.constant, vec![true]);
    }

    #[test]
    fn rank_ties_go_to_lowest_index() {
        let mi = MiMatrix::new(3, 1, vec![0.5, 0.7, 0.7], vec![1.0]).unwrap();
        assert_eq!(nmi_rank(&mi, 0, 1).unwrap(), (0.7, 1));
        assert_eq!(nmi_rank(&mi, 0, 2).unwrap(), (0.7, 2));
        assert_eq!(nmi_rank(&mi, 0, 3).unwrap(), (0.5, 0));
    }

    #[test]
    fn zero_entropy_factor_is_an_error() {
        let mi = MiMatrix::new(2, 1, vec![0.0, 0.0], vec![0.0]).unwrap();
        assert!(matches!(mig(&mi), Err(Error::Undefined(_))));
    }

    #[test]
    fn failure_rates() {
        assert_eq!(failure_rate(&[0.5, 0.5], 0.1).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.05, 0.5], 0.1).unwrap(), 0.5);
        assert_eq!(failure_rate(&[0.1], 0.1).unwrap(), 0.0);
    }
}
