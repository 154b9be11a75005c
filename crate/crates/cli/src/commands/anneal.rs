use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};
use deft_core::annealing::{
    annealing_test, ifp_csv, ifp_distribution, increment_curve, increments_csv, AnnealConfig, IfpSample,
    DEFAULT_IFP_THRESHOLD,
};
use deft_core::datasets::LabeledDataset;

use super::{read_dataset, write_file, write_sidecar, Precision};
use crate::config::RunConfig;

fn factor_index(ds: &LabeledDataset, s: &str) -> Result<usize> {
    if let Some(i) = ds.schema.index_of(s) {
        return Ok(i);
    }
    let i: usize = s
        .parse()
        .map_err(|_| anyhow!("no factor named {s:?}; known: {}", ds.schema.summary().trim()))?;
    if i >= ds.num_factors() {
        bail!("factor index {i} out of range for {} factors", ds.num_factors());
    }
    Ok(i)
}

/// Every repeat's probe curve in one table.
fn curves_csv(samples: &[IfpSample]) -> String {
    let mut s = String::from("repeat,iteration,beta,mean_kl,recon\n");
    for x in samples {
        for p in &x.curve.points {
            writeln!(s, "{},{},{},{},{}", x.repeat, p.iteration, p.beta, p.mean_kl, p.recon).unwrap();
        }
    }
    s
}

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let mode = cfg.str_or("mode", "supervised");
    let d = AnnealConfig::default();
    let anneal = AnnealConfig {
        beta_start: cfg.get("beta_start", d.beta_start)?,
        beta_end: cfg.get("beta_end", d.beta_end)?,
        iters: cfg.get("iters", d.iters)?,
        probe_interval: cfg.get("probe_interval", d.probe_interval)?,
        latents: cfg.get("latents", d.latents)?,
        learning_rate: cfg.get("lr", d.learning_rate)?,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        seed: cfg.get("seed", d.seed)?,
    };
    let precision = Precision::parse(&cfg.str_or("precision", "f32"))?;
    let ds = read_dataset(&data)?;
    match mode.as_str() {
        "supervised" => {
            let factor = factor_index(&ds, &cfg.required("factor")?)?;
            let repeats = cfg.get("repeats", 50usize)?;
            let threshold = cfg.get("threshold", DEFAULT_IFP_THRESHOLD)?;
            let threads = cfg.get("threads", 1usize)?;
            cfg.finish()?;
            let samples = match precision {
                Precision::F32 => ifp_distribution::<f32>(&ds, factor, repeats, &anneal, threshold, threads)?,
                Precision::F64 => ifp_distribution::<f64>(&ds, factor, repeats, &anneal, threshold, threads)?,
            };
            write_file(&out.join("ifp.csv"), ifp_csv(&samples))?;
            write_file(&out.join("curves.csv"), curves_csv(&samples))?;
            let found = samples.iter().filter(|s| s.ifp_beta.is_some()).count();
            println!(
                "factor {}: IFP found in {found} of {repeats} repeats",
                ds.schema.factors[factor].name
            );
        }
        "unsupervised" => {
            cfg.finish()?;
            let curve = match precision {
                Precision::F32 => annealing_test::<f32>(&ds, &anneal)?,
                Precision::F64 => annealing_test::<f64>(&ds, &anneal)?,
            };
            write_file(&out.join("curve.csv"), curve.to_csv())?;
            write_file(&out.join("increments.csv"), increments_csv(&increment_curve(&curve)?))?;
            println!("{} probes written to {}", curve.points.len(), out.display());
        }
        other => bail!("unknown anneal mode {other:?} (supervised, unsupervised)"),
    }
    write_sidecar(cfg, "anneal", &out.join("resolved.cfg"))
}
