use anyhow::{bail, Result};

use super::{read_dataset, with_suffix, write_file, write_sidecar, AnyModel};
use crate::config::RunConfig;

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let ckpt = cfg.path("checkpoint")?;
    let out = cfg.path("out")?;
    let low = cfg.get("low", -2.0f64)?;
    let high = cfg.get("high", 2.0f64)?;
    let steps = cfg.get("steps", 7usize)?;
    let data = cfg.opt_str("data");
    let model = AnyModel::load(&ckpt)?;
    // Base code: the posterior mean of a dataset image, an explicit list, or zeros.
    let base = match data {
        Some(d) => {
            let index = cfg.get("index", 0usize)?;
            if cfg.opt_str("base").is_some() {
                bail!("give either data or base, not both");
            }
            model.encode_one(&read_dataset(d.as_ref())?, index)?
        }
        None => cfg.list("base", &vec![0.0f64; model.latent_dim()])?,
    };
    cfg.finish()?;
    let grid = model.traverse(&base, low, high, steps)?;
    write_file(&out, grid.to_pgm())?;
    write_sidecar(cfg, "traverse", &with_suffix(&out, ".resolved.cfg"))?;
    println!("{} latents x {} steps -> {}", grid.rows(), steps, out.display());
    Ok(())
}
