use anyhow::{anyhow, bail, Result};
use deft_core::datasets::{
    constant_dataset, generate_grid_dataset, generate_triangle_correlated, save_dataset, FactorSchema,
};

use super::{with_suffix, write_file, write_sidecar};
use crate::config::RunConfig;

pub const DEFAULT_FACTORS: &str = "shape:3,scale:3,orientation:8,posX:8,posY:8";

/// `name:cardinality` pairs, comma-separated.
pub fn parse_factors(s: &str) -> Result<FactorSchema> {
    let pairs: Vec<(String, usize)> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (n, c) = p
                .split_once(':')
                .ok_or_else(|| anyhow!("factor {p:?} is not name:cardinality"))?;
            let c = c.trim().parse().map_err(|_| anyhow!("factor {p:?}: bad cardinality"))?;
            Ok((n.trim().to_string(), c))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(&str, usize)> = pairs.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    Ok(FactorSchema::new(&refs)?)
}

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let kind = cfg.str_or("kind", "grid");
    let resolution = cfg.get("resolution", 16usize)?;
    let ds = match kind.as_str() {
        "grid" => {
            let schema = parse_factors(&cfg.str_or("factors", DEFAULT_FACTORS))?;
            cfg.finish()?;
            generate_grid_dataset(&schema, resolution)?
        }
        "triangle" => {
            let grid = cfg.get("grid", 8usize)?;
            cfg.finish()?;
            generate_triangle_correlated(resolution, grid)?
        }
        "constant" => {
            let count = cfg.get("count", 64usize)?;
            let intensity = cfg.get("intensity", 128u8)?;
            cfg.finish()?;
            constant_dataset(count, resolution, intensity)?
        }
        other => bail!("unknown dataset kind {other:?} (grid, triangle, constant)"),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, &out)?;
    let summary = format!(
        "{} images, {}x{} px, {} channel(s)\n{}",
        ds.len(),
        ds.resolution,
        ds.resolution,
        ds.channels,
        ds.schema.summary()
    );
    write_file(&with_suffix(&out, ".schema.txt"), &summary)?;
    write_sidecar(cfg, "generate", &with_suffix(&out, ".resolved.cfg"))?;
    print!("{summary}");
    Ok(())
}
