use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::{eval_config, read_dataset, report_header, report_row, write_file, write_sidecar, AnyModel};
use crate::config::RunConfig;

/// Sort key for checkpoint names: `stage_<j>` in numeric order, then
/// `final`, then anything else by name.
fn checkpoint_order(p: &Path) -> (u8, u64, String) {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(j) = stem.strip_prefix("stage_").and_then(|j| j.parse().ok()) {
        return (0, j, stem);
    }
    if stem == "final" {
        return (1, 0, stem);
    }
    (2, 0, stem)
}

/// The `.ckpt` files of a run directory in training order.
pub fn run_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    v.sort_by_key(|p| checkpoint_order(p));
    Ok(v)
}

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let listed: Vec<String> = cfg.list("checkpoints", &[])?;
    let run_dir = cfg.opt_str("run").map(PathBuf::from);
    let eval = eval_config(cfg)?;
    cfg.finish()?;
    let checkpoints: Vec<PathBuf> = match (listed.is_empty(), run_dir) {
        (false, None) => listed.iter().map(PathBuf::from).collect(),
        (true, Some(d)) => run_checkpoints(&d)?,
        (false, Some(_)) => bail!("give either checkpoints or run, not both"),
        (true, None) => bail!("nothing to evaluate: set checkpoints or run"),
    };
    if checkpoints.is_empty() {
        bail!("no checkpoints found");
    }
    let ds = read_dataset(&data)?;
    let names: Vec<String> = ds.schema.factors.iter().map(|f| f.name.clone()).collect();
    let mut report = String::new();
    for p in &checkpoints {
        let model = AnyModel::load(p)?;
        let (r, mi) = model.evaluate(&ds, &eval).with_context(|| format!("evaluating {}", p.display()))?;
        if report.is_empty() {
            writeln!(report, "{}", report_header(&r)).unwrap();
        }
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(report, "{}", report_row(&name, &r)).unwrap();
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_file(&out.join(format!("mi_{stem}.csv")), mi.to_csv(&names))?;
        println!("{name}: mig {:.4} nmi1 {:.4} nmi2 {:.4}", r.mig, r.nmi1, r.nmi2);
    }
    write_file(&out.join("report.csv"), report)?;
    write_sidecar(cfg, "evaluate", &out.join("resolved.cfg"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_sort_numerically_before_final() {
        let mut v: Vec<PathBuf> = ["final.ckpt", "stage_10.ckpt", "stage_2.ckpt", "stage_1.ckpt"]
            .iter()
            .map(PathBuf::from)
            .collect();
        v.sort_by_key(|p| checkpoint_order(p));
        let names: Vec<_> = v.iter().map(|p| p.to_str().unwrap()).collect();
        assert_eq!(names, ["stage_1.ckpt", "stage_2.ckpt", "stage_10.ckpt", "final.ckpt"]);
    }
}
