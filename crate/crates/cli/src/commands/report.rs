use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deft_core::metrics::{failure_rate, quartiles, Quartiles};

use super::{write_file, write_sidecar};
use crate::config::RunConfig;

/// Final-row scores of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedScores {
    pub mig: f64,
    pub nmi1: f64,
    pub nmi2: f64,
    pub recon: Option<f64>,
}

/// Last row of a `metrics.csv`.
pub fn last_scores(path: &Path) -> Result<SeedScores> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("{} is empty", path.display()))?.split(',').collect();
    let row: Vec<&str> = lines.last().ok_or_else(|| anyhow!("{} has no rows", path.display()))?.split(',').collect();
    let cell = |name: &str| -> Result<&str> {
        let i = header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| anyhow!("{}: no {name} column", path.display()))?;
        row.get(i).copied().ok_or_else(|| anyhow!("{}: short row", path.display()))
    };
    let num = |name: &str| -> Result<f64> {
        cell(name)?
            .parse()
            .map_err(|_| anyhow!("{}: bad {name} value", path.display()))
    };
    let recon = cell("recon")?;
    Ok(SeedScores {
        mig: num("mig")?,
        nmi1: num("nmi1")?,
        nmi2: num("nmi2")?,
        recon: if recon.is_empty() { None } else { Some(num("recon")?) },
    })
}

/// `seed_*/metrics.csv` under an approach directory, in name order.
fn seed_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .map(|p| p.join("metrics.csv"))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn push_quartiles(s: &mut String, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        s.push_str(",,,");
        return Ok(());
    }
    let Quartiles { q1, median, q3 } = quartiles(values)?;
    write!(s, ",{median},{q1},{q3}").unwrap();
    Ok(())
}

pub const REPORT_HEADER: &str = "approach,seeds,mig_median,mig_q1,mig_q3,nmi1_median,nmi1_q1,nmi1_q3,\
nmi2_median,nmi2_q1,nmi2_q3,recon_median,recon_q1,recon_q3,failure_rate";

pub fn run(cfg: &mut RunConfig) -> Result<()> {
    let runs: Vec<String> = cfg.list("runs", &[])?;
    let out = cfg.path("out")?;
    let threshold = cfg.get("threshold", 0.1f64)?;
    cfg.finish()?;
    if runs.is_empty() {
        bail!("no runs given");
    }
    let mut csv = format!("{REPORT_HEADER}\n");
    for run in &runs {
        let dir = PathBuf::from(run);
        let files = seed_files(&dir)?;
        if files.is_empty() {
            bail!("{} holds no seed_*/metrics.csv", dir.display());
        }
        let scores: Vec<SeedScores> = files.iter().map(|f| last_scores(f)).collect::<Result<_>>()?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.clone());
        let migs: Vec<f64> = scores.iter().map(|s| s.mig).collect();
        write!(csv, "{name},{}", scores.len()).unwrap();
        push_quartiles(&mut csv, &migs)?;
        push_quartiles(&mut csv, &scores.iter().map(|s| s.nmi1).collect::<Vec<_>>())?;
        push_quartiles(&mut csv, &scores.iter().map(|s| s.nmi2).collect::<Vec<_>>())?;
        push_quartiles(&mut csv, &scores.iter().filter_map(|s| s.recon).collect::<Vec<_>>())?;
        writeln!(csv, ",{}", failure_rate(&migs, threshold)?).unwrap();
    }
    write_file(&out, &csv)?;
    write_sidecar(cfg, "report", &super::with_suffix(&out, ".resolved.cfg"))?;
    print!("{csv}");
    Ok(())
}
