//! Flat `key = value` run configuration.
//!
//! A file holds global lines followed by optional `[command]` sections; a
//! command sees the globals plus its own section, and `--key value` flags
//! override both. Every value a command reads (defaults included) is
//! recorded so the resolved set can be written next to the outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    /// Values from the global part of the file; unused ones are ignored.
    global: BTreeMap<String, String>,
    /// Values from the command's section and the command line; each must be
    /// read by the command.
    strict: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn parse_lines(text: &str, command: &str) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>)> {
    let mut global = BTreeMap::new();
    let mut own = BTreeMap::new();
    let mut section: Option<String> = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", no + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            bail!("line {}: empty key", no + 1);
        }
        match section.as_deref() {
            None => {
                global.insert(k, v);
            }
            Some(s) if s == command => {
                own.insert(k, v);
            }
            Some(_) => {}
        }
    }
    Ok((global, own))
}

/// `--key value` or `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key value, got {a:?}"))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("flag --{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.insert(k.replace('-', "_"), v);
    }
    Ok(out)
}

impl RunConfig {
    pub fn new(text: &str, command: &str, overrides: BTreeMap<String, String>) -> Result<Self> {
        let (global, mut strict) = parse_lines(text, command)?;
        strict.extend(overrides);
        Ok(Self {
            global,
            strict,
            resolved: BTreeMap::new(),
        })
    }

    pub fn load(path: Option<&Path>, command: &str, overrides: BTreeMap<String, String>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        Self::new(&text, command, overrides)
    }

    fn raw(&self, key: &str) -> Option<&String> {
        self.strict.get(key).or_else(|| self.global.get(key))
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.insert(key.to_string(), value);
    }

    /// Optional string; absent keys are not recorded.
    pub fn opt_str(&mut self, key: &str) -> Option<String> {
        let v = self.raw(key).cloned();
        if let Some(v) = &v {
            self.record(key, v.clone());
        }
        v
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        let v = self.raw(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    pub fn required(&mut self, key: &str) -> Result<String> {
        let v = self.raw(key).cloned().ok_or_else(|| anyhow!("missing required key {key:?}"))?;
        self.record(key, v.clone());
        Ok(v)
    }

    pub fn path(&mut self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.required(key)?))
    }

    pub fn get<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = match self.raw(key) {
            Some(s) => s.parse().map_err(|e| anyhow!("key {key}: cannot parse {s:?}: {e}"))?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn opt<T: FromStr + ToString>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key).cloned() {
            Some(s) => {
                let v: T = s.parse().map_err(|e| anyhow!("key {key}: cannot parse {s:?}: {e}"))?;
                self.record(key, v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + ToString + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = match self.raw(key) {
            Some(s) => split_list(s).map_err(|e| anyhow!("key {key}: {e}"))?,
            None => default.to_vec(),
        };
        self.record(key, join_list(&v));
        Ok(v)
    }

    /// Fails on keys from the command's section or the command line that
    /// the command never read.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .strict
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown key(s) for this command: {}", unknown.join(", "));
        }
        Ok(())
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Sidecar text: re-running `deft <command> --config <sidecar>` repeats
    /// the run.
    pub fn sidecar(&self, command: &str) -> String {
        let mut s = format!("# resolved configuration for `deft {command}`\n");
        for (k, v) in &self.resolved {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

pub fn split_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| format!("cannot parse {p:?}: {e}")))
        .collect()
}

pub fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
