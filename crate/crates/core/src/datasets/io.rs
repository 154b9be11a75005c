//! `DEFTDATA` container: little-endian header, factor table, `u16` labels,
//! `u8` pixels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Factor, FactorSchema, LabeledDataset};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DEFTDATA";
pub const VERSION: u16 = 1;

pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut w: W) -> Result<()> {
    let mut out = Vec::with_capacity(64 + ds.labels.len() * 2 + ds.pixels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.resolution as u32).to_le_bytes());
    out.extend_from_slice(&(ds.channels as u32).to_le_bytes());
    out.extend_from_slice(&(ds.schema.len() as u32).to_le_bytes());
    for f in &ds.schema.factors {
        out.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
        out.extend_from_slice(f.name.as_bytes());
        out.extend_from_slice(&(f.cardinality as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    w.write_all(&out)?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(what)),
        }
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<LabeledDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

fn decode(buf: &[u8]) -> Result<LabeledDataset> {
    let mut c = Cursor::new(buf);
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic { expected: "DEFTDATA" });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let resolution = c.u32("resolution")? as usize;
    let channels = c.u32("channels")? as usize;
    let nf = c.u32("factor count")? as usize;
    let mut factors = Vec::with_capacity(nf.min(1024));
    for _ in 0..nf {
        let len = c.u32("factor name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "factor name")?)
            .map_err(|_| Error::Format("factor name is not UTF-8".into()))?
            .to_string();
        let cardinality = c.u32("factor cardinality")? as usize;
        factors.push(Factor { name, cardinality });
    }
    let n = usize::try_from(c.u64("sample count")?)
        .map_err(|_| Error::Format("sample count exceeds address space".into()))?;
    let label_bytes = n
        .checked_mul(nf)
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| Error::Format("label table size overflows".into()))?;
    let labels = c
        .take(label_bytes, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let pixel_bytes = n
        .checked_mul(channels)
        .and_then(|v| v.checked_mul(resolution))
        .and_then(|v| v.checked_mul(resolution))
        .ok_or_else(|| Error::Format("pixel table size overflows".into()))?;
    let pixels = c.take(pixel_bytes, "pixels")?.to_vec();
    if !c.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after pixel data",
            buf.len() - c.pos
        )));
    }
    LabeledDataset::new(FactorSchema { factors }, resolution, channels, labels, pixels)
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(ds, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_grid_dataset, FactorSchema};

    fn sample() -> LabeledDataset {
        generate_grid_dataset(&FactorSchema::new(&[("shape", 3), ("posX", 2)]).unwrap(), 16).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = sample();
        let mut bytes = Vec::new();
        write_dataset(&d, &mut bytes).unwrap();
        assert_eq!(read_dataset(bytes.as_slice()).unwrap(), d);
    }

    #[test]
    fn truncation_and_magic() {
        let mut bytes = Vec::new();
        write_dataset(&sample(), &mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_dataset(cut), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(read_dataset(v.as_slice()), Err(Error::Version { .. })));
    }
}
