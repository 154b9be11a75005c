//! Labeled factor-grid image datasets.
//!
//! Images are stored as `u8` intensities (`0..=255`, read as `v / 255`), so a
//! dataset survives a save/load round trip bit for bit.

pub mod io;
pub mod render;

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use render::{angle_for, position_grid, radius_for, rasterize, Shape, Sprite};

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};

/// Factor names the renderer understands.
pub const SHAPE: &str = "shape";
pub const SCALE: &str = "scale";
pub const ORIENTATION: &str = "orientation";
pub const POS_X: &str = "posX";
pub const POS_Y: &str = "posY";

/// Bins of the derived orientation factor in the correlated triangle set.
pub const TRIANGLE_ORIENTATION_BINS: usize = 8;

/// Upper bound on generated pixel bytes.
pub const MAX_PIXEL_BYTES: usize = 1 << 31;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSchema {
    pub factors: Vec<Factor>,
}

impl FactorSchema {
    pub fn new(factors: &[(&str, usize)]) -> Result<Self> {
        let schema = Self {
            factors: factors
                .iter()
                .map(|&(n, c)| Factor {
                    name: n.to_string(),
                    cardinality: c,
                })
                .collect(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.factors {
            if f.cardinality == 0 || f.cardinality > u16::MAX as usize + 1 {
                return Err(Error::Schema(format!(
                    "factor {:?} has cardinality {}",
                    f.name, f.cardinality
                )));
            }
            if f.name.is_empty() || !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("factor name {:?} empty or repeated", f.name)));
            }
        }
        Ok(())
    }

    /// Shape 3 x scale 3 x orientation 8 x posX 8 x posY 8.
    pub fn desk_sprites() -> Self {
        Self::new(&[(SHAPE, 3), (SCALE, 3), (ORIENTATION, 8), (POS_X, 8), (POS_Y, 8)]).expect("valid")
    }

    /// Full sprite cardinalities: 3 shapes, 6 scales, 40 orientations, 32x32 positions.
    pub fn full_sprites() -> Self {
        Self::new(&[(SHAPE, 3), (SCALE, 6), (ORIENTATION, 40), (POS_X, 32), (POS_Y, 32)]).expect("valid")
    }

    pub fn positions(n: usize) -> Result<Self> {
        Self::new(&[(POS_X, n), (POS_Y, n)])
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Number of factor combinations, or an error if it overflows.
    pub fn combinations(&self) -> Result<usize> {
        self.factors.iter().try_fold(1usize, |acc, f| {
            acc.checked_mul(f.cardinality)
                .ok_or_else(|| Error::OutOfRange("factor grid size overflows".into()))
        })
    }

    /// Human-readable `name cardinality` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.factors.iter().enumerate() {
            s.push_str(&format!("{i}\t{}\t{}\n", f.name, f.cardinality));
        }
        s
    }

    /// Map a label tuple to render parameters. Factors absent from the
    /// schema take defaults: ellipse, largest scale, angle 0, centered.
    pub fn sprite(&self, labels: &[usize], resolution: usize) -> Result<Sprite> {
        if labels.len() != self.factors.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} factors",
                labels.len(),
                self.factors.len()
            )));
        }
        for (f, &l) in self.factors.iter().zip(labels) {
            if l >= f.cardinality {
                return Err(Error::OutOfRange(format!(
                    "label {l} of factor {:?} not in 0..{}",
                    f.name, f.cardinality
                )));
            }
        }
        let get = |name: &str| self.index_of(name).map(|i| (labels[i], self.factors[i].cardinality));
        let shape = match get(SHAPE) {
            Some((k, _)) => Shape::from_index(k)?,
            None => Shape::Ellipse,
        };
        let radius = match get(SCALE) {
            Some((k, n)) => radius_for(k, n, resolution),
            None => radius_for(0, 1, resolution),
        };
        let angle = match get(ORIENTATION) {
            Some((k, n)) => angle_for(shape, k, n),
            None => 0.0,
        };
        let pos = |name: &str| match get(name) {
            Some((k, n)) => position_grid(n, resolution)[k],
            None => 0.5 * resolution as f64,
        };
        for f in &self.factors {
            if ![SHAPE, SCALE, ORIENTATION, POS_X, POS_Y].contains(&f.name.as_str()) {
                return Err(Error::Schema(format!("factor {:?} has no rendering meaning", f.name)));
            }
        }
        Ok(Sprite {
            shape,
            radius,
            angle,
            center_x: pos(POS_X),
            center_y: pos(POS_Y),
        })
    }
}

/// Images `[N, channels, H, W]` with one discrete label tuple per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub schema: FactorSchema,
    pub resolution: usize,
    pub channels: usize,
    /// Row-major `[N, num_factors]`.
    pub labels: Vec<u16>,
    /// Row-major `[N, channels, H, W]`.
    pub pixels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(
        schema: FactorSchema,
        resolution: usize,
        channels: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let ds = Self {
            schema,
            resolution,
            channels,
            labels,
            pixels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} is not a power of two >= 16",
                self.resolution
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("zero channels".into()));
        }
        let f = self.schema.len();
        let n = self.pixels.len() / self.image_len();
        if n == 0 || self.pixels.len() != n * self.image_len() || self.labels.len() != n * f {
            return Err(Error::Shape(format!(
                "{} pixel bytes and {} labels do not describe a nonempty dataset",
                self.pixels.len(),
                self.labels.len()
            )));
        }
        let cards = self.schema.cardinalities();
        if f > 0 {
            for row in self.labels.chunks(f) {
                for (j, (&l, &c)) in row.iter().zip(&cards).enumerate() {
                    if l as usize >= c {
                        return Err(Error::OutOfRange(format!(
                            "label {l} of factor {:?} not in 0..{c}",
                            self.schema.factors[j].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn num_factors(&self) -> usize {
        self.schema.len()
    }

    pub fn label_row(&self, i: usize) -> &[u16] {
        let f = self.num_factors();
        &self.labels[i * f..(i + 1) * f]
    }

    /// Labels of one factor over the whole dataset.
    pub fn factor_column(&self, j: usize) -> Vec<usize> {
        (0..self.len()).map(|i| self.label_row(i)[j] as usize).collect()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let l = self.image_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    /// Images at `indices` as a `[B, C, H, W]` tensor in `[0, 1]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::lit(p as f64) * scale));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.resolution, self.resolution],
            data,
        )
        .expect("consistent batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(indices.len() * self.num_factors());
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange(format!("index {i} of {}", self.len())));
            }
            labels.extend_from_slice(self.label_row(i));
            pixels.extend_from_slice(self.image(i));
        }
        Self::new(self.schema.clone(), self.resolution, self.channels, labels, pixels)
    }

    /// Row whose labels equal `tuple`, if any.
    pub fn find(&self, tuple: &[u16]) -> Option<usize> {
        // Grid datasets store rows in mixed-radix order.
        let mut idx = 0usize;
        for (&l, f) in tuple.iter().zip(&self.schema.factors) {
            idx = idx * f.cardinality + l as usize;
        }
        if idx < self.len() && self.label_row(idx) == tuple {
            return Some(idx);
        }
        (0..self.len()).find(|&i| self.label_row(i) == tuple)
    }
}

fn check_size(n: usize, image_len: usize) -> Result<()> {
    match n.checked_mul(image_len) {
        Some(b) if b <= MAX_PIXEL_BYTES => Ok(()),
        _ => Err(Error::OutOfRange(format!(
            "{n} images of {image_len} bytes exceed the {MAX_PIXEL_BYTES}-byte budget"
        ))),
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if !resolution.is_power_of_two() || resolution < 16 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} is not a power of two >= 16"
        )));
    }
    Ok(())
}

/// Mixed-radix decomposition of `i` (last factor fastest).
pub fn mixed_radix(mut i: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for (slot, &c) in out.iter_mut().zip(cards).rev() {
        *slot = i % c;
        i /= c;
    }
    out
}

/// Render one image for a label tuple.
pub fn render_labels(schema: &FactorSchema, labels: &[usize], resolution: usize) -> Result<Vec<u8>> {
    check_resolution(resolution)?;
    Ok(rasterize(&schema.sprite(labels, resolution)?, resolution))
}

/// Every combination of the schema's factors, in mixed-radix order.
pub fn generate_grid_dataset(schema: &FactorSchema, resolution: usize) -> Result<LabeledDataset> {
    schema.validate()?;
    check_resolution(resolution)?;
    let n = schema.combinations()?;
    check_size(n, resolution * resolution)?;
    let cards = schema.cardinalities();
    let mut labels = Vec::with_capacity(n * cards.len());
    let mut pixels = Vec::with_capacity(n * resolution * resolution);
    for i in 0..n {
        let tuple = mixed_radix(i, &cards);
        pixels.extend(render_labels(schema, &tuple, resolution)?);
        labels.extend(tuple.iter().map(|&l| l as u16));
    }
    LabeledDataset::new(schema.clone(), resolution, 1, labels, pixels)
}

/// Orientation bin of angle `theta` in `(-pi, pi]`: bin `b` covers
/// `(-pi + b·w, -pi + (b+1)·w]` with `w = 2·pi / bins`.
pub fn orientation_bin(theta: f64, bins: usize) -> usize {
    let w = 2.0 * PI / bins as f64;
    let b = ((theta + PI) / w).ceil() as isize - 1;
    b.clamp(0, bins as isize - 1) as usize
}

/// Triangles on a `grid x grid` position lattice, each pointing at the
/// canvas center. Factors: posX, posY, orientation, where orientation is
/// `atan2(y - mid, x - mid)` quantized to eight bins. `grid` must be even so
/// that no position sits on the center.
pub fn generate_triangle_correlated(resolution: usize, grid: usize) -> Result<LabeledDataset> {
    check_resolution(resolution)?;
    if grid < 2 || grid % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "triangle grid must be even and >= 2 so the canvas center is excluded, got {grid}"
        )));
    }
    let bins = TRIANGLE_ORIENTATION_BINS;
    let schema = FactorSchema::new(&[(POS_X, grid), (POS_Y, grid), (ORIENTATION, bins)])?;
    check_size(grid * grid, resolution * resolution)?;
    let pos = position_grid(grid, resolution);
    let mid = 0.5 * resolution as f64;
    let w = 2.0 * PI / bins as f64;
    let mut labels = Vec::with_capacity(grid * grid * 3);
    let mut pixels = Vec::with_capacity(grid * grid * resolution * resolution);
    for ix in 0..grid {
        for iy in 0..grid {
            let (x, y) = (pos[ix], pos[iy]);
            let bin = orientation_bin((y - mid).atan2(x - mid), bins);
            let bin_center = -PI + (bin as f64 + 0.5) * w;
            let sprite = Sprite {
                shape: Shape::Triangle,
                radius: radius_for(0, 1, resolution),
                angle: bin_center + PI,
                center_x: x,
                center_y: y,
            };
            pixels.extend(rasterize(&sprite, resolution));
            labels.extend([ix as u16, iy as u16, bin as u16]);
        }
    }
    LabeledDataset::new(schema, resolution, 1, labels, pixels)
}

/// Draw one random row and return the rows that share all of its labels
/// except `factor`, ordered by that factor's value.
pub fn fixed_factor_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    factor: usize,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if factor >= dataset.num_factors() {
        return Err(Error::OutOfRange(format!(
            "factor {factor} of {}",
            dataset.num_factors()
        )));
    }
    let base = rng.gen_range(0..dataset.len());
    let mut tuple = dataset.label_row(base).to_vec();
    let card = dataset.schema.factors[factor].cardinality;
    let mut rows = Vec::with_capacity(card);
    for v in 0..card {
        tuple[factor] = v as u16;
        let row = dataset.find(&tuple).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "dataset lacks label tuple {tuple:?}; factor {factor} cannot vary alone"
            ))
        })?;
        rows.push(row);
    }
    dataset.subset(&rows)
}

/// `n` copies of one blank image, with a single one-valued factor.
pub fn constant_dataset(n: usize, resolution: usize, intensity: u8) -> Result<LabeledDataset> {
    check_resolution(resolution)?;
    let schema = FactorSchema::new(&[("constant", 1)])?;
    LabeledDataset::new(
        schema,
        resolution,
        1,
        vec![0; n],
        vec![intensity; n * resolution * resolution],
    )
}
