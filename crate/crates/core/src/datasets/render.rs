//! Supersampled rasterizer for the three sprite shapes.
//!
//! Pixel `(row, col)` covers `[col, col+1) x [row, row+1)` in canvas
//! coordinates; each pixel is sampled on a 4x4 lattice of sub-pixel centers
//! and the covered fraction is quantized to a `u8` intensity.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const SUPERSAMPLE: usize = 4;

/// Largest sprite radius as a fraction of the canvas side.
pub const MAX_RADIUS_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("shape index {i} not in 0..3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Triangle => "triangle",
        }
    }

    /// Order of rotational symmetry.
    pub fn symmetry(self) -> usize {
        match self {
            Shape::Square => 4,
            Shape::Ellipse => 2,
            Shape::Triangle => 3,
        }
    }

    /// Whether the local point `(u, v)` lies inside a sprite of radius `r`
    /// pointing along `+u`.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            Shape::Square => {
                let a = r * std::f64::consts::FRAC_1_SQRT_2;
                u.abs() <= a && v.abs() <= a
            }
            Shape::Ellipse => {
                let (a, b) = (r, 0.5 * r);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Triangle => {
                // Equilateral, circumradius r, apex at (r, 0).
                let half = r * 3f64.sqrt() / 2.0;
                if u < -0.5 * r || u > r {
                    return false;
                }
                // Width shrinks linearly from the base (u = -r/2) to the apex.
                v.abs() <= half * (r - u) / (1.5 * r)
            }
        }
    }
}

/// Continuous render parameters of one sprite, in canvas pixels and radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    pub radius: f64,
    pub angle: f64,
    pub center_x: f64,
    pub center_y: f64,
}

/// Radius for scale index `k` of `n`: evenly spaced from half the maximum
/// radius up to the maximum.
pub fn radius_for(k: usize, n: usize, resolution: usize) -> f64 {
    let r_max = MAX_RADIUS_FRACTION * resolution as f64;
    if n <= 1 {
        return r_max;
    }
    r_max * (0.5 + 0.5 * k as f64 / (n - 1) as f64)
}

/// Sprite angle for orientation index `k` of `n` over a full turn. Indices
/// that differ by a symmetry of the shape map to the same angle, so
/// symmetric orientations render identical pixels.
pub fn angle_for(shape: Shape, k: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let order = shape.symmetry();
    let k = if n % order == 0 { k % (n / order) } else { k };
    2.0 * PI * k as f64 / n as f64
}

/// Position grid along one axis: `n` centers on a quarter-pixel lattice,
/// symmetric about the canvas middle and keeping a maximum-size sprite
/// inside the canvas.
pub fn position_grid(n: usize, resolution: usize) -> Vec<f64> {
    let res = resolution as f64;
    let mid = 0.5 * res;
    if n <= 1 {
        return vec![mid];
    }
    let margin = MAX_RADIUS_FRACTION * res;
    let avail = res - 2.0 * margin;
    let step = (4.0 * avail / (n - 1) as f64).floor() / 4.0;
    let step = step.max(0.25);
    let start = mid - 0.5 * step * (n - 1) as f64;
    (0..n).map(|k| start + step * k as f64).collect()
}

/// Rasterize one sprite into a `resolution x resolution` grayscale image.
pub fn rasterize(sprite: &Sprite, resolution: usize) -> Vec<u8> {
    let (c, s) = (sprite.angle.cos(), sprite.angle.sin());
    let ss = SUPERSAMPLE;
    let total = (ss * ss) as f64;
    let reach = sprite.radius + 1.0;
    let mut out = vec![0u8; resolution * resolution];
    for row in 0..resolution {
        if (row as f64 + 1.0) < sprite.center_y - reach || (row as f64) > sprite.center_y + reach {
            continue;
        }
        for col in 0..resolution {
            if (col as f64 + 1.0) < sprite.center_x - reach || (col as f64) > sprite.center_x + reach {
                continue;
            }
            let mut hits = 0usize;
            for sy in 0..ss {
                let y = row as f64 + (sy as f64 + 0.5) / ss as f64 - sprite.center_y;
                for sx in 0..ss {
                    let x = col as f64 + (sx as f64 + 0.5) / ss as f64 - sprite.center_x;
                    let u = c * x + s * y;
                    let v = -s * x + c * y;
                    if sprite.shape.contains(u, v, sprite.radius) {
                        hits += 1;
                    }
                }
            }
            out[row * resolution + col] = (255.0 * hits as f64 / total).round() as u8;
        }
    }
    out
}
