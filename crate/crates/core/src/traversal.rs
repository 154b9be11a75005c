//! Latent traversals: sweep one latent at a time around a base code and tile
//! the decoded images into a grid (rows = latents, columns = steps).

use crate::error::{Error, Result};
use crate::model::{sigmoid, VaeModel};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalGrid {
    pub base: Vec<f64>,
    pub low: f64,
    pub high: f64,
    pub steps: usize,
    pub resolution: usize,
    /// `tiles[dim][step]`: grayscale intensities in `[0, 1]`, row-major.
    pub tiles: Vec<Vec<Vec<f64>>>,
}

/// Evenly spaced sweep values, endpoints included.
pub fn sweep(low: f64, high: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.5 * (low + high)];
    }
    (0..steps)
        .map(|s| low + (high - low) * s as f64 / (steps - 1) as f64)
        .collect()
}

impl TraversalGrid {
    /// Decode the sweep of every latent around `base`.
    pub fn build<T: Real>(model: &VaeModel<T>, base: &[f64], low: f64, high: f64, steps: usize) -> Result<Self> {
        let d = model.latent_dim();
        if base.len() != d {
            return Err(Error::Shape(format!("base code of length {} for {d} latents", base.len())));
        }
        if steps == 0 || !(low <= high) {
            return Err(Error::InvalidArgument(format!("bad traversal range [{low}, {high}] x {steps}")));
        }
        let values = sweep(low, high, steps);
        let mut codes = Vec::with_capacity(d * steps * d);
        for j in 0..d {
            for &v in &values {
                let mut z = base.to_vec();
                z[j] = v;
                codes.extend(z);
            }
        }
        let z = Tensor::<T>::from_f64(&[d * steps, d], &codes)?;
        let logits = model.decode(&z)?.to_f64_vec();
        let [c, h, w] = model.image_shape();
        let plane = h * w;
        let per = c * plane;
        let mut tiles = vec![Vec::with_capacity(steps); d];
        for (i, img) in logits.chunks(per).enumerate() {
            let gray: Vec<f64> = (0..plane)
                .map(|p| (0..c).map(|ch| sigmoid(img[ch * plane + p])).sum::<f64>() / c as f64)
                .collect();
            tiles[i / steps].push(gray);
        }
        Ok(Self {
            base: base.to_vec(),
            low,
            high,
            steps,
            resolution: h,
            tiles,
        })
    }

    /// Traversal around the posterior mean of `image` (`[1, C, H, W]`).
    pub fn around_image<T: Real>(model: &VaeModel<T>, image: &Tensor<T>, low: f64, high: f64, steps: usize) -> Result<Self> {
        let (mu, _) = model.encode(image)?;
        Self::build(model, &mu.to_f64_vec(), low, high, steps)
    }

    pub fn rows(&self) -> usize {
        self.tiles.len()
    }

    /// Whole grid as `(width, height, pixels)`, pixel = round(255·intensity).
    pub fn raster(&self) -> (usize, usize, Vec<u8>) {
        let r = self.resolution;
        let (w, h) = (self.steps * r, self.rows() * r);
        let mut px = vec![0u8; w * h];
        for (row, tiles) in self.tiles.iter().enumerate() {
            for (col, tile) in tiles.iter().enumerate() {
                for y in 0..r {
                    for x in 0..r {
                        let v = (255.0 * tile[y * r + x]).round().clamp(0.0, 255.0) as u8;
                        px[(row * r + y) * w + col * r + x] = v;
                    }
                }
            }
        }
        (w, h, px)
    }

    /// Binary PGM (P5) encoding of [`raster`](Self::raster).
    pub fn to_pgm(&self) -> Vec<u8> {
        let (w, h, px) = self.raster();
        encode_pgm(w, h, &px)
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn grid_shape() {
        let m = VaeModel::<f32>::new(ModelConfig::deft(2, 2, 16, 1), 1).unwrap();
        let g = TraversalGrid::build(&m, &[0.0; 4], -2.0, 2.0, 7).unwrap();
        assert_eq!(g.rows(), 4);
        assert!(g.tiles.iter().all(|r| r.len() == 7));
        let (w, h, px) = g.raster();
        assert_eq!((w, h), (7 * 16, 4 * 16));
        assert_eq!(px.len(), w * h);
        assert!(g.to_pgm().starts_with(b"P5\n112 64\n255\n"));
    }

    #[test]
    fn sweep_endpoints() {
        assert_eq!(sweep(-2.0, 2.0, 5), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }
}
