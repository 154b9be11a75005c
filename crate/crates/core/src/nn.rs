//! Layer stacks: convolution, transposed convolution, dense, and the encoder /
//! decoder presets built from them.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
/// Symmetric padding that makes a 4x4 / stride-2 kernel exactly halve (or,
/// transposed, double) an even resolution.
pub const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out_channels: usize },
    ConvTranspose { out_channels: usize },
    Dense { units: usize },
    /// Parameter-free reshape of a flat row into `[channels, height, width]`.
    Unflatten { channels: usize, height: usize, width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv { out_channels },
            activation: Activation::Relu,
        }
    }

    pub fn conv_transpose(out_channels: usize) -> Self {
        Self {
            kind: LayerKind::ConvTranspose { out_channels },
            activation: Activation::Relu,
        }
    }

    pub fn dense(units: usize) -> Self {
        Self {
            kind: LayerKind::Dense { units },
            activation: Activation::Relu,
        }
    }

    pub fn unflatten(channels: usize, height: usize, width: usize) -> Self {
        Self {
            kind: LayerKind::Unflatten {
                channels,
                height,
                width,
            },
            activation: Activation::Identity,
        }
    }

    pub fn linear(mut self) -> Self {
        self.activation = Activation::Identity;
        self
    }
}

/// Width presets. `Full` uses the standard 32/32/64/64 conv widths;
/// `Desk` narrows the standard encoder and the decoder so that CPU runs on
/// 16-32 px data stay fast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchScale {
    Full,
    Desk,
}

impl ArchScale {
    pub fn name(self) -> &'static str {
        match self {
            ArchScale::Full => "full",
            ArchScale::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ArchScale::Full),
            "desk" => Ok(ArchScale::Desk),
            other => Err(Error::InvalidArgument(format!("unknown architecture scale {other:?}"))),
        }
    }
}

/// Ordered layer descriptors plus the per-sample input shape they expect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Number of stride-2 stages between a `resolution` image and the 4x4 grid.
fn conv_stages(resolution: usize) -> Result<usize> {
    if !resolution.is_power_of_two() || !(8..=64).contains(&resolution) {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} unsupported: need a power of two in [8, 64]"
        )));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

impl NetworkSpec {
    fn encoder(
        resolution: usize,
        channels: usize,
        conv_widths: [usize; 4],
        hidden: usize,
        latents: usize,
    ) -> Result<Self> {
        let stages = conv_stages(resolution)?;
        let mut layers: Vec<LayerSpec> = conv_widths[..stages]
            .iter()
            .map(|&c| LayerSpec::conv(c))
            .collect();
        layers.push(LayerSpec::dense(hidden));
        layers.push(LayerSpec::dense(2 * latents).linear());
        let spec = Self {
            input_shape: vec![channels, resolution, resolution],
            layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Lite encoder emitting `latents` means followed by `latents` log-variances.
    pub fn lite_encoder(resolution: usize, channels: usize, latents: usize) -> Result<Self> {
        Self::encoder(resolution, channels, [8, 8, 16, 16], 64, latents)
    }

    pub fn standard_encoder(
        resolution: usize,
        channels: usize,
        latents: usize,
        scale: ArchScale,
    ) -> Result<Self> {
        match scale {
            ArchScale::Full => Self::encoder(resolution, channels, [32, 32, 64, 64], 256, latents),
            ArchScale::Desk => Self::encoder(resolution, channels, [16, 16, 32, 32], 128, latents),
        }
    }

    /// Decoder from `latent_dim` to per-pixel Bernoulli logits.
    pub fn decoder(
        latent_dim: usize,
        resolution: usize,
        channels: usize,
        scale: ArchScale,
    ) -> Result<Self> {
        let stages = conv_stages(resolution)?;
        let (hidden, base, ups) = match scale {
            ArchScale::Full => (256, 64, [64, 32, 32]),
            ArchScale::Desk => (128, 32, [32, 32, 16]),
        };
        let widths = [ups[0], ups[1], ups[2], channels];
        let mut layers = vec![
            LayerSpec::dense(hidden),
            LayerSpec::dense(4 * 4 * base),
            LayerSpec::unflatten(base, 4, 4),
        ];
        for (i, &c) in widths[4 - stages..].iter().enumerate() {
            let layer = LayerSpec::conv_transpose(c);
            layers.push(if i + 1 == stages { layer.linear() } else { layer });
        }
        let spec = Self {
            input_shape: vec![latent_dim],
            layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Per-sample shape after every layer, validating compatibility.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer.kind {
                LayerKind::Dense { units } => vec![units],
                LayerKind::Conv { out_channels } => match cur[..] {
                    [_, h, w] if h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2 => {
                        vec![out_channels, h / STRIDE, w / STRIDE]
                    }
                    _ => {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv needs an even [c, h, w] input, got {cur:?}"
                        )))
                    }
                },
                LayerKind::ConvTranspose { out_channels } => match cur[..] {
                    [_, h, w] => vec![out_channels, h * STRIDE, w * STRIDE],
                    _ => {
                        return Err(Error::Shape(format!(
                            "layer {i}: transposed conv needs [c, h, w], got {cur:?}"
                        )))
                    }
                },
                LayerKind::Unflatten {
                    channels,
                    height,
                    width,
                } => {
                    let n: usize = cur.iter().product();
                    if n != channels * height * width {
                        return Err(Error::Shape(format!(
                            "layer {i}: cannot unflatten {cur:?} into [{channels}, {height}, {width}]"
                        )));
                    }
                    vec![channels, height, width]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    /// `(weight, bias)` for parameterized layers.
    layer_params: Vec<Option<(ParamId, ParamId)>>,
}

impl Network {
    /// Register freshly initialized parameters: weights uniform in
    /// `±sqrt(6 / fan_in)`, biases zero. For transposed convolutions the
    /// fan-in counts the taps that actually reach one output pixel
    /// (`in_channels * k² / stride²`).
    pub fn build<T: Real, R: Rng>(
        spec: NetworkSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut in_shape = spec.input_shape.clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            let in_flat: usize = in_shape.iter().product();
            let (w_shape, b_len, fan_in) = match layer.kind {
                LayerKind::Dense { units } => (vec![units, in_flat], units, in_flat),
                LayerKind::Conv { out_channels } => {
                    let c = in_shape[0];
                    (vec![out_channels, c, KERNEL, KERNEL], out_channels, c * KERNEL * KERNEL)
                }
                LayerKind::ConvTranspose { out_channels } => {
                    let c = in_shape[0];
                    let taps = c * KERNEL * KERNEL / (STRIDE * STRIDE);
                    (vec![c, out_channels, KERNEL, KERNEL], out_channels, taps)
                }
                LayerKind::Unflatten { .. } => {
                    layer_params.push(None);
                    in_shape = shapes[i].clone();
                    continue;
                }
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            let w: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            let w_id = store.add(format!("{prefix}.{i}.weight"), Tensor::new(w_shape, w)?);
            let b_id = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[b_len]));
            layer_params.push(Some((w_id, b_id)));
            in_shape = shapes[i].clone();
        }
        Ok(Self { spec, layer_params })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layer_params
            .iter()
            .flatten()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape().expect("validated at build")
    }

    /// Record the forward pass of a `[batch, ...input_shape]` node.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, input: NodeId) -> Result<NodeId> {
        let s = g.shape(input);
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [batch, {:?}], got {s:?}",
                self.spec.input_shape
            )));
        }
        let batch = s[0];
        let mut x = input;
        for (layer, params) in self.spec.layers.iter().zip(&self.layer_params) {
            x = match (layer.kind, params) {
                (LayerKind::Dense { .. }, Some((w, b))) => {
                    let (w, b) = (g.param(*w), g.param(*b));
                    g.linear(x, w, b)?
                }
                (LayerKind::Conv { .. }, Some((w, b))) => {
                    let (w, b) = (g.param(*w), g.param(*b));
                    g.conv2d(x, w, b, STRIDE, PAD)?
                }
                (LayerKind::ConvTranspose { .. }, Some((w, b))) => {
                    let (w, b) = (g.param(*w), g.param(*b));
                    g.conv_transpose2d(x, w, b, STRIDE, PAD)?
                }
                (
                    LayerKind::Unflatten {
                        channels,
                        height,
                        width,
                    },
                    None,
                ) => g.reshape(x, &[batch, channels, height, width])?,
                _ => unreachable!("layer/parameter table out of sync"),
            };
            if layer.activation == Activation::Relu {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Forward pass without keeping a graph around.
    pub fn infer<T: Real>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(params);
        let x = g.input(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
