//! Encoder-group VAE: `G` independent encoders, each emitting `K` Gaussian
//! latents, feeding one shared decoder over the concatenated `G·K` code.
//! A single standard encoder (`G = 1`) gives the baseline VAE.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{ArchScale, Network, NetworkSpec};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Lite,
    Standard,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Lite => "lite",
            EncoderKind::Standard => "standard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub groups: usize,
    pub latents_per_group: usize,
    pub resolution: usize,
    pub channels: usize,
    pub encoder: EncoderKind,
    pub scale: ArchScale,
}

impl ModelConfig {
    /// `G` lite encoders with `K` latents each.
    pub fn deft(groups: usize, latents_per_group: usize, resolution: usize, channels: usize) -> Self {
        Self {
            groups,
            latents_per_group,
            resolution,
            channels,
            encoder: EncoderKind::Lite,
            scale: ArchScale::Desk,
        }
    }

    /// One standard encoder with `latent_dim` latents.
    pub fn baseline(latent_dim: usize, resolution: usize, channels: usize, scale: ArchScale) -> Self {
        Self {
            groups: 1,
            latents_per_group: latent_dim,
            resolution,
            channels,
            encoder: EncoderKind::Standard,
            scale,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.groups * self.latents_per_group
    }

    pub fn to_metadata(&self) -> String {
        format!(
            "groups={}\nlatents_per_group={}\nresolution={}\nchannels={}\nencoder={}\nscale={}\n",
            self.groups,
            self.latents_per_group,
            self.resolution,
            self.channels,
            self.encoder.name(),
            self.scale.name()
        )
    }

    pub fn from_metadata(text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("model metadata lacks {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("model metadata {k:?} is not an integer")))
        };
        let encoder = match get("encoder")? {
            "lite" => EncoderKind::Lite,
            "standard" => EncoderKind::Standard,
            other => return Err(Error::Format(format!("unknown encoder kind {other:?}"))),
        };
        Ok(Self {
            groups: num("groups")?,
            latents_per_group: num("latents_per_group")?,
            resolution: num("resolution")?,
            channels: num("channels")?,
            encoder,
            scale: ArchScale::parse(get("scale")?)?,
        })
    }
}

/// Graph nodes of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VaeOutputs {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub logits: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T> {
    pub config: ModelConfig,
    pub encoders: Vec<Network>,
    pub decoder: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> VaeModel<T> {
    /// Freshly initialized model; all initialization randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.groups == 0 || config.latents_per_group == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one group and one latent per group".into(),
            ));
        }
        let mut rng = rng::stream(seed, "init", 0);
        let mut params = ParamStore::new();
        let mut encoders = Vec::with_capacity(config.groups);
        for i in 0..config.groups {
            let spec = match config.encoder {
                EncoderKind::Lite => {
                    NetworkSpec::lite_encoder(config.resolution, config.channels, config.latents_per_group)?
                }
                EncoderKind::Standard => NetworkSpec::standard_encoder(
                    config.resolution,
                    config.channels,
                    config.latents_per_group,
                    config.scale,
                )?,
            };
            encoders.push(Network::build(spec, &mut params, &format!("enc{i}"), &mut rng)?);
        }
        let spec =
            NetworkSpec::decoder(config.latent_dim(), config.resolution, config.channels, config.scale)?;
        let decoder = Network::build(spec, &mut params, "dec", &mut rng)?;
        Ok(Self {
            config,
            encoders,
            decoder,
            params,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.resolution, self.config.resolution]
    }

    pub fn encoder_param_ids(&self, group: usize) -> Vec<ParamId> {
        self.encoders[group].param_ids()
    }

    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.decoder.param_ids()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.image_shape() {
            return Err(Error::Shape(format!(
                "model expects [batch, {:?}], got {shape:?}",
                self.image_shape()
            )));
        }
        Ok(())
    }

    /// Concatenated posterior parameters of all groups, in group order.
    pub fn encode_nodes(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let k = self.config.latents_per_group;
        let mut mus = Vec::with_capacity(self.encoders.len());
        let mut lvs = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let h = enc.forward(g, x)?;
            mus.push(g.slice_cols(h, 0, k)?);
            lvs.push(g.slice_cols(h, k, k)?);
        }
        if mus.len() == 1 {
            return Ok((mus[0], lvs[0]));
        }
        Ok((g.concat_cols(&mus)?, g.concat_cols(&lvs)?))
    }

    /// Encoder, reparameterized sample with the given standard-normal noise,
    /// and decoder logits.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: &Tensor<T>, noise: Tensor<T>) -> Result<VaeOutputs> {
        self.check_images(images.shape())?;
        let x = g.input(images.clone());
        let (mu, logvar) = self.encode_nodes(g, x)?;
        let z = g.reparameterize(mu, logvar, noise)?;
        let logits = self.decoder.forward(g, z)?;
        Ok(VaeOutputs {
            mu,
            logvar,
            z,
            logits,
        })
    }

    /// Posterior means and log-variances, `[batch, latent_dim]` each.
    pub fn encode(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_images(images.shape())?;
        let mut g = Graph::new(&self.params);
        let x = g.input(images.clone());
        let (mu, lv) = self.encode_nodes(&mut g, x)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Decoder logits for a `[batch, latent_dim]` code.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.infer(&self.params, z)
    }

    /// Reset Adam moments of every encoder group.
    pub fn reset_encoder_optimizers(&mut self) {
        for i in 0..self.encoders.len() {
            for id in self.encoders[i].param_ids() {
                self.params.get_mut(id).reset_optimizer();
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_dimension_is_groups_times_k() {
        let m = VaeModel::<f32>::new(ModelConfig::deft(2, 2, 16, 1), 0).unwrap();
        assert_eq!(m.latent_dim(), 4);
        assert_eq!(m.encoders.len(), 2);
        let m = VaeModel::<f32>::new(ModelConfig::deft(4, 3, 16, 1), 0).unwrap();
        assert_eq!(m.latent_dim(), 12);
        assert_eq!(m.decoder.spec.input_shape, vec![12]);
    }

    #[test]
    fn single_group_is_a_lite_beta_vae() {
        let m = VaeModel::<f32>::new(ModelConfig::deft(1, 5, 16, 1), 0).unwrap();
        assert_eq!(m.encoders.len(), 1);
        assert_eq!(m.encoders[0].spec, NetworkSpec::lite_encoder(16, 1, 5).unwrap());
    }

    #[test]
    fn encode_concatenates_groups_in_order() {
        let m = VaeModel::<f64>::new(ModelConfig::deft(3, 2, 16, 1), 9).unwrap();
        let x = Tensor::full(&[2, 1, 16, 16], 0.3);
        let (mu, lv) = m.encode(&x).unwrap();
        assert_eq!(mu.shape(), &[2, 6]);
        for (i, enc) in m.encoders.iter().enumerate() {
            let h = enc.infer(&m.params, &x).unwrap();
            for r in 0..2 {
                assert_eq!(&mu.data()[r * 6 + 2 * i..r * 6 + 2 * i + 2], &h.data()[r * 4..r * 4 + 2]);
                assert_eq!(&lv.data()[r * 6 + 2 * i..r * 6 + 2 * i + 2], &h.data()[r * 4 + 2..r * 4 + 4]);
            }
        }
    }

    #[test]
    fn unsupported_resolution_is_rejected() {
        assert!(VaeModel::<f32>::new(ModelConfig::deft(2, 2, 24, 1), 0).is_err());
        assert!(VaeModel::<f32>::new(ModelConfig::deft(0, 2, 16, 1), 0).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let c = ModelConfig::baseline(10, 32, 3, ArchScale::Full);
        assert_eq!(ModelConfig::from_metadata(&c.to_metadata()).unwrap(), c);
    }
}
