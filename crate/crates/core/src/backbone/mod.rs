//! Abstraction over a latent, text-conditioned diffusion model.
//!
//! The adaptation engine only needs a handful of capabilities from a
//! backbone: encode/decode, a one-step clean-latent prediction with
//! per-token cross-attention maps, and a training pass that can pull loss
//! gradients back onto low-rank adapters. [`toy::ToyBackbone`] implements
//! all of them in-process; [`shim::ShimBackbone`] forwards them to an
//! external model server.

pub mod shim;
pub mod toy;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::tensor::NamedTensor;
use crate::types::{ImageTensor, LatentShape, LatentTensor};

pub type TokenId = u32;

/// Variance-preserving cosine schedule: `alpha_t = cos(pi/2 * t/T)`,
/// `sigma_t = sin(pi/2 * t/T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        Self { steps }
    }

    fn angle(&self, t: usize) -> f64 {
        FRAC_PI_2 * t as f64 / self.steps as f64
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.angle(t).cos()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.angle(t).sin()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Invalid(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `alpha_t * z + sigma_t * noise`
    pub fn add_noise(&self, z: &LatentTensor, noise: &[f64], t: usize) -> Result<LatentTensor> {
        self.check(t)?;
        if noise.len() != z.data().len() {
            return Err(Error::Shape("noise does not match latent".into()));
        }
        let (a, s) = (self.alpha(t), self.sigma(t));
        let data = z
            .data()
            .iter()
            .zip(noise)
            .map(|(x, n)| a * x + s * n)
            .collect();
        LatentTensor::new(z.height(), z.width(), z.channels(), data)
    }
}

/// Weight matrix eligible for a low-rank adapter. `rows x cols` is
/// `out x in`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// One-step prediction of the clean latent plus, per condition token, the
/// raw cross-attention map at latent resolution (mean over cross-attention
/// blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub z0: LatentTensor,
    pub attention: Vec<Vec<f64>>,
}

/// Gradients of the objective with respect to each adapter's `(down, up)`
/// factors, keyed by projection name.
pub type AdapterGrads = BTreeMap<String, (Mat, Mat)>;

/// A recorded forward pass that can be differentiated once.
pub trait TrainingPass {
    fn output(&self) -> &DenoiseOutput;

    /// `d_z0` matches the latent layout; `d_attention` has one map per
    /// condition token (zeros for tokens the objective ignores).
    fn backward(self: Box<Self>, d_z0: &[f64], d_attention: &[Vec<f64>]) -> Result<AdapterGrads>;
}

pub trait DiffusionBackbone: Send {
    fn latent_shape(&self) -> LatentShape;

    /// Pixel dimensions `(height, width)` the encoder accepts.
    fn image_dims(&self) -> (usize, usize);

    fn schedule(&self) -> NoiseSchedule;

    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor>;

    fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor>;

    fn tokenize(&self, tags: &[String]) -> Result<Vec<TokenId>>;

    fn attention_projections(&self) -> Result<Vec<ProjectionInfo>>;

    /// Number of attention blocks carrying adaptable projections.
    fn attention_blocks(&self) -> Result<usize>;

    fn denoise_step(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: Option<&LoraState>,
    ) -> Result<DenoiseOutput>;

    fn training_pass<'a>(
        &'a self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: &LoraState,
    ) -> Result<Box<dyn TrainingPass + 'a>>;

    /// Frozen base parameters, in a stable order.
    fn base_weights(&self) -> Result<Vec<NamedTensor>>;

    /// Folds `W += scale * up * down` into every adapted projection.
    fn merge_weights(&mut self, adapters: &LoraState) -> Result<()>;
}

/// SHA-256 over the names and little-endian bytes of the base weights.
pub fn weights_digest(weights: &[NamedTensor]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.name.as_bytes());
        for d in &w.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &w.data {
            h.update(v.to_le_bytes());
        }
    }
    crate::hex(&h.finalize())
}

/// Which backbone to build: the in-process toy model or a shim server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Toy { seed: u64 },
    Shim { addr: String },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Toy { seed: 0 }
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    /// `toy`, `toy:<seed>` or `shim:<host:port>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "toy" => Ok(BackboneSpec::Toy { seed: 0 }),
            Some(("toy", seed)) => seed
                .parse()
                .map(|seed| BackboneSpec::Toy { seed })
                .map_err(|_| Error::Invalid(format!("bad toy seed {seed:?}"))),
            Some(("shim", addr)) if !addr.is_empty() => {
                Ok(BackboneSpec::Shim { addr: addr.into() })
            }
            _ => Err(Error::Invalid(format!(
                "backbone must be toy, toy:<seed> or shim:<addr>, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneSpec::Toy { seed } => write!(f, "toy:{seed}"),
            BackboneSpec::Shim { addr } => write!(f, "shim:{addr}"),
        }
    }
}

impl BackboneSpec {
    /// A fresh toy model sized for the image, or a new shim connection.
    pub fn instantiate(
        &self,
        image_h: usize,
        image_w: usize,
    ) -> Result<Box<dyn DiffusionBackbone>> {
        Ok(match self {
            BackboneSpec::Toy { seed } => Box::new(toy::ToyBackbone::new(*seed, image_h, image_w)?),
            BackboneSpec::Shim { addr } => Box::new(shim::ShimBackbone::connect(addr.as_str())?),
        })
    }

    /// Shim servers are shared between clients, so merging into them would
    /// leak one run's adapters into the next.
    pub fn is_shared(&self) -> bool {
        matches!(self, BackboneSpec::Shim { .. })
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Fraction of the schedule to noise the source latent to.
    pub strength: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strength: 0.8,
            steps: 10,
            seed: 0,
        }
    }
}

/// Noises `source` to `strength * T`, then walks a deterministic DDIM-style
/// trajectory back to zero noise and decodes the result.
pub fn sample_removal(
    backbone: &dyn DiffusionBackbone,
    adapters: Option<&LoraState>,
    source: &LatentTensor,
    cond: &[TokenId],
    config: &SamplingConfig,
) -> Result<ImageTensor> {
    let z0 = sample_latent(backbone, adapters, source, cond, config)?;
    backbone.decode(&z0)
}

pub fn sample_latent(
    backbone: &dyn DiffusionBackbone,
    adapters: Option<&LoraState>,
    source: &LatentTensor,
    cond: &[TokenId],
    config: &SamplingConfig,
) -> Result<LatentTensor> {
    let schedule = backbone.schedule();
    if !(config.strength > 0.0 && config.strength <= 1.0) {
        return Err(Error::Invalid(format!(
            "strength {} outside (0, 1]",
            config.strength
        )));
    }
    let start = (config.strength * schedule.steps as f64).round() as usize;
    if start < 1 {
        return Err(Error::Invalid(format!(
            "strength {} x {} steps rounds to zero noise",
            config.strength, schedule.steps
        )));
    }
    if config.steps == 0 {
        return Err(Error::Invalid("sampling needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = standard_normal(&mut rng, source.data().len());
    let mut z = schedule.add_noise(source, &noise, start)?;

    let mut times: Vec<usize> = (0..=config.steps)
        .map(|k| ((start * (config.steps - k)) as f64 / config.steps as f64).round() as usize)
        .collect();
    times.dedup();
    for pair in times.windows(2) {
        let (t, next) = (pair[0], pair[1]);
        let pred = backbone.denoise_step(&z, t, cond, adapters)?.z0;
        if next == 0 {
            z = pred;
            break;
        }
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let (a2, s2) = (schedule.alpha(next), schedule.sigma(next));
        let data = z
            .data()
            .iter()
            .zip(pred.data())
            .map(|(zt, x0)| {
                let eps = (zt - a * x0) / s;
                a2 * x0 + s2 * eps
            })
            .collect();
        z = LatentTensor::new(z.height(), z.width(), z.channels(), data)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_variance_preserving() {
        let s = NoiseSchedule::cosine(50);
        for t in 0..=50 {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&(a * a)));
        }
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.check(51).is_err());
    }
}
