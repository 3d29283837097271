//! End-to-end removal: adapt, merge, sample.

use crate::backbone::{sample_removal, DiffusionBackbone, SamplingConfig};
use crate::error::Result;
use crate::lora::{merge_adapters, LoraState};
use crate::tta::{run_tta, AdaptationInput, TraceStep, TtaConfig, TtaTrace, FALLBACK_CONDITION};
use crate::types::{ImageTensor, LabelMap};

#[derive(Debug, Clone)]
pub struct RemovalOutput {
    pub image: ImageTensor,
    pub lora: LoraState,
    /// `None` when a stored adapter was reused instead of adapting.
    pub trace: Option<TtaTrace>,
}

pub fn sampling_config(config: &TtaConfig) -> SamplingConfig {
    SamplingConfig {
        strength: config.strength,
        steps: config.sampling_steps,
        seed: config.seed,
    }
}

/// Condition tokens for sampling: the background tags, or the fallback
/// token when there are none.
pub fn condition_tokens(backbone: &dyn DiffusionBackbone, tags: &[String]) -> Result<Vec<u32>> {
    if tags.is_empty() {
        backbone.tokenize(&[FALLBACK_CONDITION.to_owned()])
    } else {
        backbone.tokenize(tags)
    }
}

/// Adapts on `image` (or takes `reuse`), merges the adapters into
/// `backbone` and samples the edited image. The backbone is left merged.
pub fn run_removal(
    backbone: &mut dyn DiffusionBackbone,
    image: &ImageTensor,
    labels: &LabelMap,
    background_tags: &[String],
    config: &TtaConfig,
    reuse: Option<LoraState>,
    observe: &mut dyn FnMut(&TraceStep),
) -> Result<RemovalOutput> {
    config.validate()?;
    let (mut lora, trace) = match reuse {
        Some(l) => (l, None),
        None => {
            let input = AdaptationInput {
                image,
                labels,
                background_tags,
            };
            let (l, t) = run_tta(&*backbone, &input, config, observe)?;
            (l, Some(t))
        }
    };
    merge_adapters(backbone, &mut lora)?;
    let source = backbone.encode(image)?;
    let cond = condition_tokens(&*backbone, background_tags)?;
    let image = sample_removal(&*backbone, None, &source, &cond, &sampling_config(config))?;
    Ok(RemovalOutput { image, lora, trace })
}

/// Like [`run_removal`] but samples with the adapters attached instead of
/// merging them, leaving `backbone` untouched. Numerically equivalent up to
/// float rounding; meant for backbones shared with other clients.
pub fn run_removal_unmerged(
    backbone: &dyn DiffusionBackbone,
    image: &ImageTensor,
    labels: &LabelMap,
    background_tags: &[String],
    config: &TtaConfig,
    reuse: Option<LoraState>,
    observe: &mut dyn FnMut(&TraceStep),
) -> Result<RemovalOutput> {
    config.validate()?;
    let (lora, trace) = match reuse {
        Some(l) => (l, None),
        None => {
            let input = AdaptationInput {
                image,
                labels,
                background_tags,
            };
            let (l, t) = run_tta(backbone, &input, config, observe)?;
            (l, Some(t))
        }
    };
    let source = backbone.encode(image)?;
    let cond = condition_tokens(backbone, background_tags)?;
    let image = sample_removal(
        backbone,
        Some(&lora),
        &source,
        &cond,
        &sampling_config(config),
    )?;
    Ok(RemovalOutput { image, lora, trace })
}

/// The same sampling with no adaptation, as a reference point.
pub fn run_baseline(
    backbone: &dyn DiffusionBackbone,
    image: &ImageTensor,
    background_tags: &[String],
    config: &TtaConfig,
) -> Result<ImageTensor> {
    let source = backbone.encode(image)?;
    let cond = condition_tokens(backbone, background_tags)?;
    sample_removal(backbone, None, &source, &cond, &sampling_config(config))
}
