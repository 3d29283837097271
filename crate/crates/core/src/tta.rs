//! Test-time adaptation: fit low-rank adapters on a single image so the
//! backbone reconstructs the clean background and spreads background
//! subtype attention over the removal region.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::backbone::{standard_normal, weights_digest, AdapterGrads, DiffusionBackbone};
use crate::error::{Error, Result};
use crate::lora::{inject_adapters, LoraState, DEFAULT_RANK};
use crate::losses::{
    normalize_attention, total_loss_with_grad, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_TAU,
};
use crate::region::downsample_label_map;
use crate::types::{ImageTensor, Label, LabelMap};

/// Condition token used when no background subtype survived tag inference.
pub const FALLBACK_CONDITION: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruction plus puzzle terms.
    Full,
    /// Reconstruction only; attention is not regularized.
    ReconOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub iterations: usize,
    pub rank: usize,
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Timesteps are drawn uniformly from `[t_min * T, t_max * T]`.
    pub t_min: f64,
    pub t_max: f64,
    pub strength: f64,
    pub sampling_steps: usize,
    pub objective: Objective,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            rank: DEFAULT_RANK,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            learning_rate: 1e-4,
            seed: 0,
            t_min: 0.2,
            t_max: 0.9,
            strength: 0.8,
            sampling_steps: 10,
            objective: Objective::Full,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return bad(format!(
                "timestep range [{}, {}] must lie in [0,1]",
                self.t_min, self.t_max
            ));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return bad(format!("strength {} outside (0,1]", self.strength));
        }
        if self.sampling_steps == 0 {
            return bad("sampling_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Parses either a JSON object or `key = value` lines (`#` comments).
    /// Keys match the field names.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().overlay(text)
    }

    /// Like [`TtaConfig::parse`], but keys missing from `text` keep the
    /// values in `self`.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let layer: serde_json::Map<String, serde_json::Value> = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed)?
        } else {
            let mut map = serde_json::Map::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Invalid(format!("config line {}: expected key = value", n + 1))
                })?;
                let (key, value) = (key.trim(), value.trim());
                let value = serde_json::from_str(value)
                    .unwrap_or_else(|_| serde_json::Value::String(value.trim_matches('"').into()));
                map.insert(key.to_owned(), value);
            }
            map
        };
        let mut merged = match serde_json::to_value(self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, v) in layer {
            if !merged.contains_key(&k) {
                return Err(Error::Invalid(format!("unknown config key {k:?}")));
            }
            merged.insert(k, v);
        }
        let config: TtaConfig = serde_json::from_value(serde_json::Value::Object(merged))?;
        config.validate()?;
        Ok(config)
    }

    /// Sets `key` from a textual value, as a command-line override would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_owned()));
        match v.get_mut(key) {
            Some(slot) => *slot = parsed,
            None => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        *self = serde_json::from_value(v)?;
        self.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub timestep: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaTrace {
    pub steps: Vec<TraceStep>,
    pub wall_clock_secs: f64,
    pub lora_digest: String,
}

impl TtaTrace {
    /// One JSON record per iteration. Wall-clock time is left out so the
    /// file is reproducible.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("trace steps serialize"));
            out.push('\n');
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.losses.l_total).collect()
    }
}

/// Mean of `values[end - window .. end]`.
pub fn window_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let slice = &values[end.saturating_sub(window)..end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// First and second moment estimates.
type Moments = (Vec<f64>, Vec<f64>);

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    step: i32,
    moments: BTreeMap<String, [Moments; 2]>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Turns raw gradients into parameter decrements.
    fn step(&mut self, grads: &AdapterGrads) -> BTreeMap<String, (Mat, Mat)> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let hp = (self.beta1, self.beta2, self.eps, self.lr);
        let mut out = BTreeMap::new();
        for (name, (gd, gu)) in grads {
            let slots = self.moments.entry(name.clone()).or_insert_with(|| {
                [
                    (vec![0.0; gd.data.len()], vec![0.0; gd.data.len()]),
                    (vec![0.0; gu.data.len()], vec![0.0; gu.data.len()]),
                ]
            });
            let [(md, vd), (mu, vu)] = slots;
            let dd = adam_update(hp, gd, md, vd, c1, c2);
            let du = adam_update(hp, gu, mu, vu, c1, c2);
            out.insert(name.clone(), (dd, du));
        }
        out
    }
}

fn adam_update(
    (beta1, beta2, eps, lr): (f64, f64, f64, f64),
    g: &Mat,
    m: &mut [f64],
    v: &mut [f64],
    c1: f64,
    c2: f64,
) -> Mat {
    let mut d = Mat::zeros(g.rows, g.cols);
    for (i, gi) in g.data.iter().enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        d.data[i] = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
    d
}

/// Single-image adaptation problem.
#[derive(Debug, Clone)]
pub struct AdaptationInput<'a> {
    pub image: &'a ImageTensor,
    /// Pixel- or latent-resolution labels; downsampled as needed.
    pub labels: &'a LabelMap,
    pub background_tags: &'a [String],
}

/// Runs the adaptation loop. The backbone's base weights are never touched;
/// this is checked by digest before returning. `observe` sees every step as
/// it completes.
pub fn run_tta(
    backbone: &dyn DiffusionBackbone,
    input: &AdaptationInput<'_>,
    config: &TtaConfig,
    observe: &mut dyn FnMut(&TraceStep),
) -> Result<(LoraState, TtaTrace)> {
    config.validate()?;
    let started = Instant::now();
    let shape = backbone.latent_shape();
    let labels = downsample_label_map(input.labels, shape.height, shape.width)?;
    if labels.count(Label::Target) == 0 || labels.count(Label::Background) == 0 {
        return Err(Error::Degenerate(format!(
            "latent label map has {} target and {} background indices; both must be non-empty",
            labels.count(Label::Target),
            labels.count(Label::Background)
        )));
    }
    let z = backbone.encode(input.image)?;
    let use_puzzle = config.objective == Objective::Full && !input.background_tags.is_empty();
    let cond_tags: Vec<String> = if input.background_tags.is_empty() {
        vec![FALLBACK_CONDITION.to_owned()]
    } else {
        input.background_tags.to_vec()
    };
    let cond = backbone.tokenize(&cond_tags)?;

    let base_digest = weights_digest(&backbone.base_weights()?);
    let mut lora = inject_adapters(backbone, config.rank, config.seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let schedule = backbone.schedule();
    let t_lo = ((config.t_min * schedule.steps as f64).ceil() as usize).max(1);
    let t_hi = ((config.t_max * schedule.steps as f64).floor() as usize).max(t_lo);

    let mut steps = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let t = rng.random_range(t_lo..=t_hi);
        let noise = standard_normal(&mut rng, z.data().len());
        let z_t = schedule.add_noise(&z, &noise, t)?;
        let pass = backbone
            .training_pass(&z_t, t, &cond, &lora)
            .map_err(|e| match e {
                Error::Invalid(m) if m.contains("non-finite") => Error::NonFinite {
                    iteration,
                    message: m,
                },
                other => other,
            })?;
        let out = pass.output();
        let attention = if use_puzzle {
            Some(normalize_attention(
                cond_tags.clone(),
                shape.height,
                shape.width,
                out.attention.clone(),
                config.tau,
            )?)
        } else {
            None
        };
        let (losses, grads) =
            total_loss_with_grad(&z, &out.z0, attention.as_ref(), &labels, config.lambda)?;
        let finite = [losses.l_recon, losses.l_align, losses.l_div, losses.l_total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                iteration,
                message: format!("loss record {losses:?}"),
            });
        }
        let d_attention = if grads.raw_attention.is_empty() {
            vec![vec![0.0; shape.indices()]; cond.len()]
        } else {
            grads.raw_attention
        };
        let adapter_grads = pass.backward(&grads.z_hat, &d_attention)?;
        if adapter_grads
            .values()
            .any(|(d, u)| d.data.iter().chain(&u.data).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                iteration,
                message: "non-finite adapter gradient".into(),
            });
        }
        lora.apply_update(&adam.step(&adapter_grads));
        let step = TraceStep {
            iteration,
            timestep: t,
            losses,
        };
        observe(&step);
        steps.push(step);
    }

    if weights_digest(&backbone.base_weights()?) != base_digest {
        return Err(Error::Invalid(
            "base weights changed during adaptation".into(),
        ));
    }
    let trace = TtaTrace {
        steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        lora_digest: lora.digest(),
    };
    log::info!(
        "adaptation finished: {} iterations in {:.2}s",
        config.iterations,
        trace.wall_clock_secs
    );
    Ok((lora, trace))
}
