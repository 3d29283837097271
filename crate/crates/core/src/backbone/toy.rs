//! Self-contained toy backbone for desk-scale runs.
//!
//! Latent is 8x8x4. Patches of 2x2 latent cells become 16 tokens of width
//! 16, lifted to a 64-wide residual stream. One self-attention and one
//! cross-attention block follow, each with query/key/value/output
//! projections. A linear head predicts `F` and the clean latent is
//! `c * z_t + (1 - c * alpha) * F` with the skip weight
//! `c = alpha * s^2 / (alpha^2 s^2 + sigma^2)`, `s = 0.5`, so `t = 0` is
//! exactly the identity.
//!
//! Position embeddings are random Fourier features of the token grid
//! coordinates, which makes them smooth across neighbouring patches.
//!
//! Encoding area-pools the image to 16x16 and projects every 2x2 pooled
//! block (12 values) onto 4 orthonormal directions: the three per-channel
//! means plus one seeded contrast direction. Decoding applies the transpose
//! and replicates back to full resolution.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    standard_normal, AdapterGrads, DenoiseOutput, DiffusionBackbone, NoiseSchedule, ProjectionInfo,
    TokenId, TrainingPass,
};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::tensor::NamedTensor;
use crate::types::{ImageTensor, LatentShape, LatentTensor};

pub const LATENT_SIDE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
pub const PATCH: usize = 2;
pub const HIDDEN: usize = 64;
pub const VOCAB: usize = 64;
pub const SCHEDULE_STEPS: usize = 50;

const GRID: usize = LATENT_SIDE / PATCH;
const TOKENS: usize = GRID * GRID;
const PATCH_DIM: usize = PATCH * PATCH * LATENT_CHANNELS;
const POOLED_SIDE: usize = 16;
const BLOCK_VALUES: usize = 12;
const TIME_FEATURES: usize = 8;
const DATA_STD: f64 = 0.5;
const POS_FREQUENCY: f64 = 0.8;
const QK_GAIN: f64 = 1.5;

const BLOCKS: [&str; 2] = ["blocks.0.self_attn", "blocks.1.cross_attn"];
const ROLES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    image_h: usize,
    image_w: usize,
    encoder: Mat,
    embed: Mat,
    pos: Mat,
    time_proj: Mat,
    projections: BTreeMap<String, Mat>,
    tokens: Mat,
    head: Mat,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        standard_normal(rng, rows * cols)
            .into_iter()
            .map(|v| v * std)
            .collect(),
    )
}

fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    gaussian(rng, rows, cols, 1.0 / (cols as f64).sqrt())
}

fn encoder_matrix(rng: &mut ChaCha8Rng) -> Mat {
    let mut rows: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            (0..BLOCK_VALUES)
                .map(|i| if i % 3 == c { 0.5 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut extra = standard_normal(rng, BLOCK_VALUES);
    for r in &rows {
        let dot: f64 = extra.iter().zip(r).map(|(a, b)| a * b).sum();
        for (e, b) in extra.iter_mut().zip(r) {
            *e -= dot * b;
        }
    }
    let norm = extra.iter().map(|v| v * v).sum::<f64>().sqrt();
    rows.push(extra.into_iter().map(|v| v / norm).collect());
    Mat::from_vec(4, BLOCK_VALUES, rows.concat())
}

/// Latent index and channel of patch token `n`, feature `f`.
#[inline]
fn unpatch(n: usize, f: usize) -> (usize, usize) {
    let (py, px) = (n / GRID, n % GRID);
    let cell = f / LATENT_CHANNELS;
    let (dy, dx) = (cell / PATCH, cell % PATCH);
    let p = (py * PATCH + dy) * LATENT_SIDE + px * PATCH + dx;
    (p, f % LATENT_CHANNELS)
}

#[inline]
fn patch_of(p: usize) -> usize {
    let (y, x) = (p / LATENT_SIDE, p % LATENT_SIDE);
    (y / PATCH) * GRID + x / PATCH
}

fn position_features(rng: &mut ChaCha8Rng) -> Mat {
    let freqs = standard_normal(rng, 2 * HIDDEN);
    let mut pos = Mat::zeros(TOKENS, HIDDEN);
    for d in 0..HIDDEN {
        let phase: f64 = rand::Rng::random_range(rng, 0.0..std::f64::consts::TAU);
        let (a, b) = (
            freqs[2 * d] * POS_FREQUENCY,
            freqs[2 * d + 1] * POS_FREQUENCY,
        );
        for n in 0..TOKENS {
            let (gy, gx) = ((n / GRID) as f64, (n % GRID) as f64);
            pos.data[n * HIDDEN + d] = 2f64.sqrt() * (a * gy + b * gx + phase).cos();
        }
    }
    pos
}

/// Skip weight applied to `z_t` at noise level `(alpha, sigma)`.
#[inline]
fn skip_weight(alpha: f64, sigma: f64) -> f64 {
    let s2 = DATA_STD * DATA_STD;
    alpha * s2 / (alpha * alpha * s2 + sigma * sigma)
}

fn time_features(t: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let tau = t as f64 / steps as f64;
    let mut f = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * (1 << k) as f64 * tau;
        f[2 * k] = w.sin();
        f[2 * k + 1] = w.cos();
    }
    f
}

struct Forward {
    tape: Tape,
    head_out: Var,
    cross_probs: Var,
    adapter_leaves: BTreeMap<String, (Var, Var)>,
    output: DenoiseOutput,
    /// Weight of the head output in `z0`.
    mix: f64,
}

impl ToyBackbone {
    /// Seeded toy model for images of `image_h x image_w` pixels (both
    /// multiples of 16).
    pub fn new(seed: u64, image_h: usize, image_w: usize) -> Result<Self> {
        if image_h == 0
            || image_w == 0
            || !image_h.is_multiple_of(POOLED_SIDE)
            || !image_w.is_multiple_of(POOLED_SIDE)
        {
            return Err(Error::Invalid(format!(
                "toy backbone needs image sides that are positive multiples of {POOLED_SIDE}, got {image_h}x{image_w}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = encoder_matrix(&mut rng);
        let embed = fan_in(&mut rng, HIDDEN, PATCH_DIM);
        let pos = position_features(&mut rng);
        let time_proj = fan_in(&mut rng, HIDDEN, TIME_FEATURES);
        let mut projections = BTreeMap::new();
        for block in BLOCKS {
            for role in ROLES {
                let mut w = fan_in(&mut rng, HIDDEN, HIDDEN);
                if block == BLOCKS[0] && (role == "q" || role == "k") {
                    // Near-identity so self-attention starts out local.
                    for (i, v) in w.data.iter_mut().enumerate() {
                        *v *= 0.1;
                        if i / HIDDEN == i % HIDDEN {
                            *v += QK_GAIN;
                        }
                    }
                }
                projections.insert(format!("{block}.{role}"), w);
            }
        }
        let tokens = gaussian(&mut rng, VOCAB, HIDDEN, 1.0);
        let head = fan_in(&mut rng, PATCH_DIM, HIDDEN);
        Ok(Self {
            image_h,
            image_w,
            encoder,
            embed,
            pos,
            time_proj,
            projections,
            tokens,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        [
            &self.encoder,
            &self.embed,
            &self.pos,
            &self.time_proj,
            &self.tokens,
            &self.head,
        ]
        .iter()
        .map(|m| m.data.len())
        .sum::<usize>()
            + self
                .projections
                .values()
                .map(|m| m.data.len())
                .sum::<usize>()
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::Shape(format!(
                "toy backbone expects latent {:?}, got {:?}",
                self.latent_shape(),
                z.shape()
            )));
        }
        Ok(())
    }

    fn linear(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        adapters: Option<&LoraState>,
        leaves: &mut BTreeMap<String, (Var, Var)>,
    ) -> Var {
        let w = tape.leaf(self.projections[name].clone());
        let y = tape.matmul_t(x, w);
        let Some(lora) = adapters else { return y };
        let Some(adapter) = lora.adapters.get(name) else {
            return y;
        };
        let (down, up) = match leaves.get(name) {
            Some(v) => *v,
            None => {
                let d = tape.leaf(adapter.down.clone());
                let u = tape.leaf(adapter.up.clone());
                leaves.insert(name.to_owned(), (d, u));
                (d, u)
            }
        };
        let low = tape.matmul_t(x, down);
        let low = tape.matmul_t(low, up);
        let low = tape.scale(low, lora.scale);
        tape.add(y, low)
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> (Var, Var) {
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, 1.0 / (HIDDEN as f64).sqrt());
        let probs = tape.softmax_rows(scores);
        (tape.matmul(probs, v), probs)
    }

    fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: Option<&LoraState>,
    ) -> Result<Forward> {
        self.check_latent(z_t)?;
        let schedule = self.schedule();
        schedule.check(t)?;
        if cond.is_empty() {
            return Err(Error::Invalid(
                "denoising needs at least one condition token".into(),
            ));
        }
        if let Some(bad) = cond.iter().find(|id| **id as usize >= VOCAB) {
            return Err(Error::Invalid(format!("unknown token id {bad}")));
        }
        if let Some(lora) = adapters {
            if lora.is_merged() {
                return Err(Error::AlreadyMerged);
            }
            for (name, a) in &lora.adapters {
                let w = self
                    .projections
                    .get(name)
                    .ok_or_else(|| Error::Shape(format!("no projection named {name}")))?;
                if a.down.cols != w.cols || a.up.rows != w.rows {
                    return Err(Error::Shape(format!(
                        "adapter {name} does not fit its weight"
                    )));
                }
            }
        }

        let mut x = Mat::zeros(TOKENS, PATCH_DIM);
        for n in 0..TOKENS {
            for f in 0..PATCH_DIM {
                let (p, c) = unpatch(n, f);
                x.data[n * PATCH_DIM + f] = z_t.at(p)[c];
            }
        }
        let feats = Mat::from_vec(1, TIME_FEATURES, time_features(t, schedule.steps).to_vec());
        let temb = feats.matmul_t(&self.time_proj);
        let mut bias = self.pos.clone();
        for n in 0..TOKENS {
            for (b, e) in bias.data[n * HIDDEN..(n + 1) * HIDDEN]
                .iter_mut()
                .zip(&temb.data)
            {
                *b += e;
            }
        }

        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let xv = tape.leaf(x);
        let embed = tape.leaf(self.embed.clone());
        let h = tape.matmul_t(xv, embed);
        let bias = tape.leaf(bias);
        let h0 = tape.add(h, bias);

        let [sa, ca] = BLOCKS;
        let q = self.linear(&mut tape, h0, &format!("{sa}.q"), adapters, &mut leaves);
        let k = self.linear(&mut tape, h0, &format!("{sa}.k"), adapters, &mut leaves);
        let v = self.linear(&mut tape, h0, &format!("{sa}.v"), adapters, &mut leaves);
        let (o, _) = self.attention(&mut tape, q, k, v);
        let o = self.linear(&mut tape, o, &format!("{sa}.o"), adapters, &mut leaves);
        let h1 = tape.add(h0, o);

        let mut ctx = Mat::zeros(cond.len(), HIDDEN);
        for (i, id) in cond.iter().enumerate() {
            ctx.data[i * HIDDEN..(i + 1) * HIDDEN].copy_from_slice(self.tokens.row(*id as usize));
        }
        let ctx = tape.leaf(ctx);
        let q = self.linear(&mut tape, h1, &format!("{ca}.q"), adapters, &mut leaves);
        let k = self.linear(&mut tape, ctx, &format!("{ca}.k"), adapters, &mut leaves);
        let v = self.linear(&mut tape, ctx, &format!("{ca}.v"), adapters, &mut leaves);
        let (o, cross_probs) = self.attention(&mut tape, q, k, v);
        let o = self.linear(&mut tape, o, &format!("{ca}.o"), adapters, &mut leaves);
        let h2 = tape.add(h1, o);

        let head = tape.leaf(self.head.clone());
        let head_out = tape.matmul_t(h2, head);

        let (alpha, sigma) = (schedule.alpha(t), schedule.sigma(t));
        let skip = skip_weight(alpha, sigma);
        let mix = 1.0 - skip * alpha;
        let pred = tape.value(head_out);
        let mut z0 = vec![0.0; z_t.data().len()];
        for n in 0..TOKENS {
            for f in 0..PATCH_DIM {
                let (p, c) = unpatch(n, f);
                let i = p * LATENT_CHANNELS + c;
                z0[i] = skip * z_t.data()[i] + mix * pred.at(n, f);
            }
        }
        let probs = tape.value(cross_probs);
        let attention = (0..cond.len())
            .map(|l| {
                (0..LATENT_SIDE * LATENT_SIDE)
                    .map(|p| probs.at(patch_of(p), l))
                    .collect()
            })
            .collect();
        let output = DenoiseOutput {
            z0: LatentTensor::new(LATENT_SIDE, LATENT_SIDE, LATENT_CHANNELS, z0)?,
            attention,
        };
        Ok(Forward {
            tape,
            head_out,
            cross_probs,
            adapter_leaves: leaves,
            output,
            mix,
        })
    }
}

impl TrainingPass for Forward {
    fn output(&self) -> &DenoiseOutput {
        &self.output
    }

    fn backward(self: Box<Self>, d_z0: &[f64], d_attention: &[Vec<f64>]) -> Result<AdapterGrads> {
        let n_latent = LATENT_SIDE * LATENT_SIDE;
        if d_z0.len() != n_latent * LATENT_CHANNELS {
            return Err(Error::Shape("latent cotangent has the wrong size".into()));
        }
        let cond = self.output.attention.len();
        if d_attention.len() != cond || d_attention.iter().any(|m| m.len() != n_latent) {
            return Err(Error::Shape(
                "attention cotangent has the wrong size".into(),
            ));
        }
        let mut d_head = Mat::zeros(TOKENS, PATCH_DIM);
        for n in 0..TOKENS {
            for f in 0..PATCH_DIM {
                let (p, c) = unpatch(n, f);
                d_head.data[n * PATCH_DIM + f] = self.mix * d_z0[p * LATENT_CHANNELS + c];
            }
        }
        let mut d_probs = Mat::zeros(TOKENS, cond);
        for (l, map) in d_attention.iter().enumerate() {
            for (p, g) in map.iter().enumerate() {
                d_probs.data[patch_of(p) * cond + l] += g;
            }
        }
        let grads = self
            .tape
            .backward(&[(self.head_out, d_head), (self.cross_probs, d_probs)]);
        Ok(self
            .adapter_leaves
            .iter()
            .map(|(name, (d, u))| {
                let dd = grads.get(*d).cloned().unwrap_or_else(|| {
                    let m = self.tape.value(*d);
                    Mat::zeros(m.rows, m.cols)
                });
                let du = grads.get(*u).cloned().unwrap_or_else(|| {
                    let m = self.tape.value(*u);
                    Mat::zeros(m.rows, m.cols)
                });
                (name.clone(), (dd, du))
            })
            .collect())
    }
}

impl DiffusionBackbone for ToyBackbone {
    fn latent_shape(&self) -> LatentShape {
        LatentShape {
            height: LATENT_SIDE,
            width: LATENT_SIDE,
            channels: LATENT_CHANNELS,
        }
    }

    fn image_dims(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(SCHEDULE_STEPS)
    }

    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        if image.dims() != self.image_dims() || image.channels() != 3 {
            return Err(Error::Shape(format!(
                "toy encoder expects {}x{}x3, got {}x{}x{}",
                self.image_h,
                self.image_w,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let (fy, fx) = (self.image_h / POOLED_SIDE, self.image_w / POOLED_SIDE);
        let mut pooled = vec![0.0; POOLED_SIDE * POOLED_SIDE * 3];
        for y in 0..self.image_h {
            for x in 0..self.image_w {
                let cell = (y / fy) * POOLED_SIDE + x / fx;
                for c in 0..3 {
                    pooled[cell * 3 + c] += image.get(y, x, c);
                }
            }
        }
        let norm = 1.0 / (fy * fx) as f64;
        let mut latent = vec![0.0; LATENT_SIDE * LATENT_SIDE * LATENT_CHANNELS];
        let mut block = [0.0; BLOCK_VALUES];
        for i in 0..LATENT_SIDE {
            for j in 0..LATENT_SIDE {
                for k in 0..4 {
                    let (py, px) = (2 * i + k / 2, 2 * j + k % 2);
                    for c in 0..3 {
                        block[k * 3 + c] = pooled[(py * POOLED_SIDE + px) * 3 + c] * norm;
                    }
                }
                let p = i * LATENT_SIDE + j;
                for ch in 0..LATENT_CHANNELS {
                    latent[p * LATENT_CHANNELS + ch] = self
                        .encoder
                        .row(ch)
                        .iter()
                        .zip(&block)
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
        }
        LatentTensor::new(LATENT_SIDE, LATENT_SIDE, LATENT_CHANNELS, latent)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        self.check_latent(latent)?;
        let (fy, fx) = (self.image_h / POOLED_SIDE, self.image_w / POOLED_SIDE);
        let mut pooled = vec![0.0; POOLED_SIDE * POOLED_SIDE * 3];
        for i in 0..LATENT_SIDE {
            for j in 0..LATENT_SIDE {
                let z = latent.at(i * LATENT_SIDE + j);
                for k in 0..4 {
                    let (py, px) = (2 * i + k / 2, 2 * j + k % 2);
                    for c in 0..3 {
                        let idx = k * 3 + c;
                        pooled[(py * POOLED_SIDE + px) * 3 + c] = (0..LATENT_CHANNELS)
                            .map(|ch| self.encoder.at(ch, idx) * z[ch])
                            .sum();
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(self.image_h * self.image_w * 3);
        for y in 0..self.image_h {
            for x in 0..self.image_w {
                let cell = (y / fy) * POOLED_SIDE + x / fx;
                data.extend_from_slice(&pooled[cell * 3..cell * 3 + 3]);
            }
        }
        ImageTensor::from_unclamped(self.image_h, self.image_w, 3, data)
    }

    /// Tags map to vocabulary rows by a stable hash of the normalized tag.
    fn tokenize(&self, tags: &[String]) -> Result<Vec<TokenId>> {
        use sha2::{Digest, Sha256};
        Ok(tags
            .iter()
            .map(|t| {
                let h = Sha256::digest(crate::types::normalize_tag(t).as_bytes());
                (u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as usize % VOCAB) as TokenId
            })
            .collect())
    }

    fn attention_projections(&self) -> Result<Vec<ProjectionInfo>> {
        Ok(self
            .projections
            .iter()
            .map(|(name, w)| ProjectionInfo {
                name: name.clone(),
                rows: w.rows,
                cols: w.cols,
            })
            .collect())
    }

    fn attention_blocks(&self) -> Result<usize> {
        Ok(BLOCKS.len())
    }

    fn denoise_step(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: Option<&LoraState>,
    ) -> Result<DenoiseOutput> {
        Ok(self.forward(z_t, t, cond, adapters)?.output)
    }

    fn training_pass<'a>(
        &'a self,
        z_t: &LatentTensor,
        t: usize,
        cond: &[TokenId],
        adapters: &LoraState,
    ) -> Result<Box<dyn TrainingPass + 'a>> {
        Ok(Box::new(self.forward(z_t, t, cond, Some(adapters))?))
    }

    fn base_weights(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::new();
        let mut push = |name: &str, m: &Mat| {
            out.push(NamedTensor {
                name: name.to_owned(),
                shape: vec![m.rows, m.cols],
                data: m.data.clone(),
            })
        };
        push("encoder", &self.encoder);
        push("embed", &self.embed);
        push("pos", &self.pos);
        push("time_proj", &self.time_proj);
        for (name, m) in &self.projections {
            push(name, m);
        }
        push("tokens", &self.tokens);
        push("head", &self.head);
        Ok(out)
    }

    fn merge_weights(&mut self, adapters: &LoraState) -> Result<()> {
        for name in adapters.adapters.keys() {
            let w = self
                .projections
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no projection named {name}")))?;
            let a = &adapters.adapters[name];
            if a.down.cols != w.cols || a.up.rows != w.rows {
                return Err(Error::Shape(format!(
                    "adapter {name} does not fit its weight"
                )));
            }
        }
        for name in adapters.adapters.keys() {
            let delta = adapters.delta(name).expect("checked above");
            self.projections
                .get_mut(name)
                .expect("checked above")
                .add_assign(&delta);
        }
        Ok(())
    }
}
