//! Background reconstruction and puzzle objectives over latents and
//! cross-attention maps, each with an analytic gradient.
//!
//! Attention enters as one raw map per background subtype tag, indexed by
//! latent position. The maps are renormalized across tags with a
//! temperature softmax before any loss sees them, so gradients are
//! reported with respect to the raw maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{dice, dice_with_grad};
use crate::types::{Label, LabelMap, LatentTensor};

pub const DEFAULT_TAU: f64 = 100.0;
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Per-subtype cross-attention, raw and tag-normalized, plus the dominant
/// (pointwise max) response.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub tags: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub tau: f64,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub dominant: Vec<f64>,
    /// Index of the tag attaining `dominant[p]` (first on ties).
    pub dominant_tag: Vec<usize>,
}

/// Temperature softmax across tags at every latent index.
pub fn normalize_attention(
    tags: Vec<String>,
    height: usize,
    width: usize,
    raw: Vec<Vec<f64>>,
    tau: f64,
) -> Result<AttentionStack> {
    if raw.is_empty() || tags.is_empty() {
        return Err(Error::Invalid(
            "attention stack needs at least one tag".into(),
        ));
    }
    if raw.len() != tags.len() {
        return Err(Error::Shape(format!(
            "{} raw maps for {} tags",
            raw.len(),
            tags.len()
        )));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Invalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    let n = height * width;
    for (tag, map) in tags.iter().zip(&raw) {
        if map.len() != n {
            return Err(Error::Shape(format!(
                "map for {tag:?} has {} entries, expected {n}",
                map.len()
            )));
        }
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite raw attention for {tag:?}"
            )));
        }
    }

    let k = raw.len();
    let mut normalized = vec![vec![0.0; n]; k];
    let mut dominant = vec![0.0; n];
    let mut dominant_tag = vec![0; n];
    let mut exps = vec![0.0; k];
    for p in 0..n {
        let peak = raw
            .iter()
            .map(|m| tau * m[p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (b, m) in raw.iter().enumerate() {
            exps[b] = (tau * m[p] - peak).exp();
            total += exps[b];
        }
        for b in 0..k {
            let a = exps[b] / total;
            normalized[b][p] = a;
            if b == 0 || a > dominant[p] {
                dominant[p] = a;
                dominant_tag[p] = b;
            }
        }
    }
    Ok(AttentionStack {
        tags,
        height,
        width,
        tau,
        raw,
        normalized,
        dominant,
        dominant_tag,
    })
}

impl AttentionStack {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Pulls a gradient on the normalized maps back to the raw maps through
    /// the softmax Jacobian.
    pub fn backward(&self, d_normalized: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.height * self.width;
        let mut d_raw = vec![vec![0.0; n]; self.len()];
        for p in 0..n {
            let inner: f64 = (0..self.len())
                .map(|b| self.normalized[b][p] * d_normalized[b][p])
                .sum();
            for b in 0..self.len() {
                d_raw[b][p] = self.tau * self.normalized[b][p] * (d_normalized[b][p] - inner);
            }
        }
        d_raw
    }
}

fn check_latents(z: &LatentTensor, z_hat: &LatentTensor, labels: &LabelMap) -> Result<()> {
    if z.shape() != z_hat.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs prediction {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    if (z.height(), z.width()) != labels.dims() {
        return Err(Error::Shape(format!(
            "latent {}x{} vs label map {:?}",
            z.height(),
            z.width(),
            labels.dims()
        )));
    }
    Ok(())
}

/// Mean over background indices of the squared channel-vector distance.
pub fn recon_loss(z: &LatentTensor, z_hat: &LatentTensor, labels: &LabelMap) -> Result<f64> {
    recon_loss_with_grad(z, z_hat, labels).map(|(v, _)| v)
}

/// Reconstruction loss and its gradient with respect to `z_hat`.
pub fn recon_loss_with_grad(
    z: &LatentTensor,
    z_hat: &LatentTensor,
    labels: &LabelMap,
) -> Result<(f64, Vec<f64>)> {
    check_latents(z, z_hat, labels)?;
    let count = labels.count(Label::Background);
    if count == 0 {
        return Err(Error::Degenerate(
            "no background indices for reconstruction".into(),
        ));
    }
    let c = z.channels();
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; z.data().len()];
    let mut total = 0.0;
    for (p, label) in labels.labels().iter().enumerate() {
        if *label != Label::Background {
            continue;
        }
        for ch in 0..c {
            let i = p * c + ch;
            let d = z_hat.data()[i] - z.data()[i];
            total += d * d;
            grad[i] = 2.0 * d * scale;
        }
    }
    Ok((total * scale, grad))
}

fn check_attention(att: &AttentionStack, labels: &LabelMap) -> Result<()> {
    if (att.height, att.width) != labels.dims() {
        return Err(Error::Shape(format!(
            "attention {}x{} vs label map {:?}",
            att.height,
            att.width,
            labels.dims()
        )));
    }
    Ok(())
}

fn valid_indicator(labels: &LabelMap) -> Vec<f64> {
    labels
        .labels()
        .iter()
        .map(|l| if *l == Label::NonTarget { 0.0 } else { 1.0 })
        .collect()
}

/// `1 - Dice(A_dom, 1[label in {target, background}])`.
pub fn align_loss(att: &AttentionStack, labels: &LabelMap) -> Result<f64> {
    check_attention(att, labels)?;
    Ok(1.0 - dice(&att.dominant, &valid_indicator(labels))?)
}

/// Align loss and its gradient with respect to the normalized maps. The max
/// routes the whole gradient of `A_dom[p]` to the attaining tag.
pub fn align_loss_with_grad(
    att: &AttentionStack,
    labels: &LabelMap,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_attention(att, labels)?;
    let (d, d_dom) = dice_with_grad(&att.dominant, &valid_indicator(labels))?;
    let mut grad = vec![vec![0.0; att.dominant.len()]; att.len()];
    for (p, g) in d_dom.iter().enumerate() {
        grad[att.dominant_tag[p]][p] = -g;
    }
    Ok((1.0 - d, grad))
}

/// Per-subtype peak activation inside the target region, with the index
/// where it is attained.
fn subtype_peaks(att: &AttentionStack, labels: &LabelMap) -> Result<Vec<(f64, usize)>> {
    check_attention(att, labels)?;
    let targets: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Label::Target)
        .map(|(p, _)| p)
        .collect();
    if targets.is_empty() {
        return Err(Error::Degenerate(
            "no target indices for diversity loss".into(),
        ));
    }
    Ok(att
        .normalized
        .iter()
        .map(|map| {
            let mut best = (map[targets[0]], targets[0]);
            for &p in &targets[1..] {
                if map[p] > best.0 {
                    best = (map[p], p);
                }
            }
            best
        })
        .collect())
}

fn weakest(peaks: &[(f64, usize)]) -> usize {
    let mut b_min = 0;
    for (b, peak) in peaks.iter().enumerate().skip(1) {
        if peak.0 < peaks[b_min].0 {
            b_min = b;
        }
    }
    b_min
}

/// `1 - min_b max_{p in target} A_b[p]`.
pub fn div_loss(att: &AttentionStack, labels: &LabelMap) -> Result<f64> {
    let peaks = subtype_peaks(att, labels)?;
    Ok(1.0 - peaks[weakest(&peaks)].0)
}

/// Diversity loss and its (sub)gradient with respect to the normalized maps.
pub fn div_loss_with_grad(att: &AttentionStack, labels: &LabelMap) -> Result<(f64, Vec<Vec<f64>>)> {
    let peaks = subtype_peaks(att, labels)?;
    let b_min = weakest(&peaks);
    let mut grad = vec![vec![0.0; att.dominant.len()]; att.len()];
    grad[b_min][peaks[b_min].1] = -1.0;
    Ok((1.0 - peaks[b_min].0, grad))
}

/// One step's objective values. Serialized flat, one record per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_align: f64,
    pub l_div: f64,
    pub l_puzzle: f64,
    pub l_total: f64,
    pub lambda: f64,
    #[serde(default)]
    pub puzzle_skipped: bool,
}

/// Gradients of the total objective.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub z_hat: Vec<f64>,
    /// One entry per tag of the attention stack; empty when the puzzle term
    /// was skipped.
    pub raw_attention: Vec<Vec<f64>>,
}

/// `L_recon + lambda * (L_align + L_div)`. Without attention (no background
/// subtypes) the puzzle terms are zero and flagged as skipped.
pub fn total_loss(
    z: &LatentTensor,
    z_hat: &LatentTensor,
    att: Option<&AttentionStack>,
    labels: &LabelMap,
    lambda: f64,
) -> Result<LossBreakdown> {
    let l_recon = recon_loss(z, z_hat, labels)?;
    let (l_align, l_div) = match att {
        Some(att) => (align_loss(att, labels)?, div_loss(att, labels)?),
        None => (0.0, 0.0),
    };
    Ok(combine(l_recon, l_align, l_div, lambda, att.is_none()))
}

fn combine(l_recon: f64, l_align: f64, l_div: f64, lambda: f64, skipped: bool) -> LossBreakdown {
    let l_puzzle = l_align + l_div;
    LossBreakdown {
        l_recon,
        l_align,
        l_div,
        l_puzzle,
        l_total: l_recon + lambda * l_puzzle,
        lambda,
        puzzle_skipped: skipped,
    }
}

pub fn total_loss_with_grad(
    z: &LatentTensor,
    z_hat: &LatentTensor,
    att: Option<&AttentionStack>,
    labels: &LabelMap,
    lambda: f64,
) -> Result<(LossBreakdown, LossGradients)> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Invalid(format!(
            "lambda {lambda} must be non-negative"
        )));
    }
    let (l_recon, d_z_hat) = recon_loss_with_grad(z, z_hat, labels)?;
    let Some(att) = att else {
        return Ok((
            combine(l_recon, 0.0, 0.0, lambda, true),
            LossGradients {
                z_hat: d_z_hat,
                raw_attention: Vec::new(),
            },
        ));
    };
    let (l_align, g_align) = align_loss_with_grad(att, labels)?;
    let (l_div, g_div) = div_loss_with_grad(att, labels)?;
    let d_norm: Vec<Vec<f64>> = g_align
        .iter()
        .zip(&g_div)
        .map(|(a, d)| a.iter().zip(d).map(|(x, y)| lambda * (x + y)).collect())
        .collect();
    Ok((
        combine(l_recon, l_align, l_div, lambda, false),
        LossGradients {
            z_hat: d_z_hat,
            raw_attention: att.backward(&d_norm),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("tag{i}")).collect()
    }

    #[test]
    fn identical_raw_maps_split_evenly() {
        let raw = vec![vec![0.4; 6]; 3];
        let att = normalize_attention(tags(3), 2, 3, raw, DEFAULT_TAU).unwrap();
        for map in &att.normalized {
            for v in map {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_tag_scalar_softmax() {
        let att = normalize_attention(tags(2), 1, 1, vec![vec![0.01], vec![0.02]], 100.0).unwrap();
        let e = std::f64::consts::E;
        assert!((att.normalized[0][0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((att.normalized[1][0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((att.normalized[0][0] - 0.26894).abs() < 1e-5);
        assert_eq!(att.dominant_tag[0], 1);
    }

    #[test]
    fn empty_tag_set_rejected() {
        assert!(normalize_attention(vec![], 2, 2, vec![], 100.0).is_err());
    }

    #[test]
    fn huge_raw_values_do_not_overflow() {
        let att = normalize_attention(tags(2), 1, 1, vec![vec![1e6], vec![0.0]], 100.0).unwrap();
        assert_eq!(att.normalized[0][0], 1.0);
        assert_eq!(att.normalized[1][0], 0.0);
    }

    fn latent(data: Vec<f64>, h: usize, w: usize) -> LatentTensor {
        let c = data.len() / (h * w);
        LatentTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn recon_examples() {
        let labels = LabelMap::from_raw(1, 2, &[0, 2]).unwrap();
        let z = latent(vec![0.0; 8], 1, 2);
        assert_eq!(recon_loss(&z, &z, &labels).unwrap(), 0.0);
        let mut hat = vec![0.0; 8];
        hat[4] = 2.0;
        hat[0] = 100.0; // target index, ignored
        assert_eq!(recon_loss(&z, &latent(hat, 1, 2), &labels).unwrap(), 4.0);
    }

    #[test]
    fn recon_without_background_is_degenerate() {
        let labels = LabelMap::from_raw(1, 2, &[0, 1]).unwrap();
        let z = latent(vec![0.0; 8], 1, 2);
        assert!(matches!(
            recon_loss(&z, &z, &labels),
            Err(Error::Degenerate(_))
        ));
    }

    fn stack_from_normalized(normalized: Vec<Vec<f64>>, h: usize, w: usize) -> AttentionStack {
        let n = h * w;
        let mut dominant = vec![0.0; n];
        let mut dominant_tag = vec![0; n];
        for p in 0..n {
            for (b, m) in normalized.iter().enumerate() {
                if b == 0 || m[p] > dominant[p] {
                    dominant[p] = m[p];
                    dominant_tag[p] = b;
                }
            }
        }
        AttentionStack {
            tags: tags(normalized.len()),
            height: h,
            width: w,
            tau: DEFAULT_TAU,
            raw: normalized.clone(),
            normalized,
            dominant,
            dominant_tag,
        }
    }

    #[test]
    fn align_examples() {
        let labels = LabelMap::from_raw(2, 2, &[0, 2, 1, 1]).unwrap();
        let perfect = stack_from_normalized(vec![vec![1.0, 1.0, 0.0, 0.0]], 2, 2);
        assert!(align_loss(&perfect, &labels).unwrap() < 1e-6);
        let wrong = stack_from_normalized(vec![vec![0.0, 0.0, 1.0, 1.0]], 2, 2);
        assert_eq!(align_loss(&wrong, &labels).unwrap(), 1.0);
        let half = stack_from_normalized(vec![vec![0.5; 4]], 2, 2);
        let l = align_loss(&half, &labels).unwrap();
        assert!((l - 0.5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn div_examples() {
        let labels = LabelMap::from_raw(1, 3, &[0, 0, 2]).unwrap();
        let att = stack_from_normalized(vec![vec![0.7, 0.2, 0.9], vec![0.3, 0.1, 0.1]], 1, 3);
        let l = div_loss(&att, &labels).unwrap();
        assert!((l - 0.7).abs() < 1e-12);
        let single = stack_from_normalized(vec![vec![1.0, 1.0, 1.0]], 1, 3);
        assert_eq!(div_loss(&single, &labels).unwrap(), 0.0);
        let no_target = LabelMap::from_raw(1, 3, &[2, 1, 2]).unwrap();
        assert!(matches!(
            div_loss(&att, &no_target),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_arithmetic() {
        let b = combine(0.1, 0.5, 0.7, 0.2, false);
        assert!((b.l_total - 0.34).abs() < 1e-12);
        assert_eq!(b.l_puzzle, 1.2);
        let b = combine(0.1, 0.5, 0.7, 0.0, false);
        assert_eq!(b.l_total, b.l_recon);
    }

    #[test]
    fn skipped_puzzle_is_flagged() {
        let labels = LabelMap::from_raw(1, 2, &[0, 2]).unwrap();
        let z = latent(vec![0.5; 8], 1, 2);
        let b = total_loss(&z, &z, None, &labels, 0.2).unwrap();
        assert!(b.puzzle_skipped);
        assert_eq!(b.l_total, 0.0);
    }
}
