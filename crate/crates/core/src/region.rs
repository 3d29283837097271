//! Label algebra: building the ternary region map from masks, moving it to
//! latent resolution, and the soft Dice coefficient.

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Label, LabelMap};

/// Stability constant of the soft Dice coefficient.
pub const DICE_EPS: f64 = 1e-6;

/// Labels every pixel: target where `target` is set, non-target where only
/// `non_target` is set, background elsewhere. Target wins on overlap.
pub fn build_label_map(target: &BinaryMask, non_target: &BinaryMask) -> Result<LabelMap> {
    if target.dims() != non_target.dims() {
        return Err(Error::Shape(format!(
            "target mask {:?} vs non-target mask {:?}",
            target.dims(),
            non_target.dims()
        )));
    }
    let labels = target
        .bits()
        .iter()
        .zip(non_target.bits())
        .map(|(t, n)| match (t, n) {
            (1, _) => Label::Target,
            (_, 1) => Label::NonTarget,
            _ => Label::Background,
        })
        .collect();
    LabelMap::new(target.height(), target.width(), labels)
}

/// Half-open pixel range covered by latent cell `i` of `n` along an axis of
/// `len` pixels.
pub(crate) fn block_range(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    (i * len / n)..((i + 1) * len / n)
}

/// Majority-vote downsampling with priority tie-break (target, non-target,
/// background). If the target survives at pixel resolution but every latent
/// cell lost it, the cell with the largest target fraction is forced to
/// target.
pub fn downsample_label_map(map: &LabelMap, latent_h: usize, latent_w: usize) -> Result<LabelMap> {
    if latent_h == 0 || latent_w == 0 {
        return Err(Error::Invalid("latent dimensions must be positive".into()));
    }
    if latent_h > map.height() || latent_w > map.width() {
        return Err(Error::Invalid(format!(
            "latent {latent_h}x{latent_w} is larger than label map {}x{}",
            map.height(),
            map.width()
        )));
    }
    let mut labels = Vec::with_capacity(latent_h * latent_w);
    // (target fraction, cell index) of the best-covered cell
    let mut best_target: Option<(f64, usize)> = None;
    for i in 0..latent_h {
        let rows = block_range(i, latent_h, map.height());
        for j in 0..latent_w {
            let cols = block_range(j, latent_w, map.width());
            let mut counts = [0usize; 3];
            for y in rows.clone() {
                for x in cols.clone() {
                    counts[map.get(y, x).as_u8() as usize] += 1;
                }
            }
            let size = rows.len() * cols.len();
            let frac = counts[0] as f64 / size as f64;
            if counts[0] > 0 && best_target.is_none_or(|(f, _)| frac > f) {
                best_target = Some((frac, labels.len()));
            }
            // strict '>' keeps the lower (higher-priority) label on ties
            let mut winner = 0;
            for l in 1..3 {
                if counts[l] > counts[winner] {
                    winner = l;
                }
            }
            labels.push(Label::ALL[winner]);
        }
    }
    if let Some((_, cell)) = best_target {
        if !labels.contains(&Label::Target) {
            labels[cell] = Label::Target;
        }
    }
    LabelMap::new(latent_h, latent_w, labels)
}

fn check_soft(name: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Invalid(format!("{name} value {bad} outside [0,1]")));
    }
    Ok(())
}

/// Soft Dice coefficient `2 Σxy / (Σx + Σy + ε)` over two maps in `[0,1]`.
pub fn dice(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "dice inputs have {} and {} entries",
            x.len(),
            y.len()
        )));
    }
    check_soft("dice input", x)?;
    check_soft("dice input", y)?;
    let (inter, sx, sy) = dice_sums(x, y);
    Ok(2.0 * inter / (sx + sy + DICE_EPS))
}

fn dice_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    x.iter()
        .zip(y)
        .fold((0.0, 0.0, 0.0), |(i, a, b), (xv, yv)| {
            (i + xv * yv, a + xv, b + yv)
        })
}

/// Dice value and its gradient with respect to `x`.
pub fn dice_with_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = dice(x, y)?;
    let (inter, sx, sy) = dice_sums(x, y);
    let den = sx + sy + DICE_EPS;
    let grad = y
        .iter()
        .map(|yv| 2.0 * yv / den - 2.0 * inter / (den * den))
        .collect();
    Ok((value, grad))
}
