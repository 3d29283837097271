//! Shared domain types: images, masks, ternary label maps, tag reports and
//! latent tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 8;

/// Planar-interleaved RGB (or N-channel) image with values in `[0, 1]`.
/// Layout is `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Invalid(format!(
                "image {height}x{width} is below the {MIN_IMAGE_SIDE}px minimum"
            )));
        }
        if channels == 0 {
            return Err(Error::Invalid("image with zero channels".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Invalid(format!("image value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from values that may stray slightly outside `[0,1]`
    /// (decoder output); they are clamped. Non-finite values are rejected.
    pub fn from_unclamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite image value".into()));
        }
        Self::new(
            height,
            width,
            channels,
            data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| f(*v)).collect(),
        )
    }
}

/// Binary mask stored one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {}",
                bits.len(),
                height * width
            )));
        }
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::Invalid(format!("mask value {b} is not 0/1")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|b| *b == 0)
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "masks {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    /// Pixels set in `self` but not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a & (1 - b))
            .collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }
}

/// Region label of one spatial index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Target = 0,
    NonTarget = 1,
    Background = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Target, Label::NonTarget, Label::Background];

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Target),
            1 => Some(Label::NonTarget),
            2 => Some(Label::Background),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// Ternary label per index, at pixel or latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map has {} entries, expected {}",
                labels.len(),
                height * width
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Invalid("empty label map".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn from_raw(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|v| {
                Label::from_u8(*v)
                    .ok_or_else(|| Error::Invalid(format!("label value {v} outside {{0,1,2}}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn to_raw(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.as_u8()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Indicator mask of indices carrying `label`.
    pub fn mask_of(&self, label: Label) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|l| u8::from(*l == label)).collect(),
        }
    }
}

/// Result of MLLM tag classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagReport {
    pub target_tag: String,
    pub non_target_tags: Vec<String>,
    pub background_tags: Vec<String>,
    #[serde(default)]
    pub raw_response: String,
}

impl TagReport {
    /// Checks the disjointness and non-empty-target invariants. Tags are
    /// compared case-insensitively after trimming.
    pub fn validate(&self) -> Result<()> {
        if self.target_tag.trim().is_empty() {
            return Err(Error::Invalid("target tag is empty".into()));
        }
        let mut seen: std::collections::HashMap<String, &'static str> = Default::default();
        let lists: [(&'static str, Vec<&String>); 3] = [
            ("target", vec![&self.target_tag]),
            ("non_target", self.non_target_tags.iter().collect()),
            ("background", self.background_tags.iter().collect()),
        ];
        for (list, tags) in lists {
            for tag in tags {
                let key = normalize_tag(tag);
                if key.is_empty() {
                    return Err(Error::Invalid(format!("empty tag in {list} list")));
                }
                if let Some(prev) = seen.insert(key, list) {
                    return Err(Error::Invalid(format!(
                        "tag {tag:?} appears in both {prev} and {list} lists"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

/// Latent feature map, `(p * channels + c)` layout with `p = y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "latent buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite latent value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> LatentShape {
        LatentShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel vector at spatial index `p`.
    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn indices(&self) -> usize {
        self.height * self.width
    }
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_small_and_out_of_range() {
        assert!(ImageTensor::filled(4, 16, 3, 0.5).is_err());
        assert!(ImageTensor::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(ImageTensor::new(8, 8, 1, vec![f64::NAN; 64]).is_err());
        assert!(ImageTensor::filled(8, 8, 3, 1.0).is_ok());
    }

    #[test]
    fn tag_report_disjointness_is_case_insensitive() {
        let report = TagReport {
            target_tag: "dog".into(),
            non_target_tags: vec!["Person".into()],
            background_tags: vec!["grass".into(), " person ".into()],
            raw_response: String::new(),
        };
        assert!(report.validate().is_err());

        let ok = TagReport {
            background_tags: vec!["grass".into()],
            ..report
        };
        ok.validate().unwrap();
    }

    #[test]
    fn empty_target_tag_rejected() {
        let report = TagReport {
            target_tag: "  ".into(),
            non_target_tags: vec![],
            background_tags: vec![],
            raw_response: String::new(),
        };
        assert!(report.validate().is_err());
    }

    #[test]
    fn mask_algebra() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let b = BinaryMask::from_fn(4, 4, |_, x| x < 2);
        assert_eq!(a.union(&b).unwrap().area(), 12);
        assert_eq!(a.minus(&b).unwrap().area(), 4);
        assert!(a.union(&BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn label_raw_roundtrip_rejects_three() {
        assert!(LabelMap::from_raw(1, 3, &[0, 1, 3]).is_err());
        let m = LabelMap::from_raw(1, 3, &[0, 1, 2]).unwrap();
        assert_eq!(m.to_raw(), vec![0, 1, 2]);
    }
}
