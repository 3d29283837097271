//! External model clients: a vision-language model (tag classification and
//! judging) and a text/prompt-to-mask localizer.
//!
//! Each has an HTTP implementation, a fixture-replay implementation and a
//! recording wrapper that turns live traffic into fixtures.

use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fixtures::{FixtureRecord, FixtureSet, FixtureWriter, RequestDigest};
use crate::io::{decode_soft_mask, encode_binary_mask, encode_image};
use crate::segment::PromptEvent;
use crate::types::{BinaryMask, ImageTensor};

/// Text plus images in, text out.
pub trait VisionLanguageClient: Send + Sync {
    fn name(&self) -> String;

    fn complete(&self, prompt: &str, images: &[ImageTensor]) -> Result<String>;
}

/// A detected instance: confidence and per-pixel probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl Detection {
    pub fn threshold(&self, mask_threshold: f64) -> Result<BinaryMask> {
        let bits = self
            .probs
            .iter()
            .map(|p| u8::from(*p >= mask_threshold))
            .collect();
        BinaryMask::new(self.height, self.width, bits)
    }
}

pub trait Tag2MaskClient: Send + Sync {
    fn name(&self) -> String;

    /// Every instance of `tag` the model finds, unfiltered.
    fn detect(&self, image: &ImageTensor, tag: &str) -> Result<Vec<Detection>>;

    /// Applies one point/box prompt to `current` and returns the new mask.
    fn segment(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask>;
}

/// Digest of a vision-language request.
pub fn completion_key(kind: &str, prompt: &str, images: &[ImageTensor]) -> String {
    let mut d = RequestDigest::new(kind);
    d.text(prompt);
    for img in images {
        d.image(img);
    }
    d.finish()
}

pub fn detect_key(image: &ImageTensor, tag: &str) -> String {
    RequestDigest::new("tag2mask")
        .image(image)
        .text(&crate::types::normalize_tag(tag))
        .finish()
}

pub fn segment_key(image: &ImageTensor, current: &BinaryMask, event: &PromptEvent) -> String {
    let event = serde_json::to_string(event).expect("prompt events serialize");
    RequestDigest::new("segment")
        .image(image)
        .mask(current)
        .text(&event)
        .finish()
}

/// Renders a mask as a white-on-black RGB image so it can travel next to
/// the photo in a vision-language request.
pub fn mask_as_image(mask: &BinaryMask) -> Result<ImageTensor> {
    let (h, w) = mask.dims();
    let data = mask.bits().iter().flat_map(|b| [*b as f64; 3]).collect();
    ImageTensor::new(h, w, 3, data)
}

fn transport(client: &str, e: impl std::fmt::Display) -> Error {
    Error::Transport {
        client: client.to_owned(),
        message: e.to_string(),
    }
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| transport("http", e))
}

fn png_data_url(image: &ImageTensor) -> Result<String> {
    Ok(format!(
        "data:image/png;base64,{}",
        B64.encode(encode_image(image)?)
    ))
}

/// OpenAI-style chat-completions endpoint. The key is read from the named
/// environment variable at call time.
#[derive(Debug, Clone)]
pub struct HttpVisionClient {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout: Duration,
}

impl VisionLanguageClient for HttpVisionClient {
    fn name(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, prompt: &str, images: &[ImageTensor]) -> Result<String> {
        let name = self.name();
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for img in images {
            content.push(json!({"type": "image_url", "image_url": {"url": png_data_url(img)?}}));
        }
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        });
        let mut req = http_client(self.timeout)?.post(&self.endpoint).json(&body);
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| transport(&name, format!("environment variable {var} is not set")))?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| transport(&name, e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| transport(&name, e))?;
        if !status.is_success() {
            return Err(transport(&name, format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: "chat completion".into(),
            message: e.to_string(),
            raw: text.clone(),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Parse {
                what: "chat completion".into(),
                message: "missing choices[0].message.content".into(),
                raw: text,
            })
    }
}

/// Replays recorded completions of one `kind` (e.g. `mllm`, `judge`).
#[derive(Debug, Clone)]
pub struct FixtureVisionClient {
    pub kind: String,
    pub fixtures: FixtureSet,
}

impl VisionLanguageClient for FixtureVisionClient {
    fn name(&self) -> String {
        format!("fixture:{}", self.kind)
    }

    fn complete(&self, prompt: &str, images: &[ImageTensor]) -> Result<String> {
        let key = completion_key(&self.kind, prompt, images);
        let rec = self.fixtures.expect(&self.kind, &key, None)?;
        match &rec.response {
            Value::String(s) => Ok(s.clone()),
            other => Ok(other.to_string()),
        }
    }
}

/// Forwards to `inner` and appends every exchange to a fixture file.
pub struct RecordingVisionClient<C> {
    pub kind: String,
    pub inner: C,
    pub writer: FixtureWriter,
}

impl<C: VisionLanguageClient> VisionLanguageClient for RecordingVisionClient<C> {
    fn name(&self) -> String {
        format!("recording:{}", self.inner.name())
    }

    fn complete(&self, prompt: &str, images: &[ImageTensor]) -> Result<String> {
        let out = self.inner.complete(prompt, images)?;
        self.writer.append(&FixtureRecord {
            kind: self.kind.clone(),
            key: completion_key(&self.kind, prompt, images),
            tag: None,
            response: Value::String(out.clone()),
        })?;
        Ok(out)
    }
}

/// Mask source inside a fixture response: a PNG path (grey level / 255 is
/// the probability) or an inclusive-exclusive `[y0, x0, y1, x1]` rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    Png { mask: String },
    Rect { rect: [usize; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedDetection {
    pub score: f64,
    #[serde(flatten)]
    pub source: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedDetections {
    pub detections: Vec<RecordedDetection>,
}

fn load_mask_source(
    fixtures: &FixtureSet,
    source: &MaskSource,
    height: usize,
    width: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    match source {
        MaskSource::Png { mask } => {
            let path = fixtures.resolve(mask);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_soft_mask(&bytes)
        }
        MaskSource::Rect {
            rect: [y0, x0, y1, x1],
        } => {
            let probs = (0..height * width)
                .map(|i| {
                    let (y, x) = (i / width, i % width);
                    f64::from(u8::from((*y0..*y1).contains(&y) && (*x0..*x1).contains(&x)))
                })
                .collect();
            Ok((height, width, probs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureTag2Mask {
    pub fixtures: FixtureSet,
}

impl Tag2MaskClient for FixtureTag2Mask {
    fn name(&self) -> String {
        "fixture:tag2mask".into()
    }

    fn detect(&self, image: &ImageTensor, tag: &str) -> Result<Vec<Detection>> {
        let rec = self
            .fixtures
            .expect("tag2mask", &detect_key(image, tag), Some(tag))?;
        let recorded: RecordedDetections =
            serde_json::from_value(rec.response.clone()).map_err(|e| Error::Parse {
                what: "tag2mask fixture".into(),
                message: e.to_string(),
                raw: rec.response.to_string(),
            })?;
        let (h, w) = image.dims();
        recorded
            .detections
            .iter()
            .map(|d| {
                let (height, width, probs) = load_mask_source(&self.fixtures, &d.source, h, w)?;
                Ok(Detection {
                    score: d.score,
                    height,
                    width,
                    probs,
                })
            })
            .collect()
    }

    fn segment(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask> {
        let rec = self
            .fixtures
            .expect("segment", &segment_key(image, current, event), None)?;
        let source: MaskSource =
            serde_json::from_value(rec.response.clone()).map_err(|e| Error::Parse {
                what: "segment fixture".into(),
                message: e.to_string(),
                raw: rec.response.to_string(),
            })?;
        let (h, w) = image.dims();
        let (height, width, probs) = load_mask_source(&self.fixtures, &source, h, w)?;
        let bits = probs.iter().map(|p| u8::from(*p >= 0.5)).collect();
        BinaryMask::new(height, width, bits)
    }
}

/// HTTP localizer. `POST {endpoint}/detect` with
/// `{"image": <png b64>, "tag": ...}` answers
/// `{"detections": [{"score": s, "mask": <png b64>}]}`;
/// `POST {endpoint}/segment` with `{"image", "mask", "event"}` answers
/// `{"mask": <png b64>}`.
#[derive(Debug, Clone)]
pub struct HttpTag2Mask {
    pub endpoint: String,
    pub timeout: Duration,
}

impl HttpTag2Mask {
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{path}", self.endpoint.trim_end_matches('/'));
        let resp = http_client(self.timeout)?
            .post(url)
            .json(body)
            .send()
            .map_err(|e| transport("tag2mask", e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| transport("tag2mask", e))?;
        if !status.is_success() {
            return Err(transport("tag2mask", format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: "tag2mask".into(),
            message: e.to_string(),
            raw: text,
        })
    }
}

fn b64_png(v: &Value, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let raw = v.as_str().ok_or_else(|| Error::Parse {
        what: what.into(),
        message: "mask is not a string".into(),
        raw: v.to_string(),
    })?;
    let bytes = B64.decode(raw).map_err(|e| Error::Parse {
        what: what.into(),
        message: e.to_string(),
        raw: raw.chars().take(64).collect(),
    })?;
    decode_soft_mask(&bytes)
}

impl Tag2MaskClient for HttpTag2Mask {
    fn name(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn detect(&self, image: &ImageTensor, tag: &str) -> Result<Vec<Detection>> {
        let v = self.post(
            "detect",
            &json!({"image": B64.encode(encode_image(image)?), "tag": tag}),
        )?;
        let list = v
            .get("detections")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse {
                what: "tag2mask".into(),
                message: "missing detections array".into(),
                raw: v.to_string(),
            })?;
        list.iter()
            .map(|d| {
                let score = d.get("score").and_then(Value::as_f64).unwrap_or(0.0);
                let (height, width, probs) =
                    b64_png(d.get("mask").unwrap_or(&Value::Null), "tag2mask")?;
                Ok(Detection {
                    score,
                    height,
                    width,
                    probs,
                })
            })
            .collect()
    }

    fn segment(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask> {
        let v = self.post(
            "segment",
            &json!({
                "image": B64.encode(encode_image(image)?),
                "mask": B64.encode(encode_binary_mask(current)),
                "event": event,
            }),
        )?;
        let (h, w, probs) = b64_png(v.get("mask").unwrap_or(&Value::Null), "segment")?;
        BinaryMask::new(h, w, probs.iter().map(|p| u8::from(*p >= 0.5)).collect())
    }
}

/// Records localizer traffic. Masks are written as PNGs beside the fixture
/// file and referenced by relative path.
pub struct RecordingTag2Mask<C> {
    pub inner: C,
    pub writer: FixtureWriter,
}

impl<C> RecordingTag2Mask<C> {
    fn save_probs(&self, stem: &str, h: usize, w: usize, probs: &[f64]) -> Result<String> {
        let name = format!("{stem}.png");
        let raw: Vec<u8> = probs.iter().map(|p| crate::io::quantize(*p)).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Shape("detection mask does not match its dims".into()))?;
        let path = self.writer.dir().join(&name);
        img.save_with_format(&path, image::ImageFormat::Png)?;
        Ok(name)
    }
}

impl<C: Tag2MaskClient> Tag2MaskClient for RecordingTag2Mask<C> {
    fn name(&self) -> String {
        format!("recording:{}", self.inner.name())
    }

    fn detect(&self, image: &ImageTensor, tag: &str) -> Result<Vec<Detection>> {
        let out = self.inner.detect(image, tag)?;
        let key = detect_key(image, tag);
        let mut recorded = Vec::new();
        for (i, d) in out.iter().enumerate() {
            let mask =
                self.save_probs(&format!("{}-{i}", &key[..16]), d.height, d.width, &d.probs)?;
            recorded.push(RecordedDetection {
                score: d.score,
                source: MaskSource::Png { mask },
            });
        }
        self.writer.append(&FixtureRecord {
            kind: "tag2mask".into(),
            key,
            tag: Some(tag.to_owned()),
            response: serde_json::to_value(RecordedDetections {
                detections: recorded,
            })?,
        })?;
        Ok(out)
    }

    fn segment(
        &self,
        image: &ImageTensor,
        current: &BinaryMask,
        event: &PromptEvent,
    ) -> Result<BinaryMask> {
        let out = self.inner.segment(image, current, event)?;
        let key = segment_key(image, current, event);
        let probs: Vec<f64> = out.bits().iter().map(|b| *b as f64).collect();
        let (h, w) = out.dims();
        let mask = self.save_probs(&format!("seg-{}", &key[..16]), h, w, &probs)?;
        self.writer.append(&FixtureRecord {
            kind: "segment".into(),
            key,
            tag: None,
            response: serde_json::to_value(MaskSource::Png { mask })?,
        })?;
        Ok(out)
    }
}

/// Loads a prompt template, falling back to `default` when no path is given.
pub fn load_template(path: Option<&Path>, default: &str) -> Result<String> {
    match path {
        Some(p) => crate::io::read_text(p),
        None => Ok(default.to_owned()),
    }
}
