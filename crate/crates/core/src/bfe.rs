//! Background-aware foreground exclusion: ask a vision-language model which
//! tags are the target, which are distracting foreground objects and which
//! describe the background behind the target; localize them; build the
//! three-label map.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{mask_as_image, Tag2MaskClient, VisionLanguageClient};
use crate::error::{Error, Result};
use crate::region::build_label_map;
use crate::types::{normalize_tag, BinaryMask, ImageTensor, LabelMap, TagReport};

pub const DEFAULT_PROMPT: &str = include_str!("../assets/bfe_prompt.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfeConfig {
    /// Detections scoring below this are dropped.
    pub box_threshold: f64,
    /// Per-pixel probability at which a detection mask is on.
    pub mask_threshold: f64,
    pub prompt: String,
}

impl Default for BfeConfig {
    fn default() -> Self {
        Self {
            box_threshold: 0.3,
            mask_threshold: 0.5,
            prompt: DEFAULT_PROMPT.to_owned(),
        }
    }
}

impl BfeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("box_threshold", self.box_threshold),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} {v} outside (0,1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagRole {
    Target,
    NonTarget,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Localized,
    /// A foreground tag with no surviving detection; ignored.
    Discarded,
    /// A background tag with no detection; kept as a conditioning cue.
    OccludedKept,
}

/// One client call, or one final tag decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub client: String,
    pub call: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<TagRole>,
    pub attempt: usize,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disposition: Option<Disposition>,
}

impl AuditRecord {
    fn call(client: String, call: &str, attempt: usize, outcome: impl Into<String>) -> Self {
        Self {
            client,
            call: call.to_owned(),
            tag: None,
            role: None,
            attempt,
            outcome: outcome.into(),
            detections: None,
            area: None,
            disposition: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagResponse {
    target: String,
    #[serde(default)]
    non_target: Vec<String>,
    #[serde(default)]
    background: Vec<String>,
}

/// The outermost `{...}` span, so fenced or chatty answers still parse.
fn json_span(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

/// Parses a tag-classification answer and checks the disjointness rules.
pub fn parse_tag_response(raw: &str) -> Result<TagReport> {
    let parse_err = |message: String| Error::Parse {
        what: "tag classification".into(),
        message,
        raw: raw.to_owned(),
    };
    let span = json_span(raw).ok_or_else(|| parse_err("no JSON object in response".into()))?;
    let r: TagResponse = serde_json::from_str(span).map_err(|e| parse_err(e.to_string()))?;
    let clean = |v: Vec<String>| v.into_iter().map(|t| t.trim().to_owned()).collect();
    let report = TagReport {
        target_tag: r.target.trim().to_owned(),
        non_target_tags: clean(r.non_target),
        background_tags: clean(r.background),
        raw_response: raw.to_owned(),
    };
    report.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(report)
}

/// Queries the model once, and once more if the first answer does not
/// parse. Transport failures are returned as-is.
pub fn classify_tags(
    client: &dyn VisionLanguageClient,
    prompt: &str,
    image: &ImageTensor,
    target_mask: &BinaryMask,
    audit: &mut Vec<AuditRecord>,
) -> Result<TagReport> {
    if image.dims() != target_mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and target mask {:?} differ",
            image.dims(),
            target_mask.dims()
        )));
    }
    let images = [image.clone(), mask_as_image(target_mask)?];
    let mut last = None;
    for attempt in 1..=2 {
        let raw = match client.complete(prompt, &images) {
            Ok(raw) => raw,
            Err(e) => {
                audit.push(AuditRecord::call(
                    client.name(),
                    "classify",
                    attempt,
                    e.to_string(),
                ));
                return Err(e);
            }
        };
        match parse_tag_response(&raw) {
            Ok(report) => {
                audit.push(AuditRecord::call(client.name(), "classify", attempt, "ok"));
                return Ok(report);
            }
            Err(e) => {
                log::warn!("tag classification attempt {attempt} unparseable: {e}");
                audit.push(AuditRecord::call(
                    client.name(),
                    "classify",
                    attempt,
                    e.to_string(),
                ));
                last = Some(e);
            }
        }
    }
    Err(last.expect("two attempts were made"))
}

/// Per-tag union of detections above the thresholds. Tags are queried in
/// parallel; results keep the input order.
pub fn localize_tags(
    client: &dyn Tag2MaskClient,
    image: &ImageTensor,
    tags: &[(String, TagRole)],
    config: &BfeConfig,
) -> Result<Vec<(BinaryMask, AuditRecord)>> {
    let (h, w) = image.dims();
    tags.par_iter()
        .map(|(tag, role)| {
            let detections = client.detect(image, tag)?;
            let mut mask = BinaryMask::empty(h, w);
            let mut kept = 0;
            for d in &detections {
                if d.score < config.box_threshold {
                    continue;
                }
                let m = d.threshold(config.mask_threshold)?;
                if m.dims() != (h, w) {
                    return Err(Error::Shape(format!(
                        "detection for {tag:?} is {:?}, image is {:?}",
                        m.dims(),
                        (h, w)
                    )));
                }
                mask = mask.union(&m)?;
                kept += 1;
            }
            let disposition = match (mask.is_empty(), role) {
                (false, _) => Disposition::Localized,
                (true, TagRole::Background) => Disposition::OccludedKept,
                (true, _) => Disposition::Discarded,
            };
            let record = AuditRecord {
                client: client.name(),
                call: "localize".into(),
                tag: Some(tag.clone()),
                role: Some(*role),
                attempt: 1,
                outcome: format!("{} detections, {kept} above threshold", detections.len()),
                detections: Some(kept),
                area: Some(mask.area()),
                disposition: Some(disposition),
            };
            Ok((mask, record))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfeResult {
    pub tag_report: TagReport,
    pub label_map: LabelMap,
    /// Target tag to the input mask; every other tag to its localized
    /// union (empty when nothing was found).
    pub per_tag_masks: BTreeMap<String, BinaryMask>,
    pub audit_log: Vec<AuditRecord>,
    pub warnings: Vec<String>,
}

/// Runs the whole stage.
pub fn run_bfe(
    mllm: &dyn VisionLanguageClient,
    t2m: &dyn Tag2MaskClient,
    config: &BfeConfig,
    image: &ImageTensor,
    target_mask: &BinaryMask,
) -> Result<BfeResult> {
    config.validate()?;
    if target_mask.is_empty() {
        return Err(Error::Invalid("target mask is empty".into()));
    }
    let mut audit = Vec::new();
    let report = classify_tags(mllm, &config.prompt, image, target_mask, &mut audit)?;

    let mut queries: Vec<(String, TagRole)> = report
        .non_target_tags
        .iter()
        .map(|t| (t.clone(), TagRole::NonTarget))
        .collect();
    queries.extend(
        report
            .background_tags
            .iter()
            .map(|t| (t.clone(), TagRole::Background)),
    );
    let localized = if queries.is_empty() {
        Vec::new()
    } else {
        localize_tags(t2m, image, &queries, config)?
    };

    let mut per_tag_masks = BTreeMap::new();
    per_tag_masks.insert(report.target_tag.clone(), target_mask.clone());
    audit.push(AuditRecord {
        client: "input".into(),
        call: "target_mask".into(),
        tag: Some(report.target_tag.clone()),
        role: Some(TagRole::Target),
        attempt: 1,
        outcome: "given".into(),
        detections: None,
        area: Some(target_mask.area()),
        disposition: Some(Disposition::Localized),
    });
    let (h, w) = image.dims();
    let mut non_target = BinaryMask::empty(h, w);
    for ((tag, role), (mask, record)) in queries.iter().zip(localized) {
        if *role == TagRole::NonTarget {
            non_target = non_target.union(&mask)?;
        }
        per_tag_masks.insert(tag.clone(), mask);
        audit.push(record);
    }
    let label_map = build_label_map(target_mask, &non_target.minus(target_mask)?)?;

    let mut warnings = Vec::new();
    if report.background_tags.is_empty() {
        warnings.push("no background tags; the puzzle loss will be skipped".to_owned());
    }
    let discarded: Vec<&str> = audit
        .iter()
        .filter(|r| r.disposition == Some(Disposition::Discarded))
        .filter_map(|r| r.tag.as_deref())
        .collect();
    if !discarded.is_empty() {
        log::info!("discarded unlocalized foreground tags: {discarded:?}");
    }
    Ok(BfeResult {
        tag_report: report,
        label_map,
        per_tag_masks,
        audit_log: audit,
        warnings,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackedMask {
    height: usize,
    width: usize,
    /// Base64 of one byte per pixel.
    data: String,
}

impl PackedMask {
    fn pack(height: usize, width: usize, raw: &[u8]) -> Self {
        Self {
            height,
            width,
            data: B64.encode(raw),
        }
    }

    fn unpack(&self) -> Result<Vec<u8>> {
        B64.decode(&self.data)
            .map_err(|e| Error::Invalid(format!("mask payload: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackedResult {
    tag_report: TagReport,
    label_map: PackedMask,
    per_tag_masks: BTreeMap<String, PackedMask>,
    audit_log: Vec<AuditRecord>,
    warnings: Vec<String>,
}

impl BfeResult {
    /// Pretty JSON with masks as base64 byte-per-pixel payloads. Identical
    /// results serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let (h, w) = self.label_map.dims();
        let packed = PackedResult {
            tag_report: self.tag_report.clone(),
            label_map: PackedMask::pack(h, w, &self.label_map.to_raw()),
            per_tag_masks: self
                .per_tag_masks
                .iter()
                .map(|(k, m)| (k.clone(), PackedMask::pack(m.height(), m.width(), m.bits())))
                .collect(),
            audit_log: self.audit_log.clone(),
            warnings: self.warnings.clone(),
        };
        let mut s = serde_json::to_string_pretty(&packed).expect("bfe result serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: PackedResult = serde_json::from_str(text)?;
        let label_map = LabelMap::from_raw(
            p.label_map.height,
            p.label_map.width,
            &p.label_map.unpack()?,
        )?;
        let per_tag_masks = p
            .per_tag_masks
            .iter()
            .map(|(k, m)| Ok((k.clone(), BinaryMask::new(m.height, m.width, m.unpack()?)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        p.tag_report.validate()?;
        Ok(Self {
            tag_report: p.tag_report,
            label_map,
            per_tag_masks,
            audit_log: p.audit_log,
            warnings: p.warnings,
        })
    }

    /// Background tags as conditioning text.
    pub fn background_tags(&self) -> &[String] {
        &self.tag_report.background_tags
    }

    /// Recomputes the label map from the stored masks.
    pub fn check_consistency(&self) -> Result<()> {
        let target = self
            .per_tag_masks
            .get(&self.tag_report.target_tag)
            .ok_or_else(|| Error::Invalid("no mask stored for the target tag".into()))?;
        let mut non_target = BinaryMask::empty(target.height(), target.width());
        for tag in &self.tag_report.non_target_tags {
            if let Some(m) = self.per_tag_masks.get(tag) {
                non_target = non_target.union(m)?;
            }
        }
        if build_label_map(target, &non_target)? != self.label_map {
            return Err(Error::Invalid(
                "label map disagrees with the per-tag masks".into(),
            ));
        }
        Ok(())
    }

    /// Tags in the report, normalized, each with its final disposition.
    pub fn dispositions(&self) -> Vec<(String, Disposition)> {
        self.audit_log
            .iter()
            .filter_map(|r| Some((normalize_tag(r.tag.as_ref()?), r.disposition?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fenced_answer() {
        let raw = "```json\n{\"target\":\"Dog\",\"non_target\":[\"person\"],\"background\":[\"grass\",\"fence\"]}\n```";
        let r = parse_tag_response(raw).unwrap();
        assert_eq!(r.target_tag, "Dog");
        assert_eq!(r.background_tags, vec!["grass", "fence"]);
        assert_eq!(r.raw_response, raw);
    }

    #[test]
    fn overlapping_lists_are_a_parse_error() {
        let raw = r#"{"target":"dog","non_target":["Grass"],"background":["grass"]}"#;
        match parse_tag_response(raw).unwrap_err() {
            Error::Parse { raw: r, .. } => assert_eq!(r, raw),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            parse_tag_response("I cannot help with that").unwrap_err(),
            Error::Parse { .. }
        ));
        assert!(parse_tag_response(r#"{"target":""}"#).is_err());
        assert!(parse_tag_response(r#"{"target":"a","extra":1}"#).is_err());
    }

    #[test]
    fn default_thresholds() {
        let c = BfeConfig::default();
        assert_eq!((c.box_threshold, c.mask_threshold), (0.3, 0.5));
        assert!(c.prompt.contains("\"non_target\""));
    }
}
