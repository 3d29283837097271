use std::collections::BTreeMap;

use erase_core::losses::LossBreakdown;
use erase_core::region::build_label_map;
use erase_core::segment::PromptEvent;
use erase_core::tta::{TraceStep, TtaConfig};
use erase_core::types::{normalize_tag, BinaryMask, ImageTensor, LabelMap, TagReport};
use erase_core::Result;
use serde::{Deserialize, Serialize};

use crate::error::ErrorBody;

pub const NO_BACKGROUND_WARNING: &str =
    "no background tags; sampling will be conditioned on the generic fallback token";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub png: Vec<u8>,
    pub result_sha256: String,
    pub adapter: Vec<u8>,
    pub lora_digest: String,
}

#[derive(Debug, Clone)]
pub struct Job {
    pub status: JobStatus,
    pub config: Option<TtaConfig>,
    pub steps: Vec<TraceStep>,
    pub output: Option<JobOutput>,
    pub error: Option<ErrorBody>,
}

impl Default for Job {
    fn default() -> Self {
        Self {
            status: JobStatus::Idle,
            config: None,
            steps: Vec::new(),
            output: None,
            error: None,
        }
    }
}

/// What `GET /sessions/{id}/jobs/current` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub status: JobStatus,
    pub iteration: usize,
    pub total: usize,
    pub losses: Option<LossBreakdown>,
    pub error: Option<ErrorBody>,
    pub result_sha256: Option<String>,
}

impl Job {
    pub fn view(&self) -> JobView {
        JobView {
            status: self.status,
            iteration: self.steps.len(),
            total: self.config.as_ref().map_or(0, |c| c.iterations),
            losses: self.steps.last().map(|s| s.losses),
            error: self.error.clone(),
            result_sha256: self.output.as_ref().map(|o| o.result_sha256.clone()),
        }
    }
}

/// Tags as the editor sees them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagsBody {
    pub target: String,
    #[serde(default)]
    pub non_target: Vec<String>,
    #[serde(default)]
    pub background: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagsView {
    #[serde(flatten)]
    pub tags: TagsBody,
    pub warnings: Vec<String>,
}

impl TagsBody {
    /// First tag found in more than one list, with the two lists.
    pub fn overlap(&self) -> Option<(String, &'static str, &'static str)> {
        let mut seen: BTreeMap<String, &'static str> = BTreeMap::new();
        let lists: [(&'static str, Vec<&String>); 3] = [
            ("target", vec![&self.target]),
            ("non_target", self.non_target.iter().collect()),
            ("background", self.background.iter().collect()),
        ];
        for (list, tags) in lists {
            for tag in tags {
                if let Some(prev) = seen.insert(normalize_tag(tag), list) {
                    return Some((tag.clone(), prev, list));
                }
            }
        }
        None
    }

    pub fn to_report(&self) -> TagReport {
        TagReport {
            target_tag: self.target.trim().to_owned(),
            non_target_tags: self
                .non_target
                .iter()
                .map(|t| t.trim().to_owned())
                .collect(),
            background_tags: self
                .background
                .iter()
                .map(|t| t.trim().to_owned())
                .collect(),
            raw_response: String::new(),
        }
    }

    pub fn from_report(r: &TagReport) -> Self {
        Self {
            target: r.target_tag.clone(),
            non_target: r.non_target_tags.clone(),
            background: r.background_tags.clone(),
        }
    }
}

#[derive(Debug)]
pub struct Session {
    pub image: ImageTensor,
    pub image_sha256: String,
    pub target: BinaryMask,
    pub prompts: Vec<PromptEvent>,
    pub tags: Option<TagReport>,
    /// Localized masks by normalized tag, from inference or later edits.
    pub tag_masks: BTreeMap<String, BinaryMask>,
    pub warnings: Vec<String>,
    pub job: Job,
}

impl Session {
    pub fn new(image: ImageTensor, image_sha256: String) -> Self {
        let (h, w) = image.dims();
        Self {
            image,
            image_sha256,
            target: BinaryMask::empty(h, w),
            prompts: Vec::new(),
            tags: None,
            tag_masks: BTreeMap::new(),
            warnings: Vec::new(),
            job: Job::default(),
        }
    }

    pub fn background_tags(&self) -> Vec<String> {
        self.tags
            .as_ref()
            .map(|t| t.background_tags.clone())
            .unwrap_or_default()
    }

    /// Target from the mask; non-target from the localized masks of the
    /// current non-target tags.
    pub fn label_map(&self) -> Result<LabelMap> {
        let (h, w) = self.image.dims();
        let mut non_target = BinaryMask::empty(h, w);
        for tag in self.tags.iter().flat_map(|t| &t.non_target_tags) {
            if let Some(m) = self.tag_masks.get(&normalize_tag(tag)) {
                non_target = non_target.union(m)?;
            }
        }
        build_label_map(&self.target, &non_target.minus(&self.target)?)
    }

    pub fn tags_view(&self) -> Option<TagsView> {
        self.tags.as_ref().map(|t| TagsView {
            tags: TagsBody::from_report(t),
            warnings: self.warnings.clone(),
        })
    }
}
