//! Replayable client fixtures.
//!
//! A fixture file holds one JSON object per line:
//!
//! ```text
//! {"kind":"mllm","key":"<sha256 of the request>","response":"..."}
//! {"kind":"tag2mask","key":"*","tag":"fence","response":{"detections":[]}}
//! ```
//!
//! `key` is the request digest; `"*"` matches any request of that kind.
//! Exact keys win over wildcards, earlier lines over later ones. Relative
//! paths inside responses resolve against the fixture file's directory.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::quantize;
use crate::types::{normalize_tag, BinaryMask, ImageTensor};

pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub kind: String,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub response: Value,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureSet {
    records: Vec<FixtureRecord>,
    base_dir: PathBuf,
}

impl FixtureSet {
    /// Blank lines are skipped; anything else must be a record.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line)
                .map_err(|e| Error::Invalid(format!("fixture line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    pub fn records(&self) -> &[FixtureRecord] {
        &self.records
    }

    pub fn lookup(&self, kind: &str, key: &str, tag: Option<&str>) -> Option<&FixtureRecord> {
        let tag = tag.map(normalize_tag);
        let candidates = || {
            self.records.iter().filter(|r| {
                r.kind == kind
                    && match (&tag, &r.tag) {
                        (Some(want), Some(have)) => *want == normalize_tag(have),
                        (_, None) => true,
                        (None, Some(_)) => false,
                    }
            })
        };
        candidates()
            .find(|r| r.key == key)
            .or_else(|| candidates().find(|r| r.key == WILDCARD))
    }

    /// Like [`lookup`](Self::lookup) but a miss is a transport failure, the
    /// same thing a live client would report for an unreachable model.
    pub fn expect(&self, kind: &str, key: &str, tag: Option<&str>) -> Result<&FixtureRecord> {
        self.lookup(kind, key, tag).ok_or_else(|| Error::Transport {
            client: format!("fixture:{kind}"),
            message: match tag {
                Some(t) => format!("no recorded response for key {key} tag {t:?}"),
                None => format!("no recorded response for key {key}"),
            },
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }
}

/// Append-only fixture writer, shared by recording clients.
#[derive(Debug)]
pub struct FixtureWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl FixtureWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    pub fn append(&self, record: &FixtureRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Incremental request digest. Every part is length-prefixed so adjacent
/// parts cannot run together.
#[derive(Clone, Default)]
pub struct RequestDigest(Sha256);

impl RequestDigest {
    pub fn new(kind: &str) -> Self {
        let mut d = Self(Sha256::new());
        d.bytes(kind.as_bytes());
        d
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    /// Hashes the 8-bit quantized pixels, so the key survives a PNG
    /// round-trip.
    pub fn image(&mut self, image: &ImageTensor) -> &mut Self {
        let (h, w) = image.dims();
        self.text(&format!("{h}x{w}x{}", image.channels()));
        let q: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
        self.bytes(&q)
    }

    pub fn mask(&mut self, mask: &BinaryMask) -> &mut Self {
        let (h, w) = mask.dims();
        self.text(&format!("{h}x{w}"));
        self.bytes(mask.bits())
    }

    pub fn finish(&self) -> String {
        crate::hex(&self.0.clone().finalize())
    }
}
