//! Dataset ingestion and resumable experiment sweeps.
//!
//! A manifest is a JSON-lines file, one sample per line:
//!
//! ```text
//! {"sample_id": "a", "image": "a.png", "label_mask": "a_labels.png"}
//! ```
//!
//! Optional keys are `result` (a removal output to evaluate),
//! `ground_truth` (paired reference) and `background_tags`. Relative paths
//! are resolved against the manifest's directory.
//!
//! An experiment writes one directory per cell under `cells/`, named by a
//! digest of everything that determines the cell's output. A cell whose
//! `cell.json` already exists is skipped, so an interrupted sweep resumes
//! where it stopped.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate_sample, MetricsReport, MetricsRow, ToyExtractor};
use crate::pipeline::{run_removal, run_removal_unmerged};
use crate::scene::generate_scene;
use crate::tta::{TtaConfig, TtaTrace};
use crate::types::{ImageTensor, LabelMap};

/// Learning rate for toy-backbone runs. The default suits large backbones;
/// the toy model needs a larger step to fit within 500 iterations.
pub const TOY_LEARNING_RATE: f64 = 1e-2;

pub const SWEEP_RANKS: [usize; 4] = [16, 32, 64, 128];
pub const SWEEP_ITERATIONS: [usize; 5] = [100, 200, 300, 400, 500];

/// Default configuration with the toy learning rate.
pub fn toy_config() -> TtaConfig {
    TtaConfig {
        learning_rate: TOY_LEARNING_RATE,
        ..TtaConfig::default()
    }
}

/// Default configuration for `backbone`.
pub fn default_config(backbone: &BackboneSpec) -> TtaConfig {
    match backbone {
        BackboneSpec::Toy { .. } => toy_config(),
        BackboneSpec::Shim { .. } => TtaConfig::default(),
    }
}

/// One manifest line as written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub sample_id: String,
    pub image: String,
    pub label_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub background_tags: Vec<String>,
}

pub fn parse_manifest_line(line: &str) -> Result<ManifestLine> {
    let parsed: ManifestLine = serde_json::from_str(line)?;
    if parsed.sample_id.trim().is_empty() {
        return Err(Error::Invalid("empty sample_id".into()));
    }
    if parsed.image.is_empty() || parsed.label_mask.is_empty() {
        return Err(Error::Invalid(format!("{}: empty path", parsed.sample_id)));
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifestEntry {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub label_mask_path: PathBuf,
    #[serde(default)]
    pub result_path: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth_path: Option<PathBuf>,
    #[serde(default)]
    pub background_tags: Vec<String>,
}

/// Validates every line of a manifest. Image, label mask and ground truth
/// must exist and decode, label values must lie in {0,1,2} and shapes must
/// agree. `result` paths are only resolved, since a missing output is a
/// reportable condition rather than a malformed manifest.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<SampleManifestEntry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::Invalid(format!("manifest line {}: {e}", n + 1));
        let raw = parse_manifest_line(line).map_err(at)?;
        if !seen.insert(raw.sample_id.clone()) {
            return Err(at(Error::Invalid(format!(
                "duplicate sample_id {:?}",
                raw.sample_id
            ))));
        }
        let entry = SampleManifestEntry {
            image_path: base_dir.join(&raw.image),
            label_mask_path: base_dir.join(&raw.label_mask),
            result_path: raw.result.as_ref().map(|p| base_dir.join(p)),
            ground_truth_path: raw.ground_truth.as_ref().map(|p| base_dir.join(p)),
            background_tags: raw.background_tags,
            sample_id: raw.sample_id,
        };
        let image = io::read_image(&entry.image_path).map_err(at)?;
        let labels = io::read_label_mask(&entry.label_mask_path).map_err(at)?;
        if labels.dims() != image.dims() {
            return Err(at(Error::Shape(format!(
                "label mask {:?} does not match image {:?}",
                labels.dims(),
                image.dims()
            ))));
        }
        if let Some(gt) = &entry.ground_truth_path {
            if io::read_image(gt).map_err(at)?.dims() != image.dims() {
                return Err(at(Error::Shape("ground truth does not match image".into())));
            }
        }
        out.push(entry);
    }
    Ok(out)
}

/// Reads and validates a manifest file; entries come back in file order.
pub fn ingest_manifest(path: &Path) -> Result<Vec<SampleManifestEntry>> {
    let text = io::read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Samples a cell runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSet {
    Synthetic { seeds: Vec<u64> },
    Manifest { entries: Vec<SampleManifestEntry> },
}

/// A fully loaded sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub background_tags: Vec<String>,
    pub ground_truth: Option<ImageTensor>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        match self {
            SampleSet::Synthetic { seeds } => seeds.len(),
            SampleSet::Manifest { entries } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self) -> Result<Vec<Sample>> {
        match self {
            SampleSet::Synthetic { seeds } => seeds
                .iter()
                .map(|&seed| {
                    let s = generate_scene(seed)?;
                    Ok(Sample {
                        id: format!("scene-{seed}"),
                        background_tags: s.background_tags(),
                        image: s.image,
                        labels: s.labels,
                        ground_truth: Some(s.ground_truth),
                    })
                })
                .collect(),
            SampleSet::Manifest { entries } => entries
                .iter()
                .map(|e| {
                    Ok(Sample {
                        id: e.sample_id.clone(),
                        image: io::read_image(&e.image_path)?,
                        labels: io::read_label_mask(&e.label_mask_path)?,
                        background_tags: e.background_tags.clone(),
                        ground_truth: e
                            .ground_truth_path
                            .as_deref()
                            .map(io::read_image)
                            .transpose()?,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCell {
    pub config: TtaConfig,
    pub samples: SampleSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub backbone: BackboneSpec,
    /// Seed of the toy feature extractor used for the unpaired metrics.
    pub feature_seed: u64,
    pub cells: Vec<PlanCell>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl ExperimentPlan {
    /// Rank x iteration grid over one sample set, ranks outermost.
    pub fn sweep(
        backbone: BackboneSpec,
        base: &TtaConfig,
        ranks: &[usize],
        iterations: &[usize],
        samples: SampleSet,
        out_dir: PathBuf,
    ) -> Self {
        let cells = ranks
            .iter()
            .flat_map(|&rank| iterations.iter().map(move |&iterations| (rank, iterations)))
            .map(|(rank, iterations)| PlanCell {
                config: TtaConfig {
                    rank,
                    iterations,
                    ..base.clone()
                },
                samples: samples.clone(),
            })
            .collect();
        Self {
            backbone,
            feature_seed: 0,
            cells,
            out_dir,
            workers: 0,
        }
    }

    pub fn cell_digest(&self, cell: &PlanCell) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            backbone: &'a BackboneSpec,
            feature_seed: u64,
            cell: &'a PlanCell,
        }
        let key = serde_json::to_vec(&Key {
            backbone: &self.backbone,
            feature_seed: self.feature_seed,
            cell,
        })
        .expect("plan cells serialize");
        crate::hex(&Sha256::digest(&key)[..8])
    }

    pub fn cell_dir(&self, cell: &PlanCell) -> PathBuf {
        self.out_dir.join("cells").join(self.cell_digest(cell))
    }
}

/// What `cell.json` records once a cell is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub digest: String,
    pub backbone: BackboneSpec,
    pub config: TtaConfig,
    pub samples: Vec<String>,
    pub aggregate: MetricsRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub record: CellRecord,
    /// True when the cell was already complete on disk.
    pub skipped: bool,
}

pub const SUMMARY_HEADER: &str =
    "cell,rank,iterations,lambda,BG Sim.,FG Sim.,BG Pres.,SSIM,PSNR,status";

/// File-name-safe version of a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn run_cell(plan: &ExperimentPlan, cell: &PlanCell) -> Result<CellOutcome> {
    let digest = plan.cell_digest(cell);
    let dir = plan.cell_dir(cell);
    let marker = dir.join("cell.json");
    if marker.is_file() {
        let record: CellRecord = serde_json::from_str(&io::read_text(&marker)?)?;
        if record.digest == digest {
            log::info!("cell {digest} already complete");
            return Ok(CellOutcome {
                record,
                skipped: true,
            });
        }
    }
    log::info!(
        "cell {digest}: rank {} iterations {}",
        cell.config.rank,
        cell.config.iterations
    );
    let extractor = ToyExtractor::new(plan.feature_seed);
    let samples = cell.samples.load()?;
    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let (h, w) = sample.image.dims();
        let mut backbone = plan.backbone.instantiate(h, w)?;
        let result = if plan.backbone.is_shared() {
            run_removal_unmerged(
                backbone.as_ref(),
                &sample.image,
                &sample.labels,
                &sample.background_tags,
                &cell.config,
                None,
                &mut |_| {},
            )
        } else {
            run_removal(
                backbone.as_mut(),
                &sample.image,
                &sample.labels,
                &sample.background_tags,
                &cell.config,
                None,
                &mut |_| {},
            )
        };
        let stem = file_stem(&sample.id);
        let row = match result {
            Ok(out) => {
                io::write_image(&dir.join(format!("{stem}.png")), &out.image)?;
                let trace: &TtaTrace = out.trace.as_ref().expect("fresh runs carry a trace");
                io::write_bytes(
                    &dir.join(format!("trace-{stem}.jsonl")),
                    trace.to_jsonl().as_bytes(),
                )?;
                evaluate_sample(
                    &sample.id,
                    &extractor,
                    &sample.image,
                    &out.image,
                    &sample.labels,
                    sample.ground_truth.as_ref(),
                    None,
                )?
            }
            Err(e @ (Error::NonFinite { .. } | Error::Degenerate(_))) => MetricsRow {
                sample_id: sample.id.clone(),
                status: format!("failed: {e}"),
                ..MetricsRow::default()
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let report = MetricsReport { rows };
    io::write_bytes(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    io::write_bytes(&dir.join("metrics.json"), report.to_json().as_bytes())?;
    let record = CellRecord {
        digest,
        backbone: plan.backbone.clone(),
        config: cell.config.clone(),
        samples: samples.iter().map(|s| s.id.clone()).collect(),
        aggregate: report.aggregate(),
    };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    io::write_bytes(&marker, json.as_bytes())?;
    Ok(CellOutcome {
        record,
        skipped: false,
    })
}

fn summary_csv(outcomes: &[CellOutcome]) -> String {
    let num = |v: Option<f64>| match v {
        None => String::new(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.6}"),
    };
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for o in outcomes {
        let (r, a) = (&o.record, &o.record.aggregate);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.digest,
            r.config.rank,
            r.config.iterations,
            r.config.lambda,
            num(a.bg_sim),
            num(a.fg_sim),
            num(a.bg_pres),
            num(a.ssim),
            num(a.psnr),
            a.status
        ));
    }
    out
}

/// Runs every incomplete cell on a worker pool, then writes `summary.csv`
/// covering all cells in plan order.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<CellOutcome>> {
    for cell in &plan.cells {
        cell.config.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    let outcomes = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|cell| run_cell(plan, cell))
            .collect::<Result<Vec<_>>>()
    })?;
    io::write_bytes(
        &plan.out_dir.join("summary.csv"),
        summary_csv(&outcomes).as_bytes(),
    )?;
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_line_contract() {
        let l = parse_manifest_line(r#"{"sample_id":"a","image":"a.png","label_mask":"m.png"}"#)
            .unwrap();
        assert_eq!(l.result, None);
        assert!(parse_manifest_line(r#"{"sample_id":"","image":"a","label_mask":"m"}"#).is_err());
        assert!(
            parse_manifest_line(r#"{"sample_id":"a","image":"a","label_mask":"m","x":1}"#).is_err()
        );
        assert!(parse_manifest_line("not json").is_err());
    }

    #[test]
    fn sweep_grid_and_distinct_digests() {
        let plan = ExperimentPlan::sweep(
            BackboneSpec::default(),
            &toy_config(),
            &[16, 32],
            &[100, 200],
            SampleSet::Synthetic { seeds: vec![0] },
            PathBuf::from("out"),
        );
        assert_eq!(plan.cells.len(), 4);
        let digests: BTreeSet<_> = plan.cells.iter().map(|c| plan.cell_digest(c)).collect();
        assert_eq!(digests.len(), 4);
        assert_eq!(plan.cells[1].config.rank, 16);
        assert_eq!(plan.cells[1].config.iterations, 200);
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("a/b c.png"), "a_b_c.png");
    }
}
