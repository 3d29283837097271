use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use erase_core::backbone::BackboneSpec;
use erase_core::bfe::{run_bfe, BfeConfig, BfeResult, DEFAULT_PROMPT};
use erase_core::clients::{
    load_template, FixtureTag2Mask, FixtureVisionClient, HttpTag2Mask, HttpVisionClient,
    RecordingTag2Mask, RecordingVisionClient, Tag2MaskClient, VisionLanguageClient,
};
use erase_core::fixtures::{FixtureSet, FixtureWriter};
use erase_core::harness::{
    default_config, ingest_manifest, run_experiment, ExperimentPlan, SampleSet, SWEEP_ITERATIONS,
    SWEEP_RANKS,
};
use erase_core::lora::LoraState;
use erase_core::metrics::{
    aggregate_verdicts, evaluate_sample, judge_metric, MetricsReport, MetricsRow, ToyExtractor,
    Verdict, JUDGE_PROMPT,
};
use erase_core::pipeline::{run_removal, run_removal_unmerged};
use erase_core::scene::generate_scene;
use erase_core::segment::LocalSegmenter;
use erase_core::tta::{Objective, TraceStep, TtaConfig};
use erase_core::{hex, io, Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::{
    BfeArgs, ClientArgs, EvalArgs, RunArgs, SceneArgs, ServeArgs, SweepArgs, TuneArgs,
};

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    io::write_bytes(path, s.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_fixtures(args: &ClientArgs) -> Result<Option<FixtureSet>> {
    args.fixtures.as_deref().map(FixtureSet::load).transpose()
}

fn recorder(args: &ClientArgs) -> Result<Option<FixtureWriter>> {
    args.record
        .as_deref()
        .map(FixtureWriter::create)
        .transpose()
}

/// Completion client of `kind` (`mllm` or `judge`).
fn vision_client(args: &ClientArgs, kind: &str) -> Result<Arc<dyn VisionLanguageClient>> {
    if let Some(fixtures) = load_fixtures(args)? {
        return Ok(Arc::new(FixtureVisionClient {
            kind: kind.into(),
            fixtures,
        }));
    }
    let Some(endpoint) = &args.mllm_endpoint else {
        return Err(Error::Invalid(
            "no vision-language client: pass --fixtures or --mllm-endpoint".into(),
        ));
    };
    let inner = HttpVisionClient {
        endpoint: endpoint.clone(),
        model: args.mllm_model.clone(),
        api_key_env: Some(args.api_key_env.clone()),
        timeout: Duration::from_secs(args.timeout_secs),
    };
    Ok(match recorder(args)? {
        Some(writer) => Arc::new(RecordingVisionClient {
            kind: kind.into(),
            inner,
            writer,
        }),
        None => Arc::new(inner),
    })
}

fn tag2mask_client(args: &ClientArgs) -> Result<Option<Arc<dyn Tag2MaskClient>>> {
    if let Some(fixtures) = load_fixtures(args)? {
        return Ok(Some(Arc::new(FixtureTag2Mask { fixtures })));
    }
    let Some(endpoint) = &args.tag2mask_endpoint else {
        return Ok(None);
    };
    let inner = HttpTag2Mask {
        endpoint: endpoint.clone(),
        timeout: Duration::from_secs(args.timeout_secs),
    };
    Ok(Some(match recorder(args)? {
        Some(writer) => Arc::new(RecordingTag2Mask { inner, writer }),
        None => Arc::new(inner),
    }))
}

pub fn scene(args: SceneArgs) -> Result<()> {
    create_dir(&args.out)?;
    generate_scene(args.seed)?.write_to(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

pub fn bfe(args: BfeArgs) -> Result<()> {
    let image = io::read_image(&args.image)?;
    let target = io::read_binary_mask(&args.mask)?;
    if target.height() != image.height() || target.width() != image.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            target.width(),
            target.height(),
            image.width(),
            image.height()
        )));
    }
    let mut config = BfeConfig {
        prompt: load_template(args.prompt.as_deref(), DEFAULT_PROMPT)?,
        ..BfeConfig::default()
    };
    if let Some(v) = args.box_threshold {
        config.box_threshold = v;
    }
    if let Some(v) = args.mask_threshold {
        config.mask_threshold = v;
    }
    let mllm = vision_client(&args.clients, "mllm")?;
    let t2m = tag2mask_client(&args.clients)?.ok_or_else(|| {
        Error::Invalid("no tag-to-mask client: pass --fixtures or --tag2mask-endpoint".into())
    })?;
    let result = run_bfe(mllm.as_ref(), t2m.as_ref(), &config, &image, &target)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    create_dir(&args.out)?;
    io::write_bytes(&args.out.join("bfe.json"), result.to_json().as_bytes())?;
    io::write_label_mask(&args.out.join("labels.png"), &result.label_map)?;
    let r = &result.tag_report;
    println!("target: {}", r.target_tag);
    println!("non-target: {}", r.non_target_tags.join(", "));
    println!("background: {}", r.background_tags.join(", "));
    Ok(())
}

/// Backbone defaults, then the config file, then flags.
pub fn resolve_config(tune: &TuneArgs) -> Result<TtaConfig> {
    let mut config = default_config(&tune.backbone);
    if let Some(path) = &tune.config {
        config = config.overlay(&io::read_text(path)?)?;
    }
    if let Some(v) = tune.seed {
        config.seed = v;
    }
    if let Some(v) = tune.rank {
        config.rank = v;
    }
    if let Some(v) = tune.iters {
        config.iterations = v;
    }
    if let Some(v) = tune.lambda {
        config.lambda = v;
    }
    if let Some(v) = tune.tau {
        config.tau = v;
    }
    if let Some(v) = tune.strength {
        config.strength = v;
    }
    if let Some(v) = tune.lr {
        config.learning_rate = v;
    }
    if let Some(v) = tune.steps {
        config.sampling_steps = v;
    }
    if tune.recon_only {
        config.objective = Objective::ReconOnly;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    backbone: &'a BackboneSpec,
    config: &'a TtaConfig,
    image_sha256: String,
    labels_sha256: String,
    background_tags: &'a [String],
    reused_adapter: bool,
    lora_digest: String,
    result_sha256: String,
}

fn progress(total: usize) -> impl FnMut(&TraceStep) {
    move |s: &TraceStep| {
        let done = s.iteration + 1;
        if done == total || done.is_multiple_of(50) {
            log::info!("iteration {done}/{total}: loss {:.6}", s.losses.l_total);
        }
    }
}

pub fn run(args: RunArgs) -> Result<()> {
    let config = resolve_config(&args.tune)?;
    let image = io::read_image(&args.image)?;
    let (labels, mut tags) = match (&args.mask, &args.bfe) {
        (Some(mask), _) => (io::read_label_mask(mask)?, Vec::new()),
        (None, Some(bfe)) => {
            let r = BfeResult::from_json(&io::read_text(bfe)?)?;
            let tags = r.background_tags().to_vec();
            (r.label_map, tags)
        }
        (None, None) => return Err(Error::Invalid("pass --mask or --bfe".into())),
    };
    if let Some(t) = &args.tags {
        tags = t
            .iter()
            .map(|s| s.trim().to_owned())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if labels.dims() != image.dims() {
        return Err(Error::Shape(format!(
            "label mask {:?} does not match image {:?}",
            labels.dims(),
            image.dims()
        )));
    }
    let reuse = args
        .reuse_adapter
        .as_deref()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            LoraState::from_archive(&bytes)
        })
        .transpose()?;
    let reused = reuse.is_some();

    let (h, w) = image.dims();
    let mut backbone = args.tune.backbone.instantiate(h, w)?;
    let mut observe = progress(config.iterations);
    let out = if args.tune.backbone.is_shared() {
        run_removal_unmerged(
            backbone.as_ref(),
            &image,
            &labels,
            &tags,
            &config,
            reuse,
            &mut observe,
        )?
    } else {
        run_removal(
            backbone.as_mut(),
            &image,
            &labels,
            &tags,
            &config,
            reuse,
            &mut observe,
        )?
    };

    create_dir(&args.out)?;
    let png = io::encode_image(&out.image)?;
    io::write_bytes(&args.out.join("result.png"), &png)?;
    io::write_bytes(&args.out.join("adapter.elra"), &out.lora.to_archive())?;
    if let Some(trace) = &out.trace {
        io::write_bytes(&args.out.join("trace.jsonl"), trace.to_jsonl().as_bytes())?;
    }
    let record = RunRecord {
        backbone: &args.tune.backbone,
        config: &config,
        image_sha256: sha256(&io::encode_image(&image)?),
        labels_sha256: sha256(&io::encode_label_mask(&labels)),
        background_tags: &tags,
        reused_adapter: reused,
        lora_digest: out.lora.digest(),
        result_sha256: sha256(&png),
    };
    write_json(&args.out.join("run.json"), &record)?;
    println!("{}", args.out.join("result.png").display());
    Ok(())
}

#[derive(Serialize)]
struct JudgeRow {
    sample_id: String,
    #[serde(flatten)]
    verdict: Verdict,
}

#[derive(Serialize)]
struct JudgeReport {
    rows: Vec<JudgeRow>,
    success_rate: Option<f64>,
    mean_score: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let entries = ingest_manifest(&args.manifest)?;
    let extractor = ToyExtractor::new(args.seed);
    let judge = if args.judge {
        Some(vision_client(&args.clients, "judge")?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(entries.len());
    let mut verdicts = Vec::new();
    let mut absent = 0;
    for e in &entries {
        let pred_path = match (&e.result_path, &args.pred) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(format!("{}.png", e.sample_id)),
            (None, None) => {
                return Err(Error::Invalid(format!(
                    "{}: no result path in the manifest and no --pred directory",
                    e.sample_id
                )))
            }
        };
        if !pred_path.is_file() {
            log::warn!(
                "{}: prediction {} is missing",
                e.sample_id,
                pred_path.display()
            );
            absent += 1;
            rows.push(MetricsRow {
                sample_id: e.sample_id.clone(),
                status: "absent".into(),
                ..MetricsRow::default()
            });
            continue;
        }
        let input = io::read_image(&e.image_path)?;
        let output = io::read_image(&pred_path)?;
        let labels = io::read_label_mask(&e.label_mask_path)?;
        let gt = e
            .ground_truth_path
            .as_deref()
            .map(io::read_image)
            .transpose()?;
        rows.push(evaluate_sample(
            &e.sample_id,
            &extractor,
            &input,
            &output,
            &labels,
            gt.as_ref(),
            None,
        )?);
        if let Some(judge) = &judge {
            let verdict = judge_metric(
                judge.as_ref(),
                JUDGE_PROMPT,
                &input,
                &output,
                &args.judge_target,
            )?;
            verdicts.push(JudgeRow {
                sample_id: e.sample_id.clone(),
                verdict,
            });
        }
    }
    let report = MetricsReport { rows };
    create_dir(&args.out)?;
    io::write_bytes(&args.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    io::write_bytes(&args.out.join("metrics.json"), report.to_json().as_bytes())?;
    if judge.is_some() {
        let plain: Vec<Verdict> = verdicts.iter().map(|r| r.verdict).collect();
        let agg = aggregate_verdicts(&plain);
        write_json(
            &args.out.join("judge.json"),
            &JudgeReport {
                rows: verdicts,
                success_rate: agg.map(|a| a.0),
                mean_score: agg.map(|a| a.1),
            },
        )?;
    }
    print!("{}", report.to_csv());
    if absent > 0 {
        return Err(Error::Invalid(format!(
            "{absent} of {} predictions are missing",
            entries.len()
        )));
    }
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let base = resolve_config(&args.tune)?;
    let samples = match &args.manifest {
        Some(m) => SampleSet::Manifest {
            entries: ingest_manifest(m)?,
        },
        None => SampleSet::Synthetic {
            seeds: args.scenes.clone(),
        },
    };
    let ranks = args
        .ranks
        .clone()
        .or(args.tune.rank.map(|r| vec![r]))
        .unwrap_or_else(|| SWEEP_RANKS.to_vec());
    let iterations = args
        .iteration_grid
        .clone()
        .or(args.tune.iters.map(|i| vec![i]))
        .unwrap_or_else(|| SWEEP_ITERATIONS.to_vec());
    let mut plan = ExperimentPlan::sweep(
        args.tune.backbone.clone(),
        &base,
        &ranks,
        &iterations,
        samples,
        args.out.clone(),
    );
    plan.feature_seed = args.feature_seed;
    plan.workers = args.workers.unwrap_or(0);
    let outcomes = run_experiment(&plan)?;
    let skipped = outcomes.iter().filter(|o| o.skipped).count();
    log::info!("{} cells, {skipped} already complete", outcomes.len());
    print!("{}", io::read_text(&args.out.join("summary.csv"))?);
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let mllm = match (&args.clients.fixtures, &args.clients.mllm_endpoint) {
        (None, None) => None,
        _ => Some(vision_client(&args.clients, "mllm")?),
    };
    let tag2mask: Arc<dyn Tag2MaskClient> = match tag2mask_client(&args.clients)? {
        Some(c) => c,
        None => Arc::new(LocalSegmenter::default()),
    };
    let config = erase_service::ServiceConfig {
        backbone: args.backbone.clone(),
        mllm,
        tag2mask,
        segmenter: Arc::new(LocalSegmenter::default()),
        bfe: BfeConfig::default(),
    };
    let io_err = |source| Error::Io {
        path: args.addr.clone().into(),
        source,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(io_err)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(io_err)?;
        eprintln!("listening on {}", listener.local_addr().map_err(io_err)?);
        erase_service::serve(listener, config).await.map_err(io_err)
    })
}
