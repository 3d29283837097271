//! Removal metrics.
//!
//! Unpaired: `bg_sim` (background features of the input vs. the filled
//! region of the output), `fg_sim` (foreground features vs. the filled
//! region, weighted by `1 - bg_sim`) and `bg_pres` (SSIM outside the
//! target). Paired: PSNR and SSIM over the target region, plus an optional
//! perceptual slot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::backbone::standard_normal;
use crate::clients::VisionLanguageClient;
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, Label, LabelMap};

pub const JUDGE_PROMPT: &str = include_str!("../assets/judge_prompt.txt");

/// The four pixel regions derived from a label map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSets {
    /// Clean background, label 2.
    pub background: BinaryMask,
    /// The region to fill, label 0.
    pub reconstructed: BinaryMask,
    /// All foreground, labels 0 and 1.
    pub foreground: BinaryMask,
    /// Everything but the target, labels 1 and 2.
    pub unmasked: BinaryMask,
}

impl RegionSets {
    pub fn from_labels(labels: &LabelMap) -> Self {
        let (h, w) = labels.dims();
        let of = |f: fn(Label) -> bool| BinaryMask::from_fn(h, w, |y, x| f(labels.get(y, x)));
        Self {
            background: of(|l| l == Label::Background),
            reconstructed: of(|l| l == Label::Target),
            foreground: of(|l| l != Label::Background),
            unmasked: of(|l| l != Label::Target),
        }
    }

    /// Partition checks; always true for sets built by
    /// [`from_labels`](Self::from_labels).
    pub fn check(&self) -> Result<()> {
        let n = self.background.bits().len();
        for i in 0..n {
            let b = self.background.bits()[i] == 1;
            let r = self.reconstructed.bits()[i] == 1;
            let f = self.foreground.bits()[i] == 1;
            let u = self.unmasked.bits()[i] == 1;
            if (r && !f) || b == f || u == r {
                return Err(Error::Invalid(format!(
                    "region sets violate the partition at {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.background.dims()
    }
}

/// Bounding-box crop of a region with out-of-region pixels zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub inside: Vec<bool>,
}

pub fn restrict(image: &ImageTensor, region: &BinaryMask) -> Result<RegionCrop> {
    if image.dims() != region.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and region {:?} differ",
            image.dims(),
            region.dims()
        )));
    }
    let (h, w) = region.dims();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y1 == 0 {
        return Err(Error::Degenerate("feature region is empty".into()));
    }
    let c = image.channels();
    let (ch, cw) = (y1 - y0, x1 - x0);
    let mut data = Vec::with_capacity(ch * cw * c);
    let mut inside = Vec::with_capacity(ch * cw);
    for y in y0..y1 {
        for x in x0..x1 {
            let on = region.get(y, x);
            inside.push(on);
            for k in 0..c {
                data.push(if on { image.get(y, x, k) } else { 0.0 });
            }
        }
    }
    Ok(RegionCrop {
        height: ch,
        width: cw,
        channels: c,
        data,
        inside,
    })
}

pub trait FeatureExtractor: Send + Sync {
    fn features(&self, crop: &RegionCrop) -> Result<Vec<f64>>;
}

/// Per-channel 8-bin histograms and means, mapped through a seeded
/// Gaussian projection.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    projection: Vec<Vec<f64>>,
}

const TOY_BINS: usize = 8;
const TOY_RAW: usize = 3 * (TOY_BINS + 1);
pub const TOY_DIM: usize = 32;

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..TOY_DIM)
            .map(|_| standard_normal(&mut rng, TOY_RAW))
            .collect();
        Self { projection }
    }

    fn raw(crop: &RegionCrop) -> Result<Vec<f64>> {
        if crop.channels != 3 {
            return Err(Error::Invalid("toy extractor needs RGB input".into()));
        }
        let n = (crop.height * crop.width) as f64;
        let mut raw = vec![0.0; TOY_RAW];
        for px in crop.data.chunks_exact(3) {
            for (c, v) in px.iter().enumerate() {
                let bin = ((v * TOY_BINS as f64) as usize).min(TOY_BINS - 1);
                raw[c * (TOY_BINS + 1) + bin] += 1.0 / n;
                raw[c * (TOY_BINS + 1) + TOY_BINS] += v / n;
            }
        }
        Ok(raw)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn features(&self, crop: &RegionCrop) -> Result<Vec<f64>> {
        let raw = Self::raw(crop)?;
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum())
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "feature lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::Degenerate(
            "zero or non-finite feature vector".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn region_features(
    f: &dyn FeatureExtractor,
    image: &ImageTensor,
    region: &BinaryMask,
) -> Result<Vec<f64>> {
    let v = f.features(&restrict(image, region)?)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid(
            "feature extractor returned non-finite values".into(),
        ));
    }
    Ok(v)
}

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "images {:?}x{} and {:?}x{} differ",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn bg_sim(
    f: &dyn FeatureExtractor,
    input: &ImageTensor,
    output: &ImageTensor,
    regions: &RegionSets,
) -> Result<f64> {
    same_dims(input, output)?;
    cosine(
        &region_features(f, input, &regions.background)?,
        &region_features(f, output, &regions.reconstructed)?,
    )
}

/// `(1 - bg_sim) * fg_cosine`.
pub fn fg_sim_weighted(bg_sim: f64, fg_cosine: f64) -> f64 {
    (1.0 - bg_sim) * fg_cosine
}

pub fn fg_sim(
    f: &dyn FeatureExtractor,
    input: &ImageTensor,
    output: &ImageTensor,
    regions: &RegionSets,
) -> Result<f64> {
    let bg = bg_sim(f, input, output, regions)?;
    let fg = cosine(
        &region_features(f, input, &regions.foreground)?,
        &region_features(f, output, &regions.reconstructed)?,
    )?;
    Ok(fg_sim_weighted(bg, fg))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur; the window is truncated at the border and its
/// weights renormalized.
fn blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_taps();
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for d in -r..=r {
                    let (sy, sx) = if along_x {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let wt = k[(d + r) as usize];
                    acc += wt * src[sy as usize * w + sx as usize];
                    norm += wt;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Per-pixel SSIM map, averaged over channels. 11x11 Gaussian window,
/// sigma 1.5, dynamic range 1.
pub fn ssim_map(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    let c = a.channels();
    let mut acc = vec![0.0; h * w];
    for ch in 0..c {
        let xa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch]).collect();
        let xb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch]).collect();
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = blur(&xa, h, w);
        let mu_b = blur(&xb, h, w);
        let aa = blur(&sq(&xa, &xa), h, w);
        let bb = blur(&sq(&xb, &xb), h, w);
        let ab = blur(&sq(&xa, &xb), h, w);
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc[i] += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(acc.into_iter().map(|v| v / c as f64).collect())
}

/// Mean SSIM over windows centred in `region`.
pub fn ssim_over(a: &ImageTensor, b: &ImageTensor, region: &BinaryMask) -> Result<f64> {
    if region.dims() != a.dims() {
        return Err(Error::Shape("region does not match image".into()));
    }
    if region.is_empty() {
        return Err(Error::Degenerate("SSIM region is empty".into()));
    }
    let map = ssim_map(a, b)?;
    let (sum, n) = map
        .iter()
        .zip(region.bits())
        .filter(|(_, on)| **on == 1)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok(sum / n as f64)
}

pub fn bg_pres(input: &ImageTensor, output: &ImageTensor, regions: &RegionSets) -> Result<f64> {
    ssim_over(input, output, &regions.unmasked)
}

/// PSNR over `region` for values in `[0,1]`; infinite when identical.
pub fn psnr_over(a: &ImageTensor, b: &ImageTensor, region: &BinaryMask) -> Result<f64> {
    same_dims(a, b)?;
    if region.dims() != a.dims() {
        return Err(Error::Shape("region does not match image".into()));
    }
    let c = a.channels();
    let (mut se, mut n) = (0.0, 0usize);
    for (i, on) in region.bits().iter().enumerate() {
        if *on == 1 {
            for k in 0..c {
                let d = a.data()[i * c + k] - b.data()[i * c + k];
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("PSNR region is empty".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Pluggable perceptual distance, e.g. LPIPS.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &RegionCrop, b: &RegionCrop) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

pub fn paired_metrics(
    prediction: &ImageTensor,
    ground_truth: &ImageTensor,
    regions: &RegionSets,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<PairedMetrics> {
    let region = &regions.reconstructed;
    let lpips = match perceptual {
        Some(p) => Some(p.distance(
            &restrict(prediction, region)?,
            &restrict(ground_truth, region)?,
        )?),
        None => None,
    };
    Ok(PairedMetrics {
        psnr: psnr_over(prediction, ground_truth, region)?,
        ssim: ssim_over(prediction, ground_truth, region)?,
        lpips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub success: bool,
    pub score: f64,
}

pub fn parse_verdict(raw: &str) -> Result<Verdict> {
    let parse_err = |message: String| Error::Parse {
        what: "judge verdict".into(),
        message,
        raw: raw.to_owned(),
    };
    let start = raw
        .find('{')
        .ok_or_else(|| parse_err("no JSON object".into()))?;
    let end = raw
        .rfind('}')
        .filter(|e| *e > start)
        .ok_or_else(|| parse_err("no JSON object".into()))?;
    let v: Verdict =
        serde_json::from_str(&raw[start..=end]).map_err(|e| parse_err(e.to_string()))?;
    if !(0.0..=100.0).contains(&v.score) {
        return Err(parse_err(format!("score {} outside [0, 100]", v.score)));
    }
    Ok(v)
}

/// Asks the judge model for a verdict; one retry on an unparseable answer.
pub fn judge_metric(
    client: &dyn VisionLanguageClient,
    template: &str,
    input: &ImageTensor,
    output: &ImageTensor,
    target: &str,
) -> Result<Verdict> {
    let prompt = template.replace("{target}", target);
    let images = [input.clone(), output.clone()];
    let mut last = None;
    for _ in 0..2 {
        match parse_verdict(&client.complete(&prompt, &images)?) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts were made"))
}

/// Success rate and mean score.
pub fn aggregate_verdicts(verdicts: &[Verdict]) -> Option<(f64, f64)> {
    if verdicts.is_empty() {
        return None;
    }
    let n = verdicts.len() as f64;
    Some((
        verdicts.iter().filter(|v| v.success).count() as f64 / n,
        verdicts.iter().map(|v| v.score).sum::<f64>() / n,
    ))
}

fn ser_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn de_metric<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Cell {
        Num(f64),
        Text(String),
    }
    match Option::<Cell>::deserialize(d)? {
        None => Ok(None),
        Some(Cell::Num(x)) => Ok(Some(x)),
        Some(Cell::Text(t)) => match t.as_str() {
            "inf" => Ok(Some(f64::INFINITY)),
            "-inf" => Ok(Some(f64::NEG_INFINITY)),
            _ => Err(serde::de::Error::custom(format!("bad metric value {t:?}"))),
        },
    }
}

/// One report row. Absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sample_id: String,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub bg_sim: Option<f64>,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub fg_sim: Option<f64>,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub bg_pres: Option<f64>,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub ssim: Option<f64>,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub psnr: Option<f64>,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub lpips: Option<f64>,
    /// `ok`, or why the row is incomplete.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str = "sample_id,BG Sim.,FG Sim.,BG Pres.,SSIM,PSNR,LPIPS,status";

fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => if x > 0.0 { "inf" } else { "-inf" }.into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl MetricsReport {
    /// Column means over the rows where the metric is present.
    pub fn aggregate(&self) -> MetricsRow {
        let mean = |get: fn(&MetricsRow) -> Option<f64>| {
            let vals: Vec<f64> = self.rows.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let complete = self.rows.iter().filter(|r| r.status == "ok").count();
        MetricsRow {
            sample_id: "mean".into(),
            bg_sim: mean(|r| r.bg_sim),
            fg_sim: mean(|r| r.fg_sim),
            bg_pres: mean(|r| r.bg_pres),
            ssim: mean(|r| r.ssim),
            psnr: mean(|r| r.psnr),
            lpips: mean(|r| r.lpips),
            status: format!("{complete}/{} ok", self.rows.len()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let cells = [
                csv_text(&r.sample_id),
                cell(r.bg_sim),
                cell(r.fg_sim),
                cell(r.bg_pres),
                cell(r.ssim),
                cell(r.psnr),
                cell(r.lpips),
                csv_text(&r.status),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [MetricsRow],
            aggregate: MetricsRow,
        }
        let mut s = serde_json::to_string_pretty(&Out {
            rows: &self.rows,
            aggregate: self.aggregate(),
        })
        .expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == "ok")
    }
}

/// Unpaired metrics for one sample, plus paired ones when a ground truth is
/// available.
pub fn evaluate_sample(
    sample_id: &str,
    f: &dyn FeatureExtractor,
    input: &ImageTensor,
    output: &ImageTensor,
    labels: &LabelMap,
    ground_truth: Option<&ImageTensor>,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<MetricsRow> {
    if labels.dims() != input.dims() {
        return Err(Error::Shape(format!(
            "label map {:?} does not match image {:?}",
            labels.dims(),
            input.dims()
        )));
    }
    let regions = RegionSets::from_labels(labels);
    let bg = bg_sim(f, input, output, &regions)?;
    let fg = fg_sim(f, input, output, &regions)?;
    let pres = bg_pres(input, output, &regions)?;
    let paired = ground_truth
        .map(|gt| paired_metrics(output, gt, &regions, perceptual))
        .transpose()?;
    Ok(MetricsRow {
        sample_id: sample_id.to_owned(),
        bg_sim: Some(bg),
        fg_sim: Some(fg),
        bg_pres: Some(pres),
        ssim: paired.map(|p| p.ssim),
        psnr: paired.map(|p| p.psnr),
        lpips: paired.and_then(|p| p.lpips),
        status: "ok".into(),
    })
}
