//! Accuracy under distortion, sweeps, loss ablations, and attention export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::distill::DistillWeights;
use crate::distortions::{self, DistortionKind, DistortionSpec};
use crate::encoder::{self, ParamSet, ViTConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::softmax_in_place;
use crate::rng;
use crate::trainer::{self, TrainConfig};

pub const DEFAULT_REALIZATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub distortion: DistortionSpec,
    pub n_realizations: usize,
    /// Percent.
    pub mean_top1: f64,
    /// Sample standard deviation in percent; absent for one realization.
    pub std_top1: Option<f64>,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        match self.std_top1 {
            Some(s) => format!("{:.2} ± {:.2}", self.mean_top1, s),
            None => format!("{:.2}", self.mean_top1),
        }
    }
}

/// Mean and sample standard deviation (absent below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Distortion used for realization `r`: the spec's seed mixed with `r`.
pub fn realization_spec(spec: &DistortionSpec, r: usize) -> DistortionSpec {
    DistortionSpec {
        seed: rng::mix(spec.seed, &[0xe7, r as u64]),
        ..spec.clone()
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ParamSet<f32>, cfg: &ViTConfig, img: &Image) -> Result<usize> {
    Ok(argmax(&encoder::classify(params, cfg, img)?))
}

/// Top-1 accuracy over `realizations` independent draws of the distortion.
/// Deterministic distortions (blur) are evaluated once.
pub fn top1(
    params: &ParamSet<f32>,
    cfg: &ViTConfig,
    dataset: &str,
    items: &[LabeledImage],
    spec: &DistortionSpec,
    realizations: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    if realizations == 0 {
        return Err(Error::Config("realizations must be >= 1".into()));
    }
    if cfg.num_classes.is_none() {
        return Err(Error::Config("top-1 evaluation needs a classifier head".into()));
    }
    spec.validate()?;
    let reps = if spec.is_stochastic() { realizations } else { 1 };
    let n = items.len();
    let hits = (0..reps * n)
        .into_par_iter()
        .map(|k| {
            let (r, i) = (k / n, k % n);
            let rs = realization_spec(spec, r);
            let img = distortions::apply(&rs, &items[i].image, i as u64)?;
            Ok(predict(params, cfg, &img)? == items[i].label)
        })
        .collect::<Result<Vec<bool>>>()?;
    let accuracies: Vec<f64> = hits
        .chunks(n)
        .map(|c| 100.0 * c.iter().filter(|&&h| h).count() as f64 / n as f64)
        .collect();
    let (mean_top1, std_top1) = mean_std(&accuracies);
    Ok(EvalReport {
        dataset: dataset.to_string(),
        distortion: spec.clone(),
        n_realizations: reps,
        mean_top1,
        std_top1,
        accuracies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Severity,
    LabelFraction,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "severity" => Ok(Self::Severity),
            "label_fraction" | "label-fraction" | "fraction" => Ok(Self::LabelFraction),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub model: String,
    pub points: Vec<SweepPoint>,
}

impl SweepSeries {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.report.mean_top1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub kind: DistortionKind,
    pub values: Vec<f64>,
    pub series: Vec<SweepSeries>,
}

impl SweepResult {
    pub fn series(&self, model: &str) -> Option<&SweepSeries> {
        self.series.iter().find(|s| s.model == model)
    }

    pub fn render(&self) -> String {
        let head = match self.axis {
            SweepAxis::Severity => format!("{} severity", self.kind),
            SweepAxis::LabelFraction => "label fraction".to_string(),
        };
        let mut rows = vec![std::iter::once(head)
            .chain(self.series.iter().map(|s| s.model.clone()))
            .collect::<Vec<_>>()];
        for (i, v) in self.values.iter().enumerate() {
            rows.push(
                std::iter::once(format!("{v}"))
                    .chain(self.series.iter().map(|s| s.points[i].report.summary()))
                    .collect(),
            );
        }
        render_grid(&rows)
    }
}

pub fn check_increasing(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("sweep values must be strictly increasing: {values:?}")));
    }
    Ok(())
}

/// A named classifier under evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub name: &'a str,
    pub params: &'a ParamSet<f32>,
    pub config: &'a ViTConfig,
}

/// [`top1`] for every model at every severity of `base`'s kind. Models are
/// only read.
pub fn severity_sweep(
    models: &[Model<'_>],
    dataset: &str,
    items: &[LabeledImage],
    base: &DistortionSpec,
    severities: &[f64],
    realizations: usize,
) -> Result<SweepResult> {
    check_increasing(severities)?;
    let specs: Vec<DistortionSpec> = severities.iter().map(|&s| base.with_severity(s)).collect();
    for s in &specs {
        s.validate()?;
    }
    let series = models
        .iter()
        .map(|m| {
            let points = severities
                .iter()
                .zip(&specs)
                .map(|(&value, spec)| {
                    Ok(SweepPoint {
                        value,
                        report: top1(m.params, m.config, dataset, items, spec, realizations)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepSeries {
                model: m.name.to_string(),
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Severity,
        kind: base.kind,
        values: severities.to_vec(),
        series,
    })
}

/// Fine-tunes each named encoder on the stratified subset for every
/// fraction (distortion from `tc`) and scores it under that distortion.
#[allow(clippy::too_many_arguments)]
pub fn label_fraction_sweep(
    encoders: &[(&str, &ParamSet<f32>)],
    cfg: &ViTConfig,
    tc: &TrainConfig,
    train: &[LabeledImage],
    test: &[LabeledImage],
    dataset: &str,
    num_classes: usize,
    fractions: &[f64],
    realizations: usize,
) -> Result<SweepResult> {
    check_increasing(fractions)?;
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("label fraction {f} not in (0, 1]")));
    }
    let mut series: Vec<SweepSeries> = encoders
        .iter()
        .map(|(name, _)| SweepSeries {
            model: name.to_string(),
            points: Vec::new(),
        })
        .collect();
    for &f in fractions {
        for (k, (_, enc)) in encoders.iter().enumerate() {
            let ft = trainer::finetune_run(enc, cfg, tc, train, num_classes, f, None)?;
            let report = top1(&ft.params, &ft.config, dataset, test, &tc.distortion, realizations)?;
            series[k].points.push(SweepPoint { value: f, report });
        }
    }
    Ok(SweepResult {
        axis: SweepAxis::LabelFraction,
        kind: tc.distortion.kind,
        values: fractions.to_vec(),
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "global+local")]
    GlobalLocal,
    #[serde(rename = "global+attn")]
    GlobalAttn,
    #[serde(rename = "full")]
    Full,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [Self::Global, Self::GlobalLocal, Self::GlobalAttn, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::GlobalLocal => "global+local",
            Self::GlobalAttn => "global+attn",
            Self::Full => "full",
        }
    }

    /// `base` with the excluded terms' weights set to exactly zero.
    pub fn weights(self, base: &DistillWeights) -> DistillWeights {
        let (local, attn) = match self {
            Self::Global => (false, false),
            Self::GlobalLocal => (true, false),
            Self::GlobalAttn => (false, true),
            Self::Full => (true, true),
        };
        DistillWeights {
            lambda_patch: if local { base.lambda_patch } else { 0.0 },
            lambda_attn: if attn { base.lambda_attn } else { 0.0 },
            ..*base
        }
    }
}

impl FromStr for AblationArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub weights: DistillWeights,
    pub final_distill_loss: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: AblationArm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn render(&self) -> String {
        let mut rows = vec![vec![
            "arm".to_string(),
            "lambda_cls".into(),
            "lambda_patch".into(),
            "lambda_attn".into(),
            "top-1 (%)".into(),
        ]];
        for r in &self.rows {
            rows.push(vec![
                r.arm.name().to_string(),
                format!("{}", r.weights.lambda_cls),
                format!("{}", r.weights.lambda_patch),
                format!("{}", r.weights.lambda_attn),
                r.report.summary(),
            ]);
        }
        render_grid(&rows)
    }
}

/// Inputs shared by every arm of an ablation.
#[derive(Debug, Clone, Copy)]
pub struct AblationSetup<'a> {
    pub teacher: &'a ParamSet<f32>,
    pub student_init: &'a ParamSet<f32>,
    pub config: &'a ViTConfig,
    pub distill: &'a TrainConfig,
    pub finetune: &'a TrainConfig,
    pub train: &'a [LabeledImage],
    pub test: &'a [LabeledImage],
    pub dataset: &'a str,
    pub num_classes: usize,
    pub label_fraction: f64,
    pub realizations: usize,
}

/// Distills, fine-tunes, and scores one student per arm. Arms differ only
/// in their loss weights: initialization, seeds, data order, and distortion
/// draws are shared.
pub fn ablation_suite(setup: &AblationSetup<'_>, arms: &[AblationArm]) -> Result<AblationTable> {
    if arms.is_empty() {
        return Err(Error::Config("no ablation arms selected".into()));
    }
    let mut rows = Vec::new();
    for &arm in arms {
        let weights = arm.weights(&setup.distill.weights);
        let dtc = TrainConfig {
            weights,
            ..setup.distill.clone()
        };
        let d = trainer::distill_run(
            setup.teacher,
            setup.student_init.clone(),
            setup.config,
            &dtc,
            setup.train,
            None,
        )?;
        let final_distill_loss = last_epoch_mean(&d.records);
        let ft = trainer::finetune_run(
            &d.student,
            setup.config,
            setup.finetune,
            setup.train,
            setup.num_classes,
            setup.label_fraction,
            None,
        )?;
        let report = top1(
            &ft.params,
            &ft.config,
            setup.dataset,
            setup.test,
            &setup.finetune.distortion,
            setup.realizations,
        )?;
        rows.push(AblationRow {
            arm,
            weights,
            final_distill_loss,
            report,
        });
    }
    Ok(AblationTable { rows })
}

/// Mean `loss_total` over the records of the last epoch.
pub fn last_epoch_mean(records: &[trainer::StepRecord]) -> f64 {
    let Some(last) = records.last().map(|r| r.epoch) else {
        return f64::NAN;
    };
    let tail: Vec<f64> = records.iter().filter(|r| r.epoch == last).map(|r| r.loss_total).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Aligned plain-text table, first row as header.
pub fn render_grid(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Table of named reports, one per row.
pub fn render_reports(rows: &[(String, EvalReport)]) -> String {
    let mut grid = vec![vec![
        "model".to_string(),
        "dataset".into(),
        "distortion".into(),
        "n".into(),
        "top-1 (%)".into(),
    ]];
    for (name, r) in rows {
        grid.push(vec![
            name.clone(),
            r.dataset.clone(),
            r.distortion.label(),
            r.n_realizations.to_string(),
            r.summary(),
        ]);
    }
    render_grid(&grid)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Head-averaged softmax (temperature 1) of the last-layer class-token
/// attention over patches. Sums to 1.
pub fn attention_distribution(params: &ParamSet<f32>, cfg: &ViTConfig, img: &Image) -> Result<Vec<f64>> {
    let (_, attn) = encoder::forward(&params.cast::<f64>(), cfg, img)?;
    let mut mean = vec![0.0f64; attn.patches];
    for k in 0..attn.heads {
        let mut row = attn.head(k).to_vec();
        softmax_in_place(&mut row);
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v / attn.heads as f64;
        }
    }
    Ok(mean)
}

/// Upsamples per-patch values to the image grid (nearest neighbour) and
/// min-max normalizes to 0..=255. A constant map becomes mid-gray (128).
pub fn attention_raster(values: &[f64], cfg: &ViTConfig) -> Vec<u8> {
    let (g, ps, s) = (cfg.grid(), cfg.patch_size, cfg.image_size);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let v = values[(y / ps).min(g - 1) * g + (x / ps).min(g - 1)];
            out[y * s + x] = if range > 1e-12 {
                (255.0 * (v - lo) / range).round() as u8
            } else {
                128
            };
        }
    }
    out
}

/// Grayscale bytes of an image (channel mean scaled to 0..=255).
pub fn gray_bytes(img: &Image) -> Vec<u8> {
    img.to_gray()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Input(format!(
            "PGM needs {width}x{height} > 0 pixels, got {}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parses a binary (P5) graymap with one byte per sample. Header tokens may
/// be separated by any whitespace and `#` comments.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == start {
            return Err(Error::format(pos, "expected whitespace in header"));
        }
        let digits = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == digits || pos - digits > 9 {
            return Err(Error::format(digits, "expected a header number"));
        }
        *f = std::str::from_utf8(&bytes[digits..pos]).unwrap().parse().unwrap();
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(pos, format!("maxval {maxval} not in 1..=255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos, "expected a single whitespace after maxval"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(pos, "image too large"))?;
    let rest = &bytes[pos..];
    if rest.len() != need {
        return Err(Error::format(pos, format!("expected {need} pixel bytes, found {}", rest.len())));
    }
    if let Some(i) = rest.iter().position(|&p| p as usize > maxval) {
        return Err(Error::format(pos + i, "sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: rest.to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionExport {
    pub clean: PathBuf,
    pub distorted: PathBuf,
    pub attention: PathBuf,
    /// Head-averaged attention over patches, before normalization.
    pub distribution: Vec<f64>,
}

/// Writes `{stem}_clean.pgm`, `{stem}_distorted.pgm`, and `{stem}_attn.pgm`
/// into `dir`. The attention map is computed on the distorted input.
pub fn export_attention(
    params: &ParamSet<f32>,
    cfg: &ViTConfig,
    img: &Image,
    spec: &DistortionSpec,
    index: u64,
    dir: &Path,
    stem: &str,
) -> Result<AttentionExport> {
    let distorted = distortions::apply(spec, img, index)?;
    let distribution = attention_distribution(params, cfg, &distorted)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = cfg.image_size;
    let write = |name: String, pixels: &[u8]| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, encode_pgm(s, s, pixels)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    Ok(AttentionExport {
        clean: write(format!("{stem}_clean.pgm"), &gray_bytes(img))?,
        distorted: write(format!("{stem}_distorted.pgm"), &gray_bytes(&distorted))?,
        attention: write(format!("{stem}_attn.pgm"), &attention_raster(&distribution, cfg))?,
        distribution,
    })
}
