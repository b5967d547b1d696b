//! Scoring a model over dataset splits, the per-stage timing profile and
//! heatmap dumps.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::Record;
use crate::decode::{iou, BBox, Prediction};
use crate::error::{Error, Result};
use crate::model::RccfModel;
use crate::tensor::Tensor;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleResult {
    pub file: String,
    pub expression: String,
    pub prediction: Prediction,
    pub truth: BBox,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub split: String,
    pub count: usize,
    pub precision: f64,
    pub mean_iou: f64,
    #[serde(skip)]
    pub results: Vec<SampleResult>,
}

/// Runs the model on every record and scores the decoded boxes.
pub fn evaluate(model: &RccfModel, split: &str, records: &[Record]) -> Result<SplitReport> {
    if records.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` is empty")));
    }
    let mut results = Vec::with_capacity(records.len());
    for r in records {
        let prediction = model.predict(&r.sample.image, &r.sample.expression)?;
        let truth = BBox::from(r.sample.target);
        results.push(SampleResult {
            file: r.file.clone(),
            expression: r.sample.expression.clone(),
            iou: iou(&prediction.bbox, &truth),
            prediction,
            truth,
        });
    }
    let n = results.len() as f64;
    let hits = results.iter().filter(|r| r.iou > IOU_THRESHOLD).count();
    Ok(SplitReport {
        split: split.to_string(),
        count: results.len(),
        precision: hits as f64 / n,
        mean_iou: results.iter().map(|r| r.iou).sum::<f64>() / n,
        results,
    })
}

/// One row per split; tab-separated with a header.
pub fn report_table(reports: &[SplitReport]) -> String {
    let mut s = String::from("split\tcount\tprec@0.5\tmean_iou\n");
    for r in reports {
        s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.split, r.count, r.precision, r.mean_iou));
    }
    s
}

pub fn report_json(reports: &[SplitReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("plain data serializes");
    s.push('\n');
    s
}

/// Per-sample predictions: file, expression, predicted box, score, IoU.
pub fn predictions_table(report: &SplitReport) -> String {
    let mut s = String::from("file\texpression\tx1\ty1\tx2\ty2\tscore\tiou\n");
    for r in &report.results {
        let b = r.prediction.bbox;
        s.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\n",
            r.file, r.expression, b.x1, b.y1, b.x2, b.y2, r.prediction.score, r.iou
        ));
    }
    s
}

/// Writes `report.tsv`, `summary.json` and `predictions-<split>.tsv`.
pub fn write_reports(dir: &Path, reports: &[SplitReport]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        (dir.join("report.tsv"), report_table(reports)),
        (dir.join("summary.json"), report_json(reports)),
    ];
    for r in reports {
        files.push((dir.join(format!("predictions-{}.tsv", r.split)), predictions_table(r)));
    }
    for (p, text) in &files {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub const STAGES: [&str; 5] = [
    "encode_image",
    "encode_expression",
    "correlate_fuse",
    "regression_heads",
    "decode",
];

/// Median wall times in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingProfile {
    pub repeats: usize,
    pub stages: Vec<(String, f64)>,
    pub end_to_end: f64,
}

impl TimingProfile {
    pub fn stage_sum(&self) -> f64 {
        self.stages.iter().map(|(_, t)| t).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("stage\tmedian_ms\n");
        for (name, t) in &self.stages {
            s.push_str(&format!("{name}\t{t:.4}\n"));
        }
        s.push_str(&format!("end_to_end\t{:.4}\n", self.end_to_end));
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times each inference stage separately, plus an uninstrumented end-to-end
/// call, over `repeats` runs. Tape setup counts toward image encoding.
pub fn timing_profile(model: &RccfModel, image: &Tensor, text: &str, repeats: usize) -> Result<TimingProfile> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    model.check_image(image)?;
    let tokens = model.tokenize(text)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut per_stage = vec![Vec::with_capacity(repeats); STAGES.len()];
    let mut totals = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let mut tape = Tape::new();
        let p = model.params().bind_constant(&mut tape);
        let x = tape.constant(image);
        let pyramid = model.encode_image(&mut tape, &p, x)?;
        per_stage[0].push(ms(t));

        let t = Instant::now();
        let lang = model.encode_expression(&mut tape, &p, &tokens)?;
        per_stage[1].push(ms(t));

        let t = Instant::now();
        let (kernels, correlation) = model.correlate(&mut tape, &p, lang, &pyramid)?;
        per_stage[2].push(ms(t));

        let t = Instant::now();
        let (size, offset) = model.regress(&mut tape, &p, &pyramid, &correlation)?;
        per_stage[3].push(ms(t));

        let t = Instant::now();
        let out = crate::model::ForwardOutput {
            pyramid,
            lang,
            kernels,
            correlation,
            size,
            offset,
        };
        let maps = out.maps(&tape)?;
        model.decode(&maps, w, h)?;
        per_stage[4].push(ms(t));

        let t = Instant::now();
        model.predict(image, text)?;
        totals.push(ms(t));
    }
    Ok(TimingProfile {
        repeats,
        stages: STAGES
            .iter()
            .zip(per_stage.iter_mut())
            .map(|(n, v)| (n.to_string(), median(v)))
            .collect(),
        end_to_end: median(&mut totals),
    })
}

/// Heatmap as 8-bit gray levels, `round(255 * value)`, row-major.
pub fn heatmap_bytes(heatmap: &Tensor) -> Vec<u8> {
    heatmap
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn sidecar_text(pred: &Prediction) -> String {
    let b = pred.bbox;
    format!(
        "box = {} {} {} {}\nscore = {}\npeak = {} {}\n",
        b.x1, b.y1, b.x2, b.y2, pred.score, pred.peak.0, pred.peak.1
    )
}

/// Writes the heatmap for `text` on `image` as a binary PGM at `out` and
/// the decoded box to `out` with a `.txt` extension. Returns the
/// prediction and the sidecar path.
pub fn dump_heatmap(model: &RccfModel, image: &Tensor, text: &str, out: &Path) -> Result<(Prediction, PathBuf)> {
    let (maps, pred) = model.predict_maps(image, text)?;
    let s = maps.heatmap.shape();
    let (h, w) = (s[0], s[1]);
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&heatmap_bytes(&maps.heatmap), w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image {
            path: out.to_path_buf(),
            msg: e.to_string(),
        })?;
    let side = out.with_extension("txt");
    fs::write(&side, sidecar_text(&pred)).map_err(|e| Error::io(&side, e))?;
    Ok((pred, side))
}
