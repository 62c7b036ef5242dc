//! Detection, localization and explanation scores, and the evaluation report.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::datagen::{DatasetManifest, Manipulation, Sample, Split};
use crate::error::{Error, Result};
use crate::heads::{Explanation, Verdict};
use crate::model::Model;
use crate::numerics::sigmoid;
use crate::pnm;
use crate::trainer::Checkpoint;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub acc: f64,
    pub f1: f64,
}

/// Table-1 layout: Real, Tampered, Overall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionScores {
    pub real: ClassScores,
    pub tampered: ClassScores,
    /// `acc` is correct/total; `f1` is the mean of the two class F1 scores.
    pub overall: ClassScores,
    pub correct: usize,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from confusion counts: `2TP / (2TP + FP + FN)`, 0 when undefined.
fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// Per-class accuracy is the fraction of that class predicted correctly.
pub fn detection_scores(preds: &[Verdict], truth: &[Verdict]) -> Result<DetectionScores> {
    if preds.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    // cm[truth][pred]
    let mut cm = [[0usize; 2]; 2];
    for (p, t) in preds.iter().zip(truth) {
        cm[t.index()][p.index()] += 1;
    }
    let class = |c: usize| {
        let o = 1 - c;
        ClassScores {
            acc: ratio(cm[c][c], cm[c][c] + cm[c][o]),
            f1: f1_counts(cm[c][c], cm[o][c], cm[c][o]),
        }
    };
    let real = class(0);
    let tampered = class(1);
    let correct = cm[0][0] + cm[1][1];
    Ok(DetectionScores {
        real,
        tampered,
        overall: ClassScores {
            acc: ratio(correct, preds.len()),
            f1: (real.f1 + tampered.f1) / 2.0,
        },
        correct,
        total: preds.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskScores {
    pub iou: f64,
    pub f1: f64,
}

/// Pixel IoU and F1. Two empty masks score 1 on both.
pub fn mask_scores(pred: &[bool], truth: &[bool]) -> Result<MaskScores> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!(
            "predicted mask has {} pixels, reference {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok(MaskScores { iou: 1.0, f1: 1.0 });
    }
    Ok(MaskScores {
        iou: ratio(inter, np + nt - inter),
        f1: ratio(2 * inter, np + nt),
    })
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence-level ROUGE-L F-measure (β = 1) over lowercase whitespace
/// tokens. Two empty texts score 1; one empty text scores 0.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Cosine similarity of lowercase bag-of-words count vectors.
pub fn css(candidate: &str, reference: &str) -> f64 {
    let count = |text: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in tokens(text) {
            *m.entry(t).or_default() += 1;
        }
        m
    };
    let a = count(candidate);
    let b = count(reference);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let dot: usize = a.iter().map(|(k, &x)| x * b.get(k).copied().unwrap_or(0)).sum();
    let sq = |m: &HashMap<String, usize>| m.values().map(|&x| x * x).sum::<usize>();
    (dot as f64 / ((sq(&a) * sq(&b)) as f64).sqrt()).min(1.0)
}

/// What a predictor returns for one sample.
#[derive(Clone, Debug)]
pub struct SamplePrediction {
    pub verdict: Verdict,
    pub mask: Vec<bool>,
    pub explanation: Explanation,
    /// Per-pixel tamper probability, row-major.
    pub heat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub label: Verdict,
    pub manipulation: Manipulation,
    pub verdict: Verdict,
    pub mask: MaskScores,
    pub rouge_l: f64,
    pub css: f64,
    pub explanation: String,
    pub height: usize,
    pub width: usize,
    pub heat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: String,
    pub detection: DetectionScores,
    /// Means over samples whose reference label is tampered.
    pub localization: MaskScores,
    pub localized: usize,
    /// Means over all samples.
    pub rouge_l: f64,
    pub css: f64,
    pub rows: Vec<EvalRow>,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SUMMARY: &str = "summary.txt";
pub const HEATMAP_DIR: &str = "heatmaps";

/// Scores `predict` on every sample.
pub fn score_samples<F>(split: &str, samples: &[Sample], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&Sample) -> Result<SamplePrediction>,
{
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(s)?;
        let reference = s.explanation.render();
        let text = p.explanation.render();
        rows.push(EvalRow {
            id: s.id.clone(),
            label: s.label,
            manipulation: s.manipulation,
            verdict: p.verdict,
            mask: mask_scores(&p.mask, &s.mask)?,
            rouge_l: rouge_l(&text, &reference),
            css: css(&text, &reference),
            explanation: text,
            height: s.height(),
            width: s.width(),
            heat: p.heat,
        });
    }
    EvalReport::from_rows(split, rows)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn from_rows(split: &str, rows: Vec<EvalRow>) -> Result<Self> {
        let preds: Vec<Verdict> = rows.iter().map(|r| r.verdict).collect();
        let truth: Vec<Verdict> = rows.iter().map(|r| r.label).collect();
        let detection = detection_scores(&preds, &truth)?;
        let tampered = || rows.iter().filter(|r| r.label == Verdict::Tampered);
        Ok(Self {
            split: split.to_string(),
            detection,
            localization: MaskScores {
                iou: mean(tampered().map(|r| r.mask.iou)),
                f1: mean(tampered().map(|r| r.mask.f1)),
            },
            localized: tampered().count(),
            rouge_l: mean(rows.iter().map(|r| r.rouge_l)),
            css: mean(rows.iter().map(|r| r.css)),
            rows,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record([
            "id",
            "label",
            "manipulation",
            "verdict",
            "correct",
            "iou",
            "f1",
            "rouge_l",
            "css",
            "explanation",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.label.to_string(),
                r.manipulation.as_str().to_string(),
                r.verdict.to_string(),
                (r.label == r.verdict).to_string(),
                format!("{:.6}", r.mask.iou),
                format!("{:.6}", r.mask.f1),
                format!("{:.6}", r.rouge_l),
                format!("{:.6}", r.css),
                r.explanation.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Writes the summary, the CSV and one heatmap graymap per sample.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let heat_dir = dir.join(HEATMAP_DIR);
        fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
        pnm::write_file(&dir.join(REPORT_SUMMARY), self.to_string().as_bytes())?;
        pnm::write_file(&dir.join(REPORT_CSV), self.to_csv()?.as_bytes())?;
        for r in &self.rows {
            let bytes: Vec<u8> = r.heat.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            pnm::write_file(
                &heat_dir.join(format!("{}.pgm", r.id)),
                &pnm::encode_pgm(&bytes, r.height, r.width)?,
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.detection;
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        writeln!(f, "split {}: {} samples, {} correct", self.split, d.total, d.correct)?;
        writeln!(f, "detection     Real Acc  Real F1  Tampered Acc  Tampered F1  Overall Acc  Overall F1")?;
        writeln!(
            f,
            "              {:>8}  {:>7}  {:>12}  {:>11}  {:>11}  {:>10}",
            pct(d.real.acc),
            pct(d.real.f1),
            pct(d.tampered.acc),
            pct(d.tampered.f1),
            pct(d.overall.acc),
            pct(d.overall.f1)
        )?;
        writeln!(f, "localization  IoU   F1    ({} tampered samples)", self.localized)?;
        writeln!(
            f,
            "              {:<5} {:<5}",
            pct(self.localization.iou),
            pct(self.localization.f1)
        )?;
        writeln!(f, "explanation   ROUGE-L  CSS")?;
        writeln!(f, "              {:<8} {:<5}", pct(self.rouge_l), pct(self.css))
    }
}

fn model_prediction(model: &Model, s: &Sample) -> Result<SamplePrediction> {
    let p = model.predict(&s.image)?;
    let heat = p.mask_logits.data().iter().map(|&z| sigmoid(z)).collect();
    Ok(SamplePrediction {
        verdict: p.verdict,
        mask: p.mask,
        explanation: p.explanation,
        heat,
    })
}

/// Runs `model` over one split of the dataset.
pub fn evaluate_model(manifest: &DatasetManifest, model: &Model, split: Split) -> Result<EvalReport> {
    let samples = manifest.load_split(split)?;
    if let Some(s) = samples.first() {
        let size = model.config.image_size;
        if (s.height(), s.width()) != (size, size) {
            return Err(Error::Version(format!(
                "model was built for {size}×{size} images, dataset has {}×{}",
                s.height(),
                s.width()
            )));
        }
    }
    score_samples(split.as_str(), &samples, |s| model_prediction(model, s))
}

/// Rebuilds the model from `checkpoint` and evaluates it.
pub fn evaluate(manifest: &DatasetManifest, checkpoint: &Checkpoint, split: Split) -> Result<EvalReport> {
    evaluate_model(manifest, &checkpoint.to_model()?, split)
}
