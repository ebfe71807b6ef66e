//! Confusion matrices, IoU reports and the ablation table.

use std::fmt::Write;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::barlow::Domain;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::synthdata::PairedSample;
use crate::trainer::Switches;
use crate::types::SegmentationMap;

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Counts every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &SegmentationMap, gt: &SegmentationMap, ignore_index: u8) -> Result<()> {
        if pred.labels().dim() != gt.labels().dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.labels().dim(),
                gt.labels().dim()
            )));
        }
        let n = self.num_classes;
        let mut update = vec![0u64; n * n];
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= n || p as usize >= n {
                return Err(Error::invalid(format!("class pair ({g}, {p}) out of range for {n} classes")));
            }
            update[g as usize * n + p as usize] += 1;
        }
        self.counts.iter_mut().zip(update).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` marks a class with empty union.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub config_fingerprint: String,
    pub sample_count: usize,
}

/// Per-class IoU and their mean over defined classes.
pub fn iou(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let n = cm.num_classes;
    if n == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..n).filter(|&k| k != c).map(|k| cm.get(c, k)).sum();
            let fp: u64 = (0..n).filter(|&k| k != c).map(|k| cm.get(k, c)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("every class is undefined"));
    }
    Ok(EvalReport {
        mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_iou: per_class,
        config_fingerprint: String::new(),
        sample_count: 0,
    })
}

/// Inference on every sample; source uses the clear images and their labels,
/// target the adverse images and the held-out adverse labels.
pub fn evaluate(
    model: &SegModel,
    samples: &[PairedSample],
    domain: Domain,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    const CHUNK: usize = 8;
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let num_classes = model.spec().decoder.num_classes;
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in samples.chunks(CHUNK) {
        let (c, h, w) = chunk[0].source.dim();
        let mut x = Array4::zeros((chunk.len(), c, h, w));
        let mut gt = Array3::zeros((chunk.len(), h, w));
        for (k, s) in chunk.iter().enumerate() {
            let (img, labels) = match domain {
                Domain::Source => (&s.source, &s.source_labels),
                Domain::Target => (&s.target, &s.adverse_labels_heldout),
            };
            x.index_axis_mut(Axis(0), k).assign(img);
            gt.index_axis_mut(Axis(0), k).assign(labels);
        }
        let pred = model.predict(&x)?;
        cm.accumulate(
            &SegmentationMap::new(pred, num_classes)?,
            &SegmentationMap::new(gt, num_classes)?,
            crate::types::IGNORE_INDEX,
        )?;
    }
    let mut report = iou(&cm)?;
    report.config_fingerprint = config_fingerprint.to_string();
    report.sample_count = samples.len();
    Ok(report)
}

/// Fixed-width table: switch columns, mean, then one column per class.
pub fn format_table(rows: &[(Switches, EvalReport)], class_names: &[String]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>3} {:>4} {:>4} {:>8} {:>6}", "BT", "warp", "crop", "pooling", "mean");
    for name in class_names {
        let _ = write!(out, " {:>8}", truncate(name, 8));
    }
    out.push('\n');
    let tick = |b: bool| if b { "x" } else { "" };
    for (sw, report) in rows {
        let pooling = if sw.use_bt { sw.pooling.label() } else { "-" };
        let _ = write!(
            out,
            "{:>3} {:>4} {:>4} {:>8} {:>6.1}",
            tick(sw.use_bt),
            tick(sw.use_warp && sw.use_bt),
            tick(sw.use_crop && sw.use_bt),
            pooling,
            100.0 * report.mean_iou
        );
        for v in &report.per_class_iou {
            match v {
                Some(v) => {
                    let _ = write!(out, " {:>8.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, " {:>8}", "n/a");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Display names for the synthetic classes.
pub fn class_names(num_classes: usize) -> Vec<String> {
    const KNOWN: [&str; 6] = ["sky", "road", "building", "veget.", "car", "person"];
    (0..num_classes)
        .map(|c| KNOWN.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
        .collect()
}
