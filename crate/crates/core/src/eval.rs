//! VOC-style detection and localization metrics.
//!
//! Detections are matched to ground truth per image and per class in
//! descending score order; a detection takes the still-unmatched
//! ground-truth box it overlaps most if that IoU is strictly above 0.5.
//! Average precision uses the 11-point interpolation by default. CorLoc is
//! the fraction of images containing a class whose single top-scoring
//! detection of that class hits one of its ground-truth boxes.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DetectionRecord, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

/// Overlap a detection needs (strictly) to count as correct.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

impl std::str::FromStr for ApMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "11point" | "11-point" | "eleven_point" => Ok(ApMethod::ElevenPoint),
            "all" | "all-point" | "all_point" => Ok(ApMethod::AllPoint),
            _ => Err(format!("unknown AP method `{s}` (expected `11point` or `all-point`)")),
        }
    }
}

/// TP flag per detection. `dets` must be sorted by descending score.
pub fn match_detections(dets: &[BBox], gt: &[BBox], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gbox) in gt.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(d, gbox);
                if v > iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each detection of a ranked TP/FP list.
pub fn precision_recall(tp_flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    tp_flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// `(1/11) Σ_t max{precision at recall ≥ t}` for `t = 0, 0.1, ..., 1`,
/// with 0 where recall `t` is never reached.
pub fn voc_ap_11point(pr: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            pr.iter().filter(|(r, _)| *r >= t - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Area under the precision envelope, summed over recall increments.
pub fn voc_ap_all_point(pr: &[(f64, f64)]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for &(r, p) in pr {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

pub fn average_precision(pr: &[(f64, f64)], method: ApMethod) -> f64 {
    match method {
        ApMethod::ElevenPoint => voc_ap_11point(pr),
        ApMethod::AllPoint => voc_ap_all_point(pr),
    }
}

/// Metrics of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// 1-based.
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    /// `None` when no image contains the class.
    pub corloc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub gt: usize,
    pub positive_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: ApMethod,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with ground truth.
    pub map: Option<f64>,
    /// Mean CorLoc over classes with a positive image.
    pub corloc: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per image, the boxes of class `class_id` sorted by descending score.
fn class_detections(dets: &[Detection], class_id: usize) -> Vec<(f64, BBox)> {
    let mut v: Vec<(f64, BBox)> = dets.iter().filter(|d| d.class_id == class_id).map(|d| (d.score, d.bbox)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

fn evaluate_class(
    samples: &[ImageSample],
    detections: &[Vec<Detection>],
    class_id: usize,
    method: ApMethod,
) -> ClassReport {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let (mut num_gt, mut positives, mut hits) = (0, 0, 0);
    for (sample, dets) in samples.iter().zip(detections) {
        let gt: Vec<BBox> =
            sample.ground_truth().unwrap_or(&[]).iter().filter(|g| g.class_id == class_id).map(|g| g.bbox).collect();
        let ranked = class_detections(dets, class_id);
        let boxes: Vec<BBox> = ranked.iter().map(|d| d.1).collect();
        let flags = match_detections(&boxes, &gt, MATCH_IOU);
        scored.extend(ranked.iter().map(|d| d.0).zip(flags));
        num_gt += gt.len();
        if !gt.is_empty() {
            positives += 1;
            if let Some(top) = boxes.first() {
                hits += gt.iter().any(|g| iou(top, g) > MATCH_IOU) as usize;
            }
        }
    }
    // stable: equal scores keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
    let tp = flags.iter().filter(|&&f| f).count();
    ClassReport {
        class_id,
        ap: (num_gt > 0).then(|| average_precision(&precision_recall(&flags, num_gt), method)),
        corloc: (positives > 0).then(|| hits as f64 / positives as f64),
        tp,
        fp: flags.len() - tp,
        gt: num_gt,
        positive_images: positives,
    }
}

/// AP, mAP and CorLoc over `samples` (which must carry ground truth), with
/// `detections[i]` belonging to `samples[i]`.
pub fn evaluate(
    samples: &[ImageSample],
    detections: &[Vec<Detection>],
    num_classes: usize,
    method: ApMethod,
) -> Result<EvalReport> {
    if samples.len() != detections.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            left: format!("{} images", samples.len()),
            right: format!("{} detection lists", detections.len()),
        });
    }
    if let Some(s) = samples.iter().find(|s| s.ground_truth().is_none()) {
        return Err(Error::InvalidConfig(format!("image {} has no ground truth", s.image_id)));
    }
    let classes: Vec<ClassReport> =
        (1..=num_classes).into_par_iter().map(|c| evaluate_class(samples, detections, c, method)).collect();
    Ok(EvalReport {
        method,
        map: mean_of(classes.iter().filter_map(|c| c.ap)),
        corloc: mean_of(classes.iter().filter_map(|c| c.corloc)),
        classes,
    })
}

/// Groups detection records by image and evaluates them. Records naming
/// an unknown image are an error.
pub fn evaluate_records(
    samples: &[ImageSample],
    records: &[DetectionRecord],
    num_classes: usize,
    method: ApMethod,
) -> Result<EvalReport> {
    let index: HashMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.image_id.as_str(), i)).collect();
    let mut grouped = vec![Vec::new(); samples.len()];
    for r in records {
        let i = *index
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("detection for unknown image `{}`", r.image_id)))?;
        grouped[i].push(Detection { bbox: r.bbox, class_id: r.class_id, score: r.score });
    }
    evaluate(samples, &grouped, num_classes, method)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// `class,ap,corloc,tp,fp,gt,positive_images`, then a `mean` row.
    /// Undefined values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap,corloc,tp,fp,gt,positive_images\n");
        for c in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class_id,
                fmt_opt(c.ap),
                fmt_opt(c.corloc),
                c.tp,
                c.fp,
                c.gt,
                c.positive_images
            ));
        }
        let sum = |f: fn(&ClassReport) -> usize| self.classes.iter().map(f).sum::<usize>();
        out.push_str(&format!(
            "mean,{},{},{},{},{},{}\n",
            fmt_opt(self.map),
            fmt_opt(self.corloc),
            sum(|c| c.tp),
            sum(|c| c.fp),
            sum(|c| c.gt),
            sum(|c| c.positive_images)
        ));
        out
    }

    /// Fixed-width table with percentages.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>6} {:>7} {:>7} {:>6} {:>6} {:>5}\n", "class", "AP", "CorLoc", "TP", "FP", "GT");
        for c in &self.classes {
            out.push_str(&format!(
                "{:>6} {:>7} {:>7} {:>6} {:>6} {:>5}\n",
                c.class_id,
                pct(c.ap),
                pct(c.corloc),
                c.tp,
                c.fp,
                c.gt
            ));
        }
        out.push_str(&format!("{:>6} {:>7} {:>7}\n", "mean", pct(self.map), pct(self.corloc)));
        out
    }
}
