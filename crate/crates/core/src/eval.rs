//! Detection evaluation under the PASCAL protocol: overlap matching,
//! precision/recall and average precision.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub difficult: bool,
}

impl GtBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn from_rect(r: Rect, difficult: bool) -> Self {
        Self {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
            difficult,
        }
    }
}

/// Annotated boxes of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub boxes: Vec<GtBox>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::InvalidAnnotation(format!(
                    "image {}: non-positive box {:?}",
                    self.image_id, b
                )));
            }
        }
        Ok(())
    }

    pub fn num_positives(&self) -> usize {
        self.boxes.iter().filter(|b| !b.difficult).count()
    }
}

/// Intersection over union of two rectangles with positive area.
pub fn iou(a: &Rect, b: &Rect) -> Result<f64> {
    if !(a.area() > 0.0 && b.area() > 0.0) {
        return Err(Error::Domain(format!(
            "IoU of zero-area rectangle: {a:?} / {b:?}"
        )));
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    Tp,
    Fp,
    /// Matched a difficult box: neither rewarded nor penalized.
    Ignored,
}

/// Greedy matching of score-sorted detections against one image's boxes:
/// each detection takes the highest-overlap unmatched box with IoU at least
/// `iou_thresh` (lower index on ties).
pub fn match_detections(dets: &[Rect], gt: &[GtBox], iou_thresh: f64) -> Result<Vec<MatchLabel>> {
    let mut matched = vec![false; gt.len()];
    let mut labels = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gt.iter().enumerate() {
            if matched[k] {
                continue;
            }
            let o = iou(d, &g.rect())?;
            if o >= iou_thresh && best.map_or(true, |(b, _)| o > b) {
                best = Some((o, k));
            }
        }
        labels.push(match best {
            Some((_, k)) if gt[k].difficult => MatchLabel::Ignored,
            Some((_, k)) => {
                matched[k] = true;
                MatchLabel::Tp
            }
            None => MatchLabel::Fp,
        });
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    Continuous,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Precision/recall after each ranked decision (TP = true).
pub fn pr_curve(labels: &[bool], n_pos: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l {
                tp += 1;
            }
            (tp as f64 / n_pos as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Average precision of a ranked TP/FP list given `n_pos` positives.
pub fn average_precision(labels: &[bool], n_pos: usize, mode: ApMode) -> Result<f64> {
    if n_pos == 0 {
        return Err(Error::Domain("average precision undefined without positives".into()));
    }
    let curve = pr_curve(labels, n_pos);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    Ok(match mode {
        ApMode::Continuous => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(r, _)) in curve.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * envelope[i];
                    prev_recall = r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            let mut ap = 0.0;
            for t in 0..=10 {
                let thresh = t as f64 / 10.0;
                let p = curve
                    .iter()
                    .zip(&envelope)
                    .filter(|((r, _), _)| *r >= thresh - 1e-12)
                    .map(|(_, &e)| e)
                    .fold(0.0, f64::max);
                ap += p;
            }
            ap / 11.0
        }
    })
}

/// Labels ordered by descending score; equal scores keep input order.
pub fn rank_labels(scores: &[f64], labels: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().map(|i| labels[i]).collect()
}

/// AP of a scored binary classification set.
pub fn classification_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    average_precision(&rank_labels(scores, labels), n_pos, ApMode::Continuous)
}

/// Number of positions where the two label vectors disagree.
pub fn zero_one_error(predictions: &[bool], labels: &[bool]) -> Result<usize> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions.iter().zip(labels).filter(|(p, l)| p != l).count())
}

/// A scored box to be evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: Rect,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionEval {
    pub ap: f64,
    pub n_pos: usize,
    /// TP/FP decisions in rank order, ignored detections dropped.
    pub ranked: Vec<bool>,
    pub curve: Vec<(f64, f64)>,
}

/// Evaluates detections pooled over images: global descending-score order
/// (stable), per-image greedy matching.
pub fn evaluate_detections(
    dets: &[ScoredBox],
    gts: &[GroundTruth],
    iou_thresh: f64,
    mode: ApMode,
) -> Result<DetectionEval> {
    let by_id: BTreeMap<&str, &GroundTruth> =
        gts.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let n_pos: usize = gts.iter().map(GroundTruth::num_positives).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut ranked = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let Some(gt) = by_id.get(d.image_id.as_str()) else {
            ranked.push(false);
            continue;
        };
        let used = matched
            .entry(gt.image_id.as_str())
            .or_insert_with(|| vec![false; gt.boxes.len()]);
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gt.boxes.iter().enumerate() {
            if used[k] {
                continue;
            }
            let o = iou(&d.bbox, &g.rect())?;
            if o >= iou_thresh && best.map_or(true, |(b, _)| o > b) {
                best = Some((o, k));
            }
        }
        match best {
            Some((_, k)) if gt.boxes[k].difficult => {}
            Some((_, k)) => {
                used[k] = true;
                ranked.push(true);
            }
            None => ranked.push(false),
        }
    }
    let ap = average_precision(&ranked, n_pos, mode)?;
    let curve = pr_curve(&ranked, n_pos);
    Ok(DetectionEval {
        ap,
        n_pos,
        ranked,
        curve,
    })
}

/// Writes a PR curve as `recall,precision` CSV.
pub fn write_pr_csv<W: Write>(curve: &[(f64, f64)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["recall", "precision"])?;
    for (r, p) in curve {
        w.write_record([r.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
