//! Detection metrics: greedy matching, average precision over 40 recall
//! positions (AP_BEV / AP_3D), consolidated per-dataset reports, and
//! prediction-vs-ground-truth size-distribution statistics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectionResult;
use crate::geometry::{iou_3d, iou_bev};
use crate::synthdata::{Box3D, Frame, CLASS_CAR};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("results/frames length mismatch: {results} vs {frames}")]
    LengthMismatch { results: usize, frames: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Class IoU thresholds following the usual convention: 0.7 for car, 0.5 for
/// everything else.
pub fn default_thresholds(n_classes: usize) -> BTreeMap<usize, f64> {
    (0..n_classes).map(|c| (c, if c == CLASS_CAR { 0.7 } else { 0.5 })).collect()
}

/// Greedy matching outcome for one frame's predictions (given order).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub tp_flags: Vec<bool>,
    /// Matched GT index per prediction (None for FP).
    pub matches: Vec<Option<usize>>,
}

/// Greedy single-match protocol: predictions in descending-score order each
/// take the highest-IoU unmatched GT of their class; TP iff that IoU ≥
/// `thresh`. Each GT is matched at most once.
pub fn match_predictions(
    preds: &DetectionResult,
    gts: &[Box3D],
    iou_fn: &dyn Fn(&Box3D, &Box3D) -> f64,
    thresh: f64,
) -> MatchOutcome {
    let n = preds.len();
    let mut tp_flags = vec![false; n];
    let mut matches = vec![None; n];
    let mut taken = vec![false; gts.len()];
    for i in 0..n {
        let cls = preds.class_ids[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.class_id != cls {
                continue;
            }
            let iou = iou_fn(&preds.boxes[i], gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= thresh {
                tp_flags[i] = true;
                matches[i] = Some(gi);
                taken[gi] = true;
            }
        }
    }
    MatchOutcome { tp_flags, matches }
}

/// Interpolated AP over recall positions {1/40, …, 40/40}: the mean of the
/// maximum precision at recall ≥ r (0 where unattained). Flags must be in
/// descending-score order. `None` when the metric is undefined (no GT and no
/// predictions).
pub fn average_precision_40(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp_flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (i, &flag) in tp_flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for r in 1..=40 {
        let rt = r as f64 / 40.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= rt - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0_f64, f64::max);
        total += best;
    }
    Some(total / 40.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub iou_thresh: f64,
    pub n_gt: usize,
    pub n_pred: usize,
    pub ap_bev: Option<f64>,
    pub ap_3d: Option<f64>,
}

/// Per-class, per-dimension (l, w, h) size summaries plus the 1-Wasserstein
/// distance between predicted and GT size samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeStats {
    pub class_id: usize,
    pub n_pred: usize,
    pub n_gt: usize,
    pub pred_mean: [f64; 3],
    pub pred_std: [f64; 3],
    pub gt_mean: [f64; 3],
    pub gt_std: [f64; 3],
    pub w1: Option<[f64; 3]>,
    /// Set when either side has fewer than 2 samples.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEval {
    pub dataset_id: u32,
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes with defined AP.
    pub map_bev: Option<f64>,
    pub map_3d: Option<f64>,
    pub size_stats: Vec<SizeStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetEval>,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Overall mAP_BEV across datasets (mean of defined per-dataset values).
    pub fn overall_map_bev(&self) -> Option<f64> {
        mean_defined(self.datasets.iter().map(|d| d.map_bev))
    }

    pub fn dataset(&self, id: u32) -> Option<&DatasetEval> {
        self.datasets.iter().find(|d| d.dataset_id == id)
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV: one row per dataset × class × metric.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        writeln!(w, "dataset_id,class_id,metric,value")?;
        let mut cell = |d: u32, c: &str, m: &str, v: Option<f64>| -> std::io::Result<()> {
            match v {
                Some(v) => writeln!(w, "{d},{c},{m},{v}"),
                None => writeln!(w, "{d},{c},{m},"),
            }
        };
        for ds in &self.datasets {
            for ce in &ds.classes {
                let c = ce.class_id.to_string();
                cell(ds.dataset_id, &c, "ap_bev", ce.ap_bev)?;
                cell(ds.dataset_id, &c, "ap_3d", ce.ap_3d)?;
                cell(ds.dataset_id, &c, "n_gt", Some(ce.n_gt as f64))?;
                cell(ds.dataset_id, &c, "n_pred", Some(ce.n_pred as f64))?;
            }
            for ss in &ds.size_stats {
                let c = ss.class_id.to_string();
                for (k, dim) in ["l", "w", "h"].iter().enumerate() {
                    cell(ds.dataset_id, &c, &format!("w1_{dim}"), ss.w1.map(|v| v[k]))?;
                }
            }
            cell(ds.dataset_id, "all", "map_bev", ds.map_bev)?;
            cell(ds.dataset_id, "all", "map_3d", ds.map_3d)?;
        }
        Ok(())
    }
}

fn mean_defined<I: Iterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let vals: Vec<f64> = it.flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Scores a split: results[i] are the predictions for frames[i]. APs are
/// pooled per dataset and class across frames; mAP averages the defined
/// per-class APs.
pub fn evaluate(
    results: &[DetectionResult],
    frames: &[Frame],
    thresholds: &BTreeMap<usize, f64>,
    config_fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    if results.len() != frames.len() {
        return Err(EvalError::LengthMismatch { results: results.len(), frames: frames.len() });
    }
    let mut dataset_ids: Vec<u32> = frames.iter().map(|f| f.dataset_id).collect();
    dataset_ids.sort_unstable();
    dataset_ids.dedup();

    let mut datasets = Vec::with_capacity(dataset_ids.len());
    for &did in &dataset_ids {
        let idx: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].dataset_id == did).collect();
        let mut classes = Vec::new();
        let mut size_stats = Vec::new();
        for (&cls, &thresh) in thresholds {
            // pooled (score, tp) pairs per frame under each IoU definition
            let mut bev_flags: Vec<(f64, bool)> = Vec::new();
            let mut d3_flags: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0usize;
            let mut n_pred = 0usize;
            let mut pred_sizes: Vec<[f64; 3]> = Vec::new();
            let mut gt_sizes: Vec<[f64; 3]> = Vec::new();
            for &i in &idx {
                let bev = match_predictions(&results[i], &frames[i].boxes, &iou_bev, thresh);
                let d3 = match_predictions(&results[i], &frames[i].boxes, &iou_3d, thresh);
                for (p, pred_cls) in results[i].class_ids.iter().enumerate().map(|(p, &c)| (p, c)) {
                    if pred_cls != cls {
                        continue;
                    }
                    n_pred += 1;
                    bev_flags.push((results[i].scores[p], bev.tp_flags[p]));
                    d3_flags.push((results[i].scores[p], d3.tp_flags[p]));
                    pred_sizes.push(results[i].boxes[p].size);
                }
                for gt in &frames[i].boxes {
                    if gt.class_id == cls {
                        n_gt += 1;
                        gt_sizes.push(gt.size);
                    }
                }
            }
            let sort_desc = |flags: &mut Vec<(f64, bool)>| {
                flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            };
            sort_desc(&mut bev_flags);
            sort_desc(&mut d3_flags);
            let ap_bev =
                average_precision_40(&bev_flags.iter().map(|f| f.1).collect::<Vec<_>>(), n_gt);
            let ap_3d =
                average_precision_40(&d3_flags.iter().map(|f| f.1).collect::<Vec<_>>(), n_gt);
            classes.push(ClassEval { class_id: cls, iou_thresh: thresh, n_gt, n_pred, ap_bev, ap_3d });
            size_stats.push(size_distribution_stats(cls, &pred_sizes, &gt_sizes));
        }
        let map_bev = mean_defined(classes.iter().map(|c| c.ap_bev));
        let map_3d = mean_defined(classes.iter().map(|c| c.ap_3d));
        datasets.push(DatasetEval { dataset_id: did, classes, map_bev, map_3d, size_stats });
    }
    Ok(EvalReport { datasets, config_fingerprint: config_fingerprint.to_string() })
}

/// Per-dimension mean/std summaries and exact empirical W1 between the two
/// size samples.
pub fn size_distribution_stats(
    class_id: usize,
    pred_sizes: &[[f64; 3]],
    gt_sizes: &[[f64; 3]],
) -> SizeStats {
    let summary = |samples: &[[f64; 3]]| -> ([f64; 3], [f64; 3]) {
        let n = samples.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for s in samples {
            for k in 0..3 {
                mean[k] += s[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for s in samples {
            for k in 0..3 {
                std[k] += (s[k] - mean[k]).powi(2) / n;
            }
        }
        for v in &mut std {
            *v = v.sqrt();
        }
        (mean, std)
    };
    let (pred_mean, pred_std) = summary(pred_sizes);
    let (gt_mean, gt_std) = summary(gt_sizes);
    let w1 = if pred_sizes.is_empty() || gt_sizes.is_empty() {
        None
    } else {
        let mut dists = [0.0; 3];
        for (k, d) in dists.iter_mut().enumerate() {
            let a: Vec<f64> = pred_sizes.iter().map(|s| s[k]).collect();
            let b: Vec<f64> = gt_sizes.iter().map(|s| s[k]).collect();
            *d = wasserstein_1d(&a, &b);
        }
        Some(dists)
    };
    SizeStats {
        class_id,
        n_pred: pred_sizes.len(),
        n_gt: gt_sizes.len(),
        pred_mean,
        pred_std,
        gt_mean,
        gt_std,
        w1,
        degenerate: pred_sizes.len() < 2 || gt_sizes.len() < 2,
    }
}

/// Exact W1 between two 1D empirical distributions: the quantile functions
/// are step functions, so the integral is a walk over merged breakpoints.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "wasserstein_1d: empty sample");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut total = 0.0;
    while q < 1.0 - 1e-15 {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let qn = next_a.min(next_b).min(1.0);
        total += (qn - q) * (a[i] - b[j]).abs();
        if next_a <= qn + 1e-15 && i + 1 < a.len() {
            i += 1;
        }
        if next_b <= qn + 1e-15 && j + 1 < b.len() {
            j += 1;
        }
        q = qn;
    }
    total
}
