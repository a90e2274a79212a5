//! COCO-style detection evaluation: greedy IoU matching, 101-point
//! interpolated AP at the ten IoU thresholds 0.50:0.05:0.95, and
//! size-stratified AP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, ResultSet};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, SizeClass};

pub const NUM_THRESHOLDS: usize = 10;
/// Recall grid points `0, 0.01, ..., 1.00`.
pub const RECALL_POINTS: usize = 101;

/// IoU threshold `i`: `0.50 + 0.05 * i`.
pub fn iou_threshold(i: usize) -> f64 {
    (50 + 5 * i) as f64 / 100.0
}

pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(iou_threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalParams {
    /// Keep only the best `n` detections per image and class (strict COCO uses 100).
    pub max_dets: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: u32,
    pub num_truths: usize,
    /// AP at each IoU threshold.
    pub ap_per_threshold: Vec<f64>,
    /// Mean of `ap_per_threshold`.
    pub ap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: u32,
    /// AP@0.50:0.95
    pub ap: f64,
    /// AP@0.50
    pub ap50: f64,
    /// AP@0.75
    pub ap75: f64,
    /// `None` when no ground truth falls in the size class.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    /// Classes with at least one ground-truth box, by label.
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    pub fn size_ap(&self, size: SizeClass) -> Option<f64> {
        match size {
            SizeClass::Small => self.ap_small,
            SizeClass::Medium => self.ap_medium,
            SizeClass::Large => self.ap_large,
        }
    }

    /// Tab-separated summary with percentages at one decimal.
    pub fn summary_table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), pct);
        format!(
            "AP@0.50:0.95\tAP@0.50\tAP@0.75\tAP@(small)\tAP@(medium)\tAP@(large)\n{}\t{}\t{}\t{}\t{}\t{}\n",
            pct(self.ap),
            pct(self.ap50),
            pct(self.ap75),
            opt(self.ap_small),
            opt(self.ap_medium),
            opt(self.ap_large)
        )
    }
}

/// Per-detection outcome of greedy matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Index of the matched truth for each detection; `None` is a false positive.
    pub assignments: Vec<Option<usize>>,
    pub unmatched_truths: usize,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.assignments[det].is_some()
    }
}

/// Greedy matching of score-sorted detections against one image's truths of
/// one class. Each detection takes the still-unmatched truth with the highest
/// IoU at or above `iou_thr` (lowest index on ties).
pub fn match_detections(dets: &[Detection], truths: &[BBox], iou_thr: f64) -> MatchResult {
    let mut taken = vec![false; truths.len()];
    let assignments = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = d.bbox.iou(t);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect();
    MatchResult {
        assignments,
        unmatched_truths: taken.iter().filter(|t| !**t).count(),
    }
}

/// 101-point interpolated AP from TP flags sorted by descending score.
/// Returns `None` when there is no ground truth.
pub fn average_precision(tp_flags: &[bool], total_truths: usize) -> Option<f64> {
    if total_truths == 0 {
        return None;
    }
    let g = total_truths as u64;
    let mut tp_counts = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0u64;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += u64::from(flag);
        tp_counts.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope: best precision at this rank or any later one
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // recall tp / g >= r / 100, compared exactly in integers
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS as u64 {
        while k < tp_counts.len() && tp_counts[k] * 100 < r * g {
            k += 1;
        }
        if k == tp_counts.len() {
            break;
        }
        sum += precision[k];
    }
    Some(sum / RECALL_POINTS as f64)
}

/// One detection's outcome at every threshold, with what is needed to
/// stratify it by size and order it globally.
#[derive(Debug, Clone)]
struct Scored {
    image_id: u64,
    det: Detection,
    own_size: SizeClass,
    /// Size class of the matched truth per threshold, `None` for FP.
    matched: [Option<SizeClass>; NUM_THRESHOLDS],
}

fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Evaluates one model's results against the dataset's ground truth.
///
/// Size-stratified AP keeps the truths of one size class, detections matched
/// to those truths, and unmatched detections whose own size falls in the
/// class.
pub fn evaluate(results: &ResultSet, dataset: &Dataset, params: &EvalParams) -> Result<EvalReport> {
    let images: BTreeMap<u64, _> = dataset.images.iter().map(|im| (im.id, im)).collect();
    let unknown: BTreeSet<u64> = results
        .entries
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| !images.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }

    let classes: BTreeSet<u32> = dataset
        .images
        .iter()
        .flat_map(|im| im.truths.iter().map(|t| t.label))
        .collect();
    let by_image = results.by_image();

    // (image, class) units, in deterministic order
    let units: Vec<(u64, u32)> = images
        .keys()
        .flat_map(|&id| classes.iter().map(move |&c| (id, c)))
        .collect();
    let thresholds = iou_thresholds();

    let matched: Vec<(u32, Vec<Scored>, [usize; 3])> = units
        .par_iter()
        .map(|&(id, class)| {
            let im = images[&id];
            let truths: Vec<BBox> = im
                .truths
                .iter()
                .filter(|t| t.label == class)
                .map(|t| t.bbox)
                .collect();
            let truth_sizes: Vec<SizeClass> = truths
                .iter()
                .map(|t| t.size_class(im.width, im.height))
                .collect();
            let mut dets: Vec<Detection> = by_image
                .get(&id)
                .map(|v| v.iter().filter(|d| d.label == class).copied().collect())
                .unwrap_or_default();
            dets.sort_by(det_order);
            if let Some(n) = params.max_dets {
                dets.truncate(n);
            }

            let mut scored: Vec<Scored> = dets
                .iter()
                .map(|d| Scored {
                    image_id: id,
                    det: *d,
                    own_size: d.bbox.size_class(im.width, im.height),
                    matched: [None; NUM_THRESHOLDS],
                })
                .collect();
            for (t, &thr) in thresholds.iter().enumerate() {
                let m = match_detections(&dets, &truths, thr);
                for (s, a) in scored.iter_mut().zip(&m.assignments) {
                    s.matched[t] = a.map(|j| truth_sizes[j]);
                }
            }
            let mut size_counts = [0usize; 3];
            for s in &truth_sizes {
                size_counts[*s as usize] += 1;
            }
            (class, scored, size_counts)
        })
        .collect();

    let mut per_class_scored: BTreeMap<u32, (Vec<Scored>, [usize; 3])> = BTreeMap::new();
    for (class, scored, counts) in matched {
        let slot = per_class_scored.entry(class).or_default();
        slot.0.extend(scored);
        for (total, n) in slot.1.iter_mut().zip(counts) {
            *total += n;
        }
    }

    let mut per_class = Vec::new();
    let mut size_aps: [Vec<f64>; 3] = Default::default();
    for (class, (mut scored, counts)) in per_class_scored {
        scored.sort_by(|a, b| {
            b.det
                .score
                .total_cmp(&a.det.score)
                .then(a.image_id.cmp(&b.image_id))
                .then(det_order(&a.det, &b.det))
        });
        let total: usize = counts.iter().sum();
        let ap_per_threshold: Vec<f64> = (0..NUM_THRESHOLDS)
            .map(|t| {
                let flags: Vec<bool> = scored.iter().map(|s| s.matched[t].is_some()).collect();
                average_precision(&flags, total).unwrap_or(0.0)
            })
            .collect();
        for size in SizeClass::ALL {
            let g = counts[size as usize];
            if g == 0 {
                continue;
            }
            let mean = (0..NUM_THRESHOLDS)
                .map(|t| {
                    let flags: Vec<bool> = scored
                        .iter()
                        .filter(|s| s.matched[t].unwrap_or(s.own_size) == size)
                        .map(|s| s.matched[t].is_some())
                        .collect();
                    average_precision(&flags, g).unwrap_or(0.0)
                })
                .sum::<f64>()
                / NUM_THRESHOLDS as f64;
            size_aps[size as usize].push(mean);
        }
        let ap = ap_per_threshold.iter().sum::<f64>() / NUM_THRESHOLDS as f64;
        per_class.push(ClassReport {
            label: class,
            num_truths: total,
            ap_per_threshold,
            ap,
        });
    }

    let mean = |vals: &mut dyn Iterator<Item = f64>| -> Option<f64> {
        let v: Vec<f64> = vals.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let ap = mean(&mut per_class.iter().map(|c| c.ap)).unwrap_or(0.0);
    let ap50 = mean(&mut per_class.iter().map(|c| c.ap_per_threshold[0])).unwrap_or(0.0);
    let ap75 = mean(&mut per_class.iter().map(|c| c.ap_per_threshold[5])).unwrap_or(0.0);
    let [small, medium, large] = size_aps.map(|v| mean(&mut v.into_iter()));

    Ok(EvalReport {
        model_id: results.model_id,
        ap,
        ap50,
        ap75,
        ap_small: small,
        ap_medium: medium,
        ap_large: large,
        iou_thresholds: thresholds.to_vec(),
        per_class,
    })
}
