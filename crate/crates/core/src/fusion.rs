//! Combining detections: greedy NMS, weighted box fusion across models, and
//! ranking models for an ensemble.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::ResultSet;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{BBox, Detection};

/// How a fused cluster's confidence is derived from its members.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfType {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for ConfType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(ConfType::Avg),
            "max" => Ok(ConfType::Max),
            other => Err(Error::invalid(format!(
                "unknown conf type {other:?} (avg|max)"
            ))),
        }
    }
}

impl std::fmt::Display for ConfType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConfType::Avg => "avg",
            ConfType::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Minimum IoU with a cluster's fused box to join it.
    pub iou_thr: f64,
    /// Detections with a raw score below this are ignored.
    pub skip_thr: f64,
    /// One positive weight per model list; `None` weighs all equally.
    pub weights: Option<Vec<f64>>,
    pub conf_type: ConfType,
    /// `model_id` stamped on fused detections.
    pub output_model_id: u32,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            iou_thr: 0.55,
            skip_thr: 0.0,
            weights: None,
            conf_type: ConfType::Avg,
            output_model_id: 0,
        }
    }
}

impl FusionParams {
    fn validate(&self, models: usize) -> Result<()> {
        if !(self.iou_thr > 0.0 && self.iou_thr <= 1.0) {
            return Err(Error::invalid(format!(
                "fusion IoU threshold must lie in (0, 1], got {}",
                self.iou_thr
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != models {
                return Err(Error::invalid(format!(
                    "{} weights for {models} models",
                    w.len()
                )));
            }
            if let Some(bad) = w.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                return Err(Error::invalid(format!(
                    "model weight {bad} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Weights scaled so the largest is 1, keeping fused scores in `[0, 1]`.
    fn normalized_weights(&self, models: usize) -> Vec<f64> {
        match &self.weights {
            None => vec![1.0; models],
            Some(w) => {
                let max = w.iter().cloned().fold(f64::MIN, f64::max);
                w.iter().map(|v| v / max).collect()
            }
        }
    }
}

/// Greedy per-label non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(Detection::rank_cmp);
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && k.bbox.iou(&d.bbox) >= iou_thr);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone)]
struct Cluster {
    label: u32,
    members: Vec<Detection>,
    fused: BBox,
}

impl Cluster {
    fn new(det: Detection) -> Self {
        Self {
            label: det.label,
            fused: det.bbox,
            members: vec![det],
        }
    }

    fn push(&mut self, det: Detection) {
        self.members.push(det);
        self.fused = fuse_coords(&self.members);
    }

    fn score(&self, conf: ConfType) -> f64 {
        let scores = self.members.iter().map(|m| m.score);
        match conf {
            ConfType::Avg => scores.sum::<f64>() / self.members.len() as f64,
            ConfType::Max => scores.fold(0.0, f64::max),
        }
    }
}

/// Score-weighted mean of member coordinates, kept inside the members'
/// coordinate range. All-zero scores fall back to the plain mean.
fn fuse_coords(members: &[Detection]) -> BBox {
    let total: f64 = members.iter().map(|m| m.score).sum();
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let coord = |m: &Detection| m.bbox.coords()[k];
        let mean = if total > 0.0 {
            members.iter().map(|m| m.score * coord(m)).sum::<f64>() / total
        } else {
            members.iter().map(coord).sum::<f64>() / members.len() as f64
        };
        let lo = members.iter().map(coord).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(coord).fold(f64::NEG_INFINITY, f64::max);
        *slot = mean.clamp(lo, hi);
    }
    BBox::from_coords(out)
}

/// Weighted box fusion over one image's detections from `per_model.len()`
/// models.
///
/// Detections are pooled with their scores multiplied by the model weight
/// and visited best-first. Each joins the same-label cluster whose current
/// fused box overlaps it most (IoU at least `iou_thr`), or opens a new one.
/// A cluster's box is the score-weighted mean of its members; its score is
/// the mean (or max) member score times `min(T, N) / N`, where `T` is the
/// member count and `N` the number of models.
pub fn wbf(per_model: &[Vec<Detection>], p: &FusionParams) -> Result<Vec<Detection>> {
    let models = per_model.len();
    if models == 0 {
        return Err(Error::invalid(
            "weighted box fusion needs at least one model",
        ));
    }
    p.validate(models)?;
    let weights = p.normalized_weights(models);

    let mut pool: Vec<Detection> = per_model
        .iter()
        .zip(&weights)
        .flat_map(|(dets, &w)| {
            dets.iter()
                .filter(|d| d.score >= p.skip_thr)
                .map(move |d| Detection {
                    score: d.score * w,
                    ..*d
                })
        })
        .collect();
    pool.sort_by(Detection::rank_cmp);

    let mut clusters: Vec<Cluster> = Vec::new();
    for det in pool {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in clusters.iter().enumerate() {
            if c.label != det.label {
                continue;
            }
            let iou = c.fused.iou(&det.bbox);
            if iou >= p.iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        match best {
            Some((i, _)) => clusters[i].push(det),
            None => clusters.push(Cluster::new(det)),
        }
    }

    let n = models as f64;
    let mut out: Vec<Detection> = clusters
        .iter()
        .map(|c| {
            let t = c.members.len() as f64;
            let score = (c.score(p.conf_type) * t.min(n) / n).clamp(0.0, 1.0);
            Detection::new(c.fused, c.label, score, p.output_model_id)
        })
        .collect();
    out.sort_by(Detection::rank_cmp);
    Ok(out)
}

/// Runs [`wbf`] image by image over several result sets (one per model).
/// Images are fused in parallel; output is ordered by image id.
pub fn wbf_result_sets(sets: &[ResultSet], p: &FusionParams) -> Result<ResultSet> {
    if sets.is_empty() {
        return Err(Error::invalid(
            "weighted box fusion needs at least one result set",
        ));
    }
    let grouped: Vec<BTreeMap<u64, Vec<Detection>>> =
        sets.iter().map(ResultSet::by_image).collect();
    let mut ids: Vec<u64> = grouped.iter().flat_map(|g| g.keys().copied()).collect();
    ids.sort_unstable();
    ids.dedup();

    let fused: Vec<(u64, Vec<Detection>)> = ids
        .par_iter()
        .map(|id| {
            let per_model: Vec<Vec<Detection>> = grouped
                .iter()
                .map(|g| g.get(id).cloned().unwrap_or_default())
                .collect();
            wbf(&per_model, p).map(|dets| (*id, dets))
        })
        .collect::<Result<_>>()?;

    let mut out = ResultSet::new(p.output_model_id);
    for (id, dets) in fused {
        for d in dets {
            out.push(id, d);
        }
    }
    Ok(out)
}

/// Orders models by AP@0.50:0.95 (then AP@0.50, then lower id) and keeps
/// the first `k`.
pub fn rank_and_select(reports: &[(u32, EvalReport)], k: usize) -> Result<Vec<u32>> {
    if reports.is_empty() {
        return Err(Error::invalid("no evaluation reports to rank"));
    }
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let mut ranked: Vec<&(u32, EvalReport)> = reports.iter().collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.ap.total_cmp(&a.ap)
            .then(b.ap50.total_cmp(&a.ap50))
            .then(ia.cmp(ib))
    });
    Ok(ranked.into_iter().take(k).map(|(id, _)| *id).collect())
}
