//! Weighted box fusion by exhaustive assignment.
//!
//! Every set partition of the pooled detections (as a restricted growth
//! string over processing order) is tested against the clustering rule:
//! each detection must join the best-overlapping compatible cluster formed
//! by earlier detections, or open a new cluster when none qualifies.
//! Exactly one partition satisfies the rule; its clusters are then scored
//! with closed-form sums.

use std::cmp::Ordering;

use super::iou;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDet {
    pub coords: [f64; 4],
    pub label: u32,
    pub score: f64,
    pub model: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    pub iou_thr: f64,
    pub skip_thr: f64,
    pub use_max: bool,
}

fn order(a: &OracleDet, b: &OracleDet) -> Ordering {
    let c = |x: f64, y: f64| x.partial_cmp(&y).unwrap();
    c(b.score, a.score)
        .then(a.label.cmp(&b.label))
        .then(c(a.coords[0], b.coords[0]))
        .then(c(a.coords[1], b.coords[1]))
        .then(a.model.cmp(&b.model))
        .then(c(a.coords[2], b.coords[2]))
        .then(c(a.coords[3], b.coords[3]))
}

fn weighted_box(members: &[OracleDet]) -> [f64; 4] {
    let total: f64 = members.iter().map(|m| m.score).sum();
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = members.iter().map(|m| m.score * m.coords[k]).sum::<f64>() / total;
    }
    out
}

/// All restricted growth strings of length `n`.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let limit = if prefix.is_empty() { 0 } else { max + 1 };
        for c in 0..=limit {
            prefix.push(c);
            grow(prefix, n, max.max(c), out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, 0, &mut out);
    out
}

fn consistent(dets: &[OracleDet], assign: &[usize], thr: f64) -> bool {
    for i in 0..dets.len() {
        let opened = assign[..i].iter().copied().max().map_or(0, |m| m + 1);
        let mut best: Option<(usize, f64)> = None;
        for c in 0..opened {
            let members: Vec<OracleDet> = (0..i)
                .filter(|&j| assign[j] == c)
                .map(|j| dets[j])
                .collect();
            if members[0].label != dets[i].label {
                continue;
            }
            let v = iou(weighted_box(&members), dets[i].coords);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        let expected = best.map_or(opened, |(c, _)| c);
        if assign[i] != expected {
            return false;
        }
    }
    true
}

/// Fused `(coords, label, score)` triples, best first.
pub fn wbf_oracle(
    per_model: &[Vec<OracleDet>],
    weights: &[f64],
    p: &OracleParams,
) -> Vec<([f64; 4], u32, f64)> {
    let n_models = per_model.len() as f64;
    let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
    let mut pool: Vec<OracleDet> = Vec::new();
    for (m, dets) in per_model.iter().enumerate() {
        for d in dets {
            if d.score >= p.skip_thr {
                pool.push(OracleDet {
                    score: d.score * weights[m] / max_w,
                    ..*d
                });
            }
        }
    }
    pool.sort_by(order);

    let valid: Vec<Vec<usize>> = partitions(pool.len())
        .into_iter()
        .filter(|a| consistent(&pool, a, p.iou_thr))
        .collect();
    assert_eq!(
        valid.len(),
        1,
        "clustering rule must determine a unique partition"
    );
    let assign = &valid[0];

    let clusters = assign.iter().copied().max().map_or(0, |m| m + 1);
    let mut out: Vec<([f64; 4], u32, f64)> = (0..clusters)
        .map(|c| {
            let members: Vec<OracleDet> = pool
                .iter()
                .zip(assign)
                .filter(|(_, a)| **a == c)
                .map(|(d, _)| *d)
                .collect();
            let t = members.len() as f64;
            let conf = if p.use_max {
                members.iter().map(|m| m.score).fold(0.0, f64::max)
            } else {
                members.iter().map(|m| m.score).sum::<f64>() / t
            };
            (
                weighted_box(&members),
                members[0].label,
                conf * t.min(n_models) / n_models,
            )
        })
        .collect();
    out.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.0[0].partial_cmp(&b.0[0]).unwrap())
            .then(a.0[1].partial_cmp(&b.0[1]).unwrap())
    });
    out
}
