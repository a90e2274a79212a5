//! Brute-force COCO-style evaluator.
//!
//! Matching: every partial one-to-one assignment of detections to truths is
//! enumerated and the unique one obeying the greedy rule (each detection, in
//! score order, takes the best still-free truth at or above the threshold)
//! is kept. AP: for each of the 101 recall levels, the maximum precision
//! over all ranks whose recall reaches that level, straight from the
//! definition.

use std::collections::BTreeSet;

use super::iou;

#[derive(Debug, Clone)]
pub struct OImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// `(coords, label)`
    pub truths: Vec<([f64; 4], u32)>,
    /// `(coords, label, score)`
    pub dets: Vec<([f64; 4], u32, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Small, medium, large.
    pub sizes: [Option<f64>; 3],
    /// `(label, per-threshold AP)`
    pub per_class: Vec<(u32, Vec<f64>)>,
}

fn size_of(c: [f64; 4], w: u32, h: u32) -> usize {
    let area = (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0) * w as f64 * h as f64;
    if area < 1024.0 {
        0
    } else if area < 9216.0 {
        1
    } else {
        2
    }
}

fn greedy_valid(
    dets: &[[f64; 4]],
    truths: &[[f64; 4]],
    assign: &[Option<usize>],
    thr: f64,
) -> bool {
    let mut used = vec![false; truths.len()];
    for (i, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = iou(*d, *t);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if assign[i] != best.map(|(j, _)| j) {
            return false;
        }
        if let Some(j) = assign[i] {
            used[j] = true;
        }
    }
    true
}

fn all_assignments(n_det: usize, n_truth: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(
        i: usize,
        n: usize,
        m: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(i + 1, n, m, used, cur, out);
        cur.pop();
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                rec(i + 1, n, m, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(
        0,
        n_det,
        n_truth,
        &mut vec![false; n_truth],
        &mut Vec::new(),
        &mut out,
    );
    out
}

fn match_brute(dets: &[[f64; 4]], truths: &[[f64; 4]], thr: f64) -> Vec<Option<usize>> {
    let valid: Vec<Vec<Option<usize>>> = all_assignments(dets.len(), truths.len())
        .into_iter()
        .filter(|a| greedy_valid(dets, truths, a, thr))
        .collect();
    assert_eq!(valid.len(), 1, "greedy rule must pick a unique matching");
    valid.into_iter().next().unwrap()
}

fn ap_definition(flags: &[bool], g: usize) -> f64 {
    let mut sum = 0.0;
    for r in 0..=100u64 {
        let mut best = 0.0f64;
        let mut tp = 0u64;
        for (k, f) in flags.iter().enumerate() {
            tp += *f as u64;
            if tp * 100 >= r * g as u64 {
                best = best.max(tp as f64 / (k + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

struct Row {
    score: f64,
    image: u64,
    coords: [f64; 4],
    own_size: usize,
    matched: Vec<Option<usize>>, // truth size per threshold
}

pub fn evaluate_oracle(images: &[OImage]) -> OReport {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let classes: BTreeSet<u32> = images
        .iter()
        .flat_map(|im| im.truths.iter().map(|t| t.1))
        .collect();

    let mut per_class = Vec::new();
    let mut size_lists: [Vec<f64>; 3] = Default::default();
    for &c in &classes {
        let mut rows: Vec<Row> = Vec::new();
        let mut counts = [0usize; 3];
        for im in images {
            let truths: Vec<[f64; 4]> =
                im.truths.iter().filter(|t| t.1 == c).map(|t| t.0).collect();
            let tsizes: Vec<usize> = truths
                .iter()
                .map(|t| size_of(*t, im.width, im.height))
                .collect();
            for s in &tsizes {
                counts[*s] += 1;
            }
            let mut dets: Vec<([f64; 4], f64)> = im
                .dets
                .iter()
                .filter(|d| d.1 == c)
                .map(|d| (d.0, d.2))
                .collect();
            dets.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then(a.0[0].partial_cmp(&b.0[0]).unwrap())
                    .then(a.0[1].partial_cmp(&b.0[1]).unwrap())
                    .then(a.0[2].partial_cmp(&b.0[2]).unwrap())
                    .then(a.0[3].partial_cmp(&b.0[3]).unwrap())
            });
            let boxes: Vec<[f64; 4]> = dets.iter().map(|d| d.0).collect();
            let per_thr: Vec<Vec<Option<usize>>> = thresholds
                .iter()
                .map(|&t| match_brute(&boxes, &truths, t))
                .collect();
            for (i, d) in dets.iter().enumerate() {
                rows.push(Row {
                    score: d.1,
                    image: im.id,
                    coords: d.0,
                    own_size: size_of(d.0, im.width, im.height),
                    matched: per_thr.iter().map(|m| m[i].map(|j| tsizes[j])).collect(),
                });
            }
        }
        rows.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.image.cmp(&b.image))
                .then(a.coords[0].partial_cmp(&b.coords[0]).unwrap())
                .then(a.coords[1].partial_cmp(&b.coords[1]).unwrap())
                .then(a.coords[2].partial_cmp(&b.coords[2]).unwrap())
                .then(a.coords[3].partial_cmp(&b.coords[3]).unwrap())
        });
        let g: usize = counts.iter().sum();
        let aps: Vec<f64> = (0..10)
            .map(|t| {
                ap_definition(
                    &rows
                        .iter()
                        .map(|r| r.matched[t].is_some())
                        .collect::<Vec<_>>(),
                    g,
                )
            })
            .collect();
        for s in 0..3 {
            if counts[s] == 0 {
                continue;
            }
            let mean = (0..10)
                .map(|t| {
                    let flags: Vec<bool> = rows
                        .iter()
                        .filter(|r| r.matched[t].unwrap_or(r.own_size) == s)
                        .map(|r| r.matched[t].is_some())
                        .collect();
                    ap_definition(&flags, counts[s])
                })
                .sum::<f64>()
                / 10.0;
            size_lists[s].push(mean);
        }
        per_class.push((c, aps));
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let class_means: Vec<f64> = per_class
        .iter()
        .map(|(_, a)| a.iter().sum::<f64>() / 10.0)
        .collect();
    OReport {
        ap: mean(&class_means).unwrap_or(0.0),
        ap50: mean(&per_class.iter().map(|(_, a)| a[0]).collect::<Vec<_>>()).unwrap_or(0.0),
        ap75: mean(&per_class.iter().map(|(_, a)| a[5]).collect::<Vec<_>>()).unwrap_or(0.0),
        sizes: [
            mean(&size_lists[0]),
            mean(&size_lists[1]),
            mean(&size_lists[2]),
        ],
        per_class,
    }
}
