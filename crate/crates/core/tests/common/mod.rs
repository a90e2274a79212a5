//! Test-only reference implementations. Each one recomputes its answer from
//! definitions (exhaustive enumeration, direct sums) and shares no code path
//! with the library routine it checks.
#![allow(dead_code)]

pub mod eval_oracle;
pub mod pipeline;
pub mod wbf_oracle;

use detkit::mim_mask::{FeatureMap, Kernel};

/// Plain zero-padded 2-D convolution over every input site.
pub fn dense_conv2d(fm: &FeatureMap, kernel: &Kernel, stride: usize, padding: usize) -> Vec<f64> {
    let k = kernel.size;
    let out_h = (fm.height + 2 * padding - k) / stride + 1;
    let out_w = (fm.width + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; kernel.out_ch * out_h * out_w];
    for o in 0..kernel.out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for i in 0..kernel.in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0
                                || ix < 0
                                || iy >= fm.height as isize
                                || ix >= fm.width as isize
                            {
                                continue;
                            }
                            let w = kernel.weights[((o * kernel.in_ch + i) * k + ky) * k + kx];
                            let v =
                                fm.values[(i * fm.height + iy as usize) * fm.width + ix as usize];
                            acc += w * v;
                        }
                    }
                }
                out[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

/// IoU written out from scratch for the oracles.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub mod gen {
    //! Random instance generators shared by the oracle tests.

    use detkit::data_io::{Dataset, ImageRecord, ResultSet};
    use detkit::fusion::{ConfType, FusionParams};
    use detkit::{BBox, Detection, LabeledBox};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::eval_oracle::OImage;
    use super::wbf_oracle::{OracleDet, OracleParams};

    fn jitter(rng: &mut ChaCha8Rng, base: [f64; 4], noise: f64) -> [f64; 4] {
        let mut c = base.map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0));
        if c[0] > c[2] {
            c.swap(0, 2);
        }
        if c[1] > c[3] {
            c.swap(1, 3);
        }
        c[2] = c[2].max(c[0] + 0.01).min(1.0);
        c[3] = c[3].max(c[1] + 0.01).min(1.0);
        c
    }

    fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> [f64; 4] {
        let w = rng.random_range(min_side..max_side);
        let h = rng.random_range(min_side..max_side);
        let x = rng.random_range(0.0..1.0 - w);
        let y = rng.random_range(0.0..1.0 - h);
        [x, y, x + w, y + h]
    }

    pub struct WbfInstance {
        pub per_model: Vec<Vec<Detection>>,
        pub params: FusionParams,
        pub oracle_models: Vec<Vec<OracleDet>>,
        pub oracle_weights: Vec<f64>,
        pub oracle_params: OracleParams,
    }

    /// Up to 3 models and 6 boxes scattered around one or two objects.
    pub fn wbf_instance(rng: &mut ChaCha8Rng) -> WbfInstance {
        let models = rng.random_range(1..=3usize);
        let total = rng.random_range(0..=6usize);
        let bases: Vec<[f64; 4]> = (0..rng.random_range(1..=2))
            .map(|_| random_box(rng, 0.1, 0.5))
            .collect();
        let mut per_model = vec![Vec::new(); models];
        for _ in 0..total {
            let m = rng.random_range(0..models);
            let base = bases[rng.random_range(0..bases.len())];
            let noise = rng.random_range(0.0..0.08);
            let coords = jitter(rng, base, noise);
            let det = Detection::new(
                BBox::from_coords(coords),
                rng.random_range(0..2),
                rng.random_range(0.05..=1.0),
                m as u32,
            );
            per_model[m].push(det);
        }
        let weights = rng.random_bool(0.5).then(|| {
            (0..models)
                .map(|_| rng.random_range(0.5..2.0))
                .collect::<Vec<f64>>()
        });
        let params = FusionParams {
            iou_thr: rng.random_range(0.3..0.8),
            skip_thr: if rng.random_bool(0.3) { 0.2 } else { 0.0 },
            weights: weights.clone(),
            conf_type: if rng.random_bool(0.5) {
                ConfType::Avg
            } else {
                ConfType::Max
            },
            output_model_id: 0,
        };
        let oracle_models = per_model
            .iter()
            .map(|dets| {
                dets.iter()
                    .map(|d| OracleDet {
                        coords: d.bbox.coords(),
                        label: d.label,
                        score: d.score,
                        model: d.model_id,
                    })
                    .collect()
            })
            .collect();
        let oracle_params = OracleParams {
            iou_thr: params.iou_thr,
            skip_thr: params.skip_thr,
            use_max: params.conf_type == ConfType::Max,
        };
        WbfInstance {
            per_model,
            params,
            oracle_models,
            oracle_weights: weights.unwrap_or_else(|| vec![1.0; models]),
            oracle_params,
        }
    }

    /// Checks library output against oracle output as multisets, within `tol`.
    pub fn same_fusion(
        lib: &[Detection],
        oracle: &[([f64; 4], u32, f64)],
        tol: f64,
    ) -> Result<(), String> {
        if lib.len() != oracle.len() {
            return Err(format!(
                "{} fused boxes, oracle has {}",
                lib.len(),
                oracle.len()
            ));
        }
        let mut used = vec![false; lib.len()];
        for (coords, label, score) in oracle {
            let hit = lib.iter().enumerate().position(|(i, d)| {
                !used[i]
                    && d.label == *label
                    && (d.score - score).abs() <= tol
                    && d.bbox
                        .coords()
                        .iter()
                        .zip(coords)
                        .all(|(a, b)| (a - b).abs() <= tol)
            });
            match hit {
                Some(i) => used[i] = true,
                None => {
                    return Err(format!(
                        "oracle box {coords:?} label {label} score {score} not produced"
                    ))
                }
            }
        }
        Ok(())
    }

    pub struct MicroDataset {
        pub dataset: Dataset,
        pub results: ResultSet,
        pub oracle: Vec<OImage>,
    }

    /// Up to 4 images with up to 5 truths and 5 detections each, 2 classes.
    pub fn micro_dataset(rng: &mut ChaCha8Rng) -> MicroDataset {
        let sizes = [(200u32, 200u32), (160, 240), (320, 180)];
        let mut dataset = Dataset::default();
        let mut results = ResultSet::new(0);
        let mut oracle = Vec::new();
        for id in 1..=rng.random_range(1..=4u64) {
            let (w, h) = sizes[rng.random_range(0..sizes.len())];
            let truths: Vec<([f64; 4], u32)> = (0..rng.random_range(0..=5))
                .map(|_| (random_box(rng, 0.05, 0.6), rng.random_range(0..2)))
                .collect();
            let mut dets = Vec::new();
            for _ in 0..rng.random_range(0..=5) {
                let coords = if !truths.is_empty() && rng.random_bool(0.7) {
                    let t = truths[rng.random_range(0..truths.len())];
                    let noise = rng.random_range(0.0..0.08);
                    jitter(rng, t.0, noise)
                } else {
                    random_box(rng, 0.05, 0.6)
                };
                let label = rng.random_range(0..2);
                let score = if rng.random_bool(0.3) {
                    [0.5, 0.9][rng.random_range(0..2)]
                } else {
                    rng.random_range(0.01..1.0)
                };
                dets.push((coords, label, score));
            }
            dataset.images.push(ImageRecord {
                id,
                file_name: format!("{id}.png"),
                width: w,
                height: h,
                truths: truths
                    .iter()
                    .map(|(c, l)| LabeledBox::new(BBox::from_coords(*c), *l))
                    .collect(),
            });
            for (c, l, s) in &dets {
                results.push(id, Detection::new(BBox::from_coords(*c), *l, *s, 0));
            }
            oracle.push(OImage {
                id,
                width: w,
                height: h,
                truths,
                dets,
            });
        }
        MicroDataset {
            dataset,
            results,
            oracle,
        }
    }
}
