//! Data-side machinery for sparse masked image modeling.
//!
//! An image is cut into a grid of square patches and a fixed fraction of
//! them is hidden. Visible patches are treated as a sparse set of sites:
//! they can be gathered into a compact list, convolved without ever reading
//! a masked site, and scattered back with a mask embedding filling the
//! holes. Reconstruction targets are per-patch normalized pixels scored by
//! an L2 loss restricted to the masked patches.

use image::{Rgb, RgbImage};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::augment::AugRng;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_PATCH_SIZE: u32 = 32;
pub const DEFAULT_MASK_RATIO: f64 = 0.60;
pub const DEFAULT_SCALES: u32 = 4;
const VARIANCE_FLOOR: f64 = 1e-12;

/// Row-major boolean grid; `true` marks a visible site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMap {
    pub width: usize,
    pub height: usize,
    pub visible: Vec<bool>,
}

impl VisibilityMap {
    pub fn new(width: usize, height: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "visibility of length {} for a {width}x{height} grid",
                visible.len()
            )));
        }
        Ok(Self {
            width,
            height,
            visible,
        })
    }

    pub fn all_visible(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            visible: vec![true; width * height],
        }
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.width + col]
    }

    pub fn count_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Block replication: every site becomes a `factor x factor` block.
    pub fn upsample(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let visible = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| self.is_visible(r / factor, c / factor))
            .collect();
        Self {
            width: w,
            height: h,
            visible,
        }
    }
}

/// Patch size, masking ratio and hierarchy depth shared by all plans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub patch_size: u32,
    pub ratio: f64,
    /// Number of visibility maps; scale `s` has `2^s` times the grid resolution.
    pub num_scales: u32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            ratio: DEFAULT_MASK_RATIO,
            num_scales: DEFAULT_SCALES,
        }
    }
}

impl MaskSpec {
    fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::invalid(format!(
                "mask ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.num_scales == 0 {
            return Err(Error::invalid("at least one visibility scale is required"));
        }
        Ok(())
    }
}

/// Number of masked cells: `ratio * cells` rounded half up.
pub fn masked_count(cells: usize, ratio: f64) -> usize {
    ((ratio * cells as f64 + 0.5).floor() as usize).min(cells)
}

/// Pixel rectangle `(x, y, width, height)` covered by a plan's grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// A sampled patch mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_size: u32,
    pub ratio: f64,
    /// Image region the grid covers (the whole image unless cropped).
    pub region: PixelRect,
    /// Masked patch indices (row-major), ascending.
    pub masked: Vec<usize>,
    /// `scale_masks[0]` is the patch grid; each further scale doubles it.
    pub scale_masks: Vec<VisibilityMap>,
}

impl MaskPlan {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn visibility(&self) -> &VisibilityMap {
        &self.scale_masks[0]
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        !self.scale_masks[0].visible[patch]
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::json!({
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "patch_size": self.patch_size,
            "ratio": self.ratio,
            "region": self.region,
            "num_scales": self.scale_masks.len(),
            "masked": self.masked,
        });
        serde_json::to_string_pretty(&value).expect("plan serializes")
    }
}

/// Masks exactly `round(ratio * cells)` patches, uniformly without replacement.
pub fn sample_mask(
    grid_w: usize,
    grid_h: usize,
    spec: &MaskSpec,
    rng: &mut AugRng,
) -> Result<MaskPlan> {
    spec.validate()?;
    let cells = grid_w * grid_h;
    if cells == 0 {
        return Err(Error::invalid(format!(
            "empty patch grid {grid_w}x{grid_h}"
        )));
    }
    let count = masked_count(cells, spec.ratio);
    let mut masked = index::sample(rng, cells, count).into_vec();
    masked.sort_unstable();

    let mut visible = vec![true; cells];
    for &i in &masked {
        visible[i] = false;
    }
    let base = VisibilityMap::new(grid_w, grid_h, visible)?;
    let scale_masks = (0..spec.num_scales)
        .map(|s| base.upsample(1 << s))
        .collect();

    let p = spec.patch_size;
    Ok(MaskPlan {
        grid_w,
        grid_h,
        patch_size: p,
        ratio: spec.ratio,
        region: PixelRect {
            x: 0,
            y: 0,
            width: grid_w as u32 * p,
            height: grid_h as u32 * p,
        },
        masked,
        scale_masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    /// Mask over the full image grid.
    Whole,
    /// Crop the image to the region first and mask the cropped grid.
    Cut,
}

impl std::str::FromStr for RegionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(RegionMode::Whole),
            "cut" => Ok(RegionMode::Cut),
            other => Err(Error::invalid(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Samples a plan for an `image_w x image_h` image, optionally restricted
/// to `region` (normalized) in [`RegionMode::Cut`].
pub fn restrict_to_region(
    image_w: u32,
    image_h: u32,
    spec: &MaskSpec,
    region: &BBox,
    mode: RegionMode,
    rng: &mut AugRng,
) -> Result<MaskPlan> {
    spec.validate()?;
    if !region.is_valid() {
        return Err(Error::invalid(format!(
            "mask region {region:?} is not a valid box"
        )));
    }
    let rect = match mode {
        RegionMode::Whole => PixelRect {
            x: 0,
            y: 0,
            width: image_w,
            height: image_h,
        },
        RegionMode::Cut => {
            let px = |v: f64, size: u32| (v * size as f64).round() as u32;
            let (x1, x2) = (px(region.x1, image_w), px(region.x2, image_w));
            let (y1, y2) = (px(region.y1, image_h), px(region.y2, image_h));
            PixelRect {
                x: x1,
                y: y1,
                width: x2 - x1,
                height: y2 - y1,
            }
        }
    };
    let p = spec.patch_size;
    let (grid_w, grid_h) = ((rect.width / p) as usize, (rect.height / p) as usize);
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::invalid(format!(
            "region {}x{} px is smaller than one {p}px patch",
            rect.width, rect.height
        )));
    }
    let mut plan = sample_mask(grid_w, grid_h, spec, rng)?;
    plan.region = PixelRect {
        width: grid_w as u32 * p,
        height: grid_h as u32 * p,
        ..rect
    };
    Ok(plan)
}

/// The image area covered by a plan's grid.
pub fn crop_to_plan(image: &RgbImage, plan: &MaskPlan) -> RgbImage {
    let r = plan.region;
    image::imageops::crop_imm(image, r.x, r.y, r.width, r.height).to_image()
}

/// Copy of the plan's region with every masked patch filled with `color`.
pub fn paint_masked(image: &RgbImage, plan: &MaskPlan, color: Rgb<u8>) -> RgbImage {
    let mut out = crop_to_plan(image, plan);
    let p = plan.patch_size;
    for &idx in &plan.masked {
        let (row, col) = ((idx / plan.grid_w) as u32, (idx % plan.grid_w) as u32);
        for y in row * p..(row + 1) * p {
            for x in col * p..(col + 1) * p {
                out.put_pixel(x, y, color);
            }
        }
    }
    out
}

/// Pads right and bottom with black so both sides are multiples of `patch`.
pub fn pad_to_multiple(image: &RgbImage, patch: u32) -> RgbImage {
    let round_up = |v: u32| v.div_ceil(patch) * patch;
    let (w, h) = image.dimensions();
    if w % patch == 0 && h % patch == 0 {
        return image.clone();
    }
    let mut out = RgbImage::new(round_up(w), round_up(h));
    image::imageops::replace(&mut out, image, 0, 0);
    out
}

/// Per-patch pixel vectors, patches in row-major grid order. Inside a patch
/// values are ordered by row, column, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTarget {
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_len: usize,
    pub values: Vec<f64>,
}

impl PatchTarget {
    pub fn new(grid_w: usize, grid_h: usize, patch_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid_w * grid_h * patch_len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {grid_w}x{grid_h} patches of {patch_len}",
                values.len()
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            patch_len,
            values,
        })
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.values[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn num_patches(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

/// Splits an image into raw pixel patches.
pub fn patchify(image: &RgbImage, patch_size: u32) -> Result<PatchTarget> {
    let (w, h) = image.dimensions();
    if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} image is not divisible into {patch_size}px patches"
        )));
    }
    let p = patch_size;
    let (gw, gh) = (w / p, h / p);
    let mut values = Vec::with_capacity((w * h * 3) as usize);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    values.extend(image.get_pixel(x, y).0.iter().map(|&v| v as f64));
                }
            }
        }
    }
    PatchTarget::new(gw as usize, gh as usize, (p * p * 3) as usize, values)
}

/// Shifts and scales one patch to zero mean and unit population variance.
/// Near-constant patches become all zeros.
pub fn normalize_patch(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        values.fill(0.0);
        return;
    }
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Reconstruction target: every patch independently normalized.
pub fn per_patch_normalize(image: &RgbImage, patch_size: u32) -> Result<PatchTarget> {
    let mut target = patchify(image, patch_size)?;
    for i in 0..target.num_patches() {
        normalize_patch(target.patch_mut(i));
    }
    Ok(target)
}

/// Mean over masked patches of the per-element mean squared error.
pub fn masked_l2_loss(pred: &PatchTarget, target: &PatchTarget, plan: &MaskPlan) -> Result<f64> {
    let shape = |t: &PatchTarget| (t.grid_w, t.grid_h, t.patch_len);
    if shape(pred) != shape(target) || (pred.grid_w, pred.grid_h) != (plan.grid_w, plan.grid_h) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, target {:?}, plan grid {}x{}",
            shape(pred),
            shape(target),
            plan.grid_w,
            plan.grid_h
        )));
    }
    if plan.masked.is_empty() {
        return Err(Error::invalid("loss is undefined without masked patches"));
    }
    let total: f64 = plan
        .masked
        .iter()
        .map(|&i| {
            let sq: f64 = pred
                .patch(i)
                .iter()
                .zip(target.patch(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq / pred.patch_len as f64
        })
        .sum();
    Ok(total / plan.masked.len() as f64)
}

/// Dense `channels x height x width` buffer with a visibility map.
///
/// Maps built with [`FeatureMap::sparse`] keep 0 at masked sites; maps from
/// [`scatter_with_embedding`] hold the embedding there instead.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub visibility: VisibilityMap,
}

impl FeatureMap {
    /// Builds a sparse map, zeroing every masked site.
    pub fn sparse(channels: usize, values: Vec<f64>, visibility: VisibilityMap) -> Result<Self> {
        let (height, width) = (visibility.height, visibility.width);
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        let mut fm = Self {
            channels,
            height,
            width,
            values,
            visibility,
        };
        for pos in 0..height * width {
            if !fm.visibility.visible[pos] {
                for c in 0..channels {
                    fm.values[c * height * width + pos] = 0.0;
                }
            }
        }
        Ok(fm)
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.height + row) * self.width + col]
    }

    fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.values[(c * self.height + row) * self.width + col] = v;
    }
}

/// One visible site and its channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub features: Vec<f64>,
}

/// Visible sites in row-major order.
pub fn sparse_gather(fm: &FeatureMap) -> Vec<SparseEntry> {
    let mut out = Vec::with_capacity(fm.visibility.count_visible());
    for row in 0..fm.height {
        for col in 0..fm.width {
            if fm.visibility.is_visible(row, col) {
                let features = (0..fm.channels).map(|c| fm.get(c, row, col)).collect();
                out.push(SparseEntry { row, col, features });
            }
        }
    }
    out
}

/// Densifies `entries`, filling every masked site with `embed`. Visible
/// sites without an entry are zero.
pub fn scatter_with_embedding(
    entries: &[SparseEntry],
    visibility: &VisibilityMap,
    embed: &[f64],
) -> Result<FeatureMap> {
    let channels = embed.len();
    let (height, width) = (visibility.height, visibility.width);
    let mut fm = FeatureMap {
        channels,
        height,
        width,
        values: vec![0.0; channels * height * width],
        visibility: visibility.clone(),
    };
    for row in 0..height {
        for col in 0..width {
            if !visibility.is_visible(row, col) {
                for (c, &v) in embed.iter().enumerate() {
                    fm.set(c, row, col, v);
                }
            }
        }
    }
    for e in entries {
        if e.row >= height || e.col >= width {
            return Err(Error::ShapeMismatch(format!(
                "entry ({}, {}) outside {height}x{width} map",
                e.row, e.col
            )));
        }
        if e.features.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "entry ({}, {}) has {} channels, embedding has {channels}",
                e.row,
                e.col,
                e.features.len()
            )));
        }
        if !visibility.is_visible(e.row, e.col) {
            return Err(Error::invalid(format!(
                "entry ({}, {}) sits on a masked site",
                e.row, e.col
            )));
        }
        for (c, &v) in e.features.iter().enumerate() {
            fm.set(c, e.row, e.col, v);
        }
    }
    Ok(fm)
}

/// Convolution weights laid out as `(out_ch, in_ch, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub out_ch: usize,
    pub in_ch: usize,
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn new(out_ch: usize, in_ch: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if weights.len() != out_ch * in_ch * size * size {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a ({out_ch}, {in_ch}, {size}, {size}) kernel",
                weights.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            size,
            weights,
        })
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_ch + i) * self.size + ky) * self.size + kx]
    }
}

/// Submanifold-style convolution over the visible sites of `fm`.
///
/// Taps that land on masked or out-of-bounds inputs contribute nothing, so
/// values stored at masked sites are never read. An output site is visible
/// iff the input site under its kernel center is visible; with the usual
/// `padding = k / 2` that is input `(stride * row, stride * col)`, the
/// top-left site of each stride block. Masked outputs are 0.
pub fn sparse_conv2d(
    fm: &FeatureMap,
    kernel: &Kernel,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap> {
    if kernel.in_ch != fm.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {} input channels, map has {}",
            kernel.in_ch, fm.channels
        )));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!(
            "stride must be 1 or 2, got {stride}"
        )));
    }
    let k = kernel.size;
    if fm.height + 2 * padding < k || fm.width + 2 * padding < k {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} map with padding {padding} is smaller than a {k}x{k} kernel",
            fm.height, fm.width
        )));
    }
    let out_h = (fm.height + 2 * padding - k) / stride + 1;
    let out_w = (fm.width + 2 * padding - k) / stride + 1;
    let half = k / 2;

    // input coordinate of a tap, or None when it falls in the padding
    let input_at = |out: usize, tap: usize, limit: usize| -> Option<usize> {
        let pos = (out * stride + tap) as isize - padding as isize;
        (0..limit as isize).contains(&pos).then_some(pos as usize)
    };

    let mut visible = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let center = input_at(oy, half, fm.height).zip(input_at(ox, half, fm.width));
            visible.push(center.is_some_and(|(y, x)| fm.visibility.is_visible(y, x)));
        }
    }
    let visibility = VisibilityMap::new(out_w, out_h, visible)?;

    let mut values = vec![0.0; kernel.out_ch * out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            if !visibility.is_visible(oy, ox) {
                continue;
            }
            for o in 0..kernel.out_ch {
                let mut acc = 0.0;
                for ky in 0..k {
                    let Some(iy) = input_at(oy, ky, fm.height) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = input_at(ox, kx, fm.width) else {
                            continue;
                        };
                        if !fm.visibility.is_visible(iy, ix) {
                            continue;
                        }
                        for i in 0..kernel.in_ch {
                            acc += kernel.weight(o, i, ky, kx) * fm.get(i, iy, ix);
                        }
                    }
                }
                values[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Ok(FeatureMap {
        channels: kernel.out_ch,
        height: out_h,
        width: out_w,
        values,
        visibility,
    })
}
