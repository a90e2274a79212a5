//! Box-aware training augmentations: HSV color jitter, horizontal flip,
//! letterbox resize, four-image mosaic and two-image mixup.
//!
//! Every transform is a pure function of its inputs; randomness only enters
//! through an explicitly passed [`AugRng`], so a fixed seed reproduces the
//! exact same pixels and boxes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::data_io::{AnnotatedImage, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};

/// Deterministic, platform-independent generator used for every random draw.
pub type AugRng = ChaCha8Rng;

/// Gray used for letterbox borders.
pub const PAD_GRAY: Rgb<u8> = Rgb([114, 114, 114]);

/// Per-image generator: `seed ^ image_id`, with `stream` selecting an
/// independent sequence for repeated passes over the same image.
pub fn rng_for(seed: u64, image_id: u64, stream: u64) -> AugRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ image_id);
    rng.set_stream(stream);
    rng
}

/// An RGB image and its labeled boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AugSample {
    pub image: RgbImage,
    pub boxes: Vec<LabeledBox>,
}

impl AugSample {
    pub fn new(image: RgbImage, boxes: Vec<LabeledBox>) -> Self {
        Self { image, boxes }
    }

    /// Clips every box to the image and drops those under `min_area`
    /// (normalized) or with zero width or height.
    pub fn sanitized(mut self, min_area: f64) -> Self {
        self.boxes = sanitize_boxes(self.boxes.into_iter(), &BBox::unit(), min_area);
        self
    }
}

impl From<AnnotatedImage> for AugSample {
    fn from(img: AnnotatedImage) -> Self {
        Self::new(img.pixels, img.truths)
    }
}

fn sanitize_boxes(
    boxes: impl Iterator<Item = LabeledBox>,
    region: &BBox,
    min_area: f64,
) -> Vec<LabeledBox> {
    boxes
        .map(|b| LabeledBox::new(b.bbox.clip_to(region), b.label))
        .filter(|b| b.bbox.width() > 0.0 && b.bbox.height() > 0.0 && b.bbox.area() >= min_area)
        .collect()
}

/// Nearest-neighbor resize; output pixel `(x, y)` samples source
/// `(floor(x * w / new_w), floor(y * h / new_h))`.
pub fn resize_nearest(img: &RgbImage, new_w: u32, new_h: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if (w, h) == (new_w, new_h) {
        return img.clone();
    }
    let cols: Vec<u32> = (0..new_w)
        .map(|x| (x as u64 * w as u64 / new_w as u64) as u32)
        .collect();
    RgbImage::from_fn(new_w, new_h, |x, y| {
        let sy = (y as u64 * h as u64 / new_h as u64) as u32;
        *img.get_pixel(cols[x as usize], sy)
    })
}

fn rgb_to_hsv(px: Rgb<u8>) -> [f64; 3] {
    let [r, g, b] = px.0.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (60.0 * (g - b) / delta).rem_euclid(360.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> Rgb<u8> {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |ch: f64| (ch + m).round().clamp(0.0, 255.0) as u8;
    Rgb([q(r), q(g), q(b)])
}

/// Scales hue, saturation and value by `1 + gain`. Hue wraps around the
/// color circle; saturation and value clamp. Boxes are untouched.
pub fn color_jitter(s: &AugSample, gains: [f64; 3]) -> AugSample {
    let [gh, gs, gv] = gains.map(|g| 1.0 + g);
    let mut image = s.image.clone();
    for px in image.pixels_mut() {
        let [h, sat, v] = rgb_to_hsv(*px);
        *px = hsv_to_rgb([
            (h * gh).rem_euclid(360.0),
            (sat * gs).clamp(0.0, 1.0),
            (v * gv).clamp(0.0, 255.0),
        ]);
    }
    AugSample::new(image, s.boxes.clone())
}

pub fn hflip(s: &AugSample) -> AugSample {
    let image = image::imageops::flip_horizontal(&s.image);
    let boxes = s
        .boxes
        .iter()
        .map(|b| LabeledBox::new(b.bbox.hflip(), b.label))
        .collect();
    AugSample::new(image, boxes)
}

/// Geometry of an aspect-preserving resize into a padded canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub src_w: u32,
    pub src_h: u32,
    pub dst_w: u32,
    pub dst_h: u32,
    /// `min(dst_w / src_w, dst_h / src_h)`.
    pub scale: f64,
    /// Size of the resized content inside the canvas.
    pub content_w: u32,
    pub content_h: u32,
    pub pad_x: u32,
    pub pad_y: u32,
}

impl Placement {
    pub fn new(src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> Result<Self> {
        if src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0 {
            return Err(Error::invalid(format!(
                "letterbox needs positive sizes, got {src_w}x{src_h} -> {dst_w}x{dst_h}"
            )));
        }
        let scale = (dst_w as f64 / src_w as f64).min(dst_h as f64 / src_h as f64);
        let fit = |src: u32, dst: u32| ((src as f64 * scale).round() as u32).clamp(1, dst);
        let (content_w, content_h) = (fit(src_w, dst_w), fit(src_h, dst_h));
        Ok(Self {
            src_w,
            src_h,
            dst_w,
            dst_h,
            scale,
            content_w,
            content_h,
            pad_x: (dst_w - content_w) / 2,
            pad_y: (dst_h - content_h) / 2,
        })
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        let fx =
            |x: f64| (self.pad_x as f64 + x * self.src_w as f64 * self.scale) / self.dst_w as f64;
        let fy =
            |y: f64| (self.pad_y as f64 + y * self.src_h as f64 * self.scale) / self.dst_h as f64;
        BBox::new(fx(b.x1), fy(b.y1), fx(b.x2), fy(b.y2))
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let ix =
            |x: f64| (x * self.dst_w as f64 - self.pad_x as f64) / (self.src_w as f64 * self.scale);
        let iy =
            |y: f64| (y * self.dst_h as f64 - self.pad_y as f64) / (self.src_h as f64 * self.scale);
        BBox::new(ix(b.x1), iy(b.y1), ix(b.x2), iy(b.y2))
    }

    pub fn apply_image(&self, img: &RgbImage, pad: Rgb<u8>) -> RgbImage {
        let content = resize_nearest(img, self.content_w, self.content_h);
        let mut canvas = RgbImage::from_pixel(self.dst_w, self.dst_h, pad);
        image::imageops::replace(&mut canvas, &content, self.pad_x as i64, self.pad_y as i64);
        canvas
    }
}

/// Aspect-preserving resize into `target_w x target_h`, centered, with
/// `pad` borders. The returned [`Placement`] inverts the box map.
pub fn letterbox(
    s: &AugSample,
    target_w: u32,
    target_h: u32,
    pad: Rgb<u8>,
) -> Result<(AugSample, Placement)> {
    let placement = Placement::new(s.image.width(), s.image.height(), target_w, target_h)?;
    let image = placement.apply_image(&s.image, pad);
    let boxes = s
        .boxes
        .iter()
        .map(|b| LabeledBox::new(placement.forward_box(&b.bbox), b.label))
        .collect();
    Ok((AugSample::new(image, boxes), placement))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosaicParams {
    pub out_size: u32,
    /// Allowed range for both center coordinates.
    pub center_range: [f64; 2],
    pub min_area: f64,
}

impl MosaicParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            out_size: cfg.aug_size,
            center_range: cfg.mosaic_center_range,
            min_area: cfg.min_box_area,
        }
    }
}

/// Quadrant split of a mosaic canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MosaicLayout {
    pub size: u32,
    /// Pixel column of the split.
    pub split_x: u32,
    /// Pixel row of the split.
    pub split_y: u32,
}

impl MosaicLayout {
    pub fn new(size: u32, center: (f64, f64)) -> Self {
        let at = |c: f64| ((c * size as f64).round() as u32).min(size);
        Self {
            size,
            split_x: at(center.0),
            split_y: at(center.1),
        }
    }

    /// Source index (0 TL, 1 TR, 2 BL, 3 BR) owning canvas pixel `(x, y)`.
    pub fn quadrant_of(&self, x: u32, y: u32) -> usize {
        usize::from(x >= self.split_x) + 2 * usize::from(y >= self.split_y)
    }

    /// Normalized rectangle covered by quadrant `i`.
    pub fn quadrant_rect(&self, i: usize) -> BBox {
        let s = self.size as f64;
        let (cx, cy) = (self.split_x as f64 / s, self.split_y as f64 / s);
        let (x1, x2) = if i.is_multiple_of(2) {
            (0.0, cx)
        } else {
            (cx, 1.0)
        };
        let (y1, y2) = if i < 2 { (0.0, cy) } else { (cy, 1.0) };
        BBox::new(x1, y1, x2, y2)
    }

    /// Pixel offset added to scaled-source coordinates to land on the canvas.
    /// Each source abuts the split point with its inner corner.
    fn shift(&self, i: usize) -> (i64, i64) {
        let s = self.size as i64;
        let (px, py) = (self.split_x as i64, self.split_y as i64);
        let dx = if i.is_multiple_of(2) { px - s } else { px };
        let dy = if i < 2 { py - s } else { py };
        (dx, dy)
    }
}

/// Composes four samples around `center` on an `out_size` square canvas.
///
/// Each source is scaled to the full canvas size, then shifted so that its
/// inner corner meets the center: the top-left quadrant shows the
/// bottom-right part of source 0, the top-right quadrant the bottom-left of
/// source 1, and so on. Boxes are shifted the same way and clipped to their
/// quadrant.
pub fn mosaic(
    sources: &[AugSample],
    center: (f64, f64),
    params: &MosaicParams,
) -> Result<AugSample> {
    if sources.len() != 4 {
        return Err(Error::invalid(format!(
            "mosaic needs exactly 4 sources, got {}",
            sources.len()
        )));
    }
    let [lo, hi] = params.center_range;
    if !(lo..=hi).contains(&center.0) || !(lo..=hi).contains(&center.1) {
        return Err(Error::invalid(format!(
            "mosaic center ({}, {}) outside [{lo}, {hi}]",
            center.0, center.1
        )));
    }
    if params.out_size == 0 {
        return Err(Error::invalid("mosaic out_size must be positive"));
    }

    let size = params.out_size;
    let layout = MosaicLayout::new(size, center);
    let mut canvas = RgbImage::new(size, size);
    let mut boxes = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let scaled = resize_nearest(&src.image, size, size);
        let (dx, dy) = layout.shift(i);
        let rect = layout.quadrant_rect(i);
        let xs = if i.is_multiple_of(2) {
            0..layout.split_x
        } else {
            layout.split_x..size
        };
        let ys = if i < 2 {
            0..layout.split_y
        } else {
            layout.split_y..size
        };
        for y in ys {
            let sy = (y as i64 - dy) as u32;
            for x in xs.clone() {
                let sx = (x as i64 - dx) as u32;
                canvas.put_pixel(x, y, *scaled.get_pixel(sx, sy));
            }
        }

        let (ox, oy) = (dx as f64 / size as f64, dy as f64 / size as f64);
        let shifted = src.boxes.iter().map(|b| {
            let bb = b.bbox;
            LabeledBox::new(
                BBox::new(bb.x1 + ox, bb.y1 + oy, bb.x2 + ox, bb.y2 + oy),
                b.label,
            )
        });
        boxes.extend(sanitize_boxes(shifted, &rect, params.min_area));
    }
    Ok(AugSample::new(canvas, boxes))
}

/// Pixel-wise blend `round(lambda * a + (1 - lambda) * b)`; boxes of both
/// inputs are kept.
pub fn mixup(a: &AugSample, b: &AugSample, lambda: f64) -> Result<AugSample> {
    if a.image.dimensions() != b.image.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "mixup inputs are {:?} and {:?}",
            a.image.dimensions(),
            b.image.dimensions()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    let mut image = a.image.clone();
    for (out, other) in image.iter_mut().zip(b.image.iter()) {
        let v = lambda * *out as f64 + (1.0 - lambda) * *other as f64;
        *out = v.round().clamp(0.0, 255.0) as u8;
    }
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    Ok(AugSample::new(image, boxes))
}

/// Draws the mixup proportion from `Beta(alpha, alpha)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut AugRng) -> Result<f64> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// Samples a mosaic center uniformly in the configured square.
pub fn sample_mosaic_center(range: [f64; 2], rng: &mut AugRng) -> (f64, f64) {
    let [lo, hi] = range;
    if lo == hi {
        return (lo, lo);
    }
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

fn base_view(
    pool: &[AugSample],
    index: usize,
    cfg: &PipelineConfig,
    rng: &mut AugRng,
) -> Result<AugSample> {
    let size = cfg.aug_size;
    if rng.random::<f64>() < cfg.mosaic_prob {
        let mut sources = Vec::with_capacity(4);
        sources.push(pool[index].clone());
        for _ in 0..3 {
            sources.push(pool[rng.random_range(0..pool.len())].clone());
        }
        let center = sample_mosaic_center(cfg.mosaic_center_range, rng);
        mosaic(&sources, center, &MosaicParams::from_config(cfg))
    } else {
        Ok(letterbox(&pool[index], size, size, PAD_GRAY)?.0)
    }
}

/// Full randomized training transform for `pool[index]`: mosaic (or
/// letterbox), optional mixup with a second composed view, HSV jitter and
/// horizontal flip. The output is `aug_size x aug_size`.
pub fn augment_random(
    pool: &[AugSample],
    index: usize,
    cfg: &PipelineConfig,
    rng: &mut AugRng,
) -> Result<AugSample> {
    if index >= pool.len() {
        return Err(Error::invalid(format!(
            "sample index {index} out of range for pool of {}",
            pool.len()
        )));
    }
    let mut sample = base_view(pool, index, cfg, rng)?;
    if rng.random::<f64>() < cfg.mixup_prob {
        let other_index = rng.random_range(0..pool.len());
        let other = base_view(pool, other_index, cfg, rng)?;
        let lambda = sample_mixup_lambda(cfg.mixup_alpha, rng)?;
        sample = mixup(&sample, &other, lambda)?;
    }
    let gains = cfg.hsv_gains.map(|g| {
        if g == 0.0 {
            0.0
        } else {
            rng.random_range(-g..=g)
        }
    });
    sample = color_jitter(&sample, gains);
    if rng.random::<f64>() < cfg.flip_prob {
        sample = hflip(&sample);
    }
    Ok(sample.sanitized(cfg.min_box_area))
}
