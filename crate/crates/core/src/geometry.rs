//! Normalized axis-aligned boxes and the detection record built on them.
//!
//! Every coordinate in the crate lives in `[0, 1]` image space; pixel units
//! only appear at I/O boundaries and in [`BBox::size_class`].

use serde::{Deserialize, Serialize};

/// Area (in squared pixels) below which a box is `Small`.
pub const SMALL_AREA_PX: f64 = 32.0 * 32.0;
/// Area (in squared pixels) below which a box is `Medium`.
pub const MEDIUM_AREA_PX: f64 = 96.0 * 96.0;
/// Default normalized area below which augmented boxes are dropped.
pub const DEFAULT_MIN_AREA: f64 = 1e-6;

/// Axis-aligned rectangle in normalized `xyxy` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub const fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    /// Builds a normalized box from a COCO pixel `[x, y, w, h]` bbox.
    pub fn from_pixel_xywh(xywh: [f64; 4], img_w: u32, img_h: u32) -> Self {
        let (w, h) = (img_w as f64, img_h as f64);
        let [x, y, bw, bh] = xywh;
        Self::new(x / w, y / h, (x + bw) / w, (y + bh) / h)
    }

    /// Inverse of [`BBox::from_pixel_xywh`].
    pub fn to_pixel_xywh(&self, img_w: u32, img_h: u32) -> [f64; 4] {
        let (w, h) = (img_w as f64, img_h as f64);
        [
            self.x1 * w,
            self.y1 * h,
            (self.x2 - self.x1) * w,
            (self.y2 - self.y1) * h,
        ]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|c| c.is_finite())
    }

    /// True when the box satisfies the ordering and `[0, 1]` range invariants.
    pub fn is_valid(&self) -> bool {
        let in_unit = |c: f64| (0.0..=1.0).contains(&c);
        self.coords().iter().all(|&c| in_unit(c)) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clamps every coordinate to `[0, 1]` and restores `x1 <= x2`, `y1 <= y2`.
    pub fn clip(&self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x1, x2) = (c(self.x1), c(self.x2));
        let (y1, y2) = (c(self.y1), c(self.y2));
        BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
    }

    /// Clamps the box into an arbitrary normalized rectangle.
    pub fn clip_to(&self, region: &BBox) -> BBox {
        let cx = |v: f64| v.clamp(region.x1, region.x2);
        let cy = |v: f64| v.clamp(region.y1, region.y2);
        let (x1, x2) = (cx(self.x1), cx(self.x2));
        let (y1, y2) = (cy(self.y1), cy(self.y2));
        BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
    }

    /// Mirror image about the vertical center line.
    pub fn hflip(&self) -> BBox {
        BBox::new(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn size_class(&self, img_w: u32, img_h: u32) -> SizeClass {
        SizeClass::from_pixel_area(self.area() * img_w as f64 * img_h as f64)
    }
}

/// COCO object size buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn from_pixel_area(area: f64) -> Self {
        if area < SMALL_AREA_PX {
            SizeClass::Small
        } else if area < MEDIUM_AREA_PX {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

/// A box paired with its category id (ground truth or augmented label).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: u32,
}

impl LabeledBox {
    pub fn new(bbox: BBox, label: u32) -> Self {
        Self { bbox, label }
    }
}

/// A scored box emitted by one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: u32,
    pub score: f64,
    pub model_id: u32,
}

impl Detection {
    pub fn new(bbox: BBox, label: u32, score: f64, model_id: u32) -> Self {
        Self {
            bbox,
            label,
            score,
            model_id,
        }
    }

    /// Deterministic "best first" ordering: score descending, then label,
    /// coordinates and model id ascending.
    pub fn rank_cmp(&self, other: &Detection) -> std::cmp::Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.label.cmp(&other.label))
            .then(self.bbox.x1.total_cmp(&other.bbox.x1))
            .then(self.bbox.y1.total_cmp(&other.bbox.y1))
            .then(self.model_id.cmp(&other.model_id))
            .then(self.bbox.x2.total_cmp(&other.bbox.x2))
            .then(self.bbox.y2.total_cmp(&other.bbox.y2))
    }
}
