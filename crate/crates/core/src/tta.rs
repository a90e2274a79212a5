//! Test-time augmentation: invertible views of a test image and the
//! inverse mapping of per-view detections back to original coordinates.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::augment::{Placement, PAD_GRAY};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// A view of the test image a detector is run on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewTransform {
    Identity,
    Hflip,
    /// Letterbox into a fixed canvas.
    Letterbox {
        width: u32,
        height: u32,
    },
    /// Letterbox into the native size multiplied by `factor`.
    Scale {
        factor: f64,
    },
}

impl ViewTransform {
    /// Inversion record for an image of the given native size.
    pub fn record(&self, width: u32, height: u32) -> Result<ViewRecord> {
        Ok(match *self {
            ViewTransform::Identity => ViewRecord::Identity { width, height },
            ViewTransform::Hflip => ViewRecord::Hflip { width, height },
            ViewTransform::Letterbox {
                width: tw,
                height: th,
            } => ViewRecord::Letterbox(Placement::new(width, height, tw, th)?),
            ViewTransform::Scale { factor } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(Error::invalid(format!(
                        "view scale {factor} must be positive"
                    )));
                }
                let at = |v: u32| ((v as f64 * factor).round() as u32).max(1);
                ViewRecord::Letterbox(Placement::new(width, height, at(width), at(height))?)
            }
        })
    }
}

/// Identity, horizontal flip, and resizes to 1.25x and 0.75x.
pub fn default_views() -> Vec<ViewTransform> {
    vec![
        ViewTransform::Identity,
        ViewTransform::Hflip,
        ViewTransform::Scale { factor: 1.25 },
        ViewTransform::Scale { factor: 0.75 },
    ]
}

/// A non-empty view list whose first entry is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet(Vec<ViewTransform>);

impl ViewSet {
    pub fn new(views: Vec<ViewTransform>) -> Result<Self> {
        match views.first() {
            None => Err(Error::invalid("at least one TTA view is required")),
            Some(ViewTransform::Identity) => Ok(Self(views)),
            Some(other) => Err(Error::invalid(format!(
                "the first TTA view must be identity, got {other:?}"
            ))),
        }
    }

    pub fn views(&self) -> &[ViewTransform] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One record per view for an image of the given size.
    pub fn records(&self, width: u32, height: u32) -> Result<Vec<ViewRecord>> {
        self.0.iter().map(|v| v.record(width, height)).collect()
    }
}

impl Default for ViewSet {
    fn default() -> Self {
        Self(default_views())
    }
}

/// Everything needed to map boxes between a view and the original image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewRecord {
    Identity { width: u32, height: u32 },
    Hflip { width: u32, height: u32 },
    Letterbox(Placement),
}

impl ViewRecord {
    /// Pixel size of the view image.
    pub fn view_size(&self) -> (u32, u32) {
        match *self {
            ViewRecord::Identity { width, height } | ViewRecord::Hflip { width, height } => {
                (width, height)
            }
            ViewRecord::Letterbox(p) => (p.dst_w, p.dst_h),
        }
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        match self {
            ViewRecord::Identity { .. } => *b,
            ViewRecord::Hflip { .. } => b.hflip(),
            ViewRecord::Letterbox(p) => p.forward_box(b),
        }
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        match self {
            ViewRecord::Identity { .. } => *b,
            ViewRecord::Hflip { .. } => b.hflip(),
            ViewRecord::Letterbox(p) => p.inverse_box(b),
        }
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        match self {
            ViewRecord::Identity { .. } => img.clone(),
            ViewRecord::Hflip { .. } => image::imageops::flip_horizontal(img),
            ViewRecord::Letterbox(p) => p.apply_image(img, PAD_GRAY),
        }
    }
}

/// Renders every view of `image` together with its inversion record.
pub fn apply_views(image: &RgbImage, views: &ViewSet) -> Result<Vec<(RgbImage, ViewRecord)>> {
    let (w, h) = image.dimensions();
    views
        .records(w, h)?
        .into_iter()
        .map(|rec| Ok((rec.apply_image(image), rec)))
        .collect()
}

/// Maps each view's detections back to original coordinates and
/// concatenates them in view order. Scores and labels pass through.
pub fn invert_detections(
    per_view: &[Vec<Detection>],
    records: &[ViewRecord],
) -> Result<Vec<Detection>> {
    if per_view.len() != records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection lists for {} views",
            per_view.len(),
            records.len()
        )));
    }
    Ok(per_view
        .iter()
        .zip(records)
        .flat_map(|(dets, rec)| {
            dets.iter().map(move |d| Detection {
                bbox: rec.inverse_box(&d.bbox).clip(),
                ..*d
            })
        })
        .collect())
}
