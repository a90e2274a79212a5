//! COCO-format annotations and results, RGB image files, and the JSON
//! pipeline configuration.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ConfType;
use crate::geometry::{BBox, Detection, LabeledBox, DEFAULT_MIN_AREA};
use crate::tta::ViewTransform;

/// Pixel dimensions `(width, height)` keyed by image id.
pub type ImageDims = HashMap<u64, (u32, u32)>;

/// Image metadata and ground truth, without pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub truths: Vec<LabeledBox>,
}

/// An image with its decoded RGB pixels and ground truth.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: u64,
    pub pixels: RgbImage,
    pub truths: Vec<LabeledBox>,
}

impl AnnotatedImage {
    /// Decodes the record's image file from `image_dir`.
    pub fn load(record: &ImageRecord, image_dir: &Path) -> Result<Self> {
        let path = image_dir.join(&record.file_name);
        let pixels = load_image(&path)?;
        if pixels.dimensions() != (record.width, record.height) {
            return Err(Error::ShapeMismatch(format!(
                "{} is {}x{}, annotations say {}x{}",
                path.display(),
                pixels.width(),
                pixels.height(),
                record.width,
                record.height
            )));
        }
        Ok(Self {
            id: record.id,
            pixels,
            truths: record.truths.clone(),
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// A loaded COCO annotation file.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    /// Number of annotation boxes that fell outside their image and were clipped.
    pub clipped: usize,
}

impl Dataset {
    pub fn dims(&self) -> ImageDims {
        self.images
            .iter()
            .map(|im| (im.id, (im.width, im.height)))
            .collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }
}

/// Detections from one model, keyed by image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultSet {
    pub model_id: u32,
    pub entries: Vec<(u64, Detection)>,
}

impl ResultSet {
    pub fn new(model_id: u32) -> Self {
        Self {
            model_id,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, image_id: u64, mut det: Detection) {
        det.model_id = self.model_id;
        self.entries.push((image_id, det));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Detections grouped by image id (ids in ascending order).
    pub fn by_image(&self) -> std::collections::BTreeMap<u64, Vec<Detection>> {
        let mut out = std::collections::BTreeMap::<u64, Vec<Detection>>::new();
        for (id, det) in &self.entries {
            out.entry(*id).or_default().push(*det);
        }
        out
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoResult {
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    score: f64,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    parse_annotations(&read_to_string(path)?, &path.display().to_string())
}

/// Parses COCO annotation JSON. Pixel `[x, y, w, h]` boxes become normalized
/// `xyxy`; boxes reaching outside their image are clipped and counted.
pub fn parse_annotations(json: &str, context: &str) -> Result<Dataset> {
    let raw: CocoFile = serde_json::from_str(json).map_err(|e| Error::json(context, e))?;

    let mut images: Vec<ImageRecord> = Vec::with_capacity(raw.images.len());
    let mut index = HashMap::new();
    for im in raw.images {
        if im.width == 0 || im.height == 0 {
            return Err(Error::invalid(format!(
                "{context}: image {} has zero size",
                im.id
            )));
        }
        if index.insert(im.id, images.len()).is_some() {
            return Err(Error::invalid(format!(
                "{context}: duplicate image id {}",
                im.id
            )));
        }
        images.push(ImageRecord {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            truths: Vec::new(),
        });
    }

    let mut clipped = 0;
    let mut unknown = BTreeSet::new();
    for ann in raw.annotations {
        let Some(&slot) = index.get(&ann.image_id) else {
            unknown.insert(ann.image_id);
            continue;
        };
        let rec = &mut images[slot];
        let bbox = BBox::from_pixel_xywh(ann.bbox, rec.width, rec.height);
        if !bbox.is_finite() {
            return Err(Error::invalid(format!(
                "{context}: annotation {} has a non-finite bbox",
                ann.id
            )));
        }
        let fixed = bbox.clip();
        if fixed != bbox {
            clipped += 1;
        }
        rec.truths.push(LabeledBox::new(fixed, ann.category_id));
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }
    if clipped > 0 {
        log::warn!("{context}: clipped {clipped} annotation boxes to their image bounds");
    }

    Ok(Dataset {
        images,
        categories: raw.categories,
        clipped,
    })
}

/// Writes a COCO annotation file with pixel `[x, y, w, h]` boxes.
pub fn save_annotations(dataset: &Dataset, path: &Path) -> Result<()> {
    write_string(path, &annotations_to_json(dataset)?)
}

pub fn annotations_to_json(dataset: &Dataset) -> Result<String> {
    let mut annotations = Vec::new();
    for im in &dataset.images {
        for t in &im.truths {
            let bbox = t.bbox.to_pixel_xywh(im.width, im.height);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: im.id,
                category_id: t.label,
                bbox,
                area: Some(bbox[2] * bbox[3]),
                iscrowd: Some(0),
            });
        }
    }
    let file = CocoFile {
        images: dataset
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations,
        categories: dataset.categories.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::json("annotations", e))
}

pub fn load_results(path: &Path, model_id: u32, dims: &ImageDims) -> Result<ResultSet> {
    parse_results(
        &read_to_string(path)?,
        model_id,
        dims,
        &path.display().to_string(),
    )
}

/// Parses a COCO results array into normalized detections tagged with `model_id`.
pub fn parse_results(
    json: &str,
    model_id: u32,
    dims: &ImageDims,
    context: &str,
) -> Result<ResultSet> {
    let raw: Vec<CocoResult> = serde_json::from_str(json).map_err(|e| Error::json(context, e))?;

    let unknown: BTreeSet<u64> = raw
        .iter()
        .filter(|r| !dims.contains_key(&r.image_id))
        .map(|r| r.image_id)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }

    let mut set = ResultSet::new(model_id);
    for r in raw {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::InvalidScore {
                image_id: r.image_id,
                score: r.score,
            });
        }
        let (w, h) = dims[&r.image_id];
        let bbox = BBox::from_pixel_xywh(r.bbox, w, h);
        if !bbox.is_finite() {
            return Err(Error::invalid(format!(
                "{context}: non-finite bbox on image {}",
                r.image_id
            )));
        }
        set.push(
            r.image_id,
            Detection::new(bbox.clip(), r.category_id, r.score, model_id),
        );
    }
    Ok(set)
}

pub fn save_results(set: &ResultSet, path: &Path, dims: &ImageDims) -> Result<()> {
    write_string(path, &results_to_json(set, dims)?)
}

/// Serializes detections as a COCO results array with pixel `[x, y, w, h]` boxes.
pub fn results_to_json(set: &ResultSet, dims: &ImageDims) -> Result<String> {
    let unknown: BTreeSet<u64> = set
        .entries
        .iter()
        .filter(|(id, _)| !dims.contains_key(id))
        .map(|(id, _)| *id)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }
    let raw: Vec<CocoResult> = set
        .entries
        .iter()
        .map(|(id, det)| {
            let (w, h) = dims[id];
            CocoResult {
                image_id: *id,
                category_id: det.label,
                bbox: det.bbox.to_pixel_xywh(w, h),
                score: det.score,
            }
        })
        .collect();
    serde_json::to_string_pretty(&raw).map_err(|e| Error::json("results", e))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Pipeline-wide settings, read from JSON with these exact field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mask_ratio: f64,
    pub patch_size: u32,
    /// Number of hierarchical visibility scales kept in a mask plan.
    pub mask_scales: u32,
    pub mosaic_prob: f64,
    pub mixup_prob: f64,
    /// Symmetric Beta(alpha, alpha) parameter for the mixup proportion.
    pub mixup_alpha: f64,
    pub flip_prob: f64,
    /// Maximum fractional hue, saturation and value perturbations.
    pub hsv_gains: [f64; 3],
    pub mosaic_center_range: [f64; 2],
    /// Side length of augmented output images.
    pub aug_size: u32,
    pub min_box_area: f64,
    pub tta_views: Vec<ViewTransform>,
    pub wbf_iou_thr: f64,
    pub wbf_skip_thr: f64,
    pub wbf_conf_type: ConfType,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.60,
            patch_size: 32,
            mask_scales: 4,
            mosaic_prob: 1.0,
            mixup_prob: 0.5,
            mixup_alpha: 32.0,
            flip_prob: 0.5,
            hsv_gains: [0.015, 0.7, 0.4],
            mosaic_center_range: [0.25, 0.75],
            aug_size: 640,
            min_box_area: DEFAULT_MIN_AREA,
            tta_views: crate::tta::default_views(),
            wbf_iou_thr: 0.55,
            wbf_skip_thr: 0.0,
            wbf_conf_type: ConfType::Avg,
            top_k: 30,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn from_json(json: &str, context: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| Error::json(context, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if self.mask_scales == 0 || self.mask_scales > 8 {
            return Err(Error::invalid("mask_scales must lie in 1..=8"));
        }
        prob("mosaic_prob", self.mosaic_prob)?;
        prob("mixup_prob", self.mixup_prob)?;
        prob("flip_prob", self.flip_prob)?;
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::invalid("mixup_alpha must be positive"));
        }
        if self.hsv_gains.iter().any(|g| !(-1.0..=1.0).contains(g)) {
            return Err(Error::invalid("hsv_gains must lie in [-1, 1]"));
        }
        let [lo, hi] = self.mosaic_center_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(
                "mosaic_center_range must satisfy 0 < lo <= hi < 1",
            ));
        }
        if self.aug_size == 0 {
            return Err(Error::invalid("aug_size must be positive"));
        }
        if self.min_box_area.is_nan() || self.min_box_area < 0.0 {
            return Err(Error::invalid("min_box_area must be non-negative"));
        }
        crate::tta::ViewSet::new(self.tta_views.clone())?;
        if !(self.wbf_iou_thr > 0.0 && self.wbf_iou_thr <= 1.0) {
            return Err(Error::invalid("wbf_iou_thr must lie in (0, 1]"));
        }
        prob("wbf_skip_thr", self.wbf_skip_thr)?;
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        Ok(())
    }
}
