//! Grayscale images, bounding boxes, region masking and the patch quantizer.
//!
//! Chest X-rays are single-channel, so the black-out masking maps the triple
//! (0,0,0) to intensity 0.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::VisualTokens;
use crate::report::Category;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions {0}x{1} do not match pixel count {2}")]
    DimensionMismatch(usize, usize, usize),
    #[error("zero-sized image ({0}x{1})")]
    ZeroSize(usize, usize),
    #[error("box ({x0},{y0})..({x1},{y1}) invalid or outside {w}x{h} image")]
    BoxOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        w: usize,
        h: usize,
    },
    #[error("patch size {0} does not tile {1}x{2} image")]
    PatchDoesNotTile(usize, usize, usize),
    #[error("quantizer needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("vocabulary is missing visual bin {0}")]
    MissingVisualBin(u32),
}

/// Row-major 8-bit intensity grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSize(width, height));
        }
        if pixels.len() != width * height {
            return Err(ImageError::DimensionMismatch(width, height, pixels.len()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }
}

/// Axis-aligned box, inclusive-exclusive: pixels with x0 ≤ x < x1, y0 ≤ y < y1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn validate(&self, img: &GrayImage) -> Result<(), ImageError> {
        if self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= img.width && self.y1 <= img.height {
            Ok(())
        } else {
            Err(ImageError::BoxOutOfBounds {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                w: img.width,
                h: img.height,
            })
        }
    }
}

/// Category-tagged masking regions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryBoxSet {
    boxes: BTreeMap<Category, Vec<BoundingBox>>,
}

impl CategoryBoxSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, category: Category, bbox: BoundingBox) {
        self.boxes.entry(category).or_default().push(bbox);
    }

    pub fn boxes_for(&self, category: Category) -> &[BoundingBox] {
        self.boxes.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All boxes across categories, canonical category order.
    pub fn all_boxes(&self) -> Vec<BoundingBox> {
        self.boxes.values().flatten().copied().collect()
    }

    pub fn categories(&self) -> impl Iterator<Item = Category> + '_ {
        self.boxes.keys().copied()
    }

    pub fn validate(&self, img: &GrayImage) -> Result<(), ImageError> {
        for boxes in self.boxes.values() {
            for b in boxes {
                b.validate(img)?;
            }
        }
        Ok(())
    }
}

/// Returns a copy of `img` with every pixel inside any box set to 0.
pub fn mask_image(img: &GrayImage, boxes: &[BoundingBox]) -> Result<GrayImage, ImageError> {
    for b in boxes {
        b.validate(img)?;
    }
    let mut out = img.clone();
    for b in boxes {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                out.set(x, y, 0);
            }
        }
    }
    Ok(out)
}

/// Mean intensity over the union of the boxes (overlaps counted once).
/// Returns `None` when the box list is empty.
pub fn region_mean(img: &GrayImage, boxes: &[BoundingBox]) -> Result<Option<f64>, ImageError> {
    for b in boxes {
        b.validate(img)?;
    }
    if boxes.is_empty() {
        return Ok(None);
    }
    let mut covered = vec![false; img.width * img.height];
    for b in boxes {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                covered[y * img.width + x] = true;
            }
        }
    }
    let mut sum = 0u64;
    let mut count = 0u64;
    for (i, &c) in covered.iter().enumerate() {
        if c {
            sum += img.pixels[i] as u64;
            count += 1;
        }
    }
    Ok(Some(sum as f64 / count as f64))
}

/// Per-category presence summary: "present" when the mean intensity inside
/// the category's boxes exceeds `threshold`, "absent" otherwise or when the
/// category has no boxes.
pub fn summarize_features(
    img: &GrayImage,
    regions: &CategoryBoxSet,
    threshold: f64,
) -> Result<BTreeMap<Category, String>, ImageError> {
    let mut out = BTreeMap::new();
    for category in Category::ALL {
        let boxes = regions.boxes_for(category);
        let label = match region_mean(img, boxes)? {
            Some(mean) if mean > threshold => "present",
            _ => "absent",
        };
        out.insert(category, label.to_string());
    }
    Ok(out)
}

/// Compact two-threshold feature string for discrete conditioning: per
/// box-carrying category in canonical order, a visibility read at
/// `vis_threshold` and an evidence read at `evid_threshold`, encoded as
/// `name=<v|h><e|->` parts joined with `;`. `v`/`h` is the low-threshold
/// read (visible vs hidden, i.e. masked out), `e`/`-` the high-threshold
/// one (bright evidence vs plain tissue).
pub fn image_feature_thresholds(
    img: &GrayImage,
    regions: &CategoryBoxSet,
    vis_threshold: f64,
    evid_threshold: f64,
) -> Result<String, ImageError> {
    let vis = summarize_features(img, regions, vis_threshold)?;
    let evid = summarize_features(img, regions, evid_threshold)?;
    let mut parts = Vec::new();
    for category in regions.categories() {
        let v = if vis[&category] == "present" {
            'v'
        } else {
            'h'
        };
        let e = if evid[&category] == "present" {
            'e'
        } else {
            '-'
        };
        parts.push(format!("{}={}{}", category.short_name(), v, e));
    }
    Ok(parts.join(";"))
}

/// Quantizes each patch's mean intensity into `levels` uniform bins and maps
/// bins to the vocabulary's `<vis:bin>` tokens, row-major patch order.
pub fn image_to_visual_tokens(
    img: &GrayImage,
    vocab: &Vocabulary,
    patch: usize,
    levels: usize,
) -> Result<VisualTokens, ImageError> {
    if levels < 2 {
        return Err(ImageError::TooFewLevels(levels));
    }
    if patch == 0 || !img.width.is_multiple_of(patch) || !img.height.is_multiple_of(patch) {
        return Err(ImageError::PatchDoesNotTile(patch, img.width, img.height));
    }
    let cols = img.width / patch;
    let rows = img.height / patch;
    let mut ids: Vec<TokenId> = Vec::with_capacity(rows * cols);
    let mut positions = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut sum = 0u64;
            for dy in 0..patch {
                for dx in 0..patch {
                    sum += img.get(px * patch + dx, py * patch + dy) as u64;
                }
            }
            let mean = sum as f64 / (patch * patch) as f64;
            let bin = ((mean / 256.0) * levels as f64) as usize;
            let bin = bin.min(levels - 1) as u32;
            let id = vocab
                .visual_bin(bin)
                .map_err(|_| ImageError::MissingVisualBin(bin))?;
            ids.push(id);
            positions.push((px as u32, py as u32));
        }
    }
    Ok(VisualTokens::new(ids, positions))
}
