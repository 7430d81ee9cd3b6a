//! Rectangle arithmetic shared by every stage of the pipeline.
//!
//! Boxes are continuous half-open rectangles, so the area of a box is
//! simply `(x_max - x_min) * (y_max - y_min)` with no pixel off-by-one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates (origin top-left).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// A box expressed in the common coordinate frame of one viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox(pub BBox);

/// Width and height pair, used for image sizes and viewpoint frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size {
    pub width: f64,
    pub height: f64,
}

impl Size {
    pub fn new(width: f64, height: f64) -> Self {
        Size { width, height }
    }

    fn is_valid(&self) -> bool {
        self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub part_id: usize,
}

impl BBox {
    /// Builds a box, rejecting empty, inverted or non-finite rectangles.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("degenerate box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn full(size: Size) -> Self {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: size.width,
            y_max: size.height,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        b.is_valid().then_some(b)
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Mirror the box about the vertical axis of an image of width `image_width`.
    pub fn mirror(&self, image_width: f64) -> BBox {
        BBox {
            x_min: image_width - self.x_max,
            y_min: self.y_min,
            x_max: image_width - self.x_min,
            y_max: self.y_max,
        }
    }

    pub fn clip(&self, size: Size) -> Option<BBox> {
        self.intersect(&BBox::full(size))
    }
}

/// Intersection over union of two boxes; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Kernel distance between two boxes of the same viewpoint frame: `1 - IoU`.
pub fn proposal_distance(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    1.0 - iou(&a.0, &b.0)
}

/// Rescale a box from an image of size `image` into the viewpoint frame `frame`.
pub fn normalize_box(b: &BBox, image: Size, frame: Size) -> Result<NormalizedBox> {
    if !image.is_valid() || !frame.is_valid() {
        return Err(Error::invalid(format!(
            "non-positive dimensions: image {image:?}, frame {frame:?}"
        )));
    }
    let sx = frame.width / image.width;
    let sy = frame.height / image.height;
    Ok(NormalizedBox(BBox {
        x_min: b.x_min * sx,
        y_min: b.y_min * sy,
        x_max: b.x_max * sx,
        y_max: b.y_max * sy,
    }))
}

/// Inverse of [`normalize_box`].
pub fn denormalize_box(b: &NormalizedBox, image: Size, frame: Size) -> Result<BBox> {
    normalize_box(&b.0, frame, image).map(|n| n.0)
}

/// Greedy non-maximum suppression.
///
/// Detections are visited by descending score (ties keep input order) and a
/// detection survives iff its IoU with every survivor so far is below
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets.iter().map(|d| (&d.bbox, d.score)), iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Index-returning NMS over `(box, score)` pairs.
pub fn nms_indices<'a, I>(items: I, iou_threshold: f64) -> Vec<usize>
where
    I: IntoIterator<Item = (&'a BBox, f64)>,
{
    let items: Vec<(&BBox, f64)> = items.into_iter().collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(items[i].0, items[k].0) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
