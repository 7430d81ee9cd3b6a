//! Mining new part positives and background negatives inside object boxes
//! from combined appearance and location scores.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::PartClassifier;
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BBox, Size};
use crate::location::{LocationTable, ScoredProposals};
use crate::proposals::ProposalSet;
use crate::raster::Raster;
use crate::viewpoint::Viewpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub max_per_image: usize,
    pub nms_iou: f64,
    pub min_combined_score: f64,
    pub negative_iou_max: f64,
    pub appearance_weight: f64,
    pub location_weight: f64,
    /// Negatives sampled per image for each part.
    pub negatives_per_part: usize,
    /// Largest part candidate, as a fraction of the object box area.
    pub max_part_area: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            max_per_image: 3,
            nms_iou: 0.3,
            min_combined_score: 0.5,
            negative_iou_max: 0.3,
            appearance_weight: 0.3,
            location_weight: 0.7,
            negatives_per_part: 10,
            max_part_area: 0.5,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("min_combined_score", self.min_combined_score),
            ("negative_iou_max", self.negative_iou_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("mining.{name} must lie in [0, 1], got {v}")));
            }
        }
        let (a, l) = (self.appearance_weight, self.location_weight);
        if !(a >= 0.0 && l >= 0.0) || a + l == 0.0 || !(a + l).is_finite() {
            return Err(Error::invalid("mining weights must be non-negative and not both zero"));
        }
        if self.max_per_image == 0 {
            return Err(Error::invalid("mining.max_per_image must be positive"));
        }
        if !(self.max_part_area > 0.0 && self.max_part_area <= 1.0) {
            return Err(Error::invalid("mining.max_part_area must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `appearance_weight * a + location_weight * l_hat`, with `l_hat` already
/// min-max normalized over the image's proposals.
pub fn combine_scores(a: f64, l_hat: f64, cfg: &MiningConfig) -> f64 {
    cfg.appearance_weight * a + cfg.location_weight * l_hat
}

/// Min-max normalization; all-equal inputs map to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Combined scores for `part` over `boxes`, located relative to `object`.
/// An empty location model falls back to the appearance probability alone.
pub fn combined_part_scores(
    boxes: &[BBox],
    appearance: &[f64],
    object: &BBox,
    location: Option<&crate::location::LocationModel>,
    cfg: &MiningConfig,
) -> Result<Vec<f64>> {
    match location {
        Some(m) if !m.is_empty() => {
            let frame = Size::new(object.width(), object.height());
            let raw = boxes
                .iter()
                .map(|b| m.score(&b.translate(-object.x_min, -object.y_min), frame))
                .collect::<Result<Vec<_>>>()?;
            let l_hat = min_max_normalize(&raw);
            Ok(appearance.iter().zip(&l_hat).map(|(&a, &l)| combine_scores(a, l, cfg)).collect())
        }
        _ => Ok(appearance.to_vec()),
    }
}

/// Indices of proposals lying inside `object` (half-pixel slack).
pub fn inside_object(boxes: &[BBox], object: &BBox) -> Vec<usize> {
    let grown = BBox {
        x_min: object.x_min - 0.5,
        y_min: object.y_min - 0.5,
        x_max: object.x_max + 0.5,
        y_max: object.y_max + 0.5,
    };
    (0..boxes.len()).filter(|&i| grown.contains(&boxes[i])).collect()
}

/// Indices of proposals inside `object` covering at most `max_area` of its
/// area: the candidates for its parts.
pub fn part_sized(boxes: &[BBox], object: &BBox, max_area: f64) -> Vec<usize> {
    let limit = max_area * object.area();
    inside_object(boxes, object).into_iter().filter(|&i| boxes[i].area() <= limit).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedPositive {
    pub image_id: String,
    pub bbox: BBox,
    pub part_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub image_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinedSet {
    pub positives: Vec<MinedPositive>,
    pub negatives: Vec<MinedNegative>,
    /// Images skipped for lack of a usable viewpoint.
    pub skipped_images: usize,
}

impl MinedSet {
    pub fn extend(&mut self, other: MinedSet) {
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
        self.skipped_images += other.skipped_images;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,kind,part_id,x_min,y_min,x_max,y_max,score\n");
        for p in &self.positives {
            let b = p.bbox;
            out.push_str(&format!(
                "{},positive,{},{},{},{},{},{}\n",
                p.image_id, p.part_id, b.x_min, b.y_min, b.x_max, b.y_max, p.score
            ));
        }
        for n in &self.negatives {
            let b = n.bbox;
            out.push_str(&format!(
                "{},negative,,{},{},{},{},\n",
                n.image_id, b.x_min, b.y_min, b.x_max, b.y_max
            ));
        }
        out
    }

    /// Negatives overlapping a positive of the same image above `iou_max`.
    pub fn negative_violations(&self, iou_max: f64) -> usize {
        self.negatives
            .iter()
            .filter(|n| {
                self.positives
                    .iter()
                    .any(|p| p.image_id == n.image_id && iou(&p.bbox, &n.bbox) > iou_max)
            })
            .count()
    }
}

/// One object instance to mine in: scored proposals of its image, the
/// object box and its (known or predicted) viewpoint.
#[derive(Debug, Clone)]
pub struct MiningImage<'a> {
    pub image_id: String,
    pub scored: &'a ScoredProposals,
    pub object_box: BBox,
    pub viewpoint: Option<Viewpoint>,
}

fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mine one object instance for all `parts` part classes.
pub fn mine_image(
    img: &MiningImage,
    index: usize,
    parts: usize,
    locations: Option<&LocationTable>,
    cfg: &MiningConfig,
) -> Result<MinedSet> {
    let mut out = MinedSet::default();
    let Some(v) = img.viewpoint else {
        out.skipped_images = 1;
        return Ok(out);
    };
    let inside = part_sized(&img.scored.boxes, &img.object_box, cfg.max_part_area);
    let boxes: Vec<BBox> = inside.iter().map(|&i| img.scored.boxes[i]).collect();
    for part in 0..parts {
        let appearance: Vec<f64> = inside.iter().map(|&i| img.scored.probs[i][part]).collect();
        let model = locations.and_then(|t| t.get(part, v));
        let combined = combined_part_scores(&boxes, &appearance, &img.object_box, model, cfg)?;
        let kept = nms_indices(boxes.iter().zip(combined.iter().copied()), cfg.nms_iou);
        out.positives.extend(
            kept.into_iter()
                .filter(|&k| combined[k] >= cfg.min_combined_score)
                .take(cfg.max_per_image)
                .map(|k| MinedPositive {
                    image_id: img.image_id.clone(),
                    bbox: boxes[k],
                    part_id: part,
                    score: combined[k],
                }),
        );
    }
    let candidates: Vec<BBox> = boxes
        .iter()
        .filter(|b| out.positives.iter().all(|p| iou(&p.bbox, b) <= cfg.negative_iou_max))
        .copied()
        .collect();
    let want = (cfg.negatives_per_part * parts).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, index));
    let mut picks = sample(&mut rng, candidates.len(), want).into_vec();
    picks.sort_unstable();
    out.negatives = picks
        .into_iter()
        .map(|i| MinedNegative {
            image_id: img.image_id.clone(),
            bbox: candidates[i],
        })
        .collect();
    Ok(out)
}

/// Mine every image; results are concatenated in input order.
pub fn mine_from_scores(
    images: &[MiningImage],
    parts: usize,
    locations: Option<&LocationTable>,
    cfg: &MiningConfig,
) -> Result<MinedSet> {
    cfg.validate()?;
    let mut all = MinedSet::default();
    for (i, img) in images.iter().enumerate() {
        all.extend(mine_image(img, i, parts, locations, cfg)?);
    }
    if all.skipped_images > 0 {
        warn!("mining skipped {} images without a viewpoint", all.skipped_images);
    }
    Ok(all)
}

/// Score proposals with `clf` and mine every image.
pub fn mine_part_instances(
    clf: &PartClassifier,
    locations: Option<&LocationTable>,
    images: &[(&str, &Raster, &ProposalSet, BBox, Option<Viewpoint>)],
    cfg: &MiningConfig,
) -> Result<MinedSet> {
    let scored = images
        .iter()
        .map(|(_, r, p, _, _)| ScoredProposals::compute(clf, r, p))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<MiningImage> = images
        .iter()
        .zip(&scored)
        .map(|((id, _, _, obj, v), s)| MiningImage {
            image_id: id.to_string(),
            scored: s,
            object_box: *obj,
            viewpoint: *v,
        })
        .collect();
    mine_from_scores(&views, clf.part_count(), locations, cfg)
}
