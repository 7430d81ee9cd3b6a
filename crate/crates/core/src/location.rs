//! Kernel-density part location models.
//!
//! A model stores the training boxes of one (part, viewpoint) pair in the
//! viewpoint's common frame. With the uniform kernel `K(u) = 1/2 [|u| <= 1]`
//! and distance `D = 1 - IoU`, the density at a query box is
//! `count{D <= h} / (2 N h)`; for `h = 0.5` that is the fraction of training
//! boxes overlapping the query at IoU >= 0.5.

use serde::{Deserialize, Serialize};

use crate::classifier::PartClassifier;
use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::geometry::{normalize_box, nms_indices, proposal_distance, BBox, NormalizedBox, Size};
use crate::proposals::ProposalSet;
use crate::raster::{encode_pgm, Raster};
use crate::viewpoint::Viewpoint;

pub const DEFAULT_BANDWIDTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationModel {
    pub samples: Vec<NormalizedBox>,
    pub bandwidth: f64,
    pub frame: Size,
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth {h} outside (0, 1]")))
    }
}

impl LocationModel {
    /// Placeholder for a (part, viewpoint) pair with no training boxes.
    pub fn empty_marker(bandwidth: f64, frame: Size) -> Self {
        LocationModel {
            samples: Vec::new(),
            bandwidth,
            frame,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Density at a query box taken from an image of size `image`.
    pub fn score(&self, query: &BBox, image: Size) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::state("location model has no samples"));
        }
        let q = normalize_box(query, image, self.frame)?;
        Ok(self.score_normalized(&q))
    }

    pub fn score_normalized(&self, q: &NormalizedBox) -> f64 {
        let h = self.bandwidth;
        let close = self
            .samples
            .iter()
            .filter(|w| proposal_distance(q, w) / h <= 1.0)
            .count();
        close as f64 / (2.0 * self.samples.len() as f64 * h)
    }

    /// A new model with extra boxes added to the training set.
    pub fn enriched(&self, extra: &[(BBox, Size)]) -> Result<LocationModel> {
        let mut m = self.clone();
        for (b, size) in extra {
            m.samples.push(normalize_box(b, *size, self.frame)?);
        }
        Ok(m)
    }

    /// Density heatmap for a box of `box_frac` of the frame slid over a
    /// `grid x grid` lattice of centers, scaled to 0..255 as a PGM.
    pub fn heatmap_pgm(&self, box_frac: (f64, f64), grid: usize) -> Result<Vec<u8>> {
        if self.samples.is_empty() {
            return Err(Error::state("location model has no samples"));
        }
        let bw = box_frac.0 * self.frame.width;
        let bh = box_frac.1 * self.frame.height;
        let mut vals = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let cx = (gx as f64 + 0.5) / grid as f64 * self.frame.width;
                let cy = (gy as f64 + 0.5) / grid as f64 * self.frame.height;
                let q = NormalizedBox(BBox {
                    x_min: cx - bw / 2.0,
                    y_min: cy - bh / 2.0,
                    x_max: cx + bw / 2.0,
                    y_max: cy + bh / 2.0,
                });
                vals.push(self.score_normalized(&q));
            }
        }
        let max = vals.iter().copied().fold(0.0, f64::max);
        let bytes: Vec<u8> = vals
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        Ok(encode_pgm(grid, grid, &bytes))
    }
}

/// Normalize every detection into the viewpoint frame.
pub fn build_location_model(dets: &[(BBox, Size)], bandwidth: f64, frame: Size) -> Result<LocationModel> {
    check_bandwidth(bandwidth)?;
    if dets.is_empty() {
        return Err(Error::invalid("location model needs at least one detection"));
    }
    let samples = dets
        .iter()
        .map(|(b, s)| normalize_box(b, *s, frame))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocationModel {
        samples,
        bandwidth,
        frame,
    })
}

/// One location model per (part, viewpoint); missing pairs hold an empty marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTable {
    pub parts: usize,
    models: Vec<LocationModel>,
}

impl LocationTable {
    pub fn new(parts: usize, bandwidth: f64, frames: [Size; Viewpoint::COUNT]) -> Self {
        let models = (0..parts)
            .flat_map(|_| frames.iter().map(|f| LocationModel::empty_marker(bandwidth, *f)))
            .collect();
        LocationTable { parts, models }
    }

    pub fn from_models(parts: usize, models: Vec<LocationModel>) -> Result<Self> {
        if models.len() != parts * Viewpoint::COUNT {
            return Err(Error::invalid(format!(
                "expected {} location models, got {}",
                parts * Viewpoint::COUNT,
                models.len()
            )));
        }
        Ok(LocationTable { parts, models })
    }

    pub fn get(&self, part: usize, v: Viewpoint) -> Option<&LocationModel> {
        (part < self.parts).then(|| &self.models[part * Viewpoint::COUNT + v.index()])
    }

    pub fn set(&mut self, part: usize, v: Viewpoint, m: LocationModel) -> Result<()> {
        if part >= self.parts {
            return Err(Error::invalid(format!("part {part} out of range")));
        }
        self.models[part * Viewpoint::COUNT + v.index()] = m;
        Ok(())
    }

    /// Models in (part, viewpoint) order.
    pub fn models(&self) -> &[LocationModel] {
        &self.models
    }

    pub fn empty_pairs(&self) -> usize {
        self.models.iter().filter(|m| m.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    pub max_per_image: usize,
    pub min_confidence: f64,
    pub nms_iou: f64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        HarvestConfig {
            max_per_image: 3,
            min_confidence: 0.5,
            nms_iou: 0.3,
        }
    }
}

/// Proposals of one image with their appearance class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposals {
    pub image_size: Size,
    pub boxes: Vec<BBox>,
    /// `probs[k][c]`: probability of class `c` for proposal `k`.
    pub probs: Vec<Vec<f64>>,
}

impl ScoredProposals {
    pub fn compute(clf: &PartClassifier, r: &Raster, proposals: &ProposalSet) -> Result<Self> {
        let probs = proposals
            .boxes
            .iter()
            .map(|b| clf.score(&extract_features(r, b)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredProposals {
            image_size: r.size(),
            boxes: proposals.boxes.clone(),
            probs,
        })
    }
}

/// Top detections of one part in one image: NMS over the part's probability,
/// then at most `max_per_image` survivors scoring at least `min_confidence`.
pub fn top_detections(scored: &ScoredProposals, part: usize, cfg: &HarvestConfig) -> Vec<(BBox, f64)> {
    let kept = nms_indices(
        scored.boxes.iter().zip(&scored.probs).map(|(b, p)| (b, p[part])),
        cfg.nms_iou,
    );
    kept.into_iter()
        .map(|i| (scored.boxes[i], scored.probs[i][part]))
        .filter(|(_, s)| *s >= cfg.min_confidence)
        .take(cfg.max_per_image)
        .collect()
}

/// Location training boxes for `part`, concatenated over images.
pub fn harvest_from_scores(scored: &[ScoredProposals], part: usize, cfg: &HarvestConfig) -> Vec<(BBox, Size)> {
    scored
        .iter()
        .flat_map(|s| {
            top_detections(s, part, cfg)
                .into_iter()
                .map(move |(b, _)| (b, s.image_size))
        })
        .collect()
}

pub fn harvest_location_training_samples(
    clf: &PartClassifier,
    images: &[(&Raster, &ProposalSet)],
    part: usize,
    cfg: &HarvestConfig,
) -> Result<Vec<(BBox, Size)>> {
    let scored = images
        .iter()
        .map(|(r, p)| ScoredProposals::compute(clf, r, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(harvest_from_scores(&scored, part, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    const FRAME: Size = Size {
        width: 100.0,
        height: 100.0,
    };

    #[test]
    fn build_examples() {
        let m = build_location_model(&[(b(1., 2., 3., 4.), FRAME)], 0.5, FRAME).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.samples[0].0, b(1., 2., 3., 4.));
        let mixed = [
            (b(10., 10., 20., 20.), Size::new(50., 50.)),
            (b(0., 0., 40., 10.), Size::new(200., 20.)),
        ];
        let m = build_location_model(&mixed, 0.5, FRAME).unwrap();
        for ((bx, s), got) in mixed.iter().zip(&m.samples) {
            assert_eq!(*got, normalize_box(bx, *s, FRAME).unwrap());
        }
        assert!(build_location_model(&[], 0.5, FRAME).is_err());
        assert!(build_location_model(&mixed, 0.0, FRAME).is_err());
    }

    #[test]
    fn score_examples() {
        let s = b(10., 10., 30., 30.);
        let m = build_location_model(&[(s, FRAME)], 0.5, FRAME).unwrap();
        assert_eq!(m.score(&s, FRAME).unwrap(), 1.0);
        assert_eq!(m.score(&b(60., 60., 70., 70.), FRAME).unwrap(), 0.0);

        // four samples, the query overlaps two of them at IoU >= 0.5
        let q = b(0., 0., 10., 10.);
        let samples = [b(0., 0., 10., 10.), b(0., 0., 10., 12.), b(5., 5., 15., 15.), b(50., 50., 60., 60.)];
        let counted = samples.iter().filter(|w| iou(&q, w) >= 0.5).count();
        assert_eq!(counted, 2);
        let dets: Vec<_> = samples.iter().map(|w| (*w, FRAME)).collect();
        let m = build_location_model(&dets, 0.5, FRAME).unwrap();
        assert_eq!(m.score(&q, FRAME).unwrap(), 0.5);
    }

    #[test]
    fn empty_model_is_invalid_state() {
        let m = LocationModel::empty_marker(0.5, FRAME);
        assert!(matches!(m.score(&b(0., 0., 1., 1.), FRAME), Err(Error::InvalidState(_))));
    }

    #[test]
    fn bimodal_model() {
        let left = b(5., 60., 25., 80.);
        let right = b(75., 60., 95., 80.);
        let dets: Vec<_> = (0..5).flat_map(|_| [(left, FRAME), (right, FRAME)]).collect();
        let m = build_location_model(&dets, 0.5, FRAME).unwrap();
        assert!(m.score(&left, FRAME).unwrap() >= 0.4);
        assert!(m.score(&right, FRAME).unwrap() >= 0.4);
        assert_eq!(m.score(&b(40., 60., 60., 80.), FRAME).unwrap(), 0.0);
        let pgm = m.heatmap_pgm((0.2, 0.2), 10).unwrap();
        assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
    }

    #[test]
    fn table_indexing() {
        let mut t = LocationTable::new(2, 0.5, [FRAME; 4]);
        assert_eq!(t.empty_pairs(), 8);
        let m = build_location_model(&[(b(1., 1., 2., 2.), FRAME)], 0.5, FRAME).unwrap();
        t.set(1, Viewpoint::Left, m.clone()).unwrap();
        assert_eq!(t.get(1, Viewpoint::Left), Some(&m));
        assert!(t.get(0, Viewpoint::Left).unwrap().is_empty());
        assert!(t.get(2, Viewpoint::Left).is_none());
        assert!(t.set(2, Viewpoint::Front, m).is_err());
        assert_eq!(t.empty_pairs(), 7);
        assert!(LocationTable::from_models(1, vec![]).is_err());
    }

    #[test]
    fn enrich_adds_normalized_samples() {
        let m = build_location_model(&[(b(1., 1., 2., 2.), FRAME)], 0.5, FRAME).unwrap();
        let e = m.enriched(&[(b(0., 0., 5., 5.), Size::new(50., 50.))]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.samples[1].0, b(0., 0., 10., 10.));
    }

    fn scored(boxes: Vec<BBox>, part_probs: Vec<f64>) -> ScoredProposals {
        ScoredProposals {
            image_size: FRAME,
            probs: part_probs.iter().map(|&p| vec![p, 1.0 - p]).collect(),
            boxes,
        }
    }

    #[test]
    fn harvest_rules() {
        let cfg = HarvestConfig::default();
        let weak = scored(vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.)], vec![0.2, 0.4]);
        assert!(harvest_from_scores(&[weak], 0, &cfg).is_empty());

        let dominant = scored(
            vec![b(0., 0., 10., 10.), b(1., 1., 11., 11.), b(50., 50., 60., 60.)],
            vec![0.95, 0.9, 0.1],
        );
        let got = harvest_from_scores(&[dominant], 0, &cfg);
        assert_eq!(got, vec![(b(0., 0., 10., 10.), FRAME)]);

        let many = scored(
            (0..6).map(|i| b(i as f64 * 15.0, 0., i as f64 * 15.0 + 10.0, 10.)).collect(),
            vec![0.9, 0.8, 0.7, 0.6, 0.55, 0.95],
        );
        let got = harvest_from_scores(&[many], 0, &cfg);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].0, b(75., 0., 85., 10.));
    }
}
