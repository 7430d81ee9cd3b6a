//! Detection: viewpoint-conditioned part detection (appearance plus
//! location) and root-plus-parts object detection, with the stage ladder
//! used to compare bundles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::classifier::PartClassifier;
use crate::error::{Error, Result};
use crate::eval::{evaluate_parts, object_average_precision, GroundTruthSet, LabeledDetection, PRCurve};
use crate::features::{extract_features, FeatureVector};
use crate::geometry::{nms_indices, BBox, Detection, Size};
use crate::location::LocationTable;
use crate::mining::{combined_part_scores, part_sized, MiningConfig};
use crate::pipeline::{object_box_proposals, StageBundles};
use crate::proposals::{generate_proposals_for, ProposalConfig};
use crate::raster::Raster;
use crate::store::ImageStore;
use crate::viewpoint::{Viewpoint, ViewpointClassifier};

/// The models used to score part proposals.
#[derive(Debug, Clone, Copy)]
pub struct PartScorer<'a> {
    pub appearance: &'a PartClassifier,
    pub locations: Option<&'a LocationTable>,
    pub viewpoint: Option<&'a ViewpointClassifier>,
    pub combination: &'a MiningConfig,
}

impl<'a> PartScorer<'a> {
    /// Appearance plus, from T2 on, location under the predicted viewpoint.
    pub fn of(b: &'a ModelBundle) -> Self {
        PartScorer {
            appearance: &b.appearance,
            locations: b.locations.as_ref(),
            viewpoint: b.viewpoint.as_ref(),
            combination: &b.config.mining,
        }
    }

    /// Appearance only.
    pub fn appearance_only(b: &'a ModelBundle) -> Self {
        PartScorer {
            locations: None,
            viewpoint: None,
            ..Self::of(b)
        }
    }

    /// Appearance of `appearance` with location and viewpoint of `context`.
    pub fn mixed(appearance: &'a ModelBundle, context: &'a ModelBundle) -> Self {
        PartScorer {
            appearance: &appearance.appearance,
            ..Self::of(context)
        }
    }
}

/// Proposals inside one object box with their descriptors.
#[derive(Debug, Clone)]
pub struct PartCandidates {
    pub object_box: BBox,
    pub boxes: Vec<BBox>,
    pub features: Vec<FeatureVector>,
    pub object_features: FeatureVector,
}

/// `max_area` bounds candidates as a fraction of the object box area.
pub fn part_candidates(r: &Raster, object_box: &BBox, cfg: &ProposalConfig, max_area: f64) -> Result<PartCandidates> {
    let props = object_box_proposals(r, object_box, cfg, "")?;
    let boxes: Vec<BBox> = part_sized(&props.boxes, object_box, max_area)
        .into_iter()
        .map(|i| props.boxes[i])
        .collect();
    let features = boxes.iter().map(|b| extract_features(r, b)).collect::<Result<_>>()?;
    Ok(PartCandidates {
        object_box: *object_box,
        object_features: extract_features(r, object_box)?,
        boxes,
        features,
    })
}

/// Score, suppress per part, and return every surviving detection sorted
/// by descending score.
pub fn detect_candidates(scorer: &PartScorer, c: &PartCandidates) -> Result<Vec<Detection>> {
    let probs: Vec<Vec<f64>> = c.features.iter().map(|f| scorer.appearance.score(f)).collect::<Result<_>>()?;
    let view = match (scorer.locations, scorer.viewpoint) {
        (Some(_), Some(v)) => Some(v.predict_features(&c.object_features)?.0),
        _ => None,
    };
    let mut out = Vec::new();
    for part in 0..scorer.appearance.part_count() {
        let a: Vec<f64> = probs.iter().map(|p| p[part]).collect();
        let model = view.and_then(|v| scorer.locations.and_then(|t| t.get(part, v)));
        let s = combined_part_scores(&c.boxes, &a, &c.object_box, model, scorer.combination)?;
        for k in nms_indices(c.boxes.iter().zip(s.iter().copied()), scorer.combination.nms_iou) {
            out.push(Detection {
                bbox: c.boxes[k],
                score: s[k],
                part_id: part,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Detect parts inside `object_box` with the bundle's models.
pub fn detect_parts(bundle: &ModelBundle, r: &Raster, object_box: &BBox) -> Result<Vec<Detection>> {
    let c = part_candidates(r, object_box, bundle.config.proposals(), bundle.config.mining.max_part_area)?;
    detect_candidates(&PartScorer::of(bundle), &c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalRegion {
    /// Search inside the ground-truth object boxes.
    ObjectBoxes,
    /// Search the whole image.
    ImageWide,
}

/// Part detections of several scorers over every ground-truth image; the
/// candidates of each object are computed once and shared.
pub fn detect_part_sets(
    scorers: &[PartScorer],
    store: &dyn ImageStore,
    gt: &GroundTruthSet,
    cfg: &ProposalConfig,
    max_area: f64,
    region: EvalRegion,
) -> Result<Vec<Vec<LabeledDetection>>> {
    let per_image: Vec<Vec<Vec<LabeledDetection>>> = gt
        .images
        .par_iter()
        .map(|img| {
            let r = store.load(&img.image_id)?;
            let regions: Vec<BBox> = match region {
                EvalRegion::ObjectBoxes => img.objects.iter().map(|o| o.bbox).collect(),
                EvalRegion::ImageWide => vec![r.full_box()],
            };
            let mut per_scorer = vec![Vec::new(); scorers.len()];
            for obj in &regions {
                let c = part_candidates(&r, obj, cfg, max_area)?;
                for (s, out) in scorers.iter().zip(per_scorer.iter_mut()) {
                    out.extend(detect_candidates(s, &c)?.into_iter().map(|d| LabeledDetection {
                        image_id: img.image_id.clone(),
                        part_id: d.part_id,
                        bbox: d.bbox,
                        score: d.score,
                    }));
                }
            }
            Ok(per_scorer)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); scorers.len()];
    for img in per_image {
        for (k, dets) in img.into_iter().enumerate() {
            out[k].extend(dets);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub label: String,
    pub part_ap: Vec<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub part_names: Vec<String>,
    pub rows: Vec<StageRow>,
}

impl StageComparison {
    pub fn map_of(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.map)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{},mAP\n", self.part_names.join(","));
        for r in &self.rows {
            let aps: Vec<String> = r.part_ap.iter().map(|a| format!("{a:.4}")).collect();
            out.push_str(&format!("{},{},{:.4}\n", r.label, aps.join(","), r.map));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header = vec!["model".to_string()];
        header.extend(self.part_names.iter().cloned());
        header.push("mAP".into());
        let mut rows = vec![header];
        for r in &self.rows {
            let mut row = vec![r.label.clone()];
            row.extend(r.part_ap.iter().map(|a| format!("{:.1}", 100.0 * a)));
            row.push(format!("{:.1}", 100.0 * r.map));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let rule: String = widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("+");
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!(" {c:>w$} ")).collect();
            out.push_str(&cells.join("|"));
            out.push('\n');
            if i == 0 {
                out.push_str(&rule);
                out.push('\n');
            }
        }
        out
    }
}

pub const LADDER: [&str; 7] = ["A0", "A1", "A1+L2", "A2", "A2+L2", "A3", "A3+L3"];

/// Part AP of every stage model on `gt`.
pub fn compare_stages(
    bundles: &StageBundles,
    store: &dyn ImageStore,
    gt: &GroundTruthSet,
    region: EvalRegion,
    iou_threshold: f64,
) -> Result<StageComparison> {
    let b = bundles;
    let scorers = [
        PartScorer::appearance_only(&b.a0),
        PartScorer::appearance_only(&b.t1),
        PartScorer::mixed(&b.t1, &b.t2),
        PartScorer::appearance_only(&b.t2),
        PartScorer::of(&b.t2),
        PartScorer::appearance_only(&b.t3),
        PartScorer::of(&b.t3),
    ];
    let dets = detect_part_sets(&scorers, store, gt, b.t3.config.proposals(), b.t3.config.mining.max_part_area, region)?;
    let ids: Vec<usize> = (0..b.t3.part_count()).collect();
    let rows = LADDER
        .iter()
        .zip(dets)
        .map(|(label, d)| {
            let (curves, map) = evaluate_parts(&d, gt, &ids, iou_threshold);
            StageRow {
                label: label.to_string(),
                part_ap: curves.iter().map(|c| c.ap).collect(),
                map,
            }
        })
        .collect();
    Ok(StageComparison {
        part_names: b.t3.part_names.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectDetectorConfig {
    /// Appearance weight per part.
    pub alpha: Vec<f64>,
    /// Location weight per part.
    pub beta: Vec<f64>,
    pub cross_validation_grid: Vec<f64>,
    pub nms_iou: f64,
    pub min_object_side: f64,
}

impl Default for ObjectDetectorConfig {
    fn default() -> Self {
        ObjectDetectorConfig {
            alpha: Vec::new(),
            beta: Vec::new(),
            cross_validation_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            nms_iou: 0.3,
            min_object_side: 16.0,
        }
    }
}

impl ObjectDetectorConfig {
    pub fn root_only(parts: usize) -> Self {
        ObjectDetectorConfig {
            alpha: vec![0.0; parts],
            beta: vec![0.0; parts],
            ..Self::default()
        }
    }

    pub fn validate(&self, parts: usize) -> Result<()> {
        if self.alpha.len() != parts || self.beta.len() != parts {
            return Err(Error::invalid(format!("object detector needs {parts} alpha and beta weights")));
        }
        if self.alpha.iter().chain(&self.beta).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("object detector weights must be non-negative"));
        }
        Ok(())
    }
}

/// Object proposals of one image with the root score and, per part, the
/// (appearance, location) pairs of the part proposals inside each.
#[derive(Debug, Clone)]
pub struct ObjectCandidates {
    pub boxes: Vec<BBox>,
    pub root: Vec<f64>,
    /// `terms[w][part]`: one pair per part proposal inside `boxes[w]`.
    pub terms: Vec<Vec<Vec<(f64, f64)>>>,
}

impl ObjectCandidates {
    pub fn compute(root: &PartClassifier, bundle: &ModelBundle, r: &Raster, cfg: &ObjectDetectorConfig) -> Result<Self> {
        let props = generate_proposals_for(r, bundle.config.proposals(), "")?;
        let features: Vec<FeatureVector> = props.boxes.iter().map(|b| extract_features(r, b)).collect::<Result<_>>()?;
        let probs: Vec<Vec<f64>> = features.iter().map(|f| bundle.appearance.score(f)).collect::<Result<_>>()?;
        let parts = bundle.part_count();
        let mut out = ObjectCandidates {
            boxes: Vec::new(),
            root: Vec::new(),
            terms: Vec::new(),
        };
        for (wi, w) in props.boxes.iter().enumerate() {
            if w.width() < cfg.min_object_side || w.height() < cfg.min_object_side {
                continue;
            }
            let view = match &bundle.viewpoint {
                Some(v) => Some(v.predict_features(&features[wi])?.0),
                None => None,
            };
            let inner = part_sized(&props.boxes, w, bundle.config.mining.max_part_area);
            let frame = Size::new(w.width(), w.height());
            let mut per_part = Vec::with_capacity(parts);
            for p in 0..parts {
                let model = match (view, &bundle.locations) {
                    (Some(v), Some(t)) => t.get(p, v).filter(|m| !m.is_empty()),
                    _ => None,
                };
                let pairs = inner
                    .iter()
                    .map(|&k| {
                        let l = match model {
                            Some(m) => m.score(&props.boxes[k].translate(-w.x_min, -w.y_min), frame)?,
                            None => 0.0,
                        };
                        Ok((probs[k][p], l))
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_part.push(pairs);
            }
            out.root.push(root.score(&features[wi])?[0]);
            out.boxes.push(*w);
            out.terms.push(per_part);
        }
        Ok(out)
    }

    /// Scores before suppression; an empty part set contributes 0.
    pub fn raw_scores(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..self.boxes.len())
            .map(|w| {
                self.root[w]
                    + self.terms[w]
                        .iter()
                        .enumerate()
                        .map(|(p, pairs)| {
                            pairs
                                .iter()
                                .map(|(a, l)| alpha[p] * a + beta[p] * l)
                                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
                                .unwrap_or(0.0)
                        })
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn detections(&self, cfg: &ObjectDetectorConfig) -> Vec<Detection> {
        let s = self.raw_scores(&cfg.alpha, &cfg.beta);
        nms_indices(self.boxes.iter().zip(s.iter().copied()), cfg.nms_iou)
            .into_iter()
            .map(|k| Detection {
                bbox: self.boxes[k],
                score: s[k],
                part_id: 0,
            })
            .collect()
    }
}

/// Root score plus, per part, the best weighted part proposal inside each
/// object proposal; suppressed and sorted by descending score.
pub fn detect_objects(root: &PartClassifier, bundle: &ModelBundle, r: &Raster, cfg: &ObjectDetectorConfig) -> Result<Vec<Detection>> {
    cfg.validate(bundle.part_count())?;
    Ok(ObjectCandidates::compute(root, bundle, r, cfg)?.detections(cfg))
}

pub fn object_candidates_for(
    root: &PartClassifier,
    bundle: &ModelBundle,
    store: &dyn ImageStore,
    gt: &GroundTruthSet,
    cfg: &ObjectDetectorConfig,
) -> Result<Vec<(String, ObjectCandidates)>> {
    gt.images
        .par_iter()
        .map(|img| {
            let r = store.load(&img.image_id)?;
            Ok((img.image_id.clone(), ObjectCandidates::compute(root, bundle, &r, cfg)?))
        })
        .collect()
}

pub fn object_ap(cands: &[(String, ObjectCandidates)], gt: &GroundTruthSet, cfg: &ObjectDetectorConfig, iou_threshold: f64) -> PRCurve {
    let dets: Vec<LabeledDetection> = cands
        .iter()
        .flat_map(|(id, c)| {
            c.detections(cfg).into_iter().map(move |d| LabeledDetection {
                image_id: id.clone(),
                part_id: 0,
                bbox: d.bbox,
                score: d.score,
            })
        })
        .collect();
    object_average_precision(&dets, gt, iou_threshold)
}

/// Coordinate ascent over the grid, from all-zero weights, maximizing
/// object AP; only strict improvements move a weight.
pub fn cross_validate_weights(
    cands: &[(String, ObjectCandidates)],
    gt: &GroundTruthSet,
    parts: usize,
    base: &ObjectDetectorConfig,
    iou_threshold: f64,
) -> (ObjectDetectorConfig, f64) {
    let mut cfg = ObjectDetectorConfig {
        alpha: vec![0.0; parts],
        beta: vec![0.0; parts],
        ..base.clone()
    };
    let mut best = object_ap(cands, gt, &cfg, iou_threshold).ap;
    for _round in 0..2 {
        let mut moved = false;
        for p in 0..parts {
            for which in 0..2 {
                for &g in &base.cross_validation_grid {
                    let mut trial = cfg.clone();
                    if which == 0 {
                        trial.alpha[p] = g;
                    } else {
                        trial.beta[p] = g;
                    }
                    let ap = object_ap(cands, gt, &trial, iou_threshold).ap;
                    if ap > best {
                        best = ap;
                        cfg = trial;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            break;
        }
    }
    (cfg, best)
}

pub fn viewpoint_of(bundle: &ModelBundle, r: &Raster, b: &BBox) -> Result<Option<Viewpoint>> {
    match &bundle.viewpoint {
        Some(v) => Ok(Some(crate::viewpoint::predict_viewpoint(v, r, b)?.0)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn toy() -> ObjectCandidates {
        ObjectCandidates {
            boxes: vec![b(0., 0., 50., 50.), b(60., 60., 100., 100.), b(5., 60., 30., 90.)],
            root: vec![0.5, 0.7, 0.6],
            terms: vec![
                vec![vec![(0.9, 0.8), (0.2, 0.1)], vec![(0.8, 0.0)]],
                vec![vec![(0.1, 0.1)], vec![]],
                vec![vec![], vec![]],
            ],
        }
    }

    #[test]
    fn zero_weights_rank_like_root() {
        let c = toy();
        let cfg = ObjectDetectorConfig::root_only(2);
        let ranked: Vec<BBox> = c.detections(&cfg).iter().map(|d| d.bbox).collect();
        let mut by_root: Vec<usize> = (0..3).collect();
        by_root.sort_by(|&x, &y| c.root[y].total_cmp(&c.root[x]));
        assert_eq!(ranked, by_root.iter().map(|&k| c.boxes[k]).collect::<Vec<_>>());
    }

    #[test]
    fn eq3_scoring() {
        let c = toy();
        let s = c.raw_scores(&[1.0, 0.5], &[0.5, 1.0]);
        assert!((s[0] - (0.5 + (0.9 + 0.4) + 0.4)).abs() < 1e-12);
        assert!((s[1] - (0.7 + 0.15)).abs() < 1e-12);
        // no part proposals inside: the empty max contributes 0
        assert_eq!(s[2], 0.6);
    }

    #[test]
    fn config_checks() {
        assert!(ObjectDetectorConfig::root_only(2).validate(2).is_ok());
        assert!(ObjectDetectorConfig::root_only(2).validate(3).is_err());
        let mut bad = ObjectDetectorConfig::root_only(1);
        bad.alpha[0] = -1.0;
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn table_rendering() {
        let cmp = StageComparison {
            part_names: vec!["a".into(), "b".into()],
            rows: vec![StageRow {
                label: "A1".into(),
                part_ap: vec![0.5, 0.25],
                map: 0.375,
            }],
        };
        assert_eq!(cmp.to_csv(), "model,a,b,mAP\nA1,0.5000,0.2500,0.3750\n");
        let t = cmp.to_table();
        assert!(t.contains("37.5"));
        assert_eq!(cmp.map_of("A1"), Some(0.375));
    }
}
