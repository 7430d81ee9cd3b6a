//! Evaluation: ground truth, average precision with all-point interpolation,
//! and viewpoint accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::viewpoint::Viewpoint;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTruth {
    pub part_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub class: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint: Option<Viewpoint>,
    #[serde(default)]
    pub parts: Vec<PartTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub images: Vec<ImageTruth>,
}

impl GroundTruthSet {
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            let full = BBox {
                x_min: 0.0,
                y_min: 0.0,
                x_max: img.width as f64,
                y_max: img.height as f64,
            };
            let boxes = img
                .objects
                .iter()
                .flat_map(|o| std::iter::once(&o.bbox).chain(o.parts.iter().map(|p| &p.bbox)));
            for b in boxes {
                if !b.is_valid() || !full.contains(b) {
                    return Err(Error::invalid(format!(
                        "ground-truth box {b:?} in image {} is invalid or out of bounds",
                        img.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gt: GroundTruthSet = serde_json::from_str(&text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn image(&self, id: &str) -> Option<&ImageTruth> {
        self.images.iter().find(|i| i.image_id == id)
    }

    /// Part boxes per image for one part id.
    pub fn part_boxes(&self, part_id: usize) -> BTreeMap<String, Vec<BBox>> {
        self.images
            .iter()
            .map(|img| {
                let boxes = img
                    .objects
                    .iter()
                    .flat_map(|o| o.parts.iter())
                    .filter(|p| p.part_id == part_id)
                    .map(|p| p.bbox)
                    .collect();
                (img.image_id.clone(), boxes)
            })
            .collect()
    }

    pub fn object_boxes(&self) -> BTreeMap<String, Vec<BBox>> {
        self.images
            .iter()
            .map(|img| (img.image_id.clone(), img.objects.iter().map(|o| o.bbox).collect()))
            .collect()
    }

    /// The ground truth itself, as detections with score 1.
    pub fn as_detections(&self) -> Vec<LabeledDetection> {
        self.images
            .iter()
            .flat_map(|img| {
                img.objects.iter().flat_map(|o| o.parts.iter()).map(|p| LabeledDetection {
                    image_id: img.image_id.clone(),
                    part_id: p.part_id,
                    bbox: p.bbox,
                    score: 1.0,
                })
            })
            .collect()
    }

    pub fn part_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .images
            .iter()
            .flat_map(|i| i.objects.iter().flat_map(|o| o.parts.iter().map(|p| p.part_id)))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// A detection attached to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub image_id: String,
    pub part_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

pub const DETECTION_CSV_HEADER: &str = "image_id,part_id,score,x_min,y_min,x_max,y_max";

pub fn detections_to_csv(dets: &[LabeledDetection]) -> String {
    let mut out = format!("{DETECTION_CSV_HEADER}\n");
    for d in dets {
        let b = d.bbox;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.image_id, d.part_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        ));
    }
    out
}

pub fn detections_from_csv(text: &str) -> Result<Vec<LabeledDetection>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DETECTION_CSV_HEADER) {
        return Err(Error::invalid("detection CSV lacks the expected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::invalid(format!("detection CSV line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(LabeledDetection {
                image_id: f[0].to_string(),
                part_id: f[1].trim().parse().map_err(|_| bad())?,
                score: num(f[2])?,
                bbox: BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?).map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
    /// Set when neither detections nor ground truth exist; `ap` is then 0.
    pub undefined: bool,
}

/// AP from a ranked hit list: all-point interpolation with precision made
/// non-increasing from the right.
pub fn ap_from_hits(hits: &[bool], positives: usize) -> PRCurve {
    if positives == 0 {
        return PRCurve {
            recall: vec![0.0; hits.len()],
            precision: vec![0.0; hits.len()],
            ap: 0.0,
            undefined: hits.is_empty(),
        };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..hits.len() {
        if recall[k] > prev {
            ap += (recall[k] - prev) * envelope[k];
            prev = recall[k];
        }
    }
    PRCurve {
        recall,
        precision,
        ap,
        undefined: false,
    }
}

/// Rank detections by score (stable on ties) and greedily match each to the
/// highest-IoU unmatched ground-truth box of its image.
pub fn match_detections(
    dets: &[(&str, BBox, f64)],
    truth: &BTreeMap<String, Vec<BBox>>,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2));
    let mut used: BTreeMap<&str, Vec<bool>> = truth
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let hits = order
        .into_iter()
        .map(|i| {
            let (img, b, _) = dets[i];
            let (Some(gts), Some(taken)) = (truth.get(img), used.get_mut(img)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let o = iou(&b, gt);
                if !taken[g] && o >= iou_threshold && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, truth.values().map(Vec::len).sum())
}

pub fn average_precision_boxes(
    dets: &[(&str, BBox, f64)],
    truth: &BTreeMap<String, Vec<BBox>>,
    iou_threshold: f64,
) -> PRCurve {
    let (hits, positives) = match_detections(dets, truth, iou_threshold);
    ap_from_hits(&hits, positives)
}

/// AP of the detections labeled `part_id` against that part's ground truth.
pub fn average_precision(dets: &[LabeledDetection], gt: &GroundTruthSet, part_id: usize, iou_threshold: f64) -> PRCurve {
    let mine: Vec<(&str, BBox, f64)> = dets
        .iter()
        .filter(|d| d.part_id == part_id)
        .map(|d| (d.image_id.as_str(), d.bbox, d.score))
        .collect();
    average_precision_boxes(&mine, &gt.part_boxes(part_id), iou_threshold)
}

/// AP of object detections (part_id ignored) against object boxes.
pub fn object_average_precision(dets: &[LabeledDetection], gt: &GroundTruthSet, iou_threshold: f64) -> PRCurve {
    let all: Vec<(&str, BBox, f64)> = dets.iter().map(|d| (d.image_id.as_str(), d.bbox, d.score)).collect();
    average_precision_boxes(&all, &gt.object_boxes(), iou_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartReport {
    pub part_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub ap: f64,
    pub undefined: bool,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Mean AP over the curves that are defined; 0 when none are.
pub fn mean_ap(curves: &[PRCurve]) -> f64 {
    let defined: Vec<f64> = curves.iter().filter(|c| !c.undefined).map(|c| c.ap).collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Per-part AP over `part_ids` and their mean.
pub fn evaluate_parts(dets: &[LabeledDetection], gt: &GroundTruthSet, part_ids: &[usize], iou_threshold: f64) -> (Vec<PRCurve>, f64) {
    let curves: Vec<PRCurve> = part_ids
        .iter()
        .map(|&p| average_precision(dets, gt, p, iou_threshold))
        .collect();
    let m = mean_ap(&curves);
    (curves, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointReport {
    /// Row: true viewpoint, column: predicted.
    pub confusion: [[usize; 4]; 4],
    pub per_class_accuracy: [Option<f64>; 4],
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub per_class_ap: [Option<f64>; 4],
    pub mean_ap: f64,
}

/// Accuracy table and one-vs-rest AP from (truth, class probabilities)
/// pairs; the prediction is the first most probable viewpoint.
pub fn viewpoint_accuracy(samples: &[(Viewpoint, Vec<f64>)]) -> Result<ViewpointReport> {
    let mut confusion = [[0usize; 4]; 4];
    for (truth, p) in samples {
        if p.len() != Viewpoint::COUNT {
            return Err(Error::invalid("viewpoint probabilities must have 4 entries"));
        }
        let mut best = 0;
        for k in 1..4 {
            if p[k] > p[best] {
                best = k;
            }
        }
        confusion[truth.index()][best] += 1;
    }
    let mut per_class_accuracy = [None; 4];
    let mut per_class_ap = [None; 4];
    for v in 0..4 {
        let row: usize = confusion[v].iter().sum();
        if row > 0 {
            per_class_accuracy[v] = Some(confusion[v][v] as f64 / row as f64);
            let mut ranked: Vec<(f64, bool)> = samples.iter().map(|(t, p)| (p[v], t.index() == v)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            per_class_ap[v] = Some(ap_from_hits(&hits, row).ap);
        }
    }
    let mean = |xs: &[Option<f64>; 4]| {
        let d: Vec<f64> = xs.iter().flatten().copied().collect();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    };
    let trace: usize = (0..4).map(|v| confusion[v][v]).sum();
    Ok(ViewpointReport {
        confusion,
        mean_accuracy: mean(&per_class_accuracy),
        overall_accuracy: if samples.is_empty() { 0.0 } else { trace as f64 / samples.len() as f64 },
        per_class_accuracy,
        mean_ap: mean(&per_class_ap),
        per_class_ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub parts: Vec<PartReport>,
    pub map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint: Option<ViewpointReport>,
}

impl EvalReport {
    pub fn build(
        dets: &[LabeledDetection],
        gt: &GroundTruthSet,
        part_ids: &[usize],
        names: Option<&[String]>,
        iou_threshold: f64,
    ) -> Self {
        let (curves, map) = evaluate_parts(dets, gt, part_ids, iou_threshold);
        let parts = part_ids
            .iter()
            .zip(curves)
            .map(|(&part_id, c)| PartReport {
                part_id,
                name: names.and_then(|n| n.get(part_id).cloned()),
                ap: c.ap,
                undefined: c.undefined,
                recall: c.recall,
                precision: c.precision,
            })
            .collect();
        EvalReport {
            iou_threshold,
            parts,
            map,
            viewpoint: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Disjoint unit-spaced gt boxes; a hit reuses the next unused one, a
    /// miss lands far away.
    fn fixture(pattern: &str, gts: usize) -> PRCurve {
        let gt_box = |k: usize| b(k as f64 * 20.0, 0., k as f64 * 20.0 + 10.0, 10.);
        let truth: BTreeMap<String, Vec<BBox>> = [("img".to_string(), (0..gts).map(gt_box).collect())].into();
        let mut next = 0;
        let dets: Vec<(&str, BBox, f64)> = pattern
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let score = 1.0 - i as f64 * 0.01;
                let bx = match c {
                    'h' => {
                        next += 1;
                        gt_box(next - 1)
                    }
                    'd' => gt_box(next - 1),
                    _ => b(500., 500., 510., 510.),
                };
                ("img", bx, score)
            })
            .collect();
        average_precision_boxes(&dets, &truth, 0.4)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_computed_fixtures() {
        let cases: &[(&str, usize, f64)] = &[
            ("h", 1, 1.0),
            ("hmh", 2, 0.5 * 1.0 + 0.5 * (2.0 / 3.0)),
            ("mh", 1, 0.5),
            ("hh", 3, 2.0 / 3.0),
            ("hd", 1, 1.0),
            ("mmhh", 2, 0.5 * 0.5 + 0.5 * 0.5),
            ("hmmh", 2, 0.5 * 1.0 + 0.5 * 0.5),
            ("", 1, 0.0),
            ("mm", 0, 0.0),
            ("mhhmh", 4, 0.25 * (2.0 / 3.0) + 0.25 * (2.0 / 3.0) + 0.25 * 0.6),
            ("hhhh", 4, 1.0),
            ("mmmm", 2, 0.0),
            ("hdmh", 2, 0.5 * 1.0 + 0.5 * 0.5),
        ];
        for &(pattern, gts, want) in cases {
            let c = fixture(pattern, gts);
            assert!(close(c.ap, want), "{pattern}/{gts}: {} vs {want}", c.ap);
            assert!(!c.undefined);
        }
        assert!(close(fixture("hmh", 2).ap, 5.0 / 6.0));
        let both_empty = fixture("", 0);
        assert_eq!(both_empty.ap, 0.0);
        assert!(both_empty.undefined);
    }

    #[test]
    fn iou_below_threshold_misses() {
        let truth: BTreeMap<String, Vec<BBox>> = [("i".to_string(), vec![b(0., 0., 10., 10.)])].into();
        let d = b(0., 0., 10., 3.);
        assert!(close(iou(&d, &truth["i"][0]), 0.3));
        assert_eq!(average_precision_boxes(&[("i", d, 0.9)], &truth, 0.4).ap, 0.0);
        assert_eq!(average_precision_boxes(&[("i", d, 0.9)], &truth, 0.3).ap, 1.0);
    }

    #[test]
    fn matching_prefers_highest_iou_unmatched() {
        let truth: BTreeMap<String, Vec<BBox>> =
            [("i".to_string(), vec![b(0., 0., 10., 10.), b(2., 0., 12., 10.)])].into();
        let dets = [("i", b(2., 0., 12., 10.), 0.9), ("i", b(0., 0., 10., 10.), 0.8)];
        let (hits, n) = match_detections(&dets, &truth, 0.4);
        assert_eq!((hits, n), (vec![true, true], 2));
    }

    #[test]
    fn multi_image_fixture() {
        let truth: BTreeMap<String, Vec<BBox>> = [
            ("a".to_string(), vec![b(0., 0., 10., 10.)]),
            ("b".to_string(), vec![b(0., 0., 10., 10.)]),
        ]
        .into();
        let dets = [
            ("a", b(0., 0., 10., 10.), 0.9),
            ("b", b(50., 50., 60., 60.), 0.8),
            ("b", b(1., 0., 10., 10.), 0.7),
            ("c", b(0., 0., 10., 10.), 0.1),
        ];
        let c = average_precision_boxes(&dets, &truth, 0.4);
        assert!(close(c.ap, 5.0 / 6.0 * 1.0 - 0.0));
        assert_eq!(c.recall, vec![0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let gt = GroundTruthSet {
            images: vec![ImageTruth {
                image_id: "x".into(),
                width: 50,
                height: 50,
                objects: vec![ObjectTruth {
                    class: "c".into(),
                    bbox: b(0., 0., 40., 40.),
                    viewpoint: Some(Viewpoint::Left),
                    parts: vec![
                        PartTruth { part_id: 0, bbox: b(1., 1., 10., 10.) },
                        PartTruth { part_id: 1, bbox: b(20., 20., 30., 30.) },
                    ],
                }],
            }],
        };
        gt.validate().unwrap();
        let (_, map) = evaluate_parts(&gt.as_detections(), &gt, &gt.part_ids(), 0.4);
        assert_eq!(map, 1.0);
        let json = serde_json::to_string(&gt).unwrap();
        assert_eq!(serde_json::from_str::<GroundTruthSet>(&json).unwrap(), gt);
        let mut bad = gt.clone();
        bad.images[0].objects[0].bbox = b(0., 0., 60., 40.);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dets = vec![LabeledDetection {
            image_id: "im".into(),
            part_id: 3,
            bbox: b(1.5, 2., 3., 4.25),
            score: 0.125,
        }];
        let csv = detections_to_csv(&dets);
        assert_eq!(detections_from_csv(&csv).unwrap(), dets);
        assert!(detections_from_csv("nope\n").is_err());
        assert!(detections_from_csv(&format!("{DETECTION_CSV_HEADER}\na,b,c\n")).is_err());
    }

    fn onehot(v: usize) -> Vec<f64> {
        (0..4).map(|k| if k == v { 0.7 } else { 0.1 }).collect()
    }

    #[test]
    fn viewpoint_examples() {
        let perfect: Vec<_> = (0..40).map(|i| (Viewpoint::ALL[i % 4], onehot(i % 4))).collect();
        let r = viewpoint_accuracy(&perfect).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.mean_ap, 1.0);

        // confusion fixture: rows are truth
        let table = [[5, 1, 0, 0], [2, 3, 0, 1], [0, 0, 4, 4], [0, 0, 1, 7]];
        let mut samples = Vec::new();
        for (t, row) in table.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                samples.extend((0..n).map(|_| (Viewpoint::ALL[t], onehot(p))));
            }
        }
        let r = viewpoint_accuracy(&samples).unwrap();
        assert_eq!(r.confusion, table);
        assert!(close(r.overall_accuracy, 19.0 / 28.0));
        assert!(close(r.per_class_accuracy[1].unwrap(), 0.5));
        assert!(close(r.mean_accuracy, (5.0 / 6.0 + 0.5 + 0.5 + 7.0 / 8.0) / 4.0));
    }

    #[test]
    fn chance_level() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..1000)
            .map(|i| (Viewpoint::ALL[i % 4], (0..4).map(|_| rng.gen::<f64>()).collect()))
            .collect();
        let r = viewpoint_accuracy(&samples).unwrap();
        assert!((r.overall_accuracy - 0.25).abs() <= 0.05);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            raw in prop::collection::vec((0.0..1.0f64, 0usize..6, 0usize..3), 0..30),
            gts in 0usize..5,
        ) {
            let truth: BTreeMap<String, Vec<BBox>> = [(
                "i".to_string(),
                (0..gts).map(|k| b(k as f64 * 20.0, 0., k as f64 * 20.0 + 10.0, 10.)).collect(),
            )].into();
            let dets: Vec<(&str, BBox, f64)> = raw
                .iter()
                .map(|&(s, k, jitter)| ("i", b(k as f64 * 20.0 + jitter as f64, 0., k as f64 * 20.0 + 10.0, 10.), s))
                .collect();
            let moved: Vec<(&str, BBox, f64)> = dets.iter().map(|&(i, bx, s)| (i, bx, (3.0 * s).exp() - 7.0)).collect();
            let a = average_precision_boxes(&dets, &truth, 0.4);
            let c = average_precision_boxes(&moved, &truth, 0.4);
            prop_assert_eq!(a.ap, c.ap);
            prop_assert!((0.0..=1.0).contains(&a.ap));
            prop_assert!(a.recall.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
