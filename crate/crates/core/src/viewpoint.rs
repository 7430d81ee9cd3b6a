//! Viewpoints: left/right splitting of side views by mirror-constrained
//! 2-means, and the 4-way viewpoint classifier.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierRole, ClassifierSpec, PartClassifier, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::geometry::BBox;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Viewpoint {
    Front,
    Back,
    Left,
    Right,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 4] = [Viewpoint::Front, Viewpoint::Back, Viewpoint::Left, Viewpoint::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Viewpoint> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Viewpoint::Front => "front",
            Viewpoint::Back => "back",
            Viewpoint::Left => "left",
            Viewpoint::Right => "right",
        }
    }

    pub fn mirrored(self) -> Viewpoint {
        match self {
            Viewpoint::Left => Viewpoint::Right,
            Viewpoint::Right => Viewpoint::Left,
            v => v,
        }
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Viewpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Viewpoint::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown viewpoint {s:?}")))
    }
}

/// Indices of the input images assigned to each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideSplit {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Share of gradient magnitude in the right half minus the left half.
pub fn horizontal_asymmetry(r: &Raster) -> f64 {
    let (w, h) = (r.width(), r.height());
    let (mut left, mut right) = (0.0, 0.0);
    let gray = |x: usize, y: usize| {
        let p = r.get(x, y);
        p[0] as f64 + p[1] as f64 + p[2] as f64
    };
    for y in 0..h {
        for x in 0..w {
            let gx = gray((x + 1).min(w - 1), y) - gray(x.saturating_sub(1), y);
            let gy = gray(x, (y + 1).min(h - 1)) - gray(x, y.saturating_sub(1));
            let m = (gx * gx + gy * gy).sqrt();
            // the center column (odd widths) counts for neither side
            if 2 * x + 1 < w {
                left += m;
            } else if 2 * x + 1 > w {
                right += m;
            }
        }
    }
    if left + right == 0.0 {
        0.0
    } else {
        (right - left) / (right + left)
    }
}

/// Split side-view images into left- and right-facing sets.
///
/// Each image is paired with its horizontal mirror and the pair is always
/// placed in opposite clusters; 2-means runs on gradient descriptors with
/// farthest-pair seeding. The cluster whose images carry more gradient
/// energy on their right half is named `right`.
pub fn split_side_views(images: &[Raster], seed: u64) -> Result<SideSplit> {
    if images.len() < 2 {
        return Err(Error::invalid("side-view splitting needs at least two images"));
    }
    let describe = |r: &Raster| -> Result<Vec<f64>> {
        Ok(extract_features(r, &r.full_box())?.gradient_part().to_vec())
    };
    let originals: Vec<Vec<f64>> = images.iter().map(describe).collect::<Result<_>>()?;
    let mirrors: Vec<Vec<f64>> = images
        .iter()
        .map(|r| describe(&r.mirror_horizontal()))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool: Vec<&Vec<f64>> = order
        .iter()
        .flat_map(|&i| [&originals[i], &mirrors[i]])
        .collect();
    let mut far = (0, 1, f64::NEG_INFINITY);
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            let d = dist2(pool[a], pool[b]);
            if d > far.2 {
                far = (a, b, d);
            }
        }
    }
    let mut centers = [pool[far.0].clone(), pool[far.1].clone()];

    // in_first[i]: original i sits in cluster 0 (its mirror in cluster 1)
    let mut in_first = vec![false; images.len()];
    for iteration in 0..100 {
        let mut changed = false;
        for i in 0..images.len() {
            let keep = dist2(&originals[i], &centers[0]) + dist2(&mirrors[i], &centers[1]);
            let swap = dist2(&originals[i], &centers[1]) + dist2(&mirrors[i], &centers[0]);
            let first = keep <= swap;
            changed |= first != in_first[i];
            in_first[i] = first;
        }
        if !changed && iteration > 0 {
            break;
        }
        let dim = originals[0].len();
        let n = images.len() as f64;
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        for i in 0..images.len() {
            let (a, b) = if in_first[i] { (&originals[i], &mirrors[i]) } else { (&mirrors[i], &originals[i]) };
            for d in 0..dim {
                sums[0][d] += a[d] / n;
                sums[1][d] += b[d] / n;
            }
        }
        centers = sums;
    }

    let first: Vec<usize> = (0..images.len()).filter(|&i| in_first[i]).collect();
    let second: Vec<usize> = (0..images.len()).filter(|&i| !in_first[i]).collect();
    // a cluster's mean asymmetry, counting mirrors with flipped sign
    let asym: Vec<f64> = images.iter().map(horizontal_asymmetry).collect();
    let cluster0: f64 = (0..images.len())
        .map(|i| if in_first[i] { asym[i] } else { -asym[i] })
        .sum();
    Ok(if cluster0 >= 0.0 {
        SideSplit { left: second, right: first }
    } else {
        SideSplit { left: first, right: second }
    })
}

/// 4-way softmax over whole-crop descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointClassifier(pub PartClassifier);

impl ViewpointClassifier {
    pub fn zeros(dim: usize) -> Self {
        ViewpointClassifier(PartClassifier::zeros(ClassifierRole::Viewpoint, Viewpoint::COUNT, dim, false))
    }

    pub fn predict_features(&self, f: &FeatureVector) -> Result<(Viewpoint, Vec<f64>)> {
        let p = self.0.score(f)?;
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok((Viewpoint::ALL[best], p))
    }
}

/// Train on descriptors grouped by viewpoint (indexed by [`Viewpoint::index`]).
pub fn train_viewpoint_from_features(sets: &[Vec<FeatureVector>], cfg: &TrainConfig) -> Result<ViewpointClassifier> {
    if sets.len() != Viewpoint::COUNT {
        return Err(Error::invalid("expected one sample set per viewpoint"));
    }
    if let Some(v) = (0..Viewpoint::COUNT).find(|&v| sets[v].is_empty()) {
        return Err(Error::invalid(format!("no training images for viewpoint {}", Viewpoint::ALL[v])));
    }
    let samples: Vec<Sample> = sets
        .iter()
        .enumerate()
        .flat_map(|(v, fs)| fs.iter().map(move |f| Sample::new(f.clone(), v)))
        .collect();
    let spec = ClassifierSpec {
        role: ClassifierRole::Viewpoint,
        class_count: Viewpoint::COUNT,
        has_background_class: false,
    };
    Ok(ViewpointClassifier(train_classifier(&samples, spec, cfg)?))
}

/// Train on whole images, one set per viewpoint.
pub fn train_viewpoint_classifier(sets: &[Vec<Raster>], cfg: &TrainConfig) -> Result<ViewpointClassifier> {
    let feats = sets
        .iter()
        .map(|imgs| {
            imgs.iter()
                .map(|r| extract_features(r, &r.full_box()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    train_viewpoint_from_features(&feats, cfg)
}

/// Most probable viewpoint of the crop `b`; ties resolve in enum order.
pub fn predict_viewpoint(v: &ViewpointClassifier, r: &Raster, b: &BBox) -> Result<(Viewpoint, Vec<f64>)> {
    v.predict_features(&extract_features(r, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// An arrow-like shape: a bar with a bright head block on the right.
    fn facing_right(w: usize, h: usize, shift: usize) -> Raster {
        let mut r = Raster::filled(w, h, [230, 230, 230]);
        for y in h / 3..2 * h / 3 {
            for x in 4 + shift..w - 4 {
                r.put(x, y, [40, 40, 160]);
            }
        }
        for y in h / 6..5 * h / 6 {
            for x in w - 12..w - 4 {
                r.put(x, y, [200, 30, 30]);
            }
        }
        r
    }

    #[test]
    fn names_roundtrip() {
        for v in Viewpoint::ALL {
            assert_eq!(v.name().parse::<Viewpoint>().unwrap(), v);
            assert_eq!(Viewpoint::from_index(v.index()), Some(v));
        }
        assert!("up".parse::<Viewpoint>().is_err());
    }

    #[test]
    fn mirror_pairs_land_in_opposite_clusters() {
        let base: Vec<Raster> = (0..4).map(|s| facing_right(40, 30, s)).collect();
        let mut imgs = base.clone();
        imgs.extend(base.iter().map(Raster::mirror_horizontal));
        let split = split_side_views(&imgs, 0).unwrap();
        assert_eq!(split.left.len() + split.right.len(), imgs.len());
        for i in 0..4 {
            let a = split.right.contains(&i);
            let b = split.right.contains(&(i + 4));
            assert_ne!(a, b);
        }
        assert_eq!(split.right, vec![0, 1, 2, 3]);
        assert_eq!(split, split_side_views(&imgs, 0).unwrap());
    }

    #[test]
    fn too_few_images() {
        assert!(split_side_views(&[Raster::filled(4, 4, [0, 0, 0])], 0).is_err());
    }

    #[test]
    fn zero_classifier_picks_front() {
        let v = ViewpointClassifier::zeros(crate::features::FEATURE_LEN);
        let r = Raster::filled(10, 10, [5, 5, 5]);
        let (vp, p) = predict_viewpoint(&v, &r, &r.full_box()).unwrap();
        assert_eq!(vp, Viewpoint::Front);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_viewpoint_set_rejected() {
        let sets = vec![vec![Raster::filled(4, 4, [0, 0, 0])], vec![], vec![], vec![]];
        assert!(train_viewpoint_classifier(&sets, &TrainConfig::default()).is_err());
    }
}
