//! Class-independent region proposals.
//!
//! A single-scale graph-based over-segmentation (Felzenszwalb–Huttenlocher on
//! smoothed RGB differences) seeds a greedy hierarchical grouping driven by a
//! weighted sum of color, texture, size and fill similarities. Every region
//! that ever exists in the hierarchy contributes its bounding box.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;

const SMOOTHING_SIGMA: f64 = 0.8;
const COLOR_BINS: usize = 25;
const TEXTURE_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// The `k` of the segmentation threshold `k / |C|`.
    pub base_segmentation_scale: f64,
    pub min_region_size: usize,
    /// Weights of the color, texture, size and fill similarities.
    pub merge_similarity_weights: [f64; 4],
    pub max_proposals: usize,
    pub min_proposal_side: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            base_segmentation_scale: 100.0,
            min_region_size: 8,
            merge_similarity_weights: [1.0, 1.0, 1.0, 1.0],
            max_proposals: 2000,
            min_proposal_side: 4.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_proposals == 0 {
            return Err(Error::invalid("proposals.max_proposals must be > 0"));
        }
        if self.merge_similarity_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(
                "proposals.merge_similarity_weights must be >= 0",
            ));
        }
        if !(self.base_segmentation_scale >= 0.0) {
            return Err(Error::invalid(
                "proposals.base_segmentation_scale must be >= 0",
            ));
        }
        if !(self.min_proposal_side >= 0.0) {
            return Err(Error::invalid("proposals.min_proposal_side must be >= 0"));
        }
        Ok(())
    }
}

/// Ranked proposal boxes of one image; earlier boxes rank higher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub source_image_id: String,
    pub boxes: Vec<BBox>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Rank-derived score in (0, 1]; the first proposal scores 1.
    pub fn score(&self, rank: usize) -> f64 {
        (self.boxes.len() - rank) as f64 / self.boxes.len() as f64
    }

    /// CSV rows `image_id,x_min,y_min,x_max,y_max` (no header).
    pub fn to_csv_rows(&self) -> String {
        let mut s = String::new();
        for b in &self.boxes {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.source_image_id, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
        s
    }
}

pub fn generate_proposals(r: &Raster, cfg: &ProposalConfig) -> Result<ProposalSet> {
    generate_proposals_for(r, cfg, "")
}

pub fn generate_proposals_for(r: &Raster, cfg: &ProposalConfig, image_id: &str) -> Result<ProposalSet> {
    cfg.validate()?;
    let full = r.full_box();
    let single = |id: &str| ProposalSet {
        source_image_id: id.to_string(),
        boxes: vec![full],
    };
    if r.len() <= 1 || r.len() < cfg.min_region_size {
        return Ok(single(image_id));
    }
    let labels = felzenszwalb(r, cfg.base_segmentation_scale, cfg.min_region_size);
    let mut boxes = hierarchical_grouping(r, &labels, cfg.merge_similarity_weights);

    let mut seen = BTreeSet::new();
    boxes.retain(|b| {
        let key = (b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64);
        b.width() >= cfg.min_proposal_side && b.height() >= cfg.min_proposal_side && seen.insert(key)
    });
    boxes.truncate(cfg.max_proposals);
    if boxes.is_empty() {
        return Ok(single(image_id));
    }
    Ok(ProposalSet {
        source_image_id: image_id.to_string(),
        boxes,
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur; returns planar f64 channels.
fn smooth(r: &Raster, sigma: f64) -> [Vec<f64>; 3] {
    let (w, h) = (r.width(), r.height());
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, plane) in out.iter_mut().enumerate() {
        let src: Vec<f64> = (0..w * h).map(|i| r.at(i)[c] as f64).collect();
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = (x as isize + t as isize - rad).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        *plane = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = (y as isize + t as isize - rad).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
    out
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
            size: vec![1; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        self.size[hi] += self.size[lo];
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        hi
    }

    pub(crate) fn size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }
}

/// Graph-based segmentation; returns a dense region label per pixel with
/// labels numbered in raster order of first appearance.
fn felzenszwalb(r: &Raster, k: f64, min_size: usize) -> Vec<usize> {
    let (w, h) = (r.width(), r.height());
    let planes = smooth(r, SMOOTHING_SIGMA);
    let diff = |a: usize, b: usize| -> f64 {
        (0..3)
            .map(|c| (planes[c][a] - planes[c][b]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((diff(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((diff(i, i + w), i, i + w));
                if x + 1 < w {
                    edges.push((diff(i, i + w + 1), i, i + w + 1));
                }
                if x > 0 {
                    edges.push((diff(i, i + w - 1), i, i + w - 1));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut ds = DisjointSet::new(w * h);
    let mut threshold = vec![k; w * h];
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && wt <= threshold[ra] && wt <= threshold[rb] {
            let root = ds.union(ra, rb);
            threshold[root] = wt + k / ds.size(root) as f64;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size(ra) < min_size || ds.size(rb) < min_size) {
            ds.union(ra, rb);
        }
    }

    let mut remap = BTreeMap::new();
    (0..w * h)
        .map(|i| {
            let root = ds.find(i);
            let next = remap.len();
            *remap.entry(root).or_insert(next)
        })
        .collect()
}

struct Region {
    size: f64,
    bbox: [usize; 4],
    color: Vec<f64>,
    texture: Vec<f64>,
}

impl Region {
    fn merged(&self, other: &Region) -> Region {
        let total = self.size + other.size;
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x * self.size + y * other.size) / total)
                .collect()
        };
        Region {
            size: total,
            bbox: union_bbox(&self.bbox, &other.bbox),
            color: mix(&self.color, &other.color),
            texture: mix(&self.texture, &other.texture),
        }
    }

    fn to_box(&self) -> BBox {
        BBox {
            x_min: self.bbox[0] as f64,
            y_min: self.bbox[1] as f64,
            x_max: self.bbox[2] as f64,
            y_max: self.bbox[3] as f64,
        }
    }
}

fn union_bbox(a: &[usize; 4], b: &[usize; 4]) -> [usize; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

fn normalize_l1(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn similarity(a: &Region, b: &Region, image_area: f64, weights: &[f64; 4]) -> f64 {
    let s_color = histogram_intersection(&a.color, &b.color) / 3.0;
    let s_texture = histogram_intersection(&a.texture, &b.texture) / 3.0;
    let s_size = 1.0 - (a.size + b.size) / image_area;
    let bb = union_bbox(&a.bbox, &b.bbox);
    let bb_area = ((bb[2] - bb[0]) * (bb[3] - bb[1])) as f64;
    let s_fill = 1.0 - (bb_area - a.size - b.size) / image_area;
    weights[0] * s_color + weights[1] * s_texture + weights[2] * s_size + weights[3] * s_fill
}

/// Greedy bottom-up grouping of adjacent regions. Returns the boxes of the
/// initial regions followed by the box of every merged region in merge order.
fn hierarchical_grouping(r: &Raster, labels: &[usize], weights: [f64; 4]) -> Vec<BBox> {
    let (w, h) = (r.width(), r.height());
    let n = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut regions: Vec<Option<Region>> = (0..n)
        .map(|_| {
            Some(Region {
                size: 0.0,
                bbox: [usize::MAX, usize::MAX, 0, 0],
                color: vec![0.0; 3 * COLOR_BINS],
                texture: vec![0.0; 3 * TEXTURE_BINS],
            })
        })
        .collect();

    let planes: [Vec<f64>; 3] = std::array::from_fn(|c| (0..w * h).map(|i| r.at(i)[c] as f64).collect());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let reg = regions[labels[i]].as_mut().unwrap();
            reg.size += 1.0;
            reg.bbox[0] = reg.bbox[0].min(x);
            reg.bbox[1] = reg.bbox[1].min(y);
            reg.bbox[2] = reg.bbox[2].max(x + 1);
            reg.bbox[3] = reg.bbox[3].max(y + 1);
            for c in 0..3 {
                let v = planes[c][i];
                let bin = ((v / 256.0) * COLOR_BINS as f64) as usize;
                reg.color[c * COLOR_BINS + bin.min(COLOR_BINS - 1)] += 1.0;
                let xl = planes[c][y * w + x.saturating_sub(1)];
                let xr = planes[c][y * w + (x + 1).min(w - 1)];
                let yu = planes[c][y.saturating_sub(1) * w + x];
                let yd = planes[c][(y + 1).min(h - 1) * w + x];
                let gx = xr - xl;
                let gy = yd - yu;
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                    let bin = ((theta / std::f64::consts::TAU) * TEXTURE_BINS as f64) as usize;
                    reg.texture[c * TEXTURE_BINS + bin.min(TEXTURE_BINS - 1)] += mag;
                }
            }
        }
    }
    for reg in regions.iter_mut().flatten() {
        for c in 0..3 {
            normalize_l1(&mut reg.color[c * COLOR_BINS..(c + 1) * COLOR_BINS]);
            normalize_l1(&mut reg.texture[c * TEXTURE_BINS..(c + 1) * TEXTURE_BINS]);
        }
    }

    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = labels[y * w + x];
            if x + 1 < w {
                let b = labels[y * w + x + 1];
                if a != b {
                    neighbors[a].insert(b);
                    neighbors[b].insert(a);
                }
            }
            if y + 1 < h {
                let b = labels[(y + 1) * w + x];
                if a != b {
                    neighbors[a].insert(b);
                    neighbors[b].insert(a);
                }
            }
        }
    }

    let image_area = (w * h) as f64;
    let mut boxes: Vec<BBox> = regions.iter().flatten().map(Region::to_box).collect();
    let mut sims: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for a in 0..n {
        for &b in neighbors[a].iter().filter(|&&b| b > a) {
            let s = similarity(
                regions[a].as_ref().unwrap(),
                regions[b].as_ref().unwrap(),
                image_area,
                &weights,
            );
            sims.insert((a, b), s);
        }
    }

    while let Some((&(a, b), _)) = sims
        .iter()
        .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(x.0)))
    {
        let ra = regions[a].take().unwrap();
        let rb = regions[b].take().unwrap();
        let merged = ra.merged(&rb);
        boxes.push(merged.to_box());
        let id = regions.len();
        regions.push(Some(merged));

        let mut nb: BTreeSet<usize> = neighbors[a].union(&neighbors[b]).copied().collect();
        nb.remove(&a);
        nb.remove(&b);
        sims.retain(|&(x, y), _| x != a && x != b && y != a && y != b);
        for &m in &nb {
            neighbors[m].remove(&a);
            neighbors[m].remove(&b);
            neighbors[m].insert(id);
            let s = similarity(
                regions[m].as_ref().unwrap(),
                regions[id].as_ref().unwrap(),
                image_area,
                &weights,
            );
            sims.insert((m, id), s);
        }
        neighbors.push(nb);
    }
    boxes
}
