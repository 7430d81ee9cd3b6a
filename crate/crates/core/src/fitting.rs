//! Tight instance boxes from proposal density and iterated graph-cut
//! segmentation.
//!
//! The fraction of proposals covering a pixel is both a unary potential and
//! the seed for two color mixtures (foreground and background). Labels and
//! mixtures are then re-estimated alternately until the labeling settles, and
//! every sufficiently large 4-connected foreground component yields a box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Size};
use crate::gmm::{fit_color_mixture_traced, ColorMixture};
use crate::graphcut::{min_cut_labeling, PairwiseCost};
use crate::proposals::{generate_proposals, ProposalConfig, ProposalSet};
use crate::raster::{encode_pgm, Raster};

/// Per-pixel foreground likelihood `M(1)`; `M(0) = 1 - M(1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundPrior {
    pub width: usize,
    pub height: usize,
    pub foreground: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegEnergyConfig {
    pub alpha: f64,
    /// Contrast sensitivity; `None` picks `1 / (2 * mean ||c_i - c_j||^2)` per image.
    pub beta_contrast: Option<f64>,
    pub epsilon_log: f64,
    pub gmm_components: usize,
    pub max_iterations: usize,
    pub min_component_area_fraction: f64,
}

impl Default for SegEnergyConfig {
    fn default() -> Self {
        SegEnergyConfig {
            alpha: 10.0,
            beta_contrast: None,
            epsilon_log: 1e-6,
            gmm_components: 5,
            max_iterations: 10,
            min_component_area_fraction: 0.01,
        }
    }
}

impl SegEnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("segmentation.alpha must be >= 0"));
        }
        if !(self.epsilon_log > 0.0) {
            return Err(Error::invalid("segmentation.epsilon_log must be > 0"));
        }
        if self.gmm_components == 0 {
            return Err(Error::invalid("segmentation.gmm_components must be > 0"));
        }
        if matches!(self.beta_contrast, Some(b) if !(b >= 0.0)) {
            return Err(Error::invalid("segmentation.beta_contrast must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.min_component_area_fraction) {
            return Err(Error::invalid(
                "segmentation.min_component_area_fraction must be in [0,1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// `true` = foreground.
    pub labels: Vec<bool>,
    pub energy: f64,
}

impl Segmentation {
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Mask as a binary PGM (foreground white).
    pub fn to_pgm(&self) -> Vec<u8> {
        let v: Vec<u8> = self.labels.iter().map(|&l| if l { 255 } else { 0 }).collect();
        encode_pgm(self.width, self.height, &v)
    }
}

/// Fraction of proposals whose box contains each pixel center.
pub fn proposal_prior(proposals: &ProposalSet, image: Size) -> Result<ForegroundPrior> {
    if proposals.is_empty() {
        return Err(Error::invalid("proposal prior needs at least one proposal"));
    }
    let w = image.width as usize;
    let h = image.height as usize;
    if w == 0 || h == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    // 2D difference array over pixel index ranges
    let mut diff = vec![0i64; (w + 1) * (h + 1)];
    let span = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        // pixel p is covered iff lo <= p + 0.5 < hi
        let a = (lo - 0.5).ceil().max(0.0) as usize;
        let b = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        (a.min(n), b)
    };
    for b in &proposals.boxes {
        let (x0, x1) = span(b.x_min, b.x_max, w);
        let (y0, y1) = span(b.y_min, b.y_max, h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        diff[y0 * (w + 1) + x0] += 1;
        diff[y0 * (w + 1) + x1] -= 1;
        diff[y1 * (w + 1) + x0] -= 1;
        diff[y1 * (w + 1) + x1] += 1;
    }
    for y in 0..=h {
        for x in 1..=w {
            diff[y * (w + 1) + x] += diff[y * (w + 1) + x - 1];
        }
    }
    for y in 1..=h {
        for x in 0..=w {
            diff[y * (w + 1) + x] += diff[(y - 1) * (w + 1) + x];
        }
    }
    let total = proposals.len() as f64;
    let foreground = (0..w * h)
        .map(|i| diff[(i / w) * (w + 1) + i % w] as f64 / total)
        .collect();
    Ok(ForegroundPrior {
        width: w,
        height: h,
        foreground,
    })
}

/// Per-image contrast parameter `1 / (2 * mean squared neighbor difference)`.
pub fn auto_beta(r: &Raster) -> f64 {
    let (sum, count) = neighbor_pairs(r.width(), r.height())
        .map(|(i, j)| color_dist2(r, i, j))
        .fold((0.0, 0usize), |(s, c), d| (s + d, c + 1));
    if count == 0 || sum == 0.0 {
        0.0
    } else {
        1.0 / (2.0 * sum / count as f64)
    }
}

fn neighbor_pairs(w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            let i = y * w + x;
            let right = (x + 1 < w).then_some((i, i + 1));
            let down = (y + 1 < h).then_some((i, i + w));
            right.into_iter().chain(down)
        })
    })
}

fn color_dist2(r: &Raster, i: usize, j: usize) -> f64 {
    let (a, b) = (r.at(i), r.at(j));
    (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum()
}

fn check_dims(r: &Raster, prior: &ForegroundPrior) -> Result<()> {
    if prior.width != r.width() || prior.height != r.height() {
        return Err(Error::invalid(format!(
            "prior is {}x{} but raster is {}x{}",
            prior.width,
            prior.height,
            r.width(),
            r.height()
        )));
    }
    Ok(())
}

struct EnergyTerms {
    unary: Vec<[f64; 2]>,
    pairwise: Vec<PairwiseCost>,
}

fn energy_terms(
    r: &Raster,
    prior: &ForegroundPrior,
    fg: &ColorMixture,
    bg: &ColorMixture,
    cfg: &SegEnergyConfig,
    beta: f64,
) -> EnergyTerms {
    let eps = cfg.epsilon_log;
    let unary = (0..r.len())
        .map(|i| {
            let c = r.at(i);
            let c = [c[0] as f64, c[1] as f64, c[2] as f64];
            let m = prior.foreground[i];
            [
                -(1.0 - m + eps).ln() - bg.log_likelihood(&c),
                -(m + eps).ln() - fg.log_likelihood(&c),
            ]
        })
        .collect();
    let pairwise = if cfg.alpha > 0.0 {
        neighbor_pairs(r.width(), r.height())
            .map(|(i, j)| (i, j, cfg.alpha * (-beta * color_dist2(r, i, j)).exp()))
            .collect()
    } else {
        Vec::new()
    };
    EnergyTerms { unary, pairwise }
}

/// Total segmentation energy: proposal-prior unary, color-mixture unary and
/// contrast-sensitive Potts smoothness over 4-neighbors.
pub fn energy(
    labels: &[bool],
    r: &Raster,
    prior: &ForegroundPrior,
    fg: &ColorMixture,
    bg: &ColorMixture,
    cfg: &SegEnergyConfig,
) -> Result<f64> {
    check_dims(r, prior)?;
    if labels.len() != r.len() {
        return Err(Error::invalid("label count does not match raster"));
    }
    let beta = cfg.beta_contrast.unwrap_or_else(|| auto_beta(r));
    let t = energy_terms(r, prior, fg, bg, cfg, beta);
    Ok(crate::graphcut::labeling_energy(&t.unary, &t.pairwise, labels))
}

/// Result of [`grabcut_iterate`] with the per-iteration energy trace.
#[derive(Debug, Clone)]
pub struct GrabCut {
    pub segmentation: Segmentation,
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    /// Mixtures that produced the final labeling; absent for trivial results.
    pub models: Option<(ColorMixture, ColorMixture)>,
}

/// Otsu threshold over prior values; `None` when the prior is constant.
fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean_all = values.iter().sum::<f64>() / n;
    let mut best = (f64::NEG_INFINITY, sorted[1]);
    for k in 1..sorted.len() {
        let t = sorted[k];
        let (mut n0, mut s0) = (0.0, 0.0);
        for &v in values.iter().filter(|&&v| v < t) {
            n0 += 1.0;
            s0 += v;
        }
        let n1 = n - n0;
        let m0 = s0 / n0;
        let m1 = (mean_all * n - s0) / n1;
        let between = n0 * n1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

fn colors_of(r: &Raster, labels: &[bool], want: bool) -> Vec<[f64; 3]> {
    (0..r.len())
        .filter(|&i| labels[i] == want)
        .map(|i| {
            let c = r.at(i);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect()
}

const EM_STEPS_INITIAL: usize = 20;
const EM_STEPS_REFINE: usize = 5;

/// Alternate graph-cut labeling and mixture re-estimation.
///
/// The initial labeling thresholds the log prior at its Otsu split. A prior that
/// puts every pixel on the same side yields the trivial segmentation.
pub fn grabcut_iterate(r: &Raster, prior: &ForegroundPrior, cfg: &SegEnergyConfig) -> Result<GrabCut> {
    cfg.validate()?;
    check_dims(r, prior)?;
    let n = r.len();
    let log_prior: Vec<f64> = prior.foreground.iter().map(|&m| (m + cfg.epsilon_log).ln()).collect();
    let threshold = otsu_threshold(&log_prior);
    let mut labels: Vec<bool> = match threshold {
        Some(t) => log_prior.iter().map(|&m| m >= t).collect(),
        None => vec![prior.foreground.first().is_some_and(|&m| m >= 0.5); n],
    };
    let fg_count = labels.iter().filter(|&&l| l).count();
    if fg_count == 0 || fg_count == n {
        let eps = cfg.epsilon_log;
        let energy = labels
            .iter()
            .zip(&prior.foreground)
            .map(|(&l, &m)| -(if l { m } else { 1.0 - m } + eps).ln())
            .sum();
        return Ok(GrabCut {
            segmentation: Segmentation {
                width: r.width(),
                height: r.height(),
                labels,
                energy,
            },
            energy_trace: Vec::new(),
            iterations: 0,
            models: None,
        });
    }

    let beta = cfg.beta_contrast.unwrap_or_else(|| auto_beta(r));
    let k = cfg.gmm_components;
    let (mut fg, _) = fit_color_mixture_traced(&colors_of(r, &labels, true), k, EM_STEPS_INITIAL)?;
    let (mut bg, _) = fit_color_mixture_traced(&colors_of(r, &labels, false), k, EM_STEPS_INITIAL)?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut current_energy;
    loop {
        let terms = energy_terms(r, prior, &fg, &bg, cfg, beta);
        let cut = min_cut_labeling(&terms.unary, &terms.pairwise)?;
        let old = crate::graphcut::labeling_energy(&terms.unary, &terms.pairwise, &labels);
        iterations += 1;
        let changed;
        if cut.energy <= old {
            changed = cut.labels.iter().zip(&labels).filter(|(a, b)| a != b).count();
            labels = cut.labels;
            current_energy = cut.energy;
        } else {
            changed = 0;
            current_energy = old;
        }
        trace.push(current_energy);
        if (changed as f64) < 0.001 * n as f64 || iterations >= cfg.max_iterations {
            break;
        }
        fg = fg.refine(&colors_of(r, &labels, true), EM_STEPS_REFINE).0;
        bg = bg.refine(&colors_of(r, &labels, false), EM_STEPS_REFINE).0;
    }
    Ok(GrabCut {
        segmentation: Segmentation {
            width: r.width(),
            height: r.height(),
            labels,
            energy: current_energy,
        },
        energy_trace: trace,
        iterations,
        models: Some((fg, bg)),
    })
}

/// Tight boxes around 4-connected foreground components covering at least
/// `min_component_area_fraction` of the image, in raster order of their
/// first pixel.
pub fn boxes_from_segmentation(seg: &Segmentation, cfg: &SegEnergyConfig) -> Vec<BBox> {
    let (w, h) = (seg.width, seg.height);
    let min_area = cfg.min_component_area_fraction * (w * h) as f64;
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !seg.labels[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0usize;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if seg.labels[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area as f64 >= min_area {
            out.push(BBox {
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: x1 as f64,
                y_max: y1 as f64,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub proposals: ProposalConfig,
    pub segmentation: SegEnergyConfig,
}

/// Intermediate products of [`fit_instance_boxes`], kept for debugging dumps.
#[derive(Debug, Clone)]
pub struct InstanceFit {
    pub proposals: ProposalSet,
    pub prior: ForegroundPrior,
    pub grabcut: GrabCut,
    pub boxes: Vec<BBox>,
}

pub fn fit_instances(r: &Raster, cfg: &FitConfig) -> Result<InstanceFit> {
    let proposals = generate_proposals(r, &cfg.proposals)?;
    let prior = proposal_prior(&proposals, r.size())?;
    let grabcut = grabcut_iterate(r, &prior, &cfg.segmentation)?;
    let boxes = boxes_from_segmentation(&grabcut.segmentation, &cfg.segmentation);
    Ok(InstanceFit {
        proposals,
        prior,
        grabcut,
        boxes,
    })
}

pub fn fit_instance_boxes(r: &Raster, cfg: &FitConfig) -> Result<Vec<BBox>> {
    fit_instances(r, cfg).map(|f| f.boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::gmm::fit_color_mixture;

    fn boxes(v: &[(f64, f64, f64, f64)]) -> ProposalSet {
        ProposalSet {
            source_image_id: String::new(),
            boxes: v.iter().map(|&(a, b, c, d)| BBox::new(a, b, c, d).unwrap()).collect(),
        }
    }

    #[test]
    fn prior_counts_covering_proposals() {
        // ten boxes; pixel (5,5) lies inside exactly three
        let mut v = vec![(4.0, 4.0, 7.0, 7.0), (0.0, 0.0, 6.0, 6.0), (5.0, 5.0, 10.0, 10.0)];
        v.extend(std::iter::repeat_n((0.0, 0.0, 2.0, 2.0), 7));
        let ps = boxes(&v);
        let prior = proposal_prior(&ps, Size::new(10.0, 10.0)).unwrap();
        let oracle = |x: usize, y: usize| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            ps.boxes.iter().filter(|b| b.contains_point(cx, cy)).count() as f64 / 10.0
        };
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(prior.foreground[y * 10 + x], oracle(x, y));
            }
        }
        assert!((prior.foreground[5 * 10 + 5] - 0.3).abs() < 1e-12);
        assert_eq!(prior.foreground[0], 0.8);
        assert_eq!(prior.foreground[9 * 10 + 0], 0.0);
        let all = boxes(&[(0.0, 0.0, 10.0, 10.0)]);
        let p = proposal_prior(&all, Size::new(10.0, 10.0)).unwrap();
        assert!(p.foreground.iter().all(|&m| m == 1.0));
        assert!(proposal_prior(&boxes(&[]), Size::new(3.0, 3.0)).is_err());
    }

    fn planted(w: usize, h: usize, rect: (usize, usize, usize, usize)) -> Raster {
        let mut r = Raster::filled(w, h, [230, 225, 210]);
        for y in rect.1..rect.3 {
            for x in rect.0..rect.2 {
                r.put(x, y, [30, 60, 160]);
            }
        }
        r
    }

    fn prior_from_rect(w: usize, h: usize, rect: (usize, usize, usize, usize)) -> ForegroundPrior {
        let mut fgv = vec![0.1; w * h];
        for y in rect.1..rect.3 {
            for x in rect.0..rect.2 {
                fgv[y * w + x] = 0.8;
            }
        }
        ForegroundPrior {
            width: w,
            height: h,
            foreground: fgv,
        }
    }

    #[test]
    fn energy_symmetric_when_uninformative() {
        let r = planted(6, 5, (1, 1, 4, 3));
        let prior = ForegroundPrior {
            width: 6,
            height: 5,
            foreground: vec![0.5; 30],
        };
        let px: Vec<_> = (0..r.len()).map(|i| r.at(i)).collect();
        let mix = fit_color_mixture(&px, 2).unwrap();
        let cfg = SegEnergyConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let a = energy(&vec![true; 30], &r, &prior, &mix, &mix, &cfg).unwrap();
        let alt: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let b = energy(&alt, &r, &prior, &mix, &mix, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn prior_term_vanishes_for_certain_foreground() {
        let r = Raster::filled(3, 3, [10, 10, 10]);
        let prior = ForegroundPrior {
            width: 3,
            height: 3,
            foreground: vec![1.0; 9],
        };
        let mix = fit_color_mixture(&[[10, 10, 10]], 1).unwrap();
        let cfg = SegEnergyConfig {
            epsilon_log: 1e-12,
            ..Default::default()
        };
        let e = energy(&[true; 9], &r, &prior, &mix, &mix, &cfg).unwrap();
        let appearance = -9.0 * mix.log_likelihood(&[10.0, 10.0, 10.0]);
        assert!((e - appearance).abs() < 1e-9);
    }

    #[test]
    fn single_edge_pairwise_term() {
        let r = Raster::new(2, 1, vec![10, 20, 30, 13, 24, 30]).unwrap();
        let prior = ForegroundPrior {
            width: 2,
            height: 1,
            foreground: vec![0.5; 2],
        };
        let mix = fit_color_mixture(&[[10, 20, 30], [13, 24, 30]], 1).unwrap();
        let cfg = SegEnergyConfig {
            alpha: 3.0,
            beta_contrast: Some(0.01),
            ..Default::default()
        };
        let same = energy(&[true, true], &r, &prior, &mix, &mix, &cfg).unwrap();
        let diff = energy(&[true, false], &r, &prior, &mix, &mix, &cfg).unwrap();
        let expected = 3.0 * (-0.01f64 * 25.0).exp();
        assert!((diff - same - expected).abs() < 1e-9);
    }

    #[test]
    fn grabcut_recovers_planted_rectangle() {
        let rect = (10, 8, 30, 24);
        let r = planted(40, 32, rect);
        let prior = prior_from_rect(40, 32, rect);
        let g = grabcut_iterate(&r, &prior, &SegEnergyConfig::default()).unwrap();
        assert!(g.iterations <= 3, "{} iterations", g.iterations);
        let correct = (0..r.len())
            .filter(|&i| {
                let (x, y) = (i % 40, i / 40);
                let truth = x >= rect.0 && x < rect.2 && y >= rect.1 && y < rect.3;
                g.segmentation.labels[i] == truth
            })
            .count();
        assert!(correct as f64 / r.len() as f64 >= 0.99);
        for w in g.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let b = boxes_from_segmentation(&g.segmentation, &SegEnergyConfig::default());
        assert_eq!(b, vec![BBox::new(10., 8., 30., 24.).unwrap()]);
    }

    #[test]
    fn one_sided_prior_is_trivial() {
        let r = planted(10, 10, (2, 2, 5, 5));
        let prior = ForegroundPrior {
            width: 10,
            height: 10,
            foreground: vec![0.2; 100],
        };
        let g = grabcut_iterate(&r, &prior, &SegEnergyConfig::default()).unwrap();
        assert_eq!(g.segmentation.foreground_count(), 0);
        let prior = ForegroundPrior {
            foreground: vec![0.9; 100],
            ..prior
        };
        let g = grabcut_iterate(&r, &prior, &SegEnergyConfig::default()).unwrap();
        assert_eq!(g.segmentation.foreground_count(), 100);
    }

    #[test]
    fn zero_alpha_is_unary_argmin() {
        let rect = (3, 3, 9, 8);
        let mut r = planted(14, 12, rect);
        r.put(0, 0, [30, 60, 160]);
        let prior = prior_from_rect(14, 12, rect);
        let cfg = SegEnergyConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let g = grabcut_iterate(&r, &prior, &cfg).unwrap();
        let seg = &g.segmentation;
        let (fgm, bgm) = g.models.clone().unwrap();
        for i in 0..r.len() {
            let c = r.at(i);
            let c = [c[0] as f64, c[1] as f64, c[2] as f64];
            let m = prior.foreground[i];
            let cost_fg = -(m + cfg.epsilon_log).ln() - fgm.log_likelihood(&c);
            let cost_bg = -(1.0 - m + cfg.epsilon_log).ln() - bgm.log_likelihood(&c);
            if cost_fg != cost_bg {
                assert_eq!(seg.labels[i], cost_fg < cost_bg, "pixel {i}");
            }
        }
        for w in g.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let b = boxes_from_segmentation(seg, &cfg);
        assert!(!b.is_empty());
    }

    #[test]
    fn components_to_boxes() {
        let cfg = SegEnergyConfig::default();
        let empty = Segmentation {
            width: 20,
            height: 10,
            labels: vec![false; 200],
            energy: 0.0,
        };
        assert!(boxes_from_segmentation(&empty, &cfg).is_empty());
        let mut labels = vec![false; 200];
        for y in 2..6 {
            for x in 1..4 {
                labels[y * 20 + x] = true;
            }
            for x in 12..18 {
                labels[y * 20 + x] = true;
            }
        }
        let seg = Segmentation {
            labels,
            ..empty.clone()
        };
        let b = boxes_from_segmentation(&seg, &cfg);
        assert_eq!(
            b,
            vec![
                BBox::new(1., 2., 4., 6.).unwrap(),
                BBox::new(12., 2., 18., 6.).unwrap()
            ]
        );
        // speckle below the area fraction is dropped
        let mut labels = vec![false; 200];
        labels[55] = true;
        let seg = Segmentation { labels, ..empty };
        assert!(boxes_from_segmentation(&seg, &cfg).is_empty());
    }

    #[test]
    fn end_to_end_single_object() {
        let r = planted(48, 40, (12, 10, 36, 30));
        let got = fit_instance_boxes(&r, &FitConfig::default()).unwrap();
        assert_eq!(got.len(), 1);
        assert!(iou(&got[0], &BBox::new(12., 10., 36., 30.).unwrap()) >= 0.9);
    }
}
