//! Full-covariance Gaussian mixtures over RGB colors, fit by EM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb;

/// Added to every covariance diagonal (8-bit color units squared).
pub const COVARIANCE_FLOOR: f64 = 1.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: [f64; 3],
    pub covariance: Mat3,
    #[serde(skip)]
    cache: Option<(Mat3, f64)>,
}

impl Gaussian {
    fn new(weight: f64, mean: [f64; 3], covariance: Mat3) -> Self {
        let mut g = Gaussian {
            weight,
            mean,
            covariance,
            cache: None,
        };
        g.refresh();
        g
    }

    fn refresh(&mut self) {
        let det = det3(&self.covariance);
        self.cache = Some((inv3(&self.covariance, det), det.ln()));
    }

    /// `ln N(x | mean, covariance)`.
    pub fn log_density(&self, x: &[f64; 3]) -> f64 {
        let (inv, log_det) = match self.cache {
            Some(c) => c,
            None => {
                let det = det3(&self.covariance);
                (inv3(&self.covariance, det), det.ln())
            }
        };
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        let mut m = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m += d[i] * inv[i][j] * d[j];
            }
        }
        -0.5 * (3.0 * LN_2PI + log_det + m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorMixture {
    pub components: Vec<Gaussian>,
}

impl ColorMixture {
    pub fn log_likelihood(&self, c: &[f64; 3]) -> f64 {
        log_sum_exp(
            self.components
                .iter()
                .filter(|g| g.weight > 0.0)
                .map(|g| g.weight.ln() + g.log_density(c)),
        )
    }

    pub fn total_log_likelihood(&self, pixels: &[[f64; 3]]) -> f64 {
        pixels.iter().map(|p| self.log_likelihood(p)).sum()
    }

    /// Continue EM from the current parameters on `pixels`. Steps that would
    /// lower the log-likelihood are rejected, so the returned mixture never
    /// explains `pixels` worse than `self`. An empty pixel set leaves the
    /// mixture unchanged.
    pub fn refine(&self, pixels: &[[f64; 3]], max_iterations: usize) -> (ColorMixture, Vec<f64>) {
        let mut current = self.clone();
        if pixels.is_empty() {
            return (current, Vec::new());
        }
        let mut ll = current.total_log_likelihood(pixels);
        let mut trace = vec![ll];
        for _ in 0..max_iterations {
            let next = em_step(&current, pixels);
            let next_ll = next.total_log_likelihood(pixels);
            if !(next_ll >= ll) {
                break;
            }
            let gain = next_ll - ll;
            current = next;
            ll = next_ll;
            trace.push(ll);
            if gain <= 1e-7 * ll.abs().max(1.0) {
                break;
            }
        }
        (current, trace)
    }
}

pub fn to_f64(pixels: &[Rgb]) -> Vec<[f64; 3]> {
    pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect()
}

pub fn fit_color_mixture(pixels: &[Rgb], k: usize) -> Result<ColorMixture> {
    fit_color_mixture_traced(&to_f64(pixels), k, 50).map(|(m, _)| m)
}

/// EM fit with its per-iteration log-likelihood trace.
pub fn fit_color_mixture_traced(
    pixels: &[[f64; 3]],
    k: usize,
    max_iterations: usize,
) -> Result<(ColorMixture, Vec<f64>)> {
    if k == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if pixels.is_empty() {
        return Err(Error::invalid("cannot fit a mixture to zero pixels"));
    }
    let init = initialize(pixels, k.min(pixels.len()));
    Ok(init.refine(pixels, max_iterations))
}

/// Farthest-first seeding followed by a few hard-assignment passes.
fn initialize(pixels: &[[f64; 3]], k: usize) -> ColorMixture {
    let n = pixels.len() as f64;
    let mut mean = [0.0; 3];
    for p in pixels {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let first = argmax(pixels.iter().map(|p| dist2(p, &mean)));
    let mut centers = vec![pixels[first]];
    let mut nearest: Vec<f64> = pixels.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let i = argmax(nearest.iter().copied());
        if nearest[i] <= 0.0 {
            break;
        }
        centers.push(pixels[i]);
        for (d, p) in nearest.iter_mut().zip(pixels) {
            *d = d.min(dist2(p, &pixels[i]));
        }
    }

    let mut assign = vec![0usize; pixels.len()];
    for _ in 0..5 {
        for (a, p) in assign.iter_mut().zip(pixels) {
            *a = argmin(centers.iter().map(|c| dist2(p, c)));
        }
        let mut sums = vec![[0.0; 4]; centers.len()];
        for (a, p) in assign.iter().zip(pixels) {
            for c in 0..3 {
                sums[*a][c] += p[c];
            }
            sums[*a][3] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                *c = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
            }
        }
    }

    let mut comps = Vec::with_capacity(centers.len());
    for (j, c) in centers.iter().enumerate() {
        let members: Vec<&[f64; 3]> = assign
            .iter()
            .zip(pixels)
            .filter(|(a, _)| **a == j)
            .map(|(_, p)| p)
            .collect();
        let cnt = members.len() as f64;
        if cnt == 0.0 {
            continue;
        }
        let mut cov = [[0.0; 3]; 3];
        for p in &members {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += d[a] * d[b] / cnt;
                }
            }
        }
        for (a, row) in cov.iter_mut().enumerate() {
            row[a] += COVARIANCE_FLOOR;
        }
        comps.push(Gaussian::new(cnt / n, *c, cov));
    }
    ColorMixture { components: comps }
}

fn em_step(m: &ColorMixture, pixels: &[[f64; 3]]) -> ColorMixture {
    let k = m.components.len();
    let mut nk = vec![0.0; k];
    let mut sx = vec![[0.0; 3]; k];
    let mut sxx = vec![[[0.0; 3]; 3]; k];
    let mut logs = vec![0.0; k];
    for p in pixels {
        for (l, g) in logs.iter_mut().zip(&m.components) {
            *l = if g.weight > 0.0 {
                g.weight.ln() + g.log_density(p)
            } else {
                f64::NEG_INFINITY
            };
        }
        let norm = log_sum_exp(logs.iter().copied());
        for j in 0..k {
            let r = (logs[j] - norm).exp();
            if r == 0.0 {
                continue;
            }
            nk[j] += r;
            for a in 0..3 {
                sx[j][a] += r * p[a];
                for b in 0..3 {
                    sxx[j][a][b] += r * p[a] * p[b];
                }
            }
        }
    }
    let n = pixels.len() as f64;
    let comps = (0..k)
        .map(|j| {
            if nk[j] < 1e-9 {
                let mut g = m.components[j].clone();
                g.weight = 0.0;
                return g;
            }
            let mu = [sx[j][0] / nk[j], sx[j][1] / nk[j], sx[j][2] / nk[j]];
            let mut cov = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] = sxx[j][a][b] / nk[j] - mu[a] * mu[b];
                }
            }
            for a in 0..3 {
                for b in 0..a {
                    let s = 0.5 * (cov[a][b] + cov[b][a]);
                    cov[a][b] = s;
                    cov[b][a] = s;
                }
                cov[a][a] = cov[a][a].max(0.0) + COVARIANCE_FLOOR;
            }
            Gaussian::new(nk[j] / n, mu, cov)
        })
        .collect();
    ColorMixture { components: comps }
}

pub(crate) fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

fn argmin(it: impl Iterator<Item = f64>) -> usize {
    argmax(it.map(|v| -v))
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &Mat3, det: f64) -> Mat3 {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr_free::normal;

    mod rand_distr_free {
        use rand::Rng;
        /// Box–Muller standard normal draw.
        pub fn normal<R: Rng>(rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }

    #[test]
    fn identical_pixels_single_component() {
        let px = vec![[10u8, 20, 30]; 50];
        let m = fit_color_mixture(&px, 1).unwrap();
        assert_eq!(m.components.len(), 1);
        let g = &m.components[0];
        assert_eq!(g.mean, [10.0, 20.0, 30.0]);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { COVARIANCE_FLOOR } else { 0.0 };
                assert!((g.covariance[a][b] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_components_rejected() {
        assert!(fit_color_mixture(&[[0, 0, 0]], 0).is_err());
    }

    fn two_clusters(seed: u64) -> (Vec<[f64; 3]>, [[f64; 3]; 2]) {
        let centers = [[40.0, 60.0, 200.0], [220.0, 180.0, 30.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px = Vec::new();
        for i in 0..600 {
            let c = centers[i % 2];
            px.push([
                c[0] + 8.0 * normal(&mut rng),
                c[1] + 8.0 * normal(&mut rng),
                c[2] + 8.0 * normal(&mut rng),
            ]);
        }
        (px, centers)
    }

    #[test]
    fn separated_clusters_recovered() {
        let (px, centers) = two_clusters(1);
        let (m, _) = fit_color_mixture_traced(&px, 2, 100).unwrap();
        for c in centers {
            let best = m
                .components
                .iter()
                .map(|g| dist2(&g.mean, &c).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 5.0, "center {c:?} off by {best}");
        }
        let wsum: f64 = m.components.iter().map(|g| g.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_likelihood_non_decreasing() {
        for seed in 0..5 {
            let (px, _) = two_clusters(seed);
            let (_, trace) = fit_color_mixture_traced(&px, 5, 100).unwrap();
            assert!(trace.len() > 1);
            for w in trace.windows(2) {
                assert!(w[1] >= w[0], "{trace:?}");
            }
        }
    }

    #[test]
    fn refine_never_worse() {
        let (px, _) = two_clusters(7);
        let (m, _) = fit_color_mixture_traced(&px[..100], 3, 5).unwrap();
        let before = m.total_log_likelihood(&px);
        let (r, _) = m.refine(&px, 10);
        assert!(r.total_log_likelihood(&px) >= before);
        let (same, _) = m.refine(&[], 10);
        assert_eq!(same, m);
    }

    #[test]
    fn density_matches_closed_form() {
        let g = Gaussian::new(1.0, [0.0; 3], [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]]);
        // isotropic variance 4: -1.5 ln(2 pi 4) - |x|^2 / 8
        let x = [1.0, 2.0, 2.0];
        let want = -1.5 * (std::f64::consts::TAU * 4.0).ln() - 9.0 / 8.0;
        assert!((g.log_density(&x) - want).abs() < 1e-12);
    }
}
