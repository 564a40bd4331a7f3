//! Image quality metrics, routing-path purity and embedding-geometry diagnostics.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for signals on `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(mismatch("psnr", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(invalid("psnr", "empty image"));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window of one channel.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `[H, W, C]` images with an 11-wide
/// Gaussian window (sigma 1.5), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(mismatch("ssim", a.shape(), b.shape()));
    }
    let &[h, w, c] = a.shape() else {
        return Err(invalid("ssim", alloc::format!("expected [H, W, C], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(invalid("ssim", alloc::format!("{h}x{w} image is smaller than the {SSIM_WINDOW}-pixel window")));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|m| filter_valid(m, h, w, &g));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPurity<L> {
    pub label: L,
    pub count: usize,
    pub modal_path: Vec<usize>,
    /// Fraction of this label's samples on `modal_path`.
    pub share: f64,
    /// Distinct paths and how many samples took each, most frequent first.
    pub histogram: Vec<(Vec<usize>, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityReport<L> {
    /// Mean of the per-label modal shares.
    pub purity: f64,
    pub labels: Vec<LabelPurity<L>>,
    pub distinct_modal_paths: usize,
    /// Label pairs whose modal paths coincide.
    pub path_overlap: usize,
}

/// Within-label route consistency. The modal path of a label is its most
/// frequent path; ties go to the lexicographically smallest.
pub fn routing_purity<L: Ord + Clone>(traces: &[(L, Vec<usize>)]) -> Result<PurityReport<L>> {
    let mut groups: BTreeMap<L, BTreeMap<Vec<usize>, usize>> = BTreeMap::new();
    for (label, path) in traces {
        *groups.entry(label.clone()).or_default().entry(path.clone()).or_default() += 1;
    }
    if groups.len() < 2 {
        return Err(invalid("routing_purity", alloc::format!("need at least 2 labels, got {}", groups.len())));
    }
    let mut labels = Vec::with_capacity(groups.len());
    for (label, hist) in groups {
        let count: usize = hist.values().sum();
        if count == 0 {
            return Err(invalid("routing_purity", "empty label group"));
        }
        let mut histogram: Vec<(Vec<usize>, usize)> = hist.into_iter().collect();
        // stable: equal counts keep lexicographic order
        histogram.sort_by(|a, b| b.1.cmp(&a.1));
        let (modal_path, top) = histogram[0].clone();
        labels.push(LabelPurity {
            label,
            count,
            modal_path,
            share: top as f64 / count as f64,
            histogram,
        });
    }
    let purity = labels.iter().map(|l| l.share).sum::<f64>() / labels.len() as f64;
    let mut modal: Vec<&Vec<usize>> = labels.iter().map(|l| &l.modal_path).collect();
    let mut path_overlap = 0;
    for i in 0..modal.len() {
        for j in i + 1..modal.len() {
            path_overlap += usize::from(modal[i] == modal[j]);
        }
    }
    modal.sort();
    modal.dedup();
    Ok(PurityReport {
        purity,
        distinct_modal_paths: modal.len(),
        labels,
        path_overlap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub labels: usize,
    /// Euclidean distance between class centroids, one per unordered pair `(i, j)`, `i < j`.
    pub linear_distances: Vec<f64>,
    /// Angle in radians between centroids of the unit-projected rows.
    pub angles: Vec<f64>,
    /// `max / min` of `linear_distances`.
    pub linear_ratio: f64,
    /// `max / min` of `angles`.
    pub angular_ratio: f64,
}

fn centroid(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d];
    for r in rows {
        for (ci, v) in c.iter_mut().zip(r.iter()) {
            *ci += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= rows.len() as f64);
    c
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn ratio(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Pairwise separation between class centroids in raw space and on the unit
/// sphere, with the spread of each summarised as `max / min`.
///
/// `rows` is `[M, d]`; `labels` holds one label per row and needs at least
/// three distinct values.
pub fn embedding_bias_report<L: Ord + Clone>(rows: &Tensor, labels: &[L]) -> Result<BiasReport> {
    let &[m, d] = rows.shape() else {
        return Err(invalid("embedding_bias_report", alloc::format!("expected [M, d], got {:?}", rows.shape())));
    };
    if labels.len() != m {
        return Err(invalid("embedding_bias_report", alloc::format!("{} labels for {m} rows", labels.len())));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(invalid("embedding_bias_report", alloc::format!("need at least 3 labels, got {}", groups.len())));
    }
    let raw: Vec<Vec<f64>> = groups
        .values()
        .map(|idx| centroid(&idx.iter().map(|&i| rows.row(i)).collect::<Vec<_>>(), d))
        .collect();
    let projected: Vec<Vec<f64>> = groups
        .values()
        .map(|idx| {
            let units: Vec<Vec<f64>> = idx.iter().map(|&i| unit(rows.row(i))).collect();
            unit(&centroid(&units.iter().map(|u| u.as_slice()).collect::<Vec<_>>(), d))
        })
        .collect();
    let mut linear_distances = Vec::new();
    let mut angles = Vec::new();
    for i in 0..raw.len() {
        for j in i + 1..raw.len() {
            let dist: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            linear_distances.push(libm::sqrt(dist));
            let cos: f64 = projected[i].iter().zip(&projected[j]).map(|(a, b)| a * b).sum();
            angles.push(libm::acos(cos.clamp(-1.0, 1.0)));
        }
    }
    Ok(BiasReport {
        labels: raw.len(),
        linear_ratio: ratio(&linear_distances),
        angular_ratio: ratio(&angles),
        linear_distances,
        angles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
        use proptest::prelude::*;
    use rand::Rng as _;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut se = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    se += (a.data()[i] - b.data()[i]).powi(2);
                }
            }
        }
        let mse = se / (h * w * 3) as f64;
        if mse == 0.0 {
            100.0
        } else {
            -10.0 * mse.log10()
        }
    }

    // direct per-window statistics with centred second moments
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let k = 11;
        let mut g2 = vec![vec![0.0; k]; k];
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                g2[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += g2[i][j];
            }
        }
        let px = |t: &Tensor, y: usize, x: usize, c: usize| t.data()[(y * w + x) * 3 + c];
        let mut per_channel = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut n = 0;
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wgt = g2[i][j] / s;
                            ux += wgt * px(a, y0 + i, x0 + j, c);
                            uy += wgt * px(b, y0 + i, x0 + j, c);
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wgt = g2[i][j] / s;
                            let dx = px(a, y0 + i, x0 + j, c) - ux;
                            let dy = px(b, y0 + i, x0 + j, c) - uy;
                            vx += wgt * dx * dx;
                            vy += wgt * dy * dy;
                            cov += wgt * dx * dy;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += (2.0 * ux * uy + c1) * (2.0 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            per_channel += acc / n as f64;
        }
        per_channel / 3.0
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let x = Tensor::full(&[4, 4, 3], 0.5);
        let y = Tensor::full(&[4, 4, 3], 0.6);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::full(&[4, 5, 3], 0.5)).is_err());
    }

    #[test]
    fn psnr_and_ssim_match_oracles() {
        for seed in 0..100u64 {
            let a = random_image(14, 13, seed);
            let mut b = a.clone();
            let mut rng = rng_from_seed(seed + 1000);
            let amp = rng.random_range(0.01..0.5);
            b.data_mut().iter_mut().for_each(|v| *v = (*v + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
            assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() <= 1e-10);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-6);
        }
    }

    #[test]
    fn ssim_identity_negative_and_small_inputs() {
        let a = random_image(16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        let mut board = Tensor::zeros(&[16, 16, 3]);
        for (i, v) in board.data_mut().iter_mut().enumerate() {
            let (y, x) = (i / 48, (i / 3) % 16);
            *v = ((y + x) % 2) as f64;
        }
        let mut neg = board.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&board, &neg).unwrap() < 0.2);
        let small = random_image(10, 16, 1);
        assert!(ssim(&small, &small).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(12, 12, s1);
            let b = random_image(12, 12, s2);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn purity_is_a_fraction(paths in proptest::collection::vec((0usize..3, 0usize..4), 2..60)) {
            let mut traces: Vec<(usize, Vec<usize>)> = paths.iter().map(|&(l, p)| (l, vec![p])).collect();
            traces.push((7, vec![0]));
            traces.push((8, vec![0]));
            let r = routing_purity(&traces).unwrap();
            prop_assert!(r.purity > 0.0 && r.purity <= 1.0);
            for l in &r.labels {
                prop_assert_eq!(l.histogram.iter().map(|h| h.1).sum::<usize>(), l.count);
            }
        }
    }

    #[test]
    fn purity_definitions() {
        let traces = vec![
            ("noise", vec![0, 1]),
            ("noise", vec![0, 1]),
            ("rain", vec![2, 2]),
            ("rain", vec![2, 2]),
        ];
        let r = routing_purity(&traces).unwrap();
        assert_eq!(r.purity, 1.0);
        assert_eq!((r.distinct_modal_paths, r.path_overlap), (2, 0));
        let same = vec![("a", vec![1]), ("b", vec![1]), ("b", vec![1])];
        let r = routing_purity(&same).unwrap();
        assert_eq!(r.purity, 1.0);
        assert_eq!((r.distinct_modal_paths, r.path_overlap), (1, 1));
        assert!(routing_purity(&[("a", vec![0])]).is_err());
        let split = vec![("a", vec![0]), ("a", vec![1]), ("a", vec![1]), ("b", vec![0])];
        let r = routing_purity(&split).unwrap();
        assert_eq!(r.labels[0].modal_path, vec![1]);
        assert!((r.purity - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn purity_of_uniform_random_routes_is_low() {
        let mut rng = rng_from_seed(11);
        let mut traces = Vec::new();
        for label in 0..3 {
            for _ in 0..100 {
                traces.push((label, (0..8).map(|_| rng.random_range(0..3)).collect::<Vec<_>>()));
            }
        }
        // 100 draws over 6561 cells: the modal cell almost surely holds 1 or 2
        let r = routing_purity(&traces).unwrap();
        assert!(r.purity < 0.1, "{}", r.purity);
    }

    #[test]
    fn bias_report_constructed_cases() {
        let s3 = 3f64.sqrt() / 2.0;
        let eq = Tensor::new(&[3, 2], vec![1.0, 0.0, -0.5, s3, -0.5, -s3]).unwrap();
        let r = embedding_bias_report(&eq, &[0, 1, 2]).unwrap();
        assert!((r.linear_ratio - 1.0).abs() < 1e-12);
        assert!((r.angular_ratio - 1.0).abs() < 1e-12);
        // collinear: |A-C| = 10, |A-B| = 1
        let line = Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 11.0, 0.0]).unwrap();
        let r = embedding_bias_report(&line, &["A", "B", "C"]).unwrap();
        assert_eq!(r.linear_ratio, 10.0);
        assert_eq!(r.linear_distances, vec![1.0, 10.0, 9.0]);
        // every centroid points along +x: no angular separation at all
        assert!(r.angular_ratio.is_nan() || r.angular_ratio.is_infinite());
        assert!(embedding_bias_report(&line, &[0, 0, 1]).is_err());
    }

    #[test]
    fn bias_report_uses_per_label_centroids() {
        let rows = Tensor::new(&[6, 2], vec![1.0, 0.1, 1.0, -0.1, 0.0, 2.0, 0.0, 4.0, -3.0, 0.0, -1.0, 0.0]).unwrap();
        let r = embedding_bias_report(&rows, &[0, 0, 1, 1, 2, 2]).unwrap();
        // centroids (1,0), (0,3), (-2,0)
        let d = [10f64.sqrt(), 3.0, 13f64.sqrt()];
        for (a, b) in r.linear_distances.iter().zip(d) {
            assert!((a - b).abs() < 1e-12);
        }
        let half = core::f64::consts::FRAC_PI_2;
        for (a, b) in r.angles.iter().zip([half, 2.0 * half, half]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
