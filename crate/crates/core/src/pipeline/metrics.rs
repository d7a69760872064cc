//! Image and point-cloud metrics.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::pointcloud::PointCloud;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_TAU: f64 = 0.01;

/// `10·log10(1/MSE)` over rgb entries of the (masked) pixels; `+∞` for MSE 0.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::ShapeMismatch(format!(
            "psnr of {}×{} against {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.pixel_count() {
            return Err(Error::ShapeMismatch("psnr mask size".into()));
        }
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for (p, (x, y)) in a.rgb.chunks_exact(3).zip(b.rgb.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            se += (x[c] - y[c]).powi(2);
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = se / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM on luma, averaged over all fully-inside windows.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::ShapeMismatch("ssim of differently sized images".into()));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::TooSmall {
            width: a.width,
            height: a.height,
        });
    }
    let (la, lb) = (a.luma(), b.luma());
    let g = gaussian_window();
    let w = a.width;
    let (ox, oy) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y0 in 0..oy {
        for x0 in 0..ox {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let k = gy * gx;
                    let i = (y0 + dy) * w + x0 + dx;
                    let (u, v) = (la[i], lb[i]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (ox * oy) as f64)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-neighbour distances from each point of `from` into `to`, using an
/// x-sorted sweep that prunes candidates farther than the current best in x.
pub fn nearest_distances(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    let mut sorted: Vec<[f64; 3]> = to.points().to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    from.points()
        .iter()
        .map(|p| {
            let start = sorted.partition_point(|q| q[0] < p[0]);
            let mut best = f64::INFINITY;
            for q in &sorted[start..] {
                if q[0] - p[0] > best {
                    break;
                }
                best = best.min(dist(p, q));
            }
            for q in sorted[..start].iter().rev() {
                if p[0] - q[0] > best {
                    break;
                }
                best = best.min(dist(p, q));
            }
            best
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric sum of mean nearest-neighbour distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a)))
}

/// Harmonic mean of precision (`a` near `gt`) and recall (`gt` near `a`).
pub fn fscore(a: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    if a.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let within = |d: Vec<f64>| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let p = within(nearest_distances(a, gt));
    let r = within(nearest_distances(gt, a));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Maps both clouds by the similarity that centers the ground-truth bounding
/// box and scales its longest edge to 1.
pub fn bbox_normalize(pred: &PointCloud, gt: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    let (lo, hi) = gt.bounds().ok_or(Error::EmptyCloud)?;
    let edge = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let s = if edge > 0.0 { 1.0 / edge } else { 1.0 };
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let f = |p: [f64; 3]| [(p[0] - c[0]) * s, (p[1] - c[1]) * s, (p[2] - c[2]) * s];
    Ok((pred.map(f), gt.map(f)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(v: f64) -> ImageBuffer {
        ImageBuffer::filled(16, 16, [v; 3])
    }

    #[test]
    fn psnr_examples() {
        let a = constant(0.0);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let b = constant(0.1);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        let c = constant(0.5);
        assert!((psnr(&a, &c, None).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(matches!(
            psnr(&a, &ImageBuffer::new(8, 8), None),
            Err(Error::ShapeMismatch(_))
        ));
        let mut m = vec![false; 256];
        m[3] = true;
        let mut d = a.clone();
        d.rgb[0] = 1.0;
        assert_eq!(psnr(&a, &d, Some(&m)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_examples() {
        let mut img = ImageBuffer::new(16, 16);
        for (i, v) in img.rgb.iter_mut().enumerate() {
            *v = ((i / 3) as f64 * 0.37).sin() * 0.3 + 0.5;
        }
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = img.clone();
        for v in &mut neg.rgb {
            *v = 1.0 - *v;
        }
        assert!(ssim(&img, &neg).unwrap() < 0.0);
        let (m1, m2) = (0.5, 0.6);
        let expect = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        let got = ssim(&constant(0.5), &constant(0.6)).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 0.9836).abs() < 1e-4);
        assert!(matches!(
            ssim(&ImageBuffer::new(10, 10), &ImageBuffer::new(10, 10)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn chamfer_and_fscore_examples() {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let b = PointCloud::new(vec![[0.3, 0.4, 0.0]]);
        assert!((chamfer(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &PointCloud::default()), Err(Error::EmptyCloud)));

        let gt = PointCloud::new((0..99).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect());
        assert_eq!(fscore(&gt, &gt, 0.01).unwrap(), 1.0);
        let shifted = gt.map(|p| [p[0], p[1] + 0.1, p[2]]);
        assert_eq!(fscore(&shifted, &gt, 0.01).unwrap(), 0.0);
        let mut pts = gt.points().to_vec();
        pts.push([100.0, 100.0, 100.0]);
        let f = fscore(&PointCloud::new(pts), &gt, 0.01).unwrap();
        assert!((f - 2.0 * 0.99 / 1.99).abs() < 1e-12);
    }

    #[test]
    fn bbox_normalization_scales_longest_edge() {
        let gt = PointCloud::new(vec![[0.0, 0.0, 0.0], [4.0, 2.0, 1.0]]);
        let (p, g) = bbox_normalize(&gt, &gt).unwrap();
        let (lo, hi) = g.bounds().unwrap();
        assert_eq!(hi[0] - lo[0], 1.0);
        assert_eq!(lo[0], -0.5);
        assert_eq!(p, g);
    }

    fn brute_nearest(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn accelerated_nearest_matches_brute_force(
            a in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..64),
            b in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..64),
        ) {
            let got = nearest_distances(&PointCloud::new(a.clone()), &PointCloud::new(b.clone()));
            prop_assert_eq!(got, brute_nearest(&a, &b));
        }
    }
}
