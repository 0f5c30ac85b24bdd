//! Background fidelity: PSNR and SSIM restricted to unmasked pixels.

use crate::error::{KvLockError, Result};
use crate::mask::PixelMask;
use crate::scalar::Real;
use crate::video::Video;

const WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScore {
    pub ssim: f64,
    /// `+∞` for identical inputs.
    pub psnr: f64,
    /// Background pixels per channel used for PSNR.
    pub pixels: usize,
    /// SSIM windows lying fully in the background.
    pub windows: usize,
}

fn check<T: Real>(a: &Video<T>, b: &Video<T>, mask: &PixelMask) -> Result<()> {
    if a.dims() != b.dims() || a.dims() != mask.dims() {
        return Err(KvLockError::Shape(format!(
            "videos {:?} / {:?} and mask {:?} differ in shape",
            a.dims(),
            b.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over background pixels of all channels and frames.
pub fn background_psnr<T: Real>(a: &Video<T>, b: &Video<T>, mask: &PixelMask) -> Result<f64> {
    check(a, b, mask)?;
    let (f, h, w) = a.dims();
    let (va, vb, m) = (a.array(), b.array(), mask.array());
    let mut sse = 0.0;
    let mut n = 0usize;
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                if m[[fr, y, x]] != 0 {
                    continue;
                }
                n += 1;
                for c in 0..3 {
                    sse += (va[[c, fr, y, x]] - vb[[c, fr, y, x]]).as_f64().powi(2);
                }
            }
        }
    }
    if n == 0 {
        return Err(KvLockError::UndefinedRegion("mask leaves no background pixels".into()));
    }
    let mse = sse / (3 * n) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Mean SSIM over every 8×8 window (stride 1, per channel and frame) that
/// contains no foreground pixel.
pub fn background_ssim<T: Real>(a: &Video<T>, b: &Video<T>, mask: &PixelMask) -> Result<(f64, usize)> {
    check(a, b, mask)?;
    let (f, h, w) = a.dims();
    if h < WINDOW || w < WINDOW {
        return Err(KvLockError::UndefinedRegion(format!("frames smaller than {WINDOW}x{WINDOW}")));
    }
    let (va, vb, m) = (a.array(), b.array(), mask.array());
    let n = (WINDOW * WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for fr in 0..f {
        // Foreground count per window via a 2-D prefix sum.
        let mut pre = vec![0usize; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                pre[(y + 1) * (w + 1) + x + 1] = (m[[fr, y, x]] != 0) as usize + pre[y * (w + 1) + x + 1]
                    + pre[(y + 1) * (w + 1) + x]
                    - pre[y * (w + 1) + x];
            }
        }
        for y0 in 0..=h - WINDOW {
            for x0 in 0..=w - WINDOW {
                let (y1, x1) = (y0 + WINDOW, x0 + WINDOW);
                let fg = pre[y1 * (w + 1) + x1] + pre[y0 * (w + 1) + x0]
                    - pre[y0 * (w + 1) + x1]
                    - pre[y1 * (w + 1) + x0];
                if fg != 0 {
                    continue;
                }
                for c in 0..3 {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let p = va[[c, fr, y, x]].as_f64();
                            let q = vb[[c, fr, y, x]].as_f64();
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let var_a = (saa / n - ma * ma).max(0.0);
                    let var_b = (sbb / n - mb * mb).max(0.0);
                    let cov = sab / n - ma * mb;
                    total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
                    windows += 1;
                }
            }
        }
    }
    if windows == 0 {
        return Err(KvLockError::UndefinedRegion(
            "no 8x8 window lies fully in the background".into(),
        ));
    }
    Ok((total / windows as f64, windows))
}

pub fn background_scores<T: Real>(a: &Video<T>, b: &Video<T>, mask: &PixelMask) -> Result<RegionScore> {
    let psnr = background_psnr(a, b, mask)?;
    let (ssim, windows) = background_ssim(a, b, mask)?;
    let pixels = mask.array().iter().filter(|&&v| v == 0).count();
    Ok(RegionScore {
        ssim,
        psnr,
        pixels,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};
    use approx::assert_relative_eq;
    use ndarray::Array4;

    fn random_video(seed: u64, f: usize, h: usize, w: usize) -> Video<f64> {
        let mut rng = stream(seed, "video");
        Video::new(Array4::from_shape_simple_fn((3, f, h, w), || {
            0.5 + 0.2 * normal::<f64, _>(&mut rng)
        }))
        .unwrap()
    }

    fn corner_mask(f: usize, h: usize, w: usize) -> PixelMask {
        let mut m = PixelMask::zeros(f, h, w);
        for fr in 0..f {
            for y in 0..6 {
                for x in 0..6 {
                    m.set(fr, y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn identical_inputs() {
        let a = random_video(1, 2, 16, 16);
        let m = corner_mask(2, 16, 16);
        let s = background_scores(&a, &a, &m).unwrap();
        assert_eq!(s.psnr, f64::INFINITY);
        assert_relative_eq!(s.ssim, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = random_video(2, 2, 16, 16);
        let mut b = a.clone();
        b.array_mut().mapv_inplace(|v| v + 0.1);
        let p = background_psnr(&a, &b, &corner_mask(2, 16, 16)).unwrap();
        assert_relative_eq!(p, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn foreground_edits_are_ignored() {
        let a = random_video(3, 2, 16, 16);
        let m = corner_mask(2, 16, 16);
        let mut b = random_video(4, 2, 16, 16);
        let base = background_scores(&a, &b, &m).unwrap();
        for fr in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    for c in 0..3 {
                        b.array_mut()[[c, fr, y, x]] = 9.0;
                    }
                }
            }
        }
        assert_eq!(background_scores(&a, &b, &m).unwrap(), base);
        assert_eq!(background_scores(&b, &a, &m).unwrap().ssim, base.ssim);
    }

    #[test]
    fn anticorrelated_patch() {
        let mut rng = stream(5, "patch");
        let a = Video::new(Array4::from_shape_simple_fn((3, 1, 8, 8), || normal::<f64, _>(&mut rng))).unwrap();
        let mut a = a;
        // Zero-mean per channel.
        for c in 0..3 {
            let mean = a.array().index_axis(ndarray::Axis(0), c).mean().unwrap();
            a.array_mut().index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v - mean);
        }
        let mut b = a.clone();
        b.array_mut().mapv_inplace(|v| -v);
        let (s, n) = background_ssim(&a, &b, &PixelMask::zeros(1, 8, 8)).unwrap();
        assert_eq!(n, 3);
        assert!(s < -0.99, "{s}");
    }

    #[test]
    fn straddling_windows_excluded() {
        let m = corner_mask(1, 16, 16);
        let a = random_video(6, 1, 16, 16);
        let (_, n) = background_ssim(&a, &a, &m).unwrap();
        // 81 window positions; those overlapping the 6×6 corner are dropped.
        let kept = (0..=8).flat_map(|y| (0..=8).map(move |x| (y, x))).filter(|&(y, x)| y >= 6 || x >= 6).count();
        assert_eq!(n, 3 * kept);
    }

    #[test]
    fn all_foreground_is_undefined() {
        let a = random_video(7, 1, 8, 8);
        let m = PixelMask::ones(1, 8, 8);
        assert!(matches!(background_psnr(&a, &a, &m), Err(KvLockError::UndefinedRegion(_))));
        assert!(matches!(background_ssim(&a, &a, &m), Err(KvLockError::UndefinedRegion(_))));
    }
}
