//! Region-restricted image metrics: MSE, PSNR, and a combined report.

use crate::error::{Error, Result};
use crate::kvedit::PixelMask;
use crate::numerics::Tensor;

/// PSNR value reported for an exact match (mse below 1e-10).
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_images(a: &Tensor, b: &Tensor, region: Option<&PixelMask>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "metrics",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.shape().len() != 3 {
        return Err(Error::shape(
            "metrics",
            format!("want C x H x W image, got {:?}", a.shape()),
        ));
    }
    if let Some(m) = region {
        if m.height() != a.shape()[1] || m.width() != a.shape()[2] {
            return Err(Error::shape(
                "metrics",
                format!(
                    "mask {}x{} vs image {:?}",
                    m.height(),
                    m.width(),
                    a.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Mean squared difference over the included pixels (all channels).
/// `region` includes pixels where it is 1; an empty region is an error.
pub fn mse(a: &Tensor, b: &Tensor, region: Option<&PixelMask>) -> Result<f64> {
    check_images(a, b, region)?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = region {
                if m.get(y, x) == 0 {
                    continue;
                }
            }
            for ch in 0..c {
                let idx = ch * h * w + y * w + x;
                let d = a.data()[idx] - b.data()[idx];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Config(
            "mse over an empty region is undefined".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio in decibels, capped at 99 dB for exact
/// matches.
pub fn psnr(a: &Tensor, b: &Tensor, region: Option<&PixelMask>, max_value: f64) -> Result<f64> {
    let e = mse(a, b, region)?;
    Ok(psnr_from_mse(e, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse < 1e-10 {
        return PSNR_CAP_DB;
    }
    10.0 * (max_value * max_value / mse).log10()
}

/// Full/background/foreground metrics for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMetricReport {
    pub mse_full: f64,
    pub mse_bg: f64,
    pub mse_fg: f64,
    pub psnr_full: f64,
    pub psnr_bg: f64,
}

impl RegionMetricReport {
    /// `mask` marks the foreground; background metrics use its complement.
    /// Degenerate (empty) regions report an MSE of 0.
    pub fn compute(a: &Tensor, b: &Tensor, mask: &PixelMask) -> Result<RegionMetricReport> {
        let mse_full = mse(a, b, None)?;
        let bg_mask = mask.invert();
        let mse_bg = if bg_mask.count_ones() == 0 {
            0.0
        } else {
            mse(a, b, Some(&bg_mask))?
        };
        let mse_fg = if mask.count_ones() == 0 {
            0.0
        } else {
            mse(a, b, Some(mask))?
        };
        Ok(RegionMetricReport {
            mse_full,
            mse_bg,
            mse_fg,
            psnr_full: psnr_from_mse(mse_full, 1.0),
            psnr_bg: psnr_from_mse(mse_bg, 1.0),
        })
    }

    pub fn csv_header() -> &'static str {
        "mse_full,mse_bg,mse_fg,psnr_full,psnr_bg"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mse_full, self.mse_bg, self.mse_fg, self.psnr_full, self.psnr_bg
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn identical_images_zero_mse_capped_psnr() {
        let a = Rng::new(1).gaussian(vec![3, 4, 4]);
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, None, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn unit_difference_everywhere() {
        let a = Tensor::zeros(vec![3, 4, 4]);
        let b = Tensor::full(vec![3, 4, 4], 1.0);
        assert_eq!(mse(&a, &b, None).unwrap(), 1.0);
    }

    #[test]
    fn psnr_hand_values() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let a = Rng::new(2).gaussian(vec![3, 4, 4]);
        let b = Rng::new(3).gaussian(vec![3, 4, 4]);
        let got = mse(&a, &b, None).unwrap();
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn symmetric() {
        let a = Rng::new(4).gaussian(vec![3, 4, 4]);
        let b = Rng::new(5).gaussian(vec![3, 4, 4]);
        assert_eq!(mse(&a, &b, None).unwrap(), mse(&b, &a, None).unwrap());
    }

    #[test]
    fn empty_region_is_error() {
        let a = Tensor::zeros(vec![3, 4, 4]);
        let empty = PixelMask::zeros(4, 4);
        assert!(mse(&a, &a, Some(&empty)).is_err());
    }

    #[test]
    fn region_decomposition() {
        let a = Rng::new(6).gaussian(vec![3, 4, 4]);
        let b = Rng::new(7).gaussian(vec![3, 4, 4]);
        let mut mask = PixelMask::zeros(4, 4);
        for (i, y, x) in [(0, 0, 0), (1, 1, 2), (2, 3, 3), (3, 2, 1), (4, 0, 3)] {
            let _ = i;
            mask.set(y, x, 1);
        }
        let fg_n = mask.count_ones() as f64;
        let bg_n = (16 - mask.count_ones()) as f64;
        let full = mse(&a, &b, None).unwrap();
        let fg = mse(&a, &b, Some(&mask)).unwrap();
        let bg = mse(&a, &b, Some(&mask.invert())).unwrap();
        let combined = (fg * fg_n + bg * bg_n) / 16.0;
        assert!((full - combined).abs() < 1e-10);
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let mut prev = f64::INFINITY;
        for e in [1e-9, 1e-6, 1e-3, 0.1, 1.0, 10.0] {
            let p = psnr_from_mse(e, 1.0);
            assert!(p < prev || (p == PSNR_CAP_DB && prev == f64::INFINITY));
            prev = p;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(vec![3, 4, 4]);
        let b = Tensor::zeros(vec![3, 2, 2]);
        assert!(mse(&a, &b, None).is_err());
    }
}
