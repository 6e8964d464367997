//! Metrics and evaluation protocols.
//!
//! PSNR is computed channel-jointly (one MSE over all channels) with peak
//! 1.0 and capped at 100 dB; SSIM uses the standard 11x11 Gaussian window
//! (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1.0) over valid positions
//! only and is averaged across channels. Aggregation is done in f64.
//!
//! Two protocol probes mirror the training claims:
//! - the stability curve: mean PSNR after each of `repeats` re-deblur passes;
//! - the residual table: per (pass, iteration) PSNR plus the mean absolute
//!   residual (`every`) and mean absolute cumulative residual (`sum`), both
//!   on the [0,255] scale and computed on raw, unclipped residuals.

use crate::data::{denormalize_clipped, normalize, BlurPair};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::tensor::{Scalar, Tensor};
use std::io::Write;
use std::path::Path;

/// Peak signal-to-noise ratio in dB for images in `[0,1]`; identical images
/// return the 100 dB cap.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.into_f64() - y.into_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let mid = (len as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let wo = w - k + 1;
    let ho = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &wi) in win.iter().enumerate() {
                acc += wi * plane[y * w + x + i];
            }
            tmp[y * wo + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &wi) in win.iter().enumerate() {
                acc += wi * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM over valid 11x11 windows, averaged across channels.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let [bn, cn, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane_len = h * w;
    let mut total = 0.0;
    let mut planes = 0usize;
    for bi in 0..bn {
        for ci in 0..cn {
            let off = (bi * cn + ci) * plane_len;
            let xa: Vec<f64> = a.data()[off..off + plane_len]
                .iter()
                .map(|v| v.into_f64())
                .collect();
            let xb: Vec<f64> = b.data()[off..off + plane_len]
                .iter()
                .map(|v| v.into_f64())
                .collect();
            let xx: Vec<f64> = xa.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = xb.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
            let mu_x = filter_valid(&xa, h, w, &win);
            let mu_y = filter_valid(&xb, h, w, &win);
            let e_xx = filter_valid(&xx, h, w, &win);
            let e_yy = filter_valid(&yy, h, w, &win);
            let e_xy = filter_valid(&xy, h, w, &win);
            let mut acc = 0.0;
            for i in 0..mu_x.len() {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let vx = e_xx[i] - mx * mx;
                let vy = e_yy[i] - my * my;
                let cov = e_xy[i] - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            total += acc / mu_x.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

/// Mean PSNR after pass k (k = 1..=repeats) of repeatedly re-deblurring the
/// test set; the probe for re-deblurring stability.
pub fn stability_probe(
    params: &ModelParams<f32>,
    testset: &[BlurPair],
    repeats: usize,
    n: usize,
) -> Result<Vec<f64>> {
    if repeats < 1 {
        return Err(Error::Config("stability probe needs repeats >= 1".into()));
    }
    if testset.is_empty() {
        return Err(Error::Config("stability probe needs a non-empty test set".into()));
    }
    let mut curve = vec![0.0f64; repeats];
    for pair in testset {
        let mut current = normalize(&pair.blurry);
        for k in 0..repeats {
            let trace = params.progressive_deblur(&current, n)?;
            current = trace.final_image().clone();
            curve[k] += psnr(&denormalize_clipped(&current), &pair.sharp)?;
        }
    }
    for v in &mut curve {
        *v /= testset.len() as f64;
    }
    Ok(curve)
}

/// Per-(pass, iteration) statistics of the iterative residual scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRow {
    /// Deblurring pass, 1-based.
    pub pass: usize,
    /// Iteration within the pass, 1-based.
    pub iter: usize,
    /// Mean PSNR of the intermediate image against the sharp target.
    pub psnr: f64,
    /// Mean |residual_i| on the [0,255] scale (pre-clipping).
    pub every: f64,
    /// Mean |sum of residuals up to i| on the [0,255] scale (pre-clipping).
    pub sum: f64,
}

/// Table of `deblur_times x n` rows averaged over the test set.
pub fn residual_stats(
    params: &ModelParams<f32>,
    testset: &[BlurPair],
    deblur_times: usize,
    n: usize,
) -> Result<Vec<ResidualRow>> {
    if deblur_times < 1 {
        return Err(Error::Config("residual stats need deblur_times >= 1".into()));
    }
    if testset.is_empty() {
        return Err(Error::Config("residual stats need a non-empty test set".into()));
    }
    let mut rows: Vec<ResidualRow> = (0..deblur_times)
        .flat_map(|p| {
            (0..n).map(move |i| ResidualRow {
                pass: p + 1,
                iter: i + 1,
                psnr: 0.0,
                every: 0.0,
                sum: 0.0,
            })
        })
        .collect();
    for pair in testset {
        let mut current = normalize(&pair.blurry);
        for p in 0..deblur_times {
            let trace = params.progressive_deblur(&current, n)?;
            let mut running = Tensor::zeros(current.shape());
            for i in 0..n {
                running.add_assign(&trace.residuals[i]);
                let row = &mut rows[p * n + i];
                row.psnr += psnr(&denormalize_clipped(&trace.per_iter[i]), &pair.sharp)?;
                row.every += mean_abs_255(&trace.residuals[i]);
                row.sum += mean_abs_255(&running);
            }
            current = trace.final_image().clone();
        }
    }
    let count = testset.len() as f64;
    for row in &mut rows {
        row.psnr /= count;
        row.every /= count;
        row.sum /= count;
    }
    Ok(rows)
}

fn mean_abs_255(t: &Tensor<f32>) -> f64 {
    let s: f64 = t.data().iter().map(|v| (*v as f64).abs()).sum();
    255.0 * s / t.len() as f64
}

#[derive(Clone, Copy, Debug)]
pub struct PerImage {
    pub psnr: f64,
    pub ssim: f64,
}

/// Everything the evaluation harness reports for one checkpoint.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_image: Vec<PerImage>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub stability_curve: Vec<f64>,
    pub residual_table: Vec<ResidualRow>,
}

/// Single-pass metrics, the stability curve over `repeats`, and the
/// residual table over `deblur_times` passes.
pub fn evaluate(
    params: &ModelParams<f32>,
    testset: &[BlurPair],
    repeats: usize,
    deblur_times: usize,
    n: usize,
) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(Error::Config("evaluate needs a non-empty test set".into()));
    }
    let mut per_image = Vec::with_capacity(testset.len());
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for pair in testset {
        let trace = params.progressive_deblur(&normalize(&pair.blurry), n)?;
        let restored = denormalize_clipped(trace.final_image());
        let p = psnr(&restored, &pair.sharp)?;
        let s = ssim(&restored, &pair.sharp)?;
        per_image.push(PerImage { psnr: p, ssim: s });
        sum_psnr += p;
        sum_ssim += s;
    }
    Ok(EvalReport {
        mean_psnr: sum_psnr / testset.len() as f64,
        mean_ssim: sum_ssim / testset.len() as f64,
        per_image,
        stability_curve: stability_probe(params, testset, repeats, n)?,
        residual_table: residual_stats(params, testset, deblur_times, n)?,
    })
}

impl EvalReport {
    /// Write `summary.csv`, `per_image.csv`, `stability.csv` (plot-ready
    /// `k,psnr` series) and `residuals.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(content.as_bytes()).map_err(|e| Error::io(&path, e))
        };

        let mut s = String::from("mean_psnr_db,mean_ssim,images,repeats\n");
        s.push_str(&format!(
            "{:.6},{:.6},{},{}\n",
            self.mean_psnr,
            self.mean_ssim,
            self.per_image.len(),
            self.stability_curve.len()
        ));
        write("summary.csv", s)?;

        let mut s = String::from("index,psnr_db,ssim\n");
        for (i, m) in self.per_image.iter().enumerate() {
            s.push_str(&format!("{},{:.6},{:.6}\n", i, m.psnr, m.ssim));
        }
        write("per_image.csv", s)?;

        let mut s = String::from("k,psnr\n");
        for (k, v) in self.stability_curve.iter().enumerate() {
            s.push_str(&format!("{},{:.6}\n", k + 1, v));
        }
        write("stability.csv", s)?;

        let mut s = String::from("pass,iteration,psnr_db,every,sum\n");
        for r in &self.residual_table {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.pass, r.iter, r.psnr, r.every, r.sum
            ));
        }
        write("residuals.csv", s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_hits_cap() {
        let x = Tensor::<f32>::full([1, 3, 8, 8], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn psnr_constant_images_closed_form() {
        let a = Tensor::<f64>::full([2, 3, 4, 4], 0.0);
        let b = Tensor::<f64>::full([2, 3, 4, 4], 0.5);
        // MSE = 0.25 -> 10 log10(1/0.25) = 6.0206
        let got = psnr(&a, &b).unwrap();
        assert!((got - 6.020599913279624).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let b = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let x = Tensor::<f64>::from_fn([1, 3, 16, 16], |_, c, y, xx| {
            0.2 + 0.1 * ((c + 1) as f64 * 0.3 * y as f64).sin() + 0.01 * xx as f64
        });
        let s = ssim(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = Tensor::<f64>::zeros([1, 1, 8, 8]);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn ssim_constant_offset_reduces_to_luminance_term() {
        // constant images: variances and covariance vanish, so
        // ssim = (2 mu_x mu_y + c1) / (mu_x^2 + mu_y^2 + c1)
        let a = Tensor::<f64>::full([1, 1, 16, 16], 0.4);
        let b = Tensor::<f64>::full([1, 1, 16, 16], 0.5);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * 0.4 * 0.5 + c1) / (0.4f64.powi(2) + 0.5f64.powi(2) + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
