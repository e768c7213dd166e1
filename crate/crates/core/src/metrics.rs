//! Image and depth quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, RgbImage, ScalarMap};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// SSIM window parameters (dynamic range 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape { op: "image metric", lhs: vec![a.height, a.width], rhs: vec![b.height, b.width] });
    }
    if a.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum();
    Ok(sum / (3 * a.data.len()) as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio for intensities in [0, 1].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR of predicting every pixel with the per-channel mean of `gt`: the
/// MSE is the mean per-channel variance.
pub fn constant_mean_psnr(gt: &RgbImage) -> f64 {
    let n = gt.data.len() as f64;
    let mut var = 0.0;
    for c in 0..3 {
        let mean = gt.data.iter().map(|p| p[c]).sum::<f64>() / n;
        var += gt.data.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n;
    }
    psnr_from_mse(var / 3.0)
}

/// Separable Gaussian filter over the positions where the window fits.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64], p: &SsimParams) -> f64 {
    let (c1, c2) = ((p.k1).powi(2), (p.k2).powi(2));
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (ma, _, _) = filter_valid(a, w, h, k);
    let (mb, _, _) = filter_valid(b, w, h, k);
    let (aa, _, _) = filter_valid(&prod(a, a), w, h, k);
    let (bb, _, _) = filter_valid(&prod(b, b), w, h, k);
    let (ab, _, _) = filter_valid(&prod(a, b), w, h, k);
    let n = ma.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = aa[i] - mu_a * mu_a;
        let vb = bb[i] - mu_b * mu_b;
        let cov = ab[i] - mu_a * mu_b;
        sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
    sum / n as f64
}

/// Mean SSIM over the three channels, Gaussian window, valid positions
/// only.
pub fn ssim_with(a: &RgbImage, b: &RgbImage, p: &SsimParams) -> Result<f64> {
    check_same(a, b)?;
    if a.width < p.window || a.height < p.window {
        return Err(Error::InvalidInput(format!("SSIM window {} exceeds image {}x{}", p.window, a.width, a.height)));
    }
    let k = window_kernel(p);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|q| q[c]).collect();
        let y: Vec<f64> = b.data.iter().map(|q| q[c]).collect();
        total += ssim_channel(&x, &y, a.width, a.height, &k, p);
    }
    Ok(total / 3.0)
}

fn window_kernel(p: &SsimParams) -> Vec<f64> {
    let full = gaussian_kernel(p.sigma);
    let r = full.len() / 2;
    let half = p.window / 2;
    let k: Vec<f64> = if r >= half {
        full[r - half..=r + half].to_vec()
    } else {
        let s2 = 2.0 * p.sigma * p.sigma;
        (0..p.window).map(|i| (-((i as f64 - half as f64).powi(2)) / s2).exp()).collect()
    };
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Depth errors over pixels with `mask > 0.5` and positive ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub abs: f64,
    pub are: f64,
    pub rmse: f64,
    pub pixels: usize,
}

pub fn depth_errors(pred: &ScalarMap, gt: &ScalarMap, mask: &ScalarMap) -> Result<DepthErrors> {
    if pred.width != gt.width || pred.height != gt.height || mask.width != gt.width || mask.height != gt.height {
        return Err(Error::Shape { op: "depth_errors", lhs: vec![pred.height, pred.width], rhs: vec![gt.height, gt.width] });
    }
    let mut e = DepthErrors::default();
    let mut sq = 0.0;
    for i in 0..gt.data.len() {
        let g = gt.data[i];
        if mask.data[i] <= 0.5 || !(g > 0.0) {
            continue;
        }
        let d = (pred.data[i] - g).abs();
        e.abs += d;
        e.are += d / g;
        sq += d * d;
        e.pixels += 1;
    }
    if e.pixels == 0 {
        return Err(Error::InvalidInput("no valid depth pixels".into()));
    }
    let n = e.pixels as f64;
    e.abs /= n;
    e.are /= n;
    e.rmse = (sq / n).sqrt();
    Ok(e)
}

/// Metrics of one evaluated view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub abs: f64,
    pub are: f64,
    pub rmse: f64,
    /// PSNR of the constant-mean-color predictor on the same view.
    pub baseline_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
}

impl MetricsReport {
    /// Mean over views of every column.
    pub fn mean(&self) -> ViewMetrics {
        let n = self.views.len().max(1) as f64;
        let avg = |f: fn(&ViewMetrics) -> f64| self.views.iter().map(f).sum::<f64>() / n;
        ViewMetrics {
            view: usize::MAX,
            psnr: avg(|v| v.psnr),
            ssim: avg(|v| v.ssim),
            abs: avg(|v| v.abs),
            are: avg(|v| v.are),
            rmse: avg(|v| v.rmse),
            baseline_psnr: avg(|v| v.baseline_psnr),
        }
    }

    pub const CSV_HEADER: &'static str = "view,psnr,ssim,abs,are,rmse,baseline_psnr";

    /// One row per view plus a `mean` row. Floats use shortest round-trip
    /// formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let row =
            |label: String, m: &ViewMetrics| format!("{label},{},{},{},{},{},{}\n", m.psnr, m.ssim, m.abs, m.are, m.rmse, m.baseline_psnr);
        for v in &self.views {
            s.push_str(&row(v.view.to_string(), v));
        }
        s.push_str(&row("mean".into(), &self.mean()));
        s
    }

    /// Parses [`MetricsReport::to_csv`] output (the `mean` row is dropped).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format { kind: "metrics CSV", msg: "unexpected header".into() });
        }
        let bad = |msg: String| Error::Format { kind: "metrics CSV", msg };
        let mut views = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields: {line}")));
            }
            if f[0] == "mean" {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
            views.push(ViewMetrics {
                view: f[0].parse().map_err(|e| bad(format!("{}: {e}", f[0])))?,
                psnr: num(f[1])?,
                ssim: num(f[2])?,
                abs: num(f[3])?,
                are: num(f[4])?,
                rmse: num(f[5])?,
                baseline_psnr: num(f[6])?,
            });
        }
        Ok(Self { views })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(24, 16, [0.0; 3]);
        for p in &mut img.data {
            *p = [rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8)];
        }
        img
    }

    #[test]
    fn identical_images() {
        let a = random_image(1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_shift_gives_twenty_db() {
        let a = random_image(2);
        let mut b = a.clone();
        for p in &mut b.data {
            for c in p.iter_mut() {
                *c += 0.1;
            }
        }
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let (a, b) = (random_image(3), random_image(4));
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&x));
    }

    #[test]
    fn window_is_normalized_with_requested_width() {
        let k = window_kernel(&SsimParams::default());
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn depth_errors_on_masked_pixels() {
        let gt = ScalarMap { width: 3, height: 1, data: vec![1.0, 2.0, 4.0] };
        let pred = ScalarMap { width: 3, height: 1, data: vec![1.5, 2.0, 100.0] };
        let mask = ScalarMap { width: 3, height: 1, data: vec![1.0, 1.0, 0.0] };
        let e = depth_errors(&pred, &gt, &mask).unwrap();
        assert_eq!(e.pixels, 2);
        assert!((e.abs - 0.25).abs() < 1e-15);
        assert!((e.are - 0.25).abs() < 1e-15);
        assert!((e.rmse - 0.125f64.sqrt()).abs() < 1e-15);
        assert_eq!(depth_errors(&gt, &gt, &mask).unwrap().abs, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let r = MetricsReport {
            views: vec![ViewMetrics { view: 3, psnr: 21.123456789, ssim: 0.7, abs: 0.01, are: 0.005, rmse: 0.02, baseline_psnr: 12.5 }],
        };
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
    }
}
