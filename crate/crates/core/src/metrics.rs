//! Image quality metrics (PSNR, SSIM), coverage and pixel ROC-AUC.

use std::fmt::Write as _;

use autodiff::Tensor;

use crate::error::{Error, Result};
use crate::masking::Mask;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Mismatch(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log10(peak² / MSE)` over every element; `+inf` for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    same_shape(x, y)?;
    let se: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(se / x.len() as f64, peak))
}

/// PSNR restricted to hole pixels (all channels); `+inf` when the mask is empty.
pub fn masked_psnr(x: &Tensor, y: &Tensor, mask: &Mask, peak: f64) -> Result<f64> {
    same_shape(x, y)?;
    let m = autodiff::expand_mask(mask.tensor(), x.shape())?;
    let (mut se, mut count) = (0.0, 0usize);
    for ((a, b), h) in x.data().iter().zip(y.data()).zip(m.data()) {
        if *h != 0.0 {
            se += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(psnr_from_mse(se / count as f64, peak))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Symmetric reflection that repeats the edge sample (`d c b a | a b c d`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Separable Gaussian blur of one `h×w` plane with reflected borders.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// SSIM of one image pair (`[1,C,H,W]` or `[C,H,W]`, values in `[0,1]`): the
/// mean of the local SSIM map, averaged over channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = match *x.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Mismatch(format!(
                "ssim expects one image, got shape {:?}",
                x.shape()
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Mismatch(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xp = &x.data()[ch * plane..(ch + 1) * plane];
        let yp = &y.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
            xp.iter().zip(yp).map(|(&a, &b)| f(a, b)).collect()
        };
        let mx = blur(xp, h, w, &taps);
        let my = blur(yp, h, w, &taps);
        let mxx = blur(&prod(|a, _| a * a), h, w, &taps);
        let myy = blur(&prod(|_, b| b * b), h, w, &taps);
        let mxy = blur(&prod(|a, b| a * b), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..plane {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / plane as f64;
    }
    Ok(total / c as f64)
}

/// Observed fraction of the image: zeros over total.
pub fn coverage(mask: &Mask) -> f64 {
    let t = mask.tensor();
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.len() as f64
}

/// Area under the ROC curve of `scores` for the positive class, via the
/// Mann-Whitney rank statistic with averaged ranks for ties.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Mismatch("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Mismatch("roc auc needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Mismatch("roc auc scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub image_id: String,
    pub method: String,
    pub coverage: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub checkpoint: String,
}

pub const CSV_HEADER: &str = "image_id,method,coverage,psnr_db,ssim";

/// Shortest round-trip decimal, with `inf` for infinities.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_value(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse()
            .map_err(|_| Error::Config(format!("not a number: `{t}`"))),
    }
}

pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.image_id,
            r.method,
            format_value(r.coverage),
            format_value(r.psnr_db),
            format_value(r.ssim)
        );
    }
    out
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 || !mean.is_finite() {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, std, count: n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub psnr_db: Summary,
    pub ssim: Summary,
}

pub fn aggregate(records: &[MetricsRecord]) -> Aggregate {
    let psnr: Vec<f64> = records.iter().map(|r| r.psnr_db).collect();
    let ssim: Vec<f64> = records.iter().map(|r| r.ssim).collect();
    Aggregate {
        psnr_db: Summary::of(&psnr),
        ssim: Summary::of(&ssim),
    }
}
