//! Evaluation metrics (PSNR, single-scale SSIM), the per-frame metric CSV,
//! and per-weather summaries.
//!
//! Both metrics accumulate in `f64` regardless of the model scalar. SSIM
//! uses the standard 11x11 gaussian window (sigma 1.5, K1 0.01, K2 0.03)
//! over valid window positions, per channel, channels averaged.

use crate::data::WeatherLabel;
use crate::data::FramePair;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array2;
use std::fmt::Write as _;
use std::path::Path;

/// 10 * log10(1 / MSE) against a unit peak; identical frames report +inf.
pub fn psnr<T: Scalar>(pair: &FramePair<T>) -> f64 {
    let mut acc = 0.0f64;
    for (&p, &g) in pair.prediction.iter().zip(pair.ground_truth.iter()) {
        let d = p.to_f64_() - g.to_f64_();
        acc += d * d;
    }
    let mse = acc / pair.prediction.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Valid-window separable gaussian filter: `(H, W)` -> `(H-10, W-10)`.
fn filter_valid(img: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &tk) in taps.iter().enumerate() {
                acc += tk * img[[y, x + k]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &tk) in taps.iter().enumerate() {
                acc += tk * tmp[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean structural similarity over valid window positions and channels.
pub fn ssim<T: Scalar>(pair: &FramePair<T>) -> Result<f64> {
    let (h, w, c) = pair.prediction.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} frame smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut per_channel = 0.0;
    for ch in 0..c {
        let x = pair
            .prediction
            .slice(ndarray::s![.., .., ch])
            .mapv(|v| v.to_f64_());
        let y = pair
            .ground_truth
            .slice(ndarray::s![.., .., ch])
            .mapv(|v| v.to_f64_());
        let xx = &x * &x;
        let yy = &y * &y;
        let xy = &x * &y;
        let mu_x = filter_valid(&x, &taps);
        let mu_y = filter_valid(&y, &taps);
        let e_xx = filter_valid(&xx, &taps);
        let e_yy = filter_valid(&yy, &taps);
        let e_xy = filter_valid(&xy, &taps);
        let mut acc = 0.0;
        let (ho, wo) = mu_x.dim();
        for yy_ in 0..ho {
            for xx_ in 0..wo {
                let mx = mu_x[[yy_, xx_]];
                let my = mu_y[[yy_, xx_]];
                let vx = e_xx[[yy_, xx_]] - mx * mx;
                let vy = e_yy[[yy_, xx_]] - my * my;
                let cv = e_xy[[yy_, xx_]] - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cv + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
            }
        }
        per_channel += acc / (ho * wo) as f64;
    }
    Ok(per_channel / c as f64)
}

/// One evaluated frame; `padded` marks sliding-window positions whose
/// temporal context needed replicate padding at a clip edge.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub video_id: String,
    pub frame_idx: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub weather: WeatherLabel,
    pub padded: bool,
}

pub const CSV_HEADER: &str = "video_id,frame_idx,psnr,ssim,weather,padded";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.video_id,
            self.frame_idx,
            self.psnr,
            self.ssim,
            self.weather.as_str(),
            self.padded
        )
    }
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean metrics for one weather class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherMeans {
    pub weather: WeatherLabel,
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
}

/// Per-weather means plus their unweighted average, the headline number.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub per_weather: Vec<WeatherMeans>,
    pub average_psnr: f64,
    pub average_ssim: f64,
}

/// Average = mean of the per-weather means, not of all frames, so weather
/// classes with more frames do not dominate.
pub fn summarize(rows: &[MetricRow]) -> Result<MetricSummary> {
    if rows.is_empty() {
        return Err(Error::Data("no metric rows to summarize".into()));
    }
    let mut per_weather = Vec::new();
    for w in WeatherLabel::ALL {
        let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.weather == w).collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        per_weather.push(WeatherMeans {
            weather: w,
            psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
            frames: sel.len(),
        });
    }
    let k = per_weather.len() as f64;
    Ok(MetricSummary {
        average_psnr: per_weather.iter().map(|m| m.psnr).sum::<f64>() / k,
        average_ssim: per_weather.iter().map(|m| m.ssim).sum::<f64>() / k,
        per_weather,
    })
}
