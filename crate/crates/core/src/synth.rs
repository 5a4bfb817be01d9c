//! Procedural paired clean/degraded weather videos.
//!
//! Each video draws one [`WeatherSpec`]; particles (snow flakes, rain
//! streaks) are sampled once per video and advected frame-to-frame by their
//! velocity, wrapping at frame borders, so degradations are temporally
//! consistent. All synthesis runs in `f64` and is a pure function of
//! `(clean, spec)`.

use crate::data::{
    frame_filename, save_frame, DatasetManifest, ManifestEntry, Split, WeatherLabel,
};
use crate::error::{Error, Result};
use crate::scalar::norm_cdf;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Degradation distribution for one synthetic video.
///
/// `density` is particles (or streaks) per megapixel; for haze it is the
/// scattering coefficient beta. `motion` is the per-frame drift in pixels.
/// `airlight` applies to haze only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeatherSpec {
    pub weather: WeatherLabel,
    pub seed: u64,
    pub density: f64,
    pub size_range: (f64, f64),
    pub transparency_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub motion: (f64, f64),
    pub airlight: f64,
}

impl WeatherSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if self.density < 0.0 || !self.density.is_finite() {
            return Err(Error::Range(format!("density {} out of range", self.density)));
        }
        if !ordered(self.size_range) || self.size_range.0 < 0.0 {
            return Err(Error::Range("size_range must be ordered and nonnegative".into()));
        }
        if !ordered(self.transparency_range)
            || self.transparency_range.0 < 0.0
            || self.transparency_range.1 > 1.0
        {
            return Err(Error::Range("transparency_range must lie in [0,1]".into()));
        }
        if !ordered(self.blur_sigma_range) || self.blur_sigma_range.0 < 0.0 {
            return Err(Error::Range("blur_sigma_range must be ordered and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.airlight) {
            return Err(Error::Range(format!("airlight {} outside [0,1]", self.airlight)));
        }
        if !self.motion.0.is_finite() || !self.motion.1.is_finite() {
            return Err(Error::Range("motion must be finite".into()));
        }
        Ok(())
    }

    /// Desk-scale default distribution for a weather type.
    pub fn default_for(weather: WeatherLabel, seed: u64) -> Self {
        match weather {
            WeatherLabel::Snow => WeatherSpec {
                weather,
                seed,
                density: 11000.0,
                size_range: (1.5, 4.5),
                transparency_range: (0.65, 1.0),
                blur_sigma_range: (0.4, 1.2),
                motion: (0.4, 1.6),
                airlight: 0.0,
            },
            WeatherLabel::Rain => WeatherSpec {
                weather,
                seed,
                density: 9500.0,
                size_range: (7.0, 16.0),
                transparency_range: (0.35, 0.75),
                blur_sigma_range: (0.5, 1.0),
                motion: (1.2, 5.0),
                airlight: 0.0,
            },
            WeatherLabel::Haze => WeatherSpec {
                weather,
                seed,
                density: 1.4,
                size_range: (0.0, 0.0),
                transparency_range: (0.0, 0.0),
                blur_sigma_range: (0.0, 0.0),
                motion: (0.0, 0.0),
                airlight: 0.85,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("spec encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: WeatherSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("spec decode {}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct Particle {
    pub position: (f64, f64),
    pub size: f64,
    pub alpha: f64,
    pub blur_sigma: f64,
    pub birth_frame: usize,
    pub velocity: (f64, f64),
}

/// Per-video particle population, sampled once from the spec distributions.
#[derive(Clone, Debug)]
pub struct ParticleField {
    pub particles: Vec<Particle>,
    pub extent: (usize, usize),
}

impl ParticleField {
    pub fn sample(spec: &WeatherSpec, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let count = (spec.density * (h * w) as f64 / 1e6).round() as usize;
        let in_range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        let particles = (0..count)
            .map(|_| Particle {
                position: (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)),
                size: in_range(&mut rng, spec.size_range),
                alpha: in_range(&mut rng, spec.transparency_range),
                blur_sigma: in_range(&mut rng, spec.blur_sigma_range),
                birth_frame: 0,
                velocity: (
                    spec.motion.0 * rng.gen_range(0.8..1.2),
                    spec.motion.1 * rng.gen_range(0.8..1.2),
                ),
            })
            .collect();
        ParticleField {
            particles,
            extent: (h, w),
        }
    }

    /// Positions at frame `k`, advanced iteratively and wrapped at borders,
    /// so `positions_at(k+1) == wrap(positions_at(k) + velocity)` exactly.
    pub fn positions_at(&self, k: usize) -> Vec<(f64, f64)> {
        let (h, w) = self.extent;
        let mut pos: Vec<(f64, f64)> = self.particles.iter().map(|p| p.position).collect();
        for _ in 0..k {
            for (p, part) in pos.iter_mut().zip(&self.particles) {
                *p = step_wrapped(*p, part.velocity, h, w);
            }
        }
        pos
    }
}

pub(crate) fn step_wrapped(
    (x, y): (f64, f64),
    (vx, vy): (f64, f64),
    h: usize,
    w: usize,
) -> (f64, f64) {
    ((x + vx).rem_euclid(w as f64), (y + vy).rem_euclid(h as f64))
}

/// Soft radial coverage of a particle at distance `d` from its center:
/// a gaussian-blurred disk edge, `alpha * Phi((R - d) / sigma)`, degenerating
/// to a hard disk for vanishing sigma.
fn coverage(d: f64, radius: f64, sigma: f64, alpha: f64) -> f64 {
    if sigma < 1e-6 {
        if d < radius {
            alpha
        } else {
            0.0
        }
    } else {
        alpha * norm_cdf((radius - d) / sigma)
    }
}

/// White-over composite of gaussian-blurred snow disks.
/// Pixels untouched by any particle keep their exact clean value.
pub fn synth_snow(clean: &Array4<f64>, spec: &WeatherSpec) -> Result<Array4<f64>> {
    if spec.weather != WeatherLabel::Snow {
        return Err(Error::Config("synth_snow: spec is not snow".into()));
    }
    spec.validate()?;
    let (t, h, w, _c) = clean.dim();
    let field = ParticleField::sample(spec, h, w);
    synth_snow_with(clean, &field, t)
}

/// Snow compositing against an explicit particle field.
pub fn synth_snow_with(
    clean: &Array4<f64>,
    field: &ParticleField,
    num_frames: usize,
) -> Result<Array4<f64>> {
    let (t, h, w, c) = clean.dim();
    if t != num_frames {
        return Err(Error::Shape(format!("clip has {t} frames, expected {num_frames}")));
    }
    let mut out = clean.clone();
    let mut pos: Vec<(f64, f64)> = field.particles.iter().map(|p| p.position).collect();
    for k in 0..t {
        let mut alpha = Array2::<f64>::zeros((h, w));
        for (p, &(px, py)) in field.particles.iter().zip(&pos) {
            let radius = p.size / 2.0;
            let reach = radius + 4.0 * p.blur_sigma + 1.0;
            let (x0, x1) = clip_box(px, reach, w);
            let (y0, y1) = clip_box(py, reach, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let a = coverage(d, radius, p.blur_sigma, p.alpha);
                    if a > 0.0 {
                        // combined alpha 1 - prod(1 - a_p)
                        alpha[[y, x]] = 1.0 - (1.0 - alpha[[y, x]]) * (1.0 - a);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let a = alpha[[y, x]];
                if a > 0.0 {
                    for ci in 0..c {
                        let cv = out[[k, y, x, ci]];
                        // white-over; max() guards the monotone bound against
                        // rounding in the blend
                        out[[k, y, x, ci]] = ((1.0 - a) * cv + a).min(1.0).max(cv);
                    }
                }
            }
        }
        for (p, part) in pos.iter_mut().zip(&field.particles) {
            *p = step_wrapped(*p, part.velocity, h, w);
        }
    }
    Ok(out)
}

/// Screen-blend of elongated gaussian rain streaks aligned with their motion.
pub fn synth_rain(clean: &Array4<f64>, spec: &WeatherSpec) -> Result<Array4<f64>> {
    if spec.weather != WeatherLabel::Rain {
        return Err(Error::Config("synth_rain: spec is not rain".into()));
    }
    spec.validate()?;
    let (t, h, w, _) = clean.dim();
    let field = ParticleField::sample(spec, h, w);
    synth_rain_with(clean, &field, t)
}

/// Rain compositing against an explicit particle field.
pub fn synth_rain_with(
    clean: &Array4<f64>,
    field: &ParticleField,
    num_frames: usize,
) -> Result<Array4<f64>> {
    let (t, h, w, c) = clean.dim();
    if t != num_frames {
        return Err(Error::Shape(format!("clip has {t} frames, expected {num_frames}")));
    }
    let mut out = clean.clone();
    let mut pos: Vec<(f64, f64)> = field.particles.iter().map(|p| p.position).collect();
    for k in 0..t {
        let mut layer = Array2::<f64>::zeros((h, w));
        for (p, &(px, py)) in field.particles.iter().zip(&pos) {
            let (mut ux, mut uy) = p.velocity;
            let norm = (ux * ux + uy * uy).sqrt();
            if norm < 1e-9 {
                (ux, uy) = (0.0, 1.0);
            } else {
                (ux, uy) = (ux / norm, uy / norm);
            }
            let sigma_l = (p.size / 2.0).max(1e-6);
            let sigma_w = p.blur_sigma.max(1e-6);
            let reach = 2.5 * sigma_l + 2.5 * sigma_w + 1.0;
            let (x0, x1) = clip_box(px, reach, w);
            let (y0, y1) = clip_box(py, reach, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = x as f64 - px;
                    let dy = y as f64 - py;
                    let d_par = dx * ux + dy * uy;
                    let d_perp = -dx * uy + dy * ux;
                    let s = p.alpha
                        * (-0.5 * (d_par * d_par / (sigma_l * sigma_l)
                            + d_perp * d_perp / (sigma_w * sigma_w)))
                            .exp();
                    if s > 0.0 {
                        layer[[y, x]] = 1.0 - (1.0 - layer[[y, x]]) * (1.0 - s);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let s = layer[[y, x]];
                if s > 0.0 {
                    for ci in 0..c {
                        let cv = out[[k, y, x, ci]];
                        // screen blend 1 - (1-c)(1-s)
                        out[[k, y, x, ci]] = (1.0 - (1.0 - cv) * (1.0 - s)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        for (p, part) in pos.iter_mut().zip(&field.particles) {
            *p = step_wrapped(*p, part.velocity, h, w);
        }
    }
    Ok(out)
}

/// Atmospheric-scattering blend: `t*clean + (1-t)*airlight`.
pub fn scatter(clean: f64, transmission: f64, airlight: f64) -> f64 {
    transmission * clean + (1.0 - transmission) * airlight
}

/// Smooth per-video depth in `[0,1]`: vertical ramp plus low-frequency value
/// noise, fixed across frames.
pub fn haze_depth_map(seed: u64, h: usize, w: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    const G: usize = 5;
    let grid = Array2::from_shape_simple_fn((G, G), || rng.gen_range(0.0..1.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ramp = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 };
        let gy = y as f64 / h.max(1) as f64 * (G - 1) as f64;
        let gx = x as f64 / w.max(1) as f64 * (G - 1) as f64;
        let (iy, ix) = (gy as usize, gx as usize);
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let (iy1, ix1) = ((iy + 1).min(G - 1), (ix + 1).min(G - 1));
        let noise = grid[[iy, ix]] * (1.0 - fy) * (1.0 - fx)
            + grid[[iy, ix1]] * (1.0 - fy) * fx
            + grid[[iy1, ix]] * fy * (1.0 - fx)
            + grid[[iy1, ix1]] * fy * fx;
        0.7 * ramp + 0.3 * noise
    })
}

/// Haze via transmission `t = exp(-beta * depth)`; `beta == 0` leaves the
/// clip bit-exact because `exp(0) == 1` and the blend keeps exact identity.
pub fn synth_haze(clean: &Array4<f64>, spec: &WeatherSpec) -> Result<Array4<f64>> {
    if spec.weather != WeatherLabel::Haze {
        return Err(Error::Config("synth_haze: spec is not haze".into()));
    }
    spec.validate()?;
    let beta = spec.density;
    let (t, h, w, c) = clean.dim();
    let depth = haze_depth_map(spec.seed, h, w);
    let mut out = clean.clone();
    for k in 0..t {
        for y in 0..h {
            for x in 0..w {
                let trans = (-beta * depth[[y, x]]).exp();
                for ci in 0..c {
                    out[[k, y, x, ci]] =
                        scatter(out[[k, y, x, ci]], trans, spec.airlight).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn synthesize(clean: &Array4<f64>, spec: &WeatherSpec) -> Result<Array4<f64>> {
    match spec.weather {
        WeatherLabel::Snow => synth_snow(clean, spec),
        WeatherLabel::Rain => synth_rain(clean, spec),
        WeatherLabel::Haze => synth_haze(clean, spec),
    }
}

fn clip_box(center: f64, reach: f64, extent: usize) -> (usize, usize) {
    let lo = (center - reach).floor().max(0.0) as usize;
    let hi = ((center + reach).ceil() as usize + 1).min(extent);
    (lo.min(extent), hi)
}

/// FNV-1a of the global seed and a video id; gives each video its own
/// deterministic spec seed.
pub fn video_seed(global_seed: u64, video_id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in global_seed.to_le_bytes().iter().chain(video_id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Procedural clean video: a slowly panning multi-scale plane-wave texture
/// overlaid with moving textured sprites that occlude and re-reveal detail.
/// Motion is coherent frame to frame, and the texture carries structure at
/// scales from a few pixels up to the frame size, so restoration quality on
/// unseen videos is measurable rather than trivially reconstructable. Values
/// stay inside [0.05, 0.95] so weather can both brighten and darken.
pub fn generate_clean_frames(seed: u64, num_frames: usize, h: usize, w: usize) -> Array4<f64> {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51a5);
    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        drift: f64,
        gain: [f64; 3],
    }
    let wave = |rng: &mut ChaCha8Rng, amp: f64| {
        let angle = rng.gen_range(0.0..TAU);
        let k = TAU / rng.gen_range(5.0..28.0);
        Wave {
            kx: k * angle.cos(),
            ky: k * angle.sin(),
            phase: rng.gen_range(0.0..TAU),
            drift: rng.gen_range(-0.06..0.06),
            gain: [
                rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
            ],
        }
    };
    let background: Vec<Wave> = (0..10).map(|_| wave(&mut rng, 0.14)).collect();
    let pan = (rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
    struct Sprite {
        c: (f64, f64),
        v: (f64, f64),
        r: f64,
        base: [f64; 3],
        waves: Vec<Wave>,
    }
    let sprites: Vec<Sprite> = (0..5)
        .map(|_| Sprite {
            c: (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)),
            v: (rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)),
            r: rng.gen_range(0.09..0.22) * w.min(h) as f64,
            base: [
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
            ],
            waves: (0..3).map(|_| wave(&mut rng, 0.12)).collect(),
        })
        .collect();
    let mut out = Array4::zeros((num_frames, h, w, 3));
    for k in 0..num_frames {
        let t = k as f64;
        for y in 0..h {
            for x in 0..w {
                // Background sampled at panned coordinates: neighbors see the
                // same content at a shifted position.
                let (bx, by) = (x as f64 + pan.0 * t, y as f64 + pan.1 * t);
                let mut v = [0.5; 3];
                for wv in &background {
                    let u = (wv.kx * bx + wv.ky * by + wv.phase + wv.drift * t).sin();
                    for ci in 0..3 {
                        v[ci] += wv.gain[ci] * u;
                    }
                }
                for s in &sprites {
                    let cx = (s.c.0 + s.v.0 * t).rem_euclid(w as f64);
                    let cy = (s.c.1 + s.v.1 * t).rem_euclid(h as f64);
                    // Nearest wrapped offset keeps sprites circular across borders.
                    let mut dx = x as f64 - cx;
                    let mut dy = y as f64 - cy;
                    dx -= w as f64 * (dx / w as f64).round();
                    dy -= h as f64 * (dy / h as f64).round();
                    let d = (dx * dx + dy * dy).sqrt();
                    let a = ((s.r - d) / 2.0).clamp(0.0, 1.0);
                    if a > 0.0 {
                        // Texture in sprite-local coordinates rides along with it.
                        let mut sv = [0.5 + s.base[0], 0.5 + s.base[1], 0.5 + s.base[2]];
                        for wv in &s.waves {
                            let u = (wv.kx * dx + wv.ky * dy + wv.phase + wv.drift * t).sin();
                            for ci in 0..3 {
                                sv[ci] += wv.gain[ci] * u;
                            }
                        }
                        for ci in 0..3 {
                            v[ci] = (1.0 - a) * v[ci] + a * sv[ci];
                        }
                    }
                }
                for ci in 0..3 {
                    out[[k, y, x, ci]] = v[ci].clamp(0.05, 0.95);
                }
            }
        }
    }
    out
}

/// Options for [`build_dataset`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Videos per weather type, applied in `WeatherLabel::ALL` order.
    pub per_weather_counts: Vec<(WeatherLabel, usize)>,
    /// Fraction of each weather's videos assigned to the train split.
    pub split_ratio: f64,
    pub global_seed: u64,
}

/// Partition sorted clean videos across weathers, degrade each with its own
/// spec, write paired frames plus the spec, and return the manifest (also
/// saved as `manifest.json` under `out_root`).
pub fn build_dataset(
    clean_root: &Path,
    out_root: &Path,
    opts: &BuildOptions,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&opts.split_ratio) {
        return Err(Error::Config(format!(
            "split_ratio {} outside [0,1]",
            opts.split_ratio
        )));
    }
    let mut videos: Vec<String> = std::fs::read_dir(clean_root)
        .map_err(|e| Error::io(clean_root, e))?
        .filter_map(|d| d.ok())
        .filter(|d| d.path().is_dir())
        .map(|d| d.file_name().to_string_lossy().into_owned())
        .collect();
    videos.sort();
    let needed: usize = opts.per_weather_counts.iter().map(|(_, c)| c).sum();
    if videos.len() < needed {
        return Err(Error::Config(format!(
            "need {needed} clean videos under {}, found {}",
            clean_root.display(),
            videos.len()
        )));
    }
    let mut manifest = DatasetManifest::default();
    let mut cursor = 0usize;
    for &(weather, count) in &opts.per_weather_counts {
        let train_count = (count as f64 * opts.split_ratio).round() as usize;
        for i in 0..count {
            let src_id = &videos[cursor];
            cursor += 1;
            let video_id = format!("{}_{:03}", weather, i);
            let src_dir = clean_root.join(src_id);
            let frames = load_video_frames(&src_dir)?;
            let spec =
                WeatherSpec::default_for(weather, video_seed(opts.global_seed, &video_id));
            let degraded = synthesize(&frames, &spec)?;
            let vdir = out_root.join(weather.as_str()).join(&video_id);
            let clean_dir = vdir.join("clean");
            let degraded_dir = vdir.join("degraded");
            for k in 0..frames.shape()[0] {
                save_frame(
                    &clean_dir.join(frame_filename(k)),
                    &frames.index_axis(Axis(0), k).to_owned(),
                )?;
                save_frame(
                    &degraded_dir.join(frame_filename(k)),
                    &degraded.index_axis(Axis(0), k).to_owned(),
                )?;
            }
            spec.save(&vdir.join("spec.json"))?;
            manifest.entries.push(ManifestEntry {
                video_id,
                weather,
                clean_dir,
                degraded_dir,
                num_frames: frames.shape()[0],
                split: if i < train_count {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    manifest.validate()?;
    manifest.save(&out_root.join("manifest.json"))?;
    Ok(manifest)
}

/// Load all `frame_%05d.png` under a directory, in index order.
pub fn load_video_frames(dir: &Path) -> Result<Array4<f64>> {
    let mut count = 0;
    while dir.join(frame_filename(count)).exists() {
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!("no frames under {}", dir.display())));
    }
    let first: Array3<f64> = crate::data::load_frame(&dir.join(frame_filename(0)))?;
    let (h, w, c) = first.dim();
    let mut out = Array4::zeros((count, h, w, c));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for k in 1..count {
        let f: Array3<f64> = crate::data::load_frame(&dir.join(frame_filename(k)))?;
        out.index_axis_mut(Axis(0), k).assign(&f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_fixture(t: usize, h: usize, w: usize) -> Array4<f64> {
        generate_clean_frames(11, t, h, w)
    }

    fn zero_density(weather: WeatherLabel) -> WeatherSpec {
        let mut s = WeatherSpec::default_for(weather, 5);
        s.density = 0.0;
        s
    }

    #[test]
    fn zero_intensity_is_bit_exact_identity() {
        let clean = clean_fixture(4, 24, 20);
        for weather in WeatherLabel::ALL {
            let out = synthesize(&clean, &zero_density(weather)).unwrap();
            assert_eq!(out, clean, "{weather} density 0 altered pixels");
        }
    }

    #[test]
    fn snow_only_brightens_and_stays_in_range() {
        let clean = clean_fixture(3, 32, 32);
        let spec = WeatherSpec::default_for(WeatherLabel::Snow, 21);
        let mut spec = spec;
        spec.density = 60_000.0; // dense enough to touch many pixels
        let out = synth_snow(&clean, &spec).unwrap();
        for (o, c) in out.iter().zip(clean.iter()) {
            assert!(*o >= *c);
            assert!((0.0..=1.0).contains(o));
        }
        assert!(out != clean);
    }

    #[test]
    fn snow_single_hard_particle_oracle() {
        let clean = clean_fixture(1, 32, 32);
        let field = ParticleField {
            particles: vec![Particle {
                position: (10.0, 10.0),
                size: 1.0,
                alpha: 1.0,
                blur_sigma: 0.0,
                birth_frame: 0,
                velocity: (0.0, 0.0),
            }],
            extent: (32, 32),
        };
        let out = synth_snow_with(&clean, &field, 1).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for ci in 0..3 {
                    let v = out[[0, y, x, ci]];
                    if (y, x) == (10, 10) {
                        assert_eq!(v, 1.0);
                    } else {
                        assert_eq!(v, clean[[0, y, x, ci]]);
                    }
                }
            }
        }
    }

    #[test]
    fn rain_screen_blend_oracle() {
        // hard streak center gives S = alpha exactly; clean 0.4, S 0.5 -> 0.7
        let mut clean = Array4::from_elem((1, 24, 24, 3), 0.4);
        clean[[0, 0, 0, 0]] = 0.4;
        let field = ParticleField {
            particles: vec![Particle {
                position: (10.0, 10.0),
                size: 2.0,
                alpha: 0.5,
                blur_sigma: 0.5,
                birth_frame: 0,
                velocity: (0.0, 1.0),
            }],
            extent: (24, 24),
        };
        let out = synth_rain_with(&clean, &field, 1).unwrap();
        assert!((out[[0, 10, 10, 0]] - 0.7).abs() < 1e-12);
        // far corner untouched
        assert_eq!(out[[0, 0, 0, 0]], 0.4);
    }

    #[test]
    fn rain_saturates_at_full_streak() {
        let clean = Array4::from_elem((1, 16, 16, 3), 0.123);
        let field = ParticleField {
            particles: vec![Particle {
                position: (8.0, 8.0),
                size: 2.0,
                alpha: 1.0,
                blur_sigma: 0.4,
                birth_frame: 0,
                velocity: (0.0, 1.0),
            }],
            extent: (16, 16),
        };
        let out = synth_rain_with(&clean, &field, 1).unwrap();
        assert_eq!(out[[0, 8, 8, 0]], 1.0);
    }

    #[test]
    fn scatter_formula_oracle() {
        // transmission exp(-1 * 0.5), clean 0.2, airlight 0.8
        let got = scatter(0.2, (-0.5f64).exp(), 0.8);
        assert!((got - 0.436_081_604_172_42).abs() < 1e-12);
    }

    #[test]
    fn haze_infinite_beta_approaches_airlight() {
        let clean = clean_fixture(2, 16, 16);
        let mut spec = WeatherSpec::default_for(WeatherLabel::Haze, 9);
        spec.density = 1e6;
        let out = synth_haze(&clean, &spec).unwrap();
        for v in out.iter() {
            assert!((v - spec.airlight).abs() < 1e-9);
        }
    }

    #[test]
    fn haze_negative_beta_rejected() {
        let clean = clean_fixture(1, 8, 8);
        let mut spec = WeatherSpec::default_for(WeatherLabel::Haze, 9);
        spec.density = -0.5;
        assert!(synth_haze(&clean, &spec).is_err());
    }

    #[test]
    fn particle_positions_advance_by_velocity() {
        let spec = WeatherSpec::default_for(WeatherLabel::Snow, 33);
        let field = ParticleField::sample(&spec, 40, 40);
        assert!(!field.particles.is_empty());
        for k in 0..4 {
            let now = field.positions_at(k);
            let next = field.positions_at(k + 1);
            for ((p, q), part) in now.iter().zip(&next).zip(&field.particles) {
                let stepped = step_wrapped(*p, part.velocity, 40, 40);
                assert_eq!(*q, stepped);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let clean = clean_fixture(3, 24, 24);
        for weather in WeatherLabel::ALL {
            let spec = WeatherSpec::default_for(weather, 77);
            let a = synthesize(&clean, &spec).unwrap();
            let b = synthesize(&clean, &spec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clean_generator_range_and_determinism() {
        let a = generate_clean_frames(3, 4, 20, 28);
        let b = generate_clean_frames(3, 4, 20, 28);
        assert_eq!(a, b);
        for v in a.iter() {
            assert!((0.05..=0.95).contains(v));
        }
        // frames change over time
        assert!(a.index_axis(Axis(0), 0) != a.index_axis(Axis(0), 3));
    }

    #[test]
    fn build_dataset_writes_layout_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let clean_root = dir.path().join("clean_src");
        for i in 0..6 {
            let frames = generate_clean_frames(100 + i, 6, 32, 32);
            for k in 0..6 {
                save_frame(
                    &clean_root.join(format!("vid{i:02}")).join(frame_filename(k)),
                    &frames.index_axis(Axis(0), k).to_owned(),
                )
                .unwrap();
            }
        }
        let out_root = dir.path().join("out");
        let opts = BuildOptions {
            per_weather_counts: WeatherLabel::ALL.iter().map(|&w| (w, 2)).collect(),
            split_ratio: 0.5,
            global_seed: 42,
        };
        let manifest = build_dataset(&clean_root, &out_root, &opts).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        for weather in WeatherLabel::ALL {
            let per: Vec<_> = manifest
                .entries
                .iter()
                .filter(|e| e.weather == weather)
                .collect();
            assert_eq!(per.len(), 2);
            assert_eq!(per.iter().filter(|e| e.split == Split::Train).count(), 1);
        }
        // regenerate from the stored spec and compare to the stored PNGs
        for e in &manifest.entries {
            let vdir = e.degraded_dir.parent().unwrap();
            let spec = WeatherSpec::load(&vdir.join("spec.json")).unwrap();
            let clean = load_video_frames(&e.clean_dir).unwrap();
            let expect = synthesize(&clean, &spec).unwrap();
            let stored = load_video_frames(&e.degraded_dir).unwrap();
            for (a, b) in stored.iter().zip(expect.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
            // degradation actually happened
            let clean_stored = load_video_frames(&e.clean_dir).unwrap();
            assert!(stored != clean_stored, "{} unchanged", e.video_id);
        }
        // same seed reproduces byte-identical frames
        let out2 = dir.path().join("out2");
        build_dataset(&clean_root, &out2, &opts).unwrap();
        let a = std::fs::read(
            out_root
                .join("rain")
                .join("rain_000")
                .join("degraded")
                .join(frame_filename(0)),
        )
        .unwrap();
        let b = std::fs::read(
            out2.join("rain")
                .join("rain_000")
                .join("degraded")
                .join(frame_filename(0)),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_dataset_rejects_insufficient_sources() {
        let dir = tempfile::tempdir().unwrap();
        let clean_root = dir.path().join("clean_src");
        std::fs::create_dir_all(clean_root.join("v0")).unwrap();
        let opts = BuildOptions {
            per_weather_counts: vec![(WeatherLabel::Rain, 2)],
            split_ratio: 0.5,
            global_seed: 1,
        };
        assert!(build_dataset(&clean_root, dir.path(), &opts).is_err());
    }
}
