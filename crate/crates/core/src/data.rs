//! Core value types, frame/clip I/O, and dataset manifests.
//!
//! Frames are 8-bit RGB PNGs named `frame_%05d.png` under
//! `<root>/<weather>/<video_id>/{clean,degraded}/`. All in-memory pixel data
//! is scaled to `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Number of weather classes.
pub const NUM_WEATHERS: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherLabel {
    Rain,
    Haze,
    Snow,
}

impl WeatherLabel {
    pub const ALL: [WeatherLabel; NUM_WEATHERS] =
        [WeatherLabel::Rain, WeatherLabel::Haze, WeatherLabel::Snow];

    /// Stable integer code used as the classifier target.
    pub fn index(self) -> usize {
        match self {
            WeatherLabel::Rain => 0,
            WeatherLabel::Haze => 1,
            WeatherLabel::Snow => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Range(format!("weather index {i} out of range 0..3")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherLabel::Rain => "rain",
            WeatherLabel::Haze => "haze",
            WeatherLabel::Snow => "snow",
        }
    }
}

impl fmt::Display for WeatherLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WeatherLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(WeatherLabel::Rain),
            "haze" => Ok(WeatherLabel::Haze),
            "snow" => Ok(WeatherLabel::Snow),
            other => Err(Error::Config(format!("unknown weather {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `T = 2n+1` consecutive frames centered on the restoration target.
#[derive(Clone, Debug)]
pub struct VideoClip<T: Scalar> {
    pub frames: Array4<T>,
    pub weather: WeatherLabel,
    pub target_index: usize,
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    /// Rows/columns of reflect padding appended at load to reach the
    /// required spatial multiple; stripped again before saving output.
    pub pad: (usize, usize),
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(
        frames: Array4<T>,
        weather: WeatherLabel,
        video_id: String,
        frame_indices: Vec<usize>,
    ) -> Result<Self> {
        let t = frames.shape()[0];
        if t % 2 == 0 {
            return Err(Error::Data(format!("clip length {t} is not odd")));
        }
        if frame_indices.len() != t {
            return Err(Error::Data("frame_indices length mismatch".into()));
        }
        if !frame_indices.windows(2).all(|w| w[1] == w[0] + 1) {
            return Err(Error::Data("frame_indices not consecutive".into()));
        }
        if frames.shape()[3] != 3 {
            return Err(Error::Data("frames must have 3 channels".into()));
        }
        for &v in frames.iter() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Data("pixel values outside [0,1]".into()));
            }
        }
        Ok(VideoClip {
            frames,
            weather,
            target_index: t / 2,
            video_id,
            frame_indices,
            pad: (0, 0),
        })
    }

    pub fn t_len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, T> {
        self.frames.index_axis(Axis(0), i)
    }

    pub fn center_frame(&self) -> ArrayView3<'_, T> {
        self.frame(self.target_index)
    }

    /// Strip the reflect padding recorded at load from a model output frame.
    pub fn unpad_frame(&self, frame: &Array3<T>) -> Array3<T> {
        let (h, w) = (self.height() - self.pad.0, self.width() - self.pad.1);
        frame.slice(ndarray::s![..h, ..w, ..]).to_owned()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub weather: WeatherLabel,
    pub clean_dir: PathBuf,
    pub degraded_dir: PathBuf,
    pub num_frames: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.video_id) {
                return Err(Error::Data(format!("duplicate video_id {}", e.video_id)));
            }
            if e.num_frames == 0 {
                return Err(Error::Data(format!("{}: zero frames", e.video_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest decode {}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Prediction/ground-truth pair clamped to `[0,1]` for metric computation.
pub struct FramePair<T: Scalar> {
    pub prediction: Array3<T>,
    pub ground_truth: Array3<T>,
}

impl<T: Scalar> FramePair<T> {
    pub fn new(mut prediction: Array3<T>, ground_truth: Array3<T>) -> Result<Self> {
        if prediction.shape() != ground_truth.shape() {
            return Err(Error::Shape(format!(
                "frame pair shapes {:?} vs {:?}",
                prediction.shape(),
                ground_truth.shape()
            )));
        }
        prediction.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        Ok(FramePair {
            prediction,
            ground_truth,
        })
    }
}

pub fn frame_filename(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Write a frame as 8-bit RGB PNG: clamp to `[0,1]`, quantize round(255 x).
pub fn save_frame<T: Scalar>(path: &Path, frame: &Array3<T>) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::Shape(format!("save_frame: {c} channels")));
    }
    for &v in frame.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "save_frame {}: non-finite pixel",
                path.display()
            )));
        }
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for v in frame.iter() {
        let x = v.to_f64_().clamp(0.0, 1.0);
        buf.push((255.0 * x).round() as u8);
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer length matches dimensions");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Load an 8-bit RGB image into `[0,1]`.
pub fn load_frame<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let raw = rgb.into_raw();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (i, b) in raw.iter().enumerate() {
        out.as_slice_mut().unwrap()[i] = T::from_f64_(*b as f64 / 255.0);
    }
    Ok(out)
}

/// Reflect-pad (mirror without edge repeat) rows/cols so H and W become
/// multiples of `mult`. Returns the padded frames and (pad_h, pad_w).
pub fn pad_to_multiple<T: Scalar>(
    frames: &Array4<T>,
    mult: usize,
) -> Result<(Array4<T>, (usize, usize))> {
    let (t, h, w, c) = frames.dim();
    let ph = (mult - h % mult) % mult;
    let pw = (mult - w % mult) % mult;
    if ph >= h || pw >= w {
        return Err(Error::Data(format!(
            "frame {h}x{w} too small to reflect-pad to a multiple of {mult}"
        )));
    }
    if ph == 0 && pw == 0 {
        return Ok((frames.clone(), (0, 0)));
    }
    let mut out = Array4::zeros((t, h + ph, w + pw, c));
    for ti in 0..t {
        for y in 0..h + ph {
            let sy = if y < h { y } else { h - 2 - (y - h) };
            for x in 0..w + pw {
                let sx = if x < w { x } else { w - 2 - (x - w) };
                for ci in 0..c {
                    out[[ti, y, x, ci]] = frames[[ti, sy, sx, ci]];
                }
            }
        }
    }
    Ok((out, (ph, pw)))
}

/// Load `2n+1` frames centered on `center` from a manifest entry.
pub fn load_clip<T: Scalar>(
    entry: &ManifestEntry,
    center: usize,
    n: usize,
    degraded: bool,
) -> Result<VideoClip<T>> {
    if center < n || center + n >= entry.num_frames {
        return Err(Error::Range(format!(
            "clip center {center} with n={n} outside [{}, {}] for {}",
            n,
            entry.num_frames.saturating_sub(n + 1),
            entry.video_id
        )));
    }
    let dir = if degraded {
        &entry.degraded_dir
    } else {
        &entry.clean_dir
    };
    let indices: Vec<usize> = (center - n..=center + n).collect();
    let mut frames: Option<Array4<T>> = None;
    for (k, &idx) in indices.iter().enumerate() {
        let path = dir.join(frame_filename(idx));
        let f = load_frame::<T>(&path)?;
        let (h, w, c) = f.dim();
        let store = frames.get_or_insert_with(|| Array4::zeros((indices.len(), h, w, c)));
        if store.shape()[1..] != [h, w, c] {
            return Err(Error::Shape(format!(
                "{}: frame {idx} has shape {h}x{w}, clip started at {}x{}",
                entry.video_id,
                store.shape()[1],
                store.shape()[2]
            )));
        }
        store.index_axis_mut(Axis(0), k).assign(&f);
    }
    let frames = frames.expect("n >= 0 gives at least one frame");
    let (frames, pad) = pad_to_multiple(&frames, 32)?;
    let mut clip = VideoClip::new(frames, entry.weather, entry.video_id.clone(), indices)?;
    clip.pad = pad;
    Ok(clip)
}

/// Apply one shared random crop window (and optional shared horizontal flip)
/// to a degraded clip and its paired clean clip.
pub fn crop_and_augment<T: Scalar>(
    degraded: &VideoClip<T>,
    clean: Option<&VideoClip<T>>,
    size: usize,
    flip_enabled: bool,
    seed: u64,
) -> Result<(VideoClip<T>, Option<VideoClip<T>>)> {
    let (h, w) = (degraded.height(), degraded.width());
    if size > h || size > w {
        return Err(Error::Range(format!(
            "crop {size} exceeds clip extent {h}x{w}"
        )));
    }
    if size % 32 != 0 {
        return Err(Error::Config(format!("crop size {size} not a multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = if h == size { 0 } else { rng.gen_range(0..=h - size) };
    let x0 = if w == size { 0 } else { rng.gen_range(0..=w - size) };
    let flip = flip_enabled && rng.gen_bool(0.5);
    let cut = |clip: &VideoClip<T>| -> VideoClip<T> {
        let mut frames = clip
            .frames
            .slice(ndarray::s![.., y0..y0 + size, x0..x0 + size, ..])
            .to_owned();
        if flip {
            frames.invert_axis(Axis(2));
            frames = frames.as_standard_layout().to_owned();
        }
        VideoClip {
            frames,
            weather: clip.weather,
            target_index: clip.target_index,
            video_id: clip.video_id.clone(),
            frame_indices: clip.frame_indices.clone(),
            pad: (0, 0),
        }
    };
    Ok((cut(degraded), clean.map(cut)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::RngCore;

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoClip<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames =
            Array4::from_shape_simple_fn((t, h, w, 3), || rng.next_u32() as f64 / u32::MAX as f64);
        VideoClip::new(frames, WeatherLabel::Snow, format!("v{seed}"), (10..10 + t).collect())
            .unwrap()
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let clip = random_clip(3, 1, 9, 7);
        let frame = clip.frame(0).to_owned();
        let path = dir.path().join("f.png");
        save_frame(&path, &frame).unwrap();
        let back: Array3<f64> = load_frame(&path).unwrap();
        for (a, b) in frame.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn quantization_rule_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut frame = Array3::<f64>::zeros((1, 3, 3));
        frame[[0, 0, 0]] = 0.0;
        frame[[0, 1, 0]] = 0.5;
        frame[[0, 2, 0]] = 1.0;
        let path = dir.path().join("q.png");
        save_frame(&path, &frame).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(1, 0)[0], 128); // round(127.5) away from zero
        assert_eq!(img.get_pixel(2, 0)[0], 255);
    }

    #[test]
    fn load_clip_orders_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("degraded");
        std::fs::create_dir_all(&vdir).unwrap();
        for i in 0..7 {
            let mut f = Array3::<f64>::zeros((32, 32, 3));
            f.fill(i as f64 / 10.0);
            save_frame(&vdir.join(frame_filename(i)), &f).unwrap();
        }
        let entry = ManifestEntry {
            video_id: "v0".into(),
            weather: WeatherLabel::Rain,
            clean_dir: vdir.clone(),
            degraded_dir: vdir.clone(),
            num_frames: 7,
            split: Split::Train,
        };
        let clip: VideoClip<f64> = load_clip(&entry, 3, 2, true).unwrap();
        assert_eq!(clip.t_len(), 5);
        assert_eq!(clip.frame_indices, vec![1, 2, 3, 4, 5]);
        assert_eq!(clip.target_index, 2);
        for (k, &idx) in clip.frame_indices.iter().enumerate() {
            let expect = (255.0f64 * (idx as f64 / 10.0)).round() / 255.0;
            assert!((clip.frames[[k, 0, 0, 0]] - expect).abs() < 1e-9);
        }
        assert!(matches!(
            load_clip::<f64>(&entry, 1, 2, true),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            load_clip::<f64>(&entry, 5, 2, true),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn load_clip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("clean");
        std::fs::create_dir_all(&vdir).unwrap();
        let src = random_clip(4, 5, 32, 32);
        for i in 0..5 {
            save_frame(&vdir.join(frame_filename(i)), &src.frame(i).to_owned()).unwrap();
        }
        let entry = ManifestEntry {
            video_id: "v1".into(),
            weather: WeatherLabel::Haze,
            clean_dir: vdir.clone(),
            degraded_dir: vdir,
            num_frames: 5,
            split: Split::Test,
        };
        let a: VideoClip<f32> = load_clip(&entry, 2, 2, false).unwrap();
        let b: VideoClip<f32> = load_clip(&entry, 2, 2, false).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn pad_to_multiple_reflects() {
        let clip = random_clip(5, 1, 30, 33);
        let (padded, (ph, pw)) = pad_to_multiple(&clip.frames, 32).unwrap();
        assert_eq!((ph, pw), (2, 31));
        assert_eq!(padded.shape(), &[1, 32, 64, 3]);
        // mirrored rows: padded[30] == frames[28], padded[31] == frames[27]
        assert_eq!(padded[[0, 30, 5, 1]], clip.frames[[0, 28, 5, 1]]);
        assert_eq!(padded[[0, 31, 5, 1]], clip.frames[[0, 27, 5, 1]]);
        // mirrored cols: padded[.., 33] == frames[.., 31]
        assert_eq!(padded[[0, 7, 33, 2]], clip.frames[[0, 7, 31, 2]]);
    }

    #[test]
    fn crop_same_window_all_frames_and_pair() {
        let deg = random_clip(6, 5, 96, 64);
        let mut clean = deg.clone();
        clean.frames.mapv_inplace(|v| (v * 0.5).min(1.0));
        let (dc, cc) = crop_and_augment(&deg, Some(&clean), 32, false, 99).unwrap();
        let cc = cc.unwrap();
        assert_eq!(dc.frames.shape(), &[5, 32, 32, 3]);
        // residual of crops equals crop of residuals: check via linear probe
        let resid_full = &deg.frames - &clean.frames;
        let resid_crop = &dc.frames - &cc.frames;
        // locate window by matching the first row strip
        let mut found = false;
        'outer: for y0 in 0..=96 - 32 {
            for x0 in 0..=64 - 32 {
                let win = resid_full.slice(ndarray::s![.., y0..y0 + 32, x0..x0 + 32, ..]);
                if win == resid_crop.view() {
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found, "crop window not aligned between pair");
    }

    #[test]
    fn crop_deterministic_and_flip_reverses_columns() {
        let clip = random_clip(7, 3, 64, 64);
        let (a, _) = crop_and_augment(&clip, None, 32, false, 5).unwrap();
        let (b, _) = crop_and_augment(&clip, None, 32, false, 5).unwrap();
        assert_eq!(a.frames, b.frames);
        // identity crop at full size; force flip by scanning seeds
        let mut flipped = None;
        for seed in 0..64 {
            let (f, _) = crop_and_augment(&clip, None, 64, true, seed).unwrap();
            if f.frames != clip.frames {
                flipped = Some(f);
                break;
            }
        }
        let f = flipped.expect("some seed flips");
        for t in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(f.frames[[t, y, x, 0]], clip.frames[[t, y, 63 - x, 0]]);
                }
            }
        }
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                video_id: "a".into(),
                weather: WeatherLabel::Snow,
                clean_dir: "x/clean".into(),
                degraded_dir: "x/degraded".into(),
                num_frames: 10,
                split: Split::Train,
            }],
        };
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.entries.len(), 1);
        assert_eq!(back.entries[0].weather, WeatherLabel::Snow);

        let mut dup = m.clone();
        dup.entries.push(m.entries[0].clone());
        assert!(dup.validate().is_err());
    }

    #[test]
    fn clip_invariants_enforced() {
        let frames = Array4::<f64>::zeros((4, 8, 8, 3));
        assert!(VideoClip::new(frames, WeatherLabel::Rain, "v".into(), vec![0, 1, 2, 3]).is_err());
        let frames = Array4::<f64>::from_elem((3, 8, 8, 3), 1.5);
        assert!(VideoClip::new(frames, WeatherLabel::Rain, "v".into(), vec![0, 1, 2]).is_err());
        let frames = Array4::<f64>::zeros((3, 8, 8, 3));
        assert!(VideoClip::new(frames, WeatherLabel::Rain, "v".into(), vec![0, 2, 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn crop_residual_commutes(seed in 0u64..1000, size_mult in 1usize..3) {
            let deg = random_clip(seed, 3, 96, 96);
            let mut clean = deg.clone();
            clean.frames.mapv_inplace(|v| v * 0.25);
            let size = 32 * size_mult;
            let (dc, cc) = crop_and_augment(&deg, Some(&clean), size, true, seed).unwrap();
            let cc = cc.unwrap();
            let resid = &dc.frames - &cc.frames;
            // residual equals 0.75 * degraded crop by construction
            let expect = dc.frames.mapv(|v| v * 0.75);
            for (a, b) in resid.iter().zip(expect.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
