//! Sliding-window whole-video restoration and dataset-level evaluation.
//!
//! Every frame of a test video becomes the center of one 2n+1 window;
//! centers closer than n to either end replicate the boundary frame and
//! are flagged `padded` in the metric rows.

use crate::data::{
    frame_filename, load_frame, pad_to_multiple, save_frame, DatasetManifest, FramePair, Split,
    WeatherLabel,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricRow};
use crate::model::ViwsNet;
use crate::nn::{data_leaf, Ctx, ParamStore};
use crate::scalar::Scalar;
use ndarray::{s, Array3, Array4, Axis, Ix3};
use std::path::Path;

/// Restore every frame of a video. Returns one `(frame, padded)` pair per
/// input frame, in order; `padded` marks windows that replicated an edge.
pub fn restore_video<T: Scalar>(
    net: &ViwsNet,
    store: &ParamStore<T>,
    frames: &Array4<T>,
    n: usize,
) -> Result<Vec<(Array3<T>, bool)>> {
    let (count, h, w, c) = frames.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let t_len = 2 * n + 1;
    if count < t_len {
        return Err(Error::Data(format!(
            "video has {count} frames but the sliding window needs at least {t_len}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for t in 0..count {
        let padded = t < n || t + n >= count;
        let mut clip = Array4::<T>::zeros((t_len, h, w, 3));
        for k in 0..t_len {
            let src = (t + k).saturating_sub(n).min(count - 1);
            clip.index_axis_mut(Axis(0), k)
                .assign(&frames.index_axis(Axis(0), src));
        }
        let (clip, _) = pad_to_multiple(&clip, 32)?;
        let mut cx = Ctx::new(store);
        let f = data_leaf(&mut cx, clip.into_dyn());
        let o = net.forward(&mut cx, f, 0.0)?;
        let full = cx
            .tape
            .value(o.restored)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("restored frame is (H,W,3)");
        out.push((full.slice(s![..h, ..w, ..]).to_owned(), padded));
    }
    Ok(out)
}

/// Restore every `.png` under `in_dir` (sorted by filename) and write the
/// results under the same filenames in `out_dir`. Returns the filenames.
pub fn restore_directory<T: Scalar>(
    net: &ViwsNet,
    store: &ParamStore<T>,
    in_dir: &Path,
    out_dir: &Path,
    n: usize,
) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(in_dir)
        .map_err(|e| Error::io(in_dir, e))?
        .filter_map(|r| r.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|f| f.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no .png frames under {}",
            in_dir.display()
        )));
    }
    let first = load_frame::<T>(&in_dir.join(&names[0]))?;
    let (h, w, _) = first.dim();
    let mut frames = Array4::zeros((names.len(), h, w, 3));
    frames.index_axis_mut(Axis(0), 0).assign(&first);
    for (k, name) in names.iter().enumerate().skip(1) {
        let f = load_frame::<T>(&in_dir.join(name))?;
        if f.dim() != (h, w, 3) {
            return Err(Error::Shape(format!(
                "{name}: shape {:?} differs from first frame ({h}, {w}, 3)",
                f.dim()
            )));
        }
        frames.index_axis_mut(Axis(0), k).assign(&f);
    }
    let restored = restore_video(net, store, &frames, n)?;
    for (name, (frame, _)) in names.iter().zip(&restored) {
        save_frame(&out_dir.join(name), frame)?;
    }
    Ok(names)
}

/// Load one manifest entry's frames as a `(num_frames, H, W, 3)` video.
pub fn load_entry_video<T: Scalar>(
    dir: &Path,
    num_frames: usize,
) -> Result<Array4<T>> {
    if num_frames == 0 {
        return Err(Error::Data(format!("{}: zero frames", dir.display())));
    }
    let first = load_frame::<T>(&dir.join(frame_filename(0)))?;
    let (h, w, _) = first.dim();
    let mut out = Array4::zeros((num_frames, h, w, 3));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for k in 1..num_frames {
        out.index_axis_mut(Axis(0), k)
            .assign(&load_frame::<T>(&dir.join(frame_filename(k)))?);
    }
    Ok(out)
}

/// Restore every `split` video in memory and score it against its clean
/// frames. This is the validation pass inside training runs; it writes
/// nothing to disk.
pub fn restore_and_score<T: Scalar>(
    net: &ViwsNet,
    store: &ParamStore<T>,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
) -> Result<Vec<MetricRow>> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Data("manifest has no entries in the requested split".into()));
    }
    let mut rows = Vec::new();
    for entry in &entries {
        let degraded = load_entry_video::<T>(&entry.degraded_dir, entry.num_frames)?;
        let restored = restore_video(net, store, &degraded, n)?;
        for (k, (frame, padded)) in restored.into_iter().enumerate() {
            let gt = load_frame::<T>(&entry.clean_dir.join(frame_filename(k)))?;
            let pair = FramePair::new(frame, gt)?;
            rows.push(MetricRow {
                video_id: entry.video_id.clone(),
                frame_idx: k,
                psnr: psnr(&pair),
                ssim: ssim(&pair)?,
                weather: entry.weather,
                padded,
            });
        }
    }
    Ok(rows)
}

/// Score restored frames under `pred_root/<video_id>/` against the clean
/// frames of every manifest entry in `split`. Refuses partial coverage:
/// missing predicted frames and weather classes absent from the split are
/// both hard errors.
pub fn evaluate_manifest<T: Scalar>(
    manifest: &DatasetManifest,
    pred_root: &Path,
    split: Split,
    n: usize,
) -> Result<Vec<MetricRow>> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Data("manifest has no entries in the requested split".into()));
    }
    for weather in WeatherLabel::ALL {
        if !entries.iter().any(|e| e.weather == weather) {
            return Err(Error::Data(format!(
                "no {weather} videos in the evaluated split; the weather-class Average would be partial"
            )));
        }
    }
    let mut rows = Vec::new();
    for entry in &entries {
        let pred_dir = pred_root.join(&entry.video_id);
        let missing: Vec<String> = (0..entry.num_frames)
            .map(frame_filename)
            .filter(|f| !pred_dir.join(f).exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "{}: {} of {} predicted frames missing under {}: {}",
                entry.video_id,
                missing.len(),
                entry.num_frames,
                pred_dir.display(),
                missing.join(", ")
            )));
        }
        for k in 0..entry.num_frames {
            let pred = load_frame::<T>(&pred_dir.join(frame_filename(k)))?;
            let gt = load_frame::<T>(&entry.clean_dir.join(frame_filename(k)))?;
            let pair = FramePair::new(pred, gt)?;
            rows.push(MetricRow {
                video_id: entry.video_id.clone(),
                frame_idx: k,
                psnr: psnr(&pair),
                ssim: ssim(&pair)?,
                weather: entry.weather,
                padded: k < n || k + n >= entry.num_frames,
            });
        }
    }
    Ok(rows)
}
