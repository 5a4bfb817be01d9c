use ndarray::Axis;
use std::path::Path;
use viws_core::data::{
    frame_filename, load_clip, save_frame, DatasetManifest, FramePair, Split, WeatherLabel,
};
use viws_core::eval::restore_and_score;
use viws_core::losses::LossWeights;
use viws_core::metrics::{psnr, summarize};
use viws_core::nn::{data_leaf, Ctx};
use viws_core::synth::{build_dataset, generate_clean_frames, BuildOptions};
use viws_core::train::{TrainConfig, TrainSample, Trainer};

fn desk_dataset(root: &Path) -> DatasetManifest {
    let clean_root = root.join("clean_src");
    for i in 0..9 {
        let frames = generate_clean_frames(600 + i as u64, 20, 64, 64);
        for k in 0..20 {
            save_frame(
                &clean_root.join(format!("vid{i:02}")).join(frame_filename(k)),
                &frames.index_axis(Axis(0), k).to_owned(),
            )
            .unwrap();
        }
    }
    let opts = BuildOptions {
        per_weather_counts: WeatherLabel::ALL.iter().map(|&w| (w, 3)).collect(),
        split_ratio: 2.0 / 3.0,
        global_seed: 42,
    };
    build_dataset(&clean_root, &root.join("data"), &opts).unwrap()
}

fn desk_cfg(lr0: f64, total_steps: usize) -> TrainConfig {
    TrainConfig {
        preset: "desk".into(),
        use_messengers: true,
        use_adversarial: true,
        epochs: 1,
        steps_per_epoch: total_steps,
        clips_per_weather: 1,
        lr0,
        lr_decay_factor: 0.5,
        lr_decay_every: 1000,
        crop: 32,
        n: 2,
        seed: 7,
        perceptual_seed: 1234,
        loss: LossWeights::default(),
    }
}

fn restored_stats(t: &Trainer<f32>, sample: &TrainSample<f32>) -> (f64, f64) {
    let mut cx = Ctx::new(&t.store);
    let f = data_leaf(&mut cx, sample.clip.clone().into_dyn());
    let o = t.net.forward(&mut cx, f, 0.0).unwrap();
    let restored = cx
        .tape
        .value(o.restored)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let sat = restored
        .iter()
        .filter(|&&v| v <= 0.0 || v >= 1.0)
        .count() as f64
        / restored.len() as f64;
    let pair = FramePair::new(restored, sample.target.clone()).unwrap();
    (psnr(&pair), sat)
}

#[test]
fn probe_overfit_curve() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_dataset(dir.path());
    let entry = manifest
        .split(Split::Train)
        .find(|e| e.weather == WeatherLabel::Rain)
        .unwrap();
    let degraded = load_clip::<f32>(entry, 4, 2, true).unwrap();
    let clean = load_clip::<f32>(entry, 4, 2, false).unwrap();
    let sample = TrainSample {
        clip: degraded.frames.clone(),
        target: clean.center_frame().to_owned(),
        label: entry.weather,
        video_id: entry.video_id.clone(),
    };
    let base = {
        let pair = FramePair::new(
            degraded.center_frame().to_owned(),
            clean.center_frame().to_owned(),
        )
        .unwrap();
        psnr(&pair)
    };
    println!("degraded baseline psnr {base:.3}");
    for lr in [1e-3, 2e-4] {
        let mut t: Trainer<f32> = Trainer::new(desk_cfg(lr, 2000)).unwrap();
        let batch = vec![sample.clone()];
        let start = std::time::Instant::now();
        let mut reached = None;
        for step in 1..=500 {
            let log = t.train_step(&batch).unwrap();
            if step % 25 == 0 {
                let (p, sat) = restored_stats(&t, &sample);
                println!(
                    "lr {lr} step {step}: psnr {p:.3} sat {sat:.3} sl1 {:.5} tot {:.5} ({:.0?})",
                    log.smooth_l1,
                    log.total,
                    start.elapsed()
                );
                if p >= 30.5 {
                    reached = Some(step);
                    break;
                }
            }
        }
        println!("lr {lr}: reached 30.5dB at {reached:?}");
    }
}

#[test]
fn probe_mixed_gain_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_dataset(dir.path());
    let ident: Trainer<f32> = Trainer::new(desk_cfg(0.0, 100)).unwrap();
    let base_rows = restore_and_score(&ident.net, &ident.store, &manifest, Split::Test, 2).unwrap();
    let base = summarize(&base_rows).unwrap();
    for m in &base.per_weather {
        println!("baseline {} psnr {:.3}", m.weather, m.psnr);
    }
    for lr in [2e-4] {
    println!("=== mixed crop32 lr {lr} ===");
    let mut t: Trainer<f32> = Trainer::new(desk_cfg(lr, 2000)).unwrap();
    let start = std::time::Instant::now();
    for step in 1..=2000usize {
        let log = t.step_with_manifest(&manifest).unwrap();
        if log.total > 0.5 {
            println!("step {step}: SPIKE total {:.4} sl1 {:.4}", log.total, log.smooth_l1);
        }
        if step % 150 == 0 {
            let rows = restore_and_score(&t.net, &t.store, &manifest, Split::Test, 2).unwrap();
            let s = summarize(&rows).unwrap();
            let gains: Vec<String> = s
                .per_weather
                .iter()
                .zip(&base.per_weather)
                .map(|(a, b)| format!("{} {:+.2}", a.weather, a.psnr - b.psnr))
                .collect();
            println!(
                "step {step}: avg {:.3} gains [{}] sl1 {:.5} ({:.0?})",
                s.average_psnr,
                gains.join(", "),
                log.smooth_l1,
                start.elapsed()
            );
        }
    }
    }
}
