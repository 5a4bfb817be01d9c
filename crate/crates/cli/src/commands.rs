//! The four batch commands. Each resolves its output root, echoes the
//! resolved config, and delegates the real work to the core crate.

use crate::config::RunConfig;
use ndarray::Axis;
use sha2::{Digest, Sha256};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use viws_core::data::{save_frame, DatasetManifest, Split, WeatherLabel};
use viws_core::eval::{evaluate_manifest, restore_and_score, restore_directory};
use viws_core::metrics::{summarize, write_csv, MetricSummary};
use viws_core::synth::{build_dataset, generate_clean_frames, BuildOptions};
use viws_core::train::Trainer;
use viws_core::{Error, Real, Result, Wide};

pub fn cmd_synthesize(cfg: &RunConfig) -> Result<()> {
    let sec = cfg.synthesize_section()?;
    let root = cfg.resolved_output_root()?;
    cfg.echo_resolved(&root, "synthesize")?;
    if !sec.clean_root.exists() {
        match &sec.generate_clean {
            Some(g) => {
                let count = sec.videos_per_weather * WeatherLabel::ALL.len();
                for i in 0..count {
                    let frames =
                        generate_clean_frames(g.seed.wrapping_add(i as u64), g.frames, g.height, g.width);
                    let dir = sec.clean_root.join(format!("clean_{i:03}"));
                    for k in 0..g.frames {
                        save_frame(
                            &dir.join(viws_core::data::frame_filename(k)),
                            &frames.index_axis(Axis(0), k).to_owned(),
                        )?;
                    }
                }
                println!("rendered {count} clean videos into {}", sec.clean_root.display());
            }
            None => {
                return Err(Error::Data(format!(
                    "clean root {} does not exist",
                    sec.clean_root.display()
                )))
            }
        }
    }
    let out = root.join("dataset");
    let opts = BuildOptions {
        per_weather_counts: WeatherLabel::ALL
            .iter()
            .map(|&w| (w, sec.videos_per_weather))
            .collect(),
        split_ratio: sec.split_ratio,
        global_seed: sec.seed,
    };
    let manifest = build_dataset(&sec.clean_root, &out, &opts)?;
    print_manifest_summary(&manifest);
    let digest = tree_digest(&out)?;
    let digest_path = root.join("dataset.digest");
    let previous = std::fs::read_to_string(&digest_path).ok();
    std::fs::write(&digest_path, &digest).map_err(|e| Error::io(&digest_path, e))?;
    if previous.as_deref() == Some(digest.as_str()) {
        println!("up-to-date, outputs identical");
    } else {
        println!("dataset written to {}", out.display());
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool, checkpoint: Option<PathBuf>) -> Result<()> {
    let sec = cfg.train_section()?;
    let tc = &sec.config;
    let root = cfg.resolved_output_root()?;
    cfg.echo_resolved(&root, "train")?;
    let train_dir = root.join("train");
    std::fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    let last_path = checkpoint.unwrap_or_else(|| train_dir.join("last.json"));
    let best_path = train_dir.join("best.json");

    let manifest = DatasetManifest::load(&sec.manifest)?;
    let mut trainer: Trainer<Real> = if resume {
        let t = Trainer::resume_with_config(&last_path, tc)?;
        println!("resumed at iteration {} (epoch {})", t.iteration, t.epoch);
        t
    } else {
        Trainer::new(tc.clone())?
    };
    // The section's epochs set the loop target, so a resumed run can be
    // extended; lambda's denominator stays the plan the run started with.
    let target = tc.total_iterations();
    let validate_every = sec.validate_every.unwrap_or(tc.steps_per_epoch as u64);

    let log_path = train_dir.join("log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(resume)
        .truncate(!resume)
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut best_psnr = f64::NEG_INFINITY;
    while trainer.iteration < target {
        let row = trainer.step_with_manifest(&manifest)?;
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Config(format!("step log row: {e}")))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if validate_every > 0
            && (trainer.iteration % validate_every == 0 || trainer.iteration >= target)
        {
            let rows = restore_and_score(&trainer.net, &trainer.store, &manifest, Split::Test, tc.n)?;
            let summary = summarize(&rows)?;
            print_metric_table(&summary, &format!("validation @ iteration {}", trainer.iteration));
            trainer.save_checkpoint(&last_path)?;
            if summary.average_psnr > best_psnr {
                best_psnr = summary.average_psnr;
                trainer.save_checkpoint(&best_path)?;
                println!("new best average psnr {best_psnr:.4}, kept {}", best_path.display());
            }
        }
    }
    trainer.save_checkpoint(&last_path)?;
    println!(
        "training complete at iteration {} (epoch {}); checkpoint {}",
        trainer.iteration,
        trainer.epoch,
        last_path.display()
    );
    Ok(())
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let sec = cfg.infer_section()?;
    let root = cfg.resolved_output_root()?;
    cfg.echo_resolved(&root, "infer")?;
    let ckpt = checkpoint.unwrap_or_else(|| sec.checkpoint.clone());
    let trainer: Trainer<Real> = Trainer::resume(&ckpt)?;
    let n = sec.n.unwrap_or(trainer.cfg.n);
    let name = sec
        .output_name
        .clone()
        .or_else(|| sec.input.file_name().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| {
            Error::Config("cannot derive an output name from the input path; set output_name".into())
        })?;
    let out_dir = root.join("restored").join(name);
    let names = restore_directory(&trainer.net, &trainer.store, &sec.input, &out_dir, n)?;
    println!("restored {} frames into {}", names.len(), out_dir.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let sec = cfg.evaluate_section()?;
    let root = cfg.resolved_output_root()?;
    cfg.echo_resolved(&root, "evaluate")?;
    let manifest = DatasetManifest::load(&sec.manifest)?;
    let rows = evaluate_manifest::<Wide>(&manifest, &sec.predictions, sec.split, sec.n)?;
    let eval_dir = root.join("evaluate");
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let csv_path = eval_dir.join("metrics.csv");
    write_csv(&rows, &csv_path)?;
    let summary = summarize(&rows)?;
    print_metric_table(&summary, "evaluation");
    println!("per-frame metrics: {}", csv_path.display());
    Ok(())
}

fn print_manifest_summary(manifest: &DatasetManifest) {
    println!("{:<8} {:>6} {:>6}", "weather", "train", "test");
    let (mut tr, mut te) = (0, 0);
    for w in WeatherLabel::ALL {
        let train = manifest
            .entries
            .iter()
            .filter(|e| e.weather == w && e.split == Split::Train)
            .count();
        let test = manifest
            .entries
            .iter()
            .filter(|e| e.weather == w && e.split == Split::Test)
            .count();
        println!("{:<8} {train:>6} {test:>6}", w.as_str());
        tr += train;
        te += test;
    }
    println!("{:<8} {tr:>6} {te:>6}", "total");
}

fn print_metric_table(summary: &MetricSummary, header: &str) {
    println!("{header}");
    println!("  {:<8} {:>9} {:>8} {:>7}", "weather", "psnr", "ssim", "frames");
    for m in &summary.per_weather {
        println!(
            "  {:<8} {:>9.4} {:>8.4} {:>7}",
            m.weather.as_str(),
            m.psnr,
            m.ssim,
            m.frames
        );
    }
    println!(
        "  {:<8} {:>9.4} {:>8.4}",
        "Average", summary.average_psnr, summary.average_ssim
    );
}

/// Content hash of every file under `dir` (relative path + bytes, sorted),
/// so identical reruns can be reported as identical.
fn tree_digest(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, files)?;
            } else {
                files.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let full = dir.join(&rel);
        hasher.update(std::fs::read(&full).map_err(|e| Error::io(&full, e))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
