//! Training harness: evenly-composed mixed-weather batches, a staircase
//! learning-rate schedule, and one Adam optimizer over every trainable
//! parameter. The gradient-reversal layer folds the adversarial min-max
//! into the same backward pass, so no alternating update scheme exists.
//! Checkpoints are JSON with exact (f64 little-endian) tensor payloads;
//! resuming reproduces the next step bitwise on the same platform.

use crate::adversarial::AdvState;
use crate::data::{crop_and_augment, load_clip, DatasetManifest, Split, WeatherLabel};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights, PerceptualExtractor};
use crate::model::{config_hash, ModelConfig, ViwsNet};
use crate::nn::{data_leaf, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tid;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array3, Array4, ArrayD, IxDyn, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters for one run. `preset` names the model architecture;
/// the ablation switches override whatever the preset sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: String,
    pub use_messengers: bool,
    pub use_adversarial: bool,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Clips drawn per weather type; batch = 3 · clips_per_weather.
    pub clips_per_weather: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Square crop side; multiple of 32 so every encoder stage divides.
    pub crop: usize,
    /// Temporal half-window; clips hold 2n+1 frames.
    pub n: usize,
    /// Seeds model init (stream 0) and the data stream (stream 1).
    pub seed: u64,
    pub perceptual_seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-scale recipe: batch 12, 500 epochs, lr 2e-4 halved every 100
    /// epochs, 224-square crops, 5-frame clips.
    pub fn full() -> Self {
        TrainConfig {
            preset: "full".to_string(),
            use_messengers: true,
            use_adversarial: true,
            epochs: 500,
            steps_per_epoch: 200,
            clips_per_weather: 4,
            lr0: 2e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 100,
            crop: 224,
            n: 2,
            seed: 7,
            perceptual_seed: 1234,
            loss: LossWeights::default(),
        }
    }

    /// Laptop-scale recipe: batch 3, 64-square crops, 2000 iterations.
    pub fn desk() -> Self {
        TrainConfig {
            preset: "desk".to_string(),
            epochs: 20,
            steps_per_epoch: 100,
            clips_per_weather: 1,
            crop: 64,
            ..Self::full()
        }
    }

    /// Smallest runnable recipe for tests.
    pub fn toy() -> Self {
        TrainConfig {
            preset: "toy".to_string(),
            epochs: 2,
            steps_per_epoch: 5,
            clips_per_weather: 1,
            lr0: 1e-3,
            crop: 32,
            n: 1,
            ..Self::full()
        }
    }

    pub fn batch_size(&self) -> usize {
        WeatherLabel::ALL.len() * self.clips_per_weather
    }

    pub fn total_iterations(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    /// The architecture this run trains, with ablations and seed applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut mc = ModelConfig::preset(&self.preset)?;
        mc.use_messengers = self.use_messengers;
        mc.use_adversarial = self.use_adversarial;
        mc.init_seed = self.seed;
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be positive".into()));
        }
        if self.clips_per_weather == 0 {
            return Err(Error::Config("clips_per_weather must be positive".into()));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::Config(format!("lr0 {} must be finite and nonnegative", self.lr0)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::Config(format!("crop {} not a positive multiple of 32", self.crop)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        self.loss.validate()?;
        self.model_config()?;
        Ok(())
    }
}

/// Staircase schedule: lr0 halved (by `lr_decay_factor`) every
/// `lr_decay_every` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One training example: a degraded clip, the clean center frame it must
/// reproduce, and the weather class for the adversarial head.
#[derive(Clone, Debug)]
pub struct TrainSample<T: Scalar> {
    pub clip: Array4<T>,
    pub target: Array3<T>,
    pub label: WeatherLabel,
    pub video_id: String,
}

/// Draw `clips_per_weather` clips from each weather class in
/// `WeatherLabel::ALL` order: random train video, random valid center,
/// one shared crop/flip per degraded-clean pair. Deterministic given the
/// rng state.
pub fn build_batch<T: Scalar>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample<T>>> {
    let mut out = Vec::with_capacity(cfg.batch_size());
    for weather in WeatherLabel::ALL {
        let pool: Vec<_> = manifest
            .split(Split::Train)
            .filter(|e| e.weather == weather)
            .collect();
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "manifest has no {weather} videos in the train split"
            )));
        }
        for _ in 0..cfg.clips_per_weather {
            let entry = pool[rng.gen_range(0..pool.len())];
            let t_len = 2 * cfg.n + 1;
            if entry.num_frames < t_len {
                return Err(Error::Data(format!(
                    "{}: {} frames, need at least {t_len} for n={}",
                    entry.video_id, entry.num_frames, cfg.n
                )));
            }
            let center = rng.gen_range(cfg.n..entry.num_frames - cfg.n);
            let degraded = load_clip::<T>(entry, center, cfg.n, true)?;
            let clean = load_clip::<T>(entry, center, cfg.n, false)?;
            let crop_seed: u64 = rng.gen();
            let (dcrop, ccrop) =
                crop_and_augment(&degraded, Some(&clean), cfg.crop, true, crop_seed)?;
            let ccrop = ccrop.expect("clean clip supplied");
            out.push(TrainSample {
                clip: dcrop.frames,
                target: ccrop.center_frame().to_owned(),
                label: weather,
                video_id: entry.video_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Adam moments for every trainable parameter, in registration order.
struct AdamState<T: Scalar> {
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamState<T> {
    fn new(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| ArrayD::<T>::zeros(store.value(*id).raw_dim());
        AdamState {
            t: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
        }
    }

    fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId], grads: &[ArrayD<T>], lr: f64) {
        self.t += 1;
        let b1 = T::from_f64_(ADAM_BETA1);
        let b2 = T::from_f64_(ADAM_BETA2);
        let one = T::one();
        let eps = T::from_f64_(ADAM_EPS);
        let inv_bc1 = T::from_f64_(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
        let inv_bc2 = T::from_f64_(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
        let lr_t = T::from_f64_(lr);
        for ((id, g), (m, v)) in ids.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            // lr 0 makes the subtrahend exactly 0.0, leaving bits untouched.
            Zip::from(store.value_mut(*id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p = *p - lr_t * (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// One JSON-lines row per optimizer step. `adversarial` is the raw
/// cross-entropy; `total` carries the gamma weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub lambda: f64,
    pub smooth_l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// The whole mutable training state: parameters, optimizer moments,
/// progress counters, and the data rng stream.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub net: ViwsNet,
    extractor: PerceptualExtractor<T>,
    trainable: Vec<ParamId>,
    opt: AdamState<T>,
    pub epoch: usize,
    pub iteration: u64,
    pub total_iterations: u64,
    pub data_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config()?;
        let mut store = ParamStore::new();
        let net = ViwsNet::build(&mut store, model_cfg.clone())?;
        let extractor = PerceptualExtractor::new_random(cfg.perceptual_seed);
        let trainable = store.trainable_ids();
        let opt = AdamState::new(&store, &trainable);
        // Model init draws from stream 0 of the same seed; the data
        // stream must not overlap it.
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(1);
        let total_iterations = cfg.total_iterations();
        Ok(Trainer {
            cfg,
            model_cfg,
            store,
            net,
            extractor,
            trainable,
            opt,
            epoch: 0,
            iteration: 0,
            total_iterations,
            data_rng,
        })
    }

    /// Reversal strength for the next step, from completed iterations
    /// over the run's planned total; the ramp clamps at p = 1 so runs
    /// extended past their plan keep λ at its ceiling.
    pub fn lambda(&self) -> f64 {
        if !self.cfg.use_adversarial {
            return 0.0;
        }
        AdvState {
            iteration: self.iteration as usize,
            total_iterations: self.total_iterations as usize,
        }
        .lambda()
    }

    /// One optimizer step over a mixed batch: forward every clip onto one
    /// tape, average the per-clip objectives, one backward pass (the
    /// reversal layer flips the adversarial gradient inside it), one Adam
    /// update over all trainables.
    pub fn train_step(&mut self, batch: &[TrainSample<T>]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let lr = lr_at(self.epoch, &self.cfg);
        let lambda = self.lambda();
        let mut cx = Ctx::new(&self.store);
        let mut sum: Option<Tid> = None;
        let mut acc = [0.0f64; 4];
        for s in batch {
            let frames = data_leaf(&mut cx, s.clip.clone().into_dyn());
            let out = self.net.forward(&mut cx, frames, lambda)?;
            let gt = data_leaf(&mut cx, s.target.clone().into_dyn());
            let (tot, comp) = total_loss(
                &mut cx,
                out.restored,
                gt,
                out.logits,
                s.label.index(),
                self.cfg.loss,
                &self.extractor,
            )?;
            if !comp.finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite loss on {} at iteration {}: smooth_l1={} perceptual={} cross_entropy={} total={}",
                    s.video_id,
                    self.iteration,
                    comp.smooth_l1,
                    comp.perceptual,
                    comp.cross_entropy,
                    comp.total
                )));
            }
            acc[0] += comp.smooth_l1;
            acc[1] += comp.perceptual;
            acc[2] += comp.cross_entropy;
            acc[3] += comp.total;
            sum = Some(match sum {
                Some(t) => cx.tape.add(t, tot),
                None => tot,
            });
        }
        let k = batch.len();
        let mean = cx
            .tape
            .scale(sum.expect("nonempty batch"), T::from_f64_(1.0 / k as f64));
        cx.backward(mean);
        let grads: Vec<ArrayD<T>> = self
            .trainable
            .iter()
            .map(|id| {
                cx.param_grad(*id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.store.value(*id).raw_dim()))
            })
            .collect();
        drop(cx);
        self.opt.step(&mut self.store, &self.trainable, &grads, lr);
        let log = StepLog {
            epoch: self.epoch,
            iteration: self.iteration,
            lr,
            lambda,
            smooth_l1: acc[0] / k as f64,
            perceptual: acc[1] / k as f64,
            adversarial: acc[2] / k as f64,
            total: acc[3] / k as f64,
        };
        self.iteration += 1;
        self.epoch = (self.iteration / self.cfg.steps_per_epoch as u64) as usize;
        Ok(log)
    }

    /// Draw a batch from the manifest (advancing the data rng) and step.
    pub fn step_with_manifest(&mut self, manifest: &DatasetManifest) -> Result<StepLog> {
        let batch = build_batch::<T>(manifest, &self.cfg, &mut self.data_rng)?;
        self.train_step(&batch)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = |arrays: Vec<&ArrayD<T>>| -> Vec<TensorBlob> {
            self.trainable
                .iter()
                .zip(arrays)
                .map(|(id, a)| encode_tensor(self.store.name(*id), a))
                .collect()
        };
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION.to_string(),
            dtype: T::NAME.to_string(),
            config_hash: config_hash(&self.model_cfg),
            model_config: self.model_cfg.clone(),
            train_config: self.cfg.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            total_iterations: self.total_iterations,
            adam_t: self.opt.t,
            data_rng: self.data_rng.clone(),
            params: tensors(self.trainable.iter().map(|id| self.store.value(*id)).collect()),
            adam_m: tensors(self.opt.m.iter().collect()),
            adam_v: tensors(self.opt.v.iter().collect()),
        };
        let bytes = serde_json::to_vec_pretty(&file)
            .map_err(|e| Error::Checkpoint(format!("encode: {e}")))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a trainer from a checkpoint; the checkpoint's own training
    /// config governs the resumed run.
    pub fn resume(path: &Path) -> Result<Self> {
        Self::restore(read_checkpoint(path)?)
    }

    /// Like [`Trainer::resume`], but first checks that `cfg` describes
    /// the same architecture the checkpoint holds.
    pub fn resume_with_config(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let file = read_checkpoint(path)?;
        let expected = config_hash(&cfg.model_config()?);
        if expected != file.config_hash {
            return Err(Error::Checkpoint(format!(
                "model config hash mismatch: checkpoint {}, supplied config {expected}",
                file.config_hash
            )));
        }
        Self::restore(file)
    }

    fn restore(file: CheckpointFile) -> Result<Self> {
        if file.dtype != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype {} but runtime scalar is {}",
                file.dtype,
                T::NAME
            )));
        }
        if config_hash(&file.model_config) != file.config_hash {
            return Err(Error::Checkpoint(
                "embedded model config does not match its recorded hash".into(),
            ));
        }
        let mut t = Trainer::new(file.train_config.clone())?;
        if config_hash(&t.model_cfg) != file.config_hash {
            return Err(Error::Checkpoint(
                "training config no longer reproduces the checkpointed model".into(),
            ));
        }
        let index: HashMap<String, usize> = t
            .trainable
            .iter()
            .enumerate()
            .map(|(k, id)| (t.store.name(*id).to_string(), k))
            .collect();
        let n_trainable = t.trainable.len();
        let locate = |blobs: &[TensorBlob], section: &str| -> Result<Vec<(usize, ArrayD<T>)>> {
            if blobs.len() != n_trainable {
                let have: Vec<&str> = blobs.iter().map(|b| b.name.as_str()).collect();
                let mut missing: Vec<&str> = index
                    .keys()
                    .map(|n| n.as_str())
                    .filter(|n| !have.contains(n))
                    .collect();
                missing.sort_unstable();
                return Err(Error::Checkpoint(format!(
                    "{section}: {} tensors for {n_trainable} trainables; missing: {}",
                    blobs.len(),
                    missing.join(", ")
                )));
            }
            blobs
                .iter()
                .map(|b| {
                    let k = *index.get(b.name.as_str()).ok_or_else(|| {
                        Error::Checkpoint(format!("{section}: unknown parameter {}", b.name))
                    })?;
                    Ok((k, decode_tensor::<T>(b)?))
                })
                .collect()
        };
        for (k, val) in locate(&file.params, "params")? {
            let id = t.trainable[k];
            if val.shape() != t.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    t.store.name(id),
                    val.shape(),
                    t.store.value(id).shape()
                )));
            }
            *t.store.value_mut(id) = val;
        }
        for (k, val) in locate(&file.adam_m, "adam_m")? {
            t.opt.m[k] = val;
        }
        for (k, val) in locate(&file.adam_v, "adam_v")? {
            t.opt.v[k] = val;
        }
        t.opt.t = file.adam_t;
        t.epoch = file.epoch;
        t.iteration = file.iteration;
        t.total_iterations = file.total_iterations;
        t.data_rng = file.data_rng;
        Ok(t)
    }
}

pub const CHECKPOINT_VERSION: &str = "viws-checkpoint-1";

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    shape: Vec<usize>,
    /// base64 of little-endian f64 values; exact for f32 and f64 states.
    data: String,
}

fn encode_tensor<T: Scalar>(name: &str, a: &ArrayD<T>) -> TensorBlob {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_f64_().to_le_bytes());
    }
    TensorBlob {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn decode_tensor<T: Scalar>(blob: &TensorBlob) -> Result<ArrayD<T>> {
    let bytes = B64
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("{}: bad tensor payload: {e}", blob.name)))?;
    let n: usize = blob.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: {} payload bytes for shape {:?}",
            blob.name,
            bytes.len(),
            blob.shape
        )));
    }
    let vals: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::from_f64_(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&blob.shape), vals)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", blob.name)))
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    dtype: String,
    config_hash: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    iteration: u64,
    total_iterations: u64,
    adam_t: u64,
    data_rng: ChaCha8Rng,
    params: Vec<TensorBlob>,
    adam_m: Vec<TensorBlob>,
    adam_v: Vec<TensorBlob>,
}

fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    Ok(file)
}
