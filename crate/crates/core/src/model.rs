//! Full restoration model: shared messenger block, encoder, adversarial
//! branch, messenger-driven decoder, temporal fusion, and refinement,
//! with ablation switches for the messenger and adversarial branches.

use crate::adversarial::{Discriminator, DiscriminatorConfig};
use crate::decoder::{Decoder, DecoderConfig, RefineNet};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::messenger::{broadcast_messengers, register_messengers};
use crate::nn::{Ctx, ParamId, ParamStore, Scope};
use crate::scalar::Scalar;
use crate::tape::Tid;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    /// Messenger tokens per frame; divisible by the 6 shift groups.
    pub num_messengers: usize,
    /// Off = retrieval is skipped and the pyramid runs from pixel
    /// features alone.
    pub use_messengers: bool,
    /// Off = no discriminator branch, no adversarial loss term.
    pub use_adversarial: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            num_messengers: 12,
            use_messengers: true,
            use_adversarial: true,
            init_seed: 0,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig {
                num_blocks: 2,
                fusion_channels: vec![64, 128, 256, 512],
                temporal_kernel: 3,
                refine_scale: 0.5,
            },
            discriminator: DiscriminatorConfig::desk(),
            num_messengers: 48,
            use_messengers: true,
            use_adversarial: true,
            init_seed: 0,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            num_messengers: 6,
            use_messengers: true,
            use_adversarial: true,
            init_seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (desk, full, toy)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.discriminator.validate(&self.encoder)?;
        if self.use_messengers && self.num_messengers == 0 {
            return Err(Error::Config("messenger branch enabled with 0 tokens".into()));
        }
        if self.num_messengers % crate::messenger::NUM_GROUPS != 0 {
            return Err(Error::Config(format!(
                "messenger count {} not divisible by {}",
                self.num_messengers,
                crate::messenger::NUM_GROUPS
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON form; checkpoints embed it so a load
/// against a different architecture fails loudly.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub struct ForwardOutput {
    /// `(T, H, W, 3)` per-frame recoveries after subtraction.
    pub recoveries: Tid,
    /// `(H, W, 3)` center frame after temporal fusion, before refinement.
    pub fused: Tid,
    /// `(H, W, 3)` final restored center frame in [0,1].
    pub restored: Tid,
    /// `(3,)` weather logits; `None` when the adversarial branch is off.
    pub logits: Option<Tid>,
}

pub struct ViwsNet {
    pub cfg: ModelConfig,
    messengers: Option<ParamId>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub refine: RefineNet,
    pub discriminator: Option<Discriminator>,
}

impl ViwsNet {
    /// Registers all parameters into `store` under the prefixes
    /// `messengers.`, `encoder.`, `decoder.`, `refine.`,
    /// `discriminator.`.
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut root = Scope::new(store, &mut rng);
        let messengers = if cfg.use_messengers {
            Some(register_messengers(
                &mut root,
                cfg.num_messengers,
                cfg.encoder.channels[0],
            )?)
        } else {
            None
        };
        let mut encoder = {
            let mut es = root.sub("encoder");
            Encoder::new(&mut es, cfg.encoder.clone())?
        };
        if !cfg.use_messengers {
            encoder.hooks.mask_messengers = true;
        }
        let decoder = {
            let mut ds = root.sub("decoder");
            Decoder::new(&mut ds, &cfg.encoder, cfg.decoder.clone())?
        };
        let refine = {
            let mut rs = root.sub("refine");
            RefineNet::new(&mut rs, &cfg.encoder, cfg.decoder.refine_scale)?
        };
        let discriminator = if cfg.use_adversarial {
            let mut ds = root.sub("discriminator");
            Some(Discriminator::new(
                &mut ds,
                &cfg.encoder,
                cfg.discriminator.clone(),
            )?)
        } else {
            None
        };
        Ok(ViwsNet {
            cfg,
            messengers,
            encoder,
            decoder,
            refine,
            discriminator,
        })
    }

    /// One clip through the whole pipeline. `lambda` is the reversal
    /// strength for the adversarial branch; ignored when that branch is
    /// off.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        frames: Tid,
        lambda: f64,
    ) -> Result<ForwardOutput> {
        let fsh = cx.tape.shape(frames).to_vec();
        if fsh.len() != 4 || fsh[3] != 3 {
            return Err(Error::Shape(format!("expected (T,H,W,3) clip, got {fsh:?}")));
        }
        let t = fsh[0];
        let msg = match self.messengers {
            Some(id) => broadcast_messengers(cx, id, t),
            None => cx
                .tape
                .constant(ArrayD::zeros(IxDyn(&[t, 0, self.cfg.encoder.channels[0]]))),
        };
        let (feats, m_out) = self.encoder.encode(cx, frames, msg)?;
        let deep = feats.last().expect("stages present");
        let r = if self.messengers.is_some() {
            self.decoder.retrieve(cx, deep, m_out)?
        } else {
            cx.tape.constant(ArrayD::zeros(IxDyn(&[
                t,
                deep.dims.0 * deep.dims.1,
                deep.channels,
            ])))
        };
        let recoveries = self.decoder.project_and_subtract(cx, r, &feats, frames)?;
        let fused = self.decoder.temporal_fusion(cx, recoveries)?;
        let restored = self.refine.apply(cx, fused)?;
        let logits = match &self.discriminator {
            Some(d) => Some(d.forward(cx, &feats, T::from_f64_(lambda))?),
            None => None,
        };
        Ok(ForwardOutput {
            recoveries,
            fused,
            restored,
            logits,
        })
    }
}
