//! Multi-stage video transformer encoder over joint pixel+messenger tokens.
//!
//! Each stage embeds frames with an overlapped convolution, then runs
//! blocks of shunted self-attention (two head groups attend to K/V
//! downsampled at different rates, messengers join K/V undownsampled)
//! followed by a feed-forward with a depthwise convolution on the pixel
//! tokens. Attention is strictly per frame; frames exchange information
//! only through the messenger shift applied between the blocks of a stage
//! and inverted at stage exit.

use crate::error::{Error, Result};
use crate::messenger::{tape_shift, ShiftPlan};
use crate::nn::{Conv2d, Ctx, DwConv, Init, LayerNorm, Linear, Scope};
use crate::scalar::Scalar;
use crate::tape::Tid;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_stages: usize,
    pub blocks_per_stage: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    /// Two K/V downsampling rates per stage, one per attention head group.
    pub reduction_ratios: Vec<(usize, usize)>,
    pub patch_embed: Vec<PatchEmbedSpec>,
    pub mlp_ratio: Vec<usize>,
    pub shift_plan: ShiftPlan,
    /// Shift between every consecutive block pair (displacement
    /// accumulates, all undone at stage exit) instead of once mid-stage.
    pub shift_per_block: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            num_stages: 4,
            blocks_per_stage: vec![2, 2, 2, 2],
            channels: vec![16, 32, 64, 128],
            heads: vec![2, 2, 4, 8],
            reduction_ratios: vec![(8, 4), (4, 2), (2, 1), (1, 1)],
            patch_embed: vec![
                PatchEmbedSpec {
                    kernel: 7,
                    stride: 4,
                    padding: 3,
                },
                PatchEmbedSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                PatchEmbedSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                PatchEmbedSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            mlp_ratio: vec![2, 2, 2, 2],
            shift_plan: ShiftPlan::default_plan(),
            shift_per_block: false,
        }
    }

    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.channels = vec![64, 128, 256, 512];
        cfg.heads = vec![2, 4, 8, 16];
        cfg.mlp_ratio = vec![4, 4, 4, 4];
        cfg
    }

    /// Two tiny stages for gradient checks at 16x16.
    pub fn toy() -> Self {
        EncoderConfig {
            num_stages: 2,
            blocks_per_stage: vec![2, 2],
            channels: vec![8, 16],
            heads: vec![2, 2],
            reduction_ratios: vec![(2, 1), (1, 1)],
            patch_embed: vec![
                PatchEmbedSpec {
                    kernel: 7,
                    stride: 4,
                    padding: 3,
                },
                PatchEmbedSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            mlp_ratio: vec![2, 2],
            shift_plan: ShiftPlan::default_plan(),
            shift_per_block: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if n == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for (name, len) in [
            ("blocks_per_stage", self.blocks_per_stage.len()),
            ("channels", self.channels.len()),
            ("heads", self.heads.len()),
            ("reduction_ratios", self.reduction_ratios.len()),
            ("patch_embed", self.patch_embed.len()),
            ("mlp_ratio", self.mlp_ratio.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!(
                    "{name} has {len} entries for {n} stages"
                )));
            }
        }
        for l in 0..n {
            if l > 0 && self.channels[l] <= self.channels[l - 1] {
                return Err(Error::Config("channels must be strictly increasing".into()));
            }
            let (c, h) = (self.channels[l], self.heads[l]);
            if h < 2 || h % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {}: heads {h} must be even and >= 2 to form two K/V groups",
                    l + 1
                )));
            }
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels {c} not divisible by heads {h}",
                    l + 1
                )));
            }
            let expect = if l == 0 { 4 } else { 2 };
            if self.patch_embed[l].stride != expect {
                return Err(Error::Config(format!(
                    "stage {} stride {} != {expect}",
                    l + 1,
                    self.patch_embed[l].stride
                )));
            }
            if self.mlp_ratio[l] == 0 || self.blocks_per_stage[l] == 0 {
                return Err(Error::Config("mlp_ratio and blocks must be >= 1".into()));
            }
            let (ra, rb) = self.reduction_ratios[l];
            if ra == 0 || rb == 0 {
                return Err(Error::Config("reduction ratios must be >= 1".into()));
            }
        }
        self.shift_plan.validate()
    }

    /// Total spatial downsampling factor from input to final stage.
    pub fn total_stride(&self) -> usize {
        self.patch_embed.iter().map(|p| p.stride).product()
    }
}

/// Test hooks exercising attention structure; both default off.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    /// Replace every attention matrix with uniform weights.
    pub force_uniform: bool,
    /// Drop messenger tokens from K/V (pixel tokens only).
    pub mask_messengers: bool,
}

/// Pixel tokens emitted by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageFeature {
    /// `(T, h*w, C)` tokens on the tape.
    pub tokens: Tid,
    pub dims: (usize, usize),
    pub channels: usize,
}

struct KvGroup {
    rate: usize,
    sr: Option<(Conv2d, LayerNorm)>,
    k: Linear,
    v: Linear,
    heads: usize,
}

struct Block {
    norm1: LayerNorm,
    q: Linear,
    group_a: KvGroup,
    group_b: KvGroup,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    dw: DwConv,
    fc2: Linear,
}

struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    mproj: Option<Linear>,
    blocks: Vec<Block>,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
    pub hooks: Hooks,
}

fn new_kv_group<T: Scalar>(
    sc: &mut Scope<T>,
    tag: &str,
    c: usize,
    heads: usize,
    head_dim: usize,
    rate: usize,
) -> KvGroup {
    let dim = heads * head_dim;
    let tn = Init::TruncNormal { std: 0.02 };
    let sr = if rate > 1 {
        Some((
            Conv2d::new(
                sc,
                &format!("sr{tag}"),
                c,
                c,
                rate,
                rate,
                0,
                Init::KaimingUniform,
            ),
            LayerNorm::new(sc, &format!("srnorm{tag}"), c),
        ))
    } else {
        None
    };
    KvGroup {
        rate,
        sr,
        k: Linear::new(sc, &format!("k{tag}"), c, dim, tn),
        v: Linear::new(sc, &format!("v{tag}"), c, dim, tn),
        heads,
    }
}

impl Encoder {
    /// Build all parameters under the given scope (callers root it at
    /// `encoder`); names follow `stage{l}.block{b}.*` with stages
    /// 1-indexed and blocks 0-indexed.
    pub fn new<T: Scalar>(sc: &mut Scope<T>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let tn = Init::TruncNormal { std: 0.02 };
        let mut stages = Vec::new();
        for l in 0..cfg.num_stages {
            let mut ss = sc.sub(&format!("stage{}", l + 1));
            let c = cfg.channels[l];
            let cin = if l == 0 { 3 } else { cfg.channels[l - 1] };
            let pe = cfg.patch_embed[l];
            let embed = Conv2d::new(
                &mut ss,
                "embed",
                cin,
                c,
                pe.kernel,
                pe.stride,
                pe.padding,
                Init::KaimingUniform,
            );
            let embed_norm = LayerNorm::new(&mut ss, "embed_norm", c);
            let mproj = if l > 0 {
                Some(Linear::new(&mut ss, "mproj", cfg.channels[l - 1], c, tn))
            } else {
                None
            };
            let head_dim = c / cfg.heads[l];
            let (ha, hb) = (cfg.heads[l] / 2, cfg.heads[l] - cfg.heads[l] / 2);
            let (ra, rb) = cfg.reduction_ratios[l];
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[l] {
                let mut bs = ss.sub(&format!("block{b}"));
                let hidden = c * cfg.mlp_ratio[l];
                blocks.push(Block {
                    norm1: LayerNorm::new(&mut bs, "norm1", c),
                    q: Linear::new(&mut bs, "q", c, c, tn),
                    group_a: new_kv_group(&mut bs, "a", c, ha, head_dim, ra),
                    group_b: new_kv_group(&mut bs, "b", c, hb, head_dim, rb),
                    proj: Linear::new(&mut bs, "proj", c, c, tn),
                    norm2: LayerNorm::new(&mut bs, "norm2", c),
                    fc1: Linear::new(&mut bs, "fc1", c, hidden, tn),
                    dw: DwConv::new(&mut bs, "dw", hidden, Init::KaimingUniform),
                    fc2: Linear::new(&mut bs, "fc2", hidden, c, tn),
                });
            }
            stages.push(Stage {
                embed,
                embed_norm,
                mproj,
                blocks,
            });
        }
        Ok(Encoder {
            cfg,
            stages,
            hooks: Hooks::default(),
        })
    }

    /// K/V source for one head group: pixel tokens optionally downsampled
    /// by a strided convolution, messengers appended undownsampled.
    fn kv_source<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        group: &KvGroup,
        xn_pixel: Tid,
        xn_msngr: Tid,
        dims: (usize, usize),
    ) -> Result<Tid> {
        let (h, w) = dims;
        let sh = cx.tape.shape(xn_pixel).to_vec();
        let (t, c) = (sh[0], sh[2]);
        let px = match &group.sr {
            Some((conv, norm)) => {
                if h % group.rate != 0 || w % group.rate != 0 {
                    return Err(Error::Shape(format!(
                        "grid {h}x{w} not divisible by K/V rate {}",
                        group.rate
                    )));
                }
                let grid = cx.tape.reshape(xn_pixel, &[t, h, w, c]);
                let down = conv.apply(cx, grid);
                let (hd, wd) = (h / group.rate, w / group.rate);
                let flat = cx.tape.reshape(down, &[t, hd * wd, c]);
                norm.apply(cx, flat)
            }
            None => xn_pixel,
        };
        if self.hooks.mask_messengers {
            Ok(px)
        } else {
            Ok(cx.tape.concat(&[px, xn_msngr], 1))
        }
    }

    /// Shunted self-attention over the joint `[pixel, messenger]` sequence,
    /// one attention map per frame per head.
    pub fn ssa_block<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        stage: usize,
        block: usize,
        pixel: Tid,
        msngr: Tid,
        dims: (usize, usize),
    ) -> Result<(Tid, Tid)> {
        let blk = &self.stages[stage].blocks[block];
        let psh = cx.tape.shape(pixel).to_vec();
        let (t, lp, c) = (psh[0], psh[1], psh[2]);
        let m = cx.tape.shape(msngr)[1];
        if lp != dims.0 * dims.1 {
            return Err(Error::Shape(format!(
                "token count {lp} != grid {}x{}",
                dims.0, dims.1
            )));
        }
        let head_dim = c / self.cfg.heads[stage];
        let x = cx.tape.concat(&[pixel, msngr], 1);
        let xn = blk.norm1.apply(cx, x);
        let q_all = blk.q.apply(cx, xn);
        let xn_pixel = cx.tape.narrow(xn, 1, 0, lp);
        let xn_msngr = cx.tape.narrow(xn, 1, lp, m);
        let mut kv = Vec::new();
        for group in [&blk.group_a, &blk.group_b] {
            let src = self.kv_source(cx, group, xn_pixel, xn_msngr, dims)?;
            let k = group.k.apply(cx, src);
            let v = group.v.apply(cx, src);
            kv.push((k, v));
        }
        let scale = T::from_f64_(1.0 / (head_dim as f64).sqrt());
        let mut frames = Vec::new();
        for fi in 0..t {
            let qf = cx.tape.narrow(q_all, 0, fi, 1);
            let qf = cx.tape.reshape(qf, &[lp + m, c]);
            let mut head_outs = Vec::new();
            let mut q_off = 0;
            for (gi, group) in [&blk.group_a, &blk.group_b].into_iter().enumerate() {
                let (k_all, v_all) = kv[gi];
                let kv_len = cx.tape.shape(k_all)[1];
                let kf = cx.tape.narrow(k_all, 0, fi, 1);
                let kf = cx.tape.reshape(kf, &[kv_len, group.heads * head_dim]);
                let vf = cx.tape.narrow(v_all, 0, fi, 1);
                let vf = cx.tape.reshape(vf, &[kv_len, group.heads * head_dim]);
                for hh in 0..group.heads {
                    let qh = cx.tape.narrow(qf, 1, q_off + hh * head_dim, head_dim);
                    let vh = cx.tape.narrow(vf, 1, hh * head_dim, head_dim);
                    let out = if self.hooks.force_uniform {
                        let mv = cx.tape.mean_rows(vh);
                        let zc = cx.tape.constant(ArrayD::zeros(IxDyn(&[lp + m, head_dim])));
                        cx.tape.add_bias(zc, mv)
                    } else {
                        let kh = cx.tape.narrow(kf, 1, hh * head_dim, head_dim);
                        let scores = cx.tape.matmul_nt(qh, kh);
                        let scores = cx.tape.scale(scores, scale);
                        let attn = cx.tape.softmax_last(scores);
                        cx.tape.matmul(attn, vh)
                    };
                    head_outs.push(out);
                }
                q_off += group.heads * head_dim;
            }
            let joined = cx.tape.concat(&head_outs, 1);
            frames.push(cx.tape.reshape(joined, &[1, lp + m, c]));
        }
        let o = cx.tape.concat(&frames, 0);
        let o = blk.proj.apply(cx, o);
        let y = cx.tape.add(x, o);
        let p_out = cx.tape.narrow(y, 1, 0, lp);
        let m_out = cx.tape.narrow(y, 1, lp, m);
        Ok((p_out, m_out))
    }

    /// Feed-forward with a depthwise 3x3 convolution on the pixel tokens
    /// (reshaped to their grid); messengers skip the convolution.
    pub fn dsf_block<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        stage: usize,
        block: usize,
        pixel: Tid,
        msngr: Tid,
        dims: (usize, usize),
    ) -> Result<(Tid, Tid)> {
        let blk = &self.stages[stage].blocks[block];
        let psh = cx.tape.shape(pixel).to_vec();
        let (t, lp, _c) = (psh[0], psh[1], psh[2]);
        let m = cx.tape.shape(msngr)[1];
        if lp != dims.0 * dims.1 {
            return Err(Error::Shape(format!(
                "token count {lp} != grid {}x{}",
                dims.0, dims.1
            )));
        }
        let x = cx.tape.concat(&[pixel, msngr], 1);
        let xn = blk.norm2.apply(cx, x);
        let h1 = blk.fc1.apply(cx, xn);
        let hidden = cx.tape.shape(h1)[2];
        let hp = cx.tape.narrow(h1, 1, 0, lp);
        let grid = cx.tape.reshape(hp, &[t, dims.0, dims.1, hidden]);
        let grid = blk.dw.apply(cx, grid);
        let hp = cx.tape.reshape(grid, &[t, lp, hidden]);
        let hm = cx.tape.narrow(h1, 1, lp, m);
        let h2 = cx.tape.concat(&[hp, hm], 1);
        let a = cx.tape.gelu(h2);
        let o = blk.fc2.apply(cx, a);
        let y = cx.tape.add(x, o);
        let p_out = cx.tape.narrow(y, 1, 0, lp);
        let m_out = cx.tape.narrow(y, 1, lp, m);
        Ok((p_out, m_out))
    }

    /// Run all stages on a `(T, H, W, 3)` clip with `(T, M, C_1)`
    /// messengers; returns per-stage pixel features and final messengers.
    pub fn encode<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        frames: Tid,
        messengers: Tid,
    ) -> Result<(Vec<StageFeature>, Tid)> {
        let fsh = cx.tape.shape(frames).to_vec();
        if fsh.len() != 4 || fsh[3] != 3 {
            return Err(Error::Shape(format!("expected (T,H,W,3) frames, got {fsh:?}")));
        }
        let stride = self.cfg.total_stride();
        if fsh[1] % stride != 0 || fsh[2] % stride != 0 {
            return Err(Error::Shape(format!(
                "frame extent {}x{} not divisible by total stride {stride}",
                fsh[1], fsh[2]
            )));
        }
        let plan = &self.cfg.shift_plan;
        let per_block = self.cfg.shift_per_block;
        let mut grid = frames;
        let mut msngr = messengers;
        let mut feats = Vec::new();
        for (l, stage) in self.stages.iter().enumerate() {
            grid = stage.embed.apply(cx, grid);
            let gsh = cx.tape.shape(grid).to_vec();
            let (t, h, w, c) = (gsh[0], gsh[1], gsh[2], gsh[3]);
            let flat = cx.tape.reshape(grid, &[t, h * w, c]);
            let mut pixel = stage.embed_norm.apply(cx, flat);
            if let Some(mp) = &stage.mproj {
                msngr = mp.apply(cx, msngr);
            }
            // Messengers absorb a frame's evidence while sitting at their
            // home slot and are read by neighbor frames once shifted, so
            // blocks must straddle the shift: a shift undone before the
            // next block runs transports nothing. Default: one shift after
            // the first half of the blocks, inverted at stage exit.
            // Single-block stages have no between-block point and shift
            // nothing.
            let nb = stage.blocks.len();
            let mut pending_back = 0usize;
            for b in 0..nb {
                let shift_here = if per_block {
                    b > 0
                } else {
                    nb > 1 && b == nb / 2
                };
                if shift_here {
                    msngr = tape_shift(cx, msngr, plan, false);
                    pending_back += 1;
                }
                (pixel, msngr) = self.ssa_block(cx, l, b, pixel, msngr, (h, w))?;
                (pixel, msngr) = self.dsf_block(cx, l, b, pixel, msngr, (h, w))?;
            }
            for _ in 0..pending_back {
                msngr = tape_shift(cx, msngr, plan, true);
            }
            feats.push(StageFeature {
                tokens: pixel,
                dims: (h, w),
                channels: c,
            });
            grid = cx.tape.reshape(pixel, &[t, h, w, c]);
        }
        Ok((feats, msngr))
    }
}
