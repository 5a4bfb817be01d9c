//! Messenger-driven decoder: retrieval, projection pyramid, temporal
//! fusion, refinement.
//!
//! Messengers emerging from the encoder query the final-stage pixel
//! features for weather-specific content; pixels then re-query the
//! refined messengers, mapping that content back onto the spatial grid as
//! a residual feature `r`. A top-down pyramid over all stage features
//! turns `r` into a full-resolution residual image that is subtracted
//! from each degraded frame, a three-layer 3-D convolution stack fuses
//! the per-frame recoveries into the target frame, and a small
//! single-frame encoder/decoder refines it. Every emission head is
//! zero-initialized, so a fresh pipeline reproduces the degraded center
//! frame bitwise and training carves residuals away from identity.

use crate::encoder::{Encoder, EncoderConfig, PatchEmbedSpec, StageFeature};
use crate::error::{Error, Result};
use crate::messenger::{ShiftPlan, NUM_GROUPS};
use crate::nn::{Conv2d, Conv3d, Ctx, Init, LayerNorm, Linear, ResConv, Scope};
use crate::scalar::Scalar;
use crate::tape::Tid;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Cross-attention retrieval blocks refining the messengers.
    pub num_blocks: usize,
    /// Pyramid widths, shallowest stage first; length equals the number
    /// of encoder stages.
    pub fusion_channels: Vec<usize>,
    /// Temporal extent of the three fusion convolutions.
    pub temporal_kernel: usize,
    /// Width multiplier (< 1) for the refinement network.
    pub refine_scale: f64,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            num_blocks: 2,
            fusion_channels: vec![16, 32, 64, 128],
            temporal_kernel: 3,
            refine_scale: 0.5,
        }
    }

    pub fn toy() -> Self {
        DecoderConfig {
            num_blocks: 1,
            fusion_channels: vec![8, 16],
            temporal_kernel: 3,
            refine_scale: 0.5,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.fusion_channels.len() != enc.num_stages {
            return Err(Error::Config(format!(
                "fusion_channels has {} entries for {} stages",
                self.fusion_channels.len(),
                enc.num_stages
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.temporal_kernel < 3 || self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel {} must be odd and >= 3",
                self.temporal_kernel
            )));
        }
        if !(self.refine_scale > 0.0 && self.refine_scale <= 1.0) {
            return Err(Error::Config(format!(
                "refine scale {} outside (0, 1]",
                self.refine_scale
            )));
        }
        if self.fusion_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("fusion channels must be positive".into()));
        }
        Ok(())
    }
}

struct CrossAttn {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl CrossAttn {
    fn new<T: Scalar>(sc: &mut Scope<T>, c: usize, proj_init: Init) -> Self {
        let tn = Init::TruncNormal { std: 0.02 };
        CrossAttn {
            norm_q: LayerNorm::new(sc, "norm_q", c),
            norm_kv: LayerNorm::new(sc, "norm_kv", c),
            q: Linear::new(sc, "q", c, c, tn),
            k: Linear::new(sc, "k", c, c, tn),
            v: Linear::new(sc, "v", c, c, tn),
            proj: Linear::new(sc, "proj", c, c, proj_init),
        }
    }

    /// Multi-head cross-attention per frame: `(T, Nq, C)` queries against
    /// `(T, Nk, C)` keys/values.
    fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, q_in: Tid, kv_in: Tid, heads: usize) -> Tid {
        let qsh = cx.tape.shape(q_in).to_vec();
        let ksh = cx.tape.shape(kv_in).to_vec();
        let (t, nq, c) = (qsh[0], qsh[1], qsh[2]);
        let nk = ksh[1];
        let head_dim = c / heads;
        let qn = self.norm_q.apply(cx, q_in);
        let kn = self.norm_kv.apply(cx, kv_in);
        let q_all = self.q.apply(cx, qn);
        let k_all = self.k.apply(cx, kn);
        let v_all = self.v.apply(cx, kn);
        let scale = T::from_f64_(1.0 / (head_dim as f64).sqrt());
        let mut frames = Vec::new();
        for fi in 0..t {
            let qf = cx.tape.narrow(q_all, 0, fi, 1);
            let qf = cx.tape.reshape(qf, &[nq, c]);
            let kf = cx.tape.narrow(k_all, 0, fi, 1);
            let kf = cx.tape.reshape(kf, &[nk, c]);
            let vf = cx.tape.narrow(v_all, 0, fi, 1);
            let vf = cx.tape.reshape(vf, &[nk, c]);
            let mut outs = Vec::new();
            for hh in 0..heads {
                let qh = cx.tape.narrow(qf, 1, hh * head_dim, head_dim);
                let kh = cx.tape.narrow(kf, 1, hh * head_dim, head_dim);
                let vh = cx.tape.narrow(vf, 1, hh * head_dim, head_dim);
                let s = cx.tape.matmul_nt(qh, kh);
                let s = cx.tape.scale(s, scale);
                let a = cx.tape.softmax_last(s);
                outs.push(cx.tape.matmul(a, vh));
            }
            let joined = cx.tape.concat(&outs, 1);
            frames.push(cx.tape.reshape(joined, &[1, nq, c]));
        }
        let o = cx.tape.concat(&frames, 0);
        self.proj.apply(cx, o)
    }
}

struct RetrievalBlock {
    attn: CrossAttn,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    heads: usize,
    blocks: Vec<RetrievalBlock>,
    pixattn: CrossAttn,
    fuse: Vec<ResConv>,
    post: Vec<ResConv>,
    head: Conv2d,
    tf: [Conv3d; 3],
    /// Test hook: zero one messenger group before retrieval.
    pub mask_group: Option<usize>,
}

impl Decoder {
    /// Parameters under the caller's scope (rooted at `decoder`):
    /// `block{b}.*`, `pixattn.*`, `fuse{l}.*`, `up{1,2}.*`, `head.*`,
    /// `fusion.conv{1..3}.*`.
    pub fn new<T: Scalar>(
        sc: &mut Scope<T>,
        enc: &EncoderConfig,
        cfg: DecoderConfig,
    ) -> Result<Self> {
        cfg.validate(enc)?;
        let tn = Init::TruncNormal { std: 0.02 };
        let n = enc.num_stages;
        let c_last = *enc.channels.last().expect("stages present");
        let heads = *enc.heads.last().expect("stages present");
        let mut blocks = Vec::new();
        for b in 0..cfg.num_blocks {
            let mut bs = sc.sub(&format!("block{b}"));
            blocks.push(RetrievalBlock {
                attn: CrossAttn::new(&mut bs, c_last, tn),
                norm2: LayerNorm::new(&mut bs, "norm2", c_last),
                fc1: Linear::new(&mut bs, "fc1", c_last, 2 * c_last, tn),
                fc2: Linear::new(&mut bs, "fc2", 2 * c_last, c_last, tn),
            });
        }
        let pixattn = {
            let mut ps = sc.sub("pixattn");
            CrossAttn::new(&mut ps, c_last, Init::Zeros)
        };
        // fuse[0] joins r with the deepest stage; fuse[i] joins the
        // upsampled path with stage n-i
        let mut fuse = Vec::new();
        for i in 0..n {
            let stage = n - i; // 1-indexed stage being fused
            let cin = if i == 0 {
                2 * c_last
            } else {
                cfg.fusion_channels[stage] + enc.channels[stage - 1]
            };
            fuse.push(ResConv::new(
                sc,
                &format!("fuse{stage}"),
                cin,
                cfg.fusion_channels[stage - 1],
            ));
        }
        let c0 = cfg.fusion_channels[0];
        let post = vec![
            ResConv::new(sc, "up1", c0, c0),
            ResConv::new(sc, "up2", c0, c0),
        ];
        let head = Conv2d::new(sc, "head", c0, 3, 3, 1, 1, Init::Zeros);
        let tf = {
            let mut fs = sc.sub("fusion");
            let kt = cfg.temporal_kernel;
            [
                Conv3d::new(&mut fs, "conv1", 3, 16, kt, 3, Init::KaimingUniform),
                Conv3d::new(&mut fs, "conv2", 16, 16, kt, 3, Init::KaimingUniform),
                Conv3d::new(&mut fs, "conv3", 16, 3, kt, 3, Init::Zeros),
            ]
        };
        Ok(Decoder {
            cfg,
            heads,
            blocks,
            pixattn,
            fuse,
            post,
            head,
            tf,
            mask_group: None,
        })
    }

    /// Messengers query pixels, pixels re-query the refined messengers;
    /// the zero-initialized output projection makes `r = 0` at init.
    pub fn retrieve<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        f_last: &StageFeature,
        messengers: Tid,
    ) -> Result<Tid> {
        let fsh = cx.tape.shape(f_last.tokens).to_vec();
        let msh = cx.tape.shape(messengers).to_vec();
        if fsh[2] != msh[2] || fsh[0] != msh[0] {
            return Err(Error::Shape(format!(
                "pixel tokens {fsh:?} and messengers {msh:?} disagree"
            )));
        }
        let mut m = messengers;
        if let Some(g) = self.mask_group {
            let total = msh[1];
            if g >= NUM_GROUPS || total % NUM_GROUPS != 0 {
                return Err(Error::Config(format!("cannot mask group {g} of {total}")));
            }
            let gsize = total / NUM_GROUPS;
            let zeros = cx
                .tape
                .constant(ArrayD::zeros(IxDyn(&[msh[0], gsize, msh[2]])));
            let mut parts = Vec::new();
            if g > 0 {
                parts.push(cx.tape.narrow(m, 1, 0, g * gsize));
            }
            parts.push(zeros);
            if (g + 1) * gsize < total {
                parts.push(cx.tape.narrow(m, 1, (g + 1) * gsize, total - (g + 1) * gsize));
            }
            m = cx.tape.concat(&parts, 1);
        }
        for blk in &self.blocks {
            let a = blk.attn.apply(cx, m, f_last.tokens, self.heads);
            m = cx.tape.add(m, a);
            let hn = blk.norm2.apply(cx, m);
            let h = blk.fc1.apply(cx, hn);
            let h = cx.tape.gelu(h);
            let h = blk.fc2.apply(cx, h);
            m = cx.tape.add(m, h);
        }
        Ok(self.pixattn.apply(cx, f_last.tokens, m, self.heads))
    }

    /// Top-down pyramid over all stage features starting from `r`,
    /// emitting a residual image per frame; recovery = clamp(I - R, 0, 1).
    pub fn project_and_subtract<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        r: Tid,
        feats: &[StageFeature],
        frames: Tid,
    ) -> Result<Tid> {
        let n = feats.len();
        if n != self.fuse.len() {
            return Err(Error::Shape(format!(
                "{n} stage features for a {}-level pyramid",
                self.fuse.len()
            )));
        }
        let deep = &feats[n - 1];
        let (h, w) = deep.dims;
        let t = cx.tape.shape(frames)[0];
        let rsh = cx.tape.shape(r).to_vec();
        if rsh != [t, h * w, deep.channels] {
            return Err(Error::Shape(format!(
                "retrieved feature {rsh:?} does not match deepest stage ({t}, {}, {})",
                h * w,
                deep.channels
            )));
        }
        let to_grid = |cx: &mut Ctx<T>, f: &StageFeature| {
            cx.tape
                .reshape(f.tokens, &[t, f.dims.0, f.dims.1, f.channels])
        };
        let r_grid = cx.tape.reshape(r, &[t, h, w, deep.channels]);
        let deep_grid = to_grid(cx, deep);
        let joined = cx.tape.concat(&[r_grid, deep_grid], 3);
        let mut x = self.fuse[0].apply(cx, joined);
        for i in 1..n {
            x = cx.tape.upsample2(x);
            let skip = &feats[n - 1 - i];
            let xsh = cx.tape.shape(x).to_vec();
            if (xsh[1], xsh[2]) != skip.dims {
                return Err(Error::Shape(format!(
                    "pyramid level at {}x{} but stage {} is {}x{}",
                    xsh[1],
                    xsh[2],
                    n - i,
                    skip.dims.0,
                    skip.dims.1
                )));
            }
            let sg = to_grid(cx, skip);
            let joined = cx.tape.concat(&[x, sg], 3);
            x = self.fuse[i].apply(cx, joined);
        }
        for p in &self.post {
            x = cx.tape.upsample2(x);
            x = p.apply(cx, x);
        }
        let residual = self.head.apply(cx, x);
        let fsh = cx.tape.shape(frames).to_vec();
        let osh = cx.tape.shape(residual).to_vec();
        if fsh != osh {
            return Err(Error::Shape(format!(
                "residual {osh:?} does not match frames {fsh:?}"
            )));
        }
        let diff = cx.tape.sub(frames, residual);
        Ok(cx.tape.clamp01(diff))
    }

    /// Three 3-D convolutions over the recovery stack; the zero-initialized
    /// last layer makes this a pass-through of the center frame at init.
    pub fn temporal_fusion<T: Scalar>(&self, cx: &mut Ctx<T>, recoveries: Tid) -> Result<Tid> {
        let sh = cx.tape.shape(recoveries).to_vec();
        let t = sh[0];
        if t < self.cfg.temporal_kernel {
            return Err(Error::Config(format!(
                "temporal fusion needs >= {} frames, got {t}",
                self.cfg.temporal_kernel
            )));
        }
        let h = self.tf[0].apply(cx, recoveries);
        let h = cx.tape.gelu(h);
        let h = self.tf[1].apply(cx, h);
        let h = cx.tape.gelu(h);
        let s = self.tf[2].apply(cx, h);
        let center = t / 2;
        let rc = cx.tape.narrow(recoveries, 0, center, 1);
        let sc = cx.tape.narrow(s, 0, center, 1);
        let fused = cx.tape.add(rc, sc);
        Ok(cx.tape.reshape(fused, &[sh[1], sh[2], 3]))
    }
}

/// Single-frame refinement: a 2-stage messenger-free encoder and a small
/// projection pyramid at `refine_scale` width; emits a residual over the
/// fused frame, clamped to [0,1].
pub struct RefineNet {
    enc: Encoder,
    fuse_deep: ResConv,
    fuse_skip: ResConv,
    post: Vec<ResConv>,
    head: Conv2d,
    msg_width: usize,
}

fn scaled_width(c: usize, scale: f64) -> usize {
    let mut w = ((c as f64 * scale).round() as usize).max(4);
    if w % 2 == 1 {
        w += 1;
    }
    w
}

impl RefineNet {
    pub fn new<T: Scalar>(sc: &mut Scope<T>, main: &EncoderConfig, scale: f64) -> Result<Self> {
        if main.num_stages < 2 {
            return Err(Error::Config(
                "refinement needs a main encoder with >= 2 stages".into(),
            ));
        }
        let c1 = scaled_width(main.channels[0], scale);
        let c2 = scaled_width(main.channels[1], scale).max(c1 + 2);
        let cfg = EncoderConfig {
            num_stages: 2,
            blocks_per_stage: vec![1, 1],
            channels: vec![c1, c2],
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
            shift_plan: ShiftPlan::identity(),
            shift_per_block: false,
        };
        let mut enc = {
            let mut es = sc.sub("encoder");
            Encoder::new(&mut es, cfg)?
        };
        enc.hooks.mask_messengers = true;
        let fuse_deep = ResConv::new(sc, "fuse2", c2, c2);
        let fuse_skip = ResConv::new(sc, "fuse1", c2 + c1, c1);
        let post = vec![
            ResConv::new(sc, "up1", c1, c1),
            ResConv::new(sc, "up2", c1, c1),
        ];
        let head = Conv2d::new(sc, "head", c1, 3, 3, 1, 1, Init::Zeros);
        Ok(RefineNet {
            enc,
            fuse_deep,
            fuse_skip,
            post,
            head,
            msg_width: c1,
        })
    }

    /// `(H, W, 3)` fused frame in, `(H, W, 3)` refined frame in [0,1] out.
    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, frame: Tid) -> Result<Tid> {
        let sh = cx.tape.shape(frame).to_vec();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::Shape(format!("expected (H,W,3) frame, got {sh:?}")));
        }
        let (h, w) = (sh[0], sh[1]);
        let clip = cx.tape.reshape(frame, &[1, h, w, 3]);
        let empty_msg = cx
            .tape
            .constant(ArrayD::zeros(IxDyn(&[1, 0, self.msg_width])));
        let (feats, _) = self.enc.encode(cx, clip, empty_msg)?;
        let f2 = &feats[1];
        let f1 = &feats[0];
        let f2g = cx
            .tape
            .reshape(f2.tokens, &[1, f2.dims.0, f2.dims.1, f2.channels]);
        let mut x = self.fuse_deep.apply(cx, f2g);
        x = cx.tape.upsample2(x);
        let f1g = cx
            .tape
            .reshape(f1.tokens, &[1, f1.dims.0, f1.dims.1, f1.channels]);
        let joined = cx.tape.concat(&[x, f1g], 3);
        x = self.fuse_skip.apply(cx, joined);
        for p in &self.post {
            x = cx.tape.upsample2(x);
            x = p.apply(cx, x);
        }
        let residual = self.head.apply(cx, x);
        let out = cx.tape.add(clip, residual);
        let out = cx.tape.clamp01(out);
        Ok(cx.tape.reshape(out, &[h, w, 3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::check_grad;
    use crate::messenger::init_messenger_values;
    use crate::nn::{data_leaf, ParamStore};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Rig {
        store: ParamStore<f64>,
        enc: Encoder,
        dec: Decoder,
    }

    fn rig(seed: u64) -> Rig {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scope = Scope::new(&mut store, &mut rng);
        let enc_cfg = EncoderConfig::toy();
        let enc = {
            let mut es = scope.sub("encoder");
            Encoder::new(&mut es, enc_cfg.clone()).unwrap()
        };
        let dec = {
            let mut ds = scope.sub("decoder");
            Decoder::new(&mut ds, &enc_cfg, DecoderConfig::toy()).unwrap()
        };
        Rig { store, enc, dec }
    }

    fn random_clip(t: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[t, h, w, 3]), || rng.gen_range(0.0..1.0))
    }

    fn msgs(t: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_messenger_values::<f64>(t, 6, 8, &mut rng).unwrap()
    }

    fn randomize(store: &mut ParamStore<f64>, name: &str, seed: u64) {
        let id = store.id(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.value_mut(id).iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }

    #[test]
    fn retrieve_is_zero_at_init_with_correct_shape() {
        let r = rig(1);
        let mut cx = Ctx::new(&r.store);
        let f = data_leaf(&mut cx, random_clip(3, 16, 16, 2));
        let m = cx.tape.constant(msgs(3, 3));
        let (feats, mf) = r.enc.encode(&mut cx, f, m).unwrap();
        let rt = r.dec.retrieve(&mut cx, &feats[1], mf).unwrap();
        assert_eq!(cx.tape.shape(rt), &[3, 4, 16]);
        assert!(cx.tape.value(rt).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masking_a_messenger_group_changes_r() {
        let mut r = rig(4);
        randomize(&mut r.store, "decoder.pixattn.proj.w", 5);
        let run = |dec: &Decoder, store: &ParamStore<f64>| {
            let mut cx = Ctx::new(store);
            let f = data_leaf(&mut cx, random_clip(3, 16, 16, 6));
            let m = cx.tape.constant(msgs(3, 7));
            let (feats, mf) = r.enc.encode(&mut cx, f, m).unwrap();
            let rt = dec.retrieve(&mut cx, &feats[1], mf).unwrap();
            cx.tape.value(rt).clone()
        };
        let plain = run(&r.dec, &r.store);
        let mut masked_dec = r.dec;
        masked_dec.mask_group = Some(2);
        let masked = run(&masked_dec, &r.store);
        let diff = plain
            .iter()
            .zip(masked.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "masking a live group must change r");
    }

    #[test]
    fn zero_head_recovers_frames_bitwise() {
        let r = rig(8);
        let clip = random_clip(3, 16, 16, 9);
        let mut cx = Ctx::new(&r.store);
        let f = data_leaf(&mut cx, clip.clone());
        let m = cx.tape.constant(msgs(3, 10));
        let (feats, mf) = r.enc.encode(&mut cx, f, m).unwrap();
        let rt = r.dec.retrieve(&mut cx, &feats[1], mf).unwrap();
        let rec = r.dec.project_and_subtract(&mut cx, rt, &feats, f).unwrap();
        assert_eq!(cx.tape.shape(rec), &[3, 16, 16, 3]);
        assert_eq!(cx.tape.value(rec), &clip);
    }

    #[test]
    fn recovery_gradient_wrt_r_matches_fd() {
        let mut r = rig(11);
        // live head and pyramid path
        randomize(&mut r.store, "decoder.head.w", 12);
        randomize(&mut r.store, "decoder.head.b", 13);
        let clip = random_clip(2, 16, 16, 14);
        let mut cx0 = Ctx::new(&r.store);
        let f = data_leaf(&mut cx0, clip.clone());
        let m = cx0.tape.constant(msgs(2, 15));
        let (feats0, _) = r.enc.encode(&mut cx0, f, m).unwrap();
        let feat_vals: Vec<(ArrayD<f64>, (usize, usize), usize)> = feats0
            .iter()
            .map(|s| (cx0.tape.value(s.tokens).clone(), s.dims, s.channels))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 4, 16]), || rng.gen_range(-0.5..0.5));
        let f_eval = |rv: &ArrayD<f64>| {
            let mut cx = Ctx::new(&r.store);
            let frames = data_leaf(&mut cx, clip.clone());
            let feats: Vec<StageFeature> = feat_vals
                .iter()
                .map(|(v, dims, ch)| StageFeature {
                    tokens: cx.tape.constant(v.clone()),
                    dims: *dims,
                    channels: *ch,
                })
                .collect();
            let rt = cx.tape.leaf(rv.clone(), true);
            let rec = r
                .dec
                .project_and_subtract(&mut cx, rt, &feats, frames)
                .unwrap();
            let l = cx.tape.mean_all(rec);
            cx.tape.backward(l);
            (cx.tape.value(l)[[]], cx.tape.grad(rt).unwrap().clone())
        };
        let (_, g) = f_eval(&r0);
        check_grad(|x| f_eval(x).0, &r0, &g, 1e-5, 1e-3, 1e-8, Some(32));
    }

    #[test]
    fn fusion_is_center_passthrough_at_init() {
        let r = rig(17);
        let clip = random_clip(5, 8, 8, 18);
        let mut cx = Ctx::new(&r.store);
        let rec = data_leaf(&mut cx, clip.clone());
        let fused = r.dec.temporal_fusion(&mut cx, rec).unwrap();
        assert_eq!(cx.tape.shape(fused), &[8, 8, 3]);
        let want = clip.slice(ndarray::s![2, .., .., ..]).to_owned();
        assert_eq!(
            cx.tape.value(fused).view().into_dimensionality::<ndarray::Ix3>().unwrap(),
            want
        );
    }

    #[test]
    fn fusion_rejects_short_clips() {
        let r = rig(19);
        let mut cx = Ctx::new(&r.store);
        let rec = data_leaf(&mut cx, random_clip(2, 8, 8, 20));
        assert!(matches!(
            r.dec.temporal_fusion(&mut cx, rec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fusion_receptive_field_is_three_frames_each_way() {
        let mut r = rig(21);
        randomize(&mut r.store, "decoder.fusion.conv3.w", 22);
        randomize(&mut r.store, "decoder.fusion.conv3.b", 23);
        let base = random_clip(9, 8, 8, 24);
        let run = |clip: &ArrayD<f64>| {
            let mut cx = Ctx::new(&r.store);
            let rec = data_leaf(&mut cx, clip.clone());
            let fused = r.dec.temporal_fusion(&mut cx, rec).unwrap();
            cx.tape.value(fused).clone()
        };
        let center = run(&base);
        // frames 0 and 8 are 4 steps from the center, outside the stacked
        // kernel reach of 3
        let mut far = base.clone();
        far.slice_mut(ndarray::s![0, .., .., ..]).fill(0.0);
        far.slice_mut(ndarray::s![8, .., .., ..]).fill(0.0);
        assert_eq!(run(&far), center);
        // frame 1 is exactly 3 steps away and inside the reach
        let mut near = base.clone();
        near.slice_mut(ndarray::s![1, .., .., ..]).fill(0.0);
        assert_ne!(run(&near), center);
    }

    #[test]
    fn refine_identity_at_init_and_clamped_after() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut scope = Scope::new(&mut store, &mut rng);
        let refine = {
            let mut rs = scope.sub("refine");
            RefineNet::new(&mut rs, &EncoderConfig::toy(), 0.5).unwrap()
        };
        let frame = random_clip(1, 16, 16, 26)
            .into_shape_with_order(IxDyn(&[16, 16, 3]))
            .unwrap();
        let mut cx = Ctx::new(&store);
        let ft = data_leaf(&mut cx, frame.clone());
        let out = refine.apply(&mut cx, ft).unwrap();
        assert_eq!(cx.tape.value(out), &frame);

        randomize(&mut store, "refine.head.w", 27);
        randomize(&mut store, "refine.head.b", 28);
        let mut cx = Ctx::new(&store);
        let ft = data_leaf(&mut cx, frame.clone());
        let out = refine.apply(&mut cx, ft).unwrap();
        let ov = cx.tape.value(out);
        assert!(ov.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(ov, &frame);
    }

    #[test]
    fn dual_attention_gradcheck() {
        let mut r = rig(29);
        randomize(&mut r.store, "decoder.pixattn.proj.w", 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 4, 16]), || rng.gen_range(-0.5..0.5));
        let m0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 6, 16]), || rng.gen_range(-0.5..0.5));
        let f_eval = |mv: &ArrayD<f64>| {
            let mut cx = Ctx::new(&r.store);
            let ft = cx.tape.constant(f0.clone());
            let feat = StageFeature {
                tokens: ft,
                dims: (2, 2),
                channels: 16,
            };
            let mt = cx.tape.leaf(mv.clone(), true);
            let rt = r.dec.retrieve(&mut cx, &feat, mt).unwrap();
            let l = cx.tape.mean_all(rt);
            cx.tape.backward(l);
            (cx.tape.value(l)[[]], cx.tape.grad(mt).unwrap().clone())
        };
        let (_, g) = f_eval(&m0);
        check_grad(|x| f_eval(x).0, &m0, &g, 1e-5, 1e-3, 1e-8, None);
    }
}
