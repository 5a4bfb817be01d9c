//! Weather-suppression adversarial branch.
//!
//! A weather discriminator reads encoder pixel features through a
//! gradient reversal layer: its own parameters minimize classification
//! cross-entropy while the encoder, receiving the gradient scaled by
//! -lambda, learns features the discriminator cannot classify. Frame
//! descriptors are pooled over time with gated attention before a single
//! affine classifier.

use crate::data::NUM_WEATHERS;
use crate::encoder::{EncoderConfig, StageFeature};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId, Scope};
use crate::scalar::Scalar;
use crate::tape::Tid;
use serde::{Deserialize, Serialize};

/// λ(p) = 2/(1+exp(-10p)) - 1, the adaptation factor ramp; p outside
/// [0,1] is clamped with a warning.
pub fn lambda_schedule(p: f64) -> f64 {
    let pc = p.clamp(0.0, 1.0);
    if pc != p {
        log::warn!("lambda schedule progress {p} outside [0,1], clamped to {pc}");
    }
    2.0 / (1.0 + (-10.0 * pc).exp()) - 1.0
}

/// Training progress counter owned by the harness; λ follows the ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvState {
    pub iteration: usize,
    pub total_iterations: usize,
}

impl AdvState {
    pub fn lambda(&self) -> f64 {
        if self.total_iterations == 0 {
            return 0.0;
        }
        lambda_schedule(self.iteration as f64 / self.total_iterations as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Encoder stages (1-indexed) whose pixel features the discriminator
    /// sees; messengers are never included.
    pub adv_taps: Vec<usize>,
    /// Frame descriptor width D_v.
    pub descriptor_dim: usize,
    /// Gated attention hidden width D_a.
    pub attn_dim: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            adv_taps: vec![4],
            descriptor_dim: 128,
            attn_dim: 64,
        }
    }

    pub fn toy() -> Self {
        DiscriminatorConfig {
            adv_taps: vec![2],
            descriptor_dim: 16,
            attn_dim: 8,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.adv_taps.is_empty() {
            return Err(Error::Config("adv_taps must name at least one stage".into()));
        }
        let mut prev = 0;
        for &t in &self.adv_taps {
            if t == 0 || t > enc.num_stages {
                return Err(Error::Config(format!(
                    "adv tap {t} outside stages 1..={}",
                    enc.num_stages
                )));
            }
            if t <= prev {
                return Err(Error::Config("adv_taps must be strictly increasing".into()));
            }
            prev = t;
        }
        if self.descriptor_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    desc: Linear,
    w1: ParamId,
    w2: ParamId,
    w3: ParamId,
    head: Linear,
}

impl Discriminator {
    /// Parameters live under the caller's scope (rooted at
    /// `discriminator`): `desc.*`, `pool.w1..w3`, `head.*`.
    pub fn new<T: Scalar>(
        sc: &mut Scope<T>,
        enc: &EncoderConfig,
        cfg: DiscriminatorConfig,
    ) -> Result<Self> {
        cfg.validate(enc)?;
        let tn = Init::TruncNormal { std: 0.02 };
        let sum_c: usize = cfg.adv_taps.iter().map(|&t| enc.channels[t - 1]).sum();
        let (dv, da) = (cfg.descriptor_dim, cfg.attn_dim);
        let desc = Linear::new(sc, "desc", sum_c, dv, tn);
        let mut ps = sc.sub("pool");
        let w1 = ps.param("w1", &[da, 1], tn);
        let w2 = ps.param("w2", &[dv, da], tn);
        let w3 = ps.param("w3", &[dv, da], tn);
        let head = Linear::new(sc, "head", dv, NUM_WEATHERS, tn);
        Ok(Discriminator {
            cfg,
            desc,
            w1,
            w2,
            w3,
            head,
        })
    }

    /// Per-frame descriptors `(T, D_v)`: spatial mean of each tapped
    /// stage's pixel tokens, concatenated over taps, then projected. The
    /// gradient reversal happens on the raw features, upstream of every
    /// discriminator parameter.
    pub fn frame_descriptors<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        feats: &[StageFeature],
        lambda: T,
    ) -> Result<Tid> {
        for &t in &self.cfg.adv_taps {
            if t > feats.len() {
                return Err(Error::Shape(format!(
                    "adv tap {t} but encoder produced {} stages",
                    feats.len()
                )));
            }
        }
        let t_len = cx.tape.shape(feats[0].tokens)[0];
        let mut per_tap = Vec::new();
        for &tap in &self.cfg.adv_taps {
            let f = &feats[tap - 1];
            let rev = cx.tape.grl(f.tokens, lambda);
            let sh = cx.tape.shape(rev).to_vec();
            let (l, c) = (sh[1], sh[2]);
            let mut rows = Vec::new();
            for fi in 0..t_len {
                let fr = cx.tape.narrow(rev, 0, fi, 1);
                let fr = cx.tape.reshape(fr, &[l, c]);
                let m = cx.tape.mean_rows(fr);
                rows.push(cx.tape.reshape(m, &[1, c]));
            }
            per_tap.push(cx.tape.concat(&rows, 0));
        }
        let joined = cx.tape.concat(&per_tap, 1);
        Ok(self.desc.apply(cx, joined))
    }

    /// Gated attention over frames: α_i ∝ exp(w1ᵀ(tanh(w2 v_i) ⊙
    /// sigm(w3 v_i))), pooled = Σ α_i v_i. Returns (pooled `(D_v)`,
    /// α `(T)`).
    pub fn gated_attention_pool<T: Scalar>(&self, cx: &mut Ctx<T>, v: Tid) -> (Tid, Tid) {
        let sh = cx.tape.shape(v).to_vec();
        let t_len = sh[0];
        let w1 = cx.p(self.w1);
        let w2 = cx.p(self.w2);
        let w3 = cx.p(self.w3);
        let h2 = cx.tape.matmul(v, w2);
        let h2 = cx.tape.tanh_act(h2);
        let h3 = cx.tape.matmul(v, w3);
        let h3 = cx.tape.sigmoid(h3);
        let gated = cx.tape.mul(h2, h3);
        let scores = cx.tape.matmul(gated, w1);
        let scores = cx.tape.reshape(scores, &[1, t_len]);
        let alphas = cx.tape.softmax_last(scores);
        let alphas = cx.tape.reshape(alphas, &[t_len]);
        let pooled = cx.tape.weighted_sum_rows(v, alphas);
        (pooled, alphas)
    }

    /// Single affine map from the pooled descriptor to weather logits.
    pub fn classify<T: Scalar>(&self, cx: &mut Ctx<T>, pooled: Tid) -> Tid {
        self.head.apply(cx, pooled)
    }

    /// Full branch: features -> GRL -> descriptors -> pool -> logits `(3)`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        feats: &[StageFeature],
        lambda: T,
    ) -> Result<Tid> {
        let v = self.frame_descriptors(cx, feats, lambda)?;
        let (pooled, _) = self.gated_attention_pool(cx, v);
        Ok(self.classify(cx, pooled))
    }
}

/// Cross-entropy of weather logits against the clip's label; the min-max
/// game is realized structurally by the reversal layer.
pub fn adversarial_loss<T: Scalar>(cx: &mut Ctx<T>, logits: Tid, label: usize) -> Tid {
    cx.tape.cross_entropy_logits(logits, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::messenger::init_messenger_values;
    use crate::nn::{data_leaf, ParamStore};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_endpoints_and_monotonicity() {
        assert_eq!(lambda_schedule(0.0), 0.0);
        assert!((lambda_schedule(0.5) - 0.986614).abs() < 1e-6);
        assert!((lambda_schedule(1.0) - 0.999909).abs() < 1e-6);
        let mut prev = -1.0;
        for i in 0..=100 {
            let l = lambda_schedule(i as f64 / 100.0);
            assert!(l > prev);
            prev = l;
        }
        // out-of-range progress clamps to the endpoints
        assert_eq!(lambda_schedule(-0.5), 0.0);
        assert_eq!(lambda_schedule(1.5), lambda_schedule(1.0));
    }

    #[test]
    fn adv_state_lambda() {
        let s = AdvState {
            iteration: 50,
            total_iterations: 100,
        };
        assert!((s.lambda() - lambda_schedule(0.5)).abs() < 1e-15);
        let z = AdvState {
            iteration: 0,
            total_iterations: 0,
        };
        assert_eq!(z.lambda(), 0.0);
    }

    fn toy_setup(seed: u64) -> (ParamStore<f64>, Encoder, Discriminator) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scope = Scope::new(&mut store, &mut rng);
        let enc_cfg = EncoderConfig::toy();
        let enc = {
            let mut es = scope.sub("encoder");
            Encoder::new(&mut es, enc_cfg.clone()).unwrap()
        };
        let disc = {
            let mut ds = scope.sub("discriminator");
            Discriminator::new(&mut ds, &enc_cfg, DiscriminatorConfig::toy()).unwrap()
        };
        (store, enc, disc)
    }

    #[test]
    fn pooled_alphas_sum_to_one_and_symmetric_inputs_average() {
        let (store, _, disc) = toy_setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = ArrayD::from_shape_simple_fn(IxDyn(&[5, 16]), || rng.gen_range(-1.0..1.0));
        let mut cx = Ctx::new(&store);
        let vt = data_leaf(&mut cx, v.clone());
        let (_, alphas) = disc.gated_attention_pool(&mut cx, vt);
        let a = cx.tape.value(alphas).clone();
        assert!((a.iter().copied().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(a.iter().all(|&x| x > 0.0));

        // identical frame descriptors: alphas 1/T, pooled == the row
        let row: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.5).collect();
        let same = ArrayD::from_shape_fn(IxDyn(&[4, 16]), |ix| row[ix[1]]);
        let mut cx = Ctx::new(&store);
        let vt = data_leaf(&mut cx, same);
        let (pooled, alphas) = disc.gated_attention_pool(&mut cx, vt);
        for &a in cx.tape.value(alphas).iter() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        for (j, &p) in cx.tape.value(pooled).iter().enumerate() {
            assert!((p - row[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_matches_hand_computation_and_permutation_invariance() {
        // T=2, D_v=2, D_a=2 with hand-set parameters, evaluated by scalar
        // arithmetic
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scope = Scope::new(&mut store, &mut rng);
        let enc_cfg = EncoderConfig::toy();
        let mut cfg = DiscriminatorConfig::toy();
        cfg.descriptor_dim = 2;
        cfg.attn_dim = 2;
        let disc = {
            let mut ds = scope.sub("discriminator");
            Discriminator::new(&mut ds, &enc_cfg, cfg).unwrap()
        };
        let set = |store: &mut ParamStore<f64>, name: &str, vals: &[f64], shape: &[usize]| {
            let id = store.id(name).unwrap();
            *store.value_mut(id) = ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap();
        };
        set(&mut store, "discriminator.pool.w1", &[0.7, -0.3], &[2, 1]);
        set(
            &mut store,
            "discriminator.pool.w2",
            &[0.5, -0.2, 0.1, 0.4],
            &[2, 2],
        );
        set(
            &mut store,
            "discriminator.pool.w3",
            &[-0.6, 0.2, 0.3, -0.1],
            &[2, 2],
        );
        let v = [[0.8, -0.4], [-0.2, 0.9]];
        let vt_arr =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.8, -0.4, -0.2, 0.9]).unwrap();
        let mut cx = Ctx::new(&store);
        let vt = data_leaf(&mut cx, vt_arr.clone());
        let (pooled, alphas) = disc.gated_attention_pool(&mut cx, vt);
        let av = cx.tape.value(alphas).clone();
        let pv = cx.tape.value(pooled).clone();

        let sigm = |x: f64| 1.0 / (1.0 + (-x).exp());
        let score = |vi: [f64; 2]| {
            let h2 = [
                (vi[0] * 0.5 + vi[1] * 0.1).tanh(),
                (vi[0] * -0.2 + vi[1] * 0.4).tanh(),
            ];
            let h3 = [
                sigm(vi[0] * -0.6 + vi[1] * 0.3),
                sigm(vi[0] * 0.2 + vi[1] * -0.1),
            ];
            0.7 * h2[0] * h3[0] + -0.3 * h2[1] * h3[1]
        };
        let (s0, s1) = (score(v[0]), score(v[1]));
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let a0 = e0 / (e0 + e1);
        let a1 = e1 / (e0 + e1);
        assert!((av[[0]] - a0).abs() < 1e-12);
        assert!((av[[1]] - a1).abs() < 1e-12);
        for j in 0..2 {
            let want = a0 * v[0][j] + a1 * v[1][j];
            assert!((pv[[j]] - want).abs() < 1e-12);
        }

        // swapping the two frames permutes alphas and leaves the pooled
        // vector bitwise unchanged
        let swapped =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![-0.2, 0.9, 0.8, -0.4]).unwrap();
        let mut cx2 = Ctx::new(&store);
        let vt2 = data_leaf(&mut cx2, swapped);
        let (pooled2, alphas2) = disc.gated_attention_pool(&mut cx2, vt2);
        let av2 = cx2.tape.value(alphas2).clone();
        assert_eq!(av[[0]], av2[[1]]);
        assert_eq!(av[[1]], av2[[0]]);
        assert_eq!(cx.tape.value(pooled), cx2.tape.value(pooled2));

        // finite differences through the whole pool
        let f = |x: &ndarray::ArrayD<f64>| {
            let mut cx = Ctx::new(&store);
            let vt = cx.tape.leaf(x.clone(), true);
            let (pooled, _) = disc.gated_attention_pool(&mut cx, vt);
            let l = cx.tape.mean_all(pooled);
            cx.tape.backward(l);
            (cx.tape.value(l)[[]], cx.tape.grad(vt).unwrap().clone())
        };
        let (_, g) = f(&vt_arr);
        crate::check::check_grad(|x| f(x).0, &vt_arr, &g, 1e-6, 1e-6, 1e-10, None);
    }

    #[test]
    fn descriptors_constant_feature_is_projected_mean() {
        let (mut store, _, disc) = toy_setup(4);
        // zero projection weights, bias beta: descriptors equal beta
        let wid = store.id("discriminator.desc.w").unwrap();
        store.value_mut(wid).fill(0.0);
        let bid = store.id("discriminator.desc.b").unwrap();
        let beta = ArrayD::from_shape_fn(IxDyn(&[16]), |ix| ix[0] as f64 * 0.01);
        *store.value_mut(bid) = beta.clone();
        let mut cx = Ctx::new(&store);
        let toks = data_leaf(
            &mut cx,
            ArrayD::from_shape_fn(IxDyn(&[3, 4, 16]), |ix| ix[2] as f64),
        );
        let feats = vec![
            StageFeature {
                tokens: toks,
                dims: (2, 2),
                channels: 16,
            },
            StageFeature {
                tokens: toks,
                dims: (2, 2),
                channels: 16,
            },
        ];
        let v = disc.frame_descriptors(&mut cx, &feats, 1.0).unwrap();
        for (ix, &x) in cx.tape.value(v).indexed_iter() {
            assert_eq!(x, beta[[ix[1]]]);
        }

        // with real weights, permuting spatial tokens leaves v_i unchanged
        let (store, _, disc) = toy_setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 16]), || rng.gen_range(-1.0..1.0));
        let mut perm = base.clone();
        for fi in 0..3 {
            for c in 0..16 {
                perm[[fi, 0, c]] = base[[fi, 3, c]];
                perm[[fi, 3, c]] = base[[fi, 0, c]];
            }
        }
        let run = |arr: &ArrayD<f64>| {
            let mut cx = Ctx::new(&store);
            let t = data_leaf(&mut cx, arr.clone());
            let feats = vec![
                StageFeature {
                    tokens: t,
                    dims: (2, 2),
                    channels: 16,
                },
                StageFeature {
                    tokens: t,
                    dims: (2, 2),
                    channels: 16,
                },
            ];
            let v = disc.frame_descriptors(&mut cx, &feats, 1.0).unwrap();
            cx.tape.value(v).clone()
        };
        let (va, vb) = (run(&base), run(&perm));
        for (a, b) in va.iter().zip(vb.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_zero_weights_yield_bias_logits() {
        let (mut store, _, disc) = toy_setup(7);
        let wid = store.id("discriminator.head.w").unwrap();
        store.value_mut(wid).fill(0.0);
        let bid = store.id("discriminator.head.b").unwrap();
        *store.value_mut(bid) =
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.1, 0.7]).unwrap();
        let mut cx = Ctx::new(&store);
        let pooled = data_leaf(
            &mut cx,
            ArrayD::from_shape_simple_fn(IxDyn(&[16]), || 0.25),
        );
        let logits = disc.classify(&mut cx, pooled);
        assert_eq!(cx.tape.shape(logits), &[3]);
        let lv = cx.tape.value(logits);
        assert_eq!(lv[[0]], 0.3);
        assert_eq!(lv[[1]], -0.1);
        assert_eq!(lv[[2]], 0.7);
    }

    #[test]
    fn adversarial_loss_oracle_values() {
        let store = ParamStore::<f64>::new();
        let mut cx = Ctx::new(&store);
        let uniform = data_leaf(&mut cx, ArrayD::from_elem(IxDyn(&[3]), 0.4));
        let l = adversarial_loss(&mut cx, uniform, 1);
        assert!((cx.tape.value(l)[[]] - 3.0f64.ln()).abs() < 1e-12);

        let onehotish =
            data_leaf(&mut cx, ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 0.0, 0.0]).unwrap());
        let l = adversarial_loss(&mut cx, onehotish, 0);
        let want = (1f64.exp() + 2.0).ln() - 1.0;
        assert!((cx.tape.value(l)[[]] - want).abs() < 1e-12);
        assert!((cx.tape.value(l)[[]] - 0.5514).abs() < 1e-4);

        // large-margin correct logits drive CE toward zero
        let margin =
            data_leaf(&mut cx, ArrayD::from_shape_vec(IxDyn(&[3]), vec![30.0, 0.0, 0.0]).unwrap());
        let l = adversarial_loss(&mut cx, margin, 0);
        assert!(cx.tape.value(l)[[]] < 1e-9);
    }

    #[test]
    fn grl_scaling_on_toy_network() {
        // two-layer net; with λ=1 the input-side gradient equals the exact
        // negation of the plain gradient, checked against finite
        // differences; λ=0 zeroes it
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w1 = ArrayD::from_shape_simple_fn(IxDyn(&[6, 4]), || rng.gen_range(-0.5..0.5));
        let w2 = ArrayD::from_shape_simple_fn(IxDyn(&[4, 3]), || rng.gen_range(-0.5..0.5));
        let x0 = ArrayD::from_shape_simple_fn(IxDyn(&[2, 6]), || rng.gen_range(-1.0..1.0));
        let store = ParamStore::<f64>::new();
        let run = |x: &ArrayD<f64>, lambda: Option<f64>| {
            let mut cx = Ctx::new(&store);
            let xt = cx.tape.leaf(x.clone(), true);
            let mid = match lambda {
                Some(l) => cx.tape.grl(xt, l),
                None => xt,
            };
            let w1t = cx.tape.constant(w1.clone());
            let w2t = cx.tape.constant(w2.clone());
            let h = cx.tape.matmul(mid, w1t);
            let h = cx.tape.tanh_act(h);
            let o = cx.tape.matmul(h, w2t);
            let o = cx.tape.reshape(o, &[6]);
            let l = cx.tape.cross_entropy_logits(o, 2);
            cx.tape.backward(l);
            (cx.tape.value(l)[[]], cx.tape.grad(xt).unwrap().clone())
        };
        let (_, g_plain) = run(&x0, None);
        let (_, g_ident) = run(&x0, Some(-1.0));
        assert_eq!(g_plain, g_ident, "lambda=-1 reversal is a plain pass");
        let (_, g_rev) = run(&x0, Some(1.0));
        for (a, b) in g_plain.iter().zip(g_rev.iter()) {
            assert_eq!(*a, -*b);
        }
        let (_, g_zero) = run(&x0, Some(0.0));
        assert!(g_zero.iter().all(|&g| g == 0.0));
        crate::check::check_grad(|x| run(x, None).0, &x0, &g_plain, 1e-6, 1e-6, 1e-10, None);
    }

    #[test]
    fn grl_sign_test_encoder_step_raises_discriminator_ce() {
        let (mut store, enc, disc) = toy_setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clip = ArrayD::from_shape_simple_fn(IxDyn(&[3, 16, 16, 3]), || rng.gen_range(0.0..1.0));
        let msg = {
            let mut mrng = ChaCha8Rng::seed_from_u64(11);
            init_messenger_values::<f64>(3, 6, 8, &mut mrng).unwrap()
        };
        let label = 2usize;
        let ce_and_encoder_grads = |store: &ParamStore<f64>, lambda: f64| {
            let mut cx = Ctx::new(store);
            let f = data_leaf(&mut cx, clip.clone());
            let mt = cx.tape.constant(msg.clone());
            let (feats, _) = enc.encode(&mut cx, f, mt).unwrap();
            let logits = disc.forward(&mut cx, &feats, lambda).unwrap();
            let loss = adversarial_loss(&mut cx, logits, label);
            cx.tape.backward(loss);
            let mut grads = Vec::new();
            for (name, id) in cx.store().names() {
                if name.starts_with("encoder.") {
                    grads.push((id, cx.param_grad(id).map(|g| g.clone())));
                }
            }
            (cx.tape.value(loss)[[]], grads)
        };
        let lr = 1e-2;
        for (lambda, expect_increase) in [(1.0, true), (-1.0, false)] {
            let before = ce_and_encoder_grads(&store, lambda);
            let mut applied = Vec::new();
            for (id, g) in &before.1 {
                if let Some(g) = g {
                    let delta = g.mapv(|x| x * lr);
                    *store.value_mut(*id) -= &delta;
                    applied.push((*id, delta));
                }
            }
            assert!(!applied.is_empty(), "encoder must receive gradients");
            let after = ce_and_encoder_grads(&store, lambda).0;
            if expect_increase {
                assert!(
                    after > before.0,
                    "reversed step should raise CE: {} -> {after}",
                    before.0
                );
            } else {
                assert!(
                    after < before.0,
                    "plain step should lower CE: {} -> {after}",
                    before.0
                );
            }
            for (id, delta) in applied {
                *store.value_mut(id) += &delta;
            }
        }
    }

    #[test]
    fn discriminator_params_get_plain_gradients() {
        // the discriminator head must move to DECREASE CE even when the
        // encoder gradient is reversed
        let (mut store, enc, disc) = toy_setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let clip = ArrayD::from_shape_simple_fn(IxDyn(&[2, 16, 16, 3]), || rng.gen_range(0.0..1.0));
        let msg = {
            let mut mrng = ChaCha8Rng::seed_from_u64(14);
            init_messenger_values::<f64>(2, 6, 8, &mut mrng).unwrap()
        };
        let run = |store: &ParamStore<f64>, want_grads: bool| {
            let mut cx = Ctx::new(store);
            let f = data_leaf(&mut cx, clip.clone());
            let mt = cx.tape.constant(msg.clone());
            let (feats, _) = enc.encode(&mut cx, f, mt).unwrap();
            let logits = disc.forward(&mut cx, &feats, 1.0).unwrap();
            let loss = adversarial_loss(&mut cx, logits, 0);
            if !want_grads {
                return (cx.tape.value(loss)[[]], Vec::new());
            }
            cx.tape.backward(loss);
            let mut grads = Vec::new();
            for (name, id) in cx.store().names() {
                if name.starts_with("discriminator.") {
                    if let Some(g) = cx.param_grad(id) {
                        grads.push((id, g.clone()));
                    }
                }
            }
            (cx.tape.value(loss)[[]], grads)
        };
        let (before, grads) = run(&store, true);
        assert!(!grads.is_empty());
        for (id, g) in &grads {
            let delta = g.mapv(|x| x * 1e-2);
            *store.value_mut(*id) -= &delta;
        }
        let (after, _) = run(&store, false);
        assert!(after < before, "discriminator step should lower CE");
    }

    #[test]
    fn invalid_taps_rejected() {
        let enc = EncoderConfig::toy();
        let mut cfg = DiscriminatorConfig::toy();
        cfg.adv_taps = vec![3];
        assert!(cfg.validate(&enc).is_err());
        cfg.adv_taps = vec![];
        assert!(cfg.validate(&enc).is_err());
        cfg.adv_taps = vec![1, 1];
        assert!(cfg.validate(&enc).is_err());
        cfg.adv_taps = vec![1, 2];
        assert!(cfg.validate(&enc).is_ok());
    }
}
