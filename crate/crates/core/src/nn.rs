//! Parameter storage, initialization, and layer wrappers over the tape.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`encoder.stage1.block0.attn.q.w`, ...). Layers hold [`ParamId`]s only;
//! a per-forward [`Ctx`] binds each referenced parameter to a tape leaf
//! exactly once, so a parameter used twice accumulates both gradient
//! contributions on one leaf.

use crate::scalar::Scalar;
use crate::tape::{Tape, Tid};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T: Scalar> {
    pub value: ArrayD<T>,
    pub trainable: bool,
}

pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> ParamId {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.insert(name.to_string(), Param { value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries.get_index(id.0).expect("valid id").1.value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries.get_index_mut(id.0).expect("valid id").1.value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries.get_index(id.0).expect("valid id").1.trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names with their ids, in insertion order.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (k.as_str(), ParamId(i)))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries.get_index(i).unwrap().1.trainable)
            .map(ParamId)
            .collect()
    }

    /// Total element count of trainable parameters whose name starts with
    /// `prefix`. `""` counts everything trainable.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

/// Weight initialization policies. All sampling happens in `f64` and is then
/// cast, so `f32` and `f64` stores built from the same seed hold the same
/// numbers up to rounding.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal(0, std) with resampling outside two standard deviations.
    TruncNormal { std: f64 },
    /// Uniform(-l, l) with l = sqrt(6 / fan_in); fan_in inferred as the
    /// product of all axes but the last.
    KaimingUniform,
}

fn sample<T: Scalar>(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<T> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::ones(IxDyn(shape)),
        Init::Constant(c) => ArrayD::from_elem(IxDyn(shape), T::from_f64_(c)),
        Init::TruncNormal { std } => {
            let dist = Normal::new(0.0, std).expect("std is finite positive");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                loop {
                    let x = dist.sample(rng);
                    if x.abs() <= 2.0 * std {
                        return T::from_f64_(x);
                    }
                }
            })
        }
        Init::KaimingUniform => {
            let fan_in: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let l = (6.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64_(rng.gen_range(-l..l)))
        }
    }
}

/// Builder that registers parameters under a dotted name prefix.
pub struct Scope<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Scope {
            store,
            rng,
            prefix: String::new(),
        }
    }

    fn join(&self, seg: &str) -> String {
        if self.prefix.is_empty() {
            seg.to_string()
        } else {
            format!("{}.{}", self.prefix, seg)
        }
    }

    pub fn sub(&mut self, seg: &str) -> Scope<'_, T> {
        let prefix = self.join(seg);
        Scope {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = sample(init, shape, self.rng);
        self.store.insert(&self.join(name), value, true)
    }

    pub fn frozen(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = sample(init, shape, self.rng);
        self.store.insert(&self.join(name), value, false)
    }

    /// Register a trainable parameter with a precomputed value.
    pub fn param_value(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.store.insert(&self.join(name), value, true)
    }
}

/// Per-forward binding of parameters to tape leaves.
pub struct Ctx<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Tid>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Bind a parameter as a leaf (once per forward).
    pub fn p(&mut self, id: ParamId) -> Tid {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self
            .tape
            .leaf(self.store.value(id).clone(), self.store.is_trainable(id));
        self.bound[id.0] = Some(t);
        t
    }

    pub fn backward(&mut self, root: Tid) {
        self.tape.backward(root);
    }

    /// Gradient of a parameter after backward; `None` when the parameter was
    /// not touched by this graph or is frozen.
    pub fn param_grad(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.bound[id.0].and_then(|t| self.tape.grad(t))
    }

    /// Gradients aligned with store order, zeros treated as `None`.
    pub fn collect_grads(&self) -> Vec<Option<ArrayD<T>>> {
        (0..self.store.len())
            .map(|i| self.param_grad(ParamId(i)).cloned())
            .collect()
    }
}

// ----- layers -----

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        s: &mut Scope<T>,
        name: &str,
        cin: usize,
        cout: usize,
        winit: Init,
    ) -> Self {
        let mut s = s.sub(name);
        Linear {
            w: s.param("w", &[cin, cout], winit),
            b: Some(s.param("b", &[cout], Init::Zeros)),
        }
    }

    pub fn new_no_bias<T: Scalar>(
        s: &mut Scope<T>,
        name: &str,
        cin: usize,
        cout: usize,
        winit: Init,
    ) -> Self {
        let mut s = s.sub(name);
        Linear {
            w: s.param("w", &[cin, cout], winit),
            b: None,
        }
    }

    /// Apply to a tensor of any rank whose last axis is the input width.
    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let shape: Vec<usize> = cx.tape.shape(x).to_vec();
        let cin = *shape.last().expect("linear input has rank >= 1");
        let w = cx.p(self.w);
        let cout = cx.tape.shape(w)[1];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = cx.tape.reshape(x, &[rows, cin]);
        let mut y = cx.tape.matmul(flat, w);
        if let Some(b) = self.b {
            let bt = cx.p(b);
            y = cx.tape.add_bias(y, bt);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cout;
        cx.tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(s: &mut Scope<T>, name: &str, c: usize) -> Self {
        let mut s = s.sub(name);
        LayerNorm {
            gamma: s.param("gamma", &[c], Init::Ones),
            beta: s.param("beta", &[c], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.tape.layer_norm(x, g, b, T::from_f64_(self.eps))
    }
}

/// 2-D convolution over `(T, H, W, C)` via patch extraction + matmul.
/// Weights are stored `(k, k, cin, cout)`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        sc: &mut Scope<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        winit: Init,
    ) -> Self {
        let mut sc = sc.sub(name);
        Conv2d {
            w: sc.param("w", &[k, k, cin, cout], winit),
            b: Some(sc.param("b", &[cout], Init::Zeros)),
            k,
            s,
            p,
        }
    }

    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let sh = cx.tape.shape(x).to_vec();
        let (t, h, w) = (sh[0], sh[1], sh[2]);
        let ho = crate::tape::spatial::conv_out(h, self.k, self.s, self.p);
        let wo = crate::tape::spatial::conv_out(w, self.k, self.s, self.p);
        let wt = cx.p(self.w);
        let wsh = cx.tape.shape(wt).to_vec();
        let cout = wsh[3];
        let wmat = cx.tape.reshape(wt, &[wsh[0] * wsh[1] * wsh[2], cout]);
        let cols = cx.tape.im2col(x, self.k, self.s, self.p);
        let mut y = cx.tape.matmul(cols, wmat);
        if let Some(b) = self.b {
            let bt = cx.p(b);
            y = cx.tape.add_bias(y, bt);
        }
        cx.tape.reshape(y, &[t, ho, wo, cout])
    }
}

/// 3-D convolution over `(T, H, W, C)` at stride 1, kernel `(kt, kk, kk)`,
/// zero padding `same` on every axis. Weights `(kt, kk, kk, cin, cout)`.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub kt: usize,
    pub kk: usize,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        sc: &mut Scope<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kt: usize,
        kk: usize,
        winit: Init,
    ) -> Self {
        assert!(kt % 2 == 1 && kk % 2 == 1, "conv3d: odd kernels only");
        let mut sc = sc.sub(name);
        Conv3d {
            w: sc.param("w", &[kt, kk, kk, cin, cout], winit),
            b: sc.param("b", &[cout], Init::Zeros),
            kt,
            kk,
        }
    }

    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let sh = cx.tape.shape(x).to_vec();
        let (t, h, w) = (sh[0], sh[1], sh[2]);
        let wt = cx.p(self.w);
        let wsh = cx.tape.shape(wt).to_vec();
        let cout = wsh[4];
        let rows = wsh[0] * wsh[1] * wsh[2] * wsh[3];
        let wmat = cx.tape.reshape(wt, &[rows, cout]);
        let cols = cx
            .tape
            .vol2col(x, self.kt, self.kk, self.kt / 2, self.kk / 2);
        let y = cx.tape.matmul(cols, wmat);
        let bt = cx.p(self.b);
        let y = cx.tape.add_bias(y, bt);
        cx.tape.reshape(y, &[t, h, w, cout])
    }
}

/// Depthwise 3x3 convolution, stride 1, padding 1.
#[derive(Clone, Copy, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new<T: Scalar>(sc: &mut Scope<T>, name: &str, c: usize, winit: Init) -> Self {
        let mut sc = sc.sub(name);
        DwConv {
            w: sc.param("w", &[3, 3, c], winit),
            b: sc.param("b", &[c], Init::Zeros),
        }
    }

    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        cx.tape.dwconv3x3(x, w, b)
    }
}

/// Two residual 3x3 convolutions with a width-matching shortcut:
/// `y = proj(x) + conv2(gelu(conv1(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResConv {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
}

impl ResConv {
    pub fn new<T: Scalar>(sc: &mut Scope<T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut sc = sc.sub(name);
        ResConv {
            conv1: Conv2d::new(&mut sc, "conv1", cin, cout, 3, 1, 1, Init::KaimingUniform),
            conv2: Conv2d::new(&mut sc, "conv2", cout, cout, 3, 1, 1, Init::KaimingUniform),
            proj: if cin != cout {
                Some(Conv2d::new(
                    &mut sc,
                    "proj",
                    cin,
                    cout,
                    1,
                    1,
                    0,
                    Init::KaimingUniform,
                ))
            } else {
                None
            },
        }
    }

    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<T>, x: Tid) -> Tid {
        let h = self.conv1.apply(cx, x);
        let h = cx.tape.gelu(h);
        let h = self.conv2.apply(cx, h);
        let short = match self.proj {
            Some(p) => p.apply(cx, x),
            None => x,
        };
        cx.tape.add(short, h)
    }
}

/// Bind a non-parameter tensor (weights are cloned leaves; this is for data).
pub fn data_leaf<T: Scalar>(cx: &mut Ctx<T>, a: ArrayD<T>) -> Tid {
    cx.tape.constant(a)
}
