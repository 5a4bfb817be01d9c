//! Reverse-mode autodiff over dynamic-dimension `ndarray` tensors.
//!
//! A [`Tape`] records a define-by-run graph: every operation pushes a node
//! holding the forward value plus a backward closure that maps the output
//! gradient to parent-gradient contributions. [`Tape::backward`] walks the
//! nodes in reverse creation order, so parents (always created before their
//! children) accumulate contributions from all consumers before being
//! processed themselves.
//!
//! Gradients of interior nodes are freed as soon as they have been
//! distributed; only leaves keep their gradient for querying. Everything is
//! single-threaded and deterministic: the same graph replays to bitwise
//! identical values and gradients.

pub mod spatial;

use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn, Slice};

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tid(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &ArrayD<T>, &[&ArrayD<T>]) -> Vec<ArrayD<T>>>;

pub struct Tape<T: Scalar> {
    vals: Vec<ArrayD<T>>,
    parents: Vec<Vec<usize>>,
    backs: Vec<Option<BackFn<T>>>,
    needs: Vec<bool>,
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            parents: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Insert a leaf tensor. Gradients are retained for leaves with
    /// `needs_grad` after [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Tid {
        self.push_node(value, vec![], None, needs_grad)
    }

    /// Leaf that never receives gradients (data, frozen weights, masks).
    pub fn constant(&mut self, value: ArrayD<T>) -> Tid {
        self.leaf(value, false)
    }

    pub fn value(&self, t: Tid) -> &ArrayD<T> {
        &self.vals[t.0]
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        self.vals[t.0].shape()
    }

    /// Gradient of a leaf (or of the backward root). `None` if backward has
    /// not run, the node does not require grad, or its gradient was freed
    /// because it is an interior node.
    pub fn grad(&self, t: Tid) -> Option<&ArrayD<T>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push_node(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        back: Option<BackFn<T>>,
        needs_grad: bool,
    ) -> Tid {
        let needs = needs_grad || parents.iter().any(|&p| self.needs[p]);
        self.vals.push(value);
        self.parents.push(parents);
        self.backs.push(if needs { back } else { None });
        self.needs.push(needs);
        self.grads.push(None);
        Tid(self.vals.len() - 1)
    }

    pub(crate) fn unary(
        &mut self,
        x: Tid,
        value: ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &ArrayD<T>, &[&ArrayD<T>]) -> Vec<ArrayD<T>> + 'static,
    ) -> Tid {
        self.push_node(value, vec![x.0], Some(Box::new(back)), false)
    }

    pub(crate) fn binary(
        &mut self,
        a: Tid,
        b: Tid,
        value: ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &ArrayD<T>, &[&ArrayD<T>]) -> Vec<ArrayD<T>> + 'static,
    ) -> Tid {
        self.push_node(value, vec![a.0, b.0], Some(Box::new(back)), false)
    }

    /// Run reverse-mode accumulation from `root`, seeding with ones.
    pub fn backward(&mut self, root: Tid) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(ArrayD::ones(self.vals[root.0].raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let is_leaf = self.parents[i].is_empty();
            if self.backs[i].is_none() {
                if !is_leaf && i != root.0 {
                    self.grads[i] = None;
                }
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let g_out = hi[0].as_ref().expect("checked above");
            let pvals: Vec<&ArrayD<T>> = self.parents[i].iter().map(|&p| &self.vals[p]).collect();
            let back = self.backs[i].as_ref().expect("checked above");
            let contribs = back(g_out, &self.vals[i], &pvals);
            debug_assert_eq!(contribs.len(), self.parents[i].len());
            for (&p, c) in self.parents[i].iter().zip(contribs) {
                if !self.needs[p] {
                    continue;
                }
                debug_assert_eq!(c.shape(), self.vals[p].shape(), "grad shape mismatch");
                match &mut lo[p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
            if !is_leaf {
                self.grads[i] = None; // interior grads are single-use
            }
        }
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.binary(a, b, v, |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.binary(a, b, v, |g, _, _| vec![g.clone(), g.mapv(|x| -x)])
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.binary(a, b, v, |g, _, xs| vec![g * xs[1], g * xs[0]])
    }

    pub fn scale(&mut self, x: Tid, c: T) -> Tid {
        let v = self.vals[x.0].mapv(|e| e * c);
        self.unary(x, v, move |g, _, _| vec![g.mapv(|e| e * c)])
    }

    /// `x + b` where `b` is 1-D and broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: Tid, b: Tid) -> Tid {
        let c = *self.shape(x).last().expect("add_bias: x has rank >= 1");
        assert_eq!(self.shape(b), [c], "add_bias: bias width mismatch");
        let bv = self.vals[b.0].view().into_dimensionality::<Ix1>().unwrap();
        let v = &self.vals[x.0] + &bv;
        self.binary(x, b, v, move |g, _, _| {
            let flat = g.view().into_shape_with_order((g.len() / c, c)).unwrap();
            vec![g.clone(), flat.sum_axis(Axis(0)).into_dyn()]
        })
    }

    // ----- linear algebra -----

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let v = av.dot(&bv).into_dyn();
        self.binary(a, b, v, |g, _, xs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = xs[0].view().into_dimensionality::<Ix2>().unwrap();
            let b2 = xs[1].view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
        })
    }

    /// `(n, k) x (m, k)^T -> (n, m)`.
    pub fn matmul_nt(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt: inner dims");
        let v = av.dot(&bv.t()).into_dyn();
        self.binary(a, b, v, |g, _, xs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = xs[0].view().into_dimensionality::<Ix2>().unwrap();
            let b2 = xs[1].view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.dot(&b2).into_dyn(), g2.t().dot(&a2).into_dyn()]
        })
    }

    // ----- shape -----

    pub fn reshape(&mut self, x: Tid, shape: &[usize]) -> Tid {
        let old: Vec<usize> = self.shape(x).to_vec();
        let v = self.vals[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(x, v, move |g, _, _| {
            vec![g.clone().into_shape_with_order(IxDyn(&old)).unwrap()]
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Tid, axis: usize, start: usize, len: usize) -> Tid {
        let dim = self.shape(x)[axis];
        assert!(start + len <= dim, "narrow: slice out of range");
        let v = self.vals[x.0]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let full: Vec<usize> = self.shape(x).to_vec();
        self.unary(x, v, move |g, _, _| {
            let mut dx = ArrayD::zeros(IxDyn(&full));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![dx]
        })
    }

    pub fn concat(&mut self, xs: &[Tid], axis: usize) -> Tid {
        assert!(!xs.is_empty(), "concat: empty input");
        let views: Vec<ArrayViewD<T>> = xs.iter().map(|t| self.vals[t.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        // later ops reshape views in place, so keep values standard-layout
        let v = if v.is_standard_layout() {
            v
        } else {
            v.as_standard_layout().to_owned()
        };
        let sizes: Vec<usize> = xs.iter().map(|t| self.shape(*t)[axis]).collect();
        let parents: Vec<usize> = xs.iter().map(|t| t.0).collect();
        self.push_node(
            v,
            parents,
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), Slice::from(off..off + s))
                            .to_owned(),
                    );
                    off += s;
                }
                out
            })),
            false,
        )
    }

    /// Stack rank-R tensors into rank-(R+1) along a new leading axis.
    pub fn stack0(&mut self, xs: &[Tid]) -> Tid {
        let inner: Vec<usize> = self.shape(xs[0]).to_vec();
        let mut shape = vec![1usize];
        shape.extend_from_slice(&inner);
        let lifted: Vec<Tid> = xs.iter().map(|&x| self.reshape(x, &shape)).collect();
        self.concat(&lifted, 0)
    }

    // ----- activations -----

    pub fn relu(&mut self, x: Tid) -> Tid {
        let v = self.vals[x.0].mapv(|e| if e > T::zero() { e } else { T::zero() });
        self.unary(x, v, |g, _, xs| {
            let mut dx = g.clone();
            dx.zip_mut_with(xs[0], |d, &x| {
                if x <= T::zero() {
                    *d = T::zero()
                }
            });
            vec![dx]
        })
    }

    pub fn tanh_act(&mut self, x: Tid) -> Tid {
        let v = self.vals[x.0].mapv(|e| e.tanh());
        self.unary(x, v, |g, y, _| {
            let mut dx = g.clone();
            dx.zip_mut_with(y, |d, &t| *d = *d * (T::one() - t * t));
            vec![dx]
        })
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let one = T::one();
        let v = self.vals[x.0].mapv(|e| one / (one + (-e).exp()));
        self.unary(x, v, |g, y, _| {
            let mut dx = g.clone();
            dx.zip_mut_with(y, |d, &s| *d = *d * s * (T::one() - s));
            vec![dx]
        })
    }

    /// Tanh-form GELU; forward and backward share the same closed form so
    /// finite differences agree with the analytic gradient.
    pub fn gelu(&mut self, x: Tid) -> Tid {
        let c = T::from_f64_((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64_(0.044715);
        let half = T::from_f64_(0.5);
        let v = self.vals[x.0].mapv(|e| {
            let u = c * (e + a * e * e * e);
            half * e * (T::one() + u.tanh())
        });
        self.unary(x, v, move |g, _, xs| {
            let mut dx = g.clone();
            dx.zip_mut_with(xs[0], |d, &e| {
                let u = c * (e + a * e * e * e);
                let t = u.tanh();
                let sech2 = T::one() - t * t;
                let du = c * (T::one() + T::from_f64_(3.0) * a * e * e);
                *d = *d * (half * (T::one() + t) + half * e * sech2 * du);
            });
            vec![dx]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Tid) -> Tid {
        let c = *self.shape(x).last().expect("softmax: rank >= 1");
        let mut v = self.vals[x.0].clone();
        let nrows = v.len() / c;
        {
            let mut flat = v.view_mut().into_shape_with_order((nrows, c)).unwrap();
            for mut row in flat.rows_mut() {
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|e| (e - m).exp());
                let s = row.sum();
                row.mapv_inplace(|e| e / s);
            }
        }
        self.unary(x, v, move |g, y, _| {
            let mut dx = g.clone();
            {
                let n = dx.len() / c;
                let mut dflat = dx.view_mut().into_shape_with_order((n, c)).unwrap();
                let yflat = y.view().into_shape_with_order((n, c)).unwrap();
                for (mut drow, yrow) in dflat.rows_mut().into_iter().zip(yflat.rows()) {
                    let dot = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&d, &s)| d * s)
                        .fold(T::zero(), |acc, e| acc + e);
                    for (d, &s) in drow.iter_mut().zip(yrow.iter()) {
                        *d = s * (*d - dot);
                    }
                }
            }
            vec![dx]
        })
    }

    /// Layer normalization over the last axis: `gamma * (x - mu) / sigma + beta`.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: T) -> Tid {
        let c = *self.shape(x).last().expect("layer_norm: rank >= 1");
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let gv = self.vals[gamma.0].clone();
        let bv = self.vals[beta.0].clone();
        let mut v = self.vals[x.0].clone();
        {
            let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
            let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
            let n = v.len() / c;
            let mut flat = v.view_mut().into_shape_with_order((n, c)).unwrap();
            for mut row in flat.rows_mut() {
                let mu = row.sum() / T::from_usize_(c);
                let var = row
                    .iter()
                    .map(|&e| (e - mu) * (e - mu))
                    .fold(T::zero(), |a, e| a + e)
                    / T::from_usize_(c);
                let inv = T::one() / (var + eps).sqrt();
                for (e, (&g, &b)) in row.iter_mut().zip(g1.iter().zip(b1.iter())) {
                    *e = (*e - mu) * inv * g + b;
                }
            }
        }
        let parents = vec![x.0, gamma.0, beta.0];
        self.push_node(
            v,
            parents,
            Some(Box::new(move |g, _, xs| {
                let x = xs[0];
                let gamma = xs[1].view().into_dimensionality::<Ix1>().unwrap();
                let n = x.len() / c;
                let xf = x.view().into_shape_with_order((n, c)).unwrap();
                let gf = g.view().into_shape_with_order((n, c)).unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((n, c));
                let mut dgamma = ndarray::Array1::<T>::zeros(c);
                let mut dbeta = ndarray::Array1::<T>::zeros(c);
                let cn = T::from_usize_(c);
                for i in 0..n {
                    let row = xf.row(i);
                    let grow = gf.row(i);
                    let mu = row.sum() / cn;
                    let var = row
                        .iter()
                        .map(|&e| (e - mu) * (e - mu))
                        .fold(T::zero(), |a, e| a + e)
                        / cn;
                    let inv = T::one() / (var + eps).sqrt();
                    // xhat, dy*gamma, and the two row means of the standard formula
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let xh = (row[j] - mu) * inv;
                        let dg = grow[j] * gamma[j];
                        m1 += dg;
                        m2 += dg * xh;
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                    }
                    m1 /= cn;
                    m2 /= cn;
                    for j in 0..c {
                        let xh = (row[j] - mu) * inv;
                        dx[[i, j]] = (grow[j] * gamma[j] - m1 - xh * m2) * inv;
                    }
                }
                vec![
                    dx.into_dyn()
                        .into_shape_with_order(x.raw_dim())
                        .unwrap(),
                    dgamma.into_dyn(),
                    dbeta.into_dyn(),
                ]
            })),
            false,
        )
    }

    // ----- reductions & losses -----

    /// Mean over all elements, as a 0-d tensor.
    pub fn mean_all(&mut self, x: Tid) -> Tid {
        let n = self.vals[x.0].len();
        let v = ndarray::arr0(self.vals[x.0].sum() / T::from_usize_(n)).into_dyn();
        self.unary(x, v, move |g, _, xs| {
            let s = g[[]] / T::from_usize_(n);
            vec![ArrayD::from_elem(xs[0].raw_dim(), s)]
        })
    }

    /// Mean over rows of `(n, c)`, yielding `(c,)`.
    pub fn mean_rows(&mut self, x: Tid) -> Tid {
        let x2 = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let n = x2.nrows();
        let v = (x2.sum_axis(Axis(0)) / T::from_usize_(n)).into_dyn();
        self.unary(x, v, move |g, _, xs| {
            let shape = xs[0].raw_dim();
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            let scaled = g1.mapv(|e| e / T::from_usize_(n));
            let mut dx = ArrayD::zeros(shape);
            {
                let mut d2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for mut row in d2.rows_mut() {
                    row.assign(&scaled);
                }
            }
            vec![dx]
        })
    }

    /// Weighted row sum: `(n, c)` rows combined by `(n,)` weights into
    /// `(c,)`. Plain scalar accumulation, so swapping two rows together
    /// with their weights leaves an n=2 result bitwise unchanged (no FMA
    /// asymmetry as in the matmul path).
    pub fn weighted_sum_rows(&mut self, x: Tid, w: Tid) -> Tid {
        let x2 = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let w1 = self.vals[w.0].view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.nrows(), w1.len(), "weighted_sum_rows: row mismatch");
        let (n, c) = (x2.nrows(), x2.ncols());
        let mut v = ndarray::Array1::<T>::zeros(c);
        for i in 0..n {
            for j in 0..c {
                v[j] = v[j] + w1[i] * x2[[i, j]];
            }
        }
        self.push_node(
            v.into_dyn(),
            vec![x.0, w.0],
            Some(Box::new(move |g, _, ps| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let xv = ps[0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = ps[1].view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((n, c));
                let mut dw = ndarray::Array1::<T>::zeros(n);
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..c {
                        dx[[i, j]] = g1[j] * wv[i];
                        acc += g1[j] * xv[[i, j]];
                    }
                    dw[i] = acc;
                }
                vec![dx.into_dyn(), dw.into_dyn()]
            })),
            false,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mse: shape mismatch");
        let n = self.vals[a.0].len();
        let mut acc = T::zero();
        ndarray::Zip::from(&self.vals[a.0])
            .and(&self.vals[b.0])
            .for_each(|&x, &y| {
                let d = x - y;
                acc += d * d;
            });
        let v = ndarray::arr0(acc / T::from_usize_(n)).into_dyn();
        self.binary(a, b, v, move |g, _, xs| {
            let s = g[[]] * T::from_f64_(2.0) / T::from_usize_(n);
            let da = (xs[0] - xs[1]).mapv(|d| d * s);
            let db = da.mapv(|d| -d);
            vec![da, db]
        })
    }

    /// Elementwise smooth-L1 (huber at delta 1) averaged over all elements:
    /// `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: Tid, gt: Tid) -> Tid {
        assert_eq!(self.shape(pred), self.shape(gt), "smooth_l1: shape mismatch");
        let n = self.vals[pred.0].len();
        let half = T::from_f64_(0.5);
        let mut acc = T::zero();
        ndarray::Zip::from(&self.vals[pred.0])
            .and(&self.vals[gt.0])
            .for_each(|&p, &q| {
                let d = p - q;
                acc += if d.abs() < T::one() {
                    half * d * d
                } else {
                    d.abs() - half
                };
            });
        let v = ndarray::arr0(acc / T::from_usize_(n)).into_dyn();
        self.binary(pred, gt, v, move |g, _, xs| {
            let s = g[[]] / T::from_usize_(n);
            let mut da = xs[0] - xs[1];
            da.mapv_inplace(|d| {
                let e = if d.abs() < T::one() { d } else { d.signum() };
                e * s
            });
            let db = da.mapv(|d| -d);
            vec![da, db]
        })
    }

    /// Cross-entropy of a 1-D logit vector against an integer label,
    /// computed via a stable log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Tid, label: usize) -> Tid {
        let z = self.vals[logits.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("cross_entropy: 1-D logits");
        let q = z.len();
        assert!(label < q, "cross_entropy: label out of range");
        let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|&e| (e - m).exp()).fold(T::zero(), |a, e| a + e).ln();
        let v = ndarray::arr0(lse - z[label]).into_dyn();
        self.unary(logits, v, move |g, _, xs| {
            let z = xs[0].view().into_dimensionality::<Ix1>().unwrap();
            let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
            let denom = z.iter().map(|&e| (e - m).exp()).fold(T::zero(), |a, e| a + e);
            let s = g[[]];
            let mut dz = z.mapv(|e| (e - m).exp() / denom * s);
            dz[label] = dz[label] - s;
            vec![dz.into_dyn()]
        })
    }

    // ----- misc -----

    /// Clamp to `[0, 1]`; gradient passes through the closed interval.
    pub fn clamp01(&mut self, x: Tid) -> Tid {
        let v = self.vals[x.0].mapv(|e| e.max(T::zero()).min(T::one()));
        self.unary(x, v, |g, _, xs| {
            let mut dx = g.clone();
            dx.zip_mut_with(xs[0], |d, &x| {
                if x < T::zero() || x > T::one() {
                    *d = T::zero()
                }
            });
            vec![dx]
        })
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda`.
    pub fn grl(&mut self, x: Tid, lambda: T) -> Tid {
        let v = self.vals[x.0].clone();
        self.unary(x, v, move |g, _, _| vec![g.mapv(|e| -lambda * e)])
    }
}
