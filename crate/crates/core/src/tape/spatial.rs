//! Spatial and spatio-temporal tape ops.
//!
//! All image-like tensors are `(T, H, W, C)` row-major. Convolutions are
//! expressed as patch extraction (`im2col` / `vol2col`) followed by a plain
//! matmul, so their backward passes reduce to a scatter-add plus the matmul
//! backward already on the tape. Column order within a patch is
//! `(ky, kx, c)` (and `(kt, ky, kx, c)` for volumes), matching a row-major
//! reshape of weights stored as `(kh, kw, cin, cout)`.

use crate::scalar::Scalar;
use crate::tape::{Tape, Tid};
use ndarray::{Array2, Array4, ArrayD, Ix4, IxDyn};

pub(crate) fn conv_out(extent: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(extent + 2 * p >= k, "kernel larger than padded input");
    (extent + 2 * p - k) / s + 1
}

pub(crate) fn im2col_arr<T: Scalar>(x: &ArrayD<T>, k: usize, s: usize, p: usize) -> Array2<T> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("im2col: (T,H,W,C)");
    let (t, h, w, c) = x4.dim();
    let (ho, wo) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
    let mut cols = Array2::zeros((t * ho * wo, k * k * c));
    for ti in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ti * ho + oy) * wo + ox;
                for ky in 0..k {
                    let y = (oy * s + ky) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * s + kx) as isize - p as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * c;
                        for ci in 0..c {
                            cols[[row, base + ci]] = x4[[ti, y as usize, xx as usize, ci]];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_arr<T: Scalar>(
    dcols: &ArrayD<T>,
    shape: (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
) -> ArrayD<T> {
    let (t, h, w, c) = shape;
    let (ho, wo) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
    let d2 = dcols
        .view()
        .into_shape_with_order((t * ho * wo, k * k * c))
        .expect("col2im: column shape");
    let mut dx = Array4::<T>::zeros((t, h, w, c));
    for ti in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ti * ho + oy) * wo + ox;
                for ky in 0..k {
                    let y = (oy * s + ky) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * s + kx) as isize - p as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * c;
                        for ci in 0..c {
                            dx[[ti, y as usize, xx as usize, ci]] += d2[[row, base + ci]];
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

pub(crate) fn vol2col_arr<T: Scalar>(
    x: &ArrayD<T>,
    kt: usize,
    kk: usize,
    pt: usize,
    pp: usize,
) -> Array2<T> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("vol2col: (T,H,W,C)");
    let (t, h, w, c) = x4.dim();
    let (to, ho, wo) = (
        conv_out(t, kt, 1, pt),
        conv_out(h, kk, 1, pp),
        conv_out(w, kk, 1, pp),
    );
    let mut cols = Array2::zeros((to * ho * wo, kt * kk * kk * c));
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ot * ho + oy) * wo + ox;
                for dt in 0..kt {
                    let ti = (ot + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for ky in 0..kk {
                        let y = (oy + ky) as isize - pp as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kk {
                            let xx = (ox + kx) as isize - pp as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let base = ((dt * kk + ky) * kk + kx) * c;
                            for ci in 0..c {
                                cols[[row, base + ci]] =
                                    x4[[ti as usize, y as usize, xx as usize, ci]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2vol_arr<T: Scalar>(
    dcols: &ArrayD<T>,
    shape: (usize, usize, usize, usize),
    kt: usize,
    kk: usize,
    pt: usize,
    pp: usize,
) -> ArrayD<T> {
    let (t, h, w, c) = shape;
    let (to, ho, wo) = (
        conv_out(t, kt, 1, pt),
        conv_out(h, kk, 1, pp),
        conv_out(w, kk, 1, pp),
    );
    let d2 = dcols
        .view()
        .into_shape_with_order((to * ho * wo, kt * kk * kk * c))
        .expect("col2vol: column shape");
    let mut dx = Array4::<T>::zeros((t, h, w, c));
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ot * ho + oy) * wo + ox;
                for dt in 0..kt {
                    let ti = (ot + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for ky in 0..kk {
                        let y = (oy + ky) as isize - pp as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kk {
                            let xx = (ox + kx) as isize - pp as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let base = ((dt * kk + ky) * kk + kx) * c;
                            for ci in 0..c {
                                dx[[ti as usize, y as usize, xx as usize, ci]] +=
                                    d2[[row, base + ci]];
                            }
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

impl<T: Scalar> Tape<T> {
    /// Extract `k x k` patches from `(T, H, W, C)` with stride `s` and zero
    /// padding `p`, yielding `(T*Ho*Wo, k*k*C)`.
    pub fn im2col(&mut self, x: Tid, k: usize, s: usize, p: usize) -> Tid {
        let sh = self.shape(x);
        let dims = (sh[0], sh[1], sh[2], sh[3]);
        let cols = im2col_arr(self.value(x), k, s, p).into_dyn();
        self.unary(x, cols, move |g, _, _| vec![col2im_arr(g, dims, k, s, p)])
    }

    /// Extract `kt x kk x kk` volumes from `(T, H, W, C)` at stride 1 with
    /// temporal padding `pt` and spatial padding `pp`.
    pub fn vol2col(&mut self, x: Tid, kt: usize, kk: usize, pt: usize, pp: usize) -> Tid {
        let sh = self.shape(x);
        let dims = (sh[0], sh[1], sh[2], sh[3]);
        let cols = vol2col_arr(self.value(x), kt, kk, pt, pp).into_dyn();
        self.unary(x, cols, move |g, _, _| {
            vec![col2vol_arr(g, dims, kt, kk, pt, pp)]
        })
    }

    /// Depthwise 3x3 convolution at stride 1, padding 1. `w` is `(3, 3, C)`,
    /// `b` is `(C,)`.
    pub fn dwconv3x3(&mut self, x: Tid, w: Tid, b: Tid) -> Tid {
        let sh = self.shape(x);
        let (t, h, wd, c) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(self.shape(w), [3, 3, c], "dwconv3x3: weight shape");
        assert_eq!(self.shape(b), [c], "dwconv3x3: bias shape");
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let w3 = self.value(w).clone();
        let b1 = self.value(b).clone();
        let mut out = Array4::<T>::zeros((t, h, wd, c));
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..wd {
                    for ci in 0..c {
                        let mut acc = b1[[ci]];
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += w3[[ky, kx, ci]] * x4[[ti, sy as usize, sx as usize, ci]];
                            }
                        }
                        out[[ti, y, xx, ci]] = acc;
                    }
                }
            }
        }
        self.push_node(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, _, xs| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xs[0].view().into_dimensionality::<Ix4>().unwrap();
                let w3 = xs[1];
                let mut dx = Array4::<T>::zeros((t, h, wd, c));
                let mut dw = ArrayD::<T>::zeros(IxDyn(&[3, 3, c]));
                let mut db = ArrayD::<T>::zeros(IxDyn(&[c]));
                for ti in 0..t {
                    for y in 0..h {
                        for xx in 0..wd {
                            for ci in 0..c {
                                let go = g4[[ti, y, xx, ci]];
                                db[[ci]] += go;
                                for ky in 0..3usize {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        dx[[ti, sy as usize, sx as usize, ci]] +=
                                            go * w3[[ky, kx, ci]];
                                        dw[[ky, kx, ci]] +=
                                            go * x4[[ti, sy as usize, sx as usize, ci]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dw, db]
            })),
            false,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of `(T, H, W, C)`.
    pub fn upsample2(&mut self, x: Tid) -> Tid {
        let sh = self.shape(x);
        let (t, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<T>::zeros((t, 2 * h, 2 * w, c));
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    for ci in 0..c {
                        let v = x4[[ti, y, xx, ci]];
                        out[[ti, 2 * y, 2 * xx, ci]] = v;
                        out[[ti, 2 * y, 2 * xx + 1, ci]] = v;
                        out[[ti, 2 * y + 1, 2 * xx, ci]] = v;
                        out[[ti, 2 * y + 1, 2 * xx + 1, ci]] = v;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g, _, _| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::<T>::zeros((t, h, w, c));
            for ti in 0..t {
                for y in 0..h {
                    for xx in 0..w {
                        for ci in 0..c {
                            dx[[ti, y, xx, ci]] = g4[[ti, 2 * y, 2 * xx, ci]]
                                + g4[[ti, 2 * y, 2 * xx + 1, ci]]
                                + g4[[ti, 2 * y + 1, 2 * xx, ci]]
                                + g4[[ti, 2 * y + 1, 2 * xx + 1, ci]];
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        })
    }

    /// 2x2 stride-2 average pooling of `(T, H, W, C)`; H and W must be even.
    pub fn avgpool2(&mut self, x: Tid) -> Tid {
        let sh = self.shape(x);
        let (t, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2: odd extent");
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let quarter = T::from_f64_(0.25);
        let mut out = Array4::<T>::zeros((t, h / 2, w / 2, c));
        for ti in 0..t {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    for ci in 0..c {
                        out[[ti, y, xx, ci]] = (x4[[ti, 2 * y, 2 * xx, ci]]
                            + x4[[ti, 2 * y, 2 * xx + 1, ci]]
                            + x4[[ti, 2 * y + 1, 2 * xx, ci]]
                            + x4[[ti, 2 * y + 1, 2 * xx + 1, ci]])
                            * quarter;
                    }
                }
            }
        }
        self.unary(x, out.into_dyn(), move |g, _, _| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::<T>::zeros((t, h, w, c));
            for ti in 0..t {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        for ci in 0..c {
                            let s = g4[[ti, y, xx, ci]] * quarter;
                            dx[[ti, 2 * y, 2 * xx, ci]] = s;
                            dx[[ti, 2 * y, 2 * xx + 1, ci]] = s;
                            dx[[ti, 2 * y + 1, 2 * xx, ci]] = s;
                            dx[[ti, 2 * y + 1, 2 * xx + 1, ci]] = s;
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        })
    }

}
