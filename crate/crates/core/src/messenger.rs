//! Weather messenger tokens and their long short-term temporal mechanism.
//!
//! Messengers are a learnable `(M, C)` block, broadcast to every frame at
//! clip entry, riding alongside pixel tokens. Between encoder blocks the M
//! tokens, partitioned into 6 equal contiguous groups, are shifted along
//! the frame axis per a fixed plan (short-range steps ±1, long-range ±2,
//! plus identity groups) with zero-fill at clip boundaries; each stage
//! exit applies the accumulated inverse. Shift and shiftback are mutual
//! adjoints, which is exactly what their backward passes use.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId, Scope};
use crate::scalar::Scalar;
use crate::tape::Tid;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const NUM_GROUPS: usize = 6;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDir {
    None,
    Forward,
    Backward,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GroupShift {
    pub dir: ShiftDir,
    pub step: usize,
}

/// Per-group shift assignment, fixed for a run and identical at every stage.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ShiftPlan {
    pub groups: Vec<GroupShift>,
}

impl ShiftPlan {
    /// Groups 1-3 carry short-term context (steps 0, +1, -1), groups 4-6
    /// long-term (0, +2, -2).
    pub fn default_plan() -> Self {
        let g = |dir, step| GroupShift { dir, step };
        ShiftPlan {
            groups: vec![
                g(ShiftDir::None, 0),
                g(ShiftDir::Forward, 1),
                g(ShiftDir::Backward, 1),
                g(ShiftDir::None, 0),
                g(ShiftDir::Forward, 2),
                g(ShiftDir::Backward, 2),
            ],
        }
    }

    /// All-zero steps; shift becomes the identity.
    pub fn identity() -> Self {
        ShiftPlan {
            groups: vec![
                GroupShift {
                    dir: ShiftDir::None,
                    step: 0
                };
                NUM_GROUPS
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() != NUM_GROUPS {
            return Err(Error::Config(format!(
                "shift plan has {} groups, expected {NUM_GROUPS}",
                self.groups.len()
            )));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.step > 2 {
                return Err(Error::Config(format!("group {i}: step {} > 2", g.step)));
            }
            if g.dir == ShiftDir::None && g.step != 0 {
                return Err(Error::Config(format!(
                    "group {i}: direction none requires step 0"
                )));
            }
        }
        Ok(())
    }

    /// Signed frame offset of a group: output frame k takes input frame
    /// k - offset. Steps clamp to T-1 for very short clips.
    fn offset(&self, group: usize, t_len: usize, invert: bool) -> isize {
        let g = self.groups[group];
        let step = g.step.min(t_len.saturating_sub(1)) as isize;
        let s = match g.dir {
            ShiftDir::None => 0,
            ShiftDir::Forward => step,
            ShiftDir::Backward => -step,
        };
        if invert {
            -s
        } else {
            s
        }
    }
}

/// One learnable `(M, C)` messenger block: truncated normal (std 0.02),
/// resampled outside two standard deviations.
pub fn init_messenger_block<T: Scalar>(
    m: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ArrayD<T>> {
    if m % NUM_GROUPS != 0 {
        return Err(Error::Config(format!(
            "messenger count {m} not divisible by {NUM_GROUPS}"
        )));
    }
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let mut one = ArrayD::<T>::zeros(IxDyn(&[m, c]));
    for v in one.iter_mut() {
        *v = loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 0.04 {
                break T::from_f64_(x);
            }
        };
    }
    Ok(one)
}

/// `(T, M, C)` messenger values: one block broadcast to every frame, so
/// all frames start identical.
pub fn init_messenger_values<T: Scalar>(
    t_len: usize,
    m: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ArrayD<T>> {
    let one = init_messenger_block::<T>(m, c, rng)?;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[t_len, m, c]));
    for k in 0..t_len {
        out.slice_mut(ndarray::s![k, .., ..]).assign(
            &one.view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d"),
        );
    }
    Ok(out)
}

/// Register the shared messenger block as a parameter named
/// `messengers.tokens`, drawn from the scope's init stream. The block is
/// frame-count independent; broadcast it per clip with
/// [`broadcast_messengers`], which routes every frame's gradient back into
/// the one block.
pub fn register_messengers<T: Scalar>(
    scope: &mut Scope<T>,
    m: usize,
    c: usize,
) -> Result<ParamId> {
    if m % NUM_GROUPS != 0 {
        return Err(Error::Config(format!(
            "messenger count {m} not divisible by {NUM_GROUPS}"
        )));
    }
    let mut s = scope.sub("messengers");
    Ok(s.param("tokens", &[m, c], Init::TruncNormal { std: 0.02 }))
}

/// Replicate the bound `(M, C)` block to `(T, M, C)` on the tape.
pub fn broadcast_messengers<T: Scalar>(cx: &mut Ctx<T>, id: ParamId, t_len: usize) -> Tid {
    let one = cx.p(id);
    let rows = vec![one; t_len];
    cx.tape.stack0(&rows)
}

/// Shift `(T, M, C)` tokens per the plan; `invert` applies the inverse
/// permutation (shiftback). Vacated slots are zero-filled.
pub fn shift_tokens<T: Scalar>(tokens: &ArrayD<T>, plan: &ShiftPlan, invert: bool) -> ArrayD<T> {
    let sh = tokens.shape();
    let (t_len, m, c) = (sh[0], sh[1], sh[2]);
    assert_eq!(m % NUM_GROUPS, 0, "token count not divisible into groups");
    let gsize = m / NUM_GROUPS;
    let mut out = ArrayD::<T>::zeros(IxDyn(sh));
    for g in 0..NUM_GROUPS {
        let off = plan.offset(g, t_len, invert);
        let (m0, m1) = (g * gsize, (g + 1) * gsize);
        for k in 0..t_len as isize {
            let src = k - off;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            for mi in m0..m1 {
                for ci in 0..c {
                    out[[k as usize, mi, ci]] = tokens[[src as usize, mi, ci]];
                }
            }
        }
    }
    out
}

/// Tape op: shift with gradient = the inverse shift (the maps are adjoint).
pub fn tape_shift<T: Scalar>(cx: &mut Ctx<T>, x: Tid, plan: &ShiftPlan, invert: bool) -> Tid {
    let v = shift_tokens(cx.tape.value(x), plan, invert);
    let plan = plan.clone();
    cx.tape
        .unary(x, v, move |g, _, _| vec![shift_tokens(g, &plan, !invert)])
}
