//! Supervised objective: smooth-L1 reconstruction, perceptual feature
//! distance, and the weighted total including the adversarial term.
//!
//! The perceptual term compares activations of a fixed convolutional
//! feature stack at three depths, mirroring the classic 2-2-3 conv layout
//! with pooling between groups (taps after the 2nd, 4th, and 7th
//! convolutions). When pretrained tensors are unavailable the stack is
//! filled with fixed-seed random weights: the loss only needs a frozen
//! nonlinear feature map, and every test exercises it through the same
//! code path a pretrained stack would use. Inputs are consumed in [0,1]
//! with no channel-statistics normalization; pretrained weights supplied
//! via [`PerceptualExtractor::from_weights`] must expect that range.

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tape::Tid;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the perceptual term inside the supervised loss.
    pub gamma1: f64,
    /// Weight of the adversarial cross-entropy in the total.
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma1: 0.04,
            gamma2: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {} and {}",
                self.gamma1, self.gamma2
            )));
        }
        Ok(())
    }
}

/// Conv widths of the three groups; the tap after each group is compared.
const GROUP_WIDTHS: [usize; 3] = [8, 16, 32];
/// Convs per group (pooling between groups).
const GROUP_DEPTHS: [usize; 3] = [2, 2, 3];

/// Frozen feature stack for the perceptual loss. Holds raw tensors, not
/// trainable parameters: they enter the tape as constants, so gradients
/// flow through the stack to its input but never into its weights.
pub struct PerceptualExtractor<T> {
    convs: Vec<(ArrayD<T>, ArrayD<T>)>,
}

fn conv_shapes() -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    let mut cin = 3;
    for (g, &width) in GROUP_WIDTHS.iter().enumerate() {
        for _ in 0..GROUP_DEPTHS[g] {
            shapes.push((cin, width));
            cin = width;
        }
    }
    shapes
}

impl<T: Scalar> PerceptualExtractor<T> {
    /// Fixed-seed random stack; the same seed reproduces the same weights
    /// bitwise.
    pub fn new_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = conv_shapes()
            .into_iter()
            .map(|(cin, cout)| {
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                let w = ArrayD::from_shape_simple_fn(IxDyn(&[3, 3, cin, cout]), || {
                    T::from_f64_(rng.gen_range(-bound..bound))
                });
                let b = ArrayD::zeros(IxDyn(&[cout]));
                (w, b)
            })
            .collect();
        PerceptualExtractor { convs }
    }

    /// Adopt externally supplied (e.g. pretrained) tensors. Expects one
    /// `(w, b)` pair per conv with weights `(3, 3, cin, cout)` chaining
    /// through the group widths.
    pub fn from_weights(tensors: Vec<(ArrayD<T>, ArrayD<T>)>) -> Result<Self> {
        let shapes = conv_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} conv tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, ((w, b), (cin, cout))) in tensors.iter().zip(&shapes).enumerate() {
            if w.shape() != [3, 3, *cin, *cout] {
                return Err(Error::Shape(format!(
                    "conv {i} weights {:?}, expected (3, 3, {cin}, {cout})",
                    w.shape()
                )));
            }
            if b.shape() != [*cout] {
                return Err(Error::Shape(format!(
                    "conv {i} bias {:?}, expected ({cout},)",
                    b.shape()
                )));
            }
        }
        Ok(PerceptualExtractor { convs: tensors })
    }

    /// Feature maps at the three taps for an `(H, W, 3)` frame in [0,1].
    /// H and W must be divisible by 4 (two 2x pools).
    pub fn features(&self, cx: &mut Ctx<T>, frame: Tid) -> Result<Vec<Tid>> {
        let sh = cx.tape.shape(frame).to_vec();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::Shape(format!("expected (H,W,3) frame, got {sh:?}")));
        }
        if sh[0] % 4 != 0 || sh[1] % 4 != 0 {
            return Err(Error::Shape(format!(
                "frame extent {}x{} not divisible by 4",
                sh[0], sh[1]
            )));
        }
        let mut x = cx.tape.reshape(frame, &[1, sh[0], sh[1], 3]);
        let mut taps = Vec::new();
        let mut conv_iter = self.convs.iter();
        for (g, &depth) in GROUP_DEPTHS.iter().enumerate() {
            if g > 0 {
                x = cx.tape.avgpool2(x);
            }
            for _ in 0..depth {
                let (w, b) = conv_iter.next().expect("conv count fixed");
                let wsh = w.shape().to_vec();
                let wt = cx.tape.constant(w.clone());
                let bt = cx.tape.constant(b.clone());
                let wmat = cx.tape.reshape(wt, &[9 * wsh[2], wsh[3]]);
                let cols = cx.tape.im2col(x, 3, 1, 1);
                let y = cx.tape.matmul(cols, wmat);
                let y = cx.tape.add_bias(y, bt);
                let xsh = cx.tape.shape(x).to_vec();
                let y = cx.tape.reshape(y, &[xsh[0], xsh[1], xsh[2], wsh[3]]);
                x = cx.tape.relu(y);
            }
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Sum of per-tap mean-squared feature distances.
pub fn perceptual_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    pred: Tid,
    gt: Tid,
    extractor: &PerceptualExtractor<T>,
) -> Result<Tid> {
    let fp = extractor.features(cx, pred)?;
    let fg = extractor.features(cx, gt)?;
    let mut total = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let m = cx.tape.mse(a, b);
        total = Some(match total {
            None => m,
            Some(t) => cx.tape.add(t, m),
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Per-term values of one objective evaluation, for logging and
/// non-finite detection.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossComponents {
    pub smooth_l1: f64,
    pub perceptual: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn finite(&self) -> bool {
        self.smooth_l1.is_finite()
            && self.perceptual.is_finite()
            && self.cross_entropy.is_finite()
            && self.total.is_finite()
    }
}

/// total = smooth_l1 + gamma1 * perceptual + gamma2 * cross_entropy.
/// The gradient-reversal scaling of the adversarial term happens upstream
/// where the discriminator reads encoder features, not here. `logits =
/// None` (adversarial branch ablated) drops the cross-entropy term and
/// reports it as 0.
pub fn total_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    pred: Tid,
    gt: Tid,
    logits: Option<Tid>,
    label: usize,
    weights: LossWeights,
    extractor: &PerceptualExtractor<T>,
) -> Result<(Tid, LossComponents)> {
    weights.validate()?;
    if cx.tape.shape(pred) != cx.tape.shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            cx.tape.shape(pred),
            cx.tape.shape(gt)
        )));
    }
    let l1 = cx.tape.smooth_l1(pred, gt);
    let perc = perceptual_loss(cx, pred, gt, extractor)?;
    let wp = cx.tape.scale(perc, T::from_f64_(weights.gamma1));
    let s = cx.tape.add(l1, wp);
    let (total, ce_val) = match logits {
        Some(lg) => {
            let ce = cx.tape.cross_entropy_logits(lg, label);
            let wc = cx.tape.scale(ce, T::from_f64_(weights.gamma2));
            (cx.tape.add(s, wc), cx.tape.value(ce)[[]].to_f64_())
        }
        None => (s, 0.0),
    };
    let comp = LossComponents {
        smooth_l1: cx.tape.value(l1)[[]].to_f64_(),
        perceptual: cx.tape.value(perc)[[]].to_f64_(),
        cross_entropy: ce_val,
        total: cx.tape.value(total)[[]].to_f64_(),
    };
    Ok((total, comp))
}
