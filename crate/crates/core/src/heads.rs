//! The two decoders on top of the `[CLS]` representation.
//!
//! The multi-choice head scores the `n` option encodings of one question
//! with a shared `h x 1` projection and normalises with a softmax over the
//! option axis, trained by cross-entropy on the gold index.
//!
//! The binary head scores a single encoding with an `h x 2` projection; the
//! probability that the answer is correct is the class-1 entry of a
//! two-way softmax. A single-logit sigmoid is the same model with one
//! redundant degree of freedom, since `softmax(z0, z1)[1] = sigmoid(z1 - z0)`.
//!
//! All training losses are taken from logits through a stable log-softmax.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_softmax_row, softmax_row, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{normal_tensor, INIT_STD};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking a log.
pub const LOG_FLOOR: f64 = 1e-12;

static LOG_FLOOR_HITS: AtomicU64 = AtomicU64::new(0);

/// How many times [`multi_choice_loss`] had to clamp a zero probability.
pub fn log_floor_hits() -> u64 {
    LOG_FLOOR_HITS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChoiceHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHead {
    pub w: ParamId,
    pub b: ParamId,
}

fn check_width(t: &Tensor, h: usize) -> Result<()> {
    if t.cols() != h {
        return Err(Error::shape("head input", t.shape(), &[h]));
    }
    Ok(())
}

impl MultiChoiceHead {
    pub const W_NAME: &'static str = "head.mc.w";
    pub const B_NAME: &'static str = "head.mc.b";

    pub fn init(hidden: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(Self::W_NAME, normal_tensor(rng, &[hidden, 1], INIT_STD));
        let b = store.add(Self::B_NAME, Tensor::zeros(&[1]));
        MultiChoiceHead { w, b }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Load(format!("missing parameter {n}")));
        Ok(MultiChoiceHead {
            w: find(Self::W_NAME)?,
            b: find(Self::B_NAME)?,
        })
    }

    /// Option logits as a `1 x n` row from `n x h` encodings.
    pub fn logits_on(&self, tape: &mut Tape<'_>, t: Var) -> Result<Var> {
        let n = tape.value(t).rows();
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul(t, w)?;
        let z = tape.add(z, b)?;
        tape.reshape(z, &[1, n])
    }

    /// `-log softmax(logits)[gold]` on the tape.
    pub fn loss_on(&self, tape: &mut Tape<'_>, t: Var, gold: usize) -> Result<Var> {
        let z = self.logits_on(tape, t)?;
        let ls = tape.log_softmax(z)?;
        let picked = tape.pick(ls, &[gold])?;
        let s = tape.sum(picked)?;
        tape.scale(s, -1.0)
    }

    pub fn logits(&self, store: &ParamStore, t: &Tensor) -> Result<Vec<f64>> {
        let w = &store.get(self.w).value;
        let b = store.get(self.b).value.data()[0];
        check_width(t, w.rows())?;
        Ok((0..t.rows())
            .map(|r| t.row(r).iter().zip(w.data()).map(|(x, w)| x * w).sum::<f64>() + b)
            .collect())
    }

    pub fn probs(&self, store: &ParamStore, t: &Tensor) -> Result<Vec<f64>> {
        multi_choice_probs(&self.logits(store, t)?)
    }
}

impl BinaryHead {
    pub const W_NAME: &'static str = "head.bc.w";
    pub const B_NAME: &'static str = "head.bc.b";

    pub fn init(hidden: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(Self::W_NAME, normal_tensor(rng, &[hidden, 2], INIT_STD));
        let b = store.add(Self::B_NAME, Tensor::zeros(&[2]));
        BinaryHead { w, b }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Load(format!("missing parameter {n}")));
        Ok(BinaryHead {
            w: find(Self::W_NAME)?,
            b: find(Self::B_NAME)?,
        })
    }

    /// `m x 2` logits (incorrect, correct) from `m x h` encodings.
    pub fn logits_on(&self, tape: &mut Tape<'_>, t: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul(t, w)?;
        tape.add(z, b)
    }

    /// Sum over rows of `weight[r] * -log softmax(z_r)[label[r]]`.
    pub fn loss_on(&self, tape: &mut Tape<'_>, t: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let z = self.logits_on(tape, t)?;
        let ls = tape.log_softmax(z)?;
        let picked = tape.pick(ls, labels)?;
        let weighted = tape.mul_const(picked, weights.iter().map(|w| -w).collect())?;
        tape.sum(weighted)
    }

    pub fn logits(&self, store: &ParamStore, t: &Tensor) -> Result<Vec<[f64; 2]>> {
        let w = &store.get(self.w).value;
        let b = store.get(self.b).value.data();
        check_width(t, w.rows())?;
        Ok((0..t.rows())
            .map(|r| {
                let mut z = [b[0], b[1]];
                for (i, x) in t.row(r).iter().enumerate() {
                    z[0] += x * w.data()[2 * i];
                    z[1] += x * w.data()[2 * i + 1];
                }
                z
            })
            .collect())
    }

    /// `g` for every row of `t`.
    pub fn scores(&self, store: &ParamStore, t: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(store, t)?.into_iter().map(binary_score_from_logits).collect())
    }
}

/// Softmax over option logits.
pub fn multi_choice_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 options, got {}", logits.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite option logit".into()));
    }
    Ok(softmax_row(logits))
}

/// `-ln probs[gold]`, clamping a zero probability at [`LOG_FLOOR`].
pub fn multi_choice_loss(probs: &[f64], gold: usize) -> Result<f64> {
    let p = *probs
        .get(gold)
        .ok_or_else(|| Error::Usage(format!("gold index {gold} out of range for {} options", probs.len())))?;
    if p < LOG_FLOOR {
        LOG_FLOOR_HITS.fetch_add(1, Ordering::Relaxed);
        return Ok(-LOG_FLOOR.ln());
    }
    Ok(-p.ln())
}

pub fn multi_choice_loss_from_logits(logits: &[f64], gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::Usage(format!("gold index {gold} out of range for {} options", logits.len())));
    }
    Ok(-log_softmax_row(logits)[gold])
}

pub fn binary_score_from_logits(z: [f64; 2]) -> f64 {
    softmax_row(&z)[1]
}

/// Probability that the answer is correct, from one `[CLS]` vector.
pub fn binary_score(t_cls: &[f64], w: &Tensor, b: [f64; 2]) -> Result<f64> {
    if w.shape() != [t_cls.len(), 2] {
        return Err(Error::shape("binary_score", &[t_cls.len()], w.shape()));
    }
    let mut z = b;
    for (i, x) in t_cls.iter().enumerate() {
        z[0] += x * w.data()[2 * i];
        z[1] += x * w.data()[2 * i + 1];
    }
    Ok(binary_score_from_logits(z))
}

/// Bernoulli cross-entropy from a probability `g` in (0,1).
pub fn binary_loss(g: f64, y: u8) -> f64 {
    if y == 1 {
        -g.ln()
    } else {
        -(-g).ln_1p()
    }
}

/// Bernoulli cross-entropy from the two logits, via stable log-softmax.
pub fn binary_loss_from_logits(z: [f64; 2], y: u8) -> f64 {
    -log_softmax_row(&z)[usize::from(y == 1)]
}
