//! Joint objective: sigmoid binary cross-entropy plus dice loss.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::layers::{ensure_same_shape, sigmoid};

/// Additive smoothing in the dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1.0;

/// Loss components; `total = bce + dice`.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
}

impl LossValue {
    pub fn scalars(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((f(&self.total)?, f(&self.bce)?, f(&self.dice)?))
    }
}

fn check_target(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(logits, target, "prediction and target")?;
    let target = target.to_dtype(logits.dtype())?;
    // binary iff t * (1 - t) vanishes everywhere
    let off = target
        .mul(&(target.ones_like()? - &target)?)?
        .abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if off != 0.0 {
        return Err(Error::invalid("target mask must contain only 0 and 1"));
    }
    Ok(target)
}

/// Mean of `-[y log σ(z) + (1 - y) log(1 - σ(z))]`, evaluated as
/// `max(z, 0) - z·y + log(1 + exp(-|z|))` so it stays finite for any
/// finite logit.
pub fn sigmoid_bce(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let y = check_target(logits, target)?;
    bce_unchecked(logits, &y)
}

fn bce_unchecked(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    let softplus = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((z.relu()? - z.mul(y)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

/// `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)` with `p = σ(z)`.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let y = check_target(logits, target)?;
    dice_unchecked(logits, &y)
}

fn dice_unchecked(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    let p = sigmoid(z)?;
    let inter = p.mul(y)?.sum_all()?;
    let num = ((inter * 2.0)? + DICE_SMOOTHING)?;
    let den = ((p.sum_all()? + y.sum_all()?)? + DICE_SMOOTHING)?;
    Ok(num.div(&den)?.neg()?.affine(1.0, 1.0)?)
}

pub fn total_loss(logits: &Tensor, target: &Tensor) -> Result<LossValue> {
    let y = check_target(logits, target)?;
    let bce = bce_unchecked(logits, &y)?;
    let dice = dice_unchecked(logits, &y)?;
    Ok(LossValue {
        total: (&bce + &dice)?,
        bce,
        dice,
    })
}
