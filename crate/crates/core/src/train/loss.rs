use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Mean over all elements of `(pred - scale * target)^2`.
pub fn pixel_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    scale: f64,
) -> Result<Var> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("loss scale must be > 0, got {scale}")));
    }
    let s = T::from_f64_lossy(scale);
    tape.squared_error(pred, target.map(|v| v * s))
}
