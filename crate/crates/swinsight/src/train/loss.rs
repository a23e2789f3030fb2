//! Cross-entropy over logits, composed from tape primitives so the
//! gradient (softmax(logits) - onehot) / B falls out of the chain rule.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Floor inside the log; keeps 32-bit softmax underflow away from -inf.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean over the batch of the negative log-probability of the true class.
/// `logits: [B, C]`, `labels[i] in [0, C)`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("expected [B, C] logits, got {shape:?}"),
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if b != labels.len() || b == 0 {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} labels for batch of {b}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = tape.softmax(logits, 1)?;
    let map: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = tape.gather(probs, map, vec![b])?;
    let logs = tape.log_clamped(picked, T::from_f64(LOG_FLOOR))?;
    let total = tape.sum_all(logs)?;
    tape.scale(total, T::from_f64(-1.0 / b as f64))
}
