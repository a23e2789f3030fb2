//! Multi-head attention within windows: scaled dot-product scores plus an
//! optional learned relative-position bias and the shift mask.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Tape handles for one block's attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    /// `[(2w-1)^2, heads]` learned bias table, when enabled.
    pub rel_bias_table: Option<Var>,
}

/// Index of each token pair's spatial offset into the bias table.
/// `rel_index[i * n + j]` is the table row for (query i, key j).
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Attention over `x: [B*num_windows, N, C]` with `N == window^2`.
///
/// Per window and head: Q, K, V come from the fused projection; scores are
/// `Q K^T / sqrt(d_k)` plus the relative-position bias (if enabled) plus the
/// shift mask (if any); rows are softmaxed and applied to V; heads are
/// concatenated and output-projected.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: AttentionParams,
    heads: usize,
    window: usize,
    mask: Option<&Tensor<T>>,
    batch: usize,
) -> Result<Var> {
    window_attention_with_weights(tape, x, params, heads, window, mask, batch).map(|(out, _)| out)
}

/// Same as [`window_attention`] but also returns the post-softmax weight
/// tensor `[B*nW, heads, N, N]`, which invariant tests inspect directly.
pub fn window_attention_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: AttentionParams,
    heads: usize,
    window: usize,
    mask: Option<&Tensor<T>>,
    batch: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "window_attention",
            detail: format!("expected [windows, N, C], got {:?}", shape),
        });
    }
    let (bnw, n, c) = (shape[0], shape[1], shape[2]);
    if c % heads != 0 {
        return Err(Error::Shape {
            op: "window_attention",
            detail: format!("channels {c} not divisible by {heads} heads"),
        });
    }
    if n != window * window {
        return Err(Error::Shape {
            op: "window_attention",
            detail: format!("token count {n} != window^2 ({})", window * window),
        });
    }
    let dk = c / heads;

    let qkv = tape.matmul(x, params.qkv_weight)?;
    let qkv = tape.add_bias(qkv, params.qkv_bias)?;
    let qkv = tape.reshape(qkv, vec![bnw, n, 3, heads, dk])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B*nW, heads, N, dk]
    let split = |tape: &mut Tape<T>, which: usize| -> Result<Var> {
        let part = tape.slice(qkv, 0, which, 1)?;
        tape.reshape(part, vec![bnw, heads, n, dk])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let v = split(tape, 2)?;

    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let q = tape.scale(q, scale)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let mut attn = tape.matmul(q, kt)?; // [B*nW, heads, N, N]

    if let Some(table) = params.rel_bias_table {
        let rel_index = relative_position_index(window);
        // bias[h, i, j] = table[rel_index[i, j], h]
        let mut map = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for &r in &rel_index {
                map.push(r * heads + h);
            }
        }
        let bias = tape.gather(table, map, vec![heads, n, n])?;
        attn = tape.add_bias(attn, bias)?;
    }

    if let Some(mask) = mask {
        let nw = mask.shape()[0];
        let masked = tape.reshape(attn, vec![batch, nw, heads, n, n])?;
        let mask_var = tape.leaf(mask.clone());
        let mask_var = tape.reshape(mask_var, vec![1, nw, 1, n, n])?;
        let masked = tape.add(masked, mask_var)?;
        attn = tape.reshape(masked, vec![bnw, heads, n, n])?;
    }

    let weights = tape.softmax(attn, 3)?;
    let out = tape.matmul(weights, v)?; // [B*nW, heads, N, dk]
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, vec![bnw, n, c])?;
    let out = tape.matmul(out, params.proj_weight)?;
    let out = tape.add_bias(out, params.proj_bias)?;
    Ok((out, weights))
}
