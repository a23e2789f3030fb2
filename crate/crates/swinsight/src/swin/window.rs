//! Window partition/reverse, cyclic shift, and the shifted-window
//! attention mask.
//!
//! Token grids are `[B, H, W, C]`; windows enumerate row-major over the
//! window grid and tokens within a window are row-major too. Partition and
//! reverse are exact inverses built from reshape/permute, so round trips
//! are bit-exact and gradients are the inverse rearrangement.

use crate::error::Result;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Additive score offset for token pairs that cross a shift boundary.
/// Large enough to zero the softmax weight in 32-bit without overflowing.
pub const MASK_VALUE: f64 = -1.0e4;

/// `[B, H, W, C]` -> `[B*num_windows, window*window, C]`.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, window: usize) -> Result<Var> {
    let (b, h, w, c) = grid_dims(tape, x)?;
    let (gh, gw) = (h / window, w / window);
    let split = tape.reshape(x, vec![b, gh, window, gw, window, c])?;
    let grouped = tape.permute(split, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(grouped, vec![b * gh * gw, window * window, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    windows: Var,
    window: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let c = *tape.shape(windows).last().unwrap();
    let (gh, gw) = (h / window, w / window);
    let split = tape.reshape(windows, vec![b, gh, gw, window, window, c])?;
    let grouped = tape.permute(split, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(grouped, vec![b, h, w, c])
}

/// Torus roll of the token grid by `(-shift, -shift)`; `shift == 0` is the
/// identity. [`cyclic_unshift`] restores the input exactly.
pub fn cyclic_shift<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: usize) -> Result<Var> {
    roll_up(tape, x, shift, shift)
}

pub fn cyclic_unshift<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: usize) -> Result<Var> {
    if shift == 0 {
        return Ok(x);
    }
    let (_, h, w, _) = grid_dims(tape, x)?;
    roll_up(tape, x, h - shift, w - shift)
}

fn roll_up<T: Scalar>(tape: &mut Tape<T>, x: Var, dy: usize, dx: usize) -> Result<Var> {
    let mut out = x;
    if dy > 0 {
        let (_, h, _, _) = grid_dims(tape, out)?;
        let tail = tape.slice(out, 1, dy, h - dy)?;
        let head = tape.slice(out, 1, 0, dy)?;
        out = tape.concat(&[tail, head], 1)?;
    }
    if dx > 0 {
        let (_, _, w, _) = grid_dims(tape, out)?;
        let tail = tape.slice(out, 2, dx, w - dx)?;
        let head = tape.slice(out, 2, 0, dx)?;
        out = tape.concat(&[tail, head], 2)?;
    }
    Ok(out)
}

fn grid_dims<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<(usize, usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(crate::error::Error::Shape {
            op: "window",
            detail: format!("expected [B, H, W, C] token grid, got {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Per-window additive mask for a shifted grid: `[num_windows, N, N]` with
/// zero where both tokens came from the same pre-shift region and
/// [`MASK_VALUE`] where the pair crosses a boundary. All zero when shift is 0.
pub fn attention_mask<T: Scalar>(grid: usize, window: usize, shift: usize) -> Tensor<T> {
    let nw = (grid / window) * (grid / window);
    let n = window * window;
    if shift == 0 {
        return Tensor::zeros(vec![nw, n, n]);
    }
    // Group id per grid cell: which contiguous region the cell occupied
    // before the cyclic shift. Pairs from different regions are not real
    // neighbours and must not attend to each other.
    let region = |coord: usize| -> usize {
        if coord < grid - window {
            0
        } else if coord < grid - shift {
            1
        } else {
            2
        }
    };
    let mut group = vec![0usize; grid * grid];
    for y in 0..grid {
        for x in 0..grid {
            // The shifted grid at (y, x) holds the original cell
            // (y + shift, x + shift) mod grid; regions are defined on the
            // shifted layout directly, as in the cyclic-shift construction.
            group[y * grid + x] = region(y) * 3 + region(x);
        }
    }
    let gw = grid / window;
    let mut mask = Tensor::zeros(vec![nw, n, n]);
    let neg = T::from_f64(MASK_VALUE);
    for wy in 0..gw {
        for wx in 0..gw {
            let wi = wy * gw + wx;
            for i in 0..n {
                let gi = group[(wy * window + i / window) * grid + wx * window + i % window];
                for j in 0..n {
                    let gj =
                        group[(wy * window + j / window) * grid + wx * window + j % window];
                    if gi != gj {
                        mask.data_mut()[(wi * n + i) * n + j] = neg;
                    }
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid_tensor(b: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..b * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![b, h, w, c], data).unwrap()
    }

    #[test]
    fn partition_enumerates_windows_row_major() {
        // 4x4 grid, window 2: cell value encodes its (row, col).
        let data: Vec<f64> = (0..16).map(|i| (i / 4 * 10 + i % 4) as f64).collect();
        let x = Tensor::from_vec(vec![1, 4, 4, 1], data).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let wins = window_partition(&mut tape, v, 2).unwrap();
        assert_eq!(tape.shape(wins), &[4, 4, 1]);
        // Window 0 holds grid cells (0,0), (0,1), (1,0), (1,1).
        assert_eq!(&tape.value(wins).data()[..4], &[0.0, 1.0, 10.0, 11.0]);
         // Window 1 is the next window to the right.
        assert_eq!(&tape.value(wins).data()[4..8], &[2.0, 3.0, 12.0, 13.0]);
    }

    #[test]
    fn full_grid_window_is_single_window_in_row_major_order() {
        let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let x = Tensor::from_vec(vec![1, 3, 3, 1], data.clone()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let wins = window_partition(&mut tape, v, 3).unwrap();
        assert_eq!(tape.shape(wins), &[1, 9, 1]);
        assert_eq!(tape.value(wins).data(), &data[..]);
    }

    #[test]
    fn partition_reverse_round_trip_bit_exact() {
        let x = grid_tensor(2, 8, 8, 4, 42);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let wins = window_partition(&mut tape, v, 4).unwrap();
        let back = window_reverse(&mut tape, wins, 4, 2, 8, 8).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn shift_semantics_on_2x2() {
        // Grid a b / c d, shift 1 -> roll (-1, -1) -> d c / b a.
        let x = Tensor::from_vec(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let shifted = cyclic_shift(&mut tape, v, 1).unwrap();
        assert_eq!(tape.value(shifted).data(), &[4.0, 3.0, 2.0, 1.0]);
        let back = cyclic_unshift(&mut tape, shifted, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shift_zero_is_identity() {
        let x = grid_tensor(1, 4, 4, 2, 7);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = cyclic_shift(&mut tape, v, 0).unwrap();
        assert_eq!(s, v);
        assert_eq!(tape.value(s).data(), x.data());
    }

    #[test]
    fn partition_gradient_is_inverse_rearrangement() {
        let x = grid_tensor(1, 4, 4, 1, 3);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let wins = window_partition(&mut tape, v, 2).unwrap();
        let back = window_reverse(&mut tape, wins, 2, 1, 4, 4).unwrap();
        let doubled = tape.scale(back, 2.0).unwrap();
        let loss = tape.sum_all(doubled).unwrap();
        tape.backward(loss).unwrap();
        // d(sum 2x)/dx = 2 everywhere: the rearrangement chain is a bijection.
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn mask_zero_when_unshifted_and_symmetric_otherwise() {
        let zero: Tensor<f64> = attention_mask(8, 4, 0);
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mask: Tensor<f64> = attention_mask(8, 4, 2);
        let n = 16;
        let nw = 4;
        assert_eq!(mask.shape(), &[nw, n, n]);
        // Permitted/forbidden is symmetric and the diagonal is permitted.
        for w in 0..nw {
            for i in 0..n {
                assert_eq!(mask.data()[(w * n + i) * n + i], 0.0);
                for j in 0..n {
                    let a = mask.data()[(w * n + i) * n + j];
                    let b = mask.data()[(w * n + j) * n + i];
                    assert_eq!(a, b);
                }
            }
        }
        // The bottom-right window mixes all regions, so some pairs are masked.
        assert!(mask.data().iter().any(|&v| v == MASK_VALUE));
        // Top-left window never crosses a boundary.
        assert!(mask.data()[..n * n].iter().all(|&v| v == 0.0));
    }
}
