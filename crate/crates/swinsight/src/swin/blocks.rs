//! Block-level pieces of the network: patch embedding, the transformer
//! block with optional shifted-window attention, and patch merging.

use super::attention::{window_attention, AttentionParams};
use super::window::{cyclic_shift, cyclic_unshift, window_partition, window_reverse};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping `patch x patch` patches of `x: [B, 3, H, W]`, projected
/// to the embedding width: `[B, (H/patch)*(W/patch), embed_dim]`. Tokens are
/// row-major over the patch grid; within a patch the feature order is
/// (patch row, patch col, channel).
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    patch: usize,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[2] % patch != 0 {
        return Err(Error::Shape {
            op: "patch_embed",
            detail: format!("expected square [B, 3, S, S] with S divisible by {patch}, got {s:?}"),
        });
    }
    let (b, grid) = (s[0], s[2] / patch);
    let x = tape.reshape(x, vec![b, 3, grid, patch, grid, patch])?;
    let x = tape.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = tape.reshape(x, vec![b, grid * grid, patch * patch * 3])?;
    let x = tape.matmul(x, weight)?;
    tape.add_bias(x, bias)
}

/// Tape handles for one transformer block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub attn: AttentionParams,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// One Swin block over `x: [B, G*G, C]`:
/// `x + W-MSA(LN(x))` (with cyclic shift + mask when `shift > 0`), then
/// `x + MLP(LN(x))`. Residuals preserve the shape. `branch_filter` lets the
/// caller wrap each residual branch (dropout during training).
#[allow(clippy::too_many_arguments)]
pub fn swin_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: BlockParams,
    grid: usize,
    heads: usize,
    window: usize,
    shift: usize,
    mask: Option<&Tensor<T>>,
    mut branch_filter: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid * grid {
        return Err(Error::Shape {
            op: "swin_block",
            detail: format!("expected [B, {}, C] tokens, got {s:?}", grid * grid),
        });
    }
    let (b, c) = (s[0], s[2]);
    let eps = T::from_f64(1e-5);

    let shortcut = x;
    let h = tape.layernorm(x, params.norm1_gamma, params.norm1_beta, eps)?;
    let h = tape.reshape(h, vec![b, grid, grid, c])?;
    let h = cyclic_shift(tape, h, shift)?;
    let wins = window_partition(tape, h, window)?;
    let att = window_attention(tape, wins, params.attn, heads, window, mask, b)?;
    let h = window_reverse(tape, att, window, b, grid, grid)?;
    let h = cyclic_unshift(tape, h, shift)?;
    let h = tape.reshape(h, vec![b, grid * grid, c])?;
    let h = branch_filter(tape, h)?;
    let x = tape.add(shortcut, h)?;

    let shortcut = x;
    let h = tape.layernorm(x, params.norm2_gamma, params.norm2_beta, eps)?;
    let h = tape.matmul(h, params.fc1_weight)?;
    let h = tape.add_bias(h, params.fc1_bias)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, params.fc2_weight)?;
    let h = tape.add_bias(h, params.fc2_bias)?;
    let h = branch_filter(tape, h)?;
    tape.add(shortcut, h)
}

/// Downsample `x: [B, G, G, C]` by concatenating each 2x2 neighbourhood
/// (row-major within the neighbourhood: (0,0), (0,1), (1,0), (1,1)),
/// layernorm over the 4C channels, then project to 2C:
/// `[B, (G/2)^2, 2C]`.
pub fn patch_merging<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    norm_gamma: Var,
    norm_beta: Var,
    reduction: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != s[2] || s[1] % 2 != 0 {
        return Err(Error::Shape {
            op: "patch_merging",
            detail: format!("expected [B, G, G, C] with even G, got {s:?}"),
        });
    }
    let (b, g, c) = (s[0], s[1], s[3]);
    let half = g / 2;
    let h = tape.reshape(x, vec![b, half, 2, half, 2, c])?;
    let h = tape.permute(h, &[0, 1, 3, 2, 4, 5])?;
    let h = tape.reshape(h, vec![b, half * half, 4 * c])?;
    let h = tape.layernorm(h, norm_gamma, norm_beta, T::from_f64(1e-5))?;
    tape.matmul(h, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn patch_embed_token_count() {
        // 32x32 image, patch 2 -> (32/2)^2 = 256 tokens.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![1, 3, 32, 32]));
        let w = tape.leaf(Tensor::zeros(vec![12, 16]));
        let b = tape.leaf(Tensor::zeros(vec![16]));
        let tokens = patch_embed(&mut tape, x, w, b, 2).unwrap();
        assert_eq!(tape.shape(tokens), &[1, 256, 16]);
    }

    #[test]
    fn patch_embed_zero_image_zero_bias_gives_zero_tokens() {
        let mut rng = StdRng::seed_from_u64(2);
        let w_data: Vec<f64> = (0..12 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 4, 4]));
        let w = tape.leaf(Tensor::from_vec(vec![12, 4], w_data).unwrap());
        let b = tape.leaf(Tensor::zeros(vec![4]));
        let tokens = patch_embed(&mut tape, x, w, b, 2).unwrap();
        assert!(tape.value(tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_basis_pattern_selects_projection_column() {
        // One 2x2 patch; light up a single input feature and check the token
        // equals that row of the projection matrix plus the bias.
        let in_dim = 12; // 2*2*3
        let out_dim = 5;
        let mut rng = StdRng::seed_from_u64(3);
        let w_data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Feature order within a patch is (patch row, patch col, channel):
        // pixel (1, 0), channel 2 => index (1*2 + 0)*3 + 2 = 8.
        let feature = 8;
        let mut img = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        img.data_mut()[2 * 4 + 1 * 2 + 0] = 1.0; // channel 2, y=1, x=0

        let mut tape = Tape::new();
        let x = tape.leaf(img);
        let w = tape.leaf(Tensor::from_vec(vec![in_dim, out_dim], w_data.clone()).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![out_dim], b_data.clone()).unwrap());
        let tokens = patch_embed(&mut tape, x, w, b, 2).unwrap();
        let got = tape.value(tokens).data();
        for j in 0..out_dim {
            let expect = w_data[feature * out_dim + j] + b_data[j];
            assert!((got[j] - expect).abs() < 1e-12, "feature {j}: {} vs {expect}", got[j]);
        }
    }

    fn zero_block(tape: &mut Tape<f64>, c: usize, hidden: usize) -> BlockParams {
        BlockParams {
            norm1_gamma: tape.leaf(Tensor::filled(vec![c], 1.0)),
            norm1_beta: tape.leaf(Tensor::zeros(vec![c])),
            attn: AttentionParams {
                qkv_weight: tape.leaf(Tensor::zeros(vec![c, 3 * c])),
                qkv_bias: tape.leaf(Tensor::zeros(vec![3 * c])),
                proj_weight: tape.leaf(Tensor::zeros(vec![c, c])),
                proj_bias: tape.leaf(Tensor::zeros(vec![c])),
                rel_bias_table: None,
            },
            norm2_gamma: tape.leaf(Tensor::filled(vec![c], 1.0)),
            norm2_beta: tape.leaf(Tensor::zeros(vec![c])),
            fc1_weight: tape.leaf(Tensor::zeros(vec![c, hidden])),
            fc1_bias: tape.leaf(Tensor::zeros(vec![hidden])),
            fc2_weight: tape.leaf(Tensor::zeros(vec![hidden, c])),
            fc2_bias: tape.leaf(Tensor::zeros(vec![c])),
        }
    }

    #[test]
    fn zero_weights_make_the_block_an_identity() {
        let mut rng = StdRng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 16, 4], data.clone()).unwrap());
        let params = zero_block(&mut tape, 4, 8);
        let out = swin_block(&mut tape, x, params, 4, 2, 2, 0, None, |_, v| Ok(v)).unwrap();
        assert_eq!(tape.value(out).data(), &data[..], "residual pass-through");
    }

    #[test]
    fn block_preserves_shape_with_shift_and_mask() {
        use crate::swin::attention_mask;
        let mut rng = StdRng::seed_from_u64(5);
        let data: Vec<f64> = (0..1 * 16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 16, 4], data).unwrap());
        let mut params = zero_block(&mut tape, 4, 8);
        // Give the attention real weights so the shift path is exercised.
        let mut rng2 = StdRng::seed_from_u64(6);
        let qkv: Vec<f64> = (0..4 * 12).map(|_| rng2.gen_range(-0.5..0.5)).collect();
        let proj: Vec<f64> = (0..16).map(|_| rng2.gen_range(-0.5..0.5)).collect();
        params.attn.qkv_weight = tape.leaf(Tensor::from_vec(vec![4, 12], qkv).unwrap());
        params.attn.proj_weight = tape.leaf(Tensor::from_vec(vec![4, 4], proj).unwrap());
        let mask = attention_mask::<f64>(4, 2, 1);
        let out = swin_block(&mut tape, x, params, 4, 2, 2, 1, Some(&mask), |_, v| Ok(v)).unwrap();
        assert_eq!(tape.shape(out), &[1, 16, 4]);
    }

    #[test]
    fn merging_halves_grid_and_doubles_channels() {
        let c = 3;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![1, 2, 2, c]));
        let g = tape.leaf(Tensor::filled(vec![4 * c], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![4 * c]));
        let mut red = Tensor::zeros(vec![4 * c, 2 * c]);
        for i in 0..2 * c {
            red.data_mut()[i * 2 * c + i] = 1.0;
        }
        let r = tape.leaf(red);
        let out = patch_merging(&mut tape, x, g, b, r).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 2 * c]);
    }

    #[test]
    fn merging_concat_order_matches_index_oracle() {
        // Value encodes (row, col, channel); after merging, the 4C vector
        // must hold the neighbourhood in (0,0), (0,1), (1,0), (1,1) order.
        let g = 4;
        let c = 2;
        let mut x = Tensor::<f64>::zeros(vec![1, g, g, c]);
        for y in 0..g {
            for xx in 0..g {
                for ch in 0..c {
                    x.data_mut()[(y * g + xx) * c + ch] = (y * 100 + xx * 10 + ch) as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gamma = tape.leaf(Tensor::filled(vec![4 * c], 1.0));
        let beta = tape.leaf(Tensor::zeros(vec![4 * c]));
        let mut red = Tensor::zeros(vec![4 * c, 4 * c]);
        for i in 0..4 * c {
            red.data_mut()[i * 4 * c + i] = 1.0;
        }
        let r = tape.leaf(red);
        let out = patch_merging(&mut tape, xv, gamma, beta, r).unwrap();

        // Index oracle: token t = (ty, tx) gathers cells (2ty+dy, 2tx+dx).
        let half = g / 2;
        for ty in 0..half {
            for tx in 0..half {
                let mut expect = Vec::with_capacity(4 * c);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for ch in 0..c {
                        expect.push(x.data()[((2 * ty + dy) * g + 2 * tx + dx) * c + ch]);
                    }
                }
                // Apply the same layernorm to the oracle vector.
                let mean = expect.iter().sum::<f64>() / (4 * c) as f64;
                let var =
                    expect.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (4 * c) as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                let token = &tape.value(out).data()
                    [((ty * half + tx) * 4 * c)..((ty * half + tx + 1) * 4 * c)];
                for (got, want) in token.iter().zip(&expect) {
                    assert!(
                        (got - (want - mean) * inv).abs() < 1e-9,
                        "token ({ty},{tx}): {got} vs normalized {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn merging_rejects_odd_grids() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![1, 3, 3, 2]));
        let g = tape.leaf(Tensor::filled(vec![8], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![8]));
        let r = tape.leaf(Tensor::zeros(vec![8, 4]));
        assert!(patch_merging(&mut tape, x, g, b, r).is_err());
    }

    #[test]
    fn full_window_block_matches_global_attention_oracle() {
        // With shift 0 and window == grid side, the block's attention is
        // plain global attention; compare against a direct implementation.
        let grid = 2;
        let n = grid * grid;
        let c = 4;
        let heads = 2;
        let dk = c / heads;
        let mut rng = StdRng::seed_from_u64(7);
        let x_data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qkv_w: Vec<f64> = (0..c * 3 * c).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let qkv_b: Vec<f64> = (0..3 * c).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let proj_w: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let proj_b: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect();

        let mut tape = Tape::new();
        let grid_x = tape
            .leaf(Tensor::from_vec(vec![1, grid, grid, c], x_data.clone()).unwrap());
        let wins = window_partition(&mut tape, grid_x, grid).unwrap();
        let params = AttentionParams {
            qkv_weight: tape.leaf(Tensor::from_vec(vec![c, 3 * c], qkv_w.clone()).unwrap()),
            qkv_bias: tape.leaf(Tensor::from_vec(vec![3 * c], qkv_b.clone()).unwrap()),
            proj_weight: tape.leaf(Tensor::from_vec(vec![c, c], proj_w.clone()).unwrap()),
            proj_bias: tape.leaf(Tensor::from_vec(vec![c], proj_b.clone()).unwrap()),
            rel_bias_table: None,
        };
        let out = window_attention(&mut tape, wins, params, heads, grid, None, 1).unwrap();
        let got = tape.value(out).data();

        // Direct global-attention oracle: plain loops, no windowing code.
        let mut q = vec![0.0; n * c];
        let mut k = vec![0.0; n * c];
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let (mut sq, mut sk, mut sv) = (qkv_b[j], qkv_b[c + j], qkv_b[2 * c + j]);
                for p in 0..c {
                    sq += x_data[i * c + p] * qkv_w[p * 3 * c + j];
                    sk += x_data[i * c + p] * qkv_w[p * 3 * c + c + j];
                    sv += x_data[i * c + p] * qkv_w[p * 3 * c + 2 * c + j];
                }
                q[i * c + j] = sq;
                k[i * c + j] = sk;
                v[i * c + j] = sv;
            }
        }
        let mut ctx = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for d in 0..dk {
                        s += q[i * c + h * dk + d] * k[j * c + h * dk + d];
                    }
                    scores[j] = s / (dk as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..dk {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += exps[j] / z * v[j * c + h * dk + d];
                    }
                    ctx[i * c + h * dk + d] = s;
                }
            }
        }
        for i in 0..n {
            for j in 0..c {
                let mut s = proj_b[j];
                for p in 0..c {
                    s += ctx[i * c + p] * proj_w[p * c + j];
                }
                assert!(
                    (got[i * c + j] - s).abs() < 1e-10,
                    "token {i} ch {j}: {} vs oracle {s}",
                    got[i * c + j]
                );
            }
        }
    }
}
