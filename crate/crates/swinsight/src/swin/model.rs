//! Model assembly: parameters, initialization, and the end-to-end forward
//! pass over a batch.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionParams;
use super::blocks::{patch_embed, patch_merging, swin_block, BlockParams};
use super::config::ModelConfig;
use super::window::attention_mask;
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Forward behaviour: dropout is active only in `Train`, so `Eval` is
/// deterministic given parameters and input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// Globally average-pooled pre-head representation, `[B, feature_dim]`.
    pub features: Var,
    /// Unnormalized class scores, `[B, 2]`; argmax is the prediction and
    /// ties resolve to the lower class index.
    pub logits: Var,
    /// One leaf per model parameter, in canonical parameter order.
    pub param_vars: Vec<Var>,
}

/// The parameterized network. Parameter shapes are fully determined by the
/// config; [`SwinModel::audit_shapes`] verifies that.
pub struct SwinModel<T: Scalar> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> SwinModel<T> {
    /// Fresh model with truncated-normal (std 0.02) projection weights,
    /// zero biases, and identity layernorm affines.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let table = config.shape_table()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = table
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".gamma") {
                    vec![T::one(); numel]
                } else if name.ends_with(".bias") || name.ends_with(".beta") {
                    vec![T::zero(); numel]
                } else {
                    (0..numel).map(|_| T::from_f64(trunc_normal(&mut rng, 0.02))).collect()
                };
                (name, Tensor::from_vec(shape, data).unwrap())
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// Build from externally supplied tensors (checkpoint load), verifying
    /// every name and shape against the config-derived table.
    pub fn from_parameters(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let table = config.shape_table()?;
        if table.len() != params.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: config expects {}, got {}",
                table.len(),
                params.len()
            )));
        }
        for ((en, es), (gn, gt)) in table.iter().zip(&params) {
            if en != gn || es != gt.shape() {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {en} {es:?}, got {gn} {:?}",
                    gt.shape()
                )));
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        SwinModel { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Verify stored parameter shapes against the config's shape table.
    pub fn audit_shapes(&self) -> Result<()> {
        let table = self.config.shape_table()?;
        for ((en, es), (gn, gt)) in table.iter().zip(&self.params) {
            if en != gn || es != gt.shape() {
                return Err(Error::Data(format!(
                    "shape audit failed at {en}: expected {es:?}, found {gn} {:?}",
                    gt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Run the network over `batch: [B, 3, H, W]`, returning tape handles
    /// for features and logits. `rng` drives dropout and is only consulted
    /// in `Mode::Train` with a positive drop rate.
    pub fn forward_pass(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "expected [B, 3, {0}, {0}] input, got {s:?}",
                    cfg.image_size
                ),
            });
        }
        let b = s[0];
        if b == 0 {
            return Err(Error::Shape { op: "forward", detail: "empty batch".into() });
        }

        let param_vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let var = |name: &str| -> Var { param_vars[self.index[name]] };

        let x = tape.leaf(batch.clone());
        let x = patch_embed(
            tape,
            x,
            var("patch_embed.proj.weight"),
            var("patch_embed.proj.bias"),
            cfg.patch_size,
        )?;
        let eps = T::from_f64(1e-5);
        let mut x =
            tape.layernorm(x, var("patch_embed.norm.gamma"), var("patch_embed.norm.beta"), eps)?;

        let drop_rate = if mode == Mode::Train { cfg.drop_rate } else { 0.0 };
        let stages = cfg.stages()?;
        for (si, geo) in stages.iter().enumerate() {
            let (g, c, w) = (geo.grid, geo.dim, geo.window);
            for bi in 0..geo.blocks {
                let prefix = format!("stages.{si}.blocks.{bi}");
                let shift = geo.shift_for(bi);
                let mask = if shift > 0 { Some(attention_mask::<T>(g, w, shift)) } else { None };
                let params = BlockParams {
                    norm1_gamma: var(&format!("{prefix}.norm1.gamma")),
                    norm1_beta: var(&format!("{prefix}.norm1.beta")),
                    attn: AttentionParams {
                        qkv_weight: var(&format!("{prefix}.attn.qkv.weight")),
                        qkv_bias: var(&format!("{prefix}.attn.qkv.bias")),
                        proj_weight: var(&format!("{prefix}.attn.proj.weight")),
                        proj_bias: var(&format!("{prefix}.attn.proj.bias")),
                        rel_bias_table: cfg
                            .use_relative_position_bias
                            .then(|| var(&format!("{prefix}.attn.rel_bias.table"))),
                    },
                    norm2_gamma: var(&format!("{prefix}.norm2.gamma")),
                    norm2_beta: var(&format!("{prefix}.norm2.beta")),
                    fc1_weight: var(&format!("{prefix}.mlp.fc1.weight")),
                    fc1_bias: var(&format!("{prefix}.mlp.fc1.bias")),
                    fc2_weight: var(&format!("{prefix}.mlp.fc2.weight")),
                    fc2_bias: var(&format!("{prefix}.mlp.fc2.bias")),
                };
                x = swin_block(tape, x, params, g, geo.heads, w, shift, mask.as_ref(), |t, v| {
                    dropout(t, v, drop_rate, &mut rng)
                })?;
            }

            if si + 1 < stages.len() {
                let h = tape.reshape(x, vec![b, g, g, c])?;
                x = patch_merging(
                    tape,
                    h,
                    var(&format!("stages.{si}.merge.norm.gamma")),
                    var(&format!("stages.{si}.merge.norm.beta")),
                    var(&format!("stages.{si}.merge.reduction.weight")),
                )?;
            }
        }

        let x = tape.layernorm(x, var("norm.gamma"), var("norm.beta"), eps)?;
        let features = tape.mean_axis(x, 1)?;
        let logits = tape.matmul(features, var("head.weight"))?;
        let logits = tape.add_bias(logits, var("head.bias"))?;
        Ok(ForwardPass { features, logits, param_vars })
    }

    /// Eval-mode logits for a batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_pass(&mut tape, batch, Mode::Eval, None)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Eval-mode pooled features (the vectors the embedding tooling consumes).
    pub fn extract_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_pass(&mut tape, batch, Mode::Eval, None)?;
        Ok(tape.value(pass.features).clone())
    }
}

fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let rng = rng.as_deref_mut().ok_or_else(|| {
        Error::Config("training forward with drop_rate > 0 requires an RNG".into())
    })?;
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let shape = tape.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let mask: Vec<T> = (0..numel)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale })
        .collect();
    let m = tape.leaf(Tensor::from_vec(shape, mask)?);
    tape.mul(x, m)
}

/// Normal sample with |z| <= 2 (resampled otherwise), scaled by `std`.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller; one draw per call keeps the stream simple.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
