//! Architecture hyperparameters, presets, and the derived parameter
//! shape table that both initialization and checkpoint loading audit
//! against.

use crate::error::{Error, Result};

/// Hyperparameters of the hierarchical windowed-attention classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input side in pixels (images are square).
    pub image_size: usize,
    /// Patch side in pixels; `image_size` must divide evenly.
    pub patch_size: usize,
    /// Channels after patch projection; doubles at each merge.
    pub embed_dim: usize,
    /// Blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub num_heads: Vec<usize>,
    /// Window side in tokens, clamped per stage to the token grid.
    pub window_size: usize,
    /// MLP hidden width as a multiple of the stage dim.
    pub mlp_ratio: f64,
    /// Output classes; fixed at 2 (0 = authentic, 1 = CGI).
    pub num_classes: usize,
    /// Learned additive attention bias indexed by token offset.
    pub use_relative_position_bias: bool,
    /// Dropout on residual branches during training; 0 disables.
    pub drop_rate: f64,
}

/// Per-stage geometry after window clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageGeometry {
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub window: usize,
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Shift for block `b`: half the window on odd blocks, zero whenever the
    /// clamped window already covers the grid.
    pub fn shift_for(&self, block: usize) -> usize {
        if block % 2 == 1 && self.window < self.grid {
            self.window / 2
        } else {
            0
        }
    }
}

impl ModelConfig {
    /// Desk-scale default: 32x32 input, three stages.
    pub fn swin_micro() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 2,
            embed_dim: 16,
            depths: vec![1, 1, 2],
            num_heads: vec![2, 2, 4],
            window_size: 4,
            mlp_ratio: 2.0,
            num_classes: 2,
            use_relative_position_bias: true,
            drop_rate: 0.0,
        }
    }

    /// Full-size four-stage variant (224x224). Provided for real-data runs;
    /// not exercised by the default test suite.
    pub fn swin_t_like() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            num_heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            num_classes: 2,
            use_relative_position_bias: true,
            drop_rate: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "swin-micro" => Ok(Self::swin_micro()),
            "swin-t-like" => Ok(Self::swin_t_like()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (expected swin-micro or swin-t-like)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("model config: {msg}")));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths ({:?}) and num_heads ({:?}) must be equally long and non-empty",
                self.depths, self.num_heads
            ));
        }
        if self.num_classes != 2 {
            return fail(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.window_size == 0 {
            return fail("window_size must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate must be in [0, 1), got {}", self.drop_rate));
        }
        for (s, geo) in self.stages()?.iter().enumerate() {
            if geo.dim % geo.heads != 0 {
                return fail(format!(
                    "stage {s}: dim {} not divisible by {} heads",
                    geo.dim, geo.heads
                ));
            }
            if geo.grid % geo.window != 0 {
                return fail(format!(
                    "stage {s}: token grid {} not divisible by clamped window {}",
                    geo.grid, geo.window
                ));
            }
        }
        Ok(())
    }

    /// Per-stage grid/dim/window geometry. Window clamps to the grid side
    /// when the grid is smaller than the configured window.
    pub fn stages(&self) -> Result<Vec<StageGeometry>> {
        let mut grid = self.image_size / self.patch_size;
        let mut out = Vec::with_capacity(self.depths.len());
        for s in 0..self.depths.len() {
            if grid == 0 {
                return Err(Error::Config(format!(
                    "model config: stage {s} has an empty token grid"
                )));
            }
            out.push(StageGeometry {
                grid,
                dim: self.embed_dim << s,
                heads: self.num_heads[s],
                blocks: self.depths[s],
                window: self.window_size.min(grid),
            });
            if s + 1 < self.depths.len() {
                if grid % 2 != 0 {
                    return Err(Error::Config(format!(
                        "model config: stage {s} grid {grid} is odd, cannot merge patches"
                    )));
                }
                grid /= 2;
            }
        }
        Ok(out)
    }

    /// Channel width of the pooled feature vector fed to the head (and to
    /// the embedding tooling).
    pub fn feature_dim(&self) -> usize {
        self.embed_dim << (self.depths.len() - 1)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio) as usize
    }

    /// Every parameter the model owns, in canonical order, with its shape.
    /// Shapes are a pure function of the config; loading audits against this.
    pub fn shape_table(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut table = Vec::new();
        let in_dim = self.patch_size * self.patch_size * 3;
        table.push(("patch_embed.proj.weight".to_string(), vec![in_dim, self.embed_dim]));
        table.push(("patch_embed.proj.bias".to_string(), vec![self.embed_dim]));
        table.push(("patch_embed.norm.gamma".to_string(), vec![self.embed_dim]));
        table.push(("patch_embed.norm.beta".to_string(), vec![self.embed_dim]));
        let stages = self.stages()?;
        for (s, geo) in stages.iter().enumerate() {
            let c = geo.dim;
            let hidden = self.mlp_hidden(c);
            for b in 0..geo.blocks {
                let p = format!("stages.{s}.blocks.{b}");
                table.push((format!("{p}.norm1.gamma"), vec![c]));
                table.push((format!("{p}.norm1.beta"), vec![c]));
                table.push((format!("{p}.attn.qkv.weight"), vec![c, 3 * c]));
                table.push((format!("{p}.attn.qkv.bias"), vec![3 * c]));
                if self.use_relative_position_bias {
                    let span = 2 * geo.window - 1;
                    table.push((format!("{p}.attn.rel_bias.table"), vec![span * span, geo.heads]));
                }
                table.push((format!("{p}.attn.proj.weight"), vec![c, c]));
                table.push((format!("{p}.attn.proj.bias"), vec![c]));
                table.push((format!("{p}.norm2.gamma"), vec![c]));
                table.push((format!("{p}.norm2.beta"), vec![c]));
                table.push((format!("{p}.mlp.fc1.weight"), vec![c, hidden]));
                table.push((format!("{p}.mlp.fc1.bias"), vec![hidden]));
                table.push((format!("{p}.mlp.fc2.weight"), vec![hidden, c]));
                table.push((format!("{p}.mlp.fc2.bias"), vec![c]));
            }
            if s + 1 < stages.len() {
                table.push((format!("stages.{s}.merge.norm.gamma"), vec![4 * c]));
                table.push((format!("stages.{s}.merge.norm.beta"), vec![4 * c]));
                table.push((format!("stages.{s}.merge.reduction.weight"), vec![4 * c, 2 * c]));
            }
        }
        let fd = self.feature_dim();
        table.push(("norm.gamma".to_string(), vec![fd]));
        table.push(("norm.beta".to_string(), vec![fd]));
        table.push(("head.weight".to_string(), vec![fd, self.num_classes]));
        table.push(("head.bias".to_string(), vec![self.num_classes]));
        Ok(table)
    }

    /// Canonical key=value rendering, used in checkpoint headers. Stable
    /// key order and formatting so identical configs serialize identically.
    pub fn to_kv_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "image_size={}\npatch_size={}\nembed_dim={}\ndepths={}\nnum_heads={}\nwindow_size={}\nmlp_ratio={}\nnum_classes={}\nuse_relative_position_bias={}\ndrop_rate={}\n",
            self.image_size,
            self.patch_size,
            self.embed_dim,
            join(&self.depths),
            join(&self.num_heads),
            self.window_size,
            self.mlp_ratio,
            self.num_classes,
            self.use_relative_position_bias,
            self.drop_rate
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::swin_micro();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("model config line '{line}' is not key=value"))
            })?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate model config key '{key}'")));
            }
            cfg.set_field(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single textual override; shared by config files and headers.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("model config: bad {what} value '{value}'"));
        let parse_usize = |v: &str, what: &str| v.parse::<usize>().map_err(|_| bad(what));
        let parse_list = |v: &str, what: &str| -> Result<Vec<usize>> {
            v.split(',').map(|d| d.trim().parse::<usize>().map_err(|_| bad(what))).collect()
        };
        match key {
            "image_size" => self.image_size = parse_usize(value, key)?,
            "patch_size" => self.patch_size = parse_usize(value, key)?,
            "embed_dim" => self.embed_dim = parse_usize(value, key)?,
            "depths" => self.depths = parse_list(value, key)?,
            "num_heads" => self.num_heads = parse_list(value, key)?,
            "window_size" => self.window_size = parse_usize(value, key)?,
            "mlp_ratio" => self.mlp_ratio = value.parse().map_err(|_| bad(key))?,
            "num_classes" => self.num_classes = parse_usize(value, key)?,
            "use_relative_position_bias" => {
                self.use_relative_position_bias = value.parse().map_err(|_| bad(key))?
            }
            "drop_rate" => self.drop_rate = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::Config(format!("unknown model config key '{other}'"))),
        }
        Ok(())
    }
}
