use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::AdjacencyStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Cnn,
    Vit,
    Swin,
    SwinResidual,
    LinaVit,
    GatVit,
    MapVigat,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Cnn,
        ModelVariant::Vit,
        ModelVariant::Swin,
        ModelVariant::SwinResidual,
        ModelVariant::LinaVit,
        ModelVariant::GatVit,
        ModelVariant::MapVigat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Cnn => "cnn",
            ModelVariant::Vit => "vit",
            ModelVariant::Swin => "swin",
            ModelVariant::SwinResidual => "swin_residual",
            ModelVariant::LinaVit => "lina_vit",
            ModelVariant::GatVit => "gat_vit",
            ModelVariant::MapVigat => "map_vigat",
        }
    }

    pub fn is_swin(self) -> bool {
        matches!(self, ModelVariant::Swin | ModelVariant::SwinResidual)
    }

    pub fn has_gat(self) -> bool {
        matches!(self, ModelVariant::GatVit | ModelVariant::MapVigat)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

/// Architecture hyperparameters.
///
/// When deserialized, omitted fields take the defaults of the given variant
/// (see [`ModelConfig::for_variant`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartialModelConfig")]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Width of the hidden dense layer of the regression head.
    pub head_hidden: usize,
    /// Dropout applied after the hidden head layer during training.
    pub dropout_rate: f64,
    /// Window side in patches (Swin).
    pub window_size: usize,
    /// Cyclic shift in patches applied by odd Swin blocks.
    pub shift_size: usize,
    /// Adjacency used by `map_vigat`.
    pub adjacency_strategy: AdjacencyStrategy,
    /// Spatial kernel width in patch units.
    pub sigma: f64,
    /// Output channels of the 3×3 conv/pool stages (CNN).
    pub conv_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_variant(ModelVariant::Vit)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: ModelVariant) -> Self {
        let base = ModelConfig {
            variant,
            image_size: 126,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            ffn_dim: 128,
            head_hidden: 2048,
            dropout_rate: 0.5,
            window_size: 4,
            shift_size: 2,
            adjacency_strategy: AdjacencyStrategy::Spatial,
            sigma: 1.0,
            conv_channels: vec![64, 256, 192, 128],
            seed: 0,
        };
        if variant.is_swin() {
            ModelConfig {
                image_size: 128,
                patch_size: 8,
                embed_dim: 96,
                num_heads: 6,
                ffn_dim: 192,
                head_hidden: 512,
                dropout_rate: 0.0,
                ..base
            }
        } else {
            base
        }
    }

    /// Reduced configuration for fast checks: 32×32 input, 8-pixel patches
    /// (4×4 grid), two blocks, narrow layers; the CNN keeps two conv stages.
    pub fn small(variant: ModelVariant) -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 16,
            head_hidden: 16,
            window_size: 2,
            shift_size: 1,
            conv_channels: vec![4, 8],
            ..ModelConfig::for_variant(variant)
        }
    }

    /// Patch grid `(rows, cols)`; zero for the CNN.
    pub fn grid(&self) -> (usize, usize) {
        if self.variant == ModelVariant::Cnn {
            return (0, 0);
        }
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Spatial side of the CNN feature map before flattening.
    pub fn cnn_output_side(&self) -> Option<usize> {
        let mut side = self.image_size;
        for _ in &self.conv_channels {
            if side < 4 {
                return None;
            }
            side = (side - 2) / 2;
        }
        Some(side)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be positive".into());
        }
        if self.variant == ModelVariant::Cnn {
            if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                return bad("conv_channels must be non-empty and positive".into());
            }
            return match self.cnn_output_side() {
                Some(s) if s >= 1 => Ok(()),
                _ => bad(format!(
                    "image_size {} is too small for {} conv/pool stages",
                    self.image_size,
                    self.conv_channels.len()
                )),
            };
        }
        if self.patch_size == 0 || self.image_size < self.patch_size {
            return bad(format!(
                "image_size {} is smaller than one {}-pixel patch",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.ffn_dim == 0 {
            return bad("num_blocks and ffn_dim must be positive".into());
        }
        if self.variant.is_swin() {
            let (gh, _) = self.grid();
            if self.window_size == 0 || gh % self.window_size != 0 {
                return bad(format!(
                    "patch grid {gh}x{gh} is not tiled by {}x{} windows",
                    self.window_size, self.window_size
                ));
            }
            if self.shift_size >= self.window_size {
                return bad(format!(
                    "shift_size {} must be smaller than window_size {}",
                    self.shift_size, self.window_size
                ));
            }
        }
        if self.variant == ModelVariant::MapVigat && !(self.sigma > 0.0) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModelConfig {
    #[serde(default)]
    variant: Option<ModelVariant>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    embed_dim: Option<usize>,
    num_blocks: Option<usize>,
    num_heads: Option<usize>,
    ffn_dim: Option<usize>,
    head_hidden: Option<usize>,
    dropout_rate: Option<f64>,
    window_size: Option<usize>,
    shift_size: Option<usize>,
    adjacency_strategy: Option<AdjacencyStrategy>,
    sigma: Option<f64>,
    conv_channels: Option<Vec<usize>>,
    seed: Option<u64>,
}

impl TryFrom<PartialModelConfig> for ModelConfig {
    type Error = Error;

    fn try_from(p: PartialModelConfig) -> Result<Self> {
        let d = ModelConfig::for_variant(p.variant.unwrap_or(ModelVariant::Vit));
        Ok(ModelConfig {
            variant: d.variant,
            image_size: p.image_size.unwrap_or(d.image_size),
            patch_size: p.patch_size.unwrap_or(d.patch_size),
            embed_dim: p.embed_dim.unwrap_or(d.embed_dim),
            num_blocks: p.num_blocks.unwrap_or(d.num_blocks),
            num_heads: p.num_heads.unwrap_or(d.num_heads),
            ffn_dim: p.ffn_dim.unwrap_or(d.ffn_dim),
            head_hidden: p.head_hidden.unwrap_or(d.head_hidden),
            dropout_rate: p.dropout_rate.unwrap_or(d.dropout_rate),
            window_size: p.window_size.unwrap_or(d.window_size),
            shift_size: p.shift_size.unwrap_or(d.shift_size),
            adjacency_strategy: p.adjacency_strategy.unwrap_or(d.adjacency_strategy),
            sigma: p.sigma.unwrap_or(d.sigma),
            conv_channels: p.conv_channels.unwrap_or(d.conv_channels),
            seed: p.seed.unwrap_or(d.seed),
        })
    }
}
