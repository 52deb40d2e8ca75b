//! The regression architectures: a convolutional baseline and the
//! transformer family (ViT, Swin, LINA-ViT, GAT-ViT, MAP-ViGAT).

mod config;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, ModelVariant};
use layers::{PatchEmbed, RegressionHead, TransformerBlock, WindowLayout, INIT_STD};

use crate::diff::{truncated_normal, Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::graphs::{spatial_adjacency, AdjacencyStrategy, GatParams, ImportanceWeights};
use crate::tensor::Tensor;

/// Whether dropout is active. Training mode draws dropout masks from `rng`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug)]
struct ConvStage {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    Cnn(Vec<ConvStage>),
    Transformer {
        patch: PatchEmbed,
        gat: Option<GatParams>,
        /// Learnable adjacency (MAP-ViGAT L).
        theta: Option<ParamId>,
        importance: Option<ImportanceWeights>,
        blocks: Vec<TransformerBlock>,
        /// One layout per block (Swin only).
        windows: Vec<WindowLayout>,
    },
}

/// Captured post-normalization attention of one block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionCapture {
    pub block: usize,
    /// `[B, H, N, N]`, or `[B, nW, H, T, T]` for windowed blocks.
    pub attn: Var,
}

pub struct ForwardOutput {
    /// `[B]` predictions in the model's (possibly standardized) target units.
    pub prediction: Var,
    pub attention: Vec<AttentionCapture>,
    /// GAT coefficients `[N, N]` or `[B, N, N]`.
    pub gat_alpha: Option<Var>,
    /// Current importance weights `[N]` (LINA-ViT).
    pub importance: Option<Var>,
    /// Patch embedding `[B, N, D]` (positions added) of transformer variants.
    pub embedding: Option<Var>,
    /// Token sequence `[B, N, D]` entering the pooling step.
    pub tokens: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    body: Body,
    head: RegressionHead,
}

impl Model {
    /// Builds a model with freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let (body, feat) = if config.variant == ModelVariant::Cnn {
            let mut stages = Vec::new();
            let mut cin = 3;
            for (i, &cout) in config.conv_channels.iter().enumerate() {
                stages.push(ConvStage {
                    kernel: store.add(
                        format!("conv{i}.kernel"),
                        truncated_normal(&[3, 3, cin, cout], INIT_STD, &mut rng),
                    )?,
                    bias: store.add(format!("conv{i}.bias"), Tensor::zeros([cout]))?,
                });
                cin = cout;
            }
            let side = config.cnn_output_side().expect("validated");
            (Body::Cnn(stages), side * side * cin)
        } else {
            build_transformer(&config, &mut store, &mut rng)?
        };
        let head = RegressionHead::register(&mut store, feat, config.head_hidden, &mut rng)?;
        Ok(Model {
            config,
            store,
            body,
            head,
        })
    }

    /// Rebuilds a model skeleton and installs `store`, which must carry exactly
    /// the parameter names and shapes the configuration implies.
    pub fn from_parts(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Config(format!(
                "{} parameters supplied, {} expected by {}",
                store.len(),
                model.store.len(),
                model.config.variant
            )));
        }
        for (_, p) in model.store.iter() {
            match store.by_name(&p.name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Config(format!("parameter {} is missing", p.name))),
            }
        }
        // Keep the registration order of the fresh skeleton so ParamIds line up.
        let mut ordered = ParameterStore::new();
        for (_, p) in model.store.iter() {
            let src = store.by_name(&p.name).expect("checked above").clone();
            let id = ordered.add(src.name.clone(), src.value.clone())?;
            let dst = ordered.get_mut(id);
            dst.first_moment = src.first_moment;
            dst.second_moment = src.second_moment;
        }
        ordered.step = store.step;
        model.store = ordered;
        Ok(model)
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn importance(&self) -> Option<ImportanceWeights> {
        match &self.body {
            Body::Transformer { importance, .. } => *importance,
            Body::Cnn(_) => None,
        }
    }

    pub fn window_layouts(&self) -> &[WindowLayout] {
        match &self.body {
            Body::Transformer { windows, .. } => windows,
            Body::Cnn(_) => &[],
        }
    }

    /// Forward pass on `[B, H, W, 3]` images.
    pub fn forward(&self, g: &mut Graph, images: Var, mode: Mode<'_>) -> Result<ForwardOutput> {
        self.forward_with(&self.store, g, images, mode)
    }

    /// [`Model::forward`] reading parameters from `st` instead of the model's
    /// own store. `st` must share the model's layout (e.g. a clone of it).
    pub fn forward_with(
        &self,
        st: &ParameterStore,
        g: &mut Graph,
        images: Var,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let s = g.shape(images).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
            return Err(Error::dim(self.config.variant.name(), &s, &[0, n, n, 3]));
        }
        let mut out = ForwardOutput {
            prediction: images,
            attention: Vec::new(),
            gat_alpha: None,
            importance: None,
            embedding: None,
            tokens: None,
        };
        let features = match &self.body {
            Body::Cnn(stages) => {
                let mut x = images;
                for stage in stages {
                    let k = g.param(st, stage.kernel);
                    let b = g.param(st, stage.bias);
                    x = g.conv2d(x, k, 1)?;
                    x = g.add(x, b)?;
                    x = g.relu(x)?;
                    x = g.max_pool2(x)?;
                }
                let xs = g.shape(x).to_vec();
                g.reshape(x, &[xs[0], xs[1] * xs[2] * xs[3]])?
            }
            Body::Transformer {
                patch,
                gat,
                theta,
                importance,
                blocks,
                windows,
            } => {
                let embedded = patch.forward(g, st, images)?;
                out.embedding = Some(embedded);
                let mut x = embedded;
                if let Some(gp) = gat {
                    let adjacency = self.adjacency(st, g, embedded, *theta)?;
                    let o = crate::graphs::gat_attention(g, st, x, gp, adjacency)?;
                    out.gat_alpha = Some(o.alpha);
                    x = o.h_out;
                }
                let w = importance.map(|iw| g.param(st, iw.id));
                out.importance = w;
                let swin = self.config.variant.is_swin();
                for (i, block) in blocks.iter().enumerate() {
                    let bo = block.forward(g, st, x, w, windows.get(i), !swin)?;
                    out.attention.push(AttentionCapture {
                        block: i,
                        attn: bo.attn,
                    });
                    x = bo.out;
                }
                if self.config.variant == ModelVariant::SwinResidual {
                    x = g.add(x, embedded)?;
                }
                out.tokens = Some(x);
                g.mean_axis(x, 1)?
            }
        };
        let dropout = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some((self.config.dropout_rate, rng)),
        };
        out.prediction = self.head.forward(g, st, features, dropout)?;
        Ok(out)
    }

    fn adjacency(
        &self,
        st: &ParameterStore,
        g: &mut Graph,
        embedded: Var,
        theta: Option<ParamId>,
    ) -> Result<Var> {
        let n = self.config.num_patches();
        if self.config.variant == ModelVariant::GatVit {
            return Ok(g.constant(Tensor::ones([n, n])));
        }
        match self.config.adjacency_strategy {
            AdjacencyStrategy::Spatial => {
                let (gh, gw) = self.config.grid();
                Ok(g.constant(spatial_adjacency(gh, gw, self.config.sigma)?.values))
            }
            AdjacencyStrategy::Feature => g.cosine_gram(embedded),
            AdjacencyStrategy::Learnable => {
                Ok(g.param(st, theta.expect("registered for learnable")))
            }
        }
    }

    /// Eval-mode predictions for `[H, W, 3]` images, processed in chunks.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let x = g.constant(stack(chunk)?);
            let o = self.forward(&mut g, x, Mode::Eval)?;
            preds.extend_from_slice(g.value(o.prediction).data());
        }
        Ok(preds)
    }
}

fn build_transformer(
    config: &ModelConfig,
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
) -> Result<(Body, usize)> {
    let d = config.embed_dim;
    let n = config.num_patches();
    let patch = PatchEmbed::register(store, config.patch_size, 3, n, d, rng)?;
    let gat = if config.variant.has_gat() {
        Some(GatParams::register(store, "gat", d, d, INIT_STD, rng)?)
    } else {
        None
    };
    let theta = if config.variant == ModelVariant::MapVigat
        && config.adjacency_strategy == AdjacencyStrategy::Learnable
    {
        Some(crate::graphs::learnable_adjacency(
            store,
            "gat.adjacency",
            n,
        )?)
    } else {
        None
    };
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        blocks.push(TransformerBlock::register(
            store,
            &format!("block{i}"),
            d,
            config.num_heads,
            config.ffn_dim,
            rng,
        )?);
    }
    let importance = if config.variant == ModelVariant::LinaVit {
        Some(ImportanceWeights::register(store, "importance", n)?)
    } else {
        None
    };
    let windows = if config.variant.is_swin() {
        let (gh, gw) = config.grid();
        (0..config.num_blocks)
            .map(|i| {
                let shift = if i % 2 == 1 { config.shift_size } else { 0 };
                WindowLayout::new(gh, gw, config.window_size, shift)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let body = Body::Transformer {
        patch,
        gat,
        theta,
        importance,
        blocks,
        windows,
    };
    Ok((body, d))
}

/// Stacks equally shaped `[H, W, C]` images into `[B, H, W, C]`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::dim("stack", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Draws a `[B, n, n, 3]` batch of uniform images; handy for smoke tests.
pub fn random_images<R: Rng>(batch: usize, side: usize, rng: &mut R) -> Tensor {
    let data = (0..batch * side * side * 3)
        .map(|_| rng.random::<f64>())
        .collect();
    Tensor::from_parts(vec![batch, side, side, 3], data)
}
