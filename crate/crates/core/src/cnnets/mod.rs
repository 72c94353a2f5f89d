//! Two-branch classification network with global-average-pooled heads.
//!
//! A shared trunk of `conv3x3 -> relu -> maxpool2` blocks feeds two
//! branches. Each branch finishes the remaining trunk blocks on its own and
//! projects the last activation to `C` per-species confidence maps with a
//! 1x1 convolution:
//!
//! ```text
//!                      +-> blocks S+1.. -> conv1x1 ------> GAP -> conv scores
//! image -> blocks 1..S |
//!                      +-> blocks S+1.. -> conv1x1 -> BN -> GAP -> norm scores
//! ```
//!
//! Because the head is pooled by a plain mean, each class score is exactly
//! the average of its confidence map. The batch-norm layer in the second
//! branch flattens the spatial profile of its maps during training, so the
//! two branches end up looking at different parts of the image; their pooled
//! pre-head activations are concatenated into one descriptor.

mod io;
mod train;

pub use train::{LossBranches, Sample, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_forward, batch_norm_grad_xhat, conv2d_forward, gap_forward, maxpool2_forward, relu_forward, BnCache,
    BnState, Phase,
};
use crate::tensor::Tensor;

/// Architecture of a [`CnNets`] model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each `conv3x3 -> relu -> maxpool2` block.
    pub trunk: Vec<usize>,
    /// Number of leading trunk blocks shared by both branches.
    pub shared_depth: usize,
    /// Channels of the last pre-head activation (the descriptor width `N`).
    pub feature_channels: usize,
    /// Number of species the heads classify.
    pub num_species: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.trunk.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.shared_depth > self.trunk.len() {
            return Err(Error::Config(format!(
                "shared depth {} exceeds {} trunk blocks",
                self.shared_depth,
                self.trunk.len()
            )));
        }
        if self.num_species < 2 {
            return Err(Error::Config(format!("need at least 2 species, got {}", self.num_species)));
        }
        let last = self.trunk.last().copied().unwrap_or(self.in_channels);
        if self.feature_channels == 0 || self.feature_channels != last {
            return Err(Error::Config(format!(
                "feature channels {} must equal the last trunk width {last}",
                self.feature_channels
            )));
        }
        let factor = 1usize << self.trunk.len();
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} = {factor}",
                self.input_size,
                self.trunk.len()
            )));
        }
        Ok(())
    }

    /// Side length `M` of the confidence maps.
    pub fn map_size(&self) -> usize {
        self.input_size >> self.trunk.len()
    }
}

/// Weights `[c_out, c_in, k, k]` and one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let fan_out = (c_out * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let weights = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weights: Tensor::new(vec![c_out, c_in, k, k], weights).expect("consistent shape"),
            bias: vec![0.0; c_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// The per-branch part of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Unshared trunk blocks `S+1..`.
    pub tail: Vec<ConvLayer>,
    /// 1x1 projection to `C` confidence maps.
    pub head: ConvLayer,
}

/// Shared trunk plus the convolutional and normalized branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CnNets {
    config: NetworkConfig,
    pub shared: Vec<ConvLayer>,
    pub conv: Branch,
    pub norm: Branch,
    pub bn: BnState,
}

/// Scores and confidence maps of both branches.
#[derive(Debug, Clone)]
pub struct ClassifyOutput {
    pub conv_scores: Tensor,
    pub norm_scores: Tensor,
    /// `(conv_scores + norm_scores) / 2`.
    pub combined: Tensor,
    pub conv_maps: Tensor,
    /// Confidence maps after batch normalization.
    pub norm_maps: Tensor,
}

/// Everything a single inference pass yields for one image.
#[derive(Debug, Clone)]
pub struct Extraction {
    /// Pooled pre-head activation of the convolutional branch, length `N`.
    pub f_conv: Vec<f64>,
    /// Pooled pre-head activation of the normalized branch, length `N`.
    pub f_norm: Vec<f64>,
    /// `[C, M, M]` confidence maps of the convolutional branch.
    pub conv_maps: Tensor,
}

impl Extraction {
    /// `[f_conv, f_norm]`.
    pub fn cn_feature(&self) -> Vec<f64> {
        let mut f = self.f_conv.clone();
        f.extend_from_slice(&self.f_norm);
        f
    }
}

pub(crate) struct BlockCache {
    pub input: Tensor,
    pub pre_relu: Tensor,
    pub post_relu: Tensor,
}

pub(crate) struct BranchPass {
    pub blocks: Vec<BlockCache>,
    /// Pre-head activation `[n, N, M, M]`.
    pub features: Tensor,
    pub bn_cache: Option<BnCache>,
    /// Head output that is pooled into scores (after BN for the normalized branch).
    pub pooled_maps: Tensor,
    pub scores: Tensor,
}

pub(crate) struct ForwardPass {
    pub shared: Vec<BlockCache>,
    pub conv: BranchPass,
    pub norm: BranchPass,
}

fn block_forward(layer: &ConvLayer, input: Tensor) -> Result<(BlockCache, Tensor)> {
    let pre_relu = conv2d_forward(&input, &layer.weights, &layer.bias)?;
    let post_relu = relu_forward(&pre_relu);
    let out = maxpool2_forward(&post_relu)?;
    Ok((
        BlockCache {
            input,
            pre_relu,
            post_relu,
        },
        out,
    ))
}

fn blocks_forward(layers: &[ConvLayer], mut x: Tensor, keep: bool) -> Result<(Vec<BlockCache>, Tensor)> {
    let mut caches = Vec::new();
    for layer in layers {
        let (cache, out) = block_forward(layer, x)?;
        if keep {
            caches.push(cache);
        }
        x = out;
    }
    Ok((caches, x))
}

impl CnNets {
    /// Initializes every layer from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths: Vec<usize> = std::iter::once(config.in_channels)
            .chain(config.trunk.iter().copied())
            .collect();
        let s = config.shared_depth;
        let shared = (0..s)
            .map(|i| ConvLayer::init(&mut rng, widths[i], widths[i + 1], 3))
            .collect();
        let branch = |rng: &mut ChaCha8Rng| Branch {
            tail: (s..config.trunk.len())
                .map(|i| ConvLayer::init(rng, widths[i], widths[i + 1], 3))
                .collect(),
            head: ConvLayer::init(rng, config.feature_channels, config.num_species, 1),
        };
        let conv = branch(&mut rng);
        let norm = branch(&mut rng);
        let bn = BnState::new(config.num_species);
        Ok(Self {
            config,
            shared,
            conv,
            norm,
            bn,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Total number of learnable scalars (kernels, biases, gamma, beta).
    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|p| p.len()).sum()
    }

    /// Learnable parameters in declaration order: shared layers, conv branch
    /// (tail then head), norm branch (tail then head), gamma, beta. Each
    /// layer contributes its weights followed by its bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        let layers = self
            .shared
            .iter()
            .chain(&self.conv.tail)
            .chain(std::iter::once(&self.conv.head))
            .chain(&self.norm.tail)
            .chain(std::iter::once(&self.norm.head));
        for l in layers {
            out.push(l.weights.data());
            out.push(&l.bias);
        }
        out.push(&self.bn.gamma);
        out.push(&self.bn.beta);
        out
    }

    /// Mutable view of [`CnNets::param_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let layers = self
            .shared
            .iter_mut()
            .chain(self.conv.tail.iter_mut())
            .chain(std::iter::once(&mut self.conv.head))
            .chain(self.norm.tail.iter_mut())
            .chain(std::iter::once(&mut self.norm.head));
        for l in layers {
            out.push(l.weights.data_mut());
            out.push(&mut l.bias);
        }
        out.push(&mut self.bn.gamma);
        out.push(&mut self.bn.beta);
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [n, c, h, w] = batch.dims4()?;
        let s = self.config.input_size;
        if n == 0 || c != self.config.in_channels || h != s || w != s {
            return Err(Error::contract(format!(
                "expected a non-empty batch of [{}, {s}, {s}] images, got {:?}",
                self.config.in_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    fn branch_forward(
        &self,
        branch: &Branch,
        trunk_out: &Tensor,
        normalized: bool,
        phase: Phase,
        keep: bool,
    ) -> Result<BranchPass> {
        let (blocks, features) = blocks_forward(&branch.tail, trunk_out.clone(), keep)?;
        let maps = conv2d_forward(&features, &branch.head.weights, &branch.head.bias)?;
        let (pooled_maps, bn_cache) = if normalized {
            let out = batch_norm_forward(&maps, &self.bn, phase)?;
            (out.output, out.cache)
        } else {
            (maps, None)
        };
        let scores = gap_forward(&pooled_maps)?;
        Ok(BranchPass {
            blocks,
            features,
            bn_cache,
            pooled_maps,
            scores,
        })
    }

    pub(crate) fn forward_pass(&self, batch: &Tensor, phase: Phase, keep: bool) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let (shared, trunk_out) = blocks_forward(&self.shared, batch.clone(), keep)?;
        let conv = self.branch_forward(&self.conv, &trunk_out, false, phase, keep)?;
        let norm = self.branch_forward(&self.norm, &trunk_out, true, phase, keep)?;
        Ok(ForwardPass {
            shared,
            conv,
            norm,
        })
    }

    /// Classifies a `[n, in_channels, s, s]` batch with both branches.
    ///
    /// In [`Phase::Train`] the normalized branch uses batch statistics; the
    /// model itself is never modified.
    pub fn forward_classify(&self, batch: &Tensor, phase: Phase) -> Result<ClassifyOutput> {
        let pass = self.forward_pass(batch, phase, false)?;
        let combined = pass
            .conv
            .scores
            .data()
            .iter()
            .zip(pass.norm.scores.data())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        Ok(ClassifyOutput {
            combined: Tensor::new(pass.conv.scores.shape().to_vec(), combined)?,
            conv_scores: pass.conv.scores,
            norm_scores: pass.norm.scores,
            conv_maps: pass.conv.pooled_maps,
            norm_maps: pass.norm.pooled_maps,
        })
    }

    fn single(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        if image.shape() != [self.config.in_channels, s, s] {
            return Err(Error::contract(format!(
                "expected a [{}, {s}, {s}] image, got {:?}",
                self.config.in_channels,
                image.shape()
            )));
        }
        image.clone().reshape(vec![1, self.config.in_channels, s, s])
    }

    /// Runs the shared trunk and both branch trunks (not the BN layer) on one image.
    pub fn extract(&self, image: &Tensor) -> Result<Extraction> {
        let batch = self.single(image)?;
        let (_, trunk_out) = blocks_forward(&self.shared, batch, false)?;
        let (_, conv_features) = blocks_forward(&self.conv.tail, trunk_out.clone(), false)?;
        let (_, norm_features) = blocks_forward(&self.norm.tail, trunk_out, false)?;
        let conv_maps = conv2d_forward(&conv_features, &self.conv.head.weights, &self.conv.head.bias)?;
        let m = self.config.map_size();
        Ok(Extraction {
            f_conv: gap_forward(&conv_features)?.into_data(),
            f_norm: gap_forward(&norm_features)?.into_data(),
            conv_maps: conv_maps.reshape(vec![self.config.num_species, m, m])?,
        })
    }

    /// Pooled convolutional-branch descriptor (length `N`) and its `C` confidence maps.
    pub fn extract_conv_feature(&self, image: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let batch = self.single(image)?;
        let (_, trunk_out) = blocks_forward(&self.shared, batch, false)?;
        let (_, features) = blocks_forward(&self.conv.tail, trunk_out, false)?;
        let maps = conv2d_forward(&features, &self.conv.head.weights, &self.conv.head.bias)?;
        let m = self.config.map_size();
        Ok((
            gap_forward(&features)?.into_data(),
            maps.reshape(vec![self.config.num_species, m, m])?,
        ))
    }

    /// `[f_conv, f_norm]`, length `2N`.
    pub fn extract_cn_feature(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.extract(image)?.cn_feature())
    }

    /// Inference-phase `[C, M, M]` maps of both branches for one image.
    pub fn confidence_maps(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.forward_classify(&self.single(image)?, Phase::Infer)?;
        let m = self.config.map_size();
        let c = self.config.num_species;
        Ok((
            out.conv_maps.reshape(vec![c, m, m])?,
            out.norm_maps.reshape(vec![c, m, m])?,
        ))
    }

    /// Gradients flowing into the pooled maps during one training step.
    pub fn probe_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<GradientProbe> {
        let pass = self.forward_pass(batch, Phase::Train, true)?;
        let grads = train::head_gradients(&pass, labels, LossBranches::Both)?;
        let norm_xhat = batch_norm_grad_xhat(&self.bn, &grads.norm_pooled)?;
        Ok(GradientProbe {
            conv_maps: grads.conv_pooled,
            norm_output: grads.norm_pooled,
            norm_xhat,
        })
    }
}

/// Upstream gradients at the GAP inputs of both branches.
#[derive(Debug, Clone)]
pub struct GradientProbe {
    /// `dl/d(conv maps)`, `[n, C, M, M]`.
    pub conv_maps: Tensor,
    /// `dl/dy` at the batch-norm output, `[n, C, M, M]`.
    pub norm_output: Tensor,
    /// `dl/dxhat` inside the batch-norm layer, `[n, C, M, M]`.
    pub norm_xhat: Tensor,
}

/// Picks the map with the largest mean activation; ties go to the lowest index.
pub fn select_confidence_map(maps: &Tensor) -> Result<(usize, Tensor)> {
    let (c, h, w) = match maps.shape() {
        &[c, h, w] if c >= 1 && h * w > 0 => (c, h, w),
        other => {
            return Err(Error::contract(format!(
                "expected non-empty [C, M, M] maps, got {other:?}"
            )))
        }
    };
    let plane = h * w;
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, m) in maps.data().chunks_exact(plane).enumerate() {
        let mean = m.iter().sum::<f64>() / plane as f64;
        if mean > best_mean {
            best = i;
            best_mean = mean;
        }
    }
    debug_assert!(best < c);
    Ok((best, Tensor::new(vec![h, w], maps.data()[best * plane..][..plane].to_vec())?))
}
