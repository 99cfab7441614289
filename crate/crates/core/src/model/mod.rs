//! The two sub-networks: an attention dense U-net producing class
//! probabilities and a small convolutional weight generator producing the
//! per-class cross-entropy weights.

pub mod checkpoint;
pub mod layers;
pub mod unet;
pub mod weight_gen;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::WeightVector;
use crate::probmap::{ProbMap, NUM_CLASSES};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use layers::Conv2d;
pub use unet::{SegCache, SegNet, Stage};
pub use weight_gen::{WeightCache, WeightGenerator};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub use_attention: bool,
    pub use_dense_blocks: bool,
    /// Hidden width of each attention gate; `None` means half the block width.
    pub attention_hidden_channels: Option<usize>,
    /// Width of the weight generator's first convolution.
    pub weight_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            encoder_depth: 4,
            base_channels: 32,
            use_attention: true,
            use_dense_blocks: true,
            attention_hidden_channels: None,
            weight_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Default configuration with a different depth and width.
    pub fn small(encoder_depth: usize, base_channels: usize) -> Self {
        Self {
            encoder_depth,
            base_channels,
            ..Self::default()
        }
    }

    pub fn attention_hidden(&self, block_channels: usize) -> usize {
        self.attention_hidden_channels
            .unwrap_or(block_channels / 2)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth < 1 || self.base_channels < 1 || self.weight_channels < 1 {
            return Err(Error::Config(
                "encoder_depth, base_channels and weight_channels must be >= 1".into(),
            ));
        }
        if self.in_channels != 1 || self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "only 1 input channel and {NUM_CLASSES} classes are supported"
            )));
        }
        if self.encoder_depth > 8 {
            return Err(Error::Config("encoder_depth above 8 is not supported".into()));
        }
        Ok(())
    }

    /// Image sides must be divisible by `2^encoder_depth`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.encoder_depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.encoder_depth
            )));
        }
        Ok(())
    }
}

/// Callback receiving a tensor's name, shape and values.
pub type VisitFn<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// Walks parameter tensors in a fixed order under hierarchical names.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut VisitFn);
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// All parameters concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Inverse of [`Parameterized::flatten`].
    fn unflatten(&mut self, data: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&data[off..off + v.len()]);
            off += v.len();
        });
        debug_assert_eq!(off, data.len());
    }
}

/// One entry of an architecture summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerInfo {
    fn conv(name: String, c: &Conv2d) -> Self {
        Self {
            name,
            kind: "conv",
            in_channels: c.in_channels(),
            out_channels: c.out_channels(),
            kernel: c.kernel(),
            stride: c.stride,
        }
    }

    pub fn is_attention(&self) -> bool {
        self.name.contains(".gate.")
    }
}

/// Logits and softmax probabilities of the segmentation generator.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub logits: Array3<f64>,
    pub probabilities: ProbMap,
}

impl SegmentationOutput {
    pub fn labels(&self) -> Array2<u8> {
        self.probabilities.argmax()
    }
}

/// Gate maps of every attention-wrapped stage, in forward order.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub gate_maps: Vec<Array3<f64>>,
}

/// Segmentation generator plus weight generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub segmentation: SegNet,
    pub weight_generator: WeightGenerator,
}

/// `(1, H, W)` network input from a single-channel image.
pub fn image_tensor(image: ArrayView2<'_, f64>) -> Array3<f64> {
    image.to_owned().insert_axis(ndarray::Axis(0))
}

impl Model {
    /// Freshly initialised model; identical for identical `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segmentation = SegNet::new(&config, &mut rng);
        let weight_generator = WeightGenerator::new(&config, &mut rng);
        Ok(Self {
            config,
            segmentation,
            weight_generator,
        })
    }

    /// Same architecture with every parameter zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            segmentation: self.segmentation.zeros_like(),
            weight_generator: self.weight_generator.zeros_like(),
        }
    }

    fn check_image(&self, image: &ArrayView2<'_, f64>) -> Result<()> {
        let (h, w) = image.dim();
        self.config.check_input(h, w)
    }

    pub fn segmentation_forward(&self, image: ArrayView2<'_, f64>) -> Result<SegmentationOutput> {
        self.check_image(&image)?;
        let cache = self.segmentation.forward_train(&image_tensor(image));
        let probs = layers::softmax_channels(&cache.logits);
        Ok(SegmentationOutput {
            logits: cache.logits,
            probabilities: ProbMap::from_array_unchecked(probs),
        })
    }

    pub fn weight_forward(&self, image: ArrayView2<'_, f64>) -> Result<WeightVector> {
        self.check_image(&image)?;
        let (w, _) = self.weight_generator.forward_train(&image_tensor(image));
        WeightVector::new(w)
    }

    pub fn attention_maps(&self, image: ArrayView2<'_, f64>) -> Result<AttentionState> {
        self.check_image(&image)?;
        let cache = self.segmentation.forward_train(&image_tensor(image));
        Ok(AttentionState {
            gate_maps: cache.stages().filter_map(|s| s.gate_map().cloned()).collect(),
        })
    }

    pub fn predict_labels(&self, image: ArrayView2<'_, f64>) -> Result<Array2<u8>> {
        Ok(self.segmentation_forward(image)?.labels())
    }

    /// Architecture summary: segmentation layers then weight-generator layers.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut l = self.segmentation.layers();
        l.extend(self.weight_generator.layers());
        l
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        ParameterCounts {
            segmentation: self.segmentation.num_parameters(),
            weight_generator: self.weight_generator.num_parameters(),
        }
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.segmentation.visit(&p("seg"), f);
        self.weight_generator.visit(&p("weight_gen"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.segmentation.visit_mut(&p("seg"), f);
        self.weight_generator.visit_mut(&p("weight_gen"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCounts {
    pub segmentation: usize,
    pub weight_generator: usize,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.segmentation + self.weight_generator
    }
}

/// Trainable parameters of both sub-networks.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone(), 0)?.parameter_counts().total())
}
