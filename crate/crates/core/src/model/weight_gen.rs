use ndarray::{Array3, Axis};
use rand::Rng;

use super::layers::{relu_backward_inplace, relu_inplace, Conv2d};
use super::{LayerInfo, ModelConfig, Parameterized, VisitFn};

/// Six convolutions (five stride-2 3×3 with ReLU, then a 1×1 to the class
/// count), global average pooling and `classes · softmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct WeightCache {
    inputs: Vec<Array3<f64>>,
    outputs: Vec<Array3<f64>>,
    /// Softmax probabilities before scaling.
    probs: Vec<f64>,
}

impl WeightGenerator {
    pub const LAYERS: usize = 6;

    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.weight_channels;
        let widths = [config.in_channels, c, 2 * c, 4 * c, 4 * c, 4 * c];
        let mut convs: Vec<Conv2d> = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, rng))
            .collect();
        convs.push(Conv2d::pointwise(4 * c, config.num_classes, rng));
        Self { convs }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.convs.last().map(|c| c.out_channels()).unwrap_or(0)
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Vec<f64>, WeightCache) {
        let n = self.convs.len();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let mut y = conv.forward(&cur);
            if i + 1 < n {
                relu_inplace(&mut y);
            }
            inputs.push(cur);
            cur = y.clone();
            outputs.push(y);
        }
        let pooled: Vec<f64> = cur
            .axis_iter(Axis(0))
            .map(|p| p.mean().unwrap_or(0.0))
            .collect();
        let m = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = pooled.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        // Floored so that an underflowing class keeps a positive weight.
        let probs: Vec<f64> = exps.iter().map(|e| (e / sum).max(f64::MIN_POSITIVE)).collect();
        let k = probs.len() as f64;
        let w = probs.iter().map(|p| k * p).collect();
        (
            w,
            WeightCache {
                inputs,
                outputs,
                probs,
            },
        )
    }

    pub fn backward(&self, cache: &WeightCache, d_w: &[f64], grads: &mut WeightGenerator) {
        let k = cache.probs.len() as f64;
        let dot: f64 = cache.probs.iter().zip(d_w).map(|(p, g)| p * g).sum();
        let d_pooled: Vec<f64> = cache
            .probs
            .iter()
            .zip(d_w)
            .map(|(p, g)| k * p * (g - dot))
            .collect();
        let last = cache.outputs.last().expect("at least one layer");
        let (_, h, w) = last.dim();
        let area = (h * w) as f64;
        let mut d = Array3::<f64>::zeros(last.dim());
        for (mut plane, &g) in d.axis_iter_mut(Axis(0)).zip(&d_pooled) {
            plane.fill(g / area);
        }
        let n = self.convs.len();
        for i in (0..n).rev() {
            if i + 1 < n {
                relu_backward_inplace(&mut d, &cache.outputs[i]);
            }
            d = self.convs[i].backward(&cache.inputs[i], &d, &mut grads.convs[i]);
        }
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.convs
            .iter()
            .enumerate()
            .map(|(i, c)| LayerInfo::conv(format!("weight_gen.conv.{i}"), c))
            .collect()
    }
}

impl Parameterized for WeightGenerator {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv.{i}"), f);
        }
    }
}
