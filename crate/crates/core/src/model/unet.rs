//! Segmentation generator: a (dense) U-net whose blocks may be gated by
//! sigmoid attention computed from the block input.

use ndarray::{Array3, Zip};
use rand::Rng;

use super::layers::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, sigmoid,
    split_channels, Conv2d, UpConv2x2,
};
use super::{LayerInfo, ModelConfig, Parameterized, VisitFn};

/// Two 3×3 convolutions with ReLU. In dense mode the second convolution sees
/// the block input concatenated with the first convolution's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub dense: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    a: Array3<f64>,
    b_in: Option<Array3<f64>>,
    out: Array3<f64>,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, dense: bool, rng: &mut R) -> Self {
        let b_in = if dense { in_c + out_c } else { out_c };
        Self {
            conv_a: Conv2d::same3(in_c, out_c, rng),
            conv_b: Conv2d::same3(b_in, out_c, rng),
            dense,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv_a: self.conv_a.zeros_like(),
            conv_b: self.conv_b.zeros_like(),
            dense: self.dense,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_b.out_channels()
    }

    pub fn forward(&self, x: &Array3<f64>) -> ConvBlockCache {
        let mut a = self.conv_a.forward(x);
        relu_inplace(&mut a);
        let b_in = self.dense.then(|| concat_channels(x, &a));
        let mut out = self.conv_b.forward(b_in.as_ref().unwrap_or(&a));
        relu_inplace(&mut out);
        ConvBlockCache { a, b_in, out }
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        cache: &ConvBlockCache,
        mut d_out: Array3<f64>,
        grads: &mut ConvBlock,
    ) -> Array3<f64> {
        relu_backward_inplace(&mut d_out, &cache.out);
        let b_in = cache.b_in.as_ref().unwrap_or(&cache.a);
        let d_bin = self.conv_b.backward(b_in, &d_out, &mut grads.conv_b);
        let (mut d_a, d_x_direct) = if self.dense {
            let (dx, da) = split_channels(d_bin, x.dim().0);
            (da, Some(dx))
        } else {
            (d_bin, None)
        };
        relu_backward_inplace(&mut d_a, &cache.a);
        let mut dx = self.conv_a.backward(x, &d_a, &mut grads.conv_a);
        if let Some(direct) = d_x_direct {
            dx += &direct;
        }
        dx
    }
}

/// `sigmoid(conv2(relu(conv1(x))))`, multiplied point-wise onto the block output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl AttentionGate {
    pub fn new<R: Rng + ?Sized>(in_c: usize, hidden: usize, out_c: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::same3(in_c, hidden, rng),
            conv2: Conv2d::pointwise(hidden, out_c, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }
}

/// A U-net block, optionally wrapped by an attention gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub block: ConvBlock,
    pub gate: Option<AttentionGate>,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    input: Array3<f64>,
    block: ConvBlockCache,
    hidden: Option<Array3<f64>>,
    gate: Option<Array3<f64>>,
    out: Option<Array3<f64>>,
}

impl StageCache {
    pub fn output(&self) -> &Array3<f64> {
        self.out.as_ref().unwrap_or(&self.block.out)
    }

    /// Gate values in `[0,1]`, present when the stage is gated.
    pub fn gate_map(&self) -> Option<&Array3<f64>> {
        self.gate.as_ref()
    }

    /// Output of the wrapped block before gating.
    pub fn block_output(&self) -> &Array3<f64> {
        &self.block.out
    }
}

impl Stage {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let block = ConvBlock::new(in_c, out_c, config.use_dense_blocks, rng);
        let gate = config
            .use_attention
            .then(|| AttentionGate::new(in_c, config.attention_hidden(out_c), out_c, rng));
        Self { block, gate }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            block: self.block.zeros_like(),
            gate: self.gate.as_ref().map(AttentionGate::zeros_like),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> StageCache {
        let block = self.block.forward(x);
        let Some(gate) = &self.gate else {
            return StageCache {
                input: x.clone(),
                block,
                hidden: None,
                gate: None,
                out: None,
            };
        };
        let mut hidden = gate.conv1.forward(x);
        relu_inplace(&mut hidden);
        let mut g = gate.conv2.forward(&hidden);
        g.mapv_inplace(sigmoid);
        let out = &g * &block.out;
        StageCache {
            input: x.clone(),
            block,
            hidden: Some(hidden),
            gate: Some(g),
            out: Some(out),
        }
    }

    pub fn backward(&self, cache: &StageCache, d_out: Array3<f64>, grads: &mut Stage) -> Array3<f64> {
        let (Some(gate), Some(g), Some(hidden)) = (&self.gate, &cache.gate, &cache.hidden) else {
            return self.block.backward(&cache.input, &cache.block, d_out, &mut grads.block);
        };
        let gate_grads = grads.gate.as_mut().expect("gradient layout matches model");
        let d_block = &d_out * g;
        let mut d_pre = Array3::zeros(g.dim());
        Zip::from(&mut d_pre)
            .and(&d_out)
            .and(&cache.block.out)
            .and(g)
            .for_each(|dp, &d, &y, &gv| *dp = d * y * gv * (1.0 - gv));
        let mut d_hidden = gate.conv2.backward(hidden, &d_pre, &mut gate_grads.conv2);
        relu_backward_inplace(&mut d_hidden, hidden);
        let dx_gate = gate.conv1.backward(&cache.input, &d_hidden, &mut gate_grads.conv1);
        let mut dx = self
            .block
            .backward(&cache.input, &cache.block, d_block, &mut grads.block);
        dx += &dx_gate;
        dx
    }
}

impl Parameterized for Stage {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        self.block.conv_a.visit(&format!("{prefix}.block.conv_a"), f);
        self.block.conv_b.visit(&format!("{prefix}.block.conv_b"), f);
        if let Some(g) = &self.gate {
            g.conv1.visit(&format!("{prefix}.gate.conv1"), f);
            g.conv2.visit(&format!("{prefix}.gate.conv2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.block.conv_a.visit_mut(&format!("{prefix}.block.conv_a"), f);
        self.block.conv_b.visit_mut(&format!("{prefix}.block.conv_b"), f);
        if let Some(g) = &mut self.gate {
            g.conv1.visit_mut(&format!("{prefix}.gate.conv1"), f);
            g.conv2.visit_mut(&format!("{prefix}.gate.conv2"), f);
        }
    }
}

/// Encoder stages, bottleneck, learned upsampling, decoder stages, 1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub encoder: Vec<Stage>,
    pub bottleneck: Stage,
    pub up: Vec<UpConv2x2>,
    pub decoder: Vec<Stage>,
    pub head: Conv2d,
}

/// Activations retained by [`SegNet::forward_train`].
#[derive(Debug, Clone)]
pub struct SegCache {
    encoder: Vec<StageCache>,
    pool_idx: Vec<ndarray::Array3<u8>>,
    bottleneck: StageCache,
    decoder: Vec<StageCache>,
    pub logits: Array3<f64>,
}

impl SegCache {
    /// Stage caches in forward order: encoder, bottleneck, decoder (deepest first).
    pub fn stages(&self) -> impl Iterator<Item = &StageCache> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter().rev())
    }
}

impl SegNet {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let depth = config.encoder_depth;
        let ch = |l: usize| config.base_channels << l;
        let encoder = (0..depth)
            .map(|l| {
                let in_c = if l == 0 { config.in_channels } else { ch(l - 1) };
                Stage::new(in_c, ch(l), config, rng)
            })
            .collect();
        let bottleneck = Stage::new(ch(depth - 1), ch(depth), config, rng);
        let up = (0..depth).map(|l| UpConv2x2::new(ch(l + 1), ch(l), rng)).collect();
        let decoder = (0..depth)
            .map(|l| Stage::new(2 * ch(l), ch(l), config, rng))
            .collect();
        let head = Conv2d::pointwise(ch(0), config.num_classes, rng);
        Self {
            encoder,
            bottleneck,
            up,
            decoder,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(Stage::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            up: self.up.iter().map(UpConv2x2::zeros_like).collect(),
            decoder: self.decoder.iter().map(Stage::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// Forward pass keeping every activation needed by [`SegNet::backward`].
    pub fn forward_train(&self, x: &Array3<f64>) -> SegCache {
        let depth = self.depth();
        let mut encoder = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for stage in &self.encoder {
            let c = stage.forward(&cur);
            let (pooled, idx) = max_pool2(c.output());
            encoder.push(c);
            pool_idx.push(idx);
            cur = pooled;
        }
        let bottleneck = self.bottleneck.forward(&cur);
        let mut decoder: Vec<Option<StageCache>> = vec![None; depth];
        let mut below = bottleneck.output().clone();
        for l in (0..depth).rev() {
            let upsampled = self.up[l].forward(&below);
            let cat = concat_channels(encoder[l].output(), &upsampled);
            let c = self.decoder[l].forward(&cat);
            below = c.output().clone();
            decoder[l] = Some(c);
        }
        let logits = self.head.forward(&below);
        SegCache {
            encoder,
            pool_idx,
            bottleneck,
            decoder: decoder.into_iter().map(|c| c.expect("filled")).collect(),
            logits,
        }
    }

    /// Back-propagates a logit gradient, accumulating into `grads`.
    pub fn backward(&self, cache: &SegCache, d_logits: &Array3<f64>, grads: &mut SegNet) {
        let depth = self.depth();
        let mut d_cur = self
            .head
            .backward(cache.decoder[0].output(), d_logits, &mut grads.head);
        let mut d_skip = Vec::with_capacity(depth);
        for l in 0..depth {
            let d_cat = self.decoder[l].backward(&cache.decoder[l], d_cur, &mut grads.decoder[l]);
            let skip_c = cache.encoder[l].output().dim().0;
            let (ds, du) = split_channels(d_cat, skip_c);
            d_skip.push(ds);
            let up_in = if l + 1 < depth {
                cache.decoder[l + 1].output()
            } else {
                cache.bottleneck.output()
            };
            d_cur = self.up[l].backward(up_in, &du, &mut grads.up[l]);
        }
        let mut d_in = self
            .bottleneck
            .backward(&cache.bottleneck, d_cur, &mut grads.bottleneck);
        for l in (0..depth).rev() {
            let (_, h, w) = cache.encoder[l].output().dim();
            let mut d_stage = max_pool2_backward(&d_in, &cache.pool_idx[l], h, w);
            d_stage += &d_skip[l];
            d_in = self.encoder[l].backward(&cache.encoder[l], d_stage, &mut grads.encoder[l]);
        }
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut stage = |name: String, s: &Stage| {
            out.push(LayerInfo::conv(format!("{name}.block.conv_a"), &s.block.conv_a));
            out.push(LayerInfo::conv(format!("{name}.block.conv_b"), &s.block.conv_b));
            if let Some(g) = &s.gate {
                out.push(LayerInfo::conv(format!("{name}.gate.conv1"), &g.conv1));
                out.push(LayerInfo::conv(format!("{name}.gate.conv2"), &g.conv2));
            }
        };
        for (l, s) in self.encoder.iter().enumerate() {
            stage(format!("seg.encoder.{l}"), s);
        }
        stage("seg.bottleneck".into(), &self.bottleneck);
        for l in (0..self.depth()).rev() {
            stage(format!("seg.decoder.{l}"), &self.decoder[l]);
        }
        for l in (0..self.depth()).rev() {
            out.push(LayerInfo {
                name: format!("seg.up.{l}"),
                kind: "upconv2x2",
                in_channels: self.up[l].in_channels(),
                out_channels: self.up[l].out_channels(),
                kernel: 2,
                stride: 2,
            });
        }
        out.push(LayerInfo::conv("seg.head".into(), &self.head));
        out
    }
}

impl Parameterized for SegNet {
    fn visit(&self, prefix: &str, f: &mut VisitFn) {
        for (l, s) in self.encoder.iter().enumerate() {
            s.visit(&format!("{prefix}.encoder.{l}"), f);
        }
        self.bottleneck.visit(&format!("{prefix}.bottleneck"), f);
        for (l, u) in self.up.iter().enumerate() {
            u.visit(&format!("{prefix}.up.{l}"), f);
        }
        for (l, s) in self.decoder.iter().enumerate() {
            s.visit(&format!("{prefix}.decoder.{l}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, s) in self.encoder.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}.encoder.{l}"), f);
        }
        self.bottleneck.visit_mut(&format!("{prefix}.bottleneck"), f);
        for (l, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.up.{l}"), f);
        }
        for (l, s) in self.decoder.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}.decoder.{l}"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}
