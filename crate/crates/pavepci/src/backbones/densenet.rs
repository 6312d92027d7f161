//! DenseNet161 baseline: each layer consumes the concatenation of every
//! preceding layer's feature maps within its block.

use ndarray::{s, Axis};

use super::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join_path, AvgPool2d, BatchNorm2d, BufferVisitor,
    Conv2d, Linear, MaxPool2d, ParamVisitor, ParamVisitorMut, Relu,
};
use crate::tensor::{dims4, Elem, Tensor1, Tensor2, Tensor4};

pub const DENSENET161_GROWTH: usize = 48;
pub const DENSENET161_INIT_FEATURES: usize = 96;
pub const DENSENET161_BLOCKS: [usize; 4] = [6, 12, 36, 24];
pub const DENSENET161_BN_SIZE: usize = 4;
/// Channels entering the head: 1056 + 24*48.
pub const DENSENET161_FEATURES: usize = 2208;

/// BN -> ReLU -> 1x1 -> BN -> ReLU -> 3x3, concatenated onto its input.
#[derive(Debug, Clone)]
struct DenseLayer<T> {
    in_channels: usize,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv1: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    conv2: Conv2d<T>,
}

impl<T: Elem> DenseLayer<T> {
    fn new(in_channels: usize, growth: usize, bn_size: usize, seed: u64, name: &str) -> Self {
        DenseLayer {
            in_channels,
            bn1: BatchNorm2d::new(in_channels),
            relu1: Relu::new(),
            conv1: Conv2d::new(
                in_channels,
                bn_size * growth,
                1,
                1,
                0,
                false,
                seed,
                &format!("{name}.conv1"),
            ),
            bn2: BatchNorm2d::new(bn_size * growth),
            relu2: Relu::new(),
            conv2: Conv2d::new(
                bn_size * growth,
                growth,
                3,
                1,
                1,
                false,
                seed,
                &format!("{name}.conv2"),
            ),
        }
    }

    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let mut out = self.bn1.forward(x, train)?;
        out = self.relu1.forward(&out, train);
        out = self.conv1.forward(&out, train)?;
        out = self.bn2.forward(&out, train)?;
        out = self.relu2.forward(&out, train);
        let new = self.conv2.forward(&out, train)?;
        // Eq-style concatenation: [x, new] along the channel axis.
        let cat = ndarray::concatenate(Axis(1), &[x.view(), new.view()])
            .map_err(|e| Error::Input(format!("concat failed: {e}")))?;
        Ok(cat.as_standard_layout().to_owned())
    }

    fn backward(&mut self, dcat: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (_, c, _, _) = dims4(dcat);
        let dnew = dcat
            .slice(s![.., self.in_channels..c, .., ..])
            .to_owned()
            .as_standard_layout()
            .to_owned();
        let mut dx = dcat
            .slice(s![.., ..self.in_channels, .., ..])
            .to_owned()
            .as_standard_layout()
            .to_owned();
        let mut d = self.conv2.backward(&dnew)?;
        d = self.relu2.backward(&d)?;
        d = self.bn2.backward(&d)?;
        d = self.conv1.backward(&d)?;
        d = self.relu1.backward(&d)?;
        dx += &self.bn1.backward(&d)?;
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.bn1.visit(&join_path(prefix, "bn1"), f);
        self.conv1.visit(&join_path(prefix, "conv1"), f);
        self.bn2.visit(&join_path(prefix, "bn2"), f);
        self.conv2.visit(&join_path(prefix, "conv2"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.bn1.visit_ref(&join_path(prefix, "bn1"), f);
        self.conv1.visit_ref(&join_path(prefix, "conv1"), f);
        self.bn2.visit_ref(&join_path(prefix, "bn2"), f);
        self.conv2.visit_ref(&join_path(prefix, "conv2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.bn1.visit_buffers(&join_path(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join_path(prefix, "bn2"), f);
    }
}

/// BN -> ReLU -> 1x1 halving compression -> 2x2 average pool.
#[derive(Debug, Clone)]
struct Transition<T> {
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
    conv: Conv2d<T>,
    pool: AvgPool2d,
}

impl<T: Elem> Transition<T> {
    fn new(in_channels: usize, seed: u64, name: &str) -> Self {
        Transition {
            bn: BatchNorm2d::new(in_channels),
            relu: Relu::new(),
            conv: Conv2d::new(
                in_channels,
                in_channels / 2,
                1,
                1,
                0,
                false,
                seed,
                &format!("{name}.conv"),
            ),
            pool: AvgPool2d::new(2, 2),
        }
    }

    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let mut out = self.bn.forward(x, train)?;
        out = self.relu.forward(&out, train);
        out = self.conv.forward(&out, train)?;
        self.pool.forward(&out, train)
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut d = self.pool.backward(dy)?;
        d = self.conv.backward(&d)?;
        d = self.relu.backward(&d)?;
        self.bn.backward(&d)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.bn.visit(&join_path(prefix, "bn"), f);
        self.conv.visit(&join_path(prefix, "conv"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.bn.visit_ref(&join_path(prefix, "bn"), f);
        self.conv.visit_ref(&join_path(prefix, "conv"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.bn.visit_buffers(&join_path(prefix, "bn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet<T> {
    pub spec: ArchitectureSpec,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu<T>,
    stem_pool: MaxPool2d,
    blocks: Vec<Vec<DenseLayer<T>>>,
    transitions: Vec<Transition<T>>,
    final_bn: BatchNorm2d<T>,
    final_relu: Relu<T>,
    head: Linear<T>,
    pre_head_hw: Option<(usize, usize)>,
}

impl<T: Elem> DenseNet<T> {
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let growth = DENSENET161_GROWTH;
        let mut channels = DENSENET161_INIT_FEATURES;
        let mut blocks = Vec::with_capacity(4);
        let mut transitions = Vec::new();
        for (bi, &layers) in DENSENET161_BLOCKS.iter().enumerate() {
            let mut block = Vec::with_capacity(layers);
            for li in 0..layers {
                block.push(DenseLayer::new(
                    channels,
                    growth,
                    DENSENET161_BN_SIZE,
                    seed,
                    &format!("block{}.layer{li}", bi + 1),
                ));
                channels += growth;
            }
            blocks.push(block);
            if bi + 1 < DENSENET161_BLOCKS.len() {
                transitions.push(Transition::new(channels, seed, &format!("trans{}", bi + 1)));
                channels /= 2;
            }
        }
        debug_assert_eq!(channels, DENSENET161_FEATURES);
        Ok(DenseNet {
            stem_conv: Conv2d::new(
                3,
                DENSENET161_INIT_FEATURES,
                7,
                2,
                3,
                false,
                seed,
                "stem.conv",
            ),
            stem_bn: BatchNorm2d::new(DENSENET161_INIT_FEATURES),
            stem_relu: Relu::new(),
            stem_pool: MaxPool2d::new(3, 2, 1),
            blocks,
            transitions,
            final_bn: BatchNorm2d::new(DENSENET161_FEATURES),
            final_relu: Relu::new(),
            head: Linear::new(
                spec.head.pooled_features,
                spec.head.output_dim,
                true,
                seed,
                "head.fc",
            ),
            spec,
            pre_head_hw: None,
        })
    }

    /// Per block, the input channel count of each layer. Layer `i` (1-based)
    /// sees `block_input + (i-1) * growth` channels.
    pub fn layer_input_channels(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|l| l.in_channels).collect())
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor1<T>> {
        let (_, c, _, _) = dims4(x);
        if c != 3 {
            return Err(Error::Input(format!("expected 3 input channels, got {c}")));
        }
        let mut out = self.stem_conv.forward(x, train)?;
        out = self.stem_bn.forward(&out, train)?;
        out = self.stem_relu.forward(&out, train);
        out = self.stem_pool.forward(&out, train)?;
        for bi in 0..self.blocks.len() {
            for layer in &mut self.blocks[bi] {
                out = layer.forward(&out, train)?;
            }
            if bi < self.transitions.len() {
                out = self.transitions[bi].forward(&out, train)?;
            }
        }
        out = self.final_bn.forward(&out, train)?;
        out = self.final_relu.forward(&out, train);
        let (_, _, h, w) = dims4(&out);
        self.pre_head_hw = Some((h, w));
        let pooled = global_avg_pool(&out);
        let y = self.head.forward(&pooled, train)?;
        Ok(y.column(0).to_owned())
    }

    pub fn backward(&mut self, dpred: &Tensor1<T>) -> Result<()> {
        let (h, w) = self
            .pre_head_hw
            .ok_or_else(|| Error::Input("backward without forward".into()))?;
        let b = dpred.len();
        let dout = Tensor2::from_shape_fn((b, 1), |(i, _)| dpred[i]);
        let dpooled = self.head.backward(&dout)?;
        let mut d = global_avg_pool_backward(&dpooled, h, w);
        d = self.final_relu.backward(&d)?;
        d = self.final_bn.backward(&d)?;
        for bi in (0..self.blocks.len()).rev() {
            if bi < self.transitions.len() {
                d = self.transitions[bi].backward(&d)?;
            }
            for layer in self.blocks[bi].iter_mut().rev() {
                d = layer.backward(&d)?;
            }
        }
        d = self.stem_pool.backward(&d)?;
        d = self.stem_relu.backward(&d)?;
        d = self.stem_bn.backward(&d)?;
        self.stem_conv.backward(&d)?;
        Ok(())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.stem_conv.visit(&join_path(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join_path(prefix, "stem.bn"), f);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.iter_mut().enumerate() {
                layer.visit(&join_path(prefix, &format!("block{}.layer{li}", bi + 1)), f);
            }
        }
        for (ti, t) in self.transitions.iter_mut().enumerate() {
            t.visit(&join_path(prefix, &format!("trans{}", ti + 1)), f);
        }
        self.final_bn.visit(&join_path(prefix, "final_bn"), f);
        self.head.visit(&join_path(prefix, "head.fc"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem_conv.visit_ref(&join_path(prefix, "stem.conv"), f);
        self.stem_bn.visit_ref(&join_path(prefix, "stem.bn"), f);
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.iter().enumerate() {
                layer.visit_ref(&join_path(prefix, &format!("block{}.layer{li}", bi + 1)), f);
            }
        }
        for (ti, t) in self.transitions.iter().enumerate() {
            t.visit_ref(&join_path(prefix, &format!("trans{}", ti + 1)), f);
        }
        self.final_bn.visit_ref(&join_path(prefix, "final_bn"), f);
        self.head.visit_ref(&join_path(prefix, "head.fc"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.stem_bn.visit_buffers(&join_path(prefix, "stem.bn"), f);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.iter_mut().enumerate() {
                layer.visit_buffers(
                    &join_path(prefix, &format!("block{}.layer{li}", bi + 1)),
                    f,
                );
            }
        }
        for (ti, t) in self.transitions.iter_mut().enumerate() {
            t.visit_buffers(&join_path(prefix, &format!("trans{}", ti + 1)), f);
        }
        self.final_bn.visit_buffers(&join_path(prefix, "final_bn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_connectivity_grows_linearly() {
        let net = DenseNet::<f32>::new(ArchitectureSpec::densenet161(), 0).unwrap();
        let per_block = net.layer_input_channels();
        assert_eq!(per_block.len(), 4);
        let mut expected_in = DENSENET161_INIT_FEATURES;
        for (bi, layers) in per_block.iter().enumerate() {
            assert_eq!(layers.len(), DENSENET161_BLOCKS[bi]);
            for (i, &c) in layers.iter().enumerate() {
                assert_eq!(c, expected_in + i * DENSENET161_GROWTH);
            }
            expected_in += layers.len() * DENSENET161_GROWTH;
            if bi + 1 < 4 {
                expected_in /= 2;
            }
        }
        assert_eq!(expected_in, DENSENET161_FEATURES);
    }

    #[test]
    fn tiny_forward_produces_one_scalar_per_image() {
        let mut net = DenseNet::<f32>::new(ArchitectureSpec::densenet161(), 0).unwrap();
        let x = Tensor4::zeros((1, 3, 32, 32));
        let y = net.forward(&x, false).unwrap();
        assert_eq!(y.len(), 1);
        assert!(y[0].is_finite());
    }
}
