//! ResNet50 with optional per-bottleneck CBAM refinement.
//!
//! Stage layout is the standard 3+4+6+3 bottleneck arrangement behind a
//! 7x7/2 stem and 3x3/2 max pool. Each bottleneck is 1x1 reduce, 3x3
//! spatial (carrying the block stride), 1x1 restore; the skip addition
//! happens before the final ReLU. When CBAM is enabled it refines the
//! three-convolution output before the residual addition, leaving the skip
//! path untouched.

use super::{ArchitectureSpec, Family};
use crate::attention::{Cbam, CbamMaps};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join_path, BatchNorm2d, BufferVisitor, Conv2d,
    Linear, MaxPool2d, ParamVisitor, ParamVisitorMut, Relu,
};
use crate::tensor::{dims4, Elem, Tensor1, Tensor2, Tensor4};

/// Geometry of one bottleneck block (expansion factor 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_cbam: bool,
    pub projection_on_skip: bool,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels != 4 * self.mid_channels {
            return Err(Error::Config(format!(
                "bottleneck expansion must be 4: mid {} out {}",
                self.mid_channels, self.out_channels
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!(
                "bottleneck stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if !self.projection_on_skip
            && (self.stride != 1 || self.in_channels != self.out_channels)
        {
            return Err(Error::Config(
                "identity skip requires stride 1 and matching channels".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub spec: BottleneckSpec,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    pub cbam: Option<Cbam<T>>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu<T>,
}

impl<T: Elem> Bottleneck<T> {
    pub fn new(
        spec: BottleneckSpec,
        reduction_ratio: usize,
        spatial_kernel: usize,
        seed: u64,
        name: &str,
    ) -> Result<Self> {
        spec.validate()?;
        let conv1 = Conv2d::new(
            spec.in_channels,
            spec.mid_channels,
            1,
            1,
            0,
            false,
            seed,
            &format!("{name}.conv1"),
        );
        let conv2 = Conv2d::new(
            spec.mid_channels,
            spec.mid_channels,
            3,
            spec.stride,
            1,
            false,
            seed,
            &format!("{name}.conv2"),
        );
        let conv3 = Conv2d::new(
            spec.mid_channels,
            spec.out_channels,
            1,
            1,
            0,
            false,
            seed,
            &format!("{name}.conv3"),
        );
        let cbam = spec
            .has_cbam
            .then(|| {
                Cbam::new(
                    spec.out_channels,
                    reduction_ratio,
                    spatial_kernel,
                    seed,
                    &format!("{name}.cbam"),
                )
            })
            .transpose()?;
        let downsample = spec.projection_on_skip.then(|| {
            (
                Conv2d::new(
                    spec.in_channels,
                    spec.out_channels,
                    1,
                    spec.stride,
                    0,
                    false,
                    seed,
                    &format!("{name}.downsample.conv"),
                ),
                BatchNorm2d::new(spec.out_channels),
            )
        });
        Ok(Bottleneck {
            spec,
            conv1,
            bn1: BatchNorm2d::new(spec.mid_channels),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::new(spec.mid_channels),
            relu2: Relu::new(),
            conv3,
            bn3: BatchNorm2d::new(spec.out_channels),
            cbam,
            downsample,
            relu_out: Relu::new(),
        })
    }

    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        train: bool,
        mut trace: Option<&mut Vec<CbamMaps<T>>>,
    ) -> Result<Tensor4<T>> {
        let mut out = self.conv1.forward(x, train)?;
        out = self.bn1.forward(&out, train)?;
        out = self.relu1.forward(&out, train);
        out = self.conv2.forward(&out, train)?;
        out = self.bn2.forward(&out, train)?;
        out = self.relu2.forward(&out, train);
        out = self.conv3.forward(&out, train)?;
        out = self.bn3.forward(&out, train)?;
        if let Some(cbam) = &mut self.cbam {
            if let Some(sink) = trace.as_deref_mut() {
                let (refined, maps) = cbam.forward_traced(&out, train)?;
                sink.push(maps);
                out = refined;
            } else {
                out = cbam.forward(&out, train)?;
            }
        }
        let skip = match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, train)?;
                bn.forward(&s, train)?
            }
            None => x.clone(),
        };
        out += &skip;
        Ok(self.relu_out.forward(&out, train))
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let dadd = self.relu_out.backward(dy)?;

        let mut dmain = dadd.clone();
        if let Some(cbam) = &mut self.cbam {
            dmain = cbam.backward(&dmain)?;
        }
        let mut d = self.bn3.backward(&dmain)?;
        d = self.conv3.backward(&d)?;
        d = self.relu2.backward(&d)?;
        d = self.bn2.backward(&d)?;
        d = self.conv2.backward(&d)?;
        d = self.relu1.backward(&d)?;
        d = self.bn1.backward(&d)?;
        let mut dx = self.conv1.backward(&d)?;

        match &mut self.downsample {
            Some((conv, bn)) => {
                let ds = bn.backward(&dadd)?;
                dx += &conv.backward(&ds)?;
            }
            None => dx += &dadd,
        }
        Ok(dx)
    }

    pub fn set_identity_attention(&mut self, identity: bool) {
        if let Some(cbam) = &mut self.cbam {
            cbam.identity = identity;
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.conv1.visit(&join_path(prefix, "conv1"), f);
        self.bn1.visit(&join_path(prefix, "bn1"), f);
        self.conv2.visit(&join_path(prefix, "conv2"), f);
        self.bn2.visit(&join_path(prefix, "bn2"), f);
        self.conv3.visit(&join_path(prefix, "conv3"), f);
        self.bn3.visit(&join_path(prefix, "bn3"), f);
        if let Some(cbam) = &mut self.cbam {
            cbam.visit(&join_path(prefix, "cbam"), f);
        }
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit(&join_path(prefix, "downsample.conv"), f);
            bn.visit(&join_path(prefix, "downsample.bn"), f);
        }
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit_ref(&join_path(prefix, "conv1"), f);
        self.bn1.visit_ref(&join_path(prefix, "bn1"), f);
        self.conv2.visit_ref(&join_path(prefix, "conv2"), f);
        self.bn2.visit_ref(&join_path(prefix, "bn2"), f);
        self.conv3.visit_ref(&join_path(prefix, "conv3"), f);
        self.bn3.visit_ref(&join_path(prefix, "bn3"), f);
        if let Some(cbam) = &self.cbam {
            cbam.visit_ref(&join_path(prefix, "cbam"), f);
        }
        if let Some((conv, bn)) = &self.downsample {
            conv.visit_ref(&join_path(prefix, "downsample.conv"), f);
            bn.visit_ref(&join_path(prefix, "downsample.bn"), f);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.bn1.visit_buffers(&join_path(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join_path(prefix, "bn2"), f);
        self.bn3.visit_buffers(&join_path(prefix, "bn3"), f);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_buffers(&join_path(prefix, "downsample.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResNet<T> {
    pub spec: ArchitectureSpec,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu<T>,
    stem_pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck<T>>>,
    head: Linear<T>,
    pre_head_hw: Option<(usize, usize)>,
}

impl<T: Elem> ResNet<T> {
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let has_cbam = spec.family == Family::Resnet50Cbam;
        let mut stages = Vec::with_capacity(4);
        let mut in_channels = 64usize;
        for (si, &depth) in spec.stage_depths.iter().enumerate() {
            let mid = 64 << si;
            let out = mid * 4;
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let bspec = BottleneckSpec {
                    in_channels,
                    mid_channels: mid,
                    out_channels: out,
                    stride,
                    has_cbam,
                    projection_on_skip: bi == 0,
                };
                blocks.push(Bottleneck::new(
                    bspec,
                    spec.reduction_ratio,
                    spec.spatial_kernel,
                    seed,
                    &format!("layer{}.{bi}", si + 1),
                )?);
                in_channels = out;
            }
            stages.push(blocks);
        }
        Ok(ResNet {
            stem_conv: Conv2d::new(3, 64, 7, 2, 3, false, seed, "stem.conv"),
            stem_bn: BatchNorm2d::new(64),
            stem_relu: Relu::new(),
            stem_pool: MaxPool2d::new(3, 2, 1),
            stages,
            head: Linear::new(spec.head.pooled_features, spec.head.output_dim, true, seed, "head.fc"),
            spec,
            pre_head_hw: None,
        })
    }

    pub fn total_bottlenecks(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }

    pub fn cbam_block_count(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .filter(|b| b.cbam.is_some())
            .count()
    }

    /// Feature extractor up to (but excluding) the pooling head.
    pub fn forward_features(
        &mut self,
        x: &Tensor4<T>,
        train: bool,
        mut trace: Option<&mut Vec<CbamMaps<T>>>,
    ) -> Result<Tensor4<T>> {
        let (_, c, _, _) = dims4(x);
        if c != 3 {
            return Err(Error::Input(format!("expected 3 input channels, got {c}")));
        }
        let mut out = self.stem_conv.forward(x, train)?;
        out = self.stem_bn.forward(&out, train)?;
        out = self.stem_relu.forward(&out, train);
        out = self.stem_pool.forward(&out, train)?;
        for stage in &mut self.stages {
            for block in stage {
                out = block.forward(&out, train, trace.as_deref_mut())?;
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor1<T>> {
        let feats = self.forward_features(x, train, None)?;
        self.finish_head(&feats, train)
    }

    /// Eval-mode forward that also captures every CBAM block's maps.
    pub fn forward_traced(&mut self, x: &Tensor4<T>) -> Result<(Tensor1<T>, Vec<CbamMaps<T>>)> {
        let mut trace = Vec::with_capacity(self.total_bottlenecks());
        let feats = self.forward_features(x, false, Some(&mut trace))?;
        let preds = self.finish_head(&feats, false)?;
        Ok((preds, trace))
    }

    fn finish_head(&mut self, feats: &Tensor4<T>, train: bool) -> Result<Tensor1<T>> {
        let (_, _, h, w) = dims4(feats);
        self.pre_head_hw = Some((h, w));
        let pooled = global_avg_pool(feats);
        let out = self.head.forward(&pooled, train)?;
        Ok(out.column(0).to_owned())
    }

    pub fn backward(&mut self, dpred: &Tensor1<T>) -> Result<()> {
        let (h, w) = self
            .pre_head_hw
            .ok_or_else(|| Error::Input("backward without forward".into()))?;
        let b = dpred.len();
        let dout = Tensor2::from_shape_fn((b, 1), |(i, _)| dpred[i]);
        let dpooled = self.head.backward(&dout)?;
        let mut d = global_avg_pool_backward(&dpooled, h, w);
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                d = block.backward(&d)?;
            }
        }
        d = self.stem_pool.backward(&d)?;
        d = self.stem_relu.backward(&d)?;
        d = self.stem_bn.backward(&d)?;
        self.stem_conv.backward(&d)?;
        Ok(())
    }

    pub fn set_identity_attention(&mut self, identity: bool) -> Result<()> {
        if self.spec.family != Family::Resnet50Cbam {
            return Err(Error::UnsupportedModel(
                "identity attention only applies to resnet50_cbam".into(),
            ));
        }
        for stage in &mut self.stages {
            for block in stage {
                block.set_identity_attention(identity);
            }
        }
        Ok(())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.stem_conv.visit(&join_path(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join_path(prefix, "stem.bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit(&join_path(prefix, &format!("layer{}.{bi}", si + 1)), f);
            }
        }
        self.head.visit(&join_path(prefix, "head.fc"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem_conv.visit_ref(&join_path(prefix, "stem.conv"), f);
        self.stem_bn.visit_ref(&join_path(prefix, "stem.bn"), f);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.visit_ref(&join_path(prefix, &format!("layer{}.{bi}", si + 1)), f);
            }
        }
        self.head.visit_ref(&join_path(prefix, "head.fc"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.stem_bn.visit_buffers(&join_path(prefix, "stem.bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&join_path(prefix, &format!("layer{}.{bi}", si + 1)), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_model, cbam_overhead_closed_form, Model};

    #[test]
    fn sixteen_bottlenecks_and_per_block_cbam() {
        let plain: Model<f32> = build_model(&ArchitectureSpec::resnet50(), 0).unwrap();
        let cbam: Model<f32> = build_model(&ArchitectureSpec::resnet50_cbam(), 0).unwrap();
        let (Model::ResNet(plain), Model::ResNet(cbam)) = (plain, cbam) else {
            panic!("wrong family")
        };
        assert_eq!(plain.total_bottlenecks(), 16);
        assert_eq!(plain.cbam_block_count(), 0);
        assert_eq!(cbam.total_bottlenecks(), 16);
        assert_eq!(cbam.cbam_block_count(), 16);
    }

    #[test]
    fn stride_one_preserves_shape_and_stride_two_halves() {
        let spec = BottleneckSpec {
            in_channels: 64,
            mid_channels: 16,
            out_channels: 64,
            stride: 1,
            has_cbam: false,
            projection_on_skip: false,
        };
        let mut block = Bottleneck::<f32>::new(spec, 16, 7, 0, "b").unwrap();
        let x = Tensor4::zeros((1, 64, 8, 8));
        assert_eq!(block.forward(&x, false, None).unwrap().dim(), (1, 64, 8, 8));

        let spec2 = BottleneckSpec {
            in_channels: 64,
            mid_channels: 32,
            out_channels: 128,
            stride: 2,
            has_cbam: false,
            projection_on_skip: true,
        };
        let mut block2 = Bottleneck::<f32>::new(spec2, 16, 7, 0, "b2").unwrap();
        assert_eq!(
            block2.forward(&x, false, None).unwrap().dim(),
            (1, 128, 4, 4)
        );
    }

    #[test]
    fn parameter_counts_follow_closed_form() {
        let spec = ArchitectureSpec::resnet50();
        let cspec = ArchitectureSpec::resnet50_cbam();
        let plain: Model<f32> = build_model(&spec, 0).unwrap();
        let with_cbam: Model<f32> = build_model(&cspec, 0).unwrap();
        let base = plain.count_parameters();
        let full = with_cbam.count_parameters();
        // Standard resnet50 backbone plus a scalar head.
        assert_eq!(base.total, 23_508_032 + 2049);
        assert_eq!(full.total - base.total, cbam_overhead_closed_form(&cspec));
        assert_eq!(full.cbam, cbam_overhead_closed_form(&cspec));
        let ratio = full.cbam as f64 / base.total as f64;
        assert!(ratio < 0.12, "overhead ratio {ratio}");
    }

    #[test]
    fn invalid_bottleneck_specs_rejected() {
        let bad_expansion = BottleneckSpec {
            in_channels: 64,
            mid_channels: 16,
            out_channels: 32,
            stride: 1,
            has_cbam: false,
            projection_on_skip: false,
        };
        assert!(bad_expansion.validate().is_err());
        let bad_identity = BottleneckSpec {
            in_channels: 64,
            mid_channels: 32,
            out_channels: 128,
            stride: 1,
            has_cbam: false,
            projection_on_skip: false,
        };
        assert!(bad_identity.validate().is_err());
    }
}
