//! Backbone assembly: ResNet50, ResNet50+CBAM, DenseNet161, all ending in a
//! scalar regression head (global average pool, one fully connected layer).

mod densenet;
mod resnet;

pub use densenet::DenseNet;
pub use resnet::{Bottleneck, BottleneckSpec, ResNet};

use serde::{Deserialize, Serialize};

use crate::attention::{CbamMaps, DEFAULT_REDUCTION_RATIO};
use crate::error::{Error, Result};
use crate::nn::{BufferVisitor, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Elem, Tensor1, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet50,
    Resnet50Cbam,
    Densenet161,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Resnet50 => "resnet50",
            Family::Resnet50Cbam => "resnet50_cbam",
            Family::Densenet161 => "densenet161",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Family::Resnet50),
            "resnet50_cbam" => Ok(Family::Resnet50Cbam),
            "densenet161" => Ok(Family::Densenet161),
            other => Err(Error::Config(format!(
                "unknown model family {other:?}; expected resnet50, resnet50_cbam, or densenet161"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar regression head: global pooling into one fully connected output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegressionHeadSpec {
    pub pooled_features: usize,
    pub output_dim: usize,
    /// Applied at inference only, never inside the training loss.
    pub inference_clamp: (f64, f64),
}

impl RegressionHeadSpec {
    pub fn scalar(pooled_features: usize) -> Self {
        RegressionHeadSpec {
            pooled_features,
            output_dim: 1,
            inference_clamp: (0.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchitectureSpec {
    pub family: Family,
    /// Bottlenecks per stage; fixed to `[3,4,6,3]` for the resnet family.
    pub stage_depths: [usize; 4],
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    pub head: RegressionHeadSpec,
    pub pretrained_backbone: bool,
}

impl ArchitectureSpec {
    pub fn resnet50() -> Self {
        ArchitectureSpec {
            family: Family::Resnet50,
            stage_depths: [3, 4, 6, 3],
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            spatial_kernel: 7,
            head: RegressionHeadSpec::scalar(2048),
            pretrained_backbone: false,
        }
    }

    pub fn resnet50_cbam() -> Self {
        ArchitectureSpec {
            family: Family::Resnet50Cbam,
            ..Self::resnet50()
        }
    }

    pub fn densenet161() -> Self {
        ArchitectureSpec {
            family: Family::Densenet161,
            stage_depths: [3, 4, 6, 3], // unused by the dense family
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            spatial_kernel: 7,
            head: RegressionHeadSpec::scalar(densenet::DENSENET161_FEATURES),
            pretrained_backbone: false,
        }
    }

    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Resnet50 => Self::resnet50(),
            Family::Resnet50Cbam => Self::resnet50_cbam(),
            Family::Densenet161 => Self::densenet161(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Resnet50 | Family::Resnet50Cbam => {
                if self.stage_depths != [3, 4, 6, 3] {
                    return Err(Error::Config(format!(
                        "resnet50 stage depths are fixed to [3,4,6,3], got {:?}",
                        self.stage_depths
                    )));
                }
                if self.head.pooled_features != 2048 {
                    return Err(Error::Config(
                        "resnet50 head expects 2048 pooled features".into(),
                    ));
                }
            }
            Family::Densenet161 => {
                if self.head.pooled_features != densenet::DENSENET161_FEATURES {
                    return Err(Error::Config(format!(
                        "densenet161 head expects {} pooled features",
                        densenet::DENSENET161_FEATURES
                    )));
                }
            }
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction ratio must be positive".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("spatial kernel must be odd".into()));
        }
        if self.head.output_dim != 1 {
            return Err(Error::Config("regression head emits one scalar".into()));
        }
        Ok(())
    }
}

/// A buildable, trainable model of any supported family.
#[derive(Debug, Clone)]
pub enum Model<T> {
    ResNet(ResNet<T>),
    DenseNet(DenseNet<T>),
}

/// Builds a freshly initialized model. All initial weights derive from
/// `(seed, parameter name)`, so two families share identical backbone
/// initialization for the same seed.
pub fn build_model<T: Elem>(spec: &ArchitectureSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    match spec.family {
        Family::Resnet50 | Family::Resnet50Cbam => {
            Ok(Model::ResNet(ResNet::new(spec.clone(), seed)?))
        }
        Family::Densenet161 => Ok(Model::DenseNet(DenseNet::new(spec.clone(), seed)?)),
    }
}

impl<T: Elem> Model<T> {
    pub fn spec(&self) -> &ArchitectureSpec {
        match self {
            Model::ResNet(m) => &m.spec,
            Model::DenseNet(m) => &m.spec,
        }
    }

    /// Unclamped forward pass; training mode when `train` is set.
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor1<T>> {
        match self {
            Model::ResNet(m) => m.forward(x, train),
            Model::DenseNet(m) => m.forward(x, train),
        }
    }

    /// Backpropagates prediction gradients into parameter gradients.
    pub fn backward(&mut self, dpred: &Tensor1<T>) -> Result<()> {
        match self {
            Model::ResNet(m) => m.backward(dpred),
            Model::DenseNet(m) => m.backward(dpred),
        }
    }

    /// Inference: eval-mode forward with predictions clamped to the head's
    /// range.
    pub fn predict(&mut self, batch: &Tensor4<T>) -> Result<Vec<f64>> {
        let (lo, hi) = self.spec().head.inference_clamp;
        let raw = self.forward(batch, false)?;
        Ok(raw.iter().map(|v| v.as_f64().clamp(lo, hi)).collect())
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        match self {
            Model::ResNet(m) => m.visit("", f),
            Model::DenseNet(m) => m.visit("", f),
        }
    }

    pub fn visit_params_ref(&self, f: &mut ParamVisitor<'_, T>) {
        match self {
            Model::ResNet(m) => m.visit_ref("", f),
            Model::DenseNet(m) => m.visit_ref("", f),
        }
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<'_, T>) {
        match self {
            Model::ResNet(m) => m.visit_buffers("", f),
            Model::DenseNet(m) => m.visit_buffers("", f),
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Pins every CBAM map to 1.0 (exact identity). Only meaningful for the
    /// CBAM family.
    pub fn set_identity_attention(&mut self, identity: bool) -> Result<()> {
        match self {
            Model::ResNet(m) => m.set_identity_attention(identity),
            Model::DenseNet(_) => Err(Error::UnsupportedModel(
                "densenet161 has no attention blocks".into(),
            )),
        }
    }

    /// Eval-mode forward capturing every CBAM block's maps in traversal
    /// order. Errors for families without attention.
    pub fn forward_traced(&mut self, x: &Tensor4<T>) -> Result<(Tensor1<T>, Vec<CbamMaps<T>>)> {
        match self {
            Model::ResNet(m) => {
                if m.spec.family != Family::Resnet50Cbam {
                    return Err(Error::UnsupportedModel(
                        "attention extraction requires a resnet50_cbam model".into(),
                    ));
                }
                m.forward_traced(x)
            }
            Model::DenseNet(_) => Err(Error::UnsupportedModel(
                "attention extraction requires a resnet50_cbam model".into(),
            )),
        }
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let mut count = ParameterCount::default();
        self.visit_params_ref(&mut |name, p| {
            count.total += p.len();
            if name.contains(".cbam.") {
                count.cbam += p.len();
            }
            let top = name.split('.').next().unwrap_or("").to_string();
            *count.by_module.entry(top).or_insert(0) += p.len();
        });
        count
    }
}

/// Exact learnable-scalar counts with CBAM-attributable isolation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// Parameters living inside CBAM blocks.
    pub cbam: usize,
    /// Per top-level module (stem, layer1..layer4, head, ...).
    pub by_module: std::collections::BTreeMap<String, usize>,
}

impl ParameterCount {
    pub fn backbone(&self) -> usize {
        self.total - self.cbam
    }
}

/// Closed-form count of all CBAM parameters in a resnet50_cbam:
/// one block per bottleneck, at the bottleneck's output width.
pub fn cbam_overhead_closed_form(spec: &ArchitectureSpec) -> usize {
    let widths = [256usize, 512, 1024, 2048];
    spec.stage_depths
        .iter()
        .zip(widths.iter())
        .map(|(&depth, &c)| {
            depth * crate::attention::cbam_param_count(c, spec.reduction_ratio, spec.spatial_kernel)
        })
        .sum()
}
