use serde::{Deserialize, Serialize};
use softcbm_tensor::{ConvSpec, Padding};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cbm,
    Cem,
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbm" => Ok(Variant::Cbm),
            "cem" => Ok(Variant::Cem),
            other => Err(CoreError::Config(format!("unknown model variant `{other}` (expected cbm or cem)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Cbm => "cbm",
            Variant::Cem => "cem",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Same,
    Valid,
}

impl From<PaddingMode> for Padding {
    fn from(p: PaddingMode) -> Self {
        match p {
            PaddingMode::Same => Padding::Same,
            PaddingMode::Valid => Padding::Valid,
        }
    }
}

/// Feature extractor in front of the concept layer.
///
/// Rank-3 inputs (`H × W × C`) pass through the 3×3 convolution stack, each
/// convolution followed by a leaky-ReLU and then batch normalization (if enabled).
/// The flattened result goes through one linear layer of width `hidden` with
/// a leaky-ReLU. `hidden = 0` skips that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub conv_filters: Vec<usize>,
    /// One stride per convolution.
    pub strides: Vec<usize>,
    pub padding: PaddingMode,
    pub batch_norm: bool,
    pub hidden: usize,
}

impl BackboneSpec {
    pub fn conv_spec(&self, layer: usize) -> Result<ConvSpec> {
        let stride = *self
            .strides
            .get(layer)
            .ok_or_else(|| CoreError::Config(format!("no stride given for convolution {layer}")))?;
        Ok(ConvSpec::new(stride, self.padding.into())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub variant: Variant,
    /// Number of binary concepts.
    pub k: usize,
    /// CEM embedding size per concept.
    pub m: usize,
    /// Weight of the concept loss in the joint objective.
    pub alpha: f64,
    pub input_shape: Vec<usize>,
    pub backbone: BackboneSpec,
    /// Hidden widths of the ReLU label head; the output layer has `n_classes` units.
    pub head: Vec<usize>,
    pub n_classes: usize,
}

impl BottleneckConfig {
    /// Convolutional setup for `p`-digit UMNIST inputs: filters 5, 10, 20, 40 with
    /// stride 2 and same padding, a 20-unit linear layer, and a `{20, p + 1}` label head.
    pub fn umnist(variant: Variant, p: usize) -> Self {
        Self {
            variant,
            k: p,
            m: 8,
            alpha: 1.0,
            input_shape: vec![28, 28, p],
            backbone: BackboneSpec {
                conv_filters: vec![5, 10, 20, 40],
                strides: vec![2, 2, 2, 2],
                padding: PaddingMode::Same,
                batch_norm: true,
                hidden: 20,
            },
            head: vec![20],
            n_classes: p + 1,
        }
    }

    /// Fully connected setup for flat feature vectors.
    pub fn dense(variant: Variant, input_len: usize, k: usize, n_classes: usize) -> Self {
        Self {
            variant,
            k,
            m: 8,
            alpha: 1.0,
            input_shape: vec![input_len],
            backbone: BackboneSpec {
                conv_filters: Vec::new(),
                strides: Vec::new(),
                padding: PaddingMode::Same,
                batch_norm: false,
                hidden: 32,
            },
            head: vec![32],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Config("k must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(CoreError::Config("embedding size m must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CoreError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.n_classes == 0 {
            return Err(CoreError::Config("n_classes must be at least 1".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(CoreError::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.head.contains(&0) {
            return Err(CoreError::Config("label head widths must be positive".into()));
        }
        if !self.backbone.conv_filters.is_empty() {
            if self.input_shape.len() != 3 {
                return Err(CoreError::Config(format!(
                    "convolutions need an H x W x C input, got {:?}",
                    self.input_shape
                )));
            }
            if self.backbone.strides.len() != self.backbone.conv_filters.len() {
                return Err(CoreError::Config(format!(
                    "{} strides for {} convolutions",
                    self.backbone.strides.len(),
                    self.backbone.conv_filters.len()
                )));
            }
            if self.backbone.conv_filters.contains(&0) {
                return Err(CoreError::Config("conv filter counts must be positive".into()));
            }
            self.conv_output_shape()?;
        }
        Ok(())
    }

    /// `[H, W, C]` after the convolution stack.
    pub(crate) fn conv_output_shape(&self) -> Result<Vec<usize>> {
        let (mut h, mut w, mut c) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
        for (l, &f) in self.backbone.conv_filters.iter().enumerate() {
            (h, w) = self.backbone.conv_spec(l)?.output_dims(h, w)?;
            c = f;
        }
        Ok(vec![h, w, c])
    }

    /// Width of the flattened input to the hidden linear layer.
    pub(crate) fn flat_features(&self) -> Result<usize> {
        if self.backbone.conv_filters.is_empty() {
            Ok(self.input_shape.iter().product())
        } else {
            Ok(self.conv_output_shape()?.iter().product())
        }
    }

    /// Width of the backbone output fed to the concept layer.
    pub fn feature_width(&self) -> Result<usize> {
        if self.backbone.hidden > 0 {
            Ok(self.backbone.hidden)
        } else {
            self.flat_features()
        }
    }

    /// Width of the bottleneck fed to the label head.
    pub fn bottleneck_width(&self) -> usize {
        match self.variant {
            Variant::Cbm => self.k,
            Variant::Cem => self.k * self.m,
        }
    }
}
