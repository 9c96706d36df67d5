//! Toy differentiable segmentation networks: a small convolutional backbone
//! and a per-position linear classifier with bilinear upsampling back to the
//! input resolution.

use ndarray::{Array1, Array3, Array4, ArrayD, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::labels::LabelSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    /// Output grid is `H/d x W/d`; d must be a power of two realizable by
    /// stride-2 stages.
    pub downsample_factor: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            feature_channels: 16,
            depth: 2,
            downsample_factor: 2,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 1 || self.depth < 1 {
            return Err(Error::Config("backbone needs >= 1 stage and channel".into()));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config("downsample factor must be a power of two".into()));
        }
        let strided = self.downsample_factor.trailing_zeros() as usize;
        if strided > self.depth {
            return Err(Error::Config(format!(
                "downsample {} needs at least {strided} stages, depth is {}",
                self.downsample_factor, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub label_space: LabelSpace,
    pub feature_channels: usize,
}

impl ClassifierSpec {
    pub fn output_channels(&self) -> usize {
        self.label_space.channel_count()
    }
}

/// One convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn he_init<R: Rng>(
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn((out_c, in_c, kernel, kernel), |_| {
            normal_sample(rng) * std
        })
        .into_dyn();
        let bias = Array1::<f64>::zeros(out_c).into_dyn();
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }
}

fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Feature extractor: `depth` 3x3 conv + ReLU stages, the first
/// `log2(downsample_factor)` of them with stride 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub layers: Vec<ConvLayer>,
}

impl Backbone {
    pub fn init<R: Rng>(spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let strided = spec.downsample_factor.trailing_zeros() as usize;
        let layers = (0..spec.depth)
            .map(|s| {
                let in_c = if s == 0 {
                    spec.input_channels
                } else {
                    spec.feature_channels
                };
                let stride = if s < strided { 2 } else { 1 };
                ConvLayer::he_init(spec.feature_channels, in_c, 3, stride, rng)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("conv{i}.weight"), format!("conv{i}.bias")])
            .collect()
    }

    /// Inserts the parameters as tape leaves, in [`Self::params`] order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Applies the backbone using previously inserted leaves.
    pub fn apply(&self, tape: &mut Tape, leaves: &[Var], image: Var) -> Var {
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            let conv = tape.conv2d(x, leaves[2 * i], leaves[2 * i + 1], layer.stride, layer.pad);
            x = tape.relu(conv);
        }
        x
    }
}

/// Per-position linear map to `1 + |label space|` logits, upsampled back to
/// input resolution by the backbone's downsample factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub layer: ConvLayer,
}

impl Classifier {
    pub fn init<R: Rng>(spec: ClassifierSpec, rng: &mut R) -> Self {
        let layer = ConvLayer::he_init(spec.output_channels(), spec.feature_channels, 1, 1, rng);
        Self { spec, layer }
    }

    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        vec![&self.layer.weight, &self.layer.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }

    pub fn param_names(&self) -> Vec<String> {
        vec!["head.weight".into(), "head.bias".into()]
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn apply(&self, tape: &mut Tape, leaves: &[Var], features: Var, upsample: usize) -> Var {
        let logits = tape.conv2d(features, leaves[0], leaves[1], 1, 0);
        tape.upsample_bilinear(logits, upsample)
    }
}

/// Tape-free forward pass of a backbone.
pub fn forward_backbone(backbone: &Backbone, image: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if c != backbone.spec.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {c} channels, backbone expects {}",
            backbone.spec.input_channels
        )));
    }
    let d = backbone.spec.downsample_factor;
    if h % d != 0 || w % d != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} not divisible by downsample factor {d}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf3(image.clone());
    let leaves = backbone.leaves(&mut tape);
    let out = backbone.apply(&mut tape, &leaves, x);
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("3-d features"))
}

/// Tape-free forward pass of a classifier over precomputed features.
pub fn forward_classifier(
    classifier: &Classifier,
    features: &Array3<f64>,
    upsample: usize,
) -> Result<Array3<f64>> {
    let (c, _, _) = features.dim();
    if c != classifier.spec.feature_channels {
        return Err(Error::ShapeMismatch(format!(
            "features have {c} channels, classifier expects {}",
            classifier.spec.feature_channels
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf3(features.clone());
    let leaves = classifier.leaves(&mut tape);
    let out = classifier.apply(&mut tape, &leaves, x, upsample);
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("3-d logits"))
}
