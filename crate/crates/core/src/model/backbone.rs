//! Image → `C × 7 × 7` feature extractors built from [`Block`] trees.

use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, Conv2d, Param, Parameterized};
use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Side length of the feature map every backbone produces.
pub const FEATURE_SIDE: usize = 7;

/// Architecture description; together with the input size it fixes every shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    /// Five 3×3 conv + ReLU blocks, max-pooling after the first ones as needed.
    Small { widths: Vec<usize> },
    /// Bottleneck residual network; `stages` lists `(blocks, inner width)`.
    Resnet { stem: usize, stages: Vec<(usize, usize)>, expansion: usize },
    /// Plain conv stacks, one max-pool after each stage while downsampling is needed.
    Vgg { stages: Vec<Vec<usize>> },
    /// Multi-branch residual blocks with concatenating reductions between stages.
    Incres { stem: usize, widths: Vec<usize>, blocks: usize },
}

impl BackboneSpec {
    pub fn small() -> Self {
        BackboneSpec::Small { widths: vec![16, 32, 64, 128, 256] }
    }

    pub fn resnet50() -> Self {
        BackboneSpec::Resnet { stem: 64, stages: vec![(3, 64), (4, 128), (6, 256), (3, 512)], expansion: 4 }
    }

    pub fn vgg16() -> Self {
        BackboneSpec::Vgg {
            stages: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512], vec![512, 512, 512]],
        }
    }

    pub fn incres() -> Self {
        BackboneSpec::Incres { stem: 64, widths: vec![128, 256, 512, 1024], blocks: 2 }
    }

    /// Narrow variants sized for single-core CPU training on small images.
    pub fn desk(name: &str) -> Result<Self> {
        Ok(match name {
            "small" => BackboneSpec::Small { widths: vec![16, 32, 48, 64, 64] },
            "resnet" | "resnet50" => BackboneSpec::Resnet { stem: 16, stages: vec![(1, 8), (1, 12), (1, 16)], expansion: 4 },
            "vgg" | "vgg16" => BackboneSpec::Vgg { stages: vec![vec![16], vec![32], vec![48, 64]] },
            "incres" => BackboneSpec::Incres { stem: 16, widths: vec![32, 48], blocks: 1 },
            other => return Err(Error::Invalid(format!("unknown backbone `{other}`"))),
        })
    }

    /// Full-size variants by CLI name.
    pub fn reference(name: &str) -> Result<Self> {
        Ok(match name {
            "small" => Self::small(),
            "resnet" | "resnet50" => Self::resnet50(),
            "vgg" | "vgg16" => Self::vgg16(),
            "incres" => Self::incres(),
            other => return Err(Error::Invalid(format!("unknown backbone `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneSpec::Small { .. } => "small",
            BackboneSpec::Resnet { .. } => "resnet",
            BackboneSpec::Vgg { .. } => "vgg",
            BackboneSpec::Incres { .. } => "incres",
        }
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub image_size: usize,
    pub channels: usize,
    pub net: Block<f32>,
}

/// Number of halvings that take `size` down to 7.
fn halvings(size: usize) -> Result<usize> {
    let mut s = size;
    let mut k = 0;
    while s > FEATURE_SIDE && s % 2 == 0 {
        s /= 2;
        k += 1;
    }
    if s != FEATURE_SIDE {
        return Err(Error::Invalid(format!("image size {size} is not 7·2^k")));
    }
    Ok(k)
}

fn conv<R: Rng + ?Sized>(i: usize, o: usize, k: usize, s: usize, rng: &mut R) -> Block<f32> {
    Block::Conv(Conv2d::new(i, o, k, s, k / 2, rng))
}

fn damp(mut b: Conv2d<f32>, by: f32) -> Conv2d<f32> {
    b.weight.values_mut().iter_mut().for_each(|v| *v *= by);
    b
}

impl Backbone {
    pub fn build<R: Rng + ?Sized>(spec: &BackboneSpec, image_size: usize, rng: &mut R) -> Result<Self> {
        let k = halvings(image_size)?;
        let (net, channels) = match spec {
            BackboneSpec::Small { widths } => {
                if widths.is_empty() || k > widths.len() + 1 {
                    return Err(Error::Invalid(format!("{} blocks cannot reach 7×7 from {image_size}", widths.len())));
                }
                // with more halvings than blocks, the first conv also strides
                let strided_first = k > widths.len();
                let pools = k - strided_first as usize;
                let mut items = Vec::new();
                let mut c = 3;
                for (i, &w) in widths.iter().enumerate() {
                    let s = if i == 0 && strided_first { 2 } else { 1 };
                    items.push(conv(c, w, 3, s, rng));
                    items.push(Block::Relu);
                    if i < pools {
                        items.push(Block::MaxPool2);
                    }
                    c = w;
                }
                (Block::Seq(items), c)
            }
            BackboneSpec::Resnet { stem, stages, expansion } => {
                if stages.is_empty() {
                    return Err(Error::Invalid("resnet needs at least one stage".into()));
                }
                let in_stage = stages.len() - 1;
                let r = k.checked_sub(in_stage).filter(|&r| r <= 2).ok_or_else(|| {
                    Error::Invalid(format!("{} stages cannot reach 7×7 from {image_size}", stages.len()))
                })?;
                let mut items = Vec::new();
                if r == 2 {
                    items.push(conv(3, *stem, 7, 2, rng));
                } else {
                    items.push(conv(3, *stem, 3, 1, rng));
                }
                items.push(Block::Relu);
                if r >= 1 {
                    items.push(Block::MaxPool2);
                }
                let mut c = *stem;
                for (si, &(blocks, inner)) in stages.iter().enumerate() {
                    let out = inner * expansion;
                    for bi in 0..blocks {
                        let s = if si > 0 && bi == 0 { 2 } else { 1 };
                        let body = Block::Seq(vec![
                            conv(c, inner, 1, 1, rng),
                            Block::Relu,
                            conv(inner, inner, 3, s, rng),
                            Block::Relu,
                            Block::Conv(damp(Conv2d::new(inner, out, 1, 1, 0, rng), 0.2)),
                        ]);
                        let shortcut = (s != 1 || c != out).then(|| Conv2d::new(c, out, 1, s, 0, rng));
                        items.push(Block::Residual { body: Box::new(body), shortcut, scale: 1.0, post_relu: true });
                        c = out;
                    }
                }
                (Block::Seq(items), c)
            }
            BackboneSpec::Vgg { stages } => {
                if k > stages.len() {
                    return Err(Error::Invalid(format!("{} stages cannot reach 7×7 from {image_size}", stages.len())));
                }
                let mut items = Vec::new();
                let mut c = 3;
                for (si, stage) in stages.iter().enumerate() {
                    for &w in stage {
                        items.push(conv(c, w, 3, 1, rng));
                        items.push(Block::Relu);
                        c = w;
                    }
                    if si < k {
                        items.push(Block::MaxPool2);
                    }
                }
                (Block::Seq(items), c)
            }
            BackboneSpec::Incres { stem, widths, blocks } => {
                let r = k.checked_sub(widths.len().saturating_sub(1)).filter(|&r| r <= 2).ok_or_else(|| {
                    Error::Invalid(format!("{} stages cannot reach 7×7 from {image_size}", widths.len()))
                })?;
                let mut items = vec![conv(3, *stem, 3, if r == 2 { 2 } else { 1 }, rng), Block::Relu];
                if r >= 1 {
                    items.push(Block::MaxPool2);
                }
                let mut c = *stem;
                for (si, &w) in widths.iter().enumerate() {
                    if si > 0 {
                        // reduction: pooled input next to a strided conv, concatenated
                        let grow = w.checked_sub(c).filter(|&g| g > 0).ok_or_else(|| {
                            Error::Invalid("incres widths must increase".into())
                        })?;
                        items.push(Block::Concat(vec![
                            Block::MaxPool2,
                            Block::Seq(vec![conv(c, grow, 3, 2, rng), Block::Relu]),
                        ]));
                    } else if c != w {
                        items.push(conv(c, w, 1, 1, rng));
                        items.push(Block::Relu);
                    }
                    c = w;
                    for _ in 0..*blocks {
                        let b = (c / 4).max(1);
                        let branches = Block::Concat(vec![
                            Block::Seq(vec![conv(c, b, 1, 1, rng), Block::Relu]),
                            Block::Seq(vec![conv(c, b, 1, 1, rng), Block::Relu, conv(b, b, 3, 1, rng), Block::Relu]),
                            Block::Seq(vec![
                                conv(c, b, 1, 1, rng),
                                Block::Relu,
                                conv(b, b, 3, 1, rng),
                                Block::Relu,
                                conv(b, b, 3, 1, rng),
                                Block::Relu,
                            ]),
                        ]);
                        let body = Block::Seq(vec![branches, Block::Conv(Conv2d::new(3 * b, c, 1, 1, 0, rng))]);
                        items.push(Block::Residual { body: Box::new(body), shortcut: None, scale: 0.2, post_relu: true });
                    }
                }
                (Block::Seq(items), c)
            }
        };
        let bb = Self { spec: spec.clone(), image_size, channels, net };
        let probe = bb.net.forward(&Array4::zeros((1, 3, image_size, image_size)));
        if probe.dim() != (1, channels, FEATURE_SIDE, FEATURE_SIDE) {
            return Err(Error::Shape(format!("backbone produced {:?}", probe.dim())));
        }
        Ok(bb)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check(x)?;
        Ok(self.net.forward(x))
    }

    pub fn forward_train(&self, x: &Array4<f32>) -> Result<(Array4<f32>, BlockCache<f32>)> {
        self.check(x)?;
        Ok(self.net.forward_train(x))
    }

    pub fn backward(&mut self, cache: BlockCache<f32>, d_features: Array4<f32>) {
        self.net.backward(cache, d_features, false);
    }

    fn check(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "backbone expects 3×{s}×{s}, got {c}×{h}×{w}",
                s = self.image_size
            )));
        }
        Ok(())
    }
}

impl Parameterized<f32> for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        self.net.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.net.visit_mut(prefix, f)
    }
}
