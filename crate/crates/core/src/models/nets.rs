//! Network bodies. Every body maps an `N×3×H×W` batch to its output and
//! takes the train/eval switch explicitly.

use tch::nn::{self, ConvConfig, ConvTransposeConfig, GroupNormConfig};
use tch::Tensor;

use crate::image::Normalization;

fn conv(p: nn::Path, i: i64, o: i64, k: i64, stride: i64, padding: i64, bias: bool) -> nn::Conv2D {
    nn::conv2d(
        p,
        i,
        o,
        k,
        ConvConfig {
            stride,
            padding,
            bias,
            ..Default::default()
        },
    )
}

/// Instance normalization with affine parameters (one group per channel).
fn instance_norm(p: nn::Path, c: i64) -> nn::GroupNorm {
    nn::group_norm(p, c, c, GroupNormConfig::default())
}

// ---------------------------------------------------------------- VGG13-BN

pub(crate) struct Vgg {
    layers: Vec<VggLayer>,
    fc: nn::Linear,
}

enum VggLayer {
    Conv(nn::Conv2D, nn::BatchNorm),
    Pool,
}

impl Vgg {
    /// VGG13 layer plan with batch norm; widths scale with `base` (64 in the
    /// reference network). Pooling is skipped once the map is 1×1, so small
    /// inputs still run.
    pub fn new(p: nn::Path, base: i64, num_classes: i64) -> Self {
        const PLAN: [i64; 15] = [1, 1, 0, 2, 2, 0, 4, 4, 0, 8, 8, 0, 8, 8, 0];
        let mut layers = Vec::new();
        let mut c_in = 3;
        let mut idx = 0;
        for m in PLAN {
            if m == 0 {
                layers.push(VggLayer::Pool);
            } else {
                let c_out = base * m;
                let f = p.sub("features");
                layers.push(VggLayer::Conv(
                    conv(f.sub(idx), c_in, c_out, 3, 1, 1, true),
                    nn::batch_norm2d(f.sub(idx + 1), c_out, Default::default()),
                ));
                c_in = c_out;
                idx += 2;
            }
        }
        let fc = nn::linear(p.sub("classifier"), c_in, num_classes, Default::default());
        Self { layers, fc }
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut h = xs.shallow_clone();
        for layer in &self.layers {
            h = match layer {
                VggLayer::Conv(c, bn) => h.apply(c).apply_t(bn, train).relu(),
                VggLayer::Pool => {
                    let s = h.size();
                    if s[2] >= 2 && s[3] >= 2 {
                        h.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false)
                    } else {
                        h
                    }
                }
            };
        }
        h.adaptive_avg_pool2d([1, 1]).flatten(1, -1).apply(&self.fc)
    }
}

// ---------------------------------------------------------------- ResNet-18

struct BasicBlock {
    conv1: nn::Conv2D,
    bn1: nn::BatchNorm,
    conv2: nn::Conv2D,
    bn2: nn::BatchNorm,
    shortcut: Option<(nn::Conv2D, nn::BatchNorm)>,
}

impl BasicBlock {
    fn new(p: nn::Path, c_in: i64, c_out: i64, stride: i64) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                conv(p.sub("shortcut").sub(0), c_in, c_out, 1, stride, 0, false),
                nn::batch_norm2d(p.sub("shortcut").sub(1), c_out, Default::default()),
            )
        });
        Self {
            conv1: conv(p.sub("conv1"), c_in, c_out, 3, stride, 1, false),
            bn1: nn::batch_norm2d(p.sub("bn1"), c_out, Default::default()),
            conv2: conv(p.sub("conv2"), c_out, c_out, 3, 1, 1, false),
            bn2: nn::batch_norm2d(p.sub("bn2"), c_out, Default::default()),
            shortcut,
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let h = xs.apply(&self.conv1).apply_t(&self.bn1, train).relu();
        let h = h.apply(&self.conv2).apply_t(&self.bn2, train);
        let skip = match &self.shortcut {
            Some((c, bn)) => xs.apply(c).apply_t(bn, train),
            None => xs.shallow_clone(),
        };
        (h + skip).relu()
    }
}

/// ResNet-18 in the CIFAR layout: 3×3 stem, four stages of two basic blocks.
pub(crate) struct ResNet {
    stem: nn::Conv2D,
    bn: nn::BatchNorm,
    blocks: Vec<BasicBlock>,
    fc: nn::Linear,
}

impl ResNet {
    pub fn new(p: nn::Path, base: i64, num_classes: i64) -> Self {
        let mut blocks = Vec::new();
        let mut c_in = base;
        for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
            let c_out = base * mult;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("layer{}", stage + 1);
                blocks.push(BasicBlock::new(p.sub(name).sub(b), c_in, c_out, stride));
                c_in = c_out;
            }
        }
        Self {
            stem: conv(p.sub("conv1"), 3, base, 3, 1, 1, false),
            bn: nn::batch_norm2d(p.sub("bn1"), base, Default::default()),
            blocks,
            fc: nn::linear(p.sub("linear"), c_in, num_classes, Default::default()),
        }
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut h = xs.apply(&self.stem).apply_t(&self.bn, train).relu();
        for b in &self.blocks {
            h = b.forward_t(&h, train);
        }
        h.adaptive_avg_pool2d([1, 1]).flatten(1, -1).apply(&self.fc)
    }
}

// ---------------------------------------------------------------- generators

/// Output stage shared by the generators: `tanh(head(h))`, or with a global
/// skip `tanh(atanh(0.99·x) + head(h))` where `head` starts at zero so the
/// network begins as (nearly) the identity map.
struct OutputHead {
    head: nn::Conv2D,
    residual: bool,
}

impl OutputHead {
    fn forward(&self, h: &Tensor, input: &Tensor) -> Tensor {
        let r = h.apply(&self.head);
        if self.residual {
            ((input * 0.99).atanh() + r).tanh()
        } else {
            r.tanh()
        }
    }
}

pub(crate) const RESIDUAL_HEAD: &str = "head_residual";

fn output_head(p: &nn::Path, c_in: i64, k: i64, residual: bool) -> OutputHead {
    let name = if residual { RESIDUAL_HEAD } else { "head" };
    OutputHead {
        head: conv(p.sub(name), c_in, 3, k, 1, k / 2, true),
        residual,
    }
}

struct DoubleConv {
    c1: nn::Conv2D,
    n1: nn::GroupNorm,
    c2: nn::Conv2D,
    n2: nn::GroupNorm,
}

impl DoubleConv {
    fn new(p: nn::Path, c_in: i64, c_out: i64) -> Self {
        Self {
            c1: conv(p.sub("conv1"), c_in, c_out, 3, 1, 1, false),
            n1: instance_norm(p.sub("norm1"), c_out),
            c2: conv(p.sub("conv2"), c_out, c_out, 3, 1, 1, false),
            n2: instance_norm(p.sub("norm2"), c_out),
        }
    }

    fn forward(&self, xs: &Tensor) -> Tensor {
        xs.apply(&self.c1)
            .apply(&self.n1)
            .relu()
            .apply(&self.c2)
            .apply(&self.n2)
            .relu()
    }
}

/// U-Net: `depth` max-pool downsamplings with double 3×3 convolutions,
/// transposed-conv upsampling with skip concatenation, instance norm.
pub(crate) struct Unet {
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<(nn::ConvTranspose2D, DoubleConv)>,
    out: OutputHead,
}

pub(crate) fn unet_widths(base: i64, depth: usize) -> Vec<i64> {
    let mut w = vec![base];
    for _ in 0..depth {
        let last = *w.last().unwrap();
        w.push((last * 2).min(base * 8));
    }
    w
}

impl Unet {
    pub fn new(p: nn::Path, base: i64, depth: usize, residual: bool) -> Self {
        let w = unet_widths(base, depth);
        let inc = DoubleConv::new(p.sub("inc"), 3, base);
        let downs = (0..depth)
            .map(|i| DoubleConv::new(p.sub("down").sub(i), w[i], w[i + 1]))
            .collect();
        let ups = (0..depth)
            .map(|i| {
                let up = nn::conv_transpose2d(
                    p.sub("up").sub(i).sub("upconv"),
                    w[i + 1],
                    w[i],
                    2,
                    ConvTransposeConfig {
                        stride: 2,
                        ..Default::default()
                    },
                );
                (up, DoubleConv::new(p.sub("up").sub(i).sub("conv"), 2 * w[i], w[i]))
            })
            .collect();
        Self {
            inc,
            downs,
            ups,
            out: output_head(&p, base, 1, residual),
        }
    }

    pub fn forward(&self, xs: &Tensor) -> Tensor {
        let mut skips = vec![self.inc.forward(xs)];
        for d in &self.downs {
            let h = skips
                .last()
                .unwrap()
                .max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
            skips.push(d.forward(&h));
        }
        let mut h = skips.pop().unwrap();
        for (up, c) in self.ups.iter().rev() {
            let skip = skips.pop().unwrap();
            h = c.forward(&Tensor::cat(&[h.apply(up), skip], 1));
        }
        self.out.forward(&h, xs)
    }
}

/// Plain convolutional encoder-decoder without skip connections.
pub(crate) struct EncoderDecoder {
    stem: (nn::Conv2D, nn::GroupNorm),
    downs: Vec<(nn::Conv2D, nn::GroupNorm)>,
    ups: Vec<(nn::ConvTranspose2D, nn::GroupNorm)>,
    out: OutputHead,
}

impl EncoderDecoder {
    pub fn new(p: nn::Path, base: i64, depth: usize, residual: bool) -> Self {
        let w = unet_widths(base, depth);
        let stem = (
            conv(p.sub("stem").sub("conv"), 3, base, 3, 1, 1, false),
            instance_norm(p.sub("stem").sub("norm"), base),
        );
        let downs = (0..depth)
            .map(|i| {
                let q = p.sub("down").sub(i);
                (
                    conv(q.sub("conv"), w[i], w[i + 1], 4, 2, 1, false),
                    instance_norm(q.sub("norm"), w[i + 1]),
                )
            })
            .collect();
        let ups = (0..depth)
            .map(|i| {
                let q = p.sub("up").sub(i);
                (
                    nn::conv_transpose2d(
                        q.sub("conv"),
                        w[i + 1],
                        w[i],
                        4,
                        ConvTransposeConfig {
                            stride: 2,
                            padding: 1,
                            bias: false,
                            ..Default::default()
                        },
                    ),
                    instance_norm(q.sub("norm"), w[i]),
                )
            })
            .collect();
        Self {
            stem,
            downs,
            ups,
            out: output_head(&p, base, 3, residual),
        }
    }

    pub fn forward(&self, xs: &Tensor) -> Tensor {
        let mut h = xs.apply(&self.stem.0).apply(&self.stem.1).relu();
        for (c, n) in &self.downs {
            h = h.apply(c).apply(n).leaky_relu();
        }
        for (c, n) in self.ups.iter().rev() {
            h = h.apply(c).apply(n).relu();
        }
        self.out.forward(&h, xs)
    }
}

// ---------------------------------------------------------------- discriminators

fn lrelu(xs: &Tensor) -> Tensor {
    xs.maximum(&(xs * 0.2))
}

/// PatchGAN discriminator: a map of real/fake scores over overlapping patches.
pub(crate) struct PatchDiscriminator {
    first: nn::Conv2D,
    body: Vec<(nn::Conv2D, nn::GroupNorm)>,
    last: nn::Conv2D,
}

impl PatchDiscriminator {
    pub fn new(p: nn::Path, base: i64, layers: usize) -> Self {
        let first = conv(p.sub("conv0"), 3, base, 4, 2, 1, true);
        let mut body = Vec::new();
        let mut c = base;
        for i in 1..=layers {
            let stride = if i < layers { 2 } else { 1 };
            let c_out = (c * 2).min(base * 8);
            body.push((
                conv(p.sub(format!("conv{i}")), c, c_out, 4, stride, 1, false),
                instance_norm(p.sub(format!("norm{i}")), c_out),
            ));
            c = c_out;
        }
        let last = conv(p.sub("out"), c, 1, 4, 1, 1, true);
        Self { first, body, last }
    }

    pub fn forward(&self, xs: &Tensor) -> Tensor {
        let mut h = lrelu(&xs.apply(&self.first));
        for (c, n) in &self.body {
            h = lrelu(&h.apply(c).apply(n));
        }
        h.apply(&self.last)
    }

    /// Smallest square input whose patch map is non-empty.
    pub fn min_side(layers: usize) -> usize {
        // `layers` stride-2 convs (including the first), then two 4×4
        // stride-1 convs with padding 1, each shrinking the map by one.
        3 << layers
    }
}

/// DCGAN-style discriminator ending in one logit per image.
pub(crate) struct AttDiscriminator {
    first: nn::Conv2D,
    body: Vec<(nn::Conv2D, nn::BatchNorm)>,
    fc: nn::Linear,
}

impl AttDiscriminator {
    pub fn new(p: nn::Path, base: i64, depth: usize) -> Self {
        let first = conv(p.sub("conv0"), 3, base, 4, 2, 1, true);
        let mut body = Vec::new();
        let mut c = base;
        for i in 1..depth {
            body.push((
                conv(p.sub(format!("conv{i}")), c, c * 2, 4, 2, 1, false),
                nn::batch_norm2d(p.sub(format!("bn{i}")), c * 2, Default::default()),
            ));
            c *= 2;
        }
        let fc = nn::linear(p.sub("fc"), c, 1, Default::default());
        Self { first, body, fc }
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut h = lrelu(&xs.apply(&self.first));
        for (c, bn) in &self.body {
            h = lrelu(&h.apply(c).apply_t(bn, train));
        }
        h.adaptive_avg_pool2d([1, 1])
            .flatten(1, -1)
            .apply(&self.fc)
            .squeeze_dim(1)
    }
}

// ---------------------------------------------------------------- features

/// The first two convolutions of VGG16 (`conv1_1`, `conv1_2`), each followed
/// by ReLU. Takes `[0,1]` pixels and applies the ImageNet normalization the
/// pretrained weights expect.
pub(crate) struct FeatureNet {
    conv1: nn::Conv2D,
    conv2: nn::Conv2D,
    norm: Normalization,
}

impl FeatureNet {
    pub fn new(p: nn::Path, width: i64) -> Self {
        let f = p.sub("features");
        Self {
            conv1: conv(f.sub(0), 3, width, 3, 1, 1, true),
            conv2: conv(f.sub(2), width, width, 3, 1, 1, true),
            norm: Normalization::imagenet(),
        }
    }

    pub fn forward(&self, xs: &Tensor) -> Tensor {
        self.norm
            .apply(xs)
            .apply(&self.conv1)
            .relu()
            .apply(&self.conv2)
            .relu()
    }
}
