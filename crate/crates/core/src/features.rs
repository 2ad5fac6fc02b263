//! Fixed convolutional feature extractor with vector-Jacobian products.
//!
//! A [`ConvStack`] is a straight chain of 3x3 stride-1 convolutions,
//! rectifiers and 2x2 max-pools. Convolutions pad by replicating the edge
//! pixel, so a constant input gives constant feature maps. Outputs of the
//! layers listed in the tap set are exposed as a [`FeatureStack`].
//!
//! Weight file layout: an ASCII header
//!
//! ```text
//! convstack v1
//! in_channels 3
//! layer conv 16
//! layer relu
//! layer pool
//! taps 2
//! end
//! ```
//!
//! followed by little-endian `f32` values: for every convolution in order,
//! its weights as `[out][in][ky][kx]` then its `out` biases.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{RasterImage, CHANNELS};

/// Multiplier on the `1/sqrt(fan_in)` bound of seeded weights.
pub const WEIGHT_GAIN: f64 = 2.449_489_742_783_178;

/// Dense `channels x height x width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_image(img: &RasterImage) -> Self {
        Self { channels: CHANNELS, height: img.height(), width: img.width(), data: img.data().to_vec() }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-tap feature maps, in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub maps: Vec<Tensor3>,
}

impl FeatureStack {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.maps.iter().map(Tensor3::shape).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self { maps: self.maps.iter().map(|m| Tensor3::zeros(m.channels, m.height, m.width)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize },
    Relu,
    MaxPool,
}

/// Layer list plus tap indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<usize>,
}

impl Default for Architecture {
    /// Three stages of `conv(16) relu conv(16) relu pool`, tapped after
    /// each pool.
    fn default() -> Self {
        Self::stages(3, 16)
    }
}

impl Architecture {
    pub fn stages(count: usize, width: usize) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for _ in 0..count {
            layers.extend([
                LayerSpec::Conv { out_channels: width },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: width },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
            ]);
            taps.push(layers.len() - 1);
        }
        Self { in_channels: CHANNELS, layers, taps }
    }

    fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Architecture("at least one tap is required".into()));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::Architecture(format!("tap {t} refers to a missing layer")));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Architecture("taps must be strictly increasing".into()));
        }
        if self.in_channels == 0 || self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { out_channels: 0 })) {
            return Err(Error::Architecture("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::MaxPool)).count()
    }

    fn header(&self) -> String {
        let mut s = format!("convstack v1\nin_channels {}\n", self.in_channels);
        for l in &self.layers {
            match l {
                LayerSpec::Conv { out_channels } => s += &format!("layer conv {out_channels}\n"),
                LayerSpec::Relu => s += "layer relu\n",
                LayerSpec::MaxPool => s += "layer pool\n",
            }
        }
        let taps: Vec<String> = self.taps.iter().map(ToString::to_string).collect();
        s += &format!("taps {}\nend\n", taps.join(" "));
        s
    }

    fn parse_header(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::WeightFile(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("convstack v1") {
            return Err(bad("missing `convstack v1` magic"));
        }
        let mut in_channels = None;
        let mut layers = Vec::new();
        let mut taps = None;
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number in {line:?}")));
            match tok.as_slice() {
                ["in_channels", n] => in_channels = Some(num(n)?),
                ["layer", "conv", n] => layers.push(LayerSpec::Conv { out_channels: num(n)? }),
                ["layer", "relu"] => layers.push(LayerSpec::Relu),
                ["layer", "pool"] => layers.push(LayerSpec::MaxPool),
                ["taps", rest @ ..] => taps = Some(rest.iter().map(|t| num(t)).collect::<Result<Vec<_>>>()?),
                ["end"] => break,
                _ => return Err(bad(&format!("unrecognised header line {line:?}"))),
            }
        }
        Ok(Self {
            in_channels: in_channels.ok_or_else(|| bad("missing in_channels"))?,
            layers,
            taps: taps.ok_or_else(|| bad("missing taps"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
}

pub enum WeightSource {
    Seed(u64),
    File(PathBuf),
}

/// Immutable feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Every layer output of one forward pass, kept for the backward pass.
pub struct Trace {
    input: Tensor3,
    outputs: Vec<Tensor3>,
}

impl Trace {
    pub fn features(&self, stack: &ConvStack) -> FeatureStack {
        FeatureStack { maps: stack.arch.taps.iter().map(|&t| self.outputs[t].clone()).collect() }
    }
}

impl ConvStack {
    pub fn build(arch: &Architecture, source: WeightSource) -> Result<Self> {
        arch.validate()?;
        match source {
            WeightSource::Seed(seed) => Ok(Self::seeded(arch, seed)),
            WeightSource::File(path) => {
                let stack = Self::load(&path)?;
                if &stack.arch != arch {
                    return Err(Error::WeightFile(format!(
                        "{} declares a different architecture than requested",
                        path.display()
                    )));
                }
                Ok(stack)
            }
        }
    }

    /// Weights drawn from `U(-g/sqrt(fan_in), g/sqrt(fan_in))` with
    /// `g = sqrt(6)` (He-uniform), biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// all rounded to `f32` so the weight file reproduces them exactly.
    fn seeded(arch: &Architecture, seed: u64) -> Self {
        let mut rng = crate::rng::prng(seed);
        let mut channels = arch.in_channels;
        let layers = arch
            .layers
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Conv { out_channels } => {
                    let bound = 1.0 / ((channels * 9) as f64).sqrt();
                    let mut draw = |b: f64| rng.random_range(-b..b) as f32 as f64;
                    let weight = (0..out_channels * channels * 9).map(|_| draw(WEIGHT_GAIN * bound)).collect();
                    let bias = (0..out_channels).map(|_| draw(bound)).collect();
                    let conv = Conv2d { in_channels: channels, out_channels, weight, bias };
                    channels = out_channels;
                    Layer::Conv(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => Layer::MaxPool,
            })
            .collect();
        Self { arch: arch.clone(), layers }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.arch.taps
    }

    /// Same stack with every bias set to zero.
    pub fn without_bias(mut self) -> Self {
        for l in &mut self.layers {
            if let Layer::Conv(c) = l {
                c.bias.fill(0.0);
            }
        }
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = self.arch.header().into_bytes();
        for l in &self.layers {
            if let Layer::Conv(c) = l {
                for v in c.weight.iter().chain(&c.bias) {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        crate::raster::write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let marker = b"\nend\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::WeightFile("missing `end` header terminator".into()))?
            + marker.len();
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::WeightFile("header is not UTF-8".into()))?;
        let arch = Architecture::parse_header(header)?;
        arch.validate()?;
        let payload = &bytes[end..];
        if payload.len() % 4 != 0 {
            return Err(Error::WeightFile("payload is not a whole number of f32 values".into()));
        }
        let mut values = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut channels = arch.in_channels;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            layers.push(match *spec {
                LayerSpec::Conv { out_channels } => {
                    let nw = out_channels * channels * 9;
                    let weight: Vec<f64> = values.by_ref().take(nw).collect();
                    let bias: Vec<f64> = values.by_ref().take(out_channels).collect();
                    if weight.len() != nw || bias.len() != out_channels {
                        return Err(Error::WeightFile("payload shorter than the declared layers".into()));
                    }
                    if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
                        return Err(Error::WeightFile("non-finite weight".into()));
                    }
                    let conv = Conv2d { in_channels: channels, out_channels, weight, bias };
                    channels = out_channels;
                    Layer::Conv(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => Layer::MaxPool,
            });
        }
        if values.next().is_some() {
            return Err(Error::WeightFile("payload longer than the declared layers".into()));
        }
        Ok(Self { arch, layers })
    }

    fn check_input(&self, img: &RasterImage) -> Result<()> {
        let min = 1usize << self.arch.pool_count();
        if img.height() < min || img.width() < min {
            return Err(Error::ImageTooSmall { height: img.height(), width: img.width(), min });
        }
        if self.arch.in_channels != CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "stack expects {} input channels, images have {CHANNELS}",
                self.arch.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, img: &RasterImage) -> Result<FeatureStack> {
        Ok(self.forward_trace(img)?.features(self))
    }

    pub fn forward_trace(&self, img: &RasterImage) -> Result<Trace> {
        self.check_input(img)?;
        let input = Tensor3::from_image(img);
        let mut outputs: Vec<Tensor3> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs.last().unwrap_or(&input);
            let y = match layer {
                Layer::Conv(c) => conv_forward(c, x),
                Layer::Relu => relu_forward(x),
                Layer::MaxPool => pool_forward(x),
            };
            outputs.push(y);
        }
        Ok(Trace { input, outputs })
    }

    /// Gradient on the input image of `<cotangents, forward(img)>`.
    pub fn backward(&self, img: &RasterImage, cotangents: &FeatureStack) -> Result<Vec<f64>> {
        let trace = self.forward_trace(img)?;
        self.backward_trace(&trace, cotangents)
    }

    pub fn backward_trace(&self, trace: &Trace, cotangents: &FeatureStack) -> Result<Vec<f64>> {
        let taps = &self.arch.taps;
        if cotangents.maps.len() != taps.len() {
            return Err(Error::ShapeMismatch(format!("{} cotangent maps for {} taps", cotangents.maps.len(), taps.len())));
        }
        for (cot, &t) in cotangents.maps.iter().zip(taps) {
            if cot.shape() != trace.outputs[t].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "cotangent {:?} does not match tap {t} shape {:?}",
                    cot.shape(),
                    trace.outputs[t].shape()
                )));
            }
        }
        let last = *taps.last().expect("validated non-empty");
        let mut grad = cotangents.maps.last().expect("non-empty").clone();
        let mut pending = cotangents.maps.len() - 1;
        for i in (0..=last).rev() {
            if i != last && pending > 0 && taps[pending - 1] == i {
                pending -= 1;
                for (g, c) in grad.data.iter_mut().zip(&cotangents.maps[pending].data) {
                    *g += c;
                }
            }
            let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            grad = match &self.layers[i] {
                Layer::Conv(c) => conv_backward(c, x, &grad),
                Layer::Relu => relu_backward(x, &grad),
                Layer::MaxPool => pool_backward(x, &grad),
            };
        }
        Ok(grad.data)
    }
}

fn pad_replicate(x: &Tensor3) -> Vec<f64> {
    let (h, w) = (x.height, x.width);
    let pw = w + 2;
    let mut out = vec![0.0; x.channels * (h + 2) * pw];
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = &mut out[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
        for pr in 0..h + 2 {
            let r = pr.saturating_sub(1).min(h - 1);
            let row = &src[r * w..(r + 1) * w];
            let d = &mut dst[pr * pw..(pr + 1) * pw];
            d[0] = row[0];
            d[1..=w].copy_from_slice(row);
            d[w + 1] = row[w - 1];
        }
    }
    out
}

fn conv_forward(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
    let (h, w) = (x.height, x.width);
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let padded = pad_replicate(x);
    let mut out = Tensor3::zeros(conv.out_channels, h, w);
    for o in 0..conv.out_channels {
        let dst = &mut out.data[o * h * w..(o + 1) * h * w];
        dst.fill(conv.bias[o]);
        for i in 0..conv.in_channels {
            let src = &padded[i * plane..(i + 1) * plane];
            let kernel = &conv.weight[(o * conv.in_channels + i) * 9..][..9];
            for r in 0..h {
                let drow = &mut dst[r * w..(r + 1) * w];
                for ky in 0..3 {
                    let srow = &src[(r + ky) * pw..(r + ky + 1) * pw];
                    for kx in 0..3 {
                        let k = kernel[ky * 3 + kx];
                        for (d, s) in drow.iter_mut().zip(&srow[kx..kx + w]) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(conv: &Conv2d, x: &Tensor3, gout: &Tensor3) -> Tensor3 {
    let (h, w) = (x.height, x.width);
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let mut gpad = vec![0.0; conv.in_channels * plane];
    for o in 0..conv.out_channels {
        let g = gout.plane(o);
        for i in 0..conv.in_channels {
            let dst = &mut gpad[i * plane..(i + 1) * plane];
            let kernel = &conv.weight[(o * conv.in_channels + i) * 9..][..9];
            for r in 0..h {
                let grow = &g[r * w..(r + 1) * w];
                for ky in 0..3 {
                    let drow = &mut dst[(r + ky) * pw..(r + ky + 1) * pw];
                    for kx in 0..3 {
                        let k = kernel[ky * 3 + kx];
                        for (d, gv) in drow[kx..kx + w].iter_mut().zip(grow) {
                            *d += k * gv;
                        }
                    }
                }
            }
        }
    }
    // fold the replicated border back onto the edge pixels
    let mut gin = Tensor3::zeros(conv.in_channels, h, w);
    for i in 0..conv.in_channels {
        let src = &gpad[i * plane..(i + 1) * plane];
        let dst = &mut gin.data[i * h * w..(i + 1) * h * w];
        for pr in 0..h + 2 {
            let r = pr.saturating_sub(1).min(h - 1);
            for pc in 0..w + 2 {
                let c = pc.saturating_sub(1).min(w - 1);
                dst[r * w + c] += src[pr * pw + pc];
            }
        }
    }
    gin
}

fn relu_forward(x: &Tensor3) -> Tensor3 {
    Tensor3 { data: x.data.iter().map(|&v| v.max(0.0)).collect(), ..*x }
}

fn relu_backward(x: &Tensor3, gout: &Tensor3) -> Tensor3 {
    let data = x.data.iter().zip(&gout.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor3 { data, ..*x }
}

/// Index (within the input plane) of the first maximum of each 2x2 window.
fn pool_argmax(plane: &[f64], w: usize, r: usize, c: usize) -> usize {
    let candidates = [2 * r * w + 2 * c, 2 * r * w + 2 * c + 1, (2 * r + 1) * w + 2 * c, (2 * r + 1) * w + 2 * c + 1];
    let mut best = candidates[0];
    for &k in &candidates[1..] {
        if plane[k] > plane[best] {
            best = k;
        }
    }
    best
}

fn pool_forward(x: &Tensor3) -> Tensor3 {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor3::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let plane = x.plane(c);
        for r in 0..oh {
            for col in 0..ow {
                out.data[(c * oh + r) * ow + col] = plane[pool_argmax(plane, x.width, r, col)];
            }
        }
    }
    out
}

fn pool_backward(x: &Tensor3, gout: &Tensor3) -> Tensor3 {
    let (oh, ow) = (gout.height, gout.width);
    let n = x.height * x.width;
    let mut gin = Tensor3::zeros(x.channels, x.height, x.width);
    for c in 0..x.channels {
        let plane = x.plane(c);
        for r in 0..oh {
            for col in 0..ow {
                gin.data[c * n + pool_argmax(plane, x.width, r, col)] += gout.data[(c * oh + r) * ow + col];
            }
        }
    }
    gin
}

/// Reference images derived from `img`, in order: vertical flip,
/// horizontal mirror, 90° counter-clockwise and 90° clockwise rotation.
pub fn augment_references(img: &RasterImage) -> Vec<RasterImage> {
    vec![flip_vertical(img), mirror(img), rotate_left(img), rotate_right(img)]
}

pub fn flip_vertical(img: &RasterImage) -> RasterImage {
    let h = img.height();
    img.remap(h, img.width(), |r, c| (h - 1 - r, c))
}

pub fn mirror(img: &RasterImage) -> RasterImage {
    let w = img.width();
    img.remap(img.height(), w, |r, c| (r, w - 1 - c))
}

pub fn rotate_left(img: &RasterImage) -> RasterImage {
    let w = img.width();
    img.remap(w, img.height(), |r, c| (c, w - 1 - r))
}

pub fn rotate_right(img: &RasterImage) -> RasterImage {
    let h = img.height();
    img.remap(img.width(), h, |r, c| (h - 1 - c, r))
}

/// Concatenates same-tap feature maps along the first spatial axis, in
/// input order: `n` maps of `C x H x W` become one `C x nH x W` map.
pub fn splice(stacks: &[FeatureStack]) -> Result<FeatureStack> {
    let first = stacks.first().ok_or(Error::Empty("splice needs at least one feature stack"))?;
    let mut maps = Vec::with_capacity(first.maps.len());
    for (j, base) in first.maps.iter().enumerate() {
        let mut parts = Vec::with_capacity(stacks.len());
        for s in stacks {
            let m = s.maps.get(j).ok_or_else(|| Error::ShapeMismatch("stacks have different tap counts".into()))?;
            if m.channels != base.channels {
                return Err(Error::ShapeMismatch(format!(
                    "tap {j}: {} channels vs {}",
                    m.channels, base.channels
                )));
            }
            if m.width != base.width {
                return Err(Error::ShapeMismatch(format!("tap {j}: width {} vs {}", m.width, base.width)));
            }
            parts.push(m);
        }
        let total_h: usize = parts.iter().map(|m| m.height).sum();
        let mut out = Tensor3::zeros(base.channels, total_h, base.width);
        for c in 0..base.channels {
            let mut offset = c * total_h * base.width;
            for m in &parts {
                let p = m.plane(c);
                out.data[offset..offset + p.len()].copy_from_slice(p);
                offset += p.len();
            }
        }
        maps.push(out);
    }
    Ok(FeatureStack { maps })
}
