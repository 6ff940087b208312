//! Layer descriptions and compute kernels.
//!
//! Activations use CHW layout. Dense weights are `[out, in]`, convolution
//! filters `[out, in, kh, kw]`, depthwise filters `[channels, kh, kw]`.
//! Convolutions are cross-correlations (no filter flip).

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// `(k - 1) / 2` zeros on each side; preserves size for odd `k` at stride 1.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => kernel.saturating_sub(1) / 2,
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        size: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_shapes().is_some()
    }

    /// `(weight dims, bias dims)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((vec![channels, kernel_h, kernel_w], vec![channels])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    /// Output dims for an input of dims `input`.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if numel != inputs {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer expects {inputs} inputs, got {input:?}"
                    )));
                }
                if outputs == 0 {
                    return Err(Error::ShapeMismatch("dense layer with 0 outputs".into()));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let [c, h, w] = chw(input)?;
                if c != in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                let (oh, ow) = conv_out(h, w, kernel_h, kernel_w, stride, padding)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let [c, h, w] = chw(input)?;
                if c != channels {
                    return Err(Error::ShapeMismatch(format!(
                        "depthwise conv expects {channels} channels, got {c}"
                    )));
                }
                let (oh, ow) = conv_out(h, w, kernel_h, kernel_w, stride, padding)?;
                Ok(vec![channels, oh, ow])
            }
            LayerSpec::MaxPool { size } => {
                let [c, h, w] = chw(input)?;
                if size == 0 || size > h || size > w {
                    return Err(Error::ShapeMismatch(format!(
                        "maxpool {size} over {h}x{w}"
                    )));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }

    /// Runs the layer. Parameterized layers need `params`.
    pub fn apply(&self, x: &Tensor, params: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        match (*self, params) {
            (LayerSpec::Dense { .. }, Some((w, b))) => {
                self.output_dims(x.dims())?;
                dense(x, w, b)
            }
            (
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    ..
                },
                Some((w, b)),
            ) => {
                self.output_dims(x.dims())?;
                conv2d_padded(x, w, b, stride, padding.amount(kernel_h), padding.amount(kernel_w))
            }
            (
                LayerSpec::DepthwiseConv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    ..
                },
                Some((w, b)),
            ) => {
                self.output_dims(x.dims())?;
                depthwise_padded(x, w, b, stride, padding.amount(kernel_h), padding.amount(kernel_w))
            }
            (LayerSpec::Relu, None) => Ok(relu(x)),
            (LayerSpec::MaxPool { size }, None) => maxpool(x, size),
            (LayerSpec::Softmax, None) => Ok(softmax(x)),
            (spec, Some(_)) => Err(Error::InvalidArgument(format!(
                "{} takes no parameters",
                spec.kind()
            ))),
            (spec, None) => Err(Error::InvalidArgument(format!(
                "{} needs parameters",
                spec.kind()
            ))),
        }
    }
}

fn chw(dims: &[usize]) -> Result<[usize; 3]> {
    match dims {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::ShapeMismatch(format!(
            "expected CHW input, got {other:?}"
        ))),
    }
}

fn conv_out(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    let ph = padding.amount(kh);
    let pw = padding.amount(kw);
    out_extent(h, kh, stride, ph).zip(out_extent(w, kw, stride, pw)).ok_or_else(|| {
        Error::ShapeMismatch(format!(
            "{kh}x{kw} kernel with stride {stride} does not fit {h}x{w}"
        ))
    })
}

/// `floor((n + 2 pad - k) / stride) + 1`, or `None` if the kernel does not fit.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// `y = W x + b`. `x` may have any shape with `W.cols` elements.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, n] = match w.dims() {
        [m, n] => [*m, *n],
        d => return Err(Error::ShapeMismatch(format!("dense weights {d:?}"))),
    };
    if x.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "dense {m}x{n} with input of {} and bias of {}",
            x.len(),
            b.len()
        )));
    }
    let xs = x.data();
    let out = w
        .data()
        .chunks_exact(n)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(xs).map(|(a, b)| a * b).sum::<f32>() + bias)
        .collect();
    Ok(Tensor::vector(out))
}

pub fn conv2d(x: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_padded(x, filters, bias, stride, padding, padding)
}

fn conv2d_padded(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor> {
    let [c, h, w] = chw(x.dims())?;
    let [o, fc, kh, kw] = match filters.dims() {
        [o, fc, kh, kw] => [*o, *fc, *kh, *kw],
        d => return Err(Error::ShapeMismatch(format!("conv filters {d:?}"))),
    };
    if fc != c || bias.len() != o {
        return Err(Error::ShapeMismatch(format!(
            "conv filters {:?} / bias {} for input {:?}",
            filters.dims(),
            bias.len(),
            x.dims()
        )));
    }
    let (oh, ow) = out_extent(h, kh, stride, pad_h)
        .zip(out_extent(w, kw, stride, pad_w))
        .ok_or_else(|| Error::ShapeMismatch("kernel does not fit input".into()))?;
    if oh * ow <= SMALL_PLANE {
        return conv2d_small(x, filters, bias, stride, pad_h, pad_w, oh, ow);
    }
    let mut out = vec![0f32; o * oh * ow];
    let xs = x.data();
    let fs = filters.data();
    for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[oc]);
        for ic in 0..c {
            let src = &xs[ic * h * w..(ic + 1) * h * w];
            let kern = &fs[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
            accumulate_plane(plane, src, h, w, kern, kh, kw, oh, ow, stride, pad_h, pad_w);
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Output planes up to this many pixels take the channel-vectorized path.
const SMALL_PLANE: usize = 1024;

/// Convolution for small output planes: accumulates every output channel
/// of one pixel at once against transposed filters, so the inner loop runs
/// over output channels instead of a few pixels.
#[allow(clippy::too_many_arguments)]
fn conv2d_small(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor> {
    let [c, h, w] = chw(x.dims())?;
    let [o, _, kh, kw] = match filters.dims() {
        [o, fc, kh, kw] => [*o, *fc, *kh, *kw],
        d => return Err(Error::ShapeMismatch(format!("conv filters {d:?}"))),
    };
    let kk = c * kh * kw;
    let fs = filters.data();
    let mut wt = vec![0f32; kk * o];
    for oc in 0..o {
        for k in 0..kk {
            wt[k * o + oc] = fs[oc * kk + k];
        }
    }
    let xs = x.data();
    let mut acc = vec![0f32; oh * ow * o];
    for (p, px) in acc.chunks_exact_mut(o).enumerate() {
        px.copy_from_slice(bias.data());
        let (oy, ox) = (p / ow, p % ow);
        for ic in 0..c {
            for ky in 0..kh {
                let iy = oy * stride + ky;
                if iy < pad_h || iy - pad_h >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox * stride + kx;
                    if ix < pad_w || ix - pad_w >= w {
                        continue;
                    }
                    let v = xs[ic * h * w + (iy - pad_h) * w + ix - pad_w];
                    if v == 0.0 {
                        continue;
                    }
                    let k = (ic * kh + ky) * kw + kx;
                    for (a, f) in px.iter_mut().zip(&wt[k * o..(k + 1) * o]) {
                        *a += v * f;
                    }
                }
            }
        }
    }
    let mut out = vec![0f32; o * oh * ow];
    for (p, px) in acc.chunks_exact(o).enumerate() {
        for (oc, v) in px.iter().enumerate() {
            out[oc * oh * ow + p] = *v;
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

pub fn depthwise_conv2d(x: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    depthwise_padded(x, filters, bias, stride, padding, padding)
}

fn depthwise_padded(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor> {
    let [c, h, w] = chw(x.dims())?;
    let [fc, kh, kw] = match filters.dims() {
        [fc, kh, kw] => [*fc, *kh, *kw],
        d => return Err(Error::ShapeMismatch(format!("depthwise filters {d:?}"))),
    };
    if fc != c || bias.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "depthwise filters {:?} / bias {} for input {:?}",
            filters.dims(),
            bias.len(),
            x.dims()
        )));
    }
    let (oh, ow) = out_extent(h, kh, stride, pad_h)
        .zip(out_extent(w, kw, stride, pad_w))
        .ok_or_else(|| Error::ShapeMismatch("kernel does not fit input".into()))?;
    let mut out = vec![0f32; c * oh * ow];
    let xs = x.data();
    for (ch, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[ch]);
        let src = &xs[ch * h * w..(ch + 1) * h * w];
        let kern = &filters.data()[ch * kh * kw..(ch + 1) * kh * kw];
        accumulate_plane(plane, src, h, w, kern, kh, kw, oh, ow, stride, pad_h, pad_w);
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// `plane += xcorr(src, kern)` for one input/output channel pair.
#[allow(clippy::too_many_arguments)]
fn accumulate_plane(
    plane: &mut [f32],
    src: &[f32],
    h: usize,
    w: usize,
    kern: &[f32],
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) {
    for ky in 0..kh {
        for kx in 0..kw {
            let k = kern[ky * kw + kx];
            if k == 0.0 {
                continue;
            }
            // output columns whose input column ox*stride + kx - pad_w is in range
            let ox_lo = pad_w.saturating_sub(kx).div_ceil(stride);
            let ox_hi = ((w + pad_w).saturating_sub(kx)).div_ceil(stride).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in 0..oh {
                let iy = oy * stride + ky;
                if iy < pad_h || iy - pad_h >= h {
                    continue;
                }
                let row = &src[(iy - pad_h) * w..(iy - pad_h + 1) * w];
                let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                if stride == 1 {
                    let start = ox_lo + kx - pad_w;
                    let len = ox_hi - ox_lo;
                    for (o, i) in out_row[ox_lo..ox_hi].iter_mut().zip(&row[start..start + len]) {
                        *o += k * i;
                    }
                } else {
                    for ox in ox_lo..ox_hi {
                        out_row[ox] += k * row[ox * stride + kx - pad_w];
                    }
                }
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}

/// Non-overlapping `size x size` max pooling over each channel.
pub fn maxpool(x: &Tensor, size: usize) -> Result<Tensor> {
    let out_dims = LayerSpec::MaxPool { size }.output_dims(x.dims())?;
    let [c, h, w] = chw(x.dims())?;
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(xs[ch * h * w + (oy * size + dy) * w + ox * size + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(out_dims, out)
}

/// Softmax over all elements; shape preserved.
pub fn softmax(x: &Tensor) -> Tensor {
    let max = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.data().iter().map(|v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let data = exps.iter().map(|e| (e / sum) as f32).collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}
