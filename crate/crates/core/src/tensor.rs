//! Dense f32 tensors and the numerical kernels the rest of the crate is
//! built on: convolution, pooling, activation, resampling and sliding
//! feature correlation.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::invalid(format!(
                "tensor rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor dims must be >= 1: {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as channels × height × width.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a C×H×W tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Reinterprets the data under new dims with the same element count.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// One channel plane of a C×H×W tensor.
    pub fn plane(&self, channel: usize) -> &[f32] {
        let (h, w) = (self.dims[self.dims.len() - 2], self.dims[self.dims.len() - 1]);
        &self.data[channel * h * w..(channel + 1) * h * w]
    }
}

/// A single-channel 2-D grid: similarity maps, inference maps, saliency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Map2D {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("map extents must be >= 1"));
        }
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "map {height}×{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.values[row * self.width + col] = value;
    }

    pub fn same_extent(&self, other: &Map2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Location of the maximum as (row, col); the first one in raster order wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Map2D {
        Map2D {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Output extent of a strided window op, or `None` when no window fits.
pub fn pool_extent(input: usize, k: usize, stride: usize, ceil_mode: bool) -> Option<usize> {
    if k == 0 || stride == 0 || input == 0 {
        return None;
    }
    let out = if input >= k {
        let span = input - k;
        let steps = if ceil_mode {
            span.div_ceil(stride)
        } else {
            span / stride
        };
        steps + 1
    } else if ceil_mode {
        // ceil of a negative quotient
        let deficit = (k - input) / stride;
        if deficit >= 1 {
            return None;
        }
        1
    } else {
        return None;
    };
    // a ceil-mode window must still start inside the input
    if ceil_mode && (out - 1) * stride >= input {
        Some(out - 1).filter(|&o| o >= 1)
    } else {
        Some(out)
    }
}

/// 2-D cross-correlation with per-output-channel bias.
///
/// `input` is C×H×W, `kernels` is O×C×kh×kw, `bias` has O entries.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, kc, kh, kw) = match *kernels.dims() {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => {
            return Err(Error::Shape {
                op: "conv2d",
                left: input.dims().to_vec(),
                right: kernels.dims().to_vec(),
            })
        }
    };
    if kc != c || bias.len() != o {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.dims().to_vec(),
            right: kernels.dims().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < kh || wp < kw {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.dims().to_vec(),
            right: kernels.dims().to_vec(),
        });
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    let cols = oh * ow;
    let depth = c * kh * kw;

    // im2col: one row per (channel, ky, kx), one column per output location
    let mut patches = vec![0.0f32; depth * cols];
    let src = input.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * cols;
                let dst = &mut patches[row..row + cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // contiguous run of valid columns
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(ow);
                        if x_lo < x_hi {
                            let s0 = x_lo + kx - pad;
                            dst_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(o * cols);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, cols));
    }
    // SAFETY: kernels is o×depth, patches is depth×cols and out is o×cols, all
    // row-major and sized exactly as checked above.
    unsafe {
        matrixmultiply::sgemm(
            o,
            depth,
            cols,
            1.0,
            kernels.data().as_ptr(),
            depth as isize,
            1,
            patches.as_ptr(),
            cols as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Per-channel sliding-window maximum. Ceil-mode windows may be partial.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, ceil_mode: bool) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d k and stride must be >= 1"));
    }
    let (Some(oh), Some(ow)) = (
        pool_extent(h, k, stride, ceil_mode),
        pool_extent(w, k, stride, ceil_mode),
    ) else {
        return Err(Error::invalid(format!(
            "maxpool2d(k={k}, stride={stride}) leaves no output for a {h}×{w} input"
        )));
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.plane(ch);
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + k).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + k).min(w);
                let mut m = f32::NEG_INFINITY;
                for y in y0..y1 {
                    for &v in &plane[y * w + x0..y * w + x1] {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Numerically stable softmax (max-subtracted, accumulated in f64).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// Coordinate convention for bilinear resampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    /// Corner samples of input and output coincide.
    #[default]
    AlignCorners,
    /// Sample centers are aligned; an input cell maps to the center of the
    /// output block it covers.
    HalfPixel,
}

/// Align-corners bilinear resampling.
pub fn upsample_bilinear(map: &Map2D, out_h: usize, out_w: usize) -> Result<Map2D> {
    resample_bilinear(map, out_h, out_w, Resample::AlignCorners)
}

pub fn resample_bilinear(map: &Map2D, out_h: usize, out_w: usize, mode: Resample) -> Result<Map2D> {
    resample_bilinear_shifted(map, out_h, out_w, mode, (0.0, 0.0))
}

/// Bilinear resampling where output pixels read the input at their usual
/// source coordinate plus `shift` (rows, cols), in input cells.
pub fn resample_bilinear_shifted(map: &Map2D, out_h: usize, out_w: usize, mode: Resample, shift: (f64, f64)) -> Result<Map2D> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resample target extents must be >= 1"));
    }
    let ys = sample_positions(map.height(), out_h, mode, shift.0);
    let xs = sample_positions(map.width(), out_w, mode, shift.1);
    let w = map.width();
    let src = map.values();
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            values.push(lerp(top, bottom, fy));
        }
    }
    Map2D::new(out_h, out_w, values)
}

fn sample_positions(input: usize, output: usize, mode: Resample, shift: f64) -> Vec<(usize, usize, f64)> {
    let last = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let base = match mode {
                Resample::AlignCorners => {
                    if output == 1 {
                        0.0
                    } else {
                        i as f64 * last / (output - 1) as f64
                    }
                }
                Resample::HalfPixel => (i as f64 + 0.5) * input as f64 / output as f64 - 0.5,
            };
            let src = (base + shift).clamp(0.0, last);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

// a + (b - a) t keeps constant inputs exact; the clamp keeps rounding inside [a, b].
fn lerp(a: f32, b: f32, t: f64) -> f32 {
    let (a64, b64) = (a as f64, b as f64);
    let v = a64 + (b64 - a64) * t;
    v.clamp(a64.min(b64), a64.max(b64)) as f32
}

/// Rescales to [0, 1]; a constant map becomes all zeros.
pub fn minmax_normalize(map: &Map2D) -> Map2D {
    let (lo, hi) = (map.min(), map.max());
    if !(hi > lo) {
        return Map2D::zeros(map.height(), map.width());
    }
    let range = (hi - lo) as f64;
    map.map(|v| ((v - lo) as f64 / range) as f32)
}

/// Scoring rule for sliding a feature kernel over a feature field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// Cosine similarity between `kernel` (C×kh×kw) and the zero-padded field
/// window centered on every location of `field` (C×H×W).
///
/// The window for location (y, x) spans rows `y - kh/2 .. y - kh/2 + kh`
/// (columns likewise). Locations where either vector has zero norm score 0.
pub fn xcorr_cosine(kernel: &Tensor, field: &Tensor) -> Result<Map2D> {
    xcorr(kernel, field, Similarity::Cosine)
}

/// Raw dot product over the same windows as [`xcorr_cosine`].
pub fn xcorr_dot(kernel: &Tensor, field: &Tensor) -> Result<Map2D> {
    xcorr(kernel, field, Similarity::Dot)
}

pub fn xcorr(kernel: &Tensor, field: &Tensor, similarity: Similarity) -> Result<Map2D> {
    let (kc, kh, kw) = kernel.chw()?;
    let (c, h, w) = field.chw()?;
    if kc != c || kh > h || kw > w {
        return Err(Error::Shape {
            op: "xcorr",
            left: kernel.dims().to_vec(),
            right: field.dims().to_vec(),
        });
    }
    let (oy, ox) = (kh / 2, kw / 2);
    let mut dot = vec![0.0f64; h * w];
    for ch in 0..c {
        let kplane = kernel.plane(ch);
        let fplane = field.plane(ch);
        for ky in 0..kh {
            // field row = y + ky - oy
            let y_lo = oy.saturating_sub(ky);
            let y_hi = (h + oy).saturating_sub(ky).min(h);
            for kx in 0..kw {
                let kv = kplane[ky * kw + kx] as f64;
                if kv == 0.0 {
                    continue;
                }
                let x_lo = ox.saturating_sub(kx);
                let x_hi = (w + ox).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let fy = y + ky - oy;
                    let frow = &fplane[fy * w + x_lo + kx - ox..fy * w + x_hi + kx - ox];
                    let acc = &mut dot[y * w + x_lo..y * w + x_hi];
                    for (a, &f) in acc.iter_mut().zip(frow) {
                        *a += kv * f as f64;
                    }
                }
            }
        }
    }

    if similarity == Similarity::Dot {
        return Map2D::new(h, w, dot.into_iter().map(|v| v as f32).collect());
    }

    let knorm = kernel
        .data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if knorm == 0.0 {
        return Ok(Map2D::zeros(h, w));
    }
    // summed-area table of per-cell energy across channels
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            let mut e = 0.0;
            for ch in 0..c {
                let v = field.data()[(ch * h + y) * w + x] as f64;
                e += v * v;
            }
            row_sum += e;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row_sum;
        }
    }
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let r0 = y.saturating_sub(oy);
        let r1 = (y + kh - oy).min(h);
        for x in 0..w {
            let c0 = x.saturating_sub(ox);
            let c1 = (x + kw - ox).min(w);
            let energy = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0]
                + sat[r0 * (w + 1) + c0];
            let d = dot[y * w + x];
            let v = if energy <= 0.0 || d == 0.0 {
                0.0
            } else {
                (d / (knorm * energy.sqrt())).clamp(-1.0, 1.0)
            };
            values.push(v as f32);
        }
    }
    Map2D::new(h, w, values)
}
