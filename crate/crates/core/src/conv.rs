//! Convolution lowering: im2col and kernel flattening.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::matrix::{I8Matrix, Matrix};

/// Geometry of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kw: usize,
    pub kh: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    /// Square `k x k` kernel over a square `spatial x spatial` input.
    pub fn square(
        c_in: usize,
        c_out: usize,
        k: usize,
        spatial: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            c_in,
            c_out,
            kw: k,
            kh: k,
            in_w: spatial,
            in_h: spatial,
            stride,
            padding,
        }
    }

    /// Products summed into one output element: `c_in * kw * kh`.
    pub fn reduction_depth(&self) -> usize {
        self.c_in * self.kw * self.kh
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.kw == 0 || self.kh == 0 || self.stride == 0 {
            return Err(shape(format!("degenerate conv layer {self:?}")));
        }
        if self.kw > self.in_w + 2 * self.padding || self.kh > self.in_h + 2 * self.padding {
            return Err(shape(format!(
                "kernel larger than padded input in {self:?}"
            )));
        }
        Ok(())
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kh) / self.stride + 1
    }

    /// Same layer with a different input size.
    pub fn with_spatial(self, in_w: usize, in_h: usize) -> Self {
        Self { in_w, in_h, ..self }
    }

    /// Same layer with fewer (or more) output channels; the reduction depth is unchanged.
    pub fn with_c_out(self, c_out: usize) -> Self {
        Self { c_out, ..self }
    }
}

/// `channels x height x width` int8 tensor, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i8>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape(format!(
                "{} values do not fill a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Lowers one input to a `(out_h * out_w) x (c_in * kh * kw)` matrix.
///
/// Column index is `(c * kh + ky) * kw + kx`, matching [`flatten_kernels`].
pub fn im2col(input: &FeatureMap, spec: &ConvLayerSpec) -> Result<I8Matrix> {
    spec.validate()?;
    if input.channels != spec.c_in || input.height != spec.in_h || input.width != spec.in_w {
        return Err(shape(format!(
            "input {}x{}x{} does not match layer c_in={} {}x{}",
            input.channels, input.height, input.width, spec.c_in, spec.in_h, spec.in_w
        )));
    }
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let depth = spec.reduction_depth();
    let mut data = vec![0i8; oh * ow * depth];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut data[(oy * ow + ox) * depth..][..depth];
            for c in 0..spec.c_in {
                for ky in 0..spec.kh {
                    let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if y < 0 || y >= spec.in_h as isize {
                        continue;
                    }
                    for kx in 0..spec.kw {
                        let x = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if x < 0 || x >= spec.in_w as isize {
                            continue;
                        }
                        row[(c * spec.kh + ky) * spec.kw + kx] =
                            input.get(c, y as usize, x as usize);
                    }
                }
            }
        }
    }
    Matrix::new(oh * ow, depth, data)
}

/// Stacks the lowered rows of several inputs.
pub fn im2col_batch(inputs: &[FeatureMap], spec: &ConvLayerSpec) -> Result<I8Matrix> {
    let mut data = Vec::new();
    let mut rows = 0;
    for input in inputs {
        let m = im2col(input, spec)?;
        rows += m.rows();
        data.extend_from_slice(m.data());
    }
    Matrix::new(rows, spec.reduction_depth(), data)
}

/// Reshapes `c_out x c_in x kh x kw` weights to a `(c_in * kh * kw) x c_out` matrix.
pub fn flatten_kernels(weights: &[i8], spec: &ConvLayerSpec) -> Result<I8Matrix> {
    let depth = spec.reduction_depth();
    if weights.len() != spec.c_out * depth {
        return Err(shape(format!(
            "{} kernel values do not match c_out={} x depth={depth}",
            weights.len(),
            spec.c_out
        )));
    }
    Ok(Matrix::from_fn(depth, spec.c_out, |k, o| {
        weights[o * depth + k]
    }))
}
