//! Layer kernels over flat parameter storage.
//!
//! Activations are `(batch, features)` matrices. Spatial activations are laid
//! out row-major as height x width x channels, so a convolution output is just
//! the `(batch * positions, channels)` GEMM result viewed per sample.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Height x width x channels of an image or feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DenseSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

impl DenseSpec {
    fn weight<'a>(&self, params: &'a [f32]) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape(
            (self.inputs, self.outputs),
            &params[self.weight..self.weight + self.inputs * self.outputs],
        )
        .expect("dense weight slice")
    }

    pub fn forward(&self, params: &[f32], x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight(params));
        let b = &params[self.bias..self.bias + self.outputs];
        for mut row in y.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        y
    }

    pub fn backward(
        &self,
        params: &[f32],
        x: &Array2<f32>,
        dy: &Array2<f32>,
        grads: &mut [f32],
        want_input: bool,
    ) -> Option<Array2<f32>> {
        let dw = x.t().dot(dy);
        let gw = &mut grads[self.weight..self.weight + self.inputs * self.outputs];
        for (g, d) in gw.iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grads[self.bias..self.bias + self.outputs].iter_mut().zip(db.iter()) {
            *g += d;
        }
        want_input.then(|| dy.dot(&self.weight(params).t()))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSpec {
    pub input: ImageShape,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvSpec {
    pub fn output(&self) -> ImageShape {
        let oh = (self.input.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.input.width + 2 * self.padding - self.kernel) / self.stride + 1;
        ImageShape::new(oh, ow, self.out_channels)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.input.channels
    }

    fn weight<'a>(&self, params: &'a [f32]) -> ArrayView2<'a, f32> {
        let k = self.patch_len();
        ArrayView2::from_shape((k, self.out_channels), &params[self.weight..self.weight + k * self.out_channels])
            .expect("conv weight slice")
    }

    /// Visits every (column row, patch offset, input offset) triple that lies
    /// inside the input; padding positions are skipped.
    fn for_each_tap(&self, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
        let out = self.output();
        let (h, w, c) = (self.input.height as isize, self.input.width as isize, self.input.channels);
        let per_sample = self.input.len();
        for b in 0..batch {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let row = (b * out.height + oy) * out.width + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let src = b * per_sample + ((iy * w + ix) as usize) * c;
                            let dst = (ky * self.kernel + kx) * c;
                            f(row, dst, src);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &Array2<f32>) -> Array2<f32> {
        let batch = x.nrows();
        let out = self.output();
        let k = self.patch_len();
        let c = self.input.channels;
        let mut cols = Array2::<f32>::zeros((batch * out.height * out.width, k));
        let xs = x.as_slice().expect("standard layout input");
        let cs = cols.as_slice_mut().expect("fresh array");
        self.for_each_tap(batch, |row, dst, src| {
            cs[row * k + dst..row * k + dst + c].copy_from_slice(&xs[src..src + c]);
        });
        cols
    }

    fn col2im(&self, dcols: &Array2<f32>, batch: usize) -> Array2<f32> {
        let k = self.patch_len();
        let c = self.input.channels;
        let mut dx = Array2::<f32>::zeros((batch, self.input.len()));
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("fresh array");
        self.for_each_tap(batch, |row, dst, src| {
            for j in 0..c {
                xs[src + j] += ds[row * k + dst + j];
            }
        });
        dx
    }

    /// Returns the output activations and the im2col buffer needed for backward.
    pub fn forward(&self, params: &[f32], x: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let batch = x.nrows();
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.weight(params));
        let b = &params[self.bias..self.bias + self.out_channels];
        for mut row in y.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        let len = self.output().len();
        let y = y.into_shape_with_order((batch, len)).expect("conv output reshape");
        (y, cols)
    }

    pub fn backward(
        &self,
        params: &[f32],
        cols: &Array2<f32>,
        dy: &Array2<f32>,
        grads: &mut [f32],
        want_input: bool,
    ) -> Option<Array2<f32>> {
        let batch = dy.nrows();
        let dy = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cols.nrows(), self.out_channels))
            .expect("conv grad reshape");
        let k = self.patch_len();
        let dw = cols.t().dot(&dy);
        for (g, d) in grads[self.weight..self.weight + k * self.out_channels].iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grads[self.bias..self.bias + self.out_channels].iter_mut().zip(db.iter()) {
            *g += d;
        }
        want_input.then(|| {
            let dcols = dy.dot(&self.weight(params).t());
            self.col2im(&dcols, batch)
        })
    }
}

pub(crate) fn relu(x: Array2<f32>) -> Array2<f32> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub(crate) fn relu_backward(out: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub(crate) fn global_avg_pool(shape: ImageShape, x: &Array2<f32>) -> Array2<f32> {
    let positions = shape.height * shape.width;
    let mut y = Array2::<f32>::zeros((x.nrows(), shape.channels));
    for (b, row) in x.rows().into_iter().enumerate() {
        let cells = row.as_slice().expect("standard layout").chunks_exact(shape.channels);
        let mut acc = y.row_mut(b);
        for cell in cells {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
    }
    y /= positions as f32;
    y
}

pub(crate) fn global_avg_pool_backward(shape: ImageShape, dy: &Array2<f32>) -> Array2<f32> {
    let positions = shape.height * shape.width;
    let mut dx = Array2::<f32>::zeros((dy.nrows(), shape.len()));
    for (b, g) in dy.rows().into_iter().enumerate() {
        for p in 0..positions {
            dx.slice_mut(s![b, p * shape.channels..(p + 1) * shape.channels]).assign(&(&g / positions as f32));
        }
    }
    dx
}
