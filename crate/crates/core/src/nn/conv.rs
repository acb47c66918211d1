//! Batched 2-D convolution (NCHW) via im2col + GEMM, and 2-D max pooling.

use super::gemm::sgemm;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, input: &[f32], col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ohw = self.col_cols();
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *d = if ix < 0 || ix >= self.width as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f32], out: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ohw = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `input` [n, c, h, w], `weight` [o, c, k, k], `bias` [o] -> [n, o, oh, ow].
pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Tensor {
    let n = input.shape()[0];
    let out_c = weight.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut out = Tensor::zeros(&[n, out_c, geom.out_h, geom.out_w]);
    for i in 0..n {
        geom.im2col(input.outer(i), &mut col);
        let dst = out.outer_mut(i);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        sgemm(out_c, rows, cols, 1.0, weight.data(), false, &col, false, 1.0, dst);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let n = input.shape()[0];
    let out_c = weight.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[out_c]);
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    for i in 0..n {
        let g = grad_out.outer(i);
        for (o, chunk) in g.chunks(cols).enumerate() {
            db.data_mut()[o] += chunk.iter().sum::<f32>();
        }
        geom.im2col(input.outer(i), &mut col);
        sgemm(out_c, cols, rows, 1.0, g, false, &col, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            sgemm(rows, out_c, cols, 1.0, weight.data(), true, g, false, 0.0, &mut dcol);
            geom.col2im_add(&dcol, dx.outer_mut(i));
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Non-overlapping max pooling with window = stride = `size`. Returns the
/// pooled tensor and, per output element, the flat input index it came from.
pub(crate) fn max_pool_forward(input: &Tensor, size: usize) -> (Tensor, Vec<u32>) {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[o] = src[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    (out, argmax)
}
