//! 2-D convolution and transposed convolution via im2col + GEMM.

use rand::Rng;

use crate::rng::uniform;
use crate::tensor::{matmul, Scalar, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((size - 1) * stride + kernel).checked_sub(2 * padding)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `n` images (c, h, w) into a (c·k·k) × (n·out_h·out_w) matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let p = g.positions();
    let ncols = n * p;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    let img = g.channels * g.height * g.width;
    for ci in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let src = &x[b * img + ci * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..];
                        let dst = &mut dst_row[b * p + oy * g.out_w..];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub(crate) fn col2im<T: Scalar>(cols: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let p = g.positions();
    let ncols = n * p;
    let img = g.channels * g.height * g.width;
    let mut x = vec![T::zero(); n * img];
    for ci in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let dst = &mut x[b * img + ci * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[b * p + oy * g.out_w..];
                        let base = iy as usize * g.width;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ix as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// (n, c, p) → (c, n·p)
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// (c, n·p) → (n, c, p)
fn to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

fn init_uniform<T: Scalar, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| uniform(rng, -bound, bound)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// (out, in, k, k)
    pub weight: Tensor<T>,
    /// (1, out, 1, 1)
    pub bias: Tensor<T>,
    pub(crate) geom: Geometry,
    pub out_channels: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub(crate) fn new<R: Rng + ?Sized>(
        in_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Option<Self> {
        let [c, h, w] = in_shape;
        let geom = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h: conv_out(h, kernel, stride, padding)?,
            out_w: conv_out(w, kernel, stride, padding)?,
        };
        let fan_in = c * kernel * kernel;
        let weight = Tensor::from_vec(
            [out_channels, c, kernel, kernel],
            init_uniform(out_channels * fan_in, fan_in, rng),
        )
        .ok()?;
        let bias = Tensor::from_vec([1, out_channels, 1, 1], init_uniform(out_channels, fan_in, rng)).ok()?;
        Some(Self {
            weight,
            bias,
            geom,
            out_channels,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.geom.out_h, self.geom.out_w]
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let g = &self.geom;
        let p = g.positions();
        let cols = im2col(x.data(), n, g);
        let mut y = vec![T::zero(); self.out_channels * n * p];
        matmul(
            self.weight.data(),
            false,
            &cols,
            false,
            &mut y,
            self.out_channels,
            g.rows(),
            n * p,
            false,
        );
        let mut out = to_batch_major(&y, n, self.out_channels, p);
        let bias = self.bias.data();
        for (chunk, o) in out.chunks_mut(p).zip((0..self.out_channels).cycle()) {
            chunk.iter_mut().for_each(|v| *v += bias[o]);
        }
        Tensor::from_vec([n, self.out_channels, g.out_h, g.out_w], out).expect("conv output shape")
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    ) -> Tensor<T> {
        let n = input.batch();
        let g = &self.geom;
        let p = g.positions();
        let dy = to_channel_major(grad_out.data(), n, self.out_channels, p);
        if let Some((gw, gb)) = grads {
            let cols = im2col(input.data(), n, g);
            matmul(&dy, false, &cols, true, gw.data_mut(), self.out_channels, n * p, g.rows(), true);
            for (o, b) in gb.data_mut().iter_mut().enumerate() {
                *b += dy[o * n * p..(o + 1) * n * p].iter().copied().sum::<T>();
            }
        }
        let mut dcols = vec![T::zero(); g.rows() * n * p];
        matmul(
            self.weight.data(),
            true,
            &dy,
            false,
            &mut dcols,
            g.rows(),
            self.out_channels,
            n * p,
            false,
        );
        let dx = col2im(&dcols, n, g);
        Tensor::from_vec(input.shape(), dx).expect("conv input grad shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    /// (in, out, k, k)
    pub weight: Tensor<T>,
    /// (1, out, 1, 1)
    pub bias: Tensor<T>,
    /// Geometry of the adjoint convolution: output image → input grid.
    pub(crate) geom: Geometry,
    pub in_channels: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub(crate) fn new<R: Rng + ?Sized>(
        in_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Option<Self> {
        let [c, h, w] = in_shape;
        let oh = conv_transpose_out(h, kernel, stride, padding)?;
        let ow = conv_transpose_out(w, kernel, stride, padding)?;
        if conv_out(oh, kernel, stride, padding)? != h || conv_out(ow, kernel, stride, padding)? != w {
            return None;
        }
        let geom = Geometry {
            channels: out_channels,
            height: oh,
            width: ow,
            kernel,
            stride,
            padding,
            out_h: h,
            out_w: w,
        };
        let fan_in = out_channels * kernel * kernel;
        let weight = Tensor::from_vec(
            [c, out_channels, kernel, kernel],
            init_uniform(c * fan_in, fan_in, rng),
        )
        .ok()?;
        let bias = Tensor::from_vec([1, out_channels, 1, 1], init_uniform(out_channels, fan_in, rng)).ok()?;
        Some(Self {
            weight,
            bias,
            geom,
            in_channels: c,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.geom.channels, self.geom.height, self.geom.width]
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let g = &self.geom;
        let pi = g.positions();
        let xm = to_channel_major(x.data(), n, self.in_channels, pi);
        let mut cols = vec![T::zero(); g.rows() * n * pi];
        matmul(
            self.weight.data(),
            true,
            &xm,
            false,
            &mut cols,
            g.rows(),
            self.in_channels,
            n * pi,
            false,
        );
        let mut out = col2im(&cols, n, g);
        let po = g.height * g.width;
        let bias = self.bias.data();
        for (chunk, o) in out.chunks_mut(po).zip((0..g.channels).cycle()) {
            chunk.iter_mut().for_each(|v| *v += bias[o]);
        }
        Tensor::from_vec([n, g.channels, g.height, g.width], out).expect("conv-transpose output shape")
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    ) -> Tensor<T> {
        let n = input.batch();
        let g = &self.geom;
        let pi = g.positions();
        let dcols = im2col(grad_out.data(), n, g);
        if let Some((gw, gb)) = grads {
            let xm = to_channel_major(input.data(), n, self.in_channels, pi);
            matmul(&xm, false, &dcols, true, gw.data_mut(), self.in_channels, n * pi, g.rows(), true);
            let po = g.height * g.width;
            let gbd = gb.data_mut();
            for (chunk, o) in grad_out.data().chunks(po).zip((0..g.channels).cycle()) {
                gbd[o] += chunk.iter().copied().sum::<T>();
            }
        }
        let mut dxm = vec![T::zero(); self.in_channels * n * pi];
        matmul(
            self.weight.data(),
            false,
            &dcols,
            false,
            &mut dxm,
            self.in_channels,
            g.rows(),
            n * pi,
            false,
        );
        let dx = to_batch_major(&dxm, n, self.in_channels, pi);
        Tensor::from_vec(input.shape(), dx).expect("conv-transpose input grad shape")
    }
}
