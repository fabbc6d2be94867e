use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm_rm, Real, Tensor};

/// 2-D convolution parameters. Weights are `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Real = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Shape-only description of a convolution, used by graph builders and the
/// container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(geometry: ConvGeometry, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ConvGeometry {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        } = geometry;
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("degenerate geometry {geometry:?}"),
            ));
        }
        let wshape = [out_channels, in_channels, kernel_size, kernel_size];
        if weights.shape() != wshape {
            return Err(Error::shape("conv2d weights", &wshape, weights.shape()));
        }
        if bias.shape() != [out_channels] {
            return Err(Error::shape("conv2d bias", &[out_channels], bias.shape()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            weights,
            bias,
        })
    }

    pub fn zeros(geometry: ConvGeometry) -> Result<Self> {
        let w = Tensor::zeros(&[
            geometry.out_channels,
            geometry.in_channels,
            geometry.kernel_size,
            geometry.kernel_size,
        ]);
        let b = Tensor::zeros(&[geometry.out_channels]);
        Self::new(geometry, w, b)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_size: self.kernel_size,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::invalid(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {k}"),
            ));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    pub fn cast<U: Real>(&self) -> ConvSpec<U> {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_size: self.kernel_size,
            stride: self.stride,
            padding: self.padding,
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4("conv2d")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                &[n, self.in_channels, h, w],
                input.shape(),
            ));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, c, h, w, oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_size == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

/// Unfold one `(C, H, W)` image into `(C·k·k, OH·OW)` columns.
fn im2col<T: Real>(x: &[T], g: &Window, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image gradient.
fn col2im<T: Real>(cols: &[T], g: &Window, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dxc[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn window<T: Real>(spec: &ConvSpec<T>, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Window {
    Window {
        c,
        h,
        w,
        k: spec.kernel_size,
        s: spec.stride,
        p: spec.padding,
        oh,
        ow,
    }
}

/// NCHW convolution through im2col and a packed matrix product.
pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = spec.check_input(input)?;
    let oc = spec.out_channels;
    let ckk = c * spec.kernel_size * spec.kernel_size;
    let plane = oh * ow;
    let g = window(spec, c, h, w, oh, ow);
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let x = input.data();
    let item = c * h * w;
    par::for_each_chunk_mut(out.data_mut(), oc * plane, |i, y| {
        for (o, row) in y.chunks_mut(plane).enumerate() {
            row.fill(spec.bias.data()[o]);
        }
        let xi = &x[i * item..(i + 1) * item];
        if spec.is_pointwise() {
            gemm_rm(oc, ckk, plane, T::one(), spec.weights.data(), false, xi, false, T::one(), y);
        } else {
            let mut cols = vec![T::zero(); ckk * plane];
            im2col(xi, &g, &mut cols);
            gemm_rm(oc, ckk, plane, T::one(), spec.weights.data(), false, &cols, false, T::one(), y);
        }
    });
    Ok(out)
}

/// Direct-summation convolution; the reference semantics for [`conv2d`].
pub fn conv2d_direct<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = spec.check_input(input)?;
    let (k, s, p) = (spec.kernel_size, spec.stride, spec.padding as isize);
    let oc = spec.out_channels;
    let x = input.data();
    let wt = spec.weights.data();
    let mut out = Vec::with_capacity(n * oc * oh * ow);
    for ni in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = spec.bias.data()[o].f64();
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * c + ci) * k + ky) * k + kx];
                                acc += xv.f64() * wv.f64();
                            }
                        }
                    }
                    out.push(T::of(acc));
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d`]. Per-sample weight gradients are computed
/// independently and summed in sample order.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w, oh, ow) = spec.check_input(input)?;
    let oc = spec.out_channels;
    if grad_out.shape() != [n, oc, oh, ow] {
        return Err(Error::shape("conv2d_backward", &[n, oc, oh, ow], grad_out.shape()));
    }
    let ckk = c * spec.kernel_size * spec.kernel_size;
    let plane = oh * ow;
    let g = window(spec, c, h, w, oh, ow);
    let item = c * h * w;
    let x = input.data();
    let dy = grad_out.data();
    let wt = spec.weights.data();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(n, |i| {
        let xi = &x[i * item..(i + 1) * item];
        let dyi = &dy[i * oc * plane..(i + 1) * oc * plane];
        let mut dw = vec![T::zero(); oc * ckk];
        let mut dx = vec![T::zero(); item];
        let db: Vec<T> = dyi
            .chunks(plane)
            .map(|r| T::of(r.iter().map(|v| v.f64()).sum()))
            .collect();
        if spec.is_pointwise() {
            gemm_rm(oc, plane, ckk, T::one(), dyi, false, xi, true, T::zero(), &mut dw);
            gemm_rm(ckk, oc, plane, T::one(), wt, true, dyi, false, T::zero(), &mut dx);
        } else {
            let mut cols = vec![T::zero(); ckk * plane];
            im2col(xi, &g, &mut cols);
            gemm_rm(oc, plane, ckk, T::one(), dyi, false, &cols, true, T::zero(), &mut dw);
            gemm_rm(ckk, oc, plane, T::one(), wt, true, dyi, false, T::zero(), &mut cols);
            col2im(&cols, &g, &mut dx);
        }
        (dx, dw, db)
    });

    let mut dx = Vec::with_capacity(n * item);
    let mut dw = vec![T::zero(); oc * ckk];
    let mut db = vec![T::zero(); oc];
    for (sx, sw, sb) in per_sample {
        dx.extend_from_slice(&sx);
        for (a, b) in dw.iter_mut().zip(&sw) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(&sb) {
            *a += *b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weights: Tensor::new(spec.weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![oc], db)?,
    })
}
