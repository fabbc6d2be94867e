use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn pool_dims<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    k: usize,
    s: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if k == 0 || s == 0 {
        return Err(Error::invalid(op, format!("kernel {k} and stride {s} must be positive")));
    }
    let (n, c, h, w) = input.dims4(op)?;
    if h < k || w < k {
        return Err(Error::invalid(op, format!("input {h}x{w} smaller than window {k}")));
    }
    Ok((n, c, h, w, (h - k) / s + 1, (w - k) / s + 1))
}

/// Mean over each `k×k` window.
pub fn avg_pool2d<T: Real>(input: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_dims("avg_pool2d", input, k, s)?;
    let x = input.data();
    let area = T::of((k * k) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = (oy * s + ky) * w + ox * s;
                    for v in &xp[row..row + k] {
                        acc += *v;
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    k: usize,
    s: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let (n, c, h, w, oh, ow) = pool_dims("avg_pool2d_backward", &probe, k, s)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape("avg_pool2d_backward", &[n, c, oh, ow], grad_out.shape()));
    }
    let area = T::of((k * k) as f64);
    let mut dx = probe;
    let dy = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(plane * oh + oy) * ow + ox] / area;
                for ky in 0..k {
                    let row = plane * h * w + (oy * s + ky) * w + ox * s;
                    for v in &mut d[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Max over each `k×k` window. Also returns the flat input index of each
/// winner (first maximum in row-major window order).
pub fn max_pool2d_indexed<T: Real>(
    input: &Tensor<T>,
    k: usize,
    s: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_dims("max_pool2d", input, k, s)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * s * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * s + ky) * w + ox * s + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d<T: Real>(input: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    max_pool2d_indexed(input, k, s).map(|(t, _)| t)
}

pub fn max_pool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid("max_pool2d_backward", "argmax length differs from gradient"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}
