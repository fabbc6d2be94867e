//! CNN primitives on NCHW tensors: convolution, batch normalization,
//! pooling, leaky ReLU, nearest upsampling and channel concatenation,
//! together with the backward kernels used for training.

mod conv;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_direct, ConvGeometry, ConvGrads, ConvSpec};
pub use norm::{
    batch_norm_infer, batch_norm_train, batch_norm_train_backward, fold_batch_norm,
    BatchNormCache, BatchNormGrads, BatchNormSpec,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, max_pool2d, max_pool2d_backward, max_pool2d_indexed,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x >= T::zero() { g } else { slope * g })
}

/// Repeat every pixel `factor×factor` times.
pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be positive"));
    }
    let (n, c, h, w) = input.dims4("upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
        let plane = i / (oh * ow);
        let (y, xx) = ((i / ow) % oh, i % ow);
        x[plane * h * w + (y / factor) * w + xx / factor]
    });
    Ok(out)
}

pub fn upsample_nearest_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::<T>::zeros(input_shape);
    let (_, _, h, w) = dx.dims4("upsample_nearest_backward")?;
    let (oh, ow) = (h * factor, w * factor);
    let d = dx.data_mut();
    for (i, &g) in grad_out.data().iter().enumerate() {
        let plane = i / (oh * ow);
        let (y, xx) = ((i / ow) % oh, i % ow);
        d[plane * h * w + (y / factor) * w + xx / factor] += g;
    }
    Ok(dx)
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut channels = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4("concat")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape("concat", &[n, tc, h, w], t.shape()));
        }
        channels += tc;
    }
    let mut data = Vec::with_capacity(n * channels * h * w);
    for i in 0..n {
        for t in inputs {
            data.extend_from_slice(t.item(i));
        }
    }
    Tensor::new(vec![n, channels, h, w], data)
}

/// Split a channel-concatenated gradient back into its parts.
pub fn concat_channels_backward<T: Real>(
    grad_out: &Tensor<T>,
    channel_counts: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad_out.dims4("concat_backward")?;
    if channel_counts.iter().sum::<usize>() != c {
        return Err(Error::invalid("concat_backward", "channel counts do not add up"));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = channel_counts
        .iter()
        .map(|&k| Vec::with_capacity(n * k * plane))
        .collect();
    for i in 0..n {
        let item = grad_out.item(i);
        let mut offset = 0;
        for (p, &k) in parts.iter_mut().zip(channel_counts) {
            p.extend_from_slice(&item[offset * plane..(offset + k) * plane]);
            offset += k;
        }
    }
    parts
        .into_iter()
        .zip(channel_counts)
        .map(|(p, &k)| Tensor::new(vec![n, k, h, w], p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new(vec![3], vec![5.0f32, 0.0, -1.0]).unwrap();
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.data()[0], 5.0);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn upsample_then_backward_sums() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert_eq!(y.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        let g = upsample_nearest_backward(x.shape(), &Tensor::full(y.shape(), 1.0), 2).unwrap();
        assert!(g.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f32);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let parts = concat_channels_backward(&c, &[1, 3]).unwrap();
        assert_eq!(parts, vec![a, b]);
        let bad = Tensor::<f32>::zeros(&[2, 1, 3, 2]);
        assert!(concat_channels(&[&c, &bad]).is_err());
    }
}
