use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

use super::conv::ConvSpec;

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_variance: Vec<T>,
    pub epsilon: T,
}

impl<T: Real> BatchNormSpec<T> {
    /// Fresh statistics: unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize, epsilon: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_variance: vec![T::one(); channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_variance.len() != c {
            return Err(Error::invalid(
                "batch_norm",
                format!(
                    "parameter lengths differ: gamma {}, beta {}, mean {}, variance {}",
                    c,
                    self.beta.len(),
                    self.running_mean.len(),
                    self.running_variance.len()
                ),
            ));
        }
        let all = self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.running_mean)
            .chain(&self.running_variance)
            .chain(std::iter::once(&self.epsilon));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch_norm"));
        }
        if self.epsilon < T::zero() || self.running_variance.iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("batch_norm", "negative variance or epsilon"));
        }
        if self
            .running_variance
            .iter()
            .any(|&v| (v + self.epsilon) <= T::zero())
        {
            return Err(Error::invalid("batch_norm", "variance + epsilon must be positive"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale·x + shift`,
    /// computed in f64.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_variance[c].f64() + self.epsilon.f64()).sqrt();
                let scale = self.gamma[c].f64() * inv;
                (scale, self.beta[c].f64() - self.running_mean[c].f64() * scale)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> BatchNormSpec<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        BatchNormSpec {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_variance: c(&self.running_variance),
            epsilon: U::of(self.epsilon.f64()),
        }
    }
}

fn check_channels<T: Real>(op: &'static str, input: &Tensor<T>, spec: &BatchNormSpec<T>) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() < 2 || shape[1] != spec.channels() {
        let mut expected = shape.to_vec();
        if expected.len() >= 2 {
            expected[1] = spec.channels();
        }
        return Err(Error::shape(op, &expected, shape));
    }
    let plane: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], plane))
}

/// Inference-mode normalization with running statistics:
/// `gamma·(x − mean)/sqrt(var + eps) + beta`.
pub fn batch_norm_infer<T: Real>(input: &Tensor<T>, spec: &BatchNormSpec<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    let (_, c, plane) = check_channels("batch_norm_infer", input, spec)?;
    let mut out = input.clone();
    let params: Vec<(T, T, T, T)> = (0..c)
        .map(|ch| {
            let inv = T::one() / (spec.running_variance[ch] + spec.epsilon).sqrt();
            (spec.gamma[ch], spec.running_mean[ch], inv, spec.beta[ch])
        })
        .collect();
    for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (g, m, inv, b) = params[k % c];
        for v in chunk {
            *v = g * ((*v - m) * inv) + b;
        }
    }
    Ok(out)
}

/// Batch statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    pub normalized: Tensor<T>,
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub variance: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode normalization using the statistics of the current batch.
pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    spec: &BatchNormSpec<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    spec.validate()?;
    let (n, c, plane) = check_channels("batch_norm_train", input, spec)?;
    let x = input.data();
    let count = (n * plane) as f64;
    let stats: Vec<(f64, f64)> = par::map_range(c, |ch| {
        let mut sum = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            sum += x[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            sq += x[base..base + plane]
                .iter()
                .map(|v| (v.f64() - mean).powi(2))
                .sum::<f64>();
        }
        (mean, sq / count)
    });
    let eps = spec.epsilon.f64();
    let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = input.clone();
    let mut out = input.clone();
    for (k, (nc, oc)) in normalized
        .data_mut()
        .chunks_mut(plane)
        .zip(out.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = k % c;
        let (mean, inv) = (stats[ch].0, inv_std[ch]);
        let (g, b) = (spec.gamma[ch].f64(), spec.beta[ch].f64());
        for (nv, ov) in nc.iter_mut().zip(oc) {
            let xhat = (nv.f64() - mean) * inv;
            *nv = T::of(xhat);
            *ov = T::of(g * xhat + b);
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            mean: stats.iter().map(|s| s.0).collect(),
            variance: stats.iter().map(|s| s.1).collect(),
            inv_std,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of [`batch_norm_train`].
pub fn batch_norm_train_backward<T: Real>(
    spec: &BatchNormSpec<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "batch_norm_backward",
            cache.normalized.shape(),
            grad_out.shape(),
        ));
    }
    let (n, c, plane) = check_channels("batch_norm_backward", grad_out, spec)?;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let count = (n * plane) as f64;
    let sums: Vec<(f64, f64)> = (0..c)
        .map(|ch| {
            let (mut sdy, mut sdyx) = (0.0, 0.0);
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for (y, x) in dy[base..base + plane].iter().zip(&xh[base..base + plane]) {
                    sdy += y.f64();
                    sdyx += y.f64() * x.f64();
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let mut dx = grad_out.clone();
    for (k, ((dc, yc), xc)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(dy.chunks(plane))
        .zip(xh.chunks(plane))
        .enumerate()
    {
        let ch = k % c;
        let (sdy, sdyx) = sums[ch];
        let g = spec.gamma[ch].f64() * cache.inv_std[ch];
        for ((v, y), x) in dc.iter_mut().zip(yc).zip(xc) {
            *v = T::of(g / count * (count * y.f64() - sdy - x.f64() * sdyx));
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: sums.iter().map(|s| T::of(s.1)).collect(),
        beta: sums.iter().map(|s| T::of(s.0)).collect(),
    })
}

/// Fold inference-mode batch norm into the preceding convolution.
///
/// Weight and bias products are formed in f64 before rounding back.
pub fn fold_batch_norm<T: Real>(conv: &ConvSpec<T>, bn: &BatchNormSpec<T>) -> Result<ConvSpec<T>> {
    bn.validate()?;
    if bn.channels() != conv.out_channels {
        return Err(Error::shape(
            "fold_batch_norm",
            &[conv.out_channels],
            &[bn.channels()],
        ));
    }
    let affine = bn.affine();
    let per_out = conv.weights.len() / conv.out_channels;
    let mut folded = conv.clone();
    for (i, w) in folded.weights.data_mut().iter_mut().enumerate() {
        *w = T::of(w.f64() * affine[i / per_out].0);
    }
    for (o, b) in folded.bias.data_mut().iter_mut().enumerate() {
        let (scale, shift) = affine[o];
        *b = T::of(b.f64() * scale + shift);
    }
    Ok(folded)
}
