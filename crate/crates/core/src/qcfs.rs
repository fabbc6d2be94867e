//! Quantization clip-floor-shift activation.
//!
//! `h(z) = λ · clip(floor(z·L/λ + φ) / L, 0, 1)`
//!
//! The output takes the `L + 1` levels `{0, λ/L, …, λ}`. With `φ = ½` the
//! expected difference between `h` and the firing rate of an
//! integrate-and-fire neuron with threshold `λ` (initial membrane `λ/2`) is
//! zero for any number of timesteps, and at `T = L` the two agree exactly.
//!
//! Training uses a straight-through estimator: inside the band
//! `(−λ/2L, λ − λ/2L)` the gradient w.r.t. `z` is 1 and the gradient
//! w.r.t. `λ` is `(h(z) − z)/λ`; below the band both vanish; at or above its
//! upper edge `∂h/∂λ = 1` and `∂h/∂z = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which upper edge bounds the straight-through band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteBand {
    /// `(−λ/2L, λ − λ/2L)`: the band covers exactly the non-saturated
    /// quantization cells.
    #[default]
    Symmetric,
    /// `(−λ/2L, λ + λ/2L)`: the double negative taken literally.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcfsParams {
    pub lambda: f64,
    pub levels: u32,
    pub phi: f64,
    #[serde(default)]
    pub band: SteBand,
}

/// Initial threshold for freshly built trainable layers.
pub const DEFAULT_LAMBDA: f64 = 8.0;

impl QcfsParams {
    pub fn new(lambda: f64, levels: u32) -> Result<Self> {
        Self::with_phi(lambda, levels, 0.5)
    }

    pub fn with_phi(lambda: f64, levels: u32, phi: f64) -> Result<Self> {
        let p = Self {
            lambda,
            levels,
            phi,
            band: SteBand::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid("qcfs", format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("qcfs", "L must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(Error::invalid("qcfs", format!("phi must lie in [0, 1), got {}", self.phi)));
        }
        Ok(())
    }

    /// Open band `(lo, hi)` where the straight-through gradient passes.
    pub fn band(&self) -> (f64, f64) {
        let half_step = self.lambda / (2.0 * self.levels as f64);
        match self.band {
            SteBand::Symmetric => (-half_step, self.lambda - half_step),
            SteBand::Literal => (-half_step, self.lambda + half_step),
        }
    }

    /// Quantization level index `clamp(floor(z·L/λ + φ), 0, L)`.
    #[inline]
    pub fn level(&self, z: f64) -> u32 {
        let l = self.levels as f64;
        let k = (z * l / self.lambda + self.phi).floor();
        k.clamp(0.0, l) as u32
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        self.lambda * self.level(z) as f64 / self.levels as f64
    }

    #[inline]
    pub fn dz(&self, z: f64) -> f64 {
        let (lo, hi) = self.band();
        if lo < z && z < hi {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn dlambda(&self, z: f64) -> f64 {
        let (lo, hi) = self.band();
        if z >= hi {
            1.0
        } else if lo < z {
            (self.eval(z) - z) / self.lambda
        } else {
            // z ≤ lo; the point z == lo sits on the open lower edge.
            0.0
        }
    }
}

pub fn qcfs_forward<T: Real>(z: &Tensor<T>, p: &QcfsParams) -> Tensor<T> {
    z.map(|v| T::of(p.eval(v.f64())))
}

pub fn qcfs_grad_z<T: Real>(z: &Tensor<T>, p: &QcfsParams) -> Tensor<T> {
    z.map(|v| T::of(p.dz(v.f64())))
}

pub fn qcfs_grad_lambda<T: Real>(z: &Tensor<T>, p: &QcfsParams) -> Tensor<T> {
    z.map(|v| T::of(p.dlambda(v.f64())))
}

/// Chain rule through a QCFS layer whose λ is shared by all elements.
/// Returns the input gradient and the scalar λ gradient.
pub fn qcfs_layer_backward<T: Real>(
    upstream: &Tensor<T>,
    z: &Tensor<T>,
    p: &QcfsParams,
) -> Result<(Tensor<T>, f64)> {
    if upstream.shape() != z.shape() {
        return Err(Error::shape("qcfs_layer_backward", z.shape(), upstream.shape()));
    }
    let (lo, hi) = p.band();
    let mut grad_lambda = 0.0;
    let grad: Vec<T> = upstream
        .data()
        .iter()
        .zip(z.data())
        .map(|(g, v)| {
            let (g, z) = (g.f64(), v.f64());
            if z >= hi {
                grad_lambda += g;
                T::zero()
            } else if lo < z {
                grad_lambda += g * ((p.eval(z) - z) / p.lambda);
                T::of(g)
            } else {
                T::zero()
            }
        })
        .collect();
    let grad_z = Tensor::new(z.shape().to_vec(), grad)?;
    Ok((grad_z, grad_lambda))
}
