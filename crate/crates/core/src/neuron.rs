//! Integrate-and-fire neurons with reset by subtraction.
//!
//! Membrane potentials are kept in f64. Starting from `v(0) = θ/2` and
//! integrating a constant current `z` for `T` steps, the spike count is
//! `clamp(floor((z·T + θ/2)/θ), 0, T)`, which is the QCFS level with
//! `φ = ½` when `T = L` and `θ = λ`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct IfNeuronState {
    shape: Vec<usize>,
    potential: Vec<f64>,
    theta: f64,
    t: usize,
}

impl IfNeuronState {
    pub fn new(shape: &[usize], theta: f64) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::invalid("if_init", format!("threshold must be positive, got {theta}")));
        }
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            potential: vec![theta / 2.0; n],
            theta,
            t: 0,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    /// Integrate one step of input and fire. Returns the binary spike map.
    pub fn step<T: Real>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut spikes = Tensor::zeros(&self.shape);
        self.step_into(input, spikes.data_mut())?;
        Ok(spikes)
    }

    /// As [`step`](Self::step), writing spikes into `out`; returns the
    /// number of neurons that fired.
    pub fn step_into<T: Real>(&mut self, input: &Tensor<T>, out: &mut [T]) -> Result<usize> {
        if input.shape() != self.shape.as_slice() {
            return Err(Error::shape("if_step", &self.shape, input.shape()));
        }
        let mut fired = 0;
        for ((v, x), s) in self.potential.iter_mut().zip(input.data()).zip(out.iter_mut()) {
            *v += x.f64();
            if *v >= self.theta {
                *v -= self.theta;
                *s = T::one();
                fired += 1;
            } else {
                *s = T::zero();
            }
        }
        self.t += 1;
        Ok(fired)
    }
}

/// Record of a constant-input simulation.
#[derive(Debug, Clone)]
pub struct SpikeTrace<T: Real = f32> {
    /// Binary spike maps `s(t)`, one per timestep.
    pub spikes: Vec<Tensor<T>>,
    /// Postsynaptic potentials `x(t) = s(t)·θ`.
    pub postsynaptic: Vec<Tensor<T>>,
    pub theta: f64,
    /// Timesteps the run was configured for.
    pub timesteps: usize,
}

impl<T: Real> SpikeTrace<T> {
    pub fn is_complete(&self) -> bool {
        self.timesteps >= 1 && self.spikes.len() == self.timesteps
    }

    pub fn rate(&self) -> Result<Tensor<T>> {
        rate_readout(self)
    }
}

pub fn if_init(shape: &[usize], theta: f64) -> Result<IfNeuronState> {
    IfNeuronState::new(shape, theta)
}

pub fn if_step<T: Real>(state: &mut IfNeuronState, input: &Tensor<T>) -> Result<Tensor<T>> {
    state.step(input)
}

/// Present `z` for `timesteps` steps to a fresh neuron layer.
pub fn if_run_constant<T: Real>(z: &Tensor<T>, theta: f64, timesteps: usize) -> Result<SpikeTrace<T>> {
    if timesteps == 0 {
        return Err(Error::invalid("if_run_constant", "T must be at least 1"));
    }
    let mut state = IfNeuronState::new(z.shape(), theta)?;
    let mut spikes = Vec::with_capacity(timesteps);
    let mut post = Vec::with_capacity(timesteps);
    for _ in 0..timesteps {
        let s = state.step(z)?;
        post.push(s.map(|v| T::of(v.f64() * theta)));
        spikes.push(s);
    }
    Ok(SpikeTrace {
        spikes,
        postsynaptic: post,
        theta,
        timesteps,
    })
}

/// Firing rate `Σ_t x(t) / T`.
pub fn rate_readout<T: Real>(trace: &SpikeTrace<T>) -> Result<Tensor<T>> {
    if !trace.is_complete() {
        return Err(Error::invalid(
            "rate_readout",
            format!("trace has {} of {} timesteps", trace.spikes.len(), trace.timesteps),
        ));
    }
    let shape = trace.spikes[0].shape().to_vec();
    let n = trace.spikes[0].len();
    let mut counts = vec![0u32; n];
    for s in &trace.spikes {
        for (c, v) in counts.iter_mut().zip(s.data()) {
            if *v != T::zero() {
                *c += 1;
            }
        }
    }
    let t = trace.timesteps as f64;
    Tensor::new(
        shape,
        counts
            .into_iter()
            .map(|c| T::of(trace.theta * c as f64 / t))
            .collect(),
    )
}

/// Spike count of a single neuron driven by constant `z`, simulated step
/// by step. Used by the Monte Carlo analyzer, where materialising a trace
/// per sample would be wasteful.
#[inline]
pub fn constant_drive_spike_count(z: f64, theta: f64, timesteps: usize) -> u32 {
    let mut v = theta / 2.0;
    let mut count = 0;
    for _ in 0..timesteps {
        v += z;
        if v >= theta {
            v -= theta;
            count += 1;
        }
    }
    count
}
