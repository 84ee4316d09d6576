//! Rolling history of the state over the trailing delay window and the two
//! delay functionals read from it.

use std::collections::VecDeque;

use crate::error::{LabError, Result};
use crate::model::delay_steps;

/// Uniform-grid samples of `X` on `[t−δ, t]`, oldest first.
///
/// Holds exactly `round(δ/h) + 1` samples once full.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer {
    step_h: f64,
    delta: f64,
    capacity: usize,
    samples: VecDeque<f64>,
}

impl DelayBuffer {
    /// Empty buffer; it must be filled with `capacity()` pushes before use.
    pub fn empty(delta: f64, step_h: f64) -> Result<Self> {
        let m = delay_steps(delta, step_h)?;
        Ok(Self { step_h, delta, capacity: m + 1, samples: VecDeque::with_capacity(m + 1) })
    }

    /// Samples the initial path `φ(τ)`, `τ ∈ [−δ, 0]`, onto the grid.
    pub fn from_initial_path(delta: f64, step_h: f64, phi: impl Fn(f64) -> f64) -> Result<Self> {
        let mut buf = Self::empty(delta, step_h)?;
        let m = buf.capacity - 1;
        for j in 0..=m {
            buf.samples.push_back(phi(buf.tau(j)));
        }
        Ok(buf)
    }

    /// Buffer from explicit samples; their count must match the window.
    pub fn from_samples(delta: f64, step_h: f64, samples: Vec<f64>) -> Result<Self> {
        let mut buf = Self::empty(delta, step_h)?;
        if samples.len() != buf.capacity {
            return Err(LabError::InvalidState(format!(
                "expected {} samples for delta = {delta}, h = {step_h}, got {}",
                buf.capacity,
                samples.len()
            )));
        }
        buf.samples = samples.into();
        Ok(buf)
    }

    /// Constant history `X ≡ value`.
    pub fn constant(delta: f64, step_h: f64, value: f64) -> Result<Self> {
        Self::from_initial_path(delta, step_h, |_| value)
    }

    pub fn step_h(&self) -> f64 {
        self.step_h
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &f64> + '_ {
        self.samples.iter()
    }

    /// Lag of sample `j` relative to the newest one.
    #[inline]
    fn tau(&self, j: usize) -> f64 {
        if self.capacity == 1 {
            0.0
        } else {
            -self.delta + j as f64 * self.step_h
        }
    }

    /// Appends the newest state; evicts the oldest once full.
    pub fn push(&mut self, x: f64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(x);
    }

    pub fn newest(&self) -> Result<f64> {
        self.ensure_full()?;
        Ok(*self.samples.back().expect("full buffer is non-empty"))
    }

    fn ensure_full(&self) -> Result<()> {
        if self.is_full() {
            Ok(())
        } else {
            Err(LabError::InvalidState(format!(
                "delay buffer holds {} of {} samples",
                self.samples.len(),
                self.capacity
            )))
        }
    }
}

/// `X₁(t) = ∫_{−δ}^0 e^{λτ} X(t+τ) dτ` by the trapezoidal rule on the buffer grid.
pub fn x1_of_buffer(buffer: &DelayBuffer, lambda: f64) -> Result<f64> {
    buffer.ensure_full()?;
    let m = buffer.capacity - 1;
    if m == 0 {
        return Ok(0.0);
    }
    let h = buffer.step_h;
    let mut acc = 0.0;
    for (j, x) in buffer.samples.iter().enumerate() {
        let w = if j == 0 || j == m { 0.5 } else { 1.0 };
        acc += w * (lambda * buffer.tau(j)).exp() * x;
    }
    Ok(acc * h)
}

/// `X₂(t) = X(t−δ)`, the oldest sample.
pub fn x2_of_buffer(buffer: &DelayBuffer) -> Result<f64> {
    buffer.ensure_full()?;
    Ok(*buffer.samples.front().expect("full buffer is non-empty"))
}

/// `∫_{−δ}^0 e^{λτ} dτ`, the weight a constant history receives in `X₁`.
pub fn exp_window_weight(lambda: f64, delta: f64) -> f64 {
    if lambda.abs() * delta < 1e-8 {
        delta * (1.0 - 0.5 * lambda * delta)
    } else {
        (1.0 - (-lambda * delta).exp()) / lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_buffer_without_discount() {
        for h in [0.5, 0.1, 1.0 / 64.0] {
            let b = DelayBuffer::constant(1.0, h, 2.0).unwrap();
            assert_relative_eq!(x1_of_buffer(&b, 0.0).unwrap(), 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn constant_buffer_with_discount_is_second_order() {
        let exact = 2.0 * (1.0 - (-0.1f64).exp()) / 0.1;
        assert_relative_eq!(exact, 1.903_251_639_3, epsilon = 1e-9);
        let err = |h: f64| {
            let b = DelayBuffer::constant(1.0, h, 2.0).unwrap();
            (x1_of_buffer(&b, 0.1).unwrap() - exact).abs()
        };
        let (e1, e2) = (err(1.0 / 16.0), err(1.0 / 32.0));
        assert!(e1 < 1e-4);
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn exponential_path_is_second_order() {
        // X(t+τ) = e^{aτ}: the integral is (1 − e^{−(λ+a)δ})/(λ+a).
        let (lambda, a, delta) = (0.3, -0.7, 2.0);
        let exact = exp_window_weight(lambda + a, delta);
        let err = |h: f64| {
            let b = DelayBuffer::from_initial_path(delta, h, |tau| (a * tau).exp()).unwrap();
            (x1_of_buffer(&b, lambda).unwrap() - exact).abs()
        };
        let ratio = err(1.0 / 8.0) / err(1.0 / 16.0);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn zero_delay_restores_no_delay_model() {
        let mut b = DelayBuffer::constant(0.0, 0.01, 3.0).unwrap();
        assert_eq!(b.capacity(), 1);
        assert_eq!(x1_of_buffer(&b, 0.5).unwrap(), 0.0);
        b.push(4.5);
        assert_eq!(x2_of_buffer(&b).unwrap(), 4.5);
        assert_eq!(b.newest().unwrap(), 4.5);
    }

    #[test]
    fn oldest_sample_is_x2() {
        let b = DelayBuffer::from_samples(1.0, 0.5, vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(x2_of_buffer(&b).unwrap(), 3.0);
        let c = DelayBuffer::constant(1.0, 0.25, -1.5).unwrap();
        assert_eq!(x2_of_buffer(&c).unwrap(), -1.5);
    }

    #[test]
    fn push_preserves_count() {
        let mut b = DelayBuffer::constant(1.0, 0.125, 0.0).unwrap();
        for i in 0..50 {
            b.push(i as f64);
            assert_eq!(b.len(), 9);
        }
        assert_eq!(x2_of_buffer(&b).unwrap(), 41.0);
    }

    #[test]
    fn partial_buffer_is_rejected() {
        let mut b = DelayBuffer::empty(1.0, 0.5).unwrap();
        b.push(1.0);
        assert!(matches!(x1_of_buffer(&b, 0.0), Err(LabError::InvalidState(_))));
        assert!(matches!(x2_of_buffer(&b), Err(LabError::InvalidState(_))));
        assert!(DelayBuffer::from_samples(1.0, 0.5, vec![1.0]).is_err());
        assert!(DelayBuffer::empty(1.0, 0.3).is_err());
    }
}
