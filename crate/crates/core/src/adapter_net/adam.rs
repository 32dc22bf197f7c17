use crate::error::{Error, Result};
use crate::numerics::FlatParams;

/// Adam moment accumulators, shaped like the trainable parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// In-place bias-corrected Adam update of `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::invalid(format!(
                "adam state has {} entries, params {} and grads {}",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam step on a [`FlatParams`]; returns the updated parameters.
pub fn adam_step(params: &FlatParams, grads: &FlatParams, state: &mut AdamState, lr: f64) -> Result<FlatParams> {
    params.ensure_same_manifest(grads)?;
    let mut values = params.values().to_vec();
    state.step(&mut values, grads.values(), lr)?;
    params.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: Vec<f64>) -> FlatParams {
        FlatParams::concat(vec![(1, v)]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = flat(vec![0.5, -1.0, 2.0]);
        let mut s = AdamState::new(3);
        let out = adam_step(&p, &flat(vec![0.0; 3]), &mut s, 1e-3).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let lr = 1e-4;
        let mut s = AdamState::new(3);
        let mut p = vec![0.0; 3];
        let g = [0.3, -2.0, 1e-3];
        let mut prev = p.clone();
        for _ in 0..1000 {
            prev.copy_from_slice(&p);
            s.step(&mut p, &g, lr).unwrap();
        }
        for (a, b) in p.iter().zip(&prev) {
            let step = (a - b).abs();
            assert!((step - lr).abs() / lr < 0.01, "step {step}");
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let run = || {
            let mut s = AdamState::new(2);
            let mut p = vec![1.0, 2.0];
            for i in 0..50 {
                s.step(&mut p, &[(i as f64).sin(), 0.1], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 1e-3).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 2], 0.0).is_err());
        let other = FlatParams::concat(vec![(2, vec![0.0, 0.0])]).unwrap();
        assert!(adam_step(&flat(vec![0.0, 0.0]), &other, &mut s, 1e-3).is_err());
    }
}
