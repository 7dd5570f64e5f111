use crate::TensorError;

/// Hyper-parameters of the Adam optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), TensorError> {
        if params.len() != self.first_moment.len() {
            return Err(TensorError::LengthMismatch {
                what: "adam parameters",
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(TensorError::LengthMismatch {
                what: "adam gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut fresh = AdamState::new(3, AdamConfig::default());
        let mut q = vec![0.5, -1.0, 2.0];
        fresh.step(&mut q, &[0.0; 3]).unwrap();
        assert_eq!(q, vec![0.5, -1.0, 2.0]);
        assert_eq!(fresh.step_count(), 1);

        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = vec![0.5, -1.0, 2.0];
        state.step(&mut p, &[1.0, 1.0, 1.0]).unwrap();
        let m_before = state.first_moment().to_vec();
        let v_before = state.second_moment().to_vec();
        state.step(&mut p, &[0.0; 3]).unwrap();
        for i in 0..3 {
            assert!(state.first_moment()[i].abs() < m_before[i].abs());
            assert!(state.second_moment()[i] < v_before[i]);
        }
    }

    #[test]
    fn single_step_matches_closed_form() {
        // m̂ = g = 1, v̂ = g² = 1 after bias correction, so Δ = -lr / (1 + ε).
        let expected: f64 = -1e-4 / (1.0 + 1e-8);
        assert!((expected - (-9.9999999e-5)).abs() < 1e-15);
        let mut state = AdamState::new(1, AdamConfig::with_lr(1e-4));
        let mut p = vec![0.0];
        state.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - expected).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut state = AdamState::new(2, AdamConfig::with_lr(1e-2));
        let mut p = vec![0.3, 0.3];
        for g in [0.7, -0.2, 1.3] {
            state.step(&mut p, &[g, g]).unwrap();
            assert_eq!(p[0], p[1]);
        }
    }

    #[test]
    fn zero_lr_never_moves() {
        let mut state = AdamState::new(2, AdamConfig::with_lr(0.0));
        let mut p = vec![1.0, -3.0];
        for g in [0.5, -8.0, 100.0] {
            state.step(&mut p, &[g, -g]).unwrap();
        }
        assert_eq!(p, vec![1.0, -3.0]);
        assert!(state.second_moment().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(state.step(&mut p, &[1.0]).is_err());
        let mut q = vec![0.0; 3];
        assert!(state.step(&mut q, &[1.0; 3]).is_err());
    }
}
