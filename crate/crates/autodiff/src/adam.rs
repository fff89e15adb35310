use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    config: AdamConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
    initialized: bool,
}

impl<S: Real> AdamState<S> {
    /// State with no moment buffers; [`AdamState::step`] refuses to run
    /// until [`AdamState::init`] is called.
    pub fn uninit(config: AdamConfig) -> Self {
        AdamState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
            initialized: false,
        }
    }

    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let mut state = Self::uninit(config);
        state.init(params);
        state
    }

    pub fn init(&mut self, params: &ParamStore<S>) {
        self.first = params.iter().map(|p| vec![S::ZERO; p.value.len()]).collect();
        self.second = self.first.clone();
        self.step = 0;
        self.initialized = true;
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if !self.initialized {
            return Err(AutodiffError::Contract("adam state used before init".into()));
        }
        if self.first.len() != params.len()
            || params.iter().zip(&self.first).any(|(p, m)| p.value.len() != m.len())
        {
            return Err(AutodiffError::Contract(
                "adam moments do not match the parameter shapes".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let lr = S::from_f64(c.learning_rate);
        let eps = S::from_f64(c.epsilon);
        let bc1 = S::ONE - b1.powi(t);
        let bc2 = S::ONE - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::ONE - b1) * g;
                v[i] = b2 * v[i] + (S::ONE - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
