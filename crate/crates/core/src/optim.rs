//! Adam with bias-corrected moment estimates.

/// Step-size and moment-decay settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Bias-correction factors for step `t` (1-based).
#[derive(Debug, Clone, Copy)]
pub struct StepScale {
    c1: f64,
    c2: f64,
}

impl AdamConfig {
    pub fn scale(&self, t: u64) -> StepScale {
        let t = t as i32;
        StepScale {
            c1: 1.0 - self.beta1.powi(t),
            c2: 1.0 - self.beta2.powi(t),
        }
    }

    /// Updates `params` in place from `grads`. A zero learning rate leaves
    /// parameters bit-identical while the moments still advance.
    pub fn update(&self, scale: StepScale, params: &mut [f64], grads: &[f64], state: &mut Moments) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), state.len());
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            self.update_one(scale, p, g, m, v);
        }
    }

    #[inline]
    pub fn update_one(&self, scale: StepScale, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        if self.learning_rate != 0.0 {
            let m_hat = *m / scale.c1;
            let v_hat = *v / scale.c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
