//! Adaptive-moment gradient descent with a cosine-decayed learning rate.

/// Cosine decay from `lr0` to zero over `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let progress = step as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let lr0 = 0.1;
        assert_eq!(cosine_lr(lr0, 0, 100), lr0);
        assert!((cosine_lr(lr0, 50, 100) - 0.05).abs() < 1e-12);
        assert_eq!(cosine_lr(lr0, 100, 100), 0.0);
        // Monotone decay.
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(lr0, s, 100);
            assert!(lr <= last + 1e-15);
            last = lr;
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut params = vec![1.0, -2.0, 3.0];
        let before = params.clone();
        let mut adam = Adam::new(3);
        adam.step(&mut params, &[0.5, -0.1, 0.9], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize 0.5 * (x - 3)^2.
        let mut params = vec![0.0];
        let mut adam = Adam::new(1);
        for _ in 0..500 {
            let g = params[0] - 3.0;
            adam.step(&mut params, &[g], 0.05);
        }
        assert!((params[0] - 3.0).abs() < 0.05, "x = {}", params[0]);
    }
}
