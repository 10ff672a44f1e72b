//! SGD with momentum and coupled weight decay, plus the step learning-rate schedule.

/// Heavy-ball SGD: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: vec![0.0; num_params] }
    }

    /// Applies one descent update. Callers doing ascent negate `grads`; weight
    /// decay always shrinks.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        debug_assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= lr * *v;
        }
    }
}

/// Learning rate at `epoch`: `base * decay^(number of milestones <= epoch)`.
pub fn step_lr(base: f64, decay: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base * decay.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule_divides_by_ten_at_milestones() {
        let lr = |e| step_lr(0.01, 0.1, &[100, 150], e);
        assert_eq!(lr(0), 0.01);
        assert_eq!(lr(99), 0.01);
        assert!((lr(100) - 0.001).abs() < 1e-15);
        assert!((lr(149) - 0.001).abs() < 1e-15);
        assert!((lr(150) - 0.0001).abs() < 1e-15);
        assert!((lr(199) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0f32, -2.0];
        let mut sgd = Sgd::new(2, 0.9, 5e-4);
        sgd.step(&mut p, &[0.5, 0.5], 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![0.0f32];
        let mut sgd = Sgd::new(1, 0.9, 0.0);
        sgd.step(&mut p, &[1.0], 0.1);
        sgd.step(&mut p, &[1.0], 0.1);
        // v1 = 1, v2 = 1.9
        assert!((p[0] + 0.29).abs() < 1e-6);
    }
}
