//! SGD with optional gradient clipping, momentum, and cosine learning-rate
//! decay.

use super::Tensor;

fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn collect_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

/// One plain gradient step p <- p - lr * g, with optional global-norm
/// clipping. Consumes (zeroes) the gradients.
pub fn sgd_step(params: &[Tensor], lr: f64, clip: Option<f64>) {
    let mut grads = collect_grads(params);
    if let Some(max_norm) = clip {
        let norm = global_grad_norm(&grads);
        if norm > max_norm {
            let k = max_norm / norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= k;
                }
            }
        }
    }
    for (p, g) in params.iter().zip(&grads) {
        let mut value = p.to_vec();
        for (v, gi) in value.iter_mut().zip(g) {
            *v -= lr * gi;
        }
        p.set_value(&value);
        p.zero_grad();
    }
}

/// Momentum SGD with cosine decay from `base_lr` to zero over `total_steps`.
pub struct SgdOptimizer {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    pub total_steps: usize,
    step_count: usize,
}

impl SgdOptimizer {
    pub fn new(
        params: Vec<Tensor>,
        base_lr: f64,
        momentum: f64,
        clip: Option<f64>,
        total_steps: usize,
    ) -> SgdOptimizer {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        SgdOptimizer {
            params,
            velocity,
            base_lr,
            momentum,
            clip,
            total_steps: total_steps.max(1),
            step_count: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = (self.step_count as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    pub fn step(&mut self) {
        let mut grads = collect_grads(&self.params);
        if let Some(max_norm) = self.clip {
            let norm = global_grad_norm(&grads);
            if norm > max_norm {
                let k = max_norm / norm;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= k;
                    }
                }
            }
        }
        let lr = self.current_lr();
        for ((p, g), vel) in self.params.iter().zip(&grads).zip(&mut self.velocity) {
            let mut value = p.to_vec();
            for ((v, gi), vi) in value.iter_mut().zip(g).zip(vel.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *v -= lr * *vi;
            }
            p.set_value(&value);
            p.zero_grad();
        }
        self.step_count += 1;
    }
}
