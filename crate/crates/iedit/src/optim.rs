//! Adam optimizer over named parameter buffers, plus global-norm gradient
//! clipping.

/// Scale a set of gradient buffers so their joint L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam with additive weight decay (decay folded into the gradient), applied
/// only to the parameters registered with this instance.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    /// First/second moment per registered slot, keyed by registration order.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Register a parameter slot of the given length; returns its slot id.
    pub fn register(&mut self, len: usize) -> usize {
        self.m.push(vec![0.0; len]);
        self.v.push(vec![0.0; len]);
        self.m.len() - 1
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before updating slots.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update to `param` for `slot` given `grad`.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len());
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..param.len() {
            let g = grad[i] + self.weight_decay * param[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut adam = Adam::new(0.1, 0.0);
        let slot = adam.register(1);
        let mut x = vec![0.0];
        for _ in 0..200 {
            adam.begin_step();
            let grad = vec![2.0 * (x[0] - 3.0)];
            adam.update(slot, &mut x, &grad);
        }
        assert!((x[0] - 3.0).abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn clip_grad_norm_scales_to_the_bound() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[1][0] - 0.8).abs() < 1e-12);
        // under the bound: untouched
        let mut small = vec![vec![0.1, 0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0], vec![0.1, 0.1]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut adam = Adam::new(0.05, 1.0);
        let slot = adam.register(1);
        let mut x = vec![1.0];
        for _ in 0..400 {
            adam.begin_step();
            // zero task gradient; only decay acts
            adam.update(slot, &mut x, &[0.0]);
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }
}
