//! Adam over a fixed set of flat parameter slots.

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, slot_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected Adam update of `param` in slot `slot`.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.max(1));
        let c2 = 1.0 - b2.powi(self.t.max(1));
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
