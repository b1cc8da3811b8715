//! Adam with linear learning-rate warmup, over flat parameter blocks.

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(block_sizes: &[usize], lr: f64, warmup_steps: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }

    pub fn apply(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Exponential moving average of parameter blocks.
pub struct Ema {
    decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl Ema {
    pub fn new(init: Vec<Vec<f64>>, decay: f64) -> Ema {
        Ema { decay, shadow: init }
    }

    pub fn update(&mut self, params: &[Vec<f64>]) {
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for i in 0..s.len() {
                s[i] = self.decay * s[i] + (1.0 - self.decay) * p[i];
            }
        }
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.shadow
    }
}
