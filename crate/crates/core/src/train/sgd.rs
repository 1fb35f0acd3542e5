use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

/// Constant rate with optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base
        } else {
            self.base * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Momentum SGD with coupled L2 decay:
/// `g' = g + wd * p`, `v = mu * v + g'`, `p = p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update using the gradients stored on each parameter.
    /// Parameters without a gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let lr = T::lit(lr);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            debug_assert_eq!(v.len(), p.tensor.len());
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + wd * data[i];
                v[i] = mu * v[i] + g;
                data[i] = data[i] - lr * v[i];
            }
            p.tensor.grad = grad;
        }
    }
}
