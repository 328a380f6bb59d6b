use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily on
/// the first step, one pair per parameter in registration order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure_state(&mut self, params: &ParamStore<T>) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
    }

    /// One update using the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for id in params.ids() {
            let p = params.get(id);
            if let Some((index, value)) = p.grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    name: p.name.clone(),
                    index,
                    value: value.as_f64(),
                });
            }
        }
        self.ensure_state(params);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (k, id) in params.ids().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                data[j] = data[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (k, p) in params.iter().enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(k), self.v.get(k)) {
                let shape = p.value.shape().to_vec();
                out.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), m.clone()).unwrap()));
                out.push((format!("adam.v.{}", p.name), Tensor::new(shape, v.clone()).unwrap()));
            }
        }
        out
    }

    /// Restore from [`state_tensors`](Self::state_tensors) output.
    pub fn restore(
        &mut self,
        params: &ParamStore<T>,
        step: u64,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<()> {
        self.step = step;
        if step == 0 {
            self.m.clear();
            self.v.clear();
            return Ok(());
        }
        let find = |name: &str| -> Result<Vec<T>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing optimizer state `{name}`")))
        };
        self.m = params.iter().map(|p| find(&format!("adam.m.{}", p.name))).collect::<Result<_>>()?;
        self.v = params.iter().map(|p| find(&format!("adam.v.{}", p.name))).collect::<Result<_>>()?;
        Ok(())
    }
}

/// Triangular schedule: linear warmup to `max_lr` at step
/// `ceil(warmup_frac * total_steps)`, then linear decay to zero at
/// `total_steps`. Steps are 1-based.
pub fn triangular_lr(step: u64, total_steps: u64, warmup_frac: f64, max_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((warmup_frac * total_steps as f64).ceil() as u64).clamp(1, total_steps);
    let step = step.min(total_steps);
    if step <= warmup {
        max_lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        max_lr
    } else {
        max_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Step at which [`triangular_lr`] peaks.
pub fn triangular_peak(total_steps: u64, warmup_frac: f64) -> u64 {
    ((warmup_frac * total_steps as f64).ceil() as u64).clamp(1, total_steps.max(1))
}
