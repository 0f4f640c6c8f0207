//! AdamW with decoupled weight decay and a warmup-free linear decay schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step_count: u64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: HashMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(lr0: f64, weight_decay: f64) -> Self {
        OptimizerState {
            step_count: 0,
            lr0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            moments: HashMap::new(),
        }
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before updating any parameter of that step.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// AdamW update for one named parameter. Parameters without a gradient
    /// are left untouched, including their weight decay.
    pub fn update(&mut self, name: &str, t: &mut Tensor, lr: f64) {
        let Some(grad) = t.grad.as_ref() else { return };
        debug_assert!(self.step_count > 0, "begin_step before update");
        let n = t.data.len();
        let slot = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, &g) in grad.iter().enumerate() {
            // Decoupled decay: applied to the value, not folded into g.
            t.data[i] -= lr * self.weight_decay * t.data[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            t.data[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// One AdamW step over a set of named parameters.
pub fn adamw_step<'a>(
    state: &mut OptimizerState,
    params: impl Iterator<Item = (String, &'a mut Tensor)>,
    lr: f64,
) {
    state.begin_step();
    for (name, t) in params {
        state.update(&name, t, lr);
    }
}

/// lr(step) = lr0 * (1 - step / total_steps), no warmup.
pub fn linear_schedule(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("linear_schedule: total_steps must be > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "linear_schedule: step {step} past total_steps {total_steps}"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}
