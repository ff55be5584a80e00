use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam state for every parameter of a [`ParamStore`], plus the learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// First moments, one vector per store entry (empty for frozen entries).
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, peak_lr: f64, warmup_ratio: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("steps", "total steps must be positive"));
        }
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::config("warmup_ratio", format!("{warmup_ratio} is outside [0, 1)")));
        }
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", format!("{peak_lr} is not a finite non-negative rate")));
        }
        let state = |e: &crate::params::ParamEntry| {
            if e.trainable {
                vec![0.0; e.tensor.numel()]
            } else {
                Vec::new()
            }
        };
        Ok(Self {
            first: store.entries().iter().map(state).collect(),
            second: store.entries().iter().map(state).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            peak_lr,
            warmup_ratio,
            total_steps,
        })
    }

    /// `round(warmup_ratio · total_steps)`.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup from 0 to `peak_lr` over the warmup steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, state: &OptimizerState) -> Result<f64> {
    let total = state.total_steps;
    if total == 0 {
        return Err(Error::config("steps", "total steps must be positive"));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} is past the last step {total}")));
    }
    let warmup = state.warmup_steps();
    if warmup >= total {
        return Err(Error::config(
            "warmup_ratio",
            format!("{warmup} warmup steps leave no decay phase in {total} steps"),
        ));
    }
    let peak = state.peak_lr;
    Ok(if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    })
}

/// One bias-corrected Adam update at `lr_at(state.step)`.
///
/// `grads[i]` belongs to store entry `i`; `None` counts as a zero gradient.
/// Frozen entries are skipped entirely.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<&[f64]>], state: &mut OptimizerState) -> Result<f64> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients and {} moment slots for {} parameters", grads.len(), state.first.len(), store.len()),
        ));
    }
    let lr = lr_at(state.step, state)?;
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, grad) in grads.iter().enumerate() {
        let entry = store.entry_mut(i);
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.numel();
        if let Some(gr) = grad {
            if gr.len() != n {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: gradient has {} values, parameter has {n}", entry.name, gr.len()),
                ));
            }
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        if m.len() != n {
            return Err(Error::shape("adam_step", format!("{}: stale optimizer slot", entry.name)));
        }
        let data = entry.tensor.data_mut();
        for j in 0..n {
            let gj = grad.map_or(0.0, |gr| gr[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            data[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x), ParamGroup::Decoder);
        s.insert("frozen", Tensor::scalar(3.0), ParamGroup::Visual);
        s.set_trainable(&[ParamGroup::Decoder].into());
        s
    }

    #[test]
    fn schedule_endpoints() {
        let s = OptimizerState::new(&ParamStore::new(), 1e-5, 0.03, 1000).unwrap();
        assert_eq!(s.warmup_steps(), 30);
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(30, &s).unwrap(), 1e-5);
        assert_eq!(lr_at(1000, &s).unwrap(), 0.0);
        assert!(lr_at(1001, &s).is_err());
        assert!(OptimizerState::new(&ParamStore::new(), 1e-5, 0.03, 0).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.5);
        let mut st = OptimizerState::new(&store, 0.1, 0.0, 10).unwrap();
        let lr = adam_step(&mut store, &[Some(&[1.0]), Some(&[7.0])], &mut st).unwrap();
        assert_eq!(lr, 0.1);
        let x = store.get("x").unwrap().data()[0];
        assert!((x - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(store.get("frozen").unwrap().data()[0], 3.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.5);
        let mut st = OptimizerState::new(&store, 0.1, 0.0, 10).unwrap();
        adam_step(&mut store, &[Some(&[0.0]), None], &mut st).unwrap();
        assert_eq!(store.get("x").unwrap().data()[0], 0.5);
        assert_eq!(st.step, 1);
    }
}
