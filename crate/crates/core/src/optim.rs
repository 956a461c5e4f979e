//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{shape_err, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len()
        || param.len() != state.first_moment.len()
        || param.len() != state.second_moment.len()
    {
        return Err(shape_err!(
            "adam: param {} grad {} moments {}/{}",
            param.len(),
            grad.len(),
            state.first_moment.len(),
            state.second_moment.len()
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        param[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`], with one [`AdamState`] per parameter.
///
/// A parameter's state only advances when it is actually updated, so
/// parameters outside the selected groups keep both their values and their
/// moments untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            states: store
                .iter()
                .map(|(_, p)| AdamState::new(p.value.numel()))
                .collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn state(&self, index: usize) -> &AdamState {
        &self.states[index]
    }

    /// Updates every parameter whose group is in `groups` and that received a
    /// gradient. Parameters rejected by `filter` are skipped as well.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        groups: &[ParamGroup],
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (id, grad) in grads.iter() {
            let (group, name) = {
                let p = store.get(id);
                (p.group, p.name.clone())
            };
            if !groups.contains(&group) || !filter(&name) {
                continue;
            }
            let value: &mut Tensor = store.value_mut(id);
            adam_step(
                value.data_mut(),
                grad.data(),
                &mut self.states[id.index()],
                &self.config,
            )?;
        }
        Ok(())
    }
}
