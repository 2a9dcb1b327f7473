//! Named parameter storage with paired gradient buffers and Adam state.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mathx;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter multiplier on the step size handed to `adam_step`;
    /// lets the encoder and the classifier head train at different rates.
    lr_scale: f64,
}

pub struct ParamStore {
    entries: Vec<Entry>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        self.register_scaled(name, value, 1.0)
    }

    pub fn register_scaled(&mut self, name: &str, value: Tensor, lr_scale: f64) -> ParamId {
        let n = value.numel();
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: String::from(name),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr_scale,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// L2 norm over the concatenation of every gradient buffer.
    pub fn grad_l2_norm(&self) -> f64 {
        let sq: f64 = self
            .entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum();
        mathx::sqrt(sq)
    }

    /// One bias-corrected Adam update over every parameter, then zero the
    /// gradients. No-op on an empty store.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        if self.entries.is_empty() {
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm_powi(beta1, t);
        let bc2 = 1.0 - libm_powi(beta2, t);
        for e in &mut self.entries {
            let lr_eff = lr * e.lr_scale;
            let vals = e.value.values_mut();
            for i in 0..vals.len() {
                let g = e.grad[i];
                e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g;
                e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                vals[i] -= lr_eff * m_hat / (mathx::sqrt(v_hat) + eps);
                e.grad[i] = 0.0;
            }
        }
    }

    /// Grow a 2-D parameter by `added` zero rows; existing values, gradients
    /// and moments are preserved bit for bit, new state starts at zero.
    pub fn extend_rows(&mut self, id: ParamId, added: usize) -> Result<()> {
        let e = &mut self.entries[id.0];
        let shape = e.value.shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::Size(alloc::format!(
                "extend_rows on rank-{} parameter",
                shape.len()
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut vals = e.value.values().to_vec();
        vals.resize((rows + added) * cols, 0.0);
        e.value = Tensor::from_values(&[rows + added, cols], vals)?;
        e.grad.resize((rows + added) * cols, 0.0);
        e.m.resize((rows + added) * cols, 0.0);
        e.v.resize((rows + added) * cols, 0.0);
        Ok(())
    }
}

fn libm_powi(x: f64, n: i32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..n.unsigned_abs() {
        acc *= x;
    }
    if n < 0 {
        1.0 / acc
    } else {
        acc
    }
}

/// Compare the gradient buffers currently held in `store` against central
/// finite differences of `loss_fn`, returning the worst relative error.
///
/// The caller runs forward + backward once so `store` holds the analytic
/// gradient; `loss_fn` must evaluate the same loss as a pure function of the
/// parameter values. Absolute differences below 1e-7 count as zero error so
/// coordinates with (near-)zero gradient do not produce spurious blowups.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, h: f64) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(CoreError::Precondition(alloc::format!(
            "grad_check step must be positive, got {h}"
        )));
    }
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(CoreError::NonFinite("grad_check loss"));
    }
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        let id = ParamId(id);
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).values()[i];
            store.value_mut(id).values_mut()[i] = orig + h;
            let up = loss_fn(store)?;
            store.value_mut(id).values_mut()[i] = orig - h;
            let down = loss_fn(store)?;
            store.value_mut(id).values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(CoreError::NonFinite("grad_check loss"));
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = store.grad(id)[i];
            let diff = (analytic - numeric).abs();
            let rel = if diff < 1e-7 {
                0.0
            } else {
                diff / analytic.abs().max(numeric.abs())
            };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
