use crate::encoder::{decays, EncoderParams};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
    pub weight_decay: f64,
    /// Tensor-name prefixes left untouched by updates.
    pub frozen: Vec<String>,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            weight_decay,
            frozen: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, frozen: &[String]) -> Self {
        self.frozen = frozen.to_vec();
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|f| is_prefix_of(f, name))
    }
}

/// True when `prefix` names `name` or one of its enclosing groups, so
/// `layers.0` covers `layers.0.wq` but not `layers.01`.
pub fn is_prefix_of(prefix: &str, name: &str) -> bool {
    name == prefix || name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.'))
}

/// One AdamW update of a flat tensor. `t` is the 1-based step count.
/// The decay term multiplies the weights by `1 - lr·wd` before the adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, wd: f64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] *= 1.0 - lr * wd;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut EncoderParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Applies one AdamW step at learning rate `lr`. Weight decay skips biases
/// and layer-norm parameters; frozen tensors are skipped entirely.
pub fn optimizer_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let names = params.tensor_names();
    let g = grads.named_tensors();
    if g.len() != names.len() {
        return Err(Error::Config("gradient and parameter layouts differ".into()));
    }
    for (name, t) in &g {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step;
    let weight_decay = state.weight_decay;
    let frozen: Vec<bool> = names.iter().map(|n| state.is_frozen(n)).collect();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((((p, (_, g)), m), v), name), frozen) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs).zip(&names).zip(frozen) {
        if p.dim() != g.dim() {
            return Err(Error::Config(format!("gradient shape mismatch for {name}")));
        }
        if frozen {
            continue;
        }
        let wd = if decays(name) { weight_decay } else { 0.0 };
        adamw_update(
            p.as_slice_mut().expect("standard layout"),
            g.as_slice().expect("standard layout"),
            m.as_slice_mut().expect("standard layout"),
            v.as_slice_mut().expect("standard layout"),
            t,
            lr,
            wd,
        );
    }
    Ok(())
}
