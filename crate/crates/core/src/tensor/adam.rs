//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Learning rate used when a configuration does not name one.
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    /// First-moment buffers, one per parameter in store order.
    pub m: Vec<Vec<T>>,
    /// Second-moment buffers.
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every parameter from its stored gradient.
///
/// Gradients are left in place. Nothing is modified unless every parameter
/// has a gradient of the right length.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        match &p.grad {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.len() != p.tensor.len() || state.m[i].len() != g.len() => {
                return Err(Error::shape("adam_step", p.name.clone(), "gradient or moment length mismatch"));
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let cfg = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad.as_deref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn single(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::full(Shape::new(1, 1, 1, 1), value)).unwrap();
        s.get_mut(0).grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m = 0.1 g, v = 0.001 g^2, so mhat = g and vhat = g^2 and the
        // step is lr * g / (|g| + eps).
        for g in [0.37, -2.5, 1e-3] {
            let mut store = single(1.0, Some(g));
            let mut st = AdamState::new(&store, AdamConfig::default());
            adam_step(&mut store, &mut st).unwrap();
            let expected = 1.0 - 1e-4 * g / (g.abs() + 1e-8);
            let got = store.get(0).tensor.item();
            assert!((got - expected).abs() < 1e-15, "g={g}: {got} vs {expected}");
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_bitwise_unchanged() {
        let mut store = single(0.123456789, Some(0.0));
        let mut st = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(0).tensor.item().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn missing_gradient_names_parameter_and_mutates_nothing() {
        let mut store = single(1.0, None);
        let mut st = AdamState::new(&store, AdamConfig::default());
        match adam_step(&mut store, &mut st) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 1e-4);
        let parsed: AdamConfig = toml::from_str("beta1 = 0.8").unwrap();
        assert_eq!(parsed.lr, 1e-4);
    }

    #[test]
    fn gradients_untouched_by_step() {
        let mut store = single(1.0, Some(0.5));
        let mut st = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(0).grad.as_deref(), Some(&[0.5][..]));
    }
}
