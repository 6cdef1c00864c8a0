//! Adam with bias correction over a flat parameter vector.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
