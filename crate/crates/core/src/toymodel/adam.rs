use super::params::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam step with decoupled weight decay.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &ModelParams,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(grads.tensors());
    for (((p, m), v), g) in tensors {
        let pv = p.values_mut();
        let mv = m.values_mut();
        let vv = v.values_mut();
        for i in 0..pv.len() {
            let gi = g.values()[i];
            mv[i] = BETA1 * mv[i] + (1.0 - BETA1) * gi;
            vv[i] = BETA2 * vv[i] + (1.0 - BETA2) * gi * gi;
            let mhat = mv[i] / c1;
            let vhat = vv[i] / c2;
            pv[i] -= lr * (mhat / (vhat.sqrt() + EPS) + weight_decay * pv[i]);
        }
    }
}
