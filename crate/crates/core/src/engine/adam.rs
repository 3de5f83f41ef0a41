use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { step: 0, m, v }
    }
}

/// One Adam update with bias correction. Weight decay is decoupled:
/// `p ← p − lr·wd·p` precedes the moment update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            pd[j] -= cfg.lr * cfg.weight_decay * pd[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pd[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, &AdamConfig::default()).unwrap();
        let moved = 1.0 - p.data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_decreases_each_step() {
        let mut w = Tensor::scalar(1.0);
        let mut state = AdamState::new([&w]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut f = 1.0;
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            adam_step(&mut [&mut w], &[g], &mut state, &cfg).unwrap();
            let next = w.data()[0].powi(2);
            assert!(next < f);
            f = next;
        }
    }

    #[test]
    fn decoupled_decay_precedes_update() {
        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, &cfg).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }
}
