use super::Tensor;
use crate::error::{sizing, Result};

/// Adam hyperparameters. Learning rates come from the caller.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A zero gradient leaves the parameter
/// unchanged as long as its moments are still zero.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(sizing(
            "adam_step: parameter, gradient and state counts differ",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(sizing(format!(
                "adam_step: gradient {i} has {} values for {} parameters",
                g.len(),
                p.numel()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![Tensor::from_vec(vec![0.5, -1.0, 3.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(
                &mut params,
                &[vec![0.0; 3]],
                &mut state,
                &AdamConfig::with_lr(1e-3),
            )
            .unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step exactly lr * sign(g) (up to eps)
        let mut params = vec![Tensor::from_vec(vec![1.0, 1.0])];
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[vec![2.0, -0.5]],
            &mut state,
            &AdamConfig::with_lr(0.1),
        )
        .unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((params[0].data()[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![3.0, -2.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = params[0].data().iter().map(|w| 2.0 * w).collect();
            adam_step(&mut params, &[g], &mut state, &cfg).unwrap();
        }
        assert!(params[0].data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(
            &mut params,
            &[vec![1.0, 2.0]],
            &mut state,
            &AdamConfig::with_lr(0.1)
        )
        .is_err());
    }
}
