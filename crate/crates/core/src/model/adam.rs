//! Adam with bias correction.

use crate::diff::NamedTensors;
use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: NamedTensors,
    second: NamedTensors,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        let zeros: NamedTensors = params
            .named()
            .into_iter()
            .map(|(k, t)| {
                let z = Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("same shape");
                (k, z)
            })
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &NamedTensors,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter `{name}`"))
        })?;
        if p.shape() != g.shape() || state.first.get(name).map(Tensor::shape) != Some(g.shape()) {
            return Err(Error::InvalidArgument(format!(
                "gradient `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let m = state.first.get_mut(name).expect("checked");
        let v = state.second.get_mut(name).expect("checked");
        let mut p = params.get(name).expect("checked").clone();
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
        params.set(name, p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn scalar_model(w: f64) -> MlpParams {
        MlpParams::from_layers(
            Activation::Relu,
            0.0,
            vec![Tensor::scalar(w)],
            vec![Tensor::scalar(0.0)],
        )
        .unwrap()
    }

    fn grad(w: f64) -> NamedTensors {
        let mut g = NamedTensors::new();
        g.insert("w0".into(), Tensor::scalar(w));
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_model(0.7);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p.weights()[0].item(), 0.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = scalar_model(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &grad(0.5), &mut s).unwrap();
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.weights()[0].item() - expected).abs() < 1e-18);
        assert!((p.weights()[0].item() + 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_trace() {
        // f(w) = w^2 from w = 1; g = 2w.
        let mut p = scalar_model(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &grad(2.0), &mut s).unwrap();
        // step 1: m = 0.2, v = 0.004, mhat = 2, vhat = 4 -> w1 = 1 - 0.001*2/(2+1e-8)
        let w1 = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p.weights()[0].item() - w1).abs() < 1e-12);
        let g2 = 2.0 * w1;
        adam_step(&mut p, &grad(g2), &mut s).unwrap();
        let m2 = 0.9 * 0.2 + 0.1 * g2;
        let v2 = 0.999 * 0.004 + 0.001 * g2 * g2;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.998001);
        let w2 = w1 - 0.001 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.weights()[0].item() - w2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_model(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = NamedTensors::new();
        g.insert("w0".into(), Tensor::zeros(2, 1));
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.step(), 0);
    }
}
