use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Polynomial learning-rate decay `base * (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "poly_lr needs 0 <= iter <= max_iter with max_iter > 0 (iter {iter}, max_iter {max_iter})"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `lr * weight_decay * param` is subtracted after the Adam step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// First/second moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> AdamState<T> {
    /// Fresh zero moments for the trainable entries of `params`.
    pub fn new(params: &ParamSet<T>) -> Self {
        let moments = params
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Moments {
                name: e.name.clone(),
                m: Tensor::zeros(e.value.shape()),
                v: Tensor::zeros(e.value.shape()),
            })
            .collect();
        AdamState { step: 0, moments }
    }

    /// One bias-corrected Adam update. `grads` must hold a gradient for every
    /// tracked parameter, looked up by name.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[(String, Tensor<T>)],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for mo in &self.moments {
            let g = grads
                .iter()
                .find(|(n, _)| *n == mo.name)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {:?}", mo.name)))?;
            let p = params
                .get(&mo.name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {:?}", mo.name)))?;
            if g.shape() != p.shape() || mo.m.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: param {:?}, grad {:?}", mo.name, p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let eps = T::of(cfg.eps);
        let lr_t = T::of(lr);
        let decay = T::of(lr * cfg.weight_decay);

        for mo in &mut self.moments {
            let g = &grads.iter().find(|(n, _)| *n == mo.name).expect("checked").1;
            let p = params.get_mut(&mo.name).expect("checked");
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let update = lr_t * m_hat / (v_hat.sqrt() + eps);
                *pi = *pi - update - decay * *pi;
            }
        }
        Ok(())
    }
}
