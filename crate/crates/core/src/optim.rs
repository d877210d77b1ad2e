//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments per parameter and the step counter.
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    /// State sized for every entry of `store` (buffers get empty slots).
    pub fn for_store(cfg: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        let sizes: Vec<usize> = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => e.value.numel(),
                ParamKind::Buffer => 0,
            })
            .collect();
        Self::new(cfg, &sizes)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step_tensors(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::dim(
                "adam",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g)?;
        }
        Ok(())
    }

    /// One update of every unfrozen trainable entry that received a gradient.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::dim(
                "adam",
                format!("{} grads for {} entries", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let e = store.entry_mut(i);
            if e.kind != ParamKind::Trainable || e.frozen {
                continue;
            }
            if let Some(g) = g {
                self.update(i, &mut e.value, g)?;
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if p.shape() != g.shape() || self.m[i].len() != p.numel() {
            return Err(TensorError::dim(
                "adam",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let wd = c.weight_decay > 0.0;
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if wd {
                *pv *= decay;
            }
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.0), &[3]).unwrap();
        adam.step_tensors(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap()];
        let g = vec![Tensor::from_f64(&[2], &[3.0, -0.25]).unwrap()];
        let mut adam = Adam::new(AdamConfig::new(0.01, 0.0), &[2]).unwrap();
        adam.step_tensors(&mut p, &g).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn descends_on_a_parabola() {
        // Plain Adam overshoots the minimum after about 1/lr steps, so the
        // magnitude decreases strictly only while approaching it.
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.0), &[1]).unwrap();
        let mut traj = vec![1.0f64];
        for _ in 0..20 {
            let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
            adam.step_tensors(&mut p, &g).unwrap();
            traj.push(p[0].data()[0].abs());
        }
        assert!(traj[..12].windows(2).all(|w| w[1] < w[0]));
        assert!(traj[20] < traj[0]);
        assert_eq!(adam.steps(), 20);
    }

    #[test]
    fn decoupled_decay_shrinks_with_zero_gradient() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let g = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.2), &[1]).unwrap();
        adam.step_tensors(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(Adam::<f32>::new(AdamConfig::new(0.0, 0.0), &[1]).is_err());
        let mut adam = Adam::<f32>::new(AdamConfig::new(0.1, 0.0), &[2]).unwrap();
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(adam.step_tensors(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
