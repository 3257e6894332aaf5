//! RMSprop without momentum or schedule.

use std::collections::BTreeMap;

use facesr_tensor::Tensor;

use crate::error::{config_err, Error, Result};
use crate::params::{is_buffer, ModelParams};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-8;

/// `v <- decay * v + (1 - decay) * g^2;  theta <- theta - lr * g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    /// Squared-gradient averages by parameter name.
    pub accumulators: BTreeMap<String, Tensor<f32>>,
}

impl RmsProp {
    pub fn new(decay: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
            return Err(config_err!("rmsprop decay must be in [0, 1) and eps positive"));
        }
        Ok(RmsProp {
            decay,
            eps,
            accumulators: BTreeMap::new(),
        })
    }

    /// Apply one update. Nothing is modified if any gradient is non-finite
    /// or does not match its parameter.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        if params.is_frozen() {
            return Err(config_err!("parameter set is frozen and cannot be optimized"));
        }
        for (name, g) in grads {
            if is_buffer(name) {
                return Err(config_err!("{name} is a running statistic, not a trainable parameter"));
            }
            let p = params
                .get(name)
                .ok_or_else(|| config_err!("gradient for unknown parameter {name}"))?;
            if p.shape() != g.shape() {
                return Err(config_err!("gradient shape {:?} does not match {name} {:?}", g.shape(), p.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name}; step aborted")));
            }
        }
        let (decay, eps) = (self.decay, self.eps);
        for (name, g) in grads {
            let acc = self
                .accumulators
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = params.get_mut(name).expect("checked above");
            for ((theta, v), &gi) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                let gi = gi as f64;
                let nv = decay * *v as f64 + (1.0 - decay) * gi * gi;
                *v = nv as f32;
                *theta = (*theta as f64 - lr * gi / (nv.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    /// Accumulators as a parameter-style map, for checkpoints.
    pub fn to_params(&self, fingerprint: u64) -> Result<ModelParams<f32>> {
        let mut p = ModelParams::new(fingerprint);
        for (name, t) in &self.accumulators {
            p.insert(name.clone(), t.clone())?;
        }
        Ok(p)
    }

    pub fn from_params(decay: f64, eps: f64, p: &ModelParams<f32>) -> Result<Self> {
        let mut opt = RmsProp::new(decay, eps)?;
        opt.accumulators = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> ModelParams<f32> {
        let mut p = ModelParams::new(1);
        p.insert("w", Tensor::full(vec![2], v)).unwrap();
        p
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::full(vec![2], v))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(0.7);
        let mut opt = RmsProp::new(DEFAULT_DECAY, DEFAULT_EPS).unwrap();
        opt.step(&mut p, &grad(0.0), 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7, 0.7]);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = one_param(0.7);
        let mut opt = RmsProp::new(DEFAULT_DECAY, DEFAULT_EPS).unwrap();
        let err = opt.step(&mut p, &grad(f32::NAN), 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(err.exit_code(), 4);
        assert_eq!(p.get("w").unwrap().data(), &[0.7, 0.7]);
        assert!(opt.accumulators.is_empty());
    }

    #[test]
    fn frozen_sets_are_refused() {
        let mut p = one_param(0.7).freeze();
        let mut opt = RmsProp::new(DEFAULT_DECAY, DEFAULT_EPS).unwrap();
        assert!(opt.step(&mut p, &grad(1.0), 1e-3).is_err());
    }
}
