use crate::error::{NumError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Rebuilds state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update over every parameter, then clears grads.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for id in params.ids() {
            if params.get(id).grad().is_none() {
                return Err(NumError::MissingGrad(params.name(id).to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NumError::invalid(
                "adam",
                format!("state holds {} parameters, store has {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let i = id.index();
            let t = params.get_mut(id);
            if self.m[i].len() != t.numel() {
                return Err(NumError::shape("adam", &[self.m[i].len()], t.shape()));
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, gi), mi), vi) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    fn quad_store(x0: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x0));
        s
    }

    fn quad_grad(store: &mut ParamStore) -> f64 {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = b[store.id("x").unwrap()];
        let d = tape.affine(x, 1.0, -2.0);
        let l = tape.mul(d, d).unwrap();
        let g = tape.backward(l).unwrap();
        store.accumulate(&b, &g).unwrap();
        tape.item(l)
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut s = quad_store(1.5);
        let id = s.id("x").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).values(), &[1.5]);
        assert_eq!(adam.step_count(), 1);
        assert!(s.get(id).grad().is_none());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = quad_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert_eq!(adam.step(&mut s), Err(NumError::MissingGrad("x".into())));
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut s = quad_store(-1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            quad_grad(&mut s);
            adam.step(&mut s).unwrap();
        }
        let x = s.get(s.id("x").unwrap()).values()[0];
        assert!((x - 2.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut s = quad_store(0.3);
            let mut adam = Adam::new(AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            });
            (0..50)
                .map(|_| {
                    quad_grad(&mut s);
                    adam.step(&mut s).unwrap();
                    s.get(s.id("x").unwrap()).values()[0].to_bits()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
