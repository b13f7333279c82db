use std::collections::BTreeMap;

use diffmath::Tensor;

use crate::error::{Error, Result};
use crate::fusenet::ParamStore;

/// `base * (1 - t / steps)^power`, zero from `t = steps` on.
pub fn poly_lr(base: f64, t: usize, steps: usize, power: f64) -> f64 {
    if t >= steps {
        return 0.0;
    }
    base * (1.0 - t as f64 / steps as f64).powf(power)
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2
/// (weights), not to biases or token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let decay = if p.rank() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusenet::{Init, ParamSpec};

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 100, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 100, 100, 0.9), 0.0);
        assert!(poly_lr(0.1, 50, 100, 0.9) < 0.1);
    }

    #[test]
    fn step_descends_on_square() {
        let spec = [ParamSpec {
            name: "x".into(),
            shape: vec![1],
            init: Init::Normal(1.0),
        }];
        let mut p = ParamStore::init(&spec, 3).unwrap();
        let x0 = p.get("x").unwrap().item();
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x0))]);
        AdamW::new(0.0).step(&mut p, &grads, 0.01).unwrap();
        let x1 = p.get("x").unwrap().item();
        assert!(x1 * x1 < x0 * x0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let spec = [ParamSpec {
            name: "enc.w".into(),
            shape: vec![2],
            init: Init::Zeros,
        }];
        let mut p = ParamStore::init(&spec, 0).unwrap();
        let grads = BTreeMap::from([(
            "enc.w".to_string(),
            Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap(),
        )]);
        let err = AdamW::new(0.0).step(&mut p, &grads, 0.01).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
