use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::detector::{Gradients, ParameterStore};
use crate::error::{Error, Result};

/// SGD with momentum and L2 weight decay: `v ← μv + g + λp`, `p ← p − η·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Updates every trainable tensor. A gradient for a frozen or unknown tensor is an
    /// error and leaves the store untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.param(name)?;
            if !p.trainable {
                return Err(Error::FrozenUpdate(name.clone()));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has shape {:?}, tensor has {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
        for name in names {
            let p = params.param_mut(&name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let (mu, wd) = (self.momentum, self.weight_decay);
            match grads.get(&name) {
                Some(g) => ndarray::Zip::from(&mut *v)
                    .and(g)
                    .and(&p.value)
                    .for_each(|v, &g, &p| *v = mu * *v + g + wd * p),
                None => ndarray::Zip::from(&mut *v).and(&p.value).for_each(|v, &p| *v = mu * *v + wd * p),
            }
            ndarray::Zip::from(&mut p.value).and(&*v).for_each(|p, &v| *p -= lr * v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::empty(crate::detector::Stage::Base);
        s.insert("a", arr1(&[1.0, -2.0]).into_dyn(), true);
        s.insert("b", arr1(&[3.0]).into_dyn(), false);
        s
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut s = store();
        let mut opt = Sgd::new(0.9, 0.0);
        let mut g = Gradients::new();
        g.insert("a".into(), arr1(&[1.0, 1.0]).into_dyn());
        opt.step(&mut s, &g, 0.1).unwrap();
        opt.step(&mut s, &g, 0.1).unwrap();
        // v1 = 1, v2 = 1.9; total displacement 0.1 + 0.19.
        let a = s.get("a").unwrap();
        assert!((a[0] - (1.0 - 0.29)).abs() < 1e-12);
        assert!((a[1] - (-2.0 - 0.29)).abs() < 1e-12);
    }

    #[test]
    fn frozen_gradient_rejected_without_mutation() {
        let mut s = store();
        let before = s.clone();
        let mut g = Gradients::new();
        g.insert("a".into(), arr1(&[1.0, 1.0]).into_dyn());
        g.insert("b".into(), arr1(&[1.0]).into_dyn());
        let err = Sgd::new(0.9, 1e-4).step(&mut s, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::FrozenUpdate(n) if n == "b"));
        assert_eq!(s, before);
    }

    #[test]
    fn zero_rate_is_fixpoint() {
        let mut s = store();
        let before = s.clone();
        let mut g = Gradients::new();
        g.insert("a".into(), arr1(&[5.0, -7.0]).into_dyn());
        Sgd::new(0.9, 1e-4).step(&mut s, &g, 0.0).unwrap();
        assert!(s.tensor_bits_equal(&before, "a"));
    }
}
