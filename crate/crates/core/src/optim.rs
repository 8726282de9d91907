//! Adam with inspectable state, so optimizer moments can be checkpointed.

use std::collections::BTreeMap;

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i64,
    params: Vec<(String, Tensor)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64) -> Self {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, params, m, v }
    }

    pub fn steps(&self) -> i64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        tch::no_grad(|| {
            for ((_, p), (m, v)) in self.params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                m.copy_(&(&*m * b1 + &g * (1.0 - b1)));
                v.copy_(&(&*v * b2 + g.square() * (1.0 - b2)));
                let update = (&*m / c1) / ((&*v / c2).sqrt() + eps) * lr;
                let _ = p.g_sub_(&update);
            }
        });
    }

    /// Moments and the step counter, keyed under `prefix`.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::from_slice(&[self.step]))];
        for ((name, _), (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m.{name}"), m.shallow_clone()));
            out.push((format!("{prefix}v.{name}"), v.shallow_clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let step = tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{prefix}step`")))?;
        self.step = step.to_kind(Kind::Int64).int64_value(&[0]);
        for ((name, _), (m, v)) in self.params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (slot, dst) in [("m", m), ("v", v)] {
                let key = format!("{prefix}{slot}.{name}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if src.size() != dst.size() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                }
                dst.copy_(src);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    #[test]
    fn minimizes_quadratic() {
        let x = Tensor::from_slice(&[3.0f32, -2.0]).set_requires_grad(true);
        let mut opt = Adam::new(vec![("x".into(), x.shallow_clone())], 0.1);
        for _ in 0..500 {
            opt.zero_grad();
            x.square().sum(Kind::Float).backward();
            opt.step();
        }
        assert!(f64::try_from(x.abs().max()).unwrap() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = Tensor::zeros([1], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        let mut opt = Adam::new(vec![("x".into(), x.shallow_clone())], 0.5);
        (&x * 3.0).sum(Kind::Float).backward();
        opt.step();
        assert!((x.double_value(&[0]) + 0.5).abs() < 1e-6);
    }
}
