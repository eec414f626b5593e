use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Adam with L2 weight decay added to the gradient.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl std::fmt::Debug for Adam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Adam")
            .field("params", &self.vars.len())
            .field("t", &self.t)
            .finish()
    }
}

impl Adam {
    pub fn new(vars: Vec<Var>, beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            m,
            v,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor();
            let g = if self.weight_decay != 0.0 {
                (g + (theta * self.weight_decay)?)?
            } else {
                g.clone()
            };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment buffers as safetensors; the step count goes in the sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut map = HashMap::new();
        for i in 0..self.vars.len() {
            map.insert(format!("m.{i}"), self.m[i].clone());
            map.insert(format!("v.{i}"), self.v[i].clone());
        }
        candle_core::safetensors::save(&map, path.as_ref()).map_err(|e| Error::Write {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(&mut self, path: impl AsRef<Path>, steps_taken: u64) -> Result<()> {
        let dev = self.vars.first().map(|v| v.device().clone()).unwrap_or(candle_core::Device::Cpu);
        let map = candle_core::safetensors::load(path.as_ref(), &dev)?;
        for i in 0..self.vars.len() {
            for (key, slot) in [(format!("m.{i}"), &mut self.m[i]), (format!("v.{i}"), &mut self.v[i])] {
                let t = map
                    .get(&key)
                    .ok_or_else(|| Error::CorruptFile {
                        path: path.as_ref().to_path_buf(),
                        reason: format!("missing {key}"),
                    })?;
                if t.dims() != slot.dims() {
                    return Err(Error::Shape(format!("{key}: {:?} vs {:?}", t.dims(), slot.dims())));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.t = steps_taken;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn matches_hand_computed_first_steps() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.9, 0.999, 0.1).unwrap();
        let mut p = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.01).unwrap();
            for k in 0..2 {
                let g = 2.0 * p[k] + 0.1 * p[k];
                m[k] = 0.9 * m[k] + 0.1 * g;
                v[k] = 0.999 * v[k] + 0.001 * g * g;
                let mh = m[k] / (1.0 - 0.9f64.powi(t));
                let vh = v[k] / (1.0 - 0.999f64.powi(t));
                p[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = x.as_tensor().to_vec1::<f64>().unwrap();
        for k in 0..2 {
            assert!((got[k] - p[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = Var::ones(4, DType::F32, &Device::Cpu).unwrap();
        let mut a = Adam::new(vec![x.clone()], 0.9, 0.999, 0.0).unwrap();
        let g = x.as_tensor().sum_all().unwrap().backward().unwrap();
        a.step(&g, 0.1).unwrap();
        a.save(dir.path().join("o.safetensors")).unwrap();
        let mut b = Adam::new(vec![x.clone()], 0.9, 0.999, 0.0).unwrap();
        b.load(dir.path().join("o.safetensors"), a.steps_taken()).unwrap();
        assert_eq!(b.steps_taken(), 1);
        assert_eq!(a.m[0].to_vec1::<f32>().unwrap(), b.m[0].to_vec1::<f32>().unwrap());
        assert_eq!(a.v[0].to_vec1::<f32>().unwrap(), b.v[0].to_vec1::<f32>().unwrap());
    }
}
