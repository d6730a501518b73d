//! Adam with coupled (L2) weight decay and AdamW with decoupled weight decay.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDecay {
    /// Added to the gradient before the moment updates (classic Adam).
    Coupled(f64),
    /// Applied directly to the weights (AdamW).
    Decoupled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: WeightDecay,
}

pub struct Adam {
    params: AdamParams,
    vars: Vec<(Var, Tensor, Tensor)>,
    step: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, params: AdamParams) -> Result<Self> {
        let vars = vars
            .into_iter()
            .map(|v| {
                let m = v.zeros_like()?;
                let s = v.zeros_like()?;
                Ok((v, m, s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam { params, vars, step: 0 })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step);
        let bc2 = 1.0 - p.beta2.powi(self.step);
        for (var, m, s) in self.vars.iter_mut() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached, so moment updates never extend the autograd graph
            let theta = var.as_tensor().detach();
            let g = g.detach();
            let g = match p.weight_decay {
                WeightDecay::Coupled(wd) if wd > 0.0 => (g + (&theta * wd)?)?,
                _ => g,
            };
            *m = ((&*m * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            *s = ((&*s * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let update = ((&*m / bc1)? / ((&*s / bc2)?.sqrt()? + p.eps)?)?;
            let base = match p.weight_decay {
                WeightDecay::Decoupled(wd) if wd > 0.0 => (&theta * (1.0 - p.lr * wd))?,
                _ => theta,
            };
            var.set(&(base - (update * p.lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // with bias correction the first Adam step is lr * g / (|g| + eps)
        let dev = Device::Cpu;
        let v = Var::new(&[1.0f32, -2.0], &dev).unwrap();
        let mut opt = Adam::new(
            vec![v.clone()],
            AdamParams { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: WeightDecay::Coupled(0.0) },
        )
        .unwrap();
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 1.9).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient_signal() {
        let dev = Device::Cpu;
        let v = Var::new(&[2.0f32], &dev).unwrap();
        let mut opt = Adam::new(
            vec![v.clone()],
            AdamParams { lr: 0.1, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: WeightDecay::Decoupled(0.5) },
        )
        .unwrap();
        let zero = Tensor::zeros(1, candle_core::DType::F32, &dev).unwrap();
        let loss = v.as_tensor().mul(&zero).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = v.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((got - 2.0 * (1.0 - 0.05)).abs() < 1e-6, "{got}");
    }
}
