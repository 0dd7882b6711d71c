use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    RmsProp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter used for Adam bias correction.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let (beta1, beta2, eps) = match kind {
            OptimizerKind::Adam => (0.9, 0.999, 1e-8),
            // beta2 doubles as the RMSProp decay rate
            OptimizerKind::RmsProp => (0.0, 0.9, 1e-8),
        };
        Self {
            kind,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                match self.kind {
                    OptimizerKind::Adam => {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.data[j] -= lr * mh / (vh.sqrt() + self.eps);
                    }
                    OptimizerKind::RmsProp => {
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        p.data[j] -= lr * g[j] / (v[j].sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::params::{init_rng, Init};

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", vec![1], Init::Constant(x), &mut init_rng(0));
        s
    }

    #[test]
    fn adam_first_steps_on_quadratic() {
        // f(x) = x², g = 2x. The first bias-corrected Adam step has magnitude
        // lr·|g|/(|g| + eps) ≈ lr regardless of the gradient scale.
        let mut p = store(3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &[vec![6.0]], 0.1).unwrap();
        let want = 3.0 - 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((p.get(crate::toynet::ParamId(0)).data[0] - want).abs() < 1e-15);

        let x1 = want;
        let g1 = 2.0 * x1;
        opt.step(&mut p, &[vec![g1]], 0.1).unwrap();
        let m = 0.9 * (0.1 * 6.0) + 0.1 * g1;
        let v = 0.999 * (0.001 * 36.0) + 0.001 * g1 * g1;
        let want2 = x1 - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.get(crate::toynet::ParamId(0)).data[0] - want2).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        for kind in [OptimizerKind::Adam, OptimizerKind::RmsProp] {
            let mut p = store(-0.3711);
            let before = p.clone();
            let mut opt = Optimizer::new(kind, &p);
            for _ in 0..5 {
                opt.step(&mut p, &[vec![1.7]], 0.0).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn rmsprop_step() {
        let mut p = store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::RmsProp, &p);
        opt.step(&mut p, &[vec![2.0]], 0.01).unwrap();
        let v: f64 = 0.1 * 4.0;
        let want = 1.0 - 0.01 * 2.0 / (v.sqrt() + 1e-8);
        assert!((p.get(crate::toynet::ParamId(0)).data[0] - want).abs() < 1e-15);
    }
}
