use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Owned exclusively by the training loop.
pub struct Optimizer {
    spec: OptimizerSpec,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.spec {
                OptimizerSpec::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                    ndarray::Zip::from(&mut *v)
                        .and(g)
                        .and(&*p)
                        .for_each(|v, &g, &w| *v = momentum * *v + g + weight_decay * w);
                    p.scaled_add(-lr, v);
                }
                OptimizerSpec::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    ndarray::Zip::from(&mut *p)
                        .and(&mut *m)
                        .and(&mut *v)
                        .and(g)
                        .for_each(|w, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn quad_grad(p: &Params) -> BTreeMap<String, Tensor> {
        // f(w) = sum (w - 3)^2
        p.iter()
            .map(|(k, w)| (k.clone(), w.mapv(|x| 2.0 * (x - 3.0))))
            .collect()
    }

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        // adam's normalised step keeps it within about lr of the minimum
        for (spec, tol) in [(OptimizerSpec::default(), 1e-3), (OptimizerSpec::adam(), 2e-2)] {
            let mut p = Params::new();
            p.insert("w", array![0.0, 10.0].into_dyn());
            let mut opt = Optimizer::new(spec);
            for _ in 0..2000 {
                let g = quad_grad(&p);
                opt.step(&mut p, &g, 1e-2);
            }
            for &x in p.get("w").unwrap().iter() {
                assert!((x - 3.0).abs() < tol, "{spec:?} ended at {x}");
            }
        }
    }

    #[test]
    fn sgd_first_step_is_plain_gradient_step() {
        let mut p = Params::new();
        p.insert("w", array![1.0].into_dyn());
        let mut opt = Optimizer::new(OptimizerSpec::default());
        let g: BTreeMap<_, _> = [("w".to_string(), array![0.5].into_dyn())].into();
        opt.step(&mut p, &g, 0.1);
        assert!((p.get("w").unwrap()[[0]] - 0.95).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9*0.5 + 0.5 = 0.95
        assert!((p.get("w").unwrap()[[0]] - 0.855).abs() < 1e-15);
    }
}
