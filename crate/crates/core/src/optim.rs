//! Adaptive-moment optimizer with decoupled weight decay. The decay is
//! scaled by the scheduled learning rate, so lr = 0 leaves parameters fully
//! unchanged.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: usize,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over named parameters. Parameters without a gradient entry
    /// see a zero gradient (moments decay, weight decay still applies).
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, tensor) in params {
            let n = tensor.numel();
            let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let zero;
            let g: &[f64] = match grads.get(&name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let data = tensor.data_mut();
            for i in 0..n {
                data[i] *= 1.0 - lr * self.weight_decay;
                entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g[i];
                entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &Moments)> {
        self.moments.iter()
    }

    pub fn restore_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(name.to_string(), Moments { m, v });
    }
}
