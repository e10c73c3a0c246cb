use crate::nn::Params;
use crate::{Error, Result};

/// Bias-corrected Adam over every tensor of a [`Params`] set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(params: &Params, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_defaults(params: &Params) -> Self {
        Self::new(params, Self::DEFAULT_LR, 0.9, 0.999, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`;
    /// `None` means zero. Nothing is modified if any gradient is NaN.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<&[f64]>]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        for (id, g) in params.ids().zip(grads) {
            if let Some(i) = g.and_then(|g| g.iter().position(|x| x.is_nan())) {
                return Err(Error::Numeric(format!(
                    "NaN gradient in parameter {} at index {i}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in params.ids().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let gj = grads[k].map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
