use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Moment estimates carried between Adam steps.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        })
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// Applies one update to every parameter from its stored gradient.
    /// Gradients are left in place; call [`Adam::zero_grad`] afterwards.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        let grads = params
            .iter()
            .map(|(name, p)| p.grad().ok_or_else(|| Error::MissingGrad(name.clone())))
            .collect::<Result<Vec<_>>>()?;

        if self.state.m.is_empty() {
            self.state.m = params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.numel()])
                .collect();
            self.state.v = self.state.m.clone();
        } else if self.state.m.len() != params.len()
            || params
                .iter()
                .zip(&self.state.m)
                .any(|((_, p), m)| p.numel() != m.len())
        {
            return Err(Error::Config(
                "parameter set changed between optimizer steps".into(),
            ));
        }

        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();

        for (((_, p), g), (m, v)) in params
            .iter()
            .zip(&grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn zero_grad(params: &[(String, Tensor<T>)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}
