//! Adam with bias correction.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::nn::ParamBlock;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: u64,
    first: Vec<Array<S>>,
    second: Vec<Array<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: &AdamConfig) -> Self {
        Self {
            lr: S::lit(config.lr),
            beta1: S::lit(config.beta1),
            beta2: S::lit(config.beta2),
            eps: S::lit(config.eps),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> S {
        self.lr
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or mis-shaped.
    pub fn step(&mut self, params: &mut [ParamBlock<S>], grads: &[Array<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameter blocks but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::Invalid("optimizer bound to a different model".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let one = S::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let data = p.value.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (one - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (one - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(v: f64) -> Vec<ParamBlock<f64>> {
        vec![ParamBlock {
            name: "x".into(),
            value: Array::scalar(v),
        }]
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut adam = Adam::<f64>::new(&AdamConfig::default());
        let mut p = block(1.25);
        for _ in 0..10 {
            adam.step(&mut p, &[Array::scalar(0.0)]).unwrap();
        }
        assert_eq!(p[0].value.item(), 1.25);
        assert_eq!(adam.steps_taken(), 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3, -2.0, 50.0] {
            let mut adam = Adam::<f64>::new(&AdamConfig::default());
            let mut p = block(0.0);
            adam.step(&mut p, &[Array::scalar(g)]).unwrap();
            let delta = p[0].value.item();
            let expected = -4e-4 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_aborts_without_mutation() {
        let mut adam = Adam::<f64>::new(&AdamConfig::default());
        let mut p = vec![
            ParamBlock {
                name: "ok".into(),
                value: Array::scalar(1.0),
            },
            ParamBlock {
                name: "bad".into(),
                value: Array::scalar(1.0),
            },
        ];
        let err = adam
            .step(&mut p, &[Array::scalar(1.0), Array::scalar(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("bad"));
        assert_eq!(p[0].value.item(), 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }
}
