use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

/// Adam with the AMSGrad running maximum of the second moment, bias-corrected.
#[derive(Clone, Debug)]
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AmsGrad {
    pub fn new(lr: f64) -> Self {
        AmsGrad { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Running maximum of the second moment for `name`, if it has been stepped.
    pub fn v_max(&self, name: &str) -> Option<&[f64]> {
        self.state.get(name).map(|s| s.v_max.as_slice())
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p =
                params.get_mut(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?} but gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let n = p.len();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                v_max: vec![0.0; n],
            });
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                st.v_max[i] = st.v_max[i].max(st.v[i]);
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v_max[i] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AmsGrad::new(1e-3);
        let mut p = single(1.0);
        opt.step(&mut p, &single(0.5)).unwrap();
        // m̂ = 0.5, √v̂ = 0.5
        let moved = 1.0 - p["w"].item();
        assert!((moved - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((moved - 1e-3).abs() < 1e-10);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = AmsGrad::new(1e-3);
        let mut p = single(-2.5);
        for _ in 0..10 {
            opt.step(&mut p, &single(0.0)).unwrap();
        }
        assert_eq!(p["w"].item(), -2.5);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn second_moment_max_is_monotone() {
        let mut opt = AmsGrad::new(1e-2);
        let mut p = single(0.0);
        let mut prev = 0.0;
        for k in 0..30 {
            let g = 3.0 / (1.0 + k as f64);
            opt.step(&mut p, &single(g)).unwrap();
            let now = opt.v_max("w").unwrap()[0];
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AmsGrad::new(1e-3);
        let mut p = single(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(opt.step(&mut p, &g).is_err());
    }
}
