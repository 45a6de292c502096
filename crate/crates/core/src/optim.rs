//! Adaptive-moment (Adam) optimizer over named parameter maps.

use crate::params::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moment buffer for every parameter");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment buffer for every parameter");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            if self.lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Scalar transcription of the published update rule.
    fn oracle(x0: f64, lr: f64, b1: f64, b2: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(x);
        }
        out
    }

    #[test]
    fn matches_scalar_oracle_on_quadratic() {
        // loss = 1.5 (x - 2)^2
        let grad = |x: f64| 3.0 * (x - 2.0);
        let expected = oracle(-1.0, 0.05, 0.9, 0.999, 200, grad);
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(-1.0));
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.999);
        for e in expected {
            let mut g = Params::new();
            g.insert("x", Tensor::scalar(grad(p.get("x").unwrap().item())));
            opt.step(&mut p, &g);
            assert!((p.get("x").unwrap().item() - e).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![3], vec![0.1, -0.0, 7.5]));
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.0, 0.9, 0.999);
        let mut g = Params::new();
        g.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 3.0]));
        opt.step(&mut p, &g);
        assert_eq!(p.digest(), before.digest());
    }
}
