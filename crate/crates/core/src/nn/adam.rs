use crate::{Error, Result};

/// Adam moments for a flat parameter vector (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimMismatch(format!(
                "adam state {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr}")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(4);
        let mut p = vec![0.0; 4];
        let g = [0.3, -5.0, 1e-3, 42.0];
        s.step(&mut p, &g, 0.01).unwrap();
        // at t = 1: m_hat = g, v_hat = g², update = lr·g/(|g| + eps)
        for (pi, gi) in p.iter().zip(&g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic_and_guards() {
        let base = AdamState::new(2);
        let (mut a, mut b) = (base.clone(), base.clone());
        let (mut pa, mut pb) = (vec![1.0, 2.0], vec![1.0, 2.0]);
        a.step(&mut pa, &[0.1, 0.2], 1e-3).unwrap();
        b.step(&mut pb, &[0.1, 0.2], 1e-3).unwrap();
        assert_eq!((a, pa), (b, pb));

        let mut s = AdamState::new(2);
        let err = s.step(&mut [0.0, 0.0], &[f64::NAN, 0.0], 1e-3).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient");
        assert!(s.step(&mut [0.0], &[0.0, 0.0], 1e-3).is_err());
        assert!(s.step(&mut [0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut s = AdamState::new(2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = p.clone();
            s.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
