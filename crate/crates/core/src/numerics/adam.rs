use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "adam hyperparameters {self:?}"
            )))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n {
        return Err(Error::dim("adam gradients", n, grads.len()));
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::dim(
            "adam moments",
            n,
            state.m.len().min(state.v.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericOverflow(format!("gradient entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        st.m = vec![0.1, 0.2, -0.3];
        st.v = vec![0.01, 0.04, 0.09];
        let mut fresh = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut fresh, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        // Nonzero moments decay toward zero under zero gradients.
        let before = st.m.clone();
        let mut q = p.clone();
        adam_step(&mut q, &[0.0; 3], &mut st, &AdamHyper::default()).unwrap();
        for (a, b) in st.m.iter().zip(&before) {
            assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        let hyper = AdamHyper::default();
        let g = [0.5, -3.0, 1e-2];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, &hyper).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expect = -hyper.lr * gi / (gi.abs() + hyper.eps);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi.abs() - hyper.lr).abs() < 1e-8);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let hyper = AdamHyper::default();
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[2.0, -1.0], &mut st, &hyper).unwrap();
        let first = p.clone();
        adam_step(&mut p, &[2.0, -1.0], &mut st, &hyper).unwrap();
        // Constant gradient: m̂ = g and v̂ = g² after bias correction, so each
        // step has the same size.
        assert!(p[0] < first[0] && first[0] < 0.0);
        assert!(p[1] > first[1] && first[1] > 0.0);
        assert!((p[0] - 2.0 * first[0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        let h = AdamHyper::default();
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut st, &h).is_err());
        assert!(adam_step(&mut p, &[0.0], &mut st, &h).is_err());
    }
}
