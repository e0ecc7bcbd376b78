//! Adam and RMSprop.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{GradStore, NetworkParams};
use crate::scalar::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptMethod {
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// RMSprop without momentum or centering.
    RmsProp { alpha: f64, eps: f64 },
}

impl OptMethod {
    pub fn adam() -> Self {
        OptMethod::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptMethod::RmsProp { alpha: 0.99, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptMethod::Adam { .. } => "adam",
            OptMethod::RmsProp { .. } => "rmsprop",
        }
    }
}

/// Per-parameter moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub method: OptMethod,
    pub step: u64,
    /// First moments (Adam only).
    pub first: BTreeMap<String, Tensor<T>>,
    /// Second moments / squared-gradient averages.
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> OptState<T> {
    pub fn new(method: OptMethod) -> Self {
        Self {
            method,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter with `requires_grad`.
    ///
    /// The whole step is validated first; on error no parameter is modified.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidLearningRate(lr));
        }
        for (name, p) in params.iter() {
            if !p.requires_grad {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| TensorError::MissingParameter(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(shape_err("optimizer_step", format!("{name} {:?}", p.shape()), g.shape()));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let g = grads.get(name).expect("validated above");
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            match self.method {
                OptMethod::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let c1 = T::from_f64(1.0 / (1.0 - beta1.powf(t)));
                    let c2 = T::from_f64(1.0 / (1.0 - beta2.powf(t)));
                    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
                    let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &gi), (mi, vi)) in iter {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mhat = *mi * c1;
                        let vhat = *vi * c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptMethod::RmsProp { alpha, eps } => {
                    let a = T::from_f64(alpha);
                    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = a * *vi + (T::one() - a) * gi * gi;
                        *w -= lr * gi / (vi.sqrt() + eps);
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
    use crate::params::{ArchDescriptor, LayerSpec};

    fn one_param(values: &[f64]) -> NetworkParams<f64> {
        let arch = ArchDescriptor {
            family: "bowl".into(),
            layers: vec![LayerSpec::prelu("p", values.len())],
        };
        let mut p = NetworkParams::zeros(arch);
        p.set("p.slope", Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        p
    }

    fn grads(values: &[f64]) -> GradStore<f64> {
        let mut g = GradStore::default();
        g.insert("p.slope".into(), Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap());
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for method in [OptMethod::adam(), OptMethod::rmsprop()] {
            let mut p = one_param(&[0.5, -1.0]);
            let before = p.clone();
            let mut st = OptState::new(method);
            st.step(&mut p, &grads(&[0.0, 0.0]), 1e-3).unwrap();
            assert_eq!(p, before);
            assert_eq!(st.step, 1);
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let g = [3.0, -0.02, 1e-3];
        let mut p = one_param(&[0.0; 3]);
        let mut st = OptState::new(OptMethod::adam());
        st.step(&mut p, &grads(&g), 1e-3).unwrap();
        for (w, gi) in p.get("p.slope").unwrap().data().iter().zip(g) {
            // m_hat = g, v_hat = g^2 => update = lr * g / (|g| + eps)
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15);
            assert!((w.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_lr_and_nan_gradients() {
        let mut p = one_param(&[1.0]);
        let mut st = OptState::new(OptMethod::rmsprop());
        assert_eq!(st.step(&mut p, &grads(&[1.0]), 0.0), Err(TensorError::InvalidLearningRate(0.0)));
        assert_eq!(
            st.step(&mut p, &grads(&[f64::NAN]), 1e-3),
            Err(TensorError::NonFiniteGradient("p.slope".into()))
        );
        assert_eq!(p.get("p.slope").unwrap().data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    fn bowl_run(method: OptMethod) -> f64 {
        // f(w) = |w|^2, grad = 2w
        let mut p = one_param(&[0.8, -0.6, 0.3, -0.9]);
        let mut st = OptState::new(method);
        for _ in 0..500 {
            let g: Vec<f64> = p.get("p.slope").unwrap().data().iter().map(|w| 2.0 * w).collect();
            st.step(&mut p, &grads(&g), 1e-2).unwrap();
        }
        p.get("p.slope").unwrap().data().iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    #[test]
    fn quadratic_bowl_converges() {
        let adam = bowl_run(OptMethod::adam());
        assert!(adam < 1e-3, "adam |w| = {adam}");
    }
}
