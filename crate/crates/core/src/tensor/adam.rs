use super::{Parameter, Result, Scalar, TensorError};

/// Adam moment decay rates and stabilizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then clears the
/// gradients.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves the parameters untouched.
pub fn adam_step<T: Scalar>(params: &mut [&mut Parameter<T>], learning_rate: f64) -> Result<()> {
    adam_step_with(params, learning_rate, AdamHyper::default())
}

pub fn adam_step_with<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    learning_rate: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(TensorError::NonFiniteGradient(bad.name.clone()));
    }
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let eps = T::from_f64(hyper.epsilon);
    let lr = T::from_f64(learning_rate);
    let one = T::one();
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = i32::try_from(p.step_count).unwrap_or(i32::MAX);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let Parameter {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = &mut **p;
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut())
            .zip(adam_m.data_mut())
            .zip(adam_v.data_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_keeps_values() {
        let mut p = Parameter::new("w", Tensor::from_fn(&[3], |i| i as f64));
        let before = p.value.clone();
        adam_step(&mut [&mut p], 1e-4).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_scalar() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0f64));
        p.grad = Tensor::scalar(1.0);
        adam_step(&mut [&mut p], 1e-4).unwrap();
        let expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.value.item() - expected).abs() < 1e-15);
        assert!((p.value.item() - 0.9999).abs() < 1e-9);
        assert_eq!(p.grad.item(), 0.0);
    }

    #[test]
    fn identical_params_move_identically() {
        let mut a = Parameter::new("a", Tensor::from_fn(&[4], |i| 0.1 * i as f32));
        let mut b = a.clone();
        b.name = "b".into();
        for step in 0..5 {
            let g = Tensor::from_fn(&[4], |i| ((i + step) as f32).sin());
            a.grad = g.clone();
            b.grad = g;
            adam_step(&mut [&mut a, &mut b], 1e-3).unwrap();
        }
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ok = Parameter::new("fine", Tensor::scalar(1.0f64));
        let mut bad = Parameter::new("conv2.weight", Tensor::scalar(1.0f64));
        bad.grad = Tensor::scalar(f64::NAN);
        let err = adam_step(&mut [&mut ok, &mut bad], 1e-4).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("conv2.weight".into()));
        assert_eq!(ok.step_count, 0);
    }
}
