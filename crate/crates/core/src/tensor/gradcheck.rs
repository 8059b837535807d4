//! Central finite-difference verification of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half-step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub denom_floor: f64,
    /// Probe at most this many elements per tensor (chosen at random).
    pub max_probes_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            max_probes_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst disagreement found in one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn probed(&self) -> usize {
        self.tensors.iter().map(|t| t.probed).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<16} probed {:>5}  max rel err {:.3e}",
                t.name, t.probed, t.max_rel_error
            )?;
        }
        write!(
            f,
            "  max {:.3e} (tolerance {:.1e}) {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares tape gradients of a scalar objective against central finite
/// differences, for every named tensor (parameters and the input alike).
///
/// `objective` receives a fresh tape and one leaf per entry of `tensors`, in
/// order, and must return a scalar node.
pub fn grad_check<F>(
    tensors: &[(String, Tensor<f64>)],
    opts: GradCheckOptions,
    objective: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = objective(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors
        .iter()
        .map(|(_, v)| tape.leaf(v.clone(), true))
        .collect();
    let root = objective(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = tensors.iter().map(|(_, v)| v.clone()).collect();
    let mut report = Vec::with_capacity(tensors.len());
    for (ti, (name, value)) in tensors.iter().enumerate() {
        let zeros = Tensor::zeros(value.shape());
        let analytic = grads.get(vars[ti]).unwrap_or(&zeros);
        let n = value.len();
        let probes: Vec<usize> = match opts.max_probes_per_tensor {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            probed: probes.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &probes {
            let orig = values[ti].data()[i];
            values[ti].data_mut()[i] = orig + opts.step;
            let plus = eval(&values)?;
            values[ti].data_mut()[i] = orig - opts.step;
            let minus = eval(&values)?;
            values[ti].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::InvalidArgument {
                    op: "grad_check",
                    msg: format!("non-finite objective while probing {name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        tensors: report,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ReduceMode;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
        items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    #[test]
    fn dense_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = rand_tensor(&[4], &mut rng);
        let tensors = named(vec![
            ("input", rand_tensor(&[6], &mut rng)),
            ("weight", rand_tensor(&[4, 6], &mut rng)),
            ("bias", rand_tensor(&[4], &mut rng)),
        ]);
        let report = grad_check(&tensors, GradCheckOptions::default(), |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            t.dot(y, proj.clone())
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() <= 1e-4);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = rand_tensor(&[3], &mut rng);
        let tensors = named(vec![
            ("input", rand_tensor(&[5], &mut rng)),
            ("weight", rand_tensor(&[3, 5], &mut rng)),
            ("bias", rand_tensor(&[3], &mut rng)),
        ]);
        let report = grad_check(&tensors, GradCheckOptions::default(), |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            let y = t.grad_scale(y, 2.0);
            t.dot(y, proj.clone())
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.3);
    }

    #[test]
    fn subsampling_limits_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tensors = named(vec![("x", rand_tensor(&[2, 10, 10], &mut rng))]);
        let opts = GradCheckOptions {
            max_probes_per_tensor: Some(30),
            ..Default::default()
        };
        let report = grad_check(&tensors, opts, |t, v| {
            let m = t.channel_reduce(v[0], ReduceMode::Mean)?;
            t.dot(m, Tensor::filled(&[1, 10, 10], 0.5))
        })
        .unwrap();
        assert_eq!(report.probed(), 30);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn non_finite_objective_reports_location() {
        let tensors = named(vec![("x", Tensor::scalar(0.0))]);
        let err = grad_check(&tensors, GradCheckOptions::default(), |t, v| {
            let w = Tensor::scalar(f64::INFINITY);
            t.dot(v[0], w)
        })
        .unwrap_err();
        assert!(err.to_string().contains("x[0]"), "{err}");
    }
}
