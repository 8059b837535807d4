//! Finite-difference checks of every differentiable layer, the attention
//! block and the whole classifier, in `f64`.

use crate::net::{sam_forward, BoundSam, ClassifierModel, SamBlock, Variant};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, ReduceMode, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Doubles the backward pass of the named layer, as a negative control.
    pub corrupt: Option<String>,
}

pub const LAYERS: [&str; 15] = [
    "conv2d_3x3",
    "conv2d_7x7",
    "relu",
    "sigmoid",
    "maxpool2",
    "global_avg_pool",
    "dense",
    "channel_max",
    "channel_mean",
    "broadcast_mul",
    "bce_class",
    "bce_attention",
    "weighted_sum",
    "sam_block",
    "classifier",
];

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.gen_range(lo..hi))
    }

    /// Values bounded away from zero, so ReLU kinks sit outside the stencil.
    fn signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.gen_range(0.05..1.0);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Runs every check; the report of each layer lists each tensor probed.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<LayerCheck>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(opts.seed));
    let check_opts = GradCheckOptions {
        seed: opts.seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::with_capacity(LAYERS.len());
    for layer in LAYERS {
        let corrupt = opts.corrupt.as_deref() == Some(layer);
        let finish = move |t: &mut Tape<f64>, v: Var| if corrupt { t.grad_scale(v, 2.0) } else { v };
        let report = match layer {
            "conv2d_3x3" | "conv2d_7x7" => {
                let (k, pad) = if layer == "conv2d_3x3" { (3, 1) } else { (7, 3) };
                let tensors = named(vec![
                    ("input", g.uniform(&[2, 7, 7], -1.0, 1.0)),
                    ("weight", g.uniform(&[3, 2, k, k], -0.5, 0.5)),
                    ("bias", g.uniform(&[3], -0.5, 0.5)),
                ]);
                let proj = g.uniform(&[3, 7, 7], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], pad, 1)?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "relu" | "sigmoid" => {
                let tensors = named(vec![("input", g.signed(&[2, 4, 4]))]);
                let proj = g.uniform(&[2, 4, 4], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = if layer == "relu" { t.relu(v[0]) } else { t.sigmoid(v[0]) };
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "maxpool2" => {
                let tensors = named(vec![("input", g.uniform(&[2, 6, 6], -1.0, 1.0))]);
                let proj = g.uniform(&[2, 3, 3], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.maxpool2(v[0])?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "global_avg_pool" => {
                let tensors = named(vec![("input", g.uniform(&[3, 4, 4], -1.0, 1.0))]);
                let proj = g.uniform(&[3], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.global_avg_pool(v[0])?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "dense" => {
                let tensors = named(vec![
                    ("input", g.uniform(&[5], -1.0, 1.0)),
                    ("weight", g.uniform(&[3, 5], -1.0, 1.0)),
                    ("bias", g.uniform(&[3], -1.0, 1.0)),
                ]);
                let proj = g.uniform(&[3], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.dense(v[0], v[1], v[2])?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "channel_max" | "channel_mean" => {
                let mode = if layer == "channel_max" { ReduceMode::Max } else { ReduceMode::Mean };
                let tensors = named(vec![("input", g.uniform(&[4, 3, 3], -1.0, 1.0))]);
                let proj = g.uniform(&[1, 3, 3], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.channel_reduce(v[0], mode)?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "broadcast_mul" => {
                let tensors = named(vec![
                    ("input", g.uniform(&[3, 4, 4], -1.0, 1.0)),
                    ("mask", g.uniform(&[1, 4, 4], 0.05, 0.95)),
                ]);
                let proj = g.uniform(&[3, 4, 4], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.broadcast_mul(v[0], v[1])?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "bce_class" => {
                let preds: Vec<Tensor<f64>> = (0..4).map(|_| g.uniform(&[1], 0.05, 0.95)).collect();
                let tensors: Vec<(String, Tensor<f64>)> =
                    preds.into_iter().enumerate().map(|(i, p)| (format!("pred{i}"), p)).collect();
                let labels = [1.0, 0.0, 0.0, 1.0];
                grad_check(&tensors, check_opts, |t, v| {
                    let l = t.bce_class(v, &labels, 1e-7)?;
                    Ok(finish(t, l))
                })?
            }
            "bce_attention" => {
                let tensors = named(vec![
                    ("mask0", g.uniform(&[1, 3, 3], 0.05, 0.95)),
                    ("mask1", g.uniform(&[1, 3, 3], 0.05, 0.95)),
                    ("mask2", g.uniform(&[1, 3, 3], 0.05, 0.95)),
                ]);
                let target = Tensor::from_fn(&[1, 3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
                let targets = [Some(target.clone()), None, Some(target)];
                grad_check(&tensors, check_opts, |t, v| {
                    let l = t.bce_attention(v, &targets, 1e-7)?;
                    Ok(finish(t, l))
                })?
            }
            "weighted_sum" => {
                let tensors = named(vec![
                    ("a", g.uniform(&[2, 2], -1.0, 1.0)),
                    ("b", g.uniform(&[2, 2], -1.0, 1.0)),
                ]);
                let proj = g.uniform(&[2, 2], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let y = t.weighted_sum(&[(v[0], 0.3), (v[1], 0.7)])?;
                    let y = finish(t, y);
                    t.dot(y, proj.clone())
                })?
            }
            "sam_block" => {
                let block = SamBlock::<f64>::init(&mut g.0);
                let tensors = named(vec![
                    ("features", g.uniform(&[6, 8, 8], -1.0, 1.0)),
                    ("sam.weight", block.conv7_weight.value.clone()),
                    ("sam.bias", block.conv7_bias.value.clone()),
                ]);
                let proj = g.uniform(&[6, 8, 8], -1.0, 1.0);
                let mask_proj = g.uniform(&[1, 8, 8], -1.0, 1.0);
                grad_check(&tensors, check_opts, |t, v| {
                    let (gated, mask) = sam_forward(t, BoundSam { weight: v[1], bias: v[2] }, v[0])?;
                    let gated = finish(t, gated);
                    let a = t.dot(gated, proj.clone())?;
                    let b = t.dot(mask, mask_proj.clone())?;
                    t.weighted_sum(&[(a, 1.0), (b, 1.0)])
                })?
            }
            "classifier" => {
                let model = ClassifierModel::<f64>::init(Variant::SuperSam, &mut g.0);
                // A 16×16 input keeps the number of ReLU and max-pool switch
                // points small enough that the ±h stencil does not cross one.
                let mut tensors = named(vec![("image", g.uniform(&[3, 16, 16], 0.0, 1.0))]);
                tensors.extend(model.params().iter().map(|p| (p.name.clone(), p.value.clone())));
                let target = Tensor::from_fn(&[1, 2, 2], |i| if i == 1 { 1.0 } else { 0.0 });
                let sub = GradCheckOptions {
                    max_probes_per_tensor: Some(24),
                    ..check_opts
                };
                grad_check(&tensors, sub, |t, v| {
                    let x = v[0];
                    let mut h = x;
                    let n_conv = model.backbone.len();
                    for i in 0..n_conv {
                        h = t.conv2d(h, v[1 + 2 * i], v[2 + 2 * i], 1, 1)?;
                        h = t.relu(h);
                        h = t.maxpool2(h)?;
                    }
                    let s = 1 + 2 * n_conv;
                    let (gated, mask) = sam_forward(t, BoundSam { weight: v[s], bias: v[s + 1] }, h)?;
                    let pooled = t.global_avg_pool(gated)?;
                    let logit = t.dense(pooled, v[s + 2], v[s + 3])?;
                    let p = t.sigmoid(logit);
                    let p = finish(t, p);
                    let lc = t.bce_class(&[p], &[1.0], 1e-7)?;
                    let la = t.bce_attention(&[mask], &[Some(target.clone())], 1e-7)?;
                    t.weighted_sum(&[(lc, 0.5), (la, 0.5)])
                })?
            }
            other => unreachable!("unknown layer {other}"),
        };
        out.push(LayerCheck { layer, report });
    }
    Ok(out)
}

pub fn max_rel_error(checks: &[LayerCheck]) -> f64 {
    checks.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_suite_passes() {
        let checks = run_suite(&SuiteOptions::default()).unwrap();
        assert_eq!(checks.len(), LAYERS.len());
        for c in &checks {
            assert!(c.report.passed(), "{}\n{}", c.layer, c.report);
        }
        assert!(max_rel_error(&checks) <= 1e-4);
    }

    #[test]
    fn corrupted_layer_is_caught() {
        for layer in ["dense", "sam_block"] {
            let checks = run_suite(&SuiteOptions {
                seed: 0,
                corrupt: Some(layer.into()),
            })
            .unwrap();
            for c in &checks {
                assert_eq!(c.report.passed(), c.layer != layer, "{}", c.layer);
            }
        }
    }
}
