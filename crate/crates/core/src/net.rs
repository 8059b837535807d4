//! The crop classifier: a three-block conv backbone, an optional spatial
//! attention block, and a pooled logistic head.
//!
//! ```text
//! 3×64×64 ─conv3─relu─pool→ 8×32×32 ─conv3─relu─pool→ 16×16×16
//!         ─conv3─relu─pool→ 32×8×8 ─[SAM]→ 32×8×8 ─gap→ 32 ─dense→ 1 ─sigmoid→ ŷ
//! ```
//!
//! The attention block reduces the features across channels by max and by
//! mean, stacks the two maps, runs a single 7×7 filter over them and gates
//! the features with the sigmoid of the result. `sam` and `super_sam` share
//! this architecture; they differ only in the training objective.

use crate::supervision::AttentionMask;
use crate::tensor::{Parameter, ReduceMode, Result, Scalar, Tape, Tensor, TensorError, UniformInit, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 64;
pub const BACKBONE_WIDTHS: [usize; 3] = [8, 16, 32];
/// Spatial size of the attention map for a 64×64 input.
pub const ATTENTION_SIZE: usize = INPUT_SIZE >> BACKBONE_WIDTHS.len();
pub const SAM_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone and head only.
    Plain,
    /// With attention, trained on the classification loss alone.
    Sam,
    /// With attention, trained on the joint classification + attention loss.
    SuperSam,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Sam, Variant::SuperSam];

    pub fn has_attention(self) -> bool {
        !matches!(self, Variant::Plain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Sam => "sam",
            Variant::SuperSam => "super_sam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(Variant::Plain),
            "sam" => Ok(Variant::Sam),
            "super_sam" | "super-sam" => Ok(Variant::SuperSam),
            other => Err(format!(
                "unknown variant `{other}` (expected plain, sam or super_sam)"
            )),
        }
    }
}

/// Spatial attention block: one 2→1 channel 7×7 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SamBlock<T> {
    pub conv7_weight: Parameter<T>,
    pub conv7_bias: Parameter<T>,
}

impl<T: Scalar> SamBlock<T> {
    pub fn zeros() -> Self {
        Self {
            conv7_weight: Parameter::zeros("sam.weight", &[1, 2, SAM_KERNEL, SAM_KERNEL]),
            conv7_bias: Parameter::zeros("sam.bias", &[1]),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let shape = [1, 2, SAM_KERNEL, SAM_KERNEL];
        let init = UniformInit {
            fan_in: 2 * SAM_KERNEL * SAM_KERNEL,
        };
        Self {
            conv7_weight: Parameter::new("sam.weight", init.sample(&shape, rng)),
            conv7_bias: Parameter::zeros("sam.bias", &[1]),
        }
    }
}

/// Tape handles for a [`SamBlock`]'s parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundSam {
    pub weight: Var,
    pub bias: Var,
}

impl BoundSam {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, block: &SamBlock<T>) -> Self {
        Self {
            weight: tape.param(&block.conv7_weight),
            bias: tape.param(&block.conv7_bias),
        }
    }
}

/// Attention forward pass on `C×H'×W'` features; returns `(gated, mask)`.
pub fn sam_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: BoundSam,
    features: Var,
) -> Result<(Var, Var)> {
    let max = tape.channel_reduce(features, ReduceMode::Max)?;
    let mean = tape.channel_reduce(features, ReduceMode::Mean)?;
    let stacked = tape.stack_channels(max, mean)?;
    let logits = tape.conv2d(stacked, block.weight, block.bias, SAM_KERNEL / 2, 1)?;
    let mask = tape.sigmoid(logits);
    let gated = tape.broadcast_mul(features, mask)?;
    Ok((gated, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    pub variant: Variant,
    pub backbone: Vec<ConvLayer<T>>,
    pub sam: Option<SamBlock<T>>,
    pub head: DenseLayer<T>,
}

/// Output of [`ClassifierModel::classify_crop`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub probability: T,
    pub mask: Option<AttentionMask>,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub probability: Var,
    pub mask: Option<Var>,
}

/// Parameters placed on a tape, shared by every sample of a batch.
#[derive(Debug, Clone)]
pub struct BoundModel {
    backbone: Vec<(Var, Var)>,
    sam: Option<BoundSam>,
    head: (Var, Var),
}

impl BoundModel {
    /// Parameter nodes in [`ClassifierModel::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.backbone.iter().flat_map(|&(w, b)| [w, b]).collect();
        if let Some(s) = self.sam {
            v.extend([s.weight, s.bias]);
        }
        v.extend([self.head.0, self.head.1]);
        v
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<ForwardVars> {
        let shape = tape.value(image).shape();
        if shape != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
            return Err(TensorError::InvalidArgument {
                op: "classify_crop",
                msg: format!(
                    "expected a {INPUT_CHANNELS}×{INPUT_SIZE}×{INPUT_SIZE} image, got {shape:?}"
                ),
            });
        }
        let mut x = image;
        for &(w, b) in &self.backbone {
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x);
            x = tape.maxpool2(x)?;
        }
        let mut mask = None;
        if let Some(sam) = self.sam {
            let (gated, m) = sam_forward(tape, sam, x)?;
            x = gated;
            mask = Some(m);
        }
        let pooled = tape.global_avg_pool(x)?;
        let logit = tape.dense(pooled, self.head.0, self.head.1)?;
        let probability = tape.sigmoid(logit);
        Ok(ForwardVars { probability, mask })
    }
}

impl<T: Scalar> ClassifierModel<T> {
    /// Seeded uniform initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(variant: Variant, rng: &mut R) -> Self {
        let mut backbone = Vec::with_capacity(BACKBONE_WIDTHS.len());
        let mut c_in = INPUT_CHANNELS;
        for (i, &c_out) in BACKBONE_WIDTHS.iter().enumerate() {
            let shape = [c_out, c_in, 3, 3];
            let init = UniformInit { fan_in: c_in * 9 };
            backbone.push(ConvLayer {
                weight: Parameter::new(format!("conv{}.weight", i + 1), init.sample(&shape, rng)),
                bias: Parameter::zeros(format!("conv{}.bias", i + 1), &[c_out]),
            });
            c_in = c_out;
        }
        let sam = variant.has_attention().then(|| SamBlock::init(rng));
        let init = UniformInit { fan_in: c_in };
        let head = DenseLayer {
            weight: Parameter::new("head.weight", init.sample(&[1, c_in], rng)),
            bias: Parameter::zeros("head.bias", &[1]),
        };
        Self {
            variant,
            backbone,
            sam,
            head,
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self
            .backbone
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        if let Some(s) = &self.sam {
            v.extend([&s.conv7_weight, &s.conv7_bias]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self
            .backbone
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        if let Some(s) = &mut self.sam {
            v.extend([&mut s.conv7_weight, &mut s.conv7_bias]);
        }
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            backbone: self
                .backbone
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
            sam: self.sam.as_ref().map(|s| BoundSam::bind(tape, s)),
            head: (tape.param(&self.head.weight), tape.param(&self.head.bias)),
        }
    }

    /// Adds the gradients found on `grads` into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, bound: &BoundModel, grads: &crate::tensor::Gradients<T>) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars()) {
            if let Some(g) = grads.get(v) {
                p.accumulate(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Forward pass for one normalized `3×64×64` crop.
    pub fn classify_crop(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = bound.forward(&mut tape, x)?;
        Ok(Prediction {
            probability: tape.value(out.probability).item(),
            mask: out.mask.map(|m| AttentionMask::from_tensor(tape.value(m))),
        })
    }

    /// Same weights at another precision.
    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            variant: self.variant,
            backbone: self
                .backbone
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            sam: self.sam.as_ref().map(|s| SamBlock {
                conv7_weight: s.conv7_weight.cast(),
                conv7_bias: s.conv7_bias.cast(),
            }),
            head: DenseLayer {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }

    /// Copies parameter values (not optimizer state) from `other`.
    pub fn copy_values_from(&mut self, other: &Self) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value = src.value.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 64, 64], |_| rng.gen::<f32>())
    }

    #[test]
    fn attention_map_is_eight_by_eight() {
        assert_eq!(ATTENTION_SIZE, 8);
        let model = ClassifierModel::<f32>::init(Variant::SuperSam, &mut ChaCha8Rng::seed_from_u64(0));
        let pred = model.classify_crop(&image(1)).unwrap();
        let mask = pred.mask.unwrap();
        assert_eq!((mask.height, mask.width), (8, 8));
        assert!(mask.values.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(pred.probability > 0.0 && pred.probability < 1.0);
    }

    #[test]
    fn plain_has_no_mask() {
        let model = ClassifierModel::<f32>::init(Variant::Plain, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(model.sam.is_none());
        assert!(model.classify_crop(&image(2)).unwrap().mask.is_none());
    }

    #[test]
    fn wrong_geometry_rejected() {
        let model = ClassifierModel::<f32>::init(Variant::Sam, &mut ChaCha8Rng::seed_from_u64(0));
        let err = model.classify_crop(&Tensor::zeros(&[3, 32, 32])).unwrap_err();
        assert!(err.to_string().contains("3×64×64"), "{err}");
    }

    #[test]
    fn deterministic_forward() {
        let a = ClassifierModel::<f32>::init(Variant::Sam, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ClassifierModel::<f32>::init(Variant::Sam, &mut ChaCha8Rng::seed_from_u64(9));
        let img = image(3);
        let (pa, pb) = (a.classify_crop(&img).unwrap(), b.classify_crop(&img).unwrap());
        assert_eq!(pa.probability.to_bits(), pb.probability.to_bits());
        assert_eq!(pa.mask, pb.mask);
    }

    #[test]
    fn sam_and_super_sam_share_architecture() {
        let a = ClassifierModel::<f32>::init(Variant::Sam, &mut ChaCha8Rng::seed_from_u64(4));
        let mut b = ClassifierModel::<f32>::init(Variant::SuperSam, &mut ChaCha8Rng::seed_from_u64(4));
        b.copy_values_from(&a);
        let img = image(5);
        assert_eq!(a.classify_crop(&img).unwrap(), b.classify_crop(&img).unwrap());
    }

    #[test]
    fn black_image_is_finite() {
        for v in Variant::ALL {
            let model = ClassifierModel::<f32>::init(v, &mut ChaCha8Rng::seed_from_u64(6));
            let p = model.classify_crop(&Tensor::zeros(&[3, 64, 64])).unwrap();
            assert!(p.probability.is_finite() && p.probability > 0.0 && p.probability < 1.0);
        }
    }

    #[test]
    fn zero_sam_weights_give_half_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new();
        let features = tape.constant(Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0)));
        let block = BoundSam::bind(&mut tape, &SamBlock::zeros());
        let (gated, mask) = sam_forward(&mut tape, block, features).unwrap();
        assert!(tape.value(mask).data().iter().all(|&v| v == 0.5));
        for (g, f) in tape.value(gated).data().iter().zip(tape.value(features).data()) {
            assert_eq!(*g, 0.5 * f);
        }
    }

    #[test]
    fn constant_features_reduce_identically() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::filled(&[5, 8, 8], 0.7));
        let mx = tape.channel_reduce(f, ReduceMode::Max).unwrap();
        let mn = tape.channel_reduce(f, ReduceMode::Mean).unwrap();
        let st = tape.stack_channels(mx, mn).unwrap();
        let d = tape.value(st).data();
        for (a, b) in d[..64].iter().zip(&d[64..]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sam_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = SamBlock::<f64>::init(&mut rng);
        let features = Tensor::from_fn(&[6, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let proj = Tensor::from_fn(&[6, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let mask_proj = Tensor::from_fn(&[1, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let tensors = vec![
            ("features".to_string(), features),
            ("sam.weight".to_string(), block.conv7_weight.value.clone()),
            ("sam.bias".to_string(), block.conv7_bias.value.clone()),
        ];
        let report = grad_check(&tensors, GradCheckOptions::default(), |t, v| {
            let (gated, mask) = sam_forward(t, BoundSam { weight: v[1], bias: v[2] }, v[0])?;
            assert_eq!(t.value(mask).shape(), &[1, 8, 8]);
            assert!(t.value(mask).data().iter().all(|&a| a > 0.0 && a < 1.0));
            let a = t.dot(gated, proj.clone())?;
            let b = t.dot(mask, mask_proj.clone())?;
            t.weighted_sum(&[(a, 1.0), (b, 1.0)])
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
