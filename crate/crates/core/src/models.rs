//! The three networks: feature extractor, classifier and domain discriminator.
//!
//! Parameters live in plain [`Tensor`]s owned by [`ModelBundle`]. A forward
//! pass first binds them onto a [`Tape`] with [`ModelBundle::bind`], which
//! assigns each tensor a [`ParamId`] in declaration order (extractor,
//! classifier, discriminator; weight before bias, layer by layer).

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dropout::{sample_mask, DropoutMode, DropoutSpec, PassKey};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Layer widths plus dropout placement for one fully-connected network.
///
/// `layer_dims = [in, h1, ..., out]` gives `layer_dims.len() - 1` dense
/// layers. Hidden layers use ReLU; the output layer is linear unless
/// `activate_output` is set. `dropout_after` lists dense-layer indices whose
/// (activated) output is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub dropout_after: Vec<usize>,
    pub activate_output: bool,
    pub dropout_p: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::invalid("layer_dims", format!("need positive widths, got {:?}", self.layer_dims)));
        }
        let n = self.num_layers();
        if let Some(bad) = self.dropout_after.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("dropout_after", format!("layer {bad} does not exist ({n} layers)")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", format!("must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<DenseLayer>,
    /// Offsets dropout stream ids so networks never share masks.
    stream_base: u64,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: NetworkSpec, stream_base: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Ok(DenseLayer {
                    weight: Tensor::matrix(fan_in, fan_out, weights)?.with_grad(),
                    bias: Tensor::zeros(vec![fan_out])?.with_grad(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            layers,
            stream_base,
        })
    }

    pub fn zeroed(spec: NetworkSpec, stream_base: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                Ok(DenseLayer {
                    weight: Tensor::zeros(vec![w[0], w[1]])?.with_grad(),
                    bias: Tensor::zeros(vec![w[1]])?.with_grad(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            layers,
            stream_base,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn bind(&self, tape: &mut Tape, first_id: usize, trainable: bool) -> BoundNetwork {
        let mut id = first_id;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = if trainable {
                let w = tape.param(&l.weight, ParamId(id));
                let b = tape.param(&l.bias, ParamId(id + 1));
                (w, b)
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            };
            id += 2;
            layers.push((w, b));
        }
        BoundNetwork {
            layers,
            spec: self.spec.clone(),
            stream_base: self.stream_base,
        }
    }
}

/// A network whose parameters have been recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    layers: Vec<(Var, Var)>,
    spec: NetworkSpec,
    stream_base: u64,
}

impl BoundNetwork {
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: DropoutMode, key: PassKey) -> Result<Var> {
        let got = tape.value(x).cols();
        if got != self.spec.input_dim() || tape.value(x).shape().len() != 2 {
            return Err(Error::shape(
                "network forward",
                format!("input {:?}, network expects {} features", tape.value(x).shape(), self.spec.input_dim()),
            ));
        }
        let n = self.layers.len();
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.dense(h, w, b)?;
            if i + 1 < n || self.spec.activate_output {
                h = tape.relu(h)?;
            }
            if mode != DropoutMode::Off && self.spec.dropout_p > 0.0 && self.spec.dropout_after.contains(&i) {
                let spec = DropoutSpec::new(self.spec.dropout_p, self.stream_base + i as u64)?;
                let mask = sample_mask(spec, key, tape.value(h).len())?;
                h = tape.dropout(h, mask)?;
            }
        }
        Ok(h)
    }
}

/// Architecture of all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSpec {
    pub feature_extractor: NetworkSpec,
    pub classifier: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl BundleSpec {
    /// Hidden layers of the extractor and discriminator get ReLU and (for the
    /// extractor, optionally the discriminator) dropout; the extractor's
    /// output layer is activated and dropped too since it feeds the classifier.
    pub fn mlp(
        input_dim: usize,
        feature_dims: &[usize],
        classes: usize,
        uncertainty_dim: usize,
        discriminator_hidden: &[usize],
        dropout_p: f64,
        discriminator_dropout: bool,
    ) -> Result<Self> {
        let mut g_dims = vec![input_dim];
        g_dims.extend_from_slice(feature_dims);
        let feature_dim = *g_dims.last().expect("non-empty");
        let g_layers = g_dims.len() - 1;

        let mut d_dims = vec![feature_dim + uncertainty_dim];
        d_dims.extend_from_slice(discriminator_hidden);
        d_dims.push(1);
        let d_dropout = if discriminator_dropout {
            (0..discriminator_hidden.len()).collect()
        } else {
            Vec::new()
        };

        let spec = Self {
            feature_extractor: NetworkSpec {
                layer_dims: g_dims,
                dropout_after: (0..g_layers).collect(),
                activate_output: true,
                dropout_p,
            },
            classifier: NetworkSpec {
                layer_dims: vec![feature_dim, classes],
                dropout_after: Vec::new(),
                activate_output: false,
                dropout_p,
            },
            discriminator: NetworkSpec {
                layer_dims: d_dims,
                dropout_after: d_dropout,
                activate_output: false,
                dropout_p,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_extractor.validate()?;
        self.classifier.validate()?;
        self.discriminator.validate()?;
        let feat = self.feature_extractor.output_dim();
        if self.classifier.input_dim() != feat {
            return Err(Error::invalid(
                "classifier",
                format!("input {} != feature dim {feat}", self.classifier.input_dim()),
            ));
        }
        if self.discriminator.input_dim() < feat || self.discriminator.output_dim() != 1 {
            return Err(Error::invalid(
                "discriminator",
                format!("dims {:?} incompatible with feature dim {feat}", self.discriminator.layer_dims),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_extractor.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn uncertainty_dim(&self) -> usize {
        self.discriminator.input_dim() - self.feature_dim()
    }
}

const STREAM_STRIDE: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub feature_extractor: Network,
    pub classifier: Network,
    pub discriminator: Network,
    /// Seed of the dropout stream used by every forward pass.
    pub dropout_seed: u64,
}

impl ModelBundle {
    /// Each network draws its initial weights from its own sub-stream, so the
    /// extractor and classifier do not depend on the discriminator's shape.
    pub fn new(spec: BundleSpec, init_seed: u64, dropout_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut g_rng = rng::rng_from(&[init_seed, 0]);
        let mut c_rng = rng::rng_from(&[init_seed, 1]);
        let mut d_rng = rng::rng_from(&[init_seed, 2]);
        Ok(Self {
            feature_extractor: Network::init(spec.feature_extractor, 0, &mut g_rng)?,
            classifier: Network::init(spec.classifier, STREAM_STRIDE, &mut c_rng)?,
            discriminator: Network::init(spec.discriminator, 2 * STREAM_STRIDE, &mut d_rng)?,
            dropout_seed,
        })
    }

    pub fn zeroed(spec: BundleSpec, dropout_seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            feature_extractor: Network::zeroed(spec.feature_extractor, 0)?,
            classifier: Network::zeroed(spec.classifier, STREAM_STRIDE)?,
            discriminator: Network::zeroed(spec.discriminator, 2 * STREAM_STRIDE)?,
            dropout_seed,
        })
    }

    pub fn spec(&self) -> BundleSpec {
        BundleSpec {
            feature_extractor: self.feature_extractor.spec.clone(),
            classifier: self.classifier.spec.clone(),
            discriminator: self.discriminator.spec.clone(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.spec.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_extractor.spec.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_extractor.spec.output_dim()
    }

    pub fn uncertainty_dim(&self) -> usize {
        self.discriminator.spec.input_dim() - self.feature_dim()
    }

    pub fn key(&self, step: u64, pass_index: u64) -> PassKey {
        PassKey::new(self.dropout_seed, step, pass_index)
    }

    /// All parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.feature_extractor
            .tensors()
            .chain(self.classifier.tensors())
            .chain(self.discriminator.tensors())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.feature_extractor
            .tensors_mut()
            .chain(self.classifier.tensors_mut())
            .chain(self.discriminator.tensors_mut())
            .collect()
    }

    pub fn extractor_params(&self) -> Range<usize> {
        0..2 * self.feature_extractor.layers.len()
    }

    pub fn classifier_params(&self) -> Range<usize> {
        let start = self.extractor_params().end;
        start..start + 2 * self.classifier.layers.len()
    }

    pub fn discriminator_params(&self) -> Range<usize> {
        let start = self.classifier_params().end;
        start..start + 2 * self.discriminator.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.feature_extractor.param_count() + self.classifier.param_count() + self.discriminator.param_count()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBundle {
        let g = self.feature_extractor.bind(tape, self.extractor_params().start, true);
        let c = self.classifier.bind(tape, self.classifier_params().start, true);
        let d = self.discriminator.bind(tape, self.discriminator_params().start, true);
        BoundBundle {
            feature_extractor: g,
            classifier: c,
            discriminator: d,
            dropout_seed: self.dropout_seed,
        }
    }

    /// A second view of the classifier with its parameters as constants.
    pub fn bind_frozen_classifier(&self, tape: &mut Tape) -> BoundNetwork {
        self.classifier.bind(tape, self.classifier_params().start, false)
    }
}

/// Parameters of a [`ModelBundle`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundBundle {
    pub feature_extractor: BoundNetwork,
    pub classifier: BoundNetwork,
    pub discriminator: BoundNetwork,
    pub dropout_seed: u64,
}

impl BoundBundle {
    pub fn key(&self, step: u64, pass_index: u64) -> PassKey {
        PassKey::new(self.dropout_seed, step, pass_index)
    }

    pub fn extract_features(&self, tape: &mut Tape, x: Var, mode: DropoutMode, key: PassKey) -> Result<Var> {
        self.feature_extractor.forward(tape, x, mode, key)
    }

    /// Raw logits; temperature is applied by the caller.
    pub fn classify(&self, tape: &mut Tape, features: Var, mode: DropoutMode, key: PassKey) -> Result<Var> {
        self.classifier.forward(tape, features, mode, key)
    }

    /// Probability that each row came from the source domain, shape `[B]`.
    ///
    /// Features are concatenated with the (already detached) uncertainty
    /// block, routed through a gradient-reversal node with `coeff`, then
    /// through the discriminator and a sigmoid.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        features: Var,
        uncertainty: Option<Var>,
        coeff: f64,
        mode: DropoutMode,
        key: PassKey,
    ) -> Result<Var> {
        let feat_dim = tape.value(features).cols();
        let u_dim = uncertainty.map_or(0, |u| tape.value(u).cols());
        let expected = self.discriminator.spec.input_dim();
        if feat_dim + u_dim != expected {
            return Err(Error::shape(
                "discriminate",
                format!("features {feat_dim} + uncertainty {u_dim} != discriminator input {expected}"),
            ));
        }
        let joined = match uncertainty {
            Some(u) => tape.concat_cols(features, u)?,
            None => features,
        };
        let reversed = tape.grad_reverse(joined, coeff)?;
        let logit = self.discriminator.forward(tape, reversed, mode, key)?;
        let prob = tape.sigmoid(logit)?;
        let rows = tape.value(prob).rows();
        tape.reshape(prob, vec![rows])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(u: usize, p: f64) -> BundleSpec {
        BundleSpec::mlp(3, &[6, 4], 3, u, &[5], p, false).unwrap()
    }

    #[test]
    fn param_counts_match_spec_arithmetic() {
        let spec = small_spec(1, 0.5);
        let bundle = ModelBundle::new(spec.clone(), 1, 2).unwrap();
        assert_eq!(spec.feature_extractor.param_count(), 3 * 6 + 6 + 6 * 4 + 4);
        assert_eq!(spec.classifier.param_count(), 4 * 3 + 3);
        assert_eq!(spec.discriminator.param_count(), 5 * 5 + 5 + 5 + 1);
        assert_eq!(
            bundle.param_count(),
            spec.feature_extractor.param_count() + spec.classifier.param_count() + spec.discriminator.param_count()
        );
        assert_eq!(bundle.params().len(), bundle.discriminator_params().end);
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let spec = NetworkSpec {
            layer_dims: vec![3],
            dropout_after: vec![],
            activate_output: true,
            dropout_p: 0.5,
        };
        let net = Network::zeroed(spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0, true);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let y = bound.forward(&mut tape, x, DropoutMode::Train, PassKey::new(0, 0, 0)).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_linear_classifier_identity() {
        let spec = NetworkSpec {
            layer_dims: vec![2, 2],
            dropout_after: vec![],
            activate_output: false,
            dropout_p: 0.0,
        };
        let mut net = Network::zeroed(spec, 0).unwrap();
        net.layers_mut()[0].weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().with_grad();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0, true);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let y = bound.forward(&mut tape, x, DropoutMode::McEval, PassKey::new(0, 0, 0)).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_per_key() {
        let bundle = ModelBundle::new(small_spec(1, 0.5), 3, 4).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let run = |pass| {
            let mut tape = Tape::new();
            let b = bundle.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let f = b.extract_features(&mut tape, xv, DropoutMode::Train, b.key(7, pass)).unwrap();
            tape.value(f).clone()
        };
        assert_eq!(run(0), run(0));
        let f = run(0);
        assert_eq!(f.shape(), &[2, 4]);
        assert!(f.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn classify_shape() {
        let bundle = ModelBundle::new(small_spec(1, 0.5), 3, 4).unwrap();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape);
        let x = tape.constant(Tensor::full(vec![4, 3], 0.5).unwrap());
        let f = b.extract_features(&mut tape, x, DropoutMode::Train, b.key(0, 0)).unwrap();
        let logits = b.classify(&mut tape, f, DropoutMode::Train, b.key(0, 0)).unwrap();
        assert_eq!(tape.value(logits).shape(), &[4, 3]);
    }

    #[test]
    fn zero_dropout_passes_agree() {
        let bundle = ModelBundle::new(small_spec(1, 0.0), 3, 4).unwrap();
        let x = Tensor::full(vec![2, 3], 0.3).unwrap();
        let logits = |pass| {
            let mut tape = Tape::new();
            let b = bundle.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let f = b.extract_features(&mut tape, xv, DropoutMode::McEval, b.key(0, pass)).unwrap();
            let l = b.classify(&mut tape, f, DropoutMode::McEval, b.key(0, pass)).unwrap();
            tape.value(l).clone()
        };
        assert_eq!(logits(0), logits(5));
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let bundle = ModelBundle::zeroed(small_spec(1, 0.5), 0).unwrap();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape);
        let f = tape.constant(Tensor::full(vec![3, 4], 1.0).unwrap());
        let u = tape.constant(Tensor::full(vec![3, 1], 0.2).unwrap());
        let d = b.discriminate(&mut tape, f, Some(u), 1.0, DropoutMode::Train, b.key(0, 0)).unwrap();
        assert_eq!(tape.value(d).values(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn discriminate_range_and_dims() {
        let bundle = ModelBundle::new(small_spec(1, 0.5), 9, 1).unwrap();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape);
        let vals: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = tape.constant(Tensor::matrix(8, 4, vals).unwrap());
        let u = tape.constant(Tensor::full(vec![8, 1], 0.1).unwrap());
        let d = b.discriminate(&mut tape, f, Some(u), 1.0, DropoutMode::Train, b.key(0, 0)).unwrap();
        assert_eq!(tape.value(d).shape(), &[8]);
        assert!(tape.value(d).values().iter().all(|&p| p > 0.0 && p < 1.0));

        let wrong = tape.constant(Tensor::full(vec![8, 2], 0.1).unwrap());
        assert!(b.discriminate(&mut tape, f, Some(wrong), 1.0, DropoutMode::Train, b.key(0, 0)).is_err());
    }

    #[test]
    fn zero_coefficient_blocks_feature_gradient() {
        let mut bundle = ModelBundle::new(small_spec(1, 0.5), 5, 6).unwrap();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape);
        let x = tape.constant(Tensor::full(vec![4, 3], 0.7).unwrap());
        let f = b.extract_features(&mut tape, x, DropoutMode::Train, b.key(0, 0)).unwrap();
        let u = tape.constant(Tensor::full(vec![4, 1], 0.3).unwrap());
        let d = b.discriminate(&mut tape, f, Some(u), 0.0, DropoutMode::Train, b.key(0, 0)).unwrap();
        let l = tape.log_clamped(d).unwrap();
        let l = tape.sum(l).unwrap();
        let grads = tape.backward(l).unwrap();
        let range = bundle.extractor_params();
        let mut params = bundle.params_mut();
        grads.accumulate_into(&mut params).unwrap();
        for p in &params[range] {
            assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
        }
        let d_range = bundle.discriminator_params();
        let params = bundle.params();
        assert!(params[d_range].iter().any(|p| p.grad().unwrap().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bundle = ModelBundle::new(small_spec(0, 0.5), 1, 1).unwrap();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape);
        let x = tape.constant(Tensor::full(vec![2, 5], 0.0).unwrap());
        assert!(b.extract_features(&mut tape, x, DropoutMode::Train, b.key(0, 0)).is_err());
    }

    #[test]
    fn invalid_dropout_index_rejected() {
        let spec = NetworkSpec {
            layer_dims: vec![2, 2],
            dropout_after: vec![3],
            activate_output: false,
            dropout_p: 0.5,
        };
        assert!(spec.validate().is_err());
    }
}
