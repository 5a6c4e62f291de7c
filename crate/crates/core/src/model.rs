//! The multi-resolution convolutional auto-encoder.
//!
//! Every hidden layer holds several filter sets of different lengths. Each
//! set runs its own convolution (encoder) or transposed convolution
//! (decoder), followed by batch norm and ELU; the set outputs are stacked
//! along the channel axis in config order. A final linear transposed
//! convolution maps the last hidden layer to `num_sources x in_channels`
//! output channels, ordered source-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tape::{FilterKey, NormKey, ParamStore, Slot, Tape};
use crate::tensor::{BatchNormParams, FilterSetParams, Tensor3};

/// One filter set: `filters` filters of `length` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub filters: usize,
    pub length: usize,
}

impl SetSpec {
    pub const fn new(filters: usize, length: usize) -> Self {
        SetSpec { filters, length }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    EncoderConv,
    DecoderTranspose,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub sets: Vec<SetSpec>,
}

impl LayerSpec {
    pub fn new(sets: &[(usize, usize)]) -> Self {
        LayerSpec {
            sets: sets.iter().map(|&(k, a)| SetSpec::new(k, a)).collect(),
        }
    }

    /// Feature maps produced by the layer (sum of the set filter counts).
    pub fn out_channels(&self) -> usize {
        self.sets.iter().map(|s| s.filters).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub segment_len: usize,
    pub in_channels: usize,
    pub num_sources: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub output_filter_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Two encoder and two decoder layers of five sets each, lengths
    /// 5/50/256/512/1025, on 1025-sample stereo segments with one source.
    fn default() -> Self {
        const LENGTHS: [usize; 5] = [5, 50, 256, 512, 1025];
        let layer = |counts: [usize; 5]| LayerSpec {
            sets: counts.iter().zip(LENGTHS).map(|(&k, a)| SetSpec::new(k, a)).collect(),
        };
        ModelConfig {
            segment_len: 1025,
            in_channels: 2,
            num_sources: 1,
            encoder: vec![layer([20; 5]), layer([50, 25, 20, 20, 20])],
            decoder: vec![layer([50, 25, 20, 20, 20]), layer([20; 5])],
            output_filter_len: 1025,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small reference model used for gradient verification.
    pub fn tiny() -> Self {
        ModelConfig {
            segment_len: 32,
            in_channels: 2,
            num_sources: 1,
            encoder: vec![LayerSpec::new(&[(2, 3), (2, 5)])],
            decoder: vec![LayerSpec::new(&[(2, 3), (2, 5)])],
            output_filter_len: 7,
            seed: 0,
        }
    }

    /// Output channel count, `num_sources x in_channels`.
    pub fn output_channels(&self) -> usize {
        self.num_sources * self.in_channels
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerKind, &LayerSpec)> {
        self.encoder
            .iter()
            .map(|l| (LayerKind::EncoderConv, l))
            .chain(self.decoder.iter().map(|l| (LayerKind::DecoderTranspose, l)))
    }

    /// Channel count entering each hidden layer, then the final output count.
    pub fn channel_plan(&self) -> Vec<usize> {
        let mut plan = vec![self.in_channels];
        plan.extend(self.layers().map(|(_, l)| l.out_channels()));
        plan.push(self.output_channels());
        plan
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || self.in_channels == 0 || self.num_sources == 0 {
            return Err(Error::config(
                "segment_len, in_channels and num_sources must all be positive",
            ));
        }
        if self.output_filter_len == 0 || self.output_filter_len > self.segment_len {
            return Err(Error::config(format!(
                "output filter length {} must lie in 1..={}",
                self.output_filter_len, self.segment_len
            )));
        }
        for (i, (_, layer)) in self.layers().enumerate() {
            if layer.sets.is_empty() {
                return Err(Error::config(format!("layer {i} has no filter sets")));
            }
            for set in &layer.sets {
                if set.filters == 0 || set.length == 0 {
                    return Err(Error::config(format!("layer {i} has an empty filter set")));
                }
                if set.length > self.segment_len {
                    return Err(Error::config(format!(
                        "layer {i}: filter length {} exceeds segment length {}",
                        set.length, self.segment_len
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One filter set together with the batch norm that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct SetUnit<T> {
    pub filters: FilterSetParams<T>,
    pub norm: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub sets: Vec<SetUnit<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    output: FilterSetParams<T>,
}

/// Gradients for every trainable parameter group, in [`Model::param_groups`]
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub groups: Vec<(String, Vec<T>)>,
}

impl<T: Real> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: T) {
        for (_, g) in &mut self.groups {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

impl<T: Real> Model<T> {
    /// Wires the layers described by `config` with zeroed weights, unit
    /// gamma and zero beta. Call [`Model::init_params`] for random weights.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut channels = config.in_channels;
        for (kind, spec) in config.layers() {
            let mut sets = Vec::with_capacity(spec.sets.len());
            for set in &spec.sets {
                let filters = match kind {
                    LayerKind::EncoderConv => FilterSetParams::conv(set.filters, channels, set.length)?,
                    LayerKind::DecoderTranspose => FilterSetParams::transpose(set.filters, channels, set.length)?,
                };
                sets.push(SetUnit {
                    filters,
                    norm: BatchNormParams::new(set.filters)?,
                });
            }
            layers.push(Layer { kind, sets });
            channels = spec.out_channels();
        }
        let output = FilterSetParams::transpose(config.output_channels(), channels, config.output_filter_len)?;
        Ok(Model { config, layers, output })
    }

    /// Builds and randomly initializes with the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let seed = config.seed;
        let mut m = Self::build(config)?;
        m.init_params(seed);
        Ok(m)
    }

    /// Glorot-uniform weights per filter set, zero biases and beta, unit
    /// gamma, reset running statistics. Deterministic given `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |p: &mut FilterSetParams<T>| {
            let fan_in = p.in_channels * p.filter_len;
            let fan_out = p.num_filters * p.filter_len;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut p.weights {
                *w = T::of(rng.random_range(-limit..=limit));
            }
            p.bias.iter_mut().for_each(|b| *b = T::zero());
        };
        for layer in &mut self.layers {
            for set in &mut layer.sets {
                fill(&mut set.filters);
                let n = set.norm.channels();
                set.norm = BatchNormParams::new(n).expect("non-empty");
            }
        }
        fill(&mut self.output);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn output_layer(&self) -> &FilterSetParams<T> {
        &self.output
    }

    pub fn output_layer_mut(&mut self) -> &mut FilterSetParams<T> {
        &mut self.output
    }

    /// Number of trainable scalars (weights, biases, gamma, beta).
    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.output.is_finite()
            && self
                .layers
                .iter()
                .flat_map(|l| &l.sets)
                .all(|s| s.filters.is_finite() && s.norm.is_finite())
    }

    /// Checks that a checkpointed model can serve a run configured with
    /// `expected` (same channels, sources and segment length).
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let ours = &self.config;
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::config(format!("config mismatch: checkpoint {what} is {a}, run expects {b}")))
        };
        if ours.segment_len != expected.segment_len {
            return mismatch("segment_len", ours.segment_len, expected.segment_len);
        }
        if ours.in_channels != expected.in_channels {
            return mismatch("in_channels", ours.in_channels, expected.in_channels);
        }
        if ours.num_sources != expected.num_sources {
            return mismatch("num_sources", ours.num_sources, expected.num_sources);
        }
        Ok(())
    }

    fn filter_keys(&self) -> usize {
        self.layers.iter().map(|l| l.sets.len()).sum()
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.channels() != self.config.in_channels || x.length() != self.config.segment_len {
            return Err(Error::config(format!(
                "model expects batches of {}x{}, got {}x{}",
                self.config.in_channels,
                self.config.segment_len,
                x.channels(),
                x.length()
            )));
        }
        Ok(())
    }

    /// Runs the network; train mode uses batch statistics and updates the
    /// running ones, infer mode leaves the model untouched.
    pub fn forward(&mut self, x: &Tensor3<T>, mode: Mode) -> Result<Tensor3<T>> {
        match mode {
            Mode::Infer => self.forward_infer(x),
            Mode::Train => {
                let mut tape = Tape::new();
                let input = tape.leaf(x.clone());
                let out = self.forward_train(&mut tape, input)?;
                Ok(tape.value(out).clone())
            }
        }
    }

    pub fn forward_infer(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut parts = Vec::with_capacity(layer.sets.len());
            for set in &layer.sets {
                let y = match layer.kind {
                    LayerKind::EncoderConv => ops::conv1d(&h, &set.filters)?,
                    LayerKind::DecoderTranspose => ops::conv_transpose1d(&h, &set.filters)?,
                };
                let y = ops::batchnorm_infer(&y, &set.norm)?;
                parts.push(ops::elu(&y));
            }
            let refs: Vec<&Tensor3<T>> = parts.iter().collect();
            h = ops::concat_channels(&refs)?;
        }
        let out = ops::conv_transpose1d(&h, &self.output)?;
        out.ensure_finite("model output")?;
        Ok(out)
    }

    /// Training-mode forward pass recorded on `tape`; returns the output slot.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, input: Slot) -> Result<Slot> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        let mut key = 0;
        for layer in &mut self.layers {
            let mut parts = Vec::with_capacity(layer.sets.len());
            for set in &mut layer.sets {
                let y = match layer.kind {
                    LayerKind::EncoderConv => tape.conv1d(h, &set.filters, FilterKey(key))?,
                    LayerKind::DecoderTranspose => tape.conv_transpose1d(h, &set.filters, FilterKey(key))?,
                };
                let y = tape.batchnorm(y, &mut set.norm, NormKey(key))?;
                parts.push(tape.elu(y));
                key += 1;
            }
            h = tape.concat(&parts)?;
        }
        let out = tape.conv_transpose1d(h, &self.output, FilterKey(key))?;
        tape.value(out).ensure_finite("model output")?;
        Ok(out)
    }

    /// L1 loss summed over the batch and gradients of every trainable
    /// parameter, each multiplied by `grad_scale`.
    pub fn loss_and_gradients_scaled(
        &mut self,
        batch: &Tensor3<T>,
        targets: &Tensor3<T>,
        grad_scale: T,
    ) -> Result<(T, GradientSet<T>)> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let out = self.forward_train(&mut tape, input)?;
        if tape.value(out).shape() != targets.shape() {
            return Err(Error::config(format!(
                "targets have shape {:?}, model output is {:?}",
                targets.shape(),
                tape.value(out).shape()
            )));
        }
        let target = tape.leaf(targets.clone());
        let (_, loss) = tape.l1_loss(out, target)?;
        if !loss.is_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        let seed = Tensor3::from_vec(1, 1, 1, vec![grad_scale])?;
        let grads = tape.backward(self, seed)?;

        let mut groups = Vec::new();
        let mut key = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for (si, set) in layer.sets.iter().enumerate() {
                let prefix = group_prefix(layer.kind, li, self.config.encoder.len(), si);
                let fg = grads
                    .filters
                    .get(&FilterKey(key))
                    .cloned()
                    .unwrap_or_else(|| ops::FilterGrad::zeros_like(&set.filters));
                let ng = grads.norms.get(&NormKey(key)).cloned().unwrap_or_else(|| ops::NormGrad {
                    gamma: vec![T::zero(); set.norm.channels()],
                    beta: vec![T::zero(); set.norm.channels()],
                });
                groups.push((format!("{prefix}.weight"), fg.weights));
                groups.push((format!("{prefix}.bias"), fg.bias));
                groups.push((format!("{prefix}.gamma"), ng.gamma));
                groups.push((format!("{prefix}.beta"), ng.beta));
                key += 1;
            }
        }
        let og = grads
            .filters
            .get(&FilterKey(key))
            .cloned()
            .unwrap_or_else(|| ops::FilterGrad::zeros_like(&self.output));
        groups.push(("output.weight".to_string(), og.weights));
        groups.push(("output.bias".to_string(), og.bias));
        Ok((loss, GradientSet { groups }))
    }

    pub fn loss_and_gradients(&mut self, batch: &Tensor3<T>, targets: &Tensor3<T>) -> Result<(T, GradientSet<T>)> {
        self.loss_and_gradients_scaled(batch, targets, T::one())
    }

    /// Trainable parameter groups in a fixed order: per set weight, bias,
    /// gamma, beta; then the output weight and bias.
    pub fn param_groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (si, set) in layer.sets.iter().enumerate() {
                let prefix = group_prefix(layer.kind, li, self.config.encoder.len(), si);
                out.push((format!("{prefix}.weight"), &set.filters.weights));
                out.push((format!("{prefix}.bias"), &set.filters.bias));
                out.push((format!("{prefix}.gamma"), &set.norm.gamma));
                out.push((format!("{prefix}.beta"), &set.norm.beta));
            }
        }
        out.push(("output.weight".to_string(), &self.output.weights));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    /// Mutable view of the trainable groups, same order as [`Model::param_groups`].
    pub fn param_groups_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for set in &mut layer.sets {
                out.push(&mut set.filters.weights);
                out.push(&mut set.filters.bias);
                out.push(&mut set.norm.gamma);
                out.push(&mut set.norm.beta);
            }
        }
        out.push(&mut self.output.weights);
        out.push(&mut self.output.bias);
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    sets: l
                        .sets
                        .iter()
                        .map(|s| SetUnit {
                            filters: s.filters.cast(),
                            norm: s.norm.cast(),
                        })
                        .collect(),
                })
                .collect(),
            output: self.output.cast(),
        }
    }
}

pub(crate) fn group_prefix(kind: LayerKind, layer: usize, encoder_layers: usize, set: usize) -> String {
    match kind {
        LayerKind::EncoderConv => format!("encoder.{layer}.set{set}"),
        LayerKind::DecoderTranspose => format!("decoder.{}.set{set}", layer - encoder_layers),
    }
}

impl<T: Real> ParamStore<T> for Model<T> {
    fn filter(&self, key: FilterKey) -> &FilterSetParams<T> {
        if key.0 == self.filter_keys() {
            return &self.output;
        }
        let mut k = key.0;
        for layer in &self.layers {
            if k < layer.sets.len() {
                return &layer.sets[k].filters;
            }
            k -= layer.sets.len();
        }
        panic!("filter key {} out of range", key.0)
    }

    fn norm(&self, key: NormKey) -> &BatchNormParams<T> {
        let mut k = key.0;
        for layer in &self.layers {
            if k < layer.sets.len() {
                return &layer.sets[k].norm;
            }
            k -= layer.sets.len();
        }
        panic!("norm key {} out of range", key.0)
    }
}
