//! Reverse-mode recording of training-mode forward passes.
//!
//! Each primitive executed through a [`Tape`] stores its output in a value
//! slot and appends exactly one [`AdjointRecord`]. [`Tape::backward`] walks
//! the records in strict reverse order and accumulates parameter gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, FilterGrad, NormGrad};
use crate::real::Real;
use crate::tensor::{BatchNormParams, FilterSetParams, Tensor3};

/// Handle to a value stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot(usize);

/// Identifies a filter set in the parameter store a tape is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FilterKey(pub usize);

/// Identifies a batch-norm parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NormKey(pub usize);

/// Resolves parameter keys during the backward pass.
pub trait ParamStore<T> {
    fn filter(&self, key: FilterKey) -> &FilterSetParams<T>;
    fn norm(&self, key: NormKey) -> &BatchNormParams<T>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv1d,
    ConvTranspose1d,
    BatchNorm,
    Elu,
    Concat,
    L1Loss,
}

#[derive(Debug)]
enum Saved<T> {
    Conv { input: Slot, filter: FilterKey },
    ConvTranspose { input: Slot, filter: FilterKey },
    BatchNorm { input: Slot, cache: BatchNormCache<T>, norm: NormKey },
    Elu { input: Slot },
    Concat { parts: Vec<Slot> },
    L1Loss { pred: Slot, target: Slot },
}

/// What the backward pass needs from one forward operation.
#[derive(Debug)]
pub struct AdjointRecord<T> {
    saved: Saved<T>,
    output: Slot,
}

impl<T> AdjointRecord<T> {
    pub fn op_kind(&self) -> OpKind {
        match self.saved {
            Saved::Conv { .. } => OpKind::Conv1d,
            Saved::ConvTranspose { .. } => OpKind::ConvTranspose1d,
            Saved::BatchNorm { .. } => OpKind::BatchNorm,
            Saved::Elu { .. } => OpKind::Elu,
            Saved::Concat { .. } => OpKind::Concat,
            Saved::L1Loss { .. } => OpKind::L1Loss,
        }
    }

    pub fn output_slot(&self) -> Slot {
        self.output
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct TapeGrads<T> {
    pub filters: BTreeMap<FilterKey, FilterGrad<T>>,
    pub norms: BTreeMap<NormKey, NormGrad<T>>,
}

#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor3<T>>,
    records: Vec<AdjointRecord<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[AdjointRecord<T>] {
        &self.records
    }

    pub fn value(&self, slot: Slot) -> &Tensor3<T> {
        &self.values[slot.0]
    }

    /// Stores a leaf value (an input or target) without recording an op.
    pub fn leaf(&mut self, value: Tensor3<T>) -> Slot {
        self.values.push(value);
        Slot(self.values.len() - 1)
    }

    fn record(&mut self, saved: Saved<T>, value: Tensor3<T>) -> Slot {
        let output = self.leaf(value);
        self.records.push(AdjointRecord { saved, output });
        output
    }

    pub fn conv1d(&mut self, input: Slot, params: &FilterSetParams<T>, key: FilterKey) -> Result<Slot> {
        let y = ops::conv1d(self.value(input), params)?;
        Ok(self.record(Saved::Conv { input, filter: key }, y))
    }

    pub fn conv_transpose1d(&mut self, input: Slot, params: &FilterSetParams<T>, key: FilterKey) -> Result<Slot> {
        let y = ops::conv_transpose1d(self.value(input), params)?;
        Ok(self.record(Saved::ConvTranspose { input, filter: key }, y))
    }

    pub fn batchnorm(&mut self, input: Slot, params: &mut BatchNormParams<T>, key: NormKey) -> Result<Slot> {
        let (y, cache) = ops::batchnorm_train(self.value(input), params)?;
        Ok(self.record(Saved::BatchNorm { input, cache, norm: key }, y))
    }

    pub fn elu(&mut self, input: Slot) -> Slot {
        let y = ops::elu(self.value(input));
        self.record(Saved::Elu { input }, y)
    }

    pub fn concat(&mut self, parts: &[Slot]) -> Result<Slot> {
        if parts.len() == 1 {
            // Still recorded so the one-record-per-op invariant holds.
            let y = self.value(parts[0]).clone();
            return Ok(self.record(Saved::Concat { parts: parts.to_vec() }, y));
        }
        let refs: Vec<&Tensor3<T>> = parts.iter().map(|s| self.value(*s)).collect();
        let y = ops::concat_channels(&refs)?;
        Ok(self.record(Saved::Concat { parts: parts.to_vec() }, y))
    }

    /// Records the L1 loss between `pred` and `target`; the output slot holds
    /// a 1x1x1 tensor with the loss value.
    pub fn l1_loss(&mut self, pred: Slot, target: Slot) -> Result<(Slot, T)> {
        let loss = ops::l1_loss(self.value(pred), self.value(target))?;
        let slot = self.record(
            Saved::L1Loss { pred, target },
            Tensor3::from_vec(1, 1, 1, vec![loss]).expect("scalar"),
        );
        Ok((slot, loss))
    }

    /// Back-propagates `seed` (the gradient of the objective with respect to
    /// the last recorded output) through every record in reverse order.
    pub fn backward(&self, store: &impl ParamStore<T>, seed: Tensor3<T>) -> Result<TapeGrads<T>> {
        let last = self
            .records
            .last()
            .ok_or_else(|| Error::config("backward called on an empty tape"))?;
        if self.value(last.output).shape() != seed.shape() {
            return Err(Error::config("backward seed does not match the last output"));
        }
        let mut grads: Vec<Option<Tensor3<T>>> = vec![None; self.values.len()];
        grads[last.output.0] = Some(seed);
        let mut out = TapeGrads::default();

        fn push<T: Real>(grads: &mut [Option<Tensor3<T>>], slot: Slot, g: Tensor3<T>) {
            match &mut grads[slot.0] {
                Some(existing) => existing.add_assign(&g),
                empty => *empty = Some(g),
            }
        }

        for rec in self.records.iter().rev() {
            let Some(gy) = grads[rec.output.0].take() else {
                continue;
            };
            match &rec.saved {
                Saved::Conv { input, filter } => {
                    let p = store.filter(*filter);
                    let (gx, gp) = ops::conv1d_backward(self.value(*input), p, &gy);
                    merge_filter(&mut out, *filter, gp);
                    push(&mut grads, *input, gx);
                }
                Saved::ConvTranspose { input, filter } => {
                    let p = store.filter(*filter);
                    let (gx, gp) = ops::conv_transpose1d_backward(self.value(*input), p, &gy);
                    merge_filter(&mut out, *filter, gp);
                    push(&mut grads, *input, gx);
                }
                Saved::BatchNorm { input, cache, norm } => {
                    let p = store.norm(*norm);
                    let (gx, gp) = ops::batchnorm_backward(cache, p, &gy);
                    match out.norms.get_mut(norm) {
                        Some(g) => g.accumulate(&gp),
                        None => {
                            out.norms.insert(*norm, gp);
                        }
                    }
                    push(&mut grads, *input, gx);
                }
                Saved::Elu { input } => {
                    let gx = ops::elu_backward(self.value(*input), self.value(rec.output), &gy);
                    push(&mut grads, *input, gx);
                }
                Saved::Concat { parts } => {
                    let channels: Vec<usize> = parts.iter().map(|s| self.value(*s).channels()).collect();
                    for (slot, g) in parts.iter().zip(ops::split_channels(&gy, &channels)) {
                        push(&mut grads, *slot, g);
                    }
                }
                Saved::L1Loss { pred, target } => {
                    let scale = gy.data()[0];
                    let gx = ops::l1_loss_backward(self.value(*pred), self.value(*target), scale);
                    push(&mut grads, *pred, gx);
                }
            }
        }
        Ok(out)
    }
}

fn merge_filter<T: Real>(out: &mut TapeGrads<T>, key: FilterKey, g: FilterGrad<T>) {
    match out.filters.get_mut(&key) {
        Some(existing) => existing.accumulate(&g),
        None => {
            out.filters.insert(key, g);
        }
    }
}
