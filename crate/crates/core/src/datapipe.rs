//! Normalization, fixed-length segmentation, shift-and-add reconstruction
//! and training-pair assembly.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-song scalar statistics shared by all channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Zero-mean, unit-variance scaling with one mean and one standard deviation
/// computed jointly over every channel and sample.
pub fn normalize(clip: &AudioClip) -> (AudioClip, NormStats) {
    let n = (clip.channels() * clip.len()) as f64;
    let mean = clip.samples().iter().flatten().sum::<f64>() / n;
    let var = clip.samples().iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let out = clip.map(|x| (x - mean) / std);
    (out, NormStats { mean, std })
}

/// Divides each source by the mixture's standard deviation (no mean shift).
pub fn scale_targets(sources: &[AudioClip], stats: NormStats) -> Vec<AudioClip> {
    sources.iter().map(|s| s.map(|x| x / stats.std)).collect()
}

/// Segments of one clip, with their start offsets.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub segments: Tensor3<f64>,
    pub offsets: Vec<usize>,
    pub sample_rate: u32,
}

/// Number of segments needed to cover `len` samples.
pub fn segment_count(len: usize, seg_len: usize, hop: usize) -> usize {
    if len <= seg_len {
        1
    } else {
        (len - seg_len).div_ceil(hop) + 1
    }
}

/// Length after zero-padding the tail so the last segment is full.
pub fn padded_len(len: usize, seg_len: usize, hop: usize) -> usize {
    (segment_count(len, seg_len, hop) - 1) * hop + seg_len
}

fn check_seg(seg_len: usize, hop: usize) -> Result<()> {
    if seg_len == 0 || hop == 0 {
        return Err(Error::config("segment length and hop must be positive"));
    }
    Ok(())
}

/// Copies the segment starting at `offset` (zero beyond the clip end) into
/// `dst`, laid out channel-major.
pub fn extract_segment(clip: &AudioClip, offset: usize, seg_len: usize, dst: &mut [f64]) {
    debug_assert_eq!(dst.len(), clip.channels() * seg_len);
    for c in 0..clip.channels() {
        let row = &mut dst[c * seg_len..(c + 1) * seg_len];
        let src = clip.channel(c);
        let avail = src.len().saturating_sub(offset).min(seg_len);
        row[..avail].copy_from_slice(&src[offset..offset + avail]);
        row[avail..].fill(0.0);
    }
}

/// Cuts `clip` into `seg_len`-sample windows every `hop` samples, zero-padding
/// the tail.
pub fn segment(clip: &AudioClip, seg_len: usize, hop: usize) -> Result<SegmentBatch> {
    check_seg(seg_len, hop)?;
    let count = segment_count(clip.len(), seg_len, hop);
    let offsets: Vec<usize> = (0..count).map(|i| i * hop).collect();
    let per = clip.channels() * seg_len;
    let mut data = vec![0.0; count * per];
    for (i, &off) in offsets.iter().enumerate() {
        extract_segment(clip, off, seg_len, &mut data[i * per..(i + 1) * per]);
    }
    Ok(SegmentBatch {
        segments: Tensor3::from_vec(count, clip.channels(), seg_len, data)?,
        offsets,
        sample_rate: clip.sample_rate(),
    })
}

/// How overlapping segment samples are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Sum divided by the number of covering segments.
    #[default]
    Average,
    /// Plain sum.
    Sum,
}

/// Incremental shift-and-add accumulator.
#[derive(Clone, Debug)]
pub struct OverlapAdder {
    sums: Vec<Vec<f64>>,
    counts: Vec<u32>,
    seg_len: usize,
}

impl OverlapAdder {
    pub fn new(channels: usize, padded_len: usize, seg_len: usize) -> Self {
        OverlapAdder {
            sums: vec![vec![0.0; padded_len]; channels],
            counts: vec![0; padded_len],
            seg_len,
        }
    }

    /// Adds one segment (channel-major, `channels x seg_len`) at `offset`.
    pub fn add(&mut self, offset: usize, segment: &[f64]) -> Result<()> {
        if offset + self.seg_len > self.counts.len() {
            return Err(Error::config(format!(
                "segment at offset {offset} overruns padded length {}",
                self.counts.len()
            )));
        }
        for (c, sum) in self.sums.iter_mut().enumerate() {
            let seg = &segment[c * self.seg_len..(c + 1) * self.seg_len];
            for (acc, &v) in sum[offset..offset + self.seg_len].iter_mut().zip(seg) {
                *acc += v;
            }
        }
        for n in &mut self.counts[offset..offset + self.seg_len] {
            *n += 1;
        }
        Ok(())
    }

    /// Finalizes into a clip of `total_len` samples, dropping the tail pad.
    pub fn finish(self, total_len: usize, mode: OverlapMode, sample_rate: u32) -> Result<AudioClip> {
        if total_len > self.counts.len() {
            return Err(Error::config("total length exceeds the padded length"));
        }
        if let Some(t) = self.counts[..total_len].iter().position(|&n| n == 0) {
            return Err(Error::numeric(format!("internal error: sample {t} is covered by no segment")));
        }
        let samples = self
            .sums
            .into_iter()
            .map(|mut s| {
                s.truncate(total_len);
                if mode == OverlapMode::Average {
                    for (v, &n) in s.iter_mut().zip(&self.counts) {
                        *v /= n as f64;
                    }
                }
                s
            })
            .collect();
        AudioClip::new(sample_rate, samples)
    }
}

/// Reassembles a segmented clip of `total_len` samples.
pub fn overlap_add(batch: &SegmentBatch, total_len: usize, mode: OverlapMode) -> Result<AudioClip> {
    let (count, channels, seg_len) = batch.segments.shape();
    if count != batch.offsets.len() {
        return Err(Error::config("segment and offset counts differ"));
    }
    let padded = batch.offsets.iter().map(|o| o + seg_len).max().unwrap_or(0).max(total_len);
    let mut acc = OverlapAdder::new(channels, padded, seg_len);
    for (i, &off) in batch.offsets.iter().enumerate() {
        acc.add(off, batch.segments.item(i))?;
    }
    acc.finish(total_len, mode, batch.sample_rate)
}

/// Aligned input/target segment pairs. Inputs are `channels x seg_len`;
/// targets stack the sources source-major, `sources*channels x seg_len`.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub seg_len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl PairSet {
    pub fn new(seg_len: usize, in_channels: usize, out_channels: usize) -> Self {
        PairSet {
            seg_len,
            in_channels,
            out_channels,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.inputs.iter().map(|v| v.as_slice()).zip(self.targets.iter().map(|v| v.as_slice()))
    }

    pub fn extend(&mut self, other: PairSet) -> Result<()> {
        if self.is_empty() {
            *self = other;
            return Ok(());
        }
        if (other.seg_len, other.in_channels, other.out_channels)
            != (self.seg_len, self.in_channels, self.out_channels)
        {
            return Err(Error::config("pair sets have different layouts"));
        }
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
        Ok(())
    }
}

/// Normalizes the mixture, optionally scales the sources by its standard
/// deviation, and cuts both into aligned segments every `hop` samples.
pub fn make_training_pairs(
    mixture: &AudioClip,
    sources: &[AudioClip],
    seg_len: usize,
    hop: usize,
    scale: bool,
) -> Result<PairSet> {
    check_seg(seg_len, hop)?;
    if sources.is_empty() {
        return Err(Error::config("at least one target source is required"));
    }
    for s in sources {
        mixture.ensure_same_layout(s, "training source")?;
    }
    let (mix, stats) = normalize(mixture);
    let targets = if scale {
        scale_targets(sources, stats)
    } else {
        sources.to_vec()
    };
    let channels = mixture.channels();
    let mut pairs = PairSet::new(seg_len, channels, channels * sources.len());
    let per = channels * seg_len;
    for i in 0..segment_count(mixture.len(), seg_len, hop) {
        let off = i * hop;
        let mut input = vec![0.0; per];
        extract_segment(&mix, off, seg_len, &mut input);
        let mut target = vec![0.0; per * sources.len()];
        for (l, src) in targets.iter().enumerate() {
            extract_segment(src, off, seg_len, &mut target[l * per..(l + 1) * per]);
        }
        pairs.inputs.push(input);
        pairs.targets.push(target);
    }
    Ok(pairs)
}
