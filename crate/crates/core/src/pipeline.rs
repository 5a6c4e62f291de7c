//! End-to-end separation of a full mixture with a trained model.

use crate::audio::AudioClip;
use crate::datapipe::{extract_segment, normalize, padded_len, segment_count, OverlapAdder, OverlapMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor3;

/// Segments per inference call.
pub const DEFAULT_INFER_BATCH: usize = 256;

/// Normalizes `mixture`, runs the model over every `hop`-spaced window in
/// groups of `infer_batch`, shifts and adds each source's channels back
/// together and restores the mixture's scale. Returns one clip per source,
/// each as long as the mixture.
pub fn separate<T: Real>(
    model: &Model<T>,
    mixture: &AudioClip,
    hop: usize,
    mode: OverlapMode,
    infer_batch: usize,
) -> Result<Vec<AudioClip>> {
    let cfg = model.config();
    let (channels, seg_len, sources) = (cfg.in_channels, cfg.segment_len, cfg.num_sources);
    if mixture.channels() != channels {
        return Err(Error::config(format!(
            "mixture has {} channels, model expects {channels}",
            mixture.channels()
        )));
    }
    if hop == 0 || hop > seg_len || infer_batch == 0 {
        return Err(Error::config(format!(
            "hop must be in 1..={seg_len} and the inference batch positive"
        )));
    }
    let (norm, stats) = normalize(mixture);
    let len = mixture.len();
    let count = segment_count(len, seg_len, hop);
    let padded = padded_len(len, seg_len, hop);
    let mut adders: Vec<OverlapAdder> = (0..sources).map(|_| OverlapAdder::new(channels, padded, seg_len)).collect();
    let per_in = channels * seg_len;
    let mut buf = vec![0.0; per_in];

    let mut start = 0;
    while start < count {
        let n = infer_batch.min(count - start);
        let mut data = Vec::with_capacity(n * per_in);
        for i in start..start + n {
            extract_segment(&norm, i * hop, seg_len, &mut buf);
            data.extend(buf.iter().map(|&x| T::of(x)));
        }
        let x = Tensor3::from_vec(n, channels, seg_len, data)?;
        let y = model.forward_infer(&x)?;
        for b in 0..n {
            let item: Vec<f64> = y.item(b).iter().map(|v| v.as_f64()).collect();
            for (l, adder) in adders.iter_mut().enumerate() {
                adder.add((start + b) * hop, &item[l * per_in..(l + 1) * per_in])?;
            }
        }
        start += n;
    }

    adders
        .into_iter()
        .map(|a| {
            let clip = a.finish(len, mode, mixture.sample_rate())?.map(|v| v * stats.std);
            if !clip.is_finite() {
                return Err(Error::numeric("separated signal contains non-finite samples"));
            }
            Ok(clip)
        })
        .collect()
}
