use crate::error::{Error, Result};

/// Multi-channel time-domain audio, one `Vec` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    sample_rate: u32,
    samples: Vec<Vec<f64>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<Vec<f64>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config("audio clip needs at least one channel"))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::config("audio clip is empty"));
        }
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::config("audio clip channels differ in length"));
        }
        Ok(AudioClip { sample_rate, samples })
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Result<Self> {
        Self::new(sample_rate, vec![vec![0.0; len]; channels])
    }

    #[inline]
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    /// Samples per channel.
    #[inline]
    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.samples[c]
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec<f64>> {
        self.samples
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().flatten().all(|x| x.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().flatten().map(|x| x * x).sum()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> AudioClip {
        AudioClip {
            sample_rate: self.sample_rate,
            samples: self
                .samples
                .iter()
                .map(|c| c.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    /// Checks that `other` has the same channel count and length.
    pub fn ensure_same_layout(&self, other: &AudioClip, what: &str) -> Result<()> {
        if self.channels() != other.channels() || self.len() != other.len() {
            return Err(Error::config(format!(
                "{what}: clip is {}x{}, expected {}x{}",
                other.channels(),
                other.len(),
                self.channels(),
                self.len()
            )));
        }
        Ok(())
    }
}
