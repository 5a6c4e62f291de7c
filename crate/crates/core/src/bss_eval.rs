//! Image-based separation metrics (SDR, ISR, SIR, SAR).
//!
//! An estimate of one source image is split, channel by channel, into
//! least-squares projections onto the span of every `F`-tap delayed copy of
//! the reference channels: first onto the target source's own channels, then
//! onto the channels of all sources. Delays shift towards later samples and
//! are truncated at the end of the signal, so every vector keeps length `T`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Value reported for an error term of zero energy.
pub const METRIC_CAP_DB: f64 = 300.0;
pub const DEFAULT_FILTER_TAPS: usize = 512;
/// Ridge added to every Gram system, relative to its trace.
pub const RIDGE: f64 = 1e-12;
const MAX_RIDGE_ESCALATIONS: usize = 12;

/// Zero-padded FFT workspace shared by every signal of one evaluation.
struct Spectral {
    len: usize,
    taps: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Spectral {
    fn new(len: usize, taps: usize) -> Self {
        let fft_len = len + taps;
        let mut planner = FftPlanner::new();
        Spectral {
            len,
            taps,
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        buf
    }

    fn inverse_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// `r[k] = sum_t x[t] y[t - k]` at lags `-(F-1)..=F-1`, stored at
    /// index `k + F - 1`.
    fn xcorr(&self, x: &[Complex64], y: &[Complex64]) -> Vec<f64> {
        let prod: Vec<Complex64> = x.iter().zip(y).map(|(a, b)| a * b.conj()).collect();
        let c = self.inverse_real(prod);
        let f = self.taps as isize;
        (-(f - 1)..f)
            .map(|k| c[k.rem_euclid(self.fft_len as isize) as usize])
            .collect()
    }
}

/// Cholesky factor of a (ridged) Gram sub-system.
enum Factor {
    /// The targets are identically zero; every projection is zero.
    Zero,
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
}

fn factor(gram: DMatrix<f64>) -> Result<Factor> {
    let trace = gram.trace();
    if trace <= 0.0 {
        return Ok(Factor::Zero);
    }
    let n = gram.nrows();
    let mut lambda = RIDGE * trace;
    for _ in 0..MAX_RIDGE_ESCALATIONS {
        let mut g = gram.clone();
        for i in 0..n {
            g[(i, i)] += lambda;
        }
        if let Some(c) = nalgebra::Cholesky::new(g) {
            return Ok(Factor::Chol(c));
        }
        lambda *= 100.0;
    }
    Err(Error::numeric("Gram system could not be factorized"))
}

/// Delayed copies of a fixed list of signals.
struct DelayBasis {
    spectral: Spectral,
    signals: Vec<Vec<f64>>,
    spectra: Vec<Vec<Complex64>>,
    /// Full Gram matrix, block `(i, j)` at rows `i*F..`, columns `j*F..`.
    gram: DMatrix<f64>,
}

impl DelayBasis {
    fn new(signals: Vec<Vec<f64>>, taps: usize) -> Self {
        let len = signals[0].len();
        let spectral = Spectral::new(len, taps);
        let spectra: Vec<_> = signals.iter().map(|s| spectral.spectrum(s)).collect();
        let n = signals.len();
        let f = taps;
        let mut gram = DMatrix::zeros(n * f, n * f);
        let at = |x: &[f64], i: isize| if i >= 0 && (i as usize) < len { x[i as usize] } else { 0.0 };
        for i in 0..n {
            for j in i..n {
                let r = spectral.xcorr(&spectra[i], &spectra[j]);
                let mid = f - 1;
                for d in 0..f {
                    gram[(i * f, j * f + d)] = r[mid + d];
                    gram[(i * f + d, j * f)] = r[mid - d];
                }
                // Moving both delays by one drops exactly one product at the tail.
                for a in 1..f {
                    for b in 1..f {
                        let drop = at(&signals[i], len as isize - a as isize) * at(&signals[j], len as isize - b as isize);
                        gram[(i * f + a, j * f + b)] = gram[(i * f + a - 1, j * f + b - 1)] - drop;
                    }
                }
                if i != j {
                    for a in 0..f {
                        for b in 0..f {
                            gram[(j * f + b, i * f + a)] = gram[(i * f + a, j * f + b)];
                        }
                    }
                }
            }
        }
        DelayBasis {
            spectral,
            signals,
            spectra,
            gram,
        }
    }

    fn sub_gram(&self, subset: &[usize]) -> DMatrix<f64> {
        let f = self.spectral.taps;
        let idx: Vec<usize> = subset.iter().flat_map(|&i| (0..f).map(move |d| i * f + d)).collect();
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.gram[(idx[r], idx[c])])
    }

    fn factor(&self, subset: &[usize]) -> Result<Factor> {
        factor(self.sub_gram(subset))
    }

    /// Projection of the signal with spectrum `est` onto the delayed copies of
    /// `subset`.
    fn project(&self, subset: &[usize], fac: &Factor, est: &[Complex64]) -> Vec<f64> {
        let f = self.spectral.taps;
        let chol = match fac {
            Factor::Zero => return vec![0.0; self.spectral.len],
            Factor::Chol(c) => c,
        };
        let mut rhs = DVector::zeros(subset.len() * f);
        for (k, &i) in subset.iter().enumerate() {
            let r = self.spectral.xcorr(est, &self.spectra[i]);
            for d in 0..f {
                rhs[k * f + d] = r[f - 1 + d];
            }
        }
        let coef = chol.solve(&rhs);
        let mut acc = vec![Complex64::new(0.0, 0.0); self.spectral.fft_len];
        for (k, &i) in subset.iter().enumerate() {
            let h = self.spectral.spectrum(&coef.as_slice()[k * f..(k + 1) * f]);
            for ((a, x), y) in acc.iter_mut().zip(&self.spectra[i]).zip(&h) {
                *a += x * y;
            }
        }
        let mut out = self.spectral.inverse_real(acc);
        out.truncate(self.spectral.len);
        out
    }

    fn len(&self) -> usize {
        self.signals[0].len()
    }
}

fn check_taps(taps: usize) -> Result<()> {
    if taps == 0 {
        return Err(Error::config("filter length must be at least 1"));
    }
    Ok(())
}

/// Least-squares projection of `estimate` onto all `taps`-tap delayed copies
/// of every target signal.
pub fn project_filtered(targets: &[&[f64]], estimate: &[f64], taps: usize) -> Result<Vec<f64>> {
    check_taps(taps)?;
    if targets.is_empty() {
        return Ok(vec![0.0; estimate.len()]);
    }
    if estimate.is_empty() || targets.iter().any(|t| t.len() != estimate.len()) {
        return Err(Error::config("projection signals must be non-empty and of equal length"));
    }
    let basis = DelayBasis::new(targets.iter().map(|t| t.to_vec()).collect(), taps);
    let all: Vec<usize> = (0..targets.len()).collect();
    let fac = basis.factor(&all)?;
    Ok(basis.project(&all, &fac, &basis.spectral.spectrum(estimate)))
}

/// Split of one estimated image into target and error terms, one row per
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub s_true: Vec<Vec<f64>>,
    pub e_spat: Vec<Vec<f64>>,
    pub e_interf: Vec<Vec<f64>>,
    pub e_artif: Vec<Vec<f64>>,
    /// Error energy the regularized solver cannot distinguish from zero.
    pub noise_floor: f64,
}

fn energy(x: &[Vec<f64>]) -> f64 {
    x.iter().flatten().map(|v| v * v).sum()
}

fn energy_of_sum(parts: &[&[Vec<f64>]]) -> f64 {
    let rows = parts[0].len();
    let len = parts[0][0].len();
    let mut total = 0.0;
    for c in 0..rows {
        for t in 0..len {
            let v: f64 = parts.iter().map(|p| p[c][t]).sum();
            total += v * v;
        }
    }
    total
}

impl Decomposition {
    /// Sum of all four terms, which reproduces the estimate.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        (0..self.s_true.len())
            .map(|c| {
                (0..self.s_true[c].len())
                    .map(|t| self.s_true[c][t] + self.e_spat[c][t] + self.e_interf[c][t] + self.e_artif[c][t])
                    .collect()
            })
            .collect()
    }
}

/// Reusable evaluator for one set of reference images: the Gram systems are
/// built and factorized once and shared by every estimate.
pub struct ImageEvaluator {
    channels: usize,
    sources: usize,
    basis: DelayBasis,
    all: Factor,
    own: Vec<Factor>,
    taps: usize,
}

impl ImageEvaluator {
    pub fn new(references: &[AudioClip], taps: usize) -> Result<Self> {
        check_taps(taps)?;
        let first = references.first().ok_or_else(|| Error::config("no reference images"))?;
        for r in references {
            first.ensure_same_layout(r, "reference image")?;
        }
        let channels = first.channels();
        let signals: Vec<Vec<f64>> = references.iter().flat_map(|r| r.samples().iter().cloned()).collect();
        let basis = DelayBasis::new(signals, taps);
        let all_idx: Vec<usize> = (0..references.len() * channels).collect();
        let all = basis.factor(&all_idx)?;
        let own = (0..references.len())
            .map(|j| basis.factor(&Self::own_idx(j, channels)))
            .collect::<Result<_>>()?;
        Ok(ImageEvaluator {
            channels,
            sources: references.len(),
            basis,
            all,
            own,
            taps,
        })
    }

    fn own_idx(j: usize, channels: usize) -> Vec<usize> {
        (j * channels..(j + 1) * channels).collect()
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn decompose(&self, estimate: &AudioClip, source: usize) -> Result<Decomposition> {
        if source >= self.sources {
            return Err(Error::config(format!(
                "source index {source} out of range for {} references",
                self.sources
            )));
        }
        if estimate.channels() != self.channels || estimate.len() != self.basis.len() {
            return Err(Error::config(format!(
                "estimate is {}x{}, references are {}x{}",
                estimate.channels(),
                estimate.len(),
                self.channels,
                self.basis.len()
            )));
        }
        let own_idx = Self::own_idx(source, self.channels);
        let all_idx: Vec<usize> = (0..self.sources * self.channels).collect();
        let mut d = Decomposition {
            s_true: Vec::new(),
            e_spat: Vec::new(),
            e_interf: Vec::new(),
            e_artif: Vec::new(),
            noise_floor: 0.0,
        };
        for c in 0..self.channels {
            let est = estimate.channel(c);
            let spec = self.basis.spectral.spectrum(est);
            let s = &self.basis.signals[source * self.channels + c];
            let p_own = self.basis.project(&own_idx, &self.own[source], &spec);
            let p_all = if self.sources == 1 {
                p_own.clone()
            } else {
                self.basis.project(&all_idx, &self.all, &spec)
            };
            d.e_spat.push(p_own.iter().zip(s).map(|(p, s)| p - s).collect());
            d.e_interf.push(p_all.iter().zip(&p_own).map(|(a, o)| a - o).collect());
            d.e_artif.push(est.iter().zip(&p_all).map(|(e, a)| e - a).collect());
            d.s_true.push(s.clone());
        }
        // The ridge biases each projection by at most about RIDGE * trace,
        // which scales with the system size.
        let dim = (self.sources * self.channels * self.taps) as f64;
        d.noise_floor = RIDGE * dim * (energy(&d.s_true) + estimate.energy());
        Ok(d)
    }
}

/// Decomposes `estimate` as an estimate of `references[source]`.
pub fn decompose_image(
    estimate: &AudioClip,
    references: &[AudioClip],
    source: usize,
    taps: usize,
) -> Result<Decomposition> {
    if source >= references.len() {
        return Err(Error::config(format!(
            "source index {source} out of range for {} references",
            references.len()
        )));
    }
    ImageEvaluator::new(references, taps)?.decompose(estimate, source)
}

/// Metrics for one source, in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub sdr: f64,
    pub isr: f64,
    pub sir: f64,
    pub sar: f64,
}

impl SourceMetrics {
    pub const CAPPED: SourceMetrics = SourceMetrics {
        sdr: METRIC_CAP_DB,
        isr: METRIC_CAP_DB,
        sir: METRIC_CAP_DB,
        sar: METRIC_CAP_DB,
    };

    pub fn is_finite(&self) -> bool {
        [self.sdr, self.isr, self.sir, self.sar].iter().all(|v| v.is_finite())
    }
}

/// `10 log10(num / den)`, with a zero denominator mapped to the cap.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    floored_ratio_db(num, den, 0.0)
}

fn floored_ratio_db(num: f64, den: f64, floor: f64) -> f64 {
    if den <= floor {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

pub fn metrics_from_decomposition(d: &Decomposition) -> Result<SourceMetrics> {
    let s = energy(&d.s_true);
    if s <= 0.0 {
        return Err(Error::format("reference", "source image has zero energy; metrics are undefined"));
    }
    let db = |num, den| floored_ratio_db(num, den, d.noise_floor);
    Ok(SourceMetrics {
        sdr: db(s, energy_of_sum(&[&d.e_spat, &d.e_interf, &d.e_artif])),
        isr: db(s, energy(&d.e_spat)),
        sir: db(energy_of_sum(&[&d.s_true, &d.e_spat]), energy(&d.e_interf)),
        sar: db(energy_of_sum(&[&d.s_true, &d.e_spat, &d.e_interf]), energy(&d.e_artif)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sources: Vec<SourceMetrics>,
    pub filter_len: usize,
}

/// Whole-song metrics for every source; `estimates[j]` is scored against
/// `references[j]`.
pub fn evaluate_song(estimates: &[AudioClip], references: &[AudioClip], taps: usize) -> Result<EvalResult> {
    if estimates.len() != references.len() {
        return Err(Error::config(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let ev = ImageEvaluator::new(references, taps)?;
    let sources = estimates
        .iter()
        .enumerate()
        .map(|(j, e)| {
            metrics_from_decomposition(&ev.decompose(e, j)?)
                .map_err(|err| Error::format(format!("source {j}"), err.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok(EvalResult {
        sources,
        filter_len: taps,
    })
}

/// Median of a non-empty list; even counts take the midpoint.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianReport {
    pub songs: usize,
    /// Per-source medians across songs.
    pub sources: Vec<SourceMetrics>,
}

pub fn aggregate_median(results: &[EvalResult]) -> Result<MedianReport> {
    let first = results
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty result list"))?;
    let n = first.sources.len();
    if results.iter().any(|r| r.sources.len() != n) {
        return Err(Error::config("results disagree on the number of sources"));
    }
    let col = |j: usize, f: fn(&SourceMetrics) -> f64| -> f64 {
        median(&results.iter().map(|r| f(&r.sources[j])).collect::<Vec<_>>())
    };
    Ok(MedianReport {
        songs: results.len(),
        sources: (0..n)
            .map(|j| SourceMetrics {
                sdr: col(j, |m| m.sdr),
                isr: col(j, |m| m.isr),
                sir: col(j, |m| m.sir),
                sar: col(j, |m| m.sar),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tap_is_scalar_projection() {
        let t = [1.0, 2.0, -1.0, 0.5];
        let e = [0.3, -0.2, 0.9, 1.0];
        let p = project_filtered(&[&t], &e, 1).unwrap();
        let k = t.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / t.iter().map(|a| a * a).sum::<f64>();
        for (pi, ti) in p.iter().zip(&t) {
            assert!((pi - k * ti).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_targets_project_to_zero() {
        let p = project_filtered(&[&[0.0; 8]], &[1.0; 8], 3).unwrap();
        assert_eq!(p, vec![0.0; 8]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 10.0, 2.0, 3.0]), 2.5);
        assert!(aggregate_median(&[]).is_err());
    }

    #[test]
    fn ratio_caps() {
        assert_eq!(ratio_db(1.0, 0.0), METRIC_CAP_DB);
        assert_eq!(ratio_db(2.0, 2.0), 0.0);
        assert!((ratio_db(100.0, 1.0) - 20.0).abs() < 1e-12);
    }
}
