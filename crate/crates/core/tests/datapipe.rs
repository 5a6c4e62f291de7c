use mrcae_core::datapipe::{
    make_training_pairs, normalize, overlap_add, scale_targets, segment, segment_count, OverlapMode,
};
use mrcae_core::dataset::{write_synthetic_corpus, Manifest, Split};
use mrcae_core::synth::{synth_dataset, SourceKind, SourceRecipe, SynthSpec};
use mrcae_core::wav::{read_wav, write_wav};
use mrcae_core::AudioClip;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_clip(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> AudioClip {
    let samples = (0..channels)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    AudioClip::new(16000, samples).unwrap()
}

fn short_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        duration: 0.5,
        ..SynthSpec::default()
    }
}

#[test]
fn pcm16_written_by_hound_decodes_with_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pcm.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 22050,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let frames: [(i16, i16); 3] = [(-32768, 32767), (0, 1), (16384, -16384)];
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for (l, r) in frames {
        w.write_sample(l).unwrap();
        w.write_sample(r).unwrap();
    }
    w.finalize().unwrap();

    let clip = read_wav(&path).unwrap();
    assert_eq!(clip.sample_rate(), 22050);
    assert_eq!(clip.channels(), 2);
    assert_eq!(clip.channel(0), &[-1.0, 0.0, 0.5]);
    assert_eq!(clip.channel(1), &[32767.0 / 32768.0, 1.0 / 32768.0, -0.5]);
}

#[test]
fn float_wav_readable_by_hound_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clip = random_clip(&mut rng, 3, 257).map(|x| x as f32 as f64);
    write_wav(&clip, &path).unwrap();

    let mut r = hound::WavReader::open(&path).unwrap();
    assert_eq!(r.spec().channels, 3);
    assert_eq!(r.spec().sample_format, hound::SampleFormat::Float);
    let interleaved: Vec<f32> = r.samples::<f32>().map(|s| s.unwrap()).collect();
    assert_eq!(interleaved[3 * 10 + 2] as f64, clip.channel(2)[10]);

    assert_eq!(read_wav(&path).unwrap(), clip);
}

#[test]
fn read_errors_carry_path_and_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.wav");
    std::fs::write(&path, b"RIFF\x04\x00\x00\x00WAVE").unwrap();
    let err = read_wav(&path).unwrap_err().to_string();
    assert!(err.contains("bad.wav") && err.contains("fmt"), "{err}");
}

#[test]
fn segment_count_examples() {
    assert_eq!(segment_count(1025, 1025, 16), 1);
    assert_eq!(segment_count(1041, 1025, 16), 2);
    assert_eq!(segment_count(10, 4, 2), 4);
    assert_eq!(segment_count(3, 1025, 16), 1);
    let b = segment(&AudioClip::silence(8000, 1, 1041).unwrap(), 1025, 16).unwrap();
    assert_eq!(b.offsets, vec![0, 16]);
}

/// Enumerates window starts directly: every `k*hop` until a window reaches
/// the end of the signal.
fn enumerate_offsets(len: usize, seg_len: usize, hop: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out.last().unwrap() + seg_len < len {
        out.push(out.last().unwrap() + hop);
    }
    out
}

#[test]
fn offsets_match_enumeration() {
    for len in 1..60 {
        for seg_len in 1..12 {
            for hop in 1..=seg_len {
                let clip = AudioClip::silence(8000, 1, len).unwrap();
                let b = segment(&clip, seg_len, hop).unwrap();
                assert_eq!(b.offsets, enumerate_offsets(len, seg_len, hop), "{len} {seg_len} {hop}");
                assert_eq!(b.segments.batch(), segment_count(len, seg_len, hop));
            }
        }
    }
}

#[test]
fn hop_sixteen_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for len in [1025, 1026, 1041, 4000, 7777] {
        let x = random_clip(&mut rng, 2, len);
        let b = segment(&x, 1025, 16).unwrap();
        let y = overlap_add(&b, len, OverlapMode::Average).unwrap();
        assert_eq!(y.len(), len);
        for c in 0..2 {
            for (a, b) in x.channel(c).iter().zip(y.channel(c)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn overlap_averages_and_sums() {
    // seg_len 4, hop 2 over length 6: two windows overlapping on [2,4)
    let x = AudioClip::silence(8000, 1, 6).unwrap();
    let mut b = segment(&x, 4, 2).unwrap();
    assert_eq!(b.offsets, vec![0, 2]);
    for t in 0..4 {
        b.segments.set(0, 0, t, 1.0);
        b.segments.set(1, 0, t, 3.0);
    }
    let avg = overlap_add(&b, 6, OverlapMode::Average).unwrap();
    assert_eq!(avg.channel(0), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    let sum = overlap_add(&b, 6, OverlapMode::Sum).unwrap();
    assert_eq!(sum.channel(0), &[1.0, 1.0, 4.0, 4.0, 3.0, 3.0]);
}

#[test]
fn non_overlapping_is_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_clip(&mut rng, 2, 40);
    let b = segment(&x, 8, 8).unwrap();
    assert_eq!(b.segments.batch(), 5);
    assert_eq!(overlap_add(&b, 40, OverlapMode::Average).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_add_inverts_segment(len in 1usize..3000, seg_len in 1usize..300, hop_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let hop = 1 + ((seg_len - 1) as f64 * hop_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_clip(&mut rng, 2, len);
        let b = segment(&x, seg_len, hop).unwrap();
        for w in b.offsets.windows(2) {
            prop_assert_eq!(w[1] - w[0], hop);
        }
        prop_assert!(b.offsets.last().unwrap() + seg_len >= len);
        let y = overlap_add(&b, len, OverlapMode::Average).unwrap();
        for c in 0..2 {
            for (a, b) in x.channel(c).iter().zip(y.channel(c)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalized_clip_is_standard(len in 2usize..2000, offset in -5.0f64..5.0, gain in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_clip(&mut rng, 2, len).map(|v| gain * v + offset);
        let (y, st) = normalize(&x);
        let n = (2 * len) as f64;
        let mean: f64 = y.samples().iter().flatten().sum::<f64>() / n;
        let var: f64 = y.samples().iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        prop_assert!(st.std > 0.0);
    }
}

#[test]
fn scale_targets_examples() {
    let s = AudioClip::new(8000, vec![vec![2.0, 4.0]]).unwrap();
    let st = mrcae_core::datapipe::NormStats { mean: 0.3, std: 2.0 };
    assert_eq!(scale_targets(&[s.clone()], st)[0].channel(0), &[1.0, 2.0]);
    let unit = mrcae_core::datapipe::NormStats { mean: 0.3, std: 1.0 };
    assert_eq!(scale_targets(&[s.clone()], unit)[0], s);
}

#[test]
fn scaled_targets_sum_to_normalized_mixture_plus_offset() {
    for seed in 0..4 {
        let (mix, srcs) = synth_dataset(&short_spec(seed)).unwrap();
        let (norm, st) = normalize(&mix);
        let scaled = scale_targets(&srcs, st);
        for c in 0..mix.channels() {
            for t in 0..mix.len() {
                let sum: f64 = scaled.iter().map(|s| s.channel(c)[t]).sum();
                assert!((sum - (norm.channel(c)[t] + st.mean / st.std)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn training_pairs_follow_segmentation() {
    let spec = short_spec(3);
    let (mix, srcs) = synth_dataset(&spec).unwrap();
    let len = mix.len();
    let pairs = make_training_pairs(&mix, &srcs, 1025, 1025, true).unwrap();
    assert_eq!(pairs.len(), segment_count(len, 1025, 1025));
    assert_eq!(pairs.out_channels, 4);

    let (_, st) = normalize(&mix);
    let k = 3;
    let (_, target) = pairs.iter().nth(k).unwrap();
    // source-major: [source 0 ch 0, source 0 ch 1, source 1 ch 0, source 1 ch 1]
    for l in 0..2 {
        for c in 0..2 {
            for t in 0..1025 {
                let expect = srcs[l].channel(c)[k * 1025 + t] / st.std;
                assert_eq!(target[(l * 2 + c) * 1025 + t], expect);
            }
        }
    }

    // one source, clip exactly one segment long
    let clip = AudioClip::new(8000, vec![vec![0.5; 64], vec![-0.5; 64]]).unwrap();
    assert_eq!(make_training_pairs(&clip, &[clip.clone()], 64, 64, true).unwrap().len(), 1);

    let short = AudioClip::silence(8000, 2, 10).unwrap();
    assert!(make_training_pairs(&clip, &[short], 64, 64, true).is_err());
}

#[test]
fn unscaled_targets_keep_raw_amplitude() {
    let (mix, srcs) = synth_dataset(&short_spec(1)).unwrap();
    let pairs = make_training_pairs(&mix, &srcs, 100, 100, false).unwrap();
    let (_, target) = pairs.iter().next().unwrap();
    assert_eq!(target[5], srcs[0].channel(0)[5]);
}

/// Fraction of energy whose frequency lies in `[lo, hi]`, by direct DFT.
fn band_energy_fraction(x: &[f64], rate: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    let mut inside = 0.0;
    for k in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        let p = re * re + im * im;
        total += p;
        let f = k as f64 * rate / n as f64;
        if (lo..=hi).contains(&f) {
            inside += p;
        }
    }
    inside / total
}

#[test]
fn tone_stack_energy_stays_in_band() {
    let spec = SynthSpec {
        seed: 21,
        duration: 0.25,
        sample_rate: 16000,
        sources: vec![
            SourceRecipe {
                name: "a".into(),
                kind: SourceKind::ToneStack,
                band: [200.0, 400.0],
                pan: vec![1.0],
                rms: 0.1,
            },
            SourceRecipe {
                name: "b".into(),
                kind: SourceKind::FilteredNoise,
                band: [2000.0, 6000.0],
                pan: vec![1.0],
                rms: 0.1,
            },
        ],
    };
    let (_, srcs) = synth_dataset(&spec).unwrap();
    let frac = band_energy_fraction(srcs[0].channel(0), 16000.0, 150.0, 450.0);
    assert!(frac >= 0.95, "tone stack in-band fraction {frac}");
    let frac = band_energy_fraction(srcs[1].channel(0), 16000.0, 1500.0, 6500.0);
    assert!(frac >= 0.9, "noise in-band fraction {frac}");
}

#[test]
fn synthetic_corpus_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_spec(7);
    let m = write_synthetic_corpus(&spec, 6, dir.path()).unwrap();
    let counts: Vec<usize> = [Split::Train, Split::Validation, Split::Test]
        .iter()
        .map(|s| m.songs_in(*s).count())
        .collect();
    assert_eq!(counts, vec![4, 1, 1]);

    let loaded = Manifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);
    let song = loaded.load_song(dir.path(), &m.songs[0].name).unwrap();
    for c in 0..2 {
        for t in 0..song.mixture.len() {
            assert_eq!(song.mixture.channel(c)[t], song.sources[0].channel(c)[t] + song.sources[1].channel(c)[t]);
        }
    }

    let again = tempfile::tempdir().unwrap();
    write_synthetic_corpus(&spec, 6, again.path()).unwrap();
    for name in ["song000/mixture.wav", "song005/noise.wav", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap()
        );
    }
    std::fs::remove_file(dir.path().join("song002/tones.wav")).unwrap();
    let err = loaded.load_song(dir.path(), "song002").unwrap_err().to_string();
    assert!(err.contains("song002"), "{err}");
}

mod separation {
    use mrcae_core::datapipe::OverlapMode;
    use mrcae_core::pipeline::separate;
    use mrcae_core::{AudioClip, LayerSpec, Model, ModelConfig};

    use super::*;

    /// No hidden layers and a single centred unit tap per channel: the model
    /// copies its input, so separation must give back the mixture.
    fn identity_model(sources: usize) -> Model<f64> {
        let cfg = ModelConfig {
            segment_len: 64,
            in_channels: 2,
            num_sources: sources,
            encoder: vec![],
            decoder: vec![],
            output_filter_len: 1,
            seed: 0,
        };
        let mut m = Model::<f64>::build(cfg).unwrap();
        let out = m.output_layer_mut();
        // transpose layout: [input channel][output channel][tap]
        for c in 0..2 {
            for l in 0..sources {
                out.weights[c * out.in_channels + l * 2 + c] = 1.0;
            }
        }
        m
    }

    #[test]
    fn identity_model_reproduces_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mix = random_clip(&mut rng, 2, 1000).map(|v| 0.3 * v + 0.05);
        let outs = separate(&identity_model(2), &mix, 16, OverlapMode::Average, 7).unwrap();
        assert_eq!(outs.len(), 2);
        let (_, st) = normalize(&mix);
        for out in &outs {
            assert_eq!(out.len(), 1000);
            for c in 0..2 {
                for (a, b) in out.channel(c).iter().zip(mix.channel(c)) {
                    // the mean is not restored
                    assert!((a - (b - st.mean)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grouping_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mix = random_clip(&mut rng, 2, 3001);
        let mut cfg = ModelConfig::tiny();
        cfg.encoder = vec![LayerSpec::new(&[(3, 5)])];
        cfg.decoder = vec![LayerSpec::new(&[(2, 3)])];
        let m = Model::<f32>::new(cfg).unwrap();
        let a = separate(&m, &mix, 8, OverlapMode::Average, 1).unwrap();
        let b = separate(&m, &mix, 8, OverlapMode::Average, 256).unwrap();
        let c = separate(&m, &mix, 8, OverlapMode::Average, 37).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a[0].is_finite());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mono = AudioClip::silence(8000, 1, 100).unwrap();
        assert!(matches!(
            separate(&identity_model(1), &mono, 16, OverlapMode::Average, 4),
            Err(mrcae_core::Error::Config(_))
        ));
    }
}
