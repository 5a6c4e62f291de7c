use mrcae_core::checkpoint::{self, load_checkpoint, load_checkpoint_for, save_checkpoint};
use mrcae_core::gradcheck;
use mrcae_core::ops;
use mrcae_core::tape::OpKind;
use mrcae_core::tape::Tape;
use mrcae_core::{Error, LayerKind, LayerSpec, Mode, Model, ModelConfig, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_parts() -> ModelConfig {
    ModelConfig::tiny()
}

/// Independent count: for every set K*b*a weights + K biases + 2K norm terms,
/// then the output transpose layer (L*C)*b*a + L*C.
fn count_params(cfg: &ModelConfig) -> usize {
    let mut b = cfg.in_channels;
    let mut total = 0;
    for layer in cfg.encoder.iter().chain(&cfg.decoder) {
        for s in &layer.sets {
            total += s.filters * b * s.length + s.filters + 2 * s.filters;
        }
        b = layer.sets.iter().map(|s| s.filters).sum();
    }
    let out = cfg.num_sources * cfg.in_channels;
    total + out * b * cfg.output_filter_len + out
}

#[test]
fn tiny_param_count_matches_closed_form() {
    let cfg = tiny_parts();
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    assert_eq!(count_params(&cfg), 178);
    assert_eq!(m.param_count(), 178);
}

#[test]
fn table_one_structure() {
    let m = Model::<f32>::build(ModelConfig::default()).unwrap();
    let counts: Vec<usize> = m
        .layers()
        .iter()
        .map(|l| l.sets.iter().map(|s| s.norm.channels()).sum())
        .collect();
    assert_eq!(counts, vec![100, 135, 135, 100]);
    assert_eq!(m.layers()[0].kind, LayerKind::EncoderConv);
    assert_eq!(m.layers()[3].kind, LayerKind::DecoderTranspose);
    assert_eq!(m.output_layer().bias.len(), 2);
    assert_eq!(m.output_layer().filter_len, 1025);
    assert_eq!(m.param_count(), count_params(m.config()));
}

#[test]
fn init_weights_within_glorot_bound() {
    let cfg = ModelConfig {
        segment_len: 16,
        in_channels: 2,
        num_sources: 1,
        encoder: vec![LayerSpec::new(&[(20, 5)])],
        decoder: vec![],
        output_filter_len: 1,
        seed: 9,
    };
    let m = Model::<f64>::new(cfg).unwrap();
    let bound = (6.0f64 / (2.0 * 5.0 + 20.0 * 5.0)).sqrt();
    assert!((bound - 0.2335).abs() < 1e-4);
    let w: &[f64] = &m.layers()[0].sets[0].filters.weights;
    assert_eq!(w.len(), 200);
    assert!(w.iter().all(|v| v.abs() <= bound));
    assert!(w.iter().any(|v| v.abs() > bound * 0.5));
}

#[test]
fn zero_model_maps_zero_to_zero() {
    let mut m = Model::<f64>::build(tiny_parts()).unwrap();
    let x = Tensor3::zeros(2, 2, 32);
    assert!(m.forward_infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(m.forward(&x, Mode::Train).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_shape_and_errors() {
    let mut m = Model::<f32>::new(tiny_parts()).unwrap();
    let y = m.forward(&Tensor3::zeros(5, 2, 32), Mode::Infer).unwrap();
    assert_eq!(y.shape(), (5, 2, 32));
    assert!(matches!(m.forward(&Tensor3::zeros(1, 3, 32), Mode::Infer), Err(Error::Config(_))));
    assert!(matches!(m.forward(&Tensor3::zeros(1, 2, 31), Mode::Train), Err(Error::Config(_))));
    let mut cfg = tiny_parts();
    cfg.num_sources = 3;
    let m = Model::<f32>::new(cfg).unwrap();
    assert_eq!(m.forward_infer(&Tensor3::zeros(1, 2, 32)).unwrap().channels(), 6);
}

#[test]
fn forward_matches_hand_composed_primitives() {
    let (model, x, _) = gradcheck::fixture(tiny_parts(), 4, 2).unwrap();
    let layers = model.layers();
    let enc: Vec<Tensor3<f64>> = layers[0]
        .sets
        .iter()
        .map(|s| ops::elu(&ops::batchnorm_infer(&ops::conv1d(&x, &s.filters).unwrap(), &s.norm).unwrap()))
        .collect();
    let h = ops::concat_channels(&[&enc[0], &enc[1]]).unwrap();
    let dec: Vec<Tensor3<f64>> = layers[1]
        .sets
        .iter()
        .map(|s| {
            ops::elu(&ops::batchnorm_infer(&ops::conv_transpose1d(&h, &s.filters).unwrap(), &s.norm).unwrap())
        })
        .collect();
    let h = ops::concat_channels(&[&dec[0], &dec[1]]).unwrap();
    let expect = ops::conv_transpose1d(&h, model.output_layer()).unwrap();
    assert_eq!(model.forward_infer(&x).unwrap(), expect);

    // train mode: same composition with batch statistics
    let mut work = model.clone();
    let mut l = work.layers().to_vec();
    let enc: Vec<Tensor3<f64>> = l[0]
        .sets
        .iter_mut()
        .map(|s| ops::elu(&ops::batchnorm_train(&ops::conv1d(&x, &s.filters).unwrap(), &mut s.norm).unwrap().0))
        .collect();
    let h = ops::concat_channels(&[&enc[0], &enc[1]]).unwrap();
    let dec: Vec<Tensor3<f64>> = l[1]
        .sets
        .iter_mut()
        .map(|s| {
            let y = ops::conv_transpose1d(&h, &s.filters).unwrap();
            ops::elu(&ops::batchnorm_train(&y, &mut s.norm).unwrap().0)
        })
        .collect();
    let h = ops::concat_channels(&[&dec[0], &dec[1]]).unwrap();
    let expect = ops::conv_transpose1d(&h, model.output_layer()).unwrap();
    assert_eq!(work.forward(&x, Mode::Train).unwrap(), expect);
    // running statistics moved identically
    assert_eq!(work.layers()[1].sets[1].norm, l[1].sets[1].norm);
}

#[test]
fn tape_records_one_entry_per_op() {
    let mut m = Model::<f64>::new(tiny_parts()).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor3::zeros(1, 2, 32));
    m.forward_train(&mut tape, x).unwrap();
    // 2 layers x 2 sets x (conv, norm, elu) + 2 concats + output
    assert_eq!(tape.records().len(), 2 * 2 * 3 + 2 + 1);
    assert_eq!(tape.records()[0].op_kind(), OpKind::Conv1d);
    assert_eq!(tape.records().last().unwrap().op_kind(), OpKind::ConvTranspose1d);
}

#[test]
fn infer_is_deterministic_and_pure() {
    let (model, x, _) = gradcheck::fixture(tiny_parts(), 5, 4).unwrap();
    let before = model.clone();
    let a = model.forward_infer(&x).unwrap();
    let b = model.forward_infer(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
}

#[test]
fn perfect_targets_give_zero_loss_and_gradients() {
    let (mut model, x, _) = gradcheck::fixture(tiny_parts(), 6, 3).unwrap();
    let target = model.clone().forward(&x, Mode::Train).unwrap();
    let (loss, grads) = model.loss_and_gradients(&x, &target).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.groups.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn negated_targets_keep_loss_for_zero_model() {
    let mut model = Model::<f64>::build(tiny_parts()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor3::from_fn(2, 2, 32, |_, _, _| rng.random_range(-1.0..1.0));
    let t: Tensor3<f64> = Tensor3::from_fn(2, 2, 32, |_, _, _| rng.random_range(-1.0..1.0));
    let neg = Tensor3::from_vec(2, 2, 32, t.data().iter().map(|v| -v).collect()).unwrap();
    let sum_abs: f64 = t.data().iter().map(|v| v.abs()).sum();
    let (a, _) = model.loss_and_gradients(&x, &t).unwrap();
    let (b, _) = model.loss_and_gradients(&x, &neg).unwrap();
    assert_eq!(a, sum_abs);
    assert_eq!(b, sum_abs);
    assert!(model.loss_and_gradients(&x, &Tensor3::zeros(2, 1, 32)).is_err());
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for seed in [0, 1] {
        let report = gradcheck::check_tiny(seed, None).unwrap();
        assert_eq!(report.groups.len(), 4 * 4 + 2);
        for g in &report.groups {
            assert!(g.max_rel_err < 1e-4, "{}: {}", g.name, g.max_rel_err);
        }
    }
}

#[test]
fn gradcheck_detects_corrupted_backward() {
    let hook = |g: &mut mrcae_core::GradientSet<f64>| {
        g.groups[0].1[0] *= 1.01;
    };
    let report = gradcheck::check_tiny(0, Some(&hook)).unwrap();
    assert!(!report.passed());
    assert!(report.groups[0].max_rel_err > 1e-4);
}

#[test]
fn checkpoint_roundtrip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = Model::<f32>::new(tiny_parts()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor3::from_fn(4, 2, 32, |_, _, _| rng.random_range(-1.0..1.0));
    m.forward(&x, Mode::Train).unwrap(); // moves running stats
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.forward_infer(&x).unwrap(), m.forward_infer(&x).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format { .. })));

    save_checkpoint(&m, &path).unwrap();
    let mut other = tiny_parts();
    other.segment_len = 64;
    let err = load_checkpoint_for::<f32>(&path, &other).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("mismatch"));
}

#[test]
fn table_one_checkpoint_roundtrip() {
    let m = Model::<f32>::new(ModelConfig::default()).unwrap();
    let bytes = checkpoint::encode(&m).unwrap();
    let back: Model<f32> = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, m);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor3::from_fn(1, 2, 1025, |_, _, _| rng.random_range(-1.0..1.0));
    let a = m.forward_infer(&x).unwrap();
    assert_eq!(a.shape(), (1, 2, 1025));
    assert_eq!(a, back.forward_infer(&x).unwrap());
}
