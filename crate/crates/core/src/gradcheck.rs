//! Whole-model gradient verification against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{GradientSet, Mode, Model, ModelConfig};
use crate::ops;
use crate::tensor::Tensor3;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative
/// terms; finite-difference noise dominates below it.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub params: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < TOLERANCE)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Train-mode loss on a throwaway copy, so running statistics stay put.
fn probe_loss(model: &Model<f64>, x: &Tensor3<f64>, y: &Tensor3<f64>) -> Result<f64> {
    let mut m = model.clone();
    let out = m.forward(x, Mode::Train)?;
    ops::l1_loss(&out, y)
}

/// Compares every analytic parameter gradient of `model` with a central
/// difference. `hook` may alter the analytic gradients before comparison.
pub fn check_model(
    model: &Model<f64>,
    x: &Tensor3<f64>,
    y: &Tensor3<f64>,
    hook: Option<&dyn Fn(&mut GradientSet<f64>)>,
) -> Result<GradcheckReport> {
    let mut work = model.clone();
    let (_, mut grads) = work.loss_and_gradients(x, y)?;
    if let Some(h) = hook {
        h(&mut grads);
    }

    let mut groups = Vec::new();
    for (gi, (name, analytic)) in grads.groups.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.param_groups_mut()[gi][i] += FD_STEP;
            let mut minus = model.clone();
            minus.param_groups_mut()[gi][i] -= FD_STEP;
            let numeric = (probe_loss(&plus, x, y)? - probe_loss(&minus, x, y)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
        groups.push(GroupReport {
            name: name.clone(),
            params: analytic.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport { groups })
}

/// Seeded model and data for a gradient check of `config`. Gamma, beta and
/// biases are randomized away from their initial values so that every group
/// is exercised at a generic point.
pub fn fixture(config: ModelConfig, seed: u64, batch: usize) -> Result<(Model<f64>, Tensor3<f64>, Tensor3<f64>)> {
    let mut model = Model::<f64>::build(config)?;
    model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in model.layers_mut() {
        for set in &mut layer.sets {
            set.filters.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            set.norm.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            set.norm.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
    }
    model
        .output_layer_mut()
        .bias
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.1..0.1));
    let cfg = model.config().clone();
    let x = Tensor3::from_fn(batch, cfg.in_channels, cfg.segment_len, |_, _, _| rng.random_range(-1.0..1.0));
    let y = Tensor3::from_fn(batch, cfg.output_channels(), cfg.segment_len, |_, _, _| {
        rng.random_range(-1.0..1.0)
    });
    Ok((model, x, y))
}

/// Gradient check of the small reference model.
pub fn check_tiny(seed: u64, hook: Option<&dyn Fn(&mut GradientSet<f64>)>) -> Result<GradcheckReport> {
    let (model, x, y) = fixture(ModelConfig::tiny(), seed, 3)?;
    check_model(&model, &x, &y, hook)
}
