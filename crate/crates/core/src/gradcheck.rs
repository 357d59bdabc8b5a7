//! Central finite-difference checks of the analytic loss gradients.
//!
//! The numerical side only ever evaluates loss totals, so it is independent of
//! the backpropagation path it checks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    multitask_loss, weighted_loss, MultitaskBatch, MultitaskLossConfig, WeightedBatch,
    WeightedLossConfig,
};
use crate::nn::{Gradients, Head, Mode, NetworkLayout, NetworkParams};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// Gradient magnitudes below this are compared in absolute terms (scaled by it).
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCheck {
    pub slice: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<ParamCheck>,
}

impl CheckOutcome {
    fn absorb(&mut self, other: &CheckOutcome) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    fn empty() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }
}

/// Compares `analytic` against central differences of `loss` for every parameter.
pub fn compare<F>(params: &NetworkParams, analytic: &Gradients, step: f64, mut loss: F) -> Result<CheckOutcome>
where
    F: FnMut(&NetworkParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut outcome = CheckOutcome::empty();
    let analytic = analytic.slices();
    for (slice, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            let original = params.slices()[slice][index];
            probe.slices_mut()[slice][index] = original + step;
            let plus = loss(&probe)?;
            probe.slices_mut()[slice][index] = original - step;
            let minus = loss(&probe)?;
            probe.slices_mut()[slice][index] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let rel_error = relative_error(a, numeric);
            outcome.checked += 1;
            if rel_error > outcome.max_rel_error || outcome.worst.is_none() {
                outcome.max_rel_error = outcome.max_rel_error.max(rel_error);
                outcome.worst = Some(ParamCheck {
                    slice,
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(outcome)
}

pub fn check_weighted(
    params: &NetworkParams,
    batch: &WeightedBatch,
    cfg: &WeightedLossConfig,
    step: f64,
) -> Result<CheckOutcome> {
    let report = weighted_loss(batch, params, cfg, Mode::Eval)?;
    compare(params, &report.gradients, step, |p| {
        Ok(weighted_loss(batch, p, cfg, Mode::Eval)?.total)
    })
}

pub fn check_multitask(
    params: &NetworkParams,
    batch: &MultitaskBatch,
    cfg: &MultitaskLossConfig,
    step: f64,
) -> Result<CheckOutcome> {
    let report = multitask_loss(batch, params, cfg, Mode::Eval)?;
    compare(params, &report.gradients, step, |p| {
        Ok(multitask_loss(batch, p, cfg, Mode::Eval)?.total)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seeds: Vec<u64>,
    pub step: f64,
    pub tolerance: f64,
    pub weighted: CheckOutcome,
    pub multitask: CheckOutcome,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Small random network, inputs and targets for one check seed.
pub struct TinyProblem {
    pub dnn1: NetworkParams,
    pub dnn2: NetworkParams,
    pub weighted: WeightedBatch,
    pub multitask: MultitaskBatch,
}

pub const TINY_INPUT: usize = 6;
pub const TINY_HIDDEN: [usize; 3] = [8, 6, 8];
pub const TINY_CLASSES: usize = 3;

impl TinyProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = rng.random_range(1..=5usize);
        let layout = |head| NetworkLayout {
            input: TINY_INPUT,
            hidden: TINY_HIDDEN.to_vec(),
            head,
        };
        let mut dnn1 = NetworkParams::init(layout(Head::ForegroundBackground), 0.5, seed)?;
        let mut dnn2 = NetworkParams::init(layout(Head::Multitask { classes: TINY_CLASSES }), 0.2, seed + 1)?;
        // Nonzero biases keep pre-activations off the ReLU kink at exactly 0,
        // where one-sided slopes differ and central differences are meaningless.
        for net in [&mut dnn1, &mut dnn2] {
            for layer in &mut net.layers {
                layer.biases.mapv_inplace(|_| rng.random_range(0.05..0.3));
            }
        }
        let inputs = Array2::from_shape_simple_fn((n, TINY_INPUT), || rng.random_range(-1.5..1.5));
        let foreground = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let mut labels = Array2::zeros((n, TINY_CLASSES));
        for mut row in labels.rows_mut() {
            row[rng.random_range(0..TINY_CLASSES)] = 1.0;
        }
        let distances = Array2::from_shape_simple_fn((n, 2), || rng.random_range(0.0..1.0));
        Ok(Self {
            dnn1,
            dnn2,
            weighted: WeightedBatch::from_flags(inputs.clone(), foreground),
            multitask: MultitaskBatch {
                inputs,
                labels,
                distances,
            },
        })
    }
}

/// Runs both loss checks over `seeds` with the default loss weights.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, step: f64) -> Result<GradCheckReport> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut weighted = CheckOutcome::empty();
    let mut multitask = CheckOutcome::empty();
    for &seed in &seeds {
        let problem = TinyProblem::new(seed)?;
        weighted.absorb(&check_weighted(
            &problem.dnn1,
            &problem.weighted,
            &WeightedLossConfig::default(),
            step,
        )?);
        multitask.absorb(&check_multitask(
            &problem.dnn2,
            &problem.multitask,
            &MultitaskLossConfig::default(),
            step,
        )?);
    }
    let max_rel_error = weighted.max_rel_error.max(multitask.max_rel_error);
    Ok(GradCheckReport {
        seeds,
        step,
        tolerance: TOLERANCE,
        weighted,
        multitask,
        max_rel_error,
        passed: max_rel_error < TOLERANCE,
    })
}
