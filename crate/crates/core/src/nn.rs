//! Dense-network engine shared by both detectors.
//!
//! Each network is three ReLU hidden layers (512, 256, 512 units) followed by
//! a linear output layer. The foreground/background network ends in two
//! softmax units; the multitask network ends in `C` softmax units for the
//! event class and two sigmoid units for the normalized onset/offset distances.
//!
//! Forward passes run on row-major batches (`N × input`). A [`ForwardTrace`]
//! keeps every intermediate needed by [`NetworkParams::backward`], so the
//! loss functions only have to supply the gradient with respect to the
//! output logits. Parameters are always `f64`; [`Mode::TrainSingle`] runs the
//! products of a training step in `f32` for speed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;

/// Hidden-layer widths (fc1, fc2, fc3).
pub const HIDDEN_WIDTHS: [usize; 3] = [512, 256, 512];

pub const DNN1_DROPOUT: f64 = 0.5;
pub const DNN2_DROPOUT: f64 = 0.2;

/// What the output layer represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Two softmax units: index 0 background, index 1 foreground.
    ForegroundBackground,
    /// `classes` softmax units followed by two sigmoid distance units.
    Multitask { classes: usize },
}

impl Head {
    pub fn output_units(&self) -> usize {
        match *self {
            Head::ForegroundBackground => 2,
            Head::Multitask { classes } => classes + 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub head: Head,
}

impl NetworkLayout {
    /// Foreground/background network over 320-dim context features.
    pub fn dnn1() -> Self {
        Self {
            input: FEATURE_DIM,
            hidden: HIDDEN_WIDTHS.to_vec(),
            head: Head::ForegroundBackground,
        }
    }

    /// Multitask network for `classes` event categories.
    pub fn dnn2(classes: usize) -> Self {
        Self {
            input: FEATURE_DIM,
            hidden: HIDDEN_WIDTHS.to_vec(),
            head: Head::Multitask { classes },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::config("network input dimension must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be > 0"));
        }
        if let Head::Multitask { classes } = self.head {
            if classes == 0 {
                return Err(Error::config("multitask head needs at least one class"));
            }
        }
        Ok(())
    }

    /// `(out, in)` shape of every layer, output layer last.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.head.output_units());
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn output_units(&self) -> usize {
        self.head.output_units()
    }
}

/// Weights (`out × in`) and biases of one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: Array2::zeros((out, inp)),
            biases: Array1::zeros(out),
        }
    }

    fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }
}

/// Parameter-shaped gradient (or moment) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    let (o, i) = l.shape();
                    LayerParams::zeros(o, i)
                })
                .collect(),
        }
    }

    /// Flat views in declared order: for each layer, weights then biases.
    pub fn slices(&self) -> Vec<&[f64]> {
        flat_slices(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layout: NetworkLayout,
    pub layers: Vec<LayerParams>,
    pub dropout_p: f64,
}

/// Whether dropout is active for a forward pass, and at which precision its
/// matrix products run.
pub enum Mode<'a> {
    Eval,
    /// Draws fresh dropout masks from the generator.
    Train(&'a mut dyn RngCore),
    /// Same masks as `Train` for the same generator state, but the forward and
    /// backward products run in `f32`. Parameters, logits and gradients stay
    /// `f64`. Roughly twice as fast on full-size batches.
    TrainSingle(&'a mut dyn RngCore),
    /// Reuses masks from an earlier trace.
    Fixed(&'a [Option<Array2<f64>>]),
}

/// Element types the layer kernels run on.
trait Float: LinalgScalar + PartialOrd {}
impl Float for f32 {}
impl Float for f64 {}

/// Layer inputs and outputs of one pass; the last activation is the logits.
#[derive(Debug, Clone)]
struct Tape<F> {
    inputs: Array2<F>,
    /// Outputs after ReLU and dropout, one per layer.
    activations: Vec<Array2<F>>,
}

#[derive(Debug, Clone)]
enum TapeData {
    Double(Tape<f64>),
    /// Single-precision tape with the weight and mask copies it ran on.
    Single {
        tape: Tape<f32>,
        weights: Vec<Array2<f32>>,
        masks: Vec<Option<Array2<f32>>>,
    },
}

/// Everything a forward pass produced, enough to replay it or backpropagate.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    logits: Array2<f64>,
    masks: Vec<Option<Array2<f64>>>,
    tape: TapeData,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Inverted-dropout multipliers per hidden layer (`0` or `1/(1-p)`);
    /// `None` in eval mode.
    pub fn masks(&self) -> &[Option<Array2<f64>>] {
        &self.masks
    }
}

impl NetworkParams {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(layout: NetworkLayout, dropout_p: f64, seed: u64) -> Result<Self> {
        layout.validate()?;
        check_dropout(dropout_p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layout
            .shapes()
            .into_iter()
            .map(|(out, inp)| {
                let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt())
                    .expect("fan-in is positive");
                LayerParams {
                    weights: Array2::from_shape_simple_fn((out, inp), || normal.sample(&mut rng)),
                    biases: Array1::zeros(out),
                }
            })
            .collect();
        Ok(Self {
            layout,
            layers,
            dropout_p,
        })
    }

    /// All-zero parameters; mainly useful for tests.
    pub fn zeros(layout: NetworkLayout, dropout_p: f64) -> Result<Self> {
        layout.validate()?;
        check_dropout(dropout_p)?;
        let layers = layout
            .shapes()
            .into_iter()
            .map(|(o, i)| LayerParams::zeros(o, i))
            .collect();
        Ok(Self {
            layout,
            layers,
            dropout_p,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        flat_slices(&self.layers)
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.biases.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Squared L2 norm of the weights (biases are not regularized).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn forward(&self, inputs: ArrayView2<f64>, mode: Mode<'_>) -> Result<ForwardTrace> {
        self.check_inputs(inputs)?;
        let hidden = self.layers.len() - 1;
        Ok(match mode {
            Mode::Eval => self.run_double(inputs, vec![None; hidden]),
            Mode::Fixed(masks) => {
                self.check_masks(inputs.nrows(), masks)?;
                self.run_double(inputs, masks.to_vec())
            }
            Mode::Train(rng) => {
                let masks = self.draw_masks(inputs.nrows(), rng);
                self.run_double(inputs, masks)
            }
            Mode::TrainSingle(rng) => {
                let masks = self.draw_masks(inputs.nrows(), rng);
                self.run_single(inputs, masks)
            }
        })
    }

    /// Re-runs a forward pass with fixed dropout multipliers.
    pub fn forward_with_masks(
        &self,
        inputs: ArrayView2<f64>,
        masks: &[Option<Array2<f64>>],
    ) -> Result<ForwardTrace> {
        self.forward(inputs, Mode::Fixed(masks))
    }

    fn check_inputs(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.layout.input {
            return Err(Error::input(format!(
                "expected {} input features, got {}",
                self.layout.input,
                inputs.ncols()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite network input"));
        }
        Ok(())
    }

    fn check_masks(&self, rows: usize, masks: &[Option<Array2<f64>>]) -> Result<()> {
        if masks.len() != self.layers.len() - 1 {
            return Err(Error::config("one mask slot per hidden layer required"));
        }
        for (mask, layer) in masks.iter().zip(&self.layers) {
            if let Some(m) = mask {
                if m.dim() != (rows, layer.weights.nrows()) {
                    return Err(Error::config("dropout mask shape mismatch"));
                }
            }
        }
        Ok(())
    }

    fn draw_masks(&self, rows: usize, rng: &mut dyn RngCore) -> Vec<Option<Array2<f64>>> {
        let scale = 1.0 / (1.0 - self.dropout_p);
        // A unit drops when a uniform 32-bit draw falls below p·2³².
        let cutoff = (self.dropout_p * 4_294_967_296.0) as u64;
        let mut draws: Vec<u32> = Vec::new();
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| {
                let width = l.weights.nrows();
                draws.resize(rows * width, 0);
                rng.fill(&mut draws[..]);
                let mask = draws
                    .iter()
                    .map(|&d| if u64::from(d) < cutoff { 0.0 } else { scale })
                    .collect();
                Some(Array2::from_shape_vec((rows, width), mask).expect("mask size"))
            })
            .collect()
    }

    fn run_double(&self, inputs: ArrayView2<f64>, masks: Vec<Option<Array2<f64>>>) -> ForwardTrace {
        let weights: Vec<_> = self.layers.iter().map(|l| l.weights.view()).collect();
        let biases: Vec<_> = self.layers.iter().map(|l| l.biases.view()).collect();
        let tape = run_layers(&weights, &biases, inputs.to_owned(), &masks);
        ForwardTrace {
            logits: tape.activations.last().expect("output layer").clone(),
            masks,
            tape: TapeData::Double(tape),
        }
    }

    fn run_single(&self, inputs: ArrayView2<f64>, masks: Vec<Option<Array2<f64>>>) -> ForwardTrace {
        let narrow = |v: &f64| *v as f32;
        let weights: Vec<Array2<f32>> = self.layers.iter().map(|l| l.weights.map(narrow)).collect();
        let biases: Vec<Array1<f32>> = self.layers.iter().map(|l| l.biases.map(narrow)).collect();
        let masks32: Vec<_> = masks.iter().map(|m| m.as_ref().map(|m| m.map(narrow))).collect();
        let tape = run_layers(
            &weights.iter().map(|w| w.view()).collect::<Vec<_>>(),
            &biases.iter().map(|b| b.view()).collect::<Vec<_>>(),
            inputs.map(narrow),
            &masks32,
        );
        ForwardTrace {
            logits: tape.activations.last().expect("output layer").mapv(f64::from),
            masks,
            tape: TapeData::Single {
                tape,
                weights,
                masks: masks32,
            },
        }
    }

    /// Backpropagates `d loss / d logits` through a trace produced by these parameters.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: ArrayView2<f64>) -> Gradients {
        let layers = match &trace.tape {
            TapeData::Double(tape) => {
                let weights: Vec<_> = self.layers.iter().map(|l| l.weights.view()).collect();
                backprop(&weights, tape, &trace.masks, grad_logits.to_owned())
                    .into_iter()
                    .map(|(weights, biases)| LayerParams { weights, biases })
                    .collect()
            }
            TapeData::Single { tape, weights, masks } => {
                let weights: Vec<_> = weights.iter().map(|w| w.view()).collect();
                backprop(&weights, tape, masks, grad_logits.mapv(|v| v as f32))
                    .into_iter()
                    .map(|(w, b)| LayerParams {
                        weights: w.mapv(f64::from),
                        biases: b.mapv(f64::from),
                    })
                    .collect()
            }
        };
        Gradients { layers }
    }

    /// Foreground/background posteriors (`N × 2`); column 1 is P(foreground).
    pub fn forward_dnn1(
        &self,
        inputs: ArrayView2<f64>,
        mode: Mode<'_>,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        if self.layout.head != Head::ForegroundBackground {
            return Err(Error::config("forward_dnn1 needs a foreground/background head"));
        }
        let trace = self.forward(inputs, mode)?;
        let posterior = softmax_rows(trace.logits().view());
        Ok((posterior, trace))
    }

    /// Class posteriors (`N × C`) and normalized distances (`N × 2`, onset then offset).
    pub fn forward_dnn2(
        &self,
        inputs: ArrayView2<f64>,
        mode: Mode<'_>,
    ) -> Result<(Array2<f64>, Array2<f64>, ForwardTrace)> {
        let Head::Multitask { classes } = self.layout.head else {
            return Err(Error::config("forward_dnn2 needs a multitask head"));
        };
        let trace = self.forward(inputs, mode)?;
        let (posterior, distances) = split_multitask(trace.logits().view(), classes);
        Ok((posterior, distances, trace))
    }
}

/// Forward pass through dense layers: ReLU and dropout on hidden layers,
/// linear output.
fn run_layers<F: Float>(
    weights: &[ArrayView2<F>],
    biases: &[ArrayView1<F>],
    inputs: Array2<F>,
    masks: &[Option<Array2<F>>],
) -> Tape<F> {
    let hidden = weights.len() - 1;
    let mut activations: Vec<Array2<F>> = Vec::with_capacity(weights.len());
    for (idx, (w, b)) in weights.iter().zip(biases).enumerate() {
        let prev = activations.last().unwrap_or(&inputs);
        let mut a = prev.dot(&w.t()) + b;
        if idx < hidden {
            let zero = F::zero();
            match &masks[idx] {
                Some(m) => Zip::from(&mut a)
                    .and(m)
                    .for_each(|a, &m| *a = if *a > zero { *a * m } else { zero }),
                None => a.mapv_inplace(|v| if v > zero { v } else { zero }),
            }
        }
        activations.push(a);
    }
    Tape { inputs, activations }
}

/// Weight and bias gradients per layer. A hidden unit passes gradient only
/// where its output is positive: that is exactly where the ReLU was active
/// and the unit was kept.
fn backprop<F: Float>(
    weights: &[ArrayView2<F>],
    tape: &Tape<F>,
    masks: &[Option<Array2<F>>],
    grad_logits: Array2<F>,
) -> Vec<(Array2<F>, Array1<F>)> {
    let zero = F::zero();
    let mut grads = Vec::with_capacity(weights.len());
    let mut delta = grad_logits;
    for idx in (0..weights.len()).rev() {
        let prev = if idx == 0 { &tape.inputs } else { &tape.activations[idx - 1] };
        let weight_grad = delta.t().dot(prev);
        let bias_grad = delta.sum_axis(Axis(0));
        if idx > 0 {
            let mut upstream = delta.dot(&weights[idx]);
            let below = &tape.activations[idx - 1];
            match &masks[idx - 1] {
                Some(m) => Zip::from(&mut upstream)
                    .and(below)
                    .and(m)
                    .for_each(|g, &a, &m| *g = if a > zero { *g * m } else { zero }),
                None => Zip::from(&mut upstream).and(below).for_each(|g, &a| {
                    if !(a > zero) {
                        *g = zero;
                    }
                }),
            }
            delta = upstream;
        }
        grads.push((weight_grad, bias_grad));
    }
    grads.reverse();
    grads
}

fn flat_slices(layers: &[LayerParams]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weights.as_slice().expect("standard layout"),
                l.biases.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
    }
    Ok(())
}

pub(crate) fn split_multitask(logits: ArrayView2<f64>, classes: usize) -> (Array2<f64>, Array2<f64>) {
    let class_logits = logits.slice(ndarray::s![.., ..classes]);
    let dist_logits = logits.slice(ndarray::s![.., classes..classes + 2]);
    (softmax_rows(class_logits), dist_logits.mapv(sigmoid))
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// First/second moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != params.layers.len()
            || self.first_moment.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .chain(self.first_moment.layers.iter().zip(&params.layers))
                .any(|(g, p)| g.shape() != p.shape() || g.biases.len() != p.biases.len())
        {
            return Err(Error::config("gradient/optimizer shapes do not match parameters"));
        }
        if !grads.is_finite() {
            return Err(Error::input("non-finite gradient"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        let moments = self
            .first_moment
            .layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_slice_mut().unwrap(), l.biases.as_slice_mut().unwrap()])
            .zip(
                self.second_moment
                    .layers
                    .iter_mut()
                    .flat_map(|l| [l.weights.as_slice_mut().unwrap(), l.biases.as_slice_mut().unwrap()]),
            );
        for ((param, grad), (m, v)) in params.slices_mut().into_iter().zip(grads.slices()).zip(moments) {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;

    fn tiny(head: Head) -> NetworkLayout {
        NetworkLayout {
            input: 6,
            hidden: vec![8, 6, 8],
            head,
        }
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn default_shapes_follow_layer_table() {
        let p = NetworkParams::init(NetworkLayout::dnn1(), DNN1_DROPOUT, 7).unwrap();
        let shapes: Vec<_> = p.layers.iter().map(|l| l.weights.dim()).collect();
        assert_eq!(shapes, vec![(512, 320), (256, 512), (512, 256), (2, 512)]);

        let p = NetworkParams::init(NetworkLayout::dnn2(5), DNN2_DROPOUT, 7).unwrap();
        assert_eq!(p.layers[3].weights.dim(), (7, 512));
        assert!(p.layers.iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetworkParams::init(NetworkLayout::dnn2(3), 0.2, 7).unwrap();
        let b = NetworkParams::init(NetworkLayout::dnn2(3), 0.2, 7).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::init(NetworkLayout::dnn2(3), 0.2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_is_he_scaled() {
        let p = NetworkParams::init(NetworkLayout::dnn1(), 0.5, 3).unwrap();
        let w = &p.layers[0].weights;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 320.0;
        assert!((var / expected - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        assert!(matches!(
            NetworkParams::init(NetworkLayout::dnn2(0), 0.2, 1),
            Err(Error::Config(_))
        ));
        let mut layout = NetworkLayout::dnn1();
        layout.hidden[1] = 0;
        assert!(NetworkParams::init(layout, 0.5, 1).is_err());
        assert!(NetworkParams::init(NetworkLayout::dnn1(), 1.0, 1).is_err());
    }

    #[test]
    fn zero_params_give_uniform_outputs() {
        let x = random_inputs(3, FEATURE_DIM, 1);
        let p = NetworkParams::zeros(NetworkLayout::dnn1(), 0.5).unwrap();
        let (post, _) = p.forward_dnn1(x.view(), Mode::Eval).unwrap();
        assert!(post.iter().all(|&v| v == 0.5));

        let p = NetworkParams::zeros(NetworkLayout::dnn2(4), 0.2).unwrap();
        let (y, d, _) = p.forward_dnn2(x.view(), Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.25));
        assert!(d.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn twelve_class_head_dimensions() {
        let x = random_inputs(2, FEATURE_DIM, 2);
        let p = NetworkParams::init(NetworkLayout::dnn2(12), 0.2, 1).unwrap();
        let (y, d, _) = p.forward_dnn2(x.view(), Mode::Eval).unwrap();
        assert_eq!(y.dim(), (2, 12));
        assert_eq!(d.dim(), (2, 2));
    }

    #[test]
    fn eval_mode_is_pure() {
        let x = random_inputs(4, 6, 3);
        let p = NetworkParams::init(tiny(Head::ForegroundBackground), 0.5, 9).unwrap();
        let (a, _) = p.forward_dnn1(x.view(), Mode::Eval).unwrap();
        let (b, _) = p.forward_dnn1(x.view(), Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_input_is_an_input_error() {
        let mut x = random_inputs(2, 6, 3);
        x[[1, 2]] = f64::NAN;
        let p = NetworkParams::init(tiny(Head::ForegroundBackground), 0.5, 9).unwrap();
        assert!(matches!(p.forward(x.view(), Mode::Eval), Err(Error::Input(_))));
        let short = random_inputs(2, 5, 3);
        assert!(matches!(p.forward(short.view(), Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn replaying_trace_reproduces_output() {
        let x = random_inputs(5, 6, 4);
        let p = NetworkParams::init(tiny(Head::Multitask { classes: 3 }), 0.2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trace = p.forward(x.view(), Mode::Train(&mut rng)).unwrap();
        let replay = p.forward_with_masks(x.view(), trace.masks()).unwrap();
        assert_eq!(trace.logits(), replay.logits());
    }

    #[test]
    fn single_precision_pass_tracks_double() {
        let x = random_inputs(16, 6, 7);
        let p = NetworkParams::init(tiny(Head::Multitask { classes: 3 }), 0.2, 4).unwrap();
        let double = p.forward(x.view(), Mode::Train(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let single = p.forward(x.view(), Mode::TrainSingle(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        assert_eq!(double.masks(), single.masks());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * (1.0 + a.abs());
        assert!(double.logits().iter().zip(single.logits()).all(|(&a, &b)| close(a, b)));

        let upstream = Array2::from_elem(double.logits().dim(), 0.5);
        let gd = p.backward(&double, upstream.view());
        let gs = p.backward(&single, upstream.view());
        for (a, b) in gd.slices().iter().zip(gs.slices()) {
            assert!(a.iter().zip(b.iter()).all(|(&a, &b)| close(a, b)));
        }
    }

    #[test]
    fn inverted_dropout_statistics() {
        let x = Array2::ones((2000, 6));
        let mut layout = tiny(Head::ForegroundBackground);
        layout.hidden = vec![50, 50, 50];
        let p = NetworkParams::init(layout, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trace = p.forward(x.view(), Mode::Train(&mut rng)).unwrap();
        let mask = trace.masks()[0].as_ref().unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - 0.5).abs() < 0.01, "dropped fraction {dropped}");
        let eval = p.forward(x.view(), Mode::Eval).unwrap();
        assert!(eval.masks().iter().all(Option::is_none));
    }

    #[test]
    fn softmax_sums_to_one_on_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for draw in 0..1000u64 {
            let p = NetworkParams::init(tiny(Head::ForegroundBackground), 0.5, draw).unwrap();
            let x = Array2::from_shape_simple_fn((1, 6), || rng.random_range(-5.0..5.0));
            let (post, _) = p.forward_dnn1(x.view(), Mode::Eval).unwrap();
            assert!((post.sum() - 1.0).abs() < 1e-9);
            assert!(post.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sigmoid_distances_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        for draw in 0..200u64 {
            let p = NetworkParams::init(tiny(Head::Multitask { classes: 3 }), 0.2, draw).unwrap();
            let x = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-5.0..5.0));
            let (y, d, _) = p.forward_dnn2(x.view(), Mode::Eval).unwrap();
            assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for row in y.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = NetworkParams::init(tiny(Head::ForegroundBackground), 0.5, 2).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        state.step(&mut p, &Gradients::zeros_like(&before), 1e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let layout = NetworkLayout {
            input: 1,
            hidden: vec![],
            head: Head::ForegroundBackground,
        };
        let mut p = NetworkParams::zeros(layout, 0.0).unwrap();
        let mut grads = Gradients::zeros_like(&p);
        grads.layers[0].weights[[0, 0]] = 1.0;
        let mut state = AdamState::new(&p, AdamConfig::default());
        state.step(&mut p, &grads, DEFAULT_LEARNING_RATE).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let moved = -p.layers[0].weights[[0, 0]];
        assert!((moved - 1e-4).abs() < 1e-10, "moved {moved}");
        assert_eq!(p.layers[0].weights[[1, 0]], 0.0);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = NetworkParams::init(tiny(Head::ForegroundBackground), 0.5, 2).unwrap();
        let other = NetworkParams::init(tiny(Head::Multitask { classes: 3 }), 0.5, 2).unwrap();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let err = state.step(&mut p, &Gradients::zeros_like(&other), 1e-4);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
