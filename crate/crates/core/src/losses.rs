//! The two tailored training losses and their analytic gradients.
//!
//! * Weighted cross-entropy for the foreground/background network: foreground
//!   and background examples get separate penalty weights so that missed
//!   foreground frames cost more than false alarms.
//! * Multitask loss for the class/boundary network: cross-entropy on the class
//!   posterior, squared error on the normalized onset/offset distances, and a
//!   confidence term that scales the class posterior by the intersection over
//!   union of the true and predicted event extents.
//!
//! Both add `(λ_reg / 2)·‖W‖²` over the weights (not the biases). Gradients
//! are exact for the dropout masks drawn by the call.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, split_multitask, Gradients, Head, Mode, NetworkParams};

/// Probabilities are clamped to `[LOG_FLOOR, 1]` inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Smoothing added to both intersection and union so `d = d̂ = 0` has ratio 1.
pub const IOU_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightedLossConfig {
    pub lambda_fg: f64,
    pub lambda_bg: f64,
    pub lambda_reg: f64,
}

impl Default for WeightedLossConfig {
    fn default() -> Self {
        Self {
            lambda_fg: 2.0,
            lambda_bg: 1.0,
            lambda_reg: 1e-3,
        }
    }
}

impl WeightedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fg > 0.0 && self.lambda_fg.is_finite()) {
            return Err(Error::config("weighted_loss.lambda_fg must be > 0"));
        }
        if !(self.lambda_bg > 0.0 && self.lambda_bg.is_finite()) {
            return Err(Error::config("weighted_loss.lambda_bg must be > 0"));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::config("weighted_loss.lambda_reg must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultitaskLossConfig {
    pub lambda_class: f64,
    pub lambda_dist: f64,
    pub lambda_conf: f64,
    pub lambda_reg: f64,
}

impl Default for MultitaskLossConfig {
    fn default() -> Self {
        Self {
            lambda_class: 1.0,
            lambda_dist: 2.0,
            lambda_conf: 1.0,
            lambda_reg: 1e-3,
        }
    }
}

impl MultitaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_class", self.lambda_class),
            ("lambda_dist", self.lambda_dist),
            ("lambda_conf", self.lambda_conf),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("multitask_loss.{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One loss component and the coefficient it enters the total with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
    pub gradients: Gradients,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `Σ weight·value`, which `total` must equal.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

/// Inputs with two-class one-hot labels and a foreground flag per row.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pub inputs: Array2<f64>,
    pub labels: Array2<f64>,
    pub foreground: Vec<bool>,
}

impl WeightedBatch {
    /// Labels derived from the foreground flags.
    pub fn from_flags(inputs: Array2<f64>, foreground: Vec<bool>) -> Self {
        let mut labels = Array2::zeros((foreground.len(), 2));
        for (n, &fg) in foreground.iter().enumerate() {
            labels[[n, usize::from(fg)]] = 1.0;
        }
        Self {
            inputs,
            labels,
            foreground,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        if self.labels.dim() != (n, 2) || self.foreground.len() != n {
            return Err(Error::input("weighted batch rows/labels/flags disagree"));
        }
        Ok(())
    }
}

/// Inputs with `C`-class one-hot labels and normalized `(d_on, d_off)` targets.
#[derive(Debug, Clone)]
pub struct MultitaskBatch {
    pub inputs: Array2<f64>,
    pub labels: Array2<f64>,
    pub distances: Array2<f64>,
}

impl MultitaskBatch {
    fn validate(&self, classes: usize) -> Result<()> {
        let n = self.inputs.nrows();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        if self.labels.dim() != (n, classes) || self.distances.dim() != (n, 2) {
            return Err(Error::input("multitask batch rows/labels/distances disagree"));
        }
        if self.distances.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::input("distance targets must be finite and >= 0"));
        }
        Ok(())
    }
}

fn clamped_log(p: f64) -> f64 {
    p.clamp(LOG_FLOOR, 1.0).ln()
}

/// Unweighted foreground and background cross-entropy terms, each divided by
/// the full batch size `N`.
pub fn weighted_terms(
    posterior: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    foreground: &[bool],
) -> (f64, f64) {
    let n = posterior.nrows() as f64;
    let mut fg = 0.0;
    let mut bg = 0.0;
    for ((p, y), &is_fg) in posterior.rows().into_iter().zip(labels.rows()).zip(foreground) {
        let ce: f64 = -p.iter().zip(y).map(|(&p, &y)| y * clamped_log(p)).sum::<f64>();
        if is_fg {
            fg += ce;
        } else {
            bg += ce;
        }
    }
    (fg / n, bg / n)
}

/// Intersection and union of a true and a predicted `(d_on, d_off)` extent.
pub fn iou_terms(truth: [f64; 2], predicted: [f64; 2]) -> Result<(f64, f64)> {
    if truth.iter().chain(&predicted).any(|&v| !(v >= 0.0)) {
        return Err(Error::input("onset/offset distances must be >= 0"));
    }
    let inter = truth[0].min(predicted[0]) + truth[1].min(predicted[1]);
    let union = truth[0].max(predicted[0]) + truth[1].max(predicted[1]);
    Ok((inter, union))
}

fn iou_ratio(inter: f64, union: f64) -> f64 {
    (inter + IOU_EPS) / (union + IOU_EPS)
}

/// Mean class, distance and confidence terms from network outputs.
pub fn multitask_terms(
    posterior: ArrayView2<f64>,
    predicted: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    truth: ArrayView2<f64>,
) -> Result<(f64, f64, f64)> {
    let n = posterior.nrows() as f64;
    let (mut class, mut dist, mut conf) = (0.0, 0.0, 0.0);
    for i in 0..posterior.nrows() {
        let (p, y) = (posterior.row(i), labels.row(i));
        let (dh, d) = (predicted.row(i), truth.row(i));
        class -= p.iter().zip(y).map(|(&p, &y)| y * clamped_log(p)).sum::<f64>();
        dist += d.iter().zip(dh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (inter, union) = iou_terms([d[0], d[1]], [dh[0], dh[1]])?;
        let r = iou_ratio(inter, union);
        conf += y.iter().zip(p).map(|(&y, &p)| (y - p * r).powi(2)).sum::<f64>();
    }
    Ok((class / n, dist / n, conf / n))
}

/// Gradient of a loss through softmax: `dz_j = p_j (g_j − Σ_k g_k p_k)`.
fn softmax_backward(p: ArrayView1<f64>, g: &Array1<f64>) -> Array1<f64> {
    let dot = p.dot(g);
    Array1::from_iter(p.iter().zip(g).map(|(&p, &g)| p * (g - dot)))
}

fn add_regularizer(grads: &mut Gradients, params: &NetworkParams, lambda_reg: f64) {
    if lambda_reg == 0.0 {
        return;
    }
    for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
        g.weights.scaled_add(lambda_reg, &p.weights);
    }
}

/// Weighted fore-/background cross-entropy with exact gradients.
pub fn weighted_loss(
    batch: &WeightedBatch,
    params: &NetworkParams,
    cfg: &WeightedLossConfig,
    mode: Mode<'_>,
) -> Result<LossReport> {
    cfg.validate()?;
    batch.validate()?;
    if params.layout.head != Head::ForegroundBackground {
        return Err(Error::config("weighted loss needs a foreground/background network"));
    }
    let trace = params.forward(batch.inputs.view(), mode)?;
    let posterior = softmax_rows(trace.logits().view());
    let (fg, bg) = weighted_terms(posterior.view(), batch.labels.view(), &batch.foreground);
    let reg = 0.5 * params.weight_sq_norm();

    let n = batch.inputs.nrows() as f64;
    let mut grad_logits = Array2::zeros(posterior.dim());
    for (i, mut out) in grad_logits.axis_iter_mut(Axis(0)).enumerate() {
        let w = if batch.foreground[i] { cfg.lambda_fg } else { cfg.lambda_bg };
        let p = posterior.row(i);
        let g = Array1::from_iter(p.iter().zip(batch.labels.row(i)).map(|(&p, &y)| {
            if p > LOG_FLOOR {
                -w * y / (n * p)
            } else {
                0.0
            }
        }));
        out.assign(&softmax_backward(p, &g));
    }
    let mut gradients = params.backward(&trace, grad_logits.view());
    add_regularizer(&mut gradients, params, cfg.lambda_reg);

    let terms = vec![
        LossTerm { name: "fg", value: fg, weight: cfg.lambda_fg },
        LossTerm { name: "bg", value: bg, weight: cfg.lambda_bg },
        LossTerm { name: "regularizer", value: reg, weight: cfg.lambda_reg },
    ];
    let total = terms.iter().map(|t| t.weight * t.value).sum();
    Ok(LossReport {
        total,
        terms,
        gradients,
    })
}

/// Class + distance + IoU-confidence loss with exact gradients.
pub fn multitask_loss(
    batch: &MultitaskBatch,
    params: &NetworkParams,
    cfg: &MultitaskLossConfig,
    mode: Mode<'_>,
) -> Result<LossReport> {
    cfg.validate()?;
    let Head::Multitask { classes } = params.layout.head else {
        return Err(Error::config("multitask loss needs a multitask network"));
    };
    batch.validate(classes)?;
    let trace = params.forward(batch.inputs.view(), mode)?;
    let (posterior, predicted) = split_multitask(trace.logits().view(), classes);
    let (class, dist, conf) = multitask_terms(
        posterior.view(),
        predicted.view(),
        batch.labels.view(),
        batch.distances.view(),
    )?;
    let reg = 0.5 * params.weight_sq_norm();

    let n = batch.inputs.nrows() as f64;
    let mut grad_logits = Array2::zeros(trace.logits().dim());
    for i in 0..batch.inputs.nrows() {
        let (p, y) = (posterior.row(i), batch.labels.row(i));
        let (dh, d) = (predicted.row(i), batch.distances.row(i));
        let (inter, union) = iou_terms([d[0], d[1]], [dh[0], dh[1]])?;
        let r = iou_ratio(inter, union);

        let mut g_post = Array1::zeros(classes);
        let mut g_ratio = 0.0;
        for k in 0..classes {
            let class_grad = if p[k] > LOG_FLOOR { -y[k] / (n * p[k]) } else { 0.0 };
            let resid = y[k] - p[k] * r;
            g_post[k] = cfg.lambda_class * class_grad - cfg.lambda_conf * 2.0 * r * resid / n;
            g_ratio -= cfg.lambda_conf * 2.0 * p[k] * resid / n;
        }

        // Ties between truth and prediction take the truth branch of min/max,
        // so the prediction receives no intersection/union gradient there.
        let dr_dinter = 1.0 / (union + IOU_EPS);
        let dr_dunion = -(inter + IOU_EPS) / (union + IOU_EPS).powi(2);
        let mut row = grad_logits.row_mut(i);
        row.slice_mut(ndarray::s![..classes])
            .assign(&softmax_backward(p, &g_post));
        for j in 0..2 {
            let mut g = -cfg.lambda_dist * 2.0 * (d[j] - dh[j]) / n;
            if dh[j] < d[j] {
                g += g_ratio * dr_dinter;
            } else if dh[j] > d[j] {
                g += g_ratio * dr_dunion;
            }
            row[classes + j] = g * dh[j] * (1.0 - dh[j]);
        }
    }
    let mut gradients = params.backward(&trace, grad_logits.view());
    add_regularizer(&mut gradients, params, cfg.lambda_reg);

    let terms = vec![
        LossTerm { name: "class", value: class, weight: cfg.lambda_class },
        LossTerm { name: "dist", value: dist, weight: cfg.lambda_dist },
        LossTerm { name: "conf", value: conf, weight: cfg.lambda_conf },
        LossTerm { name: "regularizer", value: reg, weight: cfg.lambda_reg },
    ];
    let total = terms.iter().map(|t| t.weight * t.value).sum();
    Ok(LossReport {
        total,
        terms,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkLayout;
    use ndarray::array;
    use proptest::prelude::*;

    /// A network with no hidden layers whose biases alone set the logits.
    fn bias_only(head: Head, biases: &[f64]) -> NetworkParams {
        let layout = NetworkLayout {
            input: 1,
            hidden: vec![],
            head,
        };
        let mut p = NetworkParams::zeros(layout, 0.0).unwrap();
        p.layers[0].biases = Array1::from(biases.to_vec());
        p
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn weighted_single_foreground_example() {
        // softmax(0, ln 4) = (0.2, 0.8)
        let p = bias_only(Head::ForegroundBackground, &[0.0, 4f64.ln()]);
        let batch = WeightedBatch::from_flags(array![[0.0]], vec![true]);
        let cfg = WeightedLossConfig {
            lambda_fg: 2.0,
            lambda_bg: 1.0,
            lambda_reg: 0.0,
        };
        let report = weighted_loss(&batch, &p, &cfg, Mode::Eval).unwrap();
        assert!((report.total - 0.446_287_102_628_419_4).abs() < 1e-12);
        assert_eq!(report.term("bg"), Some(0.0));
    }

    #[test]
    fn weighted_perfect_prediction_is_zero() {
        let post = array![[0.0, 1.0], [1.0, 0.0]];
        let (fg, bg) = weighted_terms(post.view(), post.view(), &[true, false]);
        assert_eq!((fg, bg), (0.0, 0.0));
    }

    #[test]
    fn default_weights_penalize_misses_twice() {
        let cfg = WeightedLossConfig::default();
        assert_eq!(cfg.lambda_fg / cfg.lambda_bg, 2.0);
        assert_eq!(cfg.lambda_reg, 1e-3);
        // At even odds a missed foreground frame costs twice a missed background frame.
        // Weights are zero, so the regularizer adds nothing.
        let p = bias_only(Head::ForegroundBackground, &[0.0, 0.0]);
        let fg = weighted_loss(&WeightedBatch::from_flags(array![[0.0]], vec![true]), &p, &cfg, Mode::Eval)
            .unwrap();
        let bg = weighted_loss(&WeightedBatch::from_flags(array![[0.0]], vec![false]), &p, &cfg, Mode::Eval)
            .unwrap();
        assert!((fg.total / bg.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_guard_keeps_loss_finite() {
        let post = array![[1.0, 0.0]];
        let labels = array![[0.0, 1.0]];
        let (fg, _) = weighted_terms(post.view(), labels.view(), &[true]);
        assert!((fg - (-LOG_FLOOR.ln())).abs() < 1e-9);

        let p = bias_only(Head::ForegroundBackground, &[800.0, -800.0]);
        let report = weighted_loss(
            &WeightedBatch::from_flags(array![[0.0]], vec![true]),
            &p,
            &WeightedLossConfig::default(),
            Mode::Eval,
        )
        .unwrap();
        assert!(report.total.is_finite());
        assert!(report.gradients.is_finite());
    }

    #[test]
    fn iou_examples() {
        let (i, u) = iou_terms([0.2, 0.4], [0.1, 0.5]).unwrap();
        assert!((i - 0.5).abs() < 1e-15 && (u - 0.7).abs() < 1e-15);
        let (i, u) = iou_terms([0.3, 0.1], [0.3, 0.1]).unwrap();
        assert_eq!(i, u);
        let (i, u) = iou_terms([0.0, 0.0], [0.3, 0.3]).unwrap();
        assert_eq!(i, 0.0);
        assert!((u - 0.6).abs() < 1e-15);
        assert!(matches!(iou_terms([-0.1, 0.0], [0.0, 0.0]), Err(Error::Input(_))));
        assert_eq!(iou_ratio(0.0, 0.0), 1.0);
    }

    #[test]
    fn multitask_worked_example() {
        let p = bias_only(
            Head::Multitask { classes: 2 },
            &[0.6f64.ln(), 0.4f64.ln(), logit(0.1), logit(0.5)],
        );
        let batch = MultitaskBatch {
            inputs: array![[0.0]],
            labels: array![[1.0, 0.0]],
            distances: array![[0.2, 0.4]],
        };
        let cfg = MultitaskLossConfig {
            lambda_reg: 0.0,
            ..Default::default()
        };
        let report = multitask_loss(&batch, &p, &cfg, Mode::Eval).unwrap();
        assert!((report.term("class").unwrap() - 0.510_825_623_765_990_7).abs() < 1e-9);
        assert!((report.term("dist").unwrap() - 0.02).abs() < 1e-9);
        assert!((report.term("conf").unwrap() - 0.408_163_263_440_233_2).abs() < 1e-9);
        assert!((report.total - 0.958_988_887_206_224).abs() < 1e-9);
    }

    #[test]
    fn multitask_perfect_prediction_is_zero() {
        let y = array![[0.0, 1.0, 0.0]];
        let d = array![[0.25, 0.5]];
        let (c, dist, conf) = multitask_terms(y.view(), d.view(), y.view(), d.view()).unwrap();
        assert_eq!((c, dist, conf), (0.0, 0.0, 0.0));
    }

    #[test]
    fn multitask_defaults() {
        let cfg = MultitaskLossConfig::default();
        assert_eq!(
            (cfg.lambda_class, cfg.lambda_dist, cfg.lambda_conf, cfg.lambda_reg),
            (1.0, 2.0, 1.0, 1e-3)
        );
    }

    #[test]
    fn empty_or_mismatched_batches_are_rejected() {
        let p = bias_only(Head::ForegroundBackground, &[0.0, 0.0]);
        let empty = WeightedBatch::from_flags(Array2::zeros((0, 1)), vec![]);
        assert!(weighted_loss(&empty, &p, &Default::default(), Mode::Eval).is_err());
        let wrong = MultitaskBatch {
            inputs: array![[0.0]],
            labels: array![[1.0, 0.0]],
            distances: array![[0.2, 0.4]],
        };
        assert!(matches!(
            multitask_loss(&wrong, &p, &Default::default(), Mode::Eval),
            Err(Error::Config(_))
        ));
        let q = bias_only(Head::Multitask { classes: 2 }, &[0.0; 4]);
        let negative = MultitaskBatch {
            distances: array![[-0.2, 0.4]],
            ..wrong
        };
        assert!(matches!(
            multitask_loss(&negative, &q, &Default::default(), Mode::Eval),
            Err(Error::Input(_))
        ));
    }

    fn distribution(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn components_are_non_negative(
            raw in prop::collection::vec(0.01f64..1.0, 3),
            label in 0usize..3,
            d in prop::array::uniform2(0.0f64..1.0),
            dh in prop::array::uniform2(0.0f64..1.0),
        ) {
            let p = distribution(raw);
            let post = Array2::from_shape_vec((1, 3), p).unwrap();
            let mut y = Array2::zeros((1, 3));
            y[[0, label]] = 1.0;
            let truth = Array2::from_shape_vec((1, 2), d.to_vec()).unwrap();
            let pred = Array2::from_shape_vec((1, 2), dh.to_vec()).unwrap();
            let (c, dist, conf) = multitask_terms(post.view(), pred.view(), y.view(), truth.view()).unwrap();
            prop_assert!(c >= 0.0 && dist >= 0.0 && conf >= 0.0);
            let (i, u) = iou_terms(d, dh).unwrap();
            prop_assert!(0.0 <= i && i <= u);
        }

        #[test]
        fn total_is_weighted_component_sum(
            seed in 0u64..500,
            lambdas in prop::array::uniform4(0.0f64..3.0),
        ) {
            let layout = NetworkLayout { input: 4, hidden: vec![5, 4], head: Head::Multitask { classes: 3 } };
            let p = NetworkParams::init(layout, 0.2, seed).unwrap();
            let x = Array2::from_shape_fn((3, 4), |(i, j)| ((seed as f64) * 0.37 + (i * 4 + j) as f64).sin());
            let labels = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 });
            let distances = Array2::from_shape_fn((3, 2), |(i, j)| 0.1 * (i + j) as f64);
            let cfg = MultitaskLossConfig {
                lambda_class: lambdas[0], lambda_dist: lambdas[1], lambda_conf: lambdas[2], lambda_reg: lambdas[3],
            };
            let r = multitask_loss(&MultitaskBatch { inputs: x.clone(), labels, distances }, &p, &cfg, Mode::Eval).unwrap();
            prop_assert!((r.total - r.weighted_sum()).abs() < 1e-10);

            let layout = NetworkLayout { input: 4, hidden: vec![5, 4], head: Head::ForegroundBackground };
            let p = NetworkParams::init(layout, 0.5, seed).unwrap();
            let cfg = WeightedLossConfig { lambda_fg: lambdas[0] + 0.1, lambda_bg: lambdas[1] + 0.1, lambda_reg: lambdas[3] };
            let r = weighted_loss(&WeightedBatch::from_flags(x, vec![true, false, true]), &p, &cfg, Mode::Eval).unwrap();
            prop_assert!((r.total - r.weighted_sum()).abs() < 1e-10);
        }

        #[test]
        fn raising_fg_weight_never_lowers_fg_error(
            fg_prob in 0.0f64..1.0,
            base in 0.1f64..5.0,
            extra in 0.0f64..5.0,
        ) {
            let post = array![[1.0 - fg_prob, fg_prob]];
            let labels = array![[0.0, 1.0]];
            let (fg, _) = weighted_terms(post.view(), labels.view(), &[true]);
            prop_assert!((base + extra) * fg >= base * fg);
        }
    }
}
