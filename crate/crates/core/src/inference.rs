//! Early-detection inference.
//!
//! Frame `m` votes for every index `n` in its region of interest
//! `m − d̂_on(m) ≤ n ≤ m + d̂_off(m)` (distances restored to frames), with
//! per-class weight `P₁(fg | x_m) · P₂(c | x_m)`. The confidence track is the
//! running sum of those votes:
//!
//! ```text
//! f_c(n) = Σ_{m ≤ m̄} w_c(m) · [n ∈ ROI(m)]
//! ```
//!
//! Every vote is non-negative, so `f_c(n)` can only grow as frames arrive.
//! Once a normalized score reaches its class threshold it stays above it,
//! which is what makes a trigger on a partially observed event final.
//!
//! Frame indices are zero-based: the first frame of a stream is `m = 0`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DistancePair, DistanceUnit};

/// Inclusive frame-index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub lo: usize,
    pub hi: usize,
}

impl Roi {
    pub fn contains(&self, n: usize) -> bool {
        self.lo <= n && n <= self.hi
    }
}

/// `[ceil(m − d_on), floor(m + d_off)]`, clamped at zero on the left.
pub fn roi(m: usize, d: DistancePair) -> Result<Roi> {
    if d.unit != DistanceUnit::Frames {
        return Err(Error::input("region of interest needs distances restored to frames"));
    }
    if !(d.on >= 0.0 && d.off >= 0.0 && d.on.is_finite() && d.off.is_finite()) {
        return Err(Error::input("region of interest distances must be finite and >= 0"));
    }
    let m = m as f64;
    Ok(Roi {
        lo: (m - d.on).ceil().max(0.0) as usize,
        hi: (m + d.off).floor() as usize,
    })
}

/// One frame's vote: the same per-class weight over its whole ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameContribution {
    pub source: usize,
    pub roi: Roi,
    pub weights: Vec<f64>,
}

/// Builds the vote of frame `m` from the foreground probability, the class
/// posterior and the restored distances.
pub fn frame_confidence(m: usize, p_fg: f64, posterior: &[f64], d: DistancePair) -> Result<FrameContribution> {
    if !(0.0..=1.0).contains(&p_fg) {
        return Err(Error::input(format!("foreground probability {p_fg} outside [0, 1]")));
    }
    if posterior.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::input("class posterior entries must lie in [0, 1]"));
    }
    Ok(FrameContribution {
        source: m,
        roi: roi(m, d)?,
        weights: posterior.iter().map(|&p| p_fg * p).collect(),
    })
}

/// Per-class accumulated scores `f_c(n)`, grown on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTrack {
    scores: Vec<Vec<f64>>,
    consumed: usize,
}

impl ConfidenceTrack {
    pub fn new(classes: usize) -> Self {
        Self {
            scores: vec![Vec::new(); classes],
            consumed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.scores.len()
    }

    /// Number of frames consumed so far (the next expected source index).
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Number of indices with storage (one past the furthest ROI end seen).
    pub fn len(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, class: usize, n: usize) -> f64 {
        self.scores[class].get(n).copied().unwrap_or(0.0)
    }

    pub fn class_scores(&self, class: usize) -> &[f64] {
        &self.scores[class]
    }

    fn ensure_len(&mut self, len: usize) {
        if len > self.len() {
            for s in &mut self.scores {
                s.resize(len, 0.0);
            }
        }
    }

    /// Adds one frame's vote. Frames must arrive in order `0, 1, 2, …`.
    pub fn accumulate(&mut self, contrib: &FrameContribution) -> Result<()> {
        if contrib.source != self.consumed {
            return Err(Error::contract(format!(
                "frame {} arrived but frame {} was expected",
                contrib.source, self.consumed
            )));
        }
        if contrib.weights.len() != self.classes() {
            return Err(Error::input("contribution class count differs from the track"));
        }
        if contrib.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::input("confidence contributions must be >= 0"));
        }
        self.ensure_len(contrib.roi.hi + 1);
        for (scores, &w) in self.scores.iter_mut().zip(&contrib.weights) {
            if w != 0.0 {
                for s in &mut scores[contrib.roi.lo..=contrib.roi.hi] {
                    *s += w;
                }
            }
        }
        self.consumed += 1;
        Ok(())
    }

    /// Direct evaluation of the accumulated score over all contributions:
    /// for each index, the votes of every covering frame summed in frame order.
    pub fn from_contributions(contribs: &[FrameContribution], classes: usize) -> Result<Self> {
        for (m, c) in contribs.iter().enumerate() {
            if c.source != m {
                return Err(Error::contract("contributions must be indexed 0, 1, 2, …"));
            }
        }
        let len = contribs.iter().map(|c| c.roi.hi + 1).max().unwrap_or(0);
        let mut scores = vec![vec![0.0; len]; classes];
        for (class, track) in scores.iter_mut().enumerate() {
            for (n, slot) in track.iter_mut().enumerate() {
                let mut total = 0.0;
                for c in contribs {
                    if c.roi.contains(n) && c.weights[class] != 0.0 {
                        total += c.weights[class];
                    }
                }
                *slot = total;
            }
        }
        Ok(Self {
            scores,
            consumed: contribs.len(),
        })
    }
}

/// Per-class detection thresholds on the normalized score scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub betas: Vec<f64>,
}

/// Per-class divisors mapping accumulated scores onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub divisors: Vec<f64>,
}

impl ScoreScale {
    pub fn unit(classes: usize) -> Self {
        Self {
            divisors: vec![1.0; classes],
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.divisors.len() != classes {
            return Err(Error::config("one score divisor per class required"));
        }
        if self.divisors.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::config("score divisors must be > 0"));
        }
        Ok(())
    }

    /// `min(score / divisor, 1)`.
    pub fn normalize(&self, class: usize, score: f64) -> f64 {
        (score / self.divisors[class]).min(1.0)
    }
}

impl ThresholdSet {
    pub fn uniform(classes: usize, beta: f64) -> Self {
        Self {
            betas: vec![beta; classes],
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.betas.len() != classes {
            return Err(Error::config("one threshold per class required"));
        }
        if self.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::config("thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Whether a raw score counts as detected: positive and at or above threshold.
fn is_active(raw: f64, normalized: f64, beta: f64) -> bool {
    raw > 0.0 && normalized >= beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub class_id: usize,
    pub onset: usize,
    pub offset: usize,
    /// Highest normalized score in the run.
    pub peak: f64,
    /// Frame at which any index of the run first crossed threshold, when known.
    pub trigger_frame: Option<usize>,
}

impl DetectedEvent {
    pub fn center(&self) -> f64 {
        (self.onset + self.offset) as f64 / 2.0
    }
}

/// Maximal runs of above-threshold indices, per class, in index order.
pub fn segment_events(
    track: &ConfidenceTrack,
    thresholds: &ThresholdSet,
    scale: &ScoreScale,
) -> Result<Vec<DetectedEvent>> {
    thresholds.validate(track.classes())?;
    scale.validate(track.classes())?;
    let mut events = Vec::new();
    for class in 0..track.classes() {
        let beta = thresholds.betas[class];
        let mut run: Option<DetectedEvent> = None;
        for (n, &raw) in track.class_scores(class).iter().enumerate() {
            let norm = scale.normalize(class, raw);
            if is_active(raw, norm, beta) {
                let ev = run.get_or_insert(DetectedEvent {
                    class_id: class,
                    onset: n,
                    offset: n,
                    peak: norm,
                    trigger_frame: None,
                });
                ev.offset = n;
                ev.peak = ev.peak.max(norm);
            } else if let Some(ev) = run.take() {
                events.push(ev);
            }
        }
        events.extend(run);
    }
    Ok(events)
}

/// Early-detection notification: a class region crossed its threshold for the first time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trigger {
    pub class_id: usize,
    /// Frame whose vote caused the crossing.
    pub frame: usize,
    /// Extent of the above-threshold run at trigger time.
    pub onset: usize,
    pub offset: usize,
    pub score: f64,
}

/// Per-stream incremental detector.
#[derive(Debug, Clone)]
pub struct DetectorState {
    track: ConfidenceTrack,
    thresholds: ThresholdSet,
    scale: ScoreScale,
    /// Frame at which each index first became active, per class.
    activated_at: Vec<Vec<Option<usize>>>,
}

impl DetectorState {
    pub fn new(thresholds: ThresholdSet, scale: ScoreScale) -> Result<Self> {
        let classes = thresholds.betas.len();
        thresholds.validate(classes)?;
        scale.validate(classes)?;
        Ok(Self {
            track: ConfidenceTrack::new(classes),
            thresholds,
            scale,
            activated_at: vec![Vec::new(); classes],
        })
    }

    pub fn track(&self) -> &ConfidenceTrack {
        &self.track
    }

    pub fn into_track(self) -> ConfidenceTrack {
        self.track
    }

    pub fn is_active(&self, class: usize, n: usize) -> bool {
        self.activated_at[class].get(n).is_some_and(Option::is_some)
    }

    pub fn normalized_score(&self, class: usize, n: usize) -> f64 {
        self.scale.normalize(class, self.track.score(class, n))
    }

    /// Consumes frame `m`'s network outputs; returns regions that crossed
    /// threshold for the first time at this frame.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, m: usize, p_fg: f64, posterior: &[f64], d: DistancePair) -> Result<Vec<Trigger>> {
        let contrib = frame_confidence(m, p_fg, posterior, d)?;
        self.track.accumulate(&contrib)?;
        let len = self.track.len();
        let mut triggers = Vec::new();
        for class in 0..self.track.classes() {
            if contrib.weights[class] == 0.0 {
                continue;
            }
            let beta = self.thresholds.betas[class];
            let activated = &mut self.activated_at[class];
            activated.resize(len, None);
            let mut fresh = Vec::new();
            for n in contrib.roi.lo..=contrib.roi.hi {
                let raw = self.track.score(class, n);
                if activated[n].is_none() && is_active(raw, self.scale.normalize(class, raw), beta) {
                    activated[n] = Some(m);
                    fresh.push(n);
                }
            }
            let mut last_reported_end = None;
            for n in fresh {
                if last_reported_end.is_some_and(|end| n <= end) {
                    continue;
                }
                let mut lo = n;
                while lo > 0 && activated[lo - 1].is_some() {
                    lo -= 1;
                }
                let mut hi = n;
                while hi + 1 < len && activated[hi + 1].is_some() {
                    hi += 1;
                }
                last_reported_end = Some(hi);
                let new_region = activated[lo..=hi].iter().all(|a| *a == Some(m));
                if new_region {
                    let score = (lo..=hi)
                        .map(|i| self.scale.normalize(class, self.track.score(class, i)))
                        .fold(0.0, f64::max);
                    triggers.push(Trigger {
                        class_id: class,
                        frame: m,
                        onset: lo,
                        offset: hi,
                        score,
                    });
                }
            }
        }
        Ok(triggers)
    }

    /// Final segmentation with each run's earliest trigger frame attached.
    pub fn detections(&self) -> Result<Vec<DetectedEvent>> {
        let mut events = segment_events(&self.track, &self.thresholds, &self.scale)?;
        for ev in &mut events {
            ev.trigger_frame = self.activated_at[ev.class_id][ev.onset..=ev.offset]
                .iter()
                .flatten()
                .min()
                .copied();
        }
        Ok(events)
    }
}

/// Per-frame network outputs with distances restored to frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutputs {
    /// `P(foreground | x_m)`.
    pub p_fg: Vec<f64>,
    /// Class posteriors, `frames × C`.
    pub posterior: Array2<f64>,
    pub distances: Vec<DistancePair>,
}

impl FrameOutputs {
    pub fn len(&self) -> usize {
        self.p_fg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_fg.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.posterior.ncols()
    }
}

/// Accumulated scores of a complete stream, without thresholding.
pub fn accumulate_stream(outputs: &FrameOutputs) -> Result<ConfidenceTrack> {
    let mut track = ConfidenceTrack::new(outputs.classes());
    for m in 0..outputs.len() {
        let posterior = outputs.posterior.row(m);
        let posterior = posterior.as_slice().expect("standard layout");
        track.accumulate(&frame_confidence(m, outputs.p_fg[m], posterior, outputs.distances[m])?)?;
    }
    Ok(track)
}

/// Feeds a whole stream through a fresh detector, frame by frame.
///
/// Frames for which `observed` is false still advance the stream but vote
/// with zero weight, as if the detector had not seen them.
pub fn run_detector(
    outputs: &FrameOutputs,
    thresholds: &ThresholdSet,
    scale: &ScoreScale,
    observed: impl Fn(usize) -> bool,
) -> Result<(DetectorState, Vec<Trigger>)> {
    let mut state = DetectorState::new(thresholds.clone(), scale.clone())?;
    let mut triggers = Vec::new();
    for m in 0..outputs.len() {
        let p_fg = if observed(m) { outputs.p_fg[m] } else { 0.0 };
        let posterior = outputs.posterior.row(m);
        let posterior = posterior.as_slice().expect("standard layout");
        triggers.extend(state.step(m, p_fg, posterior, outputs.distances[m])?);
    }
    Ok((state, triggers))
}
