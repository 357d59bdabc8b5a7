//! Event-wise metrics, threshold calibration and online performance curves.
//!
//! A detection matches a ground-truth event of the same class when each
//! interval's center lies inside the other. Matching is one-to-one and greedy
//! in time order. From the resulting counts:
//!
//! ```text
//! F1 = 2·TP / (2·TP + FP + FN)        ER = (FP + FN) / N_truth
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    run_detector, segment_events, ConfidenceTrack, DetectedEvent, FrameOutputs, ScoreScale, ThresholdSet,
};
use crate::synth::EventInterval;

/// Indices into the detection and truth lists given to [`match_events`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    /// Unmatched detections.
    pub insertions: Vec<usize>,
    /// Unmatched ground-truth events.
    pub deletions: Vec<usize>,
}

fn center_inside(center: f64, onset: usize, offset: usize) -> bool {
    onset as f64 <= center && center <= offset as f64
}

/// Whether detection and truth share a class and contain each other's centers.
pub fn events_match(d: &DetectedEvent, g: &EventInterval) -> bool {
    d.class_id == g.class_id && center_inside(d.center(), g.onset, g.offset) && center_inside(g.center(), d.onset, d.offset)
}

pub fn match_events(detected: &[DetectedEvent], truth: &[EventInterval]) -> MatchResult {
    let mut det_order: Vec<usize> = (0..detected.len()).collect();
    det_order.sort_by_key(|&i| (detected[i].onset, detected[i].offset, detected[i].class_id));
    let mut truth_order: Vec<usize> = (0..truth.len()).collect();
    truth_order.sort_by_key(|&i| (truth[i].onset, truth[i].offset, truth[i].class_id));

    let mut truth_used = vec![false; truth.len()];
    let mut result = MatchResult::default();
    for d in det_order {
        let hit = truth_order
            .iter()
            .copied()
            .find(|&g| !truth_used[g] && events_match(&detected[d], &truth[g]));
        match hit {
            Some(g) => {
                truth_used[g] = true;
                result.pairs.push((d, g));
            }
            None => result.insertions.push(d),
        }
    }
    result.deletions = truth_order.into_iter().filter(|&g| !truth_used[g]).collect();
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_truth: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.n_truth += other.n_truth;
    }

    /// `2TP / (2TP + FP + FN)`; 1 when there is nothing to detect and nothing was detected.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// `(FP + FN) / N_truth`; undefined without ground truth.
    pub fn er(&self) -> Option<f64> {
        (self.n_truth > 0).then(|| (self.fp + self.fn_) as f64 / self.n_truth as f64)
    }
}

/// Per-class counts of one match result.
pub fn class_counts(m: &MatchResult, detected: &[DetectedEvent], truth: &[EventInterval], classes: usize) -> Vec<Counts> {
    let mut counts = vec![Counts::default(); classes];
    for &(_, g) in &m.pairs {
        counts[truth[g].class_id].tp += 1;
    }
    for &d in &m.insertions {
        counts[detected[d].class_id].fp += 1;
    }
    for &g in &m.deletions {
        counts[truth[g].class_id].fn_ += 1;
    }
    for g in truth {
        counts[g.class_id].n_truth += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub f1: f64,
    /// Absent when the class has no ground-truth events.
    pub er: Option<f64>,
}

impl ClassMetrics {
    pub fn new(name: impl Into<String>, counts: Counts) -> Self {
        Self {
            name: name.into(),
            counts,
            f1: counts.f1(),
            er: counts.er(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub per_class: Vec<ClassMetrics>,
    /// Micro-average over pooled counts.
    pub overall: ClassMetrics,
}

/// Pools per-stream `(detections, truth)` pairs into per-class and overall metrics.
pub fn compute_metrics<'a>(
    streams: impl IntoIterator<Item = (&'a [DetectedEvent], &'a [EventInterval])>,
    class_names: &[String],
    config_hash: &str,
) -> MetricsReport {
    let classes = class_names.len();
    let mut per_class = vec![Counts::default(); classes];
    for (detected, truth) in streams {
        let m = match_events(detected, truth);
        for (total, c) in per_class.iter_mut().zip(class_counts(&m, detected, truth, classes)) {
            total.add(c);
        }
    }
    let mut overall = Counts::default();
    for c in &per_class {
        overall.add(*c);
    }
    MetricsReport {
        config_hash: config_hash.to_string(),
        per_class: class_names
            .iter()
            .zip(per_class)
            .map(|(n, c)| ClassMetrics::new(n.clone(), c))
            .collect(),
        overall: ClassMetrics::new("overall", overall),
    }
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# config_hash {}", self.config_hash)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["class", "tp", "fp", "fn", "n_truth", "f1", "er"])?;
        for m in self.per_class.iter().chain(std::iter::once(&self.overall)) {
            let c = m.counts;
            csv.write_record([
                m.name.clone(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.n_truth.to_string(),
                m.f1.to_string(),
                m.er.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Candidate thresholds `0, step, 2·step, …, 1`.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("calibration.grid_step must lie in (0, 1]"));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::config("calibration.grid_step must divide 1 evenly"));
    }
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// Per-class maximum accumulated score over complete streams.
pub fn calibration_divisors<'a>(tracks: impl IntoIterator<Item = &'a ConfidenceTrack>, classes: usize) -> ScoreScale {
    let mut divisors = vec![0.0f64; classes];
    for t in tracks {
        for (c, d) in divisors.iter_mut().enumerate() {
            *d = t.class_scores(c).iter().copied().fold(*d, f64::max);
        }
    }
    for (c, d) in divisors.iter_mut().enumerate() {
        if *d <= 0.0 {
            log::warn!("class {c} never scores on calibration data; using divisor 1");
            *d = 1.0;
        }
    }
    ScoreScale { divisors }
}

/// Chosen thresholds plus the mean fold F1 of every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config_hash: String,
    pub grid: Vec<f64>,
    pub folds: usize,
    /// `mean_f1[c][g]`: mean F1 of class `c` across folds at `grid[g]`.
    pub mean_f1: Vec<Vec<f64>>,
    pub thresholds: ThresholdSet,
    pub scale: ScoreScale,
}

impl Calibration {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }
}

/// Index of the best score; ties go to the later (larger-threshold) entry.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s >= scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Picks each class's threshold by mean F1 across stream folds.
///
/// Stream `i` belongs to fold `i % folds`. A fold contributes to a class's
/// mean only if it contains ground truth of that class.
pub fn calibrate_thresholds(
    tracks: &[(ConfidenceTrack, Vec<EventInterval>)],
    scale: &ScoreScale,
    folds: usize,
    grid: &[f64],
    class_names: &[String],
    config_hash: &str,
) -> Result<Calibration> {
    let classes = class_names.len();
    if folds == 0 {
        return Err(Error::config("calibration.folds must be >= 1"));
    }
    scale.validate(classes)?;
    for (c, name) in class_names.iter().enumerate() {
        if !tracks.iter().any(|(_, truth)| truth.iter().any(|e| e.class_id == c)) {
            return Err(Error::config(format!("class `{name}` is absent from the calibration data")));
        }
    }
    let mut mean_f1 = vec![vec![0.0; grid.len()]; classes];
    for (g, &beta) in grid.iter().enumerate() {
        let thresholds = ThresholdSet::uniform(classes, beta);
        let mut fold_counts = vec![vec![Counts::default(); classes]; folds];
        for (i, (track, truth)) in tracks.iter().enumerate() {
            let detected = segment_events(track, &thresholds, scale)?;
            let m = match_events(&detected, truth);
            for (acc, c) in fold_counts[i % folds].iter_mut().zip(class_counts(&m, &detected, truth, classes)) {
                acc.add(c);
            }
        }
        for (c, row) in mean_f1.iter_mut().enumerate() {
            let scores: Vec<f64> = fold_counts
                .iter()
                .filter(|f| f[c].n_truth > 0)
                .map(|f| f[c].f1())
                .collect();
            row[g] = scores.iter().sum::<f64>() / scores.len() as f64;
        }
    }
    let betas = mean_f1
        .iter()
        .map(|row| grid[best_index(row).expect("grid is non-empty")])
        .collect();
    Ok(Calibration {
        config_hash: config_hash.to_string(),
        grid: grid.to_vec(),
        folds,
        mean_f1,
        thresholds: ThresholdSet { betas },
        scale: scale.clone(),
    })
}

/// One stream's network outputs and ground truth.
#[derive(Debug, Clone)]
pub struct ScoredStream {
    pub outputs: FrameOutputs,
    pub truth: Vec<EventInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Observed frames per event; `None` for complete events.
    pub k: Option<usize>,
    pub f1: f64,
    pub er: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineCurve {
    pub class_id: usize,
    pub name: String,
    pub median_length: f64,
    pub max_length: usize,
    pub points: Vec<CurvePoint>,
    pub offline: ClassMetrics,
}

impl OnlineCurve {
    /// Smallest truncation whose F1 reaches `fraction` of the offline F1.
    pub fn first_k_reaching(&self, fraction: f64) -> Option<usize> {
        self.points
            .iter()
            .filter_map(|p| Some((p.k?, p.f1)))
            .find(|&(_, f1)| f1 >= fraction * self.offline.f1)
            .map(|(k, _)| k)
    }

    /// Least-squares slope of F1 against k; the complete-event point sits at `max_length`.
    pub fn slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.k.unwrap_or(self.max_length) as f64, p.f1))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx == 0.0 {
            0.0
        } else {
            sxy / sxx
        }
    }
}

fn median(mut v: Vec<usize>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Class metrics of the streaming detector when every class-`class` event
/// is observed only for its first `k` frames (`None`: whole events).
pub fn truncated_metrics(
    streams: &[ScoredStream],
    class: usize,
    k: Option<usize>,
    thresholds: &ThresholdSet,
    scale: &ScoreScale,
    class_names: &[String],
) -> Result<ClassMetrics> {
    let mut counts = Counts::default();
    for s in streams {
        let hidden: Vec<(usize, usize)> = match k {
            None => Vec::new(),
            Some(k) => s
                .truth
                .iter()
                .filter(|e| e.class_id == class && e.onset + k <= e.offset)
                .map(|e| (e.onset + k, e.offset))
                .collect(),
        };
        let (state, _) = run_detector(&s.outputs, thresholds, scale, |m| {
            !hidden.iter().any(|&(lo, hi)| lo <= m && m <= hi)
        })?;
        let detected = state.detections()?;
        let m = match_events(&detected, &s.truth);
        counts.add(class_counts(&m, &detected, &s.truth, class_names.len())[class]);
    }
    Ok(ClassMetrics::new(class_names[class].clone(), counts))
}

/// F1/ER against observed event frames, every `k_step` frames up to the
/// longest event of each class, closed by the complete-event point.
pub fn online_curves(
    streams: &[ScoredStream],
    thresholds: &ThresholdSet,
    scale: &ScoreScale,
    class_names: &[String],
    k_step: usize,
) -> Result<Vec<OnlineCurve>> {
    if k_step == 0 {
        return Err(Error::config("evaluation.k_step must be >= 1"));
    }
    let mut curves = Vec::with_capacity(class_names.len());
    for (class, name) in class_names.iter().enumerate() {
        let lengths: Vec<usize> = streams
            .iter()
            .flat_map(|s| s.truth.iter().filter(|e| e.class_id == class).map(EventInterval::len))
            .collect();
        let max_length = lengths.iter().copied().max().unwrap_or(0);
        let mut points = Vec::new();
        let mut k = 0;
        while k < max_length {
            let m = truncated_metrics(streams, class, Some(k), thresholds, scale, class_names)?;
            points.push(CurvePoint { k: Some(k), f1: m.f1, er: m.er });
            k += k_step;
        }
        let offline = truncated_metrics(streams, class, None, thresholds, scale, class_names)?;
        points.push(CurvePoint {
            k: None,
            f1: offline.f1,
            er: offline.er,
        });
        curves.push(OnlineCurve {
            class_id: class,
            name: name.clone(),
            median_length: median(lengths),
            max_length,
            points,
            offline,
        });
    }
    Ok(curves)
}

pub fn write_curves_csv(path: &Path, curves: &[OnlineCurve], config_hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash {config_hash}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["class", "k", "f1", "er"])?;
    for c in curves {
        for p in &c.points {
            csv.write_record([
                c.name.clone(),
                p.k.map_or_else(|| "full".to_string(), |k| k.to_string()),
                p.f1.to_string(),
                p.er.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Self-contained line chart of F1 against observed frames, with the offline
/// F1 as a dashed reference line.
pub fn curve_svg(curve: &OnlineCurve, config_hash: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let x_max = curve.max_length.max(1) as f64;
    let x = |k: f64| PAD + (W - 2.0 * PAD) * k / x_max;
    let y = |f: f64| H - PAD - (H - 2.0 * PAD) * f;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, "<!-- config_hash {config_hash} -->");
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{tick:.1}</text>"#,
            PAD - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">observed event frames (max {})</text>"#,
        W / 2.0,
        H - 12.0,
        curve.max_length
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{} online F1</text>"#,
        W / 2.0,
        curve.name
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{PAD}" y1="{o}" x2="{r}" y2="{o}" stroke="#888" stroke-dasharray="5,4"/>"##,
        o = y(curve.offline.f1),
        r = W - PAD
    );
    let points: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.1},{:.1}", x(p.k.unwrap_or(curve.max_length) as f64), y(p.f1)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}
