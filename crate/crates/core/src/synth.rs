//! Deterministic synthetic event streams with exact frame-level annotations.
//!
//! Each class is a distinct generator confined to its own frequency band, so
//! the classes are separable by construction. Events never overlap and are
//! mixed over white Gaussian background noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

/// A labeled span of frames, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventInterval {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "onset_frame")]
    pub onset: usize,
    #[serde(rename = "offset_frame")]
    pub offset: usize,
}

impl EventInterval {
    pub fn new(class_id: usize, onset: usize, offset: usize) -> Result<Self> {
        if onset > offset {
            return Err(Error::input(format!("event onset {onset} after offset {offset}")));
        }
        Ok(Self {
            class_id,
            onset,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.offset - self.onset + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.onset <= frame && frame <= self.offset
    }

    pub fn center(&self) -> f64 {
        (self.onset + self.offset) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Steady sinusoid at a frequency drawn from the band.
    ToneBurst,
    /// Linear sweep from the low to the high band edge.
    Chirp,
    /// Sum of many random-phase sinusoids spread over the band.
    NoiseBurst,
    /// Fundamental drawn from the band plus three harmonics.
    HarmonicStack,
    /// Tone with 6 Hz amplitude modulation.
    AmTone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventClassSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub duration_s: (f64, f64),
    pub band_hz: (f64, f64),
    pub amplitude: (f64, f64),
}

impl EventClassSpec {
    fn validate(&self, frame_s: f64, nyquist: f64) -> Result<()> {
        let (dmin, dmax) = self.duration_s;
        if !(dmin > 0.0 && dmin <= dmax) {
            return Err(Error::config(format!("class {}: bad duration range", self.name)));
        }
        if dmin < frame_s / 2.0 {
            return Err(Error::config(format!(
                "class {}: events shorter than half a frame cannot be annotated",
                self.name
            )));
        }
        let (lo, hi) = self.band_hz;
        let top = match self.kind {
            GeneratorKind::HarmonicStack => hi * 4.0,
            _ => hi,
        };
        if !(lo > 0.0 && lo <= hi && top < nyquist) {
            return Err(Error::config(format!("class {}: band outside (0, Nyquist)", self.name)));
        }
        if !(self.amplitude.0 > 0.0 && self.amplitude.0 <= self.amplitude.1) {
            return Err(Error::config(format!("class {}: bad amplitude range", self.name)));
        }
        Ok(())
    }
}

/// Five generators with disjoint primary bands.
pub fn default_classes() -> Vec<EventClassSpec> {
    let class = |name: &str, kind, duration_s, band_hz| EventClassSpec {
        name: name.to_string(),
        kind,
        duration_s,
        band_hz,
        amplitude: (0.05, 0.2),
    };
    vec![
        class("tone_burst", GeneratorKind::ToneBurst, (0.4, 0.9), (1200.0, 1600.0)),
        class("chirp", GeneratorKind::Chirp, (0.5, 1.0), (2500.0, 4500.0)),
        class("noise_burst", GeneratorKind::NoiseBurst, (0.3, 0.7), (6000.0, 9000.0)),
        class("harmonic_stack", GeneratorKind::HarmonicStack, (0.6, 1.2), (150.0, 200.0)),
        class("am_tone", GeneratorKind::AmTone, (0.8, 1.4), (12_000.0, 14_000.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub classes: Vec<EventClassSpec>,
    pub length_s: f64,
    pub events_per_class: usize,
    /// Standard deviation of the background noise.
    pub noise_level: f64,
    pub min_gap_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            length_s: 120.0,
            events_per_class: 10,
            noise_level: 0.01,
            min_gap_s: 0.2,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

/// Audio with its ground-truth events (sorted, non-overlapping).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedStream {
    pub audio: AudioBuffer,
    pub events: Vec<EventInterval>,
}

/// First and last frame overlapping `[start, end)` (samples) by at least half a frame.
pub fn frame_bounds(start: usize, end: usize, frames: usize, cfg: &FeatureConfig) -> Option<(usize, usize)> {
    let (len, hop) = (cfg.frame_len(), cfg.hop_len());
    let overlap = |i: usize| {
        let (a, b) = (i * hop, i * hop + len);
        b.min(end).saturating_sub(a.max(start))
    };
    let first = start.saturating_sub(len) / hop;
    let last = (end / hop + 1).min(frames);
    let hits: Vec<usize> = (first..last).filter(|&i| 2 * overlap(i) >= len).collect();
    Some((*hits.first()?, *hits.last()?))
}

pub fn synthesize_stream(spec: &StreamSpec, features: &FeatureConfig) -> Result<AnnotatedStream> {
    let rate = spec.sample_rate as f64;
    if spec.sample_rate != features.sample_rate {
        return Err(Error::config("synth and feature sample rates differ"));
    }
    if spec.min_gap_s < 0.2 {
        return Err(Error::config("synth.min_gap_s must be >= 0.2"));
    }
    if !(spec.noise_level >= 0.0) || !(spec.length_s > 0.0) {
        return Err(Error::config("synth noise level and stream length must be non-negative"));
    }
    for class in &spec.classes {
        class.validate(features.frame_s, rate / 2.0)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut schedule: Vec<usize> = (0..spec.classes.len())
        .flat_map(|c| std::iter::repeat_n(c, spec.events_per_class))
        .collect();
    schedule.shuffle(&mut rng);
    let durations: Vec<f64> = schedule
        .iter()
        .map(|&c| {
            let (lo, hi) = spec.classes[c].duration_s;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    let busy: f64 = durations.iter().sum::<f64>() + (durations.len() + 1) as f64 * spec.min_gap_s;
    let slack = spec.length_s - busy;
    if slack < 0.0 {
        return Err(Error::config(format!(
            "{} events need {busy:.1} s but the stream is {:.1} s",
            durations.len(),
            spec.length_s
        )));
    }
    let shares: Vec<f64> = (0..=durations.len()).map(|_| rng.random::<f64>()).collect();
    let share_total: f64 = shares.iter().sum();

    let total = (spec.length_s * rate).round() as usize;
    let noise = Normal::new(0.0, spec.noise_level).expect("noise level checked");
    let mut samples: Vec<f32> = (0..total).map(|_| noise.sample(&mut rng) as f32).collect();
    let frames = features.frame_count(total);

    let mut events = Vec::with_capacity(durations.len());
    let mut t = 0.0;
    for (i, (&class_id, &dur)) in schedule.iter().zip(&durations).enumerate() {
        t += spec.min_gap_s + slack * shares[i] / share_total;
        let start = (t * rate).round() as usize;
        let end = ((t + dur) * rate).round() as usize;
        render_event(&spec.classes[class_id], &mut samples[start..end], rate, &mut rng);
        let (onset, offset) = frame_bounds(start, end, frames, features)
            .ok_or_else(|| Error::config("event does not cover any frame"))?;
        events.push(EventInterval::new(class_id, onset, offset)?);
        t += dur;
    }

    Ok(AnnotatedStream {
        audio: AudioBuffer::new(samples, spec.sample_rate),
        events,
    })
}

fn render_event(class: &EventClassSpec, out: &mut [f32], rate: f64, rng: &mut ChaCha8Rng) {
    use std::f64::consts::TAU;
    let n = out.len();
    let dur = n as f64 / rate;
    let (lo, hi) = class.band_hz;
    let amp = rng.random_range(class.amplitude.0..=class.amplitude.1);
    let phase0 = rng.random_range(0.0..TAU);
    let draw = |rng: &mut ChaCha8Rng| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let fade = ((0.01 * rate) as usize).clamp(1, n / 2 + 1);

    let partials: Vec<(f64, f64, f64)> = match class.kind {
        GeneratorKind::NoiseBurst => (0..48)
            .map(|_| (draw(rng), rng.random_range(0.0..TAU), (2.0f64 / 48.0).sqrt()))
            .collect(),
        GeneratorKind::HarmonicStack => {
            let f0 = draw(rng);
            let norm = (1..=4).map(|h| 1.0 / (h * h) as f64).sum::<f64>().sqrt();
            (1..=4).map(|h| (f0 * h as f64, phase0 * h as f64, 1.0 / (h as f64 * norm))).collect()
        }
        GeneratorKind::ToneBurst | GeneratorKind::AmTone => vec![(draw(rng), phase0, 1.0)],
        GeneratorKind::Chirp => vec![],
    };

    for (i, s) in out.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let value = match class.kind {
            GeneratorKind::Chirp => (TAU * (lo * t + (hi - lo) * t * t / (2.0 * dur)) + phase0).sin(),
            GeneratorKind::AmTone => {
                let (f, p, _) = partials[0];
                (1.0 + 0.8 * (TAU * 6.0 * t).sin()) / 1.8 * (TAU * f * t + p).sin()
            }
            _ => partials.iter().map(|&(f, p, a)| a * (TAU * f * t + p).sin()).sum(),
        };
        let edge = i.min(n - 1 - i);
        let envelope = if edge < fade {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
        } else {
            1.0
        };
        *s += (amp * envelope * value) as f32;
    }
}

/// Train/test split of independently seeded streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub train_streams: usize,
    pub test_streams: usize,
    pub stream_seconds: f64,
    pub events_per_class: usize,
    pub noise_level: f64,
    pub min_gap_s: f64,
    pub classes: Vec<EventClassSpec>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let s = StreamSpec::default();
        Self {
            train_streams: 9,
            test_streams: 3,
            stream_seconds: s.length_s,
            events_per_class: s.events_per_class,
            noise_level: s.noise_level,
            min_gap_s: s.min_gap_s,
            classes: s.classes,
        }
    }
}

impl BenchmarkSpec {
    /// Spec of stream `index` (train streams first); seeds derive from `seed` and `index`.
    pub fn stream_spec(&self, index: usize, sample_rate: u32, seed: u64) -> StreamSpec {
        StreamSpec {
            classes: self.classes.clone(),
            length_s: self.stream_seconds,
            events_per_class: self.events_per_class,
            noise_level: self.noise_level,
            min_gap_s: self.min_gap_s,
            sample_rate,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}
