//! Audio frontend: framing, 64-band log-gammatone energies, five-frame
//! context stacking, and onset/offset distance targets.
//!
//! The gammatone bank is realized in the frequency domain. Each 100 ms frame
//! is Hann-windowed and transformed; channel energy is the power spectrum
//! weighted by the squared magnitude response of a 4th-order gammatone filter
//! `|G(f)|² = (1 + ((f − fc) / b)²)^-4`, with `b = 1.019·ERB(fc)`. Centers are
//! spaced uniformly on the ERB-rate scale between the band edges.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::header::{read_f32s, write_f32s, write_header, Header};
use crate::synth::EventInterval;

pub const BANDS: usize = 64;
pub const CONTEXT: usize = 5;
pub const FEATURE_DIM: usize = BANDS * CONTEXT;

/// Added to channel energy before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;

/// Gammatone power responses below this are treated as zero.
const RESPONSE_CUTOFF: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_s: f64,
    pub hop_s: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_s: 0.100,
            hop_s: 0.010,
            f_min: 50.0,
            f_max: 22_050.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("features.sample_rate must be > 0"));
        }
        if !(self.frame_s > 0.0 && self.hop_s > 0.0) {
            return Err(Error::config("features.frame_s and features.hop_s must be > 0"));
        }
        let (frame, hop) = (self.frame_len(), self.hop_len());
        if frame < 2 || hop == 0 {
            return Err(Error::config("frame/hop shorter than one sample"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::config(format!(
                "features band edges need 0 < f_min < f_max <= {nyquist} Hz"
            )));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        (self.frame_s * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    /// `floor((len − frame) / hop) + 1`, or zero for audio shorter than a frame.
    pub fn frame_count(&self, samples: usize) -> usize {
        let frame = self.frame_len();
        if samples < frame {
            0
        } else {
            (samples - frame) / self.hop_len() + 1
        }
    }

    /// Center time of frame `i` in seconds.
    pub fn frame_center_s(&self, i: usize) -> f64 {
        (i * self.hop_len()) as f64 / self.sample_rate as f64 + self.frame_s / 2.0
    }
}

/// Slices frame `i` as `[i·hop, i·hop + frame)`.
pub fn frame_stream<'a>(audio: &'a AudioBuffer, cfg: &FeatureConfig) -> impl Iterator<Item = &'a [f32]> {
    let (frame, hop) = (cfg.frame_len(), cfg.hop_len());
    (0..cfg.frame_count(audio.samples.len())).map(move |i| &audio.samples[i * hop..i * hop + frame])
}

/// Glasberg–Moore equivalent rectangular bandwidth in Hz.
pub fn erb_bandwidth(hz: f64) -> f64 {
    24.7 * (4.37 * hz / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `hz`).
pub fn hz_to_erb_rate(hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * hz).log10()
}

pub fn erb_rate_to_hz(erbs: f64) -> f64 {
    (10f64.powf(erbs / 21.4) - 1.0) / 0.00437
}

/// `bands` centers uniformly spaced in ERB-rate, both edges included.
pub fn erb_centers(bands: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_erb_rate(f_min), hz_to_erb_rate(f_max));
    (0..bands)
        .map(|i| erb_rate_to_hz(lo + (hi - lo) * i as f64 / (bands - 1) as f64))
        .collect()
}

struct Channel {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Per-frame log-gammatone analysis.
pub struct GammatoneBank {
    cfg: FeatureConfig,
    centers: Vec<f64>,
    channels: Vec<Channel>,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GammatoneBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GammatoneBank")
            .field("cfg", &self.cfg)
            .field("bands", &self.centers.len())
            .finish()
    }
}

impl GammatoneBank {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len();
        let bin_hz = cfg.sample_rate as f64 / n as f64;
        let bins = n / 2 + 1;
        let centers = erb_centers(BANDS, cfg.f_min, cfg.f_max);
        let channels = centers
            .iter()
            .map(|&fc| {
                let b = 1.019 * erb_bandwidth(fc);
                let response = |k: usize| (1.0 + ((k as f64 * bin_hz - fc) / b).powi(2)).powi(-4);
                let support: Vec<usize> = (0..bins).filter(|&k| response(k) > RESPONSE_CUTOFF).collect();
                let first_bin = support.first().copied().unwrap_or(0);
                let last = support.last().copied().unwrap_or(0);
                Channel {
                    first_bin,
                    weights: (first_bin..=last).map(response).collect(),
                }
            })
            .collect();
        // Periodic Hann window.
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            centers,
            channels,
            window,
            window_power,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// 64 log channel energies of one raw frame.
    pub fn frame_features(&self, frame: &[f32]) -> Result<[f64; BANDS]> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.window.len()];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = [0.0; BANDS];
        self.analyze(frame, &mut buf, &mut scratch, &mut out)?;
        Ok(out)
    }

    fn analyze(
        &self,
        frame: &[f32],
        buf: &mut [Complex<f64>],
        scratch: &mut [Complex<f64>],
        out: &mut [f64],
    ) -> Result<()> {
        if frame.len() != self.window.len() {
            return Err(Error::input(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.window.len()
            )));
        }
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        self.fft.process_with_scratch(buf, scratch);
        for (o, ch) in out.iter_mut().zip(&self.channels) {
            let energy: f64 = ch
                .weights
                .iter()
                .zip(&buf[ch.first_bin..])
                .map(|(w, x)| w * x.norm_sqr())
                .sum();
            *o = (energy / self.window_power + ENERGY_FLOOR).ln();
        }
        Ok(())
    }

    /// Framewise features of a whole buffer (`frames × 64`).
    pub fn framewise(&self, audio: &AudioBuffer) -> Result<Array2<f64>> {
        if audio.sample_rate != self.cfg.sample_rate {
            return Err(Error::input(format!(
                "audio sample rate {} Hz does not match the configured {} Hz (no resampling)",
                audio.sample_rate, self.cfg.sample_rate
            )));
        }
        let count = self.cfg.frame_count(audio.samples.len());
        let mut out = Array2::zeros((count, BANDS));
        let mut buf = vec![Complex::new(0.0, 0.0); self.window.len()];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for (mut row, frame) in out.rows_mut().into_iter().zip(frame_stream(audio, &self.cfg)) {
            self.analyze(frame, &mut buf, &mut scratch, row.as_slice_mut().unwrap())?;
        }
        Ok(out)
    }
}

/// Network input for one frame: five concatenated 64-band vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    /// Index of the center frame.
    pub frame_index: usize,
    pub time_s: f64,
}

fn context_index(i: usize, k: usize, count: usize) -> usize {
    (i + k).saturating_sub(CONTEXT / 2).min(count - 1)
}

/// Frames `i−2 ..= i+2` concatenated, replicating edge frames at the boundaries.
pub fn stack_context(framewise: ArrayView2<f64>, i: usize, cfg: &FeatureConfig) -> Result<FeatureFrame> {
    let count = framewise.nrows();
    if count == 0 {
        return Err(Error::input("no frames to stack"));
    }
    if i >= count {
        return Err(Error::input(format!("frame {i} out of range (count {count})")));
    }
    let mut values = Vec::with_capacity(FEATURE_DIM);
    for k in 0..CONTEXT {
        values.extend(framewise.row(context_index(i, k, count)).iter());
    }
    Ok(FeatureFrame {
        values,
        frame_index: i,
        time_s: cfg.frame_center_s(i),
    })
}

/// Context-stacked rows for many center indices at once (`len × 320`).
pub fn stack_rows(framewise: ArrayView2<f64>, indices: &[usize]) -> Array2<f64> {
    let count = framewise.nrows();
    let bands = framewise.ncols();
    let mut out = Array2::zeros((indices.len(), bands * CONTEXT));
    for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
        for k in 0..CONTEXT {
            row.slice_mut(ndarray::s![k * bands..(k + 1) * bands])
                .assign(&framewise.row(context_index(i, k, count)));
        }
    }
    out
}

/// Per-band mean/standard deviation fitted on training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(framewise: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let mut sum = vec![0.0; BANDS];
        let mut sq = vec![0.0; BANDS];
        let mut n = 0usize;
        for block in framewise {
            for row in block.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::input("cannot fit feature statistics on zero frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; BANDS],
            std: vec![1.0; BANDS],
        }
    }

    pub fn apply(&self, framewise: &mut Array2<f64>) {
        for mut row in framewise.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// Frame extraction plus standardization in one step.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub bank: GammatoneBank,
    pub standardizer: Standardizer,
}

impl FeatureExtractor {
    pub fn framewise(&self, audio: &AudioBuffer) -> Result<Array2<f64>> {
        let mut f = self.bank.framewise(audio)?;
        self.standardizer.apply(&mut f);
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceUnit {
    Frames,
    Normalized,
}

/// Distances from a frame back to its event onset and forward to its offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePair {
    pub on: f64,
    pub off: f64,
    pub unit: DistanceUnit,
}

impl DistancePair {
    pub fn frames(on: f64, off: f64) -> Self {
        Self {
            on,
            off,
            unit: DistanceUnit::Frames,
        }
    }

    pub fn normalized(on: f64, off: f64) -> Self {
        Self {
            on,
            off,
            unit: DistanceUnit::Normalized,
        }
    }
}

/// `(i − onset, offset − i)` in frames.
pub fn distance_targets(event: &EventInterval, i: usize) -> Result<DistancePair> {
    if i < event.onset || i > event.offset {
        return Err(Error::contract(format!(
            "frame {i} lies outside event [{}, {}]",
            event.onset, event.offset
        )));
    }
    Ok(DistancePair::frames((i - event.onset) as f64, (event.offset - i) as f64))
}

/// Maximum onset/offset distances over the training events, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub max_on: f64,
    pub max_off: f64,
}

impl NormalizationConstants {
    pub fn new(max_on: f64, max_off: f64) -> Result<Self> {
        let k = Self { max_on, max_off };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_on > 0.0 && self.max_off > 0.0) {
            return Err(Error::config(format!(
                "distance normalization maxima must be > 0 (got {}, {})",
                self.max_on, self.max_off
            )));
        }
        Ok(())
    }

    /// Largest `d_on`/`d_off` over all frames of the given events.
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a EventInterval>) -> Result<Self> {
        let longest = events
            .into_iter()
            .map(|e| (e.offset - e.onset) as f64)
            .fold(0.0, f64::max);
        Self::new(longest, longest)
    }

    /// Divides by the maxima and clamps to `[0, 1]`.
    pub fn normalize(&self, d: DistancePair) -> Result<DistancePair> {
        self.validate()?;
        if d.unit != DistanceUnit::Frames {
            return Err(Error::input("normalize expects distances in frames"));
        }
        Ok(DistancePair::normalized(
            (d.on / self.max_on).clamp(0.0, 1.0),
            (d.off / self.max_off).clamp(0.0, 1.0),
        ))
    }

    pub fn restore(&self, d: DistancePair) -> Result<DistancePair> {
        self.validate()?;
        if d.unit != DistanceUnit::Normalized {
            return Err(Error::input("restore expects normalized distances"));
        }
        Ok(DistancePair::frames(d.on * self.max_on, d.off * self.max_off))
    }
}

const FEATURE_MAGIC: &str = "EARLYDET-FEATURES 1";

/// Writes framewise features: text header, then little-endian f32 rows.
pub fn write_feature_file(path: &Path, features: ArrayView2<f64>, cfg: &FeatureConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        FEATURE_MAGIC,
        &[
            ("count", features.nrows().to_string()),
            ("dim", features.ncols().to_string()),
            ("hop_s", cfg.hop_s.to_string()),
            ("frame_s", cfg.frame_s.to_string()),
        ],
    )?;
    write_f32s(&mut w, features.iter().map(|&v| v as f32))?;
    Ok(())
}

/// Reads a feature file; returns the matrix with its `(hop_s, frame_s)`.
pub fn read_feature_file(path: &Path) -> Result<(Array2<f32>, f64, f64)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let header = Header::read(&mut r, FEATURE_MAGIC, path)?;
    let count: usize = header.parse("count")?;
    let dim: usize = header.parse("dim")?;
    let mut data = vec![0f32; count * dim];
    read_f32s(&mut r, &mut data).map_err(|_| header.error("truncated feature payload"))?;
    let matrix = Array2::from_shape_vec((count, dim), data).expect("size checked");
    Ok((matrix, header.parse("hop_s")?, header.parse("frame_s")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(hz: f64, amp: f64, seconds: f64, rate: u32) -> AudioBuffer {
        let n = (seconds * rate as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| (amp * (2.0 * std::f64::consts::PI * hz * i as f64 / rate as f64).sin()) as f32)
                .collect(),
            rate,
        )
    }

    #[test]
    fn one_second_gives_91_frames() {
        let cfg = FeatureConfig::default();
        assert_eq!((cfg.frame_len(), cfg.hop_len()), (4410, 441));
        let audio = AudioBuffer::new(vec![0.0; 44_100], 44_100);
        let frames: Vec<_> = frame_stream(&audio, &cfg).collect();
        assert_eq!(frames.len(), 91);
        assert!(frames.iter().all(|f| f.len() == 4410));
    }

    #[test]
    fn frame_boundary_cases() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.frame_count(4410), 1);
        assert_eq!(cfg.frame_count(4409), 0);
        assert_eq!(cfg.frame_count(4410 + 440), 1);
        assert_eq!(cfg.frame_count(4410 + 441), 2);
        assert_eq!((cfg.frame_s, cfg.hop_s), (0.1, 0.01));
    }

    proptest! {
        #[test]
        fn frame_count_matches_counting(len in 0usize..20_000, rate in prop::sample::select(vec![8000u32, 16000, 22050])) {
            let cfg = FeatureConfig { sample_rate: rate, f_max: rate as f64 / 2.0, ..Default::default() };
            let (frame, hop) = (cfg.frame_len(), cfg.hop_len());
            let mut counted = 0;
            while counted * hop + frame <= len {
                counted += 1;
            }
            prop_assert_eq!(cfg.frame_count(len), counted);
        }

        #[test]
        fn normalize_restore_round_trip(on in 0.0f64..500.0, off in 0.0f64..400.0) {
            let k = NormalizationConstants::new(500.0, 400.0).unwrap();
            let back = k.restore(k.normalize(DistancePair::frames(on, off)).unwrap()).unwrap();
            prop_assert!((back.on - on).abs() < 1e-12 && (back.off - off).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let bank = GammatoneBank::new(FeatureConfig::default()).unwrap();
        let f = bank.frame_features(&vec![0.0; 4410]).unwrap();
        assert_eq!(f.len(), BANDS);
        assert!(f.iter().all(|&v| v == ENERGY_FLOOR.ln()));
    }

    #[test]
    fn centers_span_band_edges() {
        let bank = GammatoneBank::new(FeatureConfig::default()).unwrap();
        let c = bank.centers();
        assert_eq!(c.len(), 64);
        assert!((c[0] - 50.0).abs() < 1e-9);
        assert!((c[63] - 22_050.0).abs() < 1e-6);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tone_peaks_near_its_channel() {
        // Independent center table: 64 points uniform in 21.4·log10(1 + 0.00437 f).
        let erb = |f: f64| 21.4 * (1.0 + 0.00437 * f).log10();
        let (lo, hi) = (erb(50.0), erb(22_050.0));
        let table: Vec<f64> = (0..64)
            .map(|i| (10f64.powf((lo + (hi - lo) * i as f64 / 63.0) / 21.4) - 1.0) / 0.00437)
            .collect();
        let nearest = (0..64)
            .min_by(|&a, &b| (table[a] - 1000.0).abs().total_cmp(&(table[b] - 1000.0).abs()))
            .unwrap();

        let bank = GammatoneBank::new(FeatureConfig::default()).unwrap();
        let audio = tone(1000.0, 0.5, 0.1, 44_100);
        let f = bank.frame_features(&audio.samples).unwrap();
        let argmax = (0..64).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        assert!(argmax.abs_diff(nearest) <= 1, "argmax {argmax}, nearest {nearest}");
    }

    #[test]
    fn shifting_by_one_hop_shifts_features() {
        let cfg = FeatureConfig::default();
        let bank = GammatoneBank::new(cfg).unwrap();
        let mut audio = tone(700.0, 0.3, 0.3, 44_100);
        for (i, s) in audio.samples.iter_mut().enumerate() {
            *s += 0.05 * ((i as f32) * 0.37).sin();
        }
        let shifted = AudioBuffer::new(audio.samples[cfg.hop_len()..].to_vec(), 44_100);
        let a = bank.framewise(&audio).unwrap();
        let b = bank.framewise(&shifted).unwrap();
        for i in 0..b.nrows() {
            assert_eq!(a.row(i + 1), b.row(i));
        }
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let bank = GammatoneBank::new(FeatureConfig::default()).unwrap();
        let audio = AudioBuffer::new(vec![0.0; 10_000], 16_000);
        assert!(matches!(bank.framewise(&audio), Err(Error::Input(_))));
        let bad = FeatureConfig {
            f_max: 30_000.0,
            ..Default::default()
        };
        assert!(GammatoneBank::new(bad).is_err());
    }

    #[test]
    fn context_stacking() {
        let cfg = FeatureConfig::default();
        let framewise = Array2::from_shape_fn((10, BANDS), |(i, j)| (i * 100 + j) as f64);
        let f = stack_context(framewise.view(), 5, &cfg).unwrap();
        assert_eq!(f.values.len(), FEATURE_DIM);
        for k in 0..CONTEXT {
            assert_eq!(&f.values[64 * k..64 * (k + 1)], framewise.row(3 + k).as_slice().unwrap());
        }
        // Oracle: explicitly padded sequence [0, 0, 0..9, 9, 9].
        let mut padded = vec![0, 0];
        padded.extend(0..10);
        padded.extend([9, 9]);
        for i in [0usize, 1, 8, 9] {
            let f = stack_context(framewise.view(), i, &cfg).unwrap();
            for k in 0..CONTEXT {
                let src = padded[i + k];
                assert_eq!(&f.values[64 * k..64 * (k + 1)], framewise.row(src).as_slice().unwrap());
            }
        }
        let f0 = stack_context(framewise.view(), 0, &cfg).unwrap();
        assert_eq!(f0.values[..64], f0.values[64..128]);
        assert_eq!(f0.values[64..128], f0.values[128..192]);

        let rows = stack_rows(framewise.view(), &[0, 5, 9]);
        assert_eq!(rows.row(1).as_slice().unwrap(), &f.values[..]);
        assert!(stack_context(Array2::<f64>::zeros((0, BANDS)).view(), 0, &cfg).is_err());
    }

    #[test]
    fn distance_target_cases() {
        let e = EventInterval::new(0, 100, 200).unwrap();
        let d = distance_targets(&e, 130).unwrap();
        assert_eq!((d.on, d.off), (30.0, 70.0));
        let d = distance_targets(&e, 100).unwrap();
        assert_eq!((d.on, d.off), (0.0, 100.0));
        let d = distance_targets(&e, 200).unwrap();
        assert_eq!((d.on, d.off), (100.0, 0.0));
        assert!(matches!(distance_targets(&e, 201), Err(Error::Contract(_))));
    }

    #[test]
    fn normalization_cases() {
        let k = NormalizationConstants::new(500.0, 500.0).unwrap();
        let n = k.normalize(DistancePair::frames(30.0, 70.0)).unwrap();
        assert!((n.on - 0.06).abs() < 1e-15 && (n.off - 0.14).abs() < 1e-15);
        let n = k.normalize(DistancePair::frames(600.0, 10.0)).unwrap();
        assert_eq!(n.on, 1.0);
        assert!(NormalizationConstants::new(0.0, 5.0).is_err());
        assert!(k.restore(DistancePair::frames(1.0, 1.0)).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = Array2::from_shape_fn((7, BANDS), |(i, j)| i as f64 - j as f64 * 0.5);
        write_feature_file(&path, m.view(), &FeatureConfig::default()).unwrap();
        let (back, hop, frame) = read_feature_file(&path).unwrap();
        assert_eq!((hop, frame), (0.01, 0.1));
        assert_eq!(back, m.mapv(|v| v as f32));
    }
}
