//! Log-mel filterbank front end.
//!
//! Raw mono PCM goes through pre-emphasis, Hamming-windowed framing, a
//! power spectrum, and a triangular mel filterbank into T×D log-energy
//! matrices. Everything is deterministic: the same audio and config always
//! produce bit-identical features.

pub mod wav;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute floor applied to mel energies before the log. Samples live in
/// [-1, 1], so 1e-10 is far below any audible energy but keeps log finite.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio with samples normalized to [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }
}

/// One utterance's feature matrix. Frames stay `f64` end to end; archives
/// narrow to `f32` exactly once at write time.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub utterance_id: String,
    /// T×D log-mel energies.
    pub frames: Tensor<f64>,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Tensor<f64>) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            frames,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone)]
pub struct FeaturizerConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_filters: usize,
    pub f_low_hz: f64,
    /// Upper band edge; `None` means the Nyquist frequency.
    pub f_high_hz: Option<f64>,
    /// Pre-emphasis coefficient; `None` disables it.
    pub pre_emphasis: Option<f64>,
    /// Per-utterance, per-dimension mean/variance normalization.
    pub mean_var_normalize: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_filters: 80,
            f_low_hz: 20.0,
            f_high_hz: None,
            pre_emphasis: Some(0.97),
            mean_var_normalize: false,
        }
    }
}

fn samples_per(ms: f64, rate: u32) -> usize {
    (ms * rate as f64 / 1000.0).round() as usize
}

/// Cut audio into Hamming-windowed frames: `1 + floor((N − L) / S)` rows of
/// `L` samples each.
pub fn frame_signal(
    audio: &AudioBuffer,
    frame_length_ms: f64,
    frame_shift_ms: f64,
) -> Result<Tensor<f64>> {
    let l = samples_per(frame_length_ms, audio.sample_rate);
    let s = samples_per(frame_shift_ms, audio.sample_rate);
    if l < 2 || s < 1 {
        return Err(Error::Invalid(format!(
            "frame geometry too small: {l} sample window, {s} sample shift"
        )));
    }
    let n = audio.samples.len();
    if n < l {
        return Err(Error::UtteranceTooShort { got: n, need: l });
    }
    let num_frames = 1 + (n - l) / s;
    let window = hamming(l);
    let mut out = Tensor::zeros(vec![num_frames, l]);
    for f in 0..num_frames {
        let src = &audio.samples[f * s..f * s + l];
        let dst = &mut out.data_mut()[f * l..(f + 1) * l];
        for ((d, &x), &w) in dst.iter_mut().zip(src).zip(&window) {
            *d = x * w;
        }
    }
    Ok(out)
}

fn hamming(len: usize) -> Vec<f64> {
    let denom = (len - 1) as f64;
    (0..len)
        .map(|k| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / denom).cos())
        .collect()
}

/// First-order high-pass: y[t] = x[t] − α·x[t−1], with y[0] = (1−α)·x[0].
pub fn pre_emphasize(samples: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for (t, &x) in samples.iter().enumerate() {
        out.push(if t == 0 { (1.0 - alpha) * x } else { x - alpha * prev });
        prev = x;
    }
    out
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p *= 2;
    }
    p
}

/// Magnitude-squared spectrum of each frame, zero-padded to the smallest
/// power-of-two FFT length. Output is T × (nfft/2 + 1).
pub fn power_spectrum(frames: &Tensor<f64>) -> Tensor<f64> {
    let (t, l) = (frames.rows(), frames.cols());
    let nfft = next_pow2(l);
    let bins = nfft / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut out = Tensor::zeros(vec![t, bins]);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for r in 0..t {
        for (b, &x) in buf.iter_mut().zip(frames.row(r)) {
            *b = Complex::new(x, 0.0);
        }
        for b in buf.iter_mut().skip(l) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            *out.at_mut(r, k) = buf[k].norm_sqr();
        }
    }
    out
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `num_filters` rows over `fft_bins` spectrum
/// bins, peaks normalized to 1.0 at mel-spaced centers.
pub fn mel_filterbank_matrix(
    num_filters: usize,
    fft_bins: usize,
    sample_rate: u32,
    f_low: f64,
    f_high: f64,
) -> Result<Tensor<f64>> {
    if num_filters == 0 {
        return Err(Error::Invalid("need at least one mel filter".into()));
    }
    if fft_bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 FFT bins, got {fft_bins}")));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0..nyquist).contains(&f_low) || f_high <= f_low || f_high > nyquist {
        return Err(Error::BandEdges(format!(
            "f_low={f_low} Hz, f_high={f_high} Hz, Nyquist={nyquist} Hz"
        )));
    }
    let nfft = 2 * (fft_bins - 1);
    let mel_lo = hz_to_mel(f_low);
    let mel_hi = hz_to_mel(f_high);
    // num_filters triangles need num_filters + 2 mel-spaced edge points.
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (num_filters + 1) as f64))
        .collect();

    let mut fb = Tensor::zeros(vec![num_filters, fft_bins]);
    for m in 0..num_filters {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row_max = 0.0f64;
        for k in 0..fft_bins {
            let f = k as f64 * sample_rate as f64 / nfft as f64;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            row_max = row_max.max(w);
            *fb.at_mut(m, k) = w;
        }
        if row_max == 0.0 {
            return Err(Error::BandEdges(format!(
                "filter {m} ({left:.1}–{right:.1} Hz) covers no FFT bin; fewer filters or a \
                 longer window needed"
            )));
        }
        // Narrow triangles rarely put a bin exactly on the apex; rescale so
        // every row's discrete peak is exactly 1.
        for k in 0..fft_bins {
            *fb.at_mut(m, k) /= row_max;
        }
    }
    Ok(fb)
}

/// Full front end: pre-emphasis → framing → power spectrum → mel filterbank
/// → floored natural log → optional per-utterance normalization.
pub fn extract_logmel(
    audio: &AudioBuffer,
    utterance_id: &str,
    cfg: &FeaturizerConfig,
) -> Result<FeatureSequence> {
    let emphasized;
    let audio = match cfg.pre_emphasis {
        Some(alpha) => {
            emphasized = AudioBuffer {
                samples: pre_emphasize(&audio.samples, alpha),
                sample_rate: audio.sample_rate,
            };
            &emphasized
        }
        None => audio,
    };
    let frames = frame_signal(audio, cfg.frame_length_ms, cfg.frame_shift_ms)?;
    let power = power_spectrum(&frames);
    let f_high = cfg.f_high_hz.unwrap_or(audio.sample_rate as f64 / 2.0);
    let fb = mel_filterbank_matrix(
        cfg.num_filters,
        power.cols(),
        audio.sample_rate,
        cfg.f_low_hz,
        f_high,
    )?;
    let mut logmel = power.matmul(&fb.transposed())?;
    for v in logmel.data_mut() {
        *v = v.max(LOG_FLOOR).ln();
    }
    if cfg.mean_var_normalize {
        normalize_columns(&mut logmel);
    }
    let mut seq = FeatureSequence::new(utterance_id, logmel);
    seq.frame_length_ms = cfg.frame_length_ms;
    seq.frame_shift_ms = cfg.frame_shift_ms;
    Ok(seq)
}

/// Per-column zero-mean unit-variance scaling; constant columns go to zero
/// via the variance floor.
fn normalize_columns(m: &mut Tensor<f64>) {
    let (t, d) = (m.rows(), m.cols());
    for j in 0..d {
        let mean: f64 = (0..t).map(|r| m.at(r, j)).sum::<f64>() / t as f64;
        let var: f64 = (0..t).map(|r| (m.at(r, j) - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-10).sqrt();
        for r in 0..t {
            *m.at_mut(r, j) = (m.at(r, j) - mean) * inv;
        }
    }
}
