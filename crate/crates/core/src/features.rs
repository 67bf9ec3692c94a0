//! Feature frames: synthetic generators, a log-mel front-end for WAV audio,
//! and the binary feature file.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::codebook::orthonormal_rows;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, Execution};
use crate::rng;

const FEATURE_MAGIC: &[u8; 8] = b"RRVQF1\0\0";
const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Synthetic,
    Audio,
}

/// `T x D` feature frames plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frames: Matrix,
    pub sample_rate_hz: Option<u32>,
    pub source: FeatureSource,
    /// Generator or front-end parameters.
    pub metadata: Map<String, Value>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// I.i.d. standard normal frames.
pub fn synth_gaussian(frames: usize, dim: usize, seed: u64) -> Result<FeatureSet> {
    if frames == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "synth_gaussian needs T >= 1 and D >= 1 (got T={frames}, D={dim})"
        )));
    }
    let mut r = rng::stream(seed, &[rng::label::DATA]);
    let data = (0..frames * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            v as f32
        })
        .collect();
    Ok(FeatureSet {
        frames: Matrix::from_vec(frames, dim, data)?,
        sample_rate_hz: None,
        source: FeatureSource::Synthetic,
        metadata: object(json!({"generator": "gaussian", "seed": seed})),
    })
}

/// Cluster means of [`synth_gmm`]: `±separation/2` along the axes of a
/// seeded random rotation, moving to wider shells once the `2D` signed axes
/// are used up.
pub fn gmm_means(dim: usize, k: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[rng::label::DATA, 1]);
    let axes = orthonormal_rows(dim, dim, &mut r);
    (0..k)
        .map(|j| {
            let axis = &axes[(j / 2) % dim];
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let shell = 1.0 + (j / (2 * dim)) as f64;
            axis.iter().map(|a| sign * shell * 0.5 * separation * a).collect()
        })
        .collect()
}

/// Equal-weight Gaussian mixture with unit covariance.
pub fn synth_gmm(frames: usize, dim: usize, k: usize, separation: f64, seed: u64) -> Result<FeatureSet> {
    if frames == 0 || dim == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "synth_gmm needs T, D, k >= 1 (got T={frames}, D={dim}, k={k})"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!("synth_gmm separation must be finite and >= 0, got {separation}")));
    }
    let means = gmm_means(dim, k, separation, seed);
    let mut r = rng::stream(seed, &[rng::label::DATA]);
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        let c = r.random_range(0..k);
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push((m + z) as f32);
        }
    }
    Ok(FeatureSet {
        frames: Matrix::from_vec(frames, dim, data)?,
        sample_rate_hz: None,
        source: FeatureSource::Synthetic,
        metadata: object(json!({
            "generator": "gmm",
            "k": k,
            "separation": separation,
            "seed": seed
        })),
    })
}

/// Mono samples in `[-1, 1]` and the sample rate of a 16-bit integer or
/// 32-bit float PCM WAV file. Channels are averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_error)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} PCM; only 16-bit integer and 32-bit float are read"
            )))
        }
    };
    if interleaved.is_empty() || channels == 0 {
        return Err(Error::parse("WAV file has an empty data chunk"));
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV encoding not supported".into()),
        other => Error::parse(format!("malformed WAV: {other}")),
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edges in Hz: `n_mels + 2` points evenly spaced in mel from 0 to
/// Nyquist. Band `m` rises from edge `m`, peaks at edge `m + 1` and falls to
/// edge `m + 2`.
pub fn mel_band_edges(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Area-normalized triangular filters, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(sample_rate, n_mels);
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let enorm = 2.0 / (hi - lo);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let rise = (f - lo) / (mid - lo);
                    let fall = (hi - f) / (hi - mid);
                    enorm * rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_stft(len: usize, n_fft: usize, hop: usize) -> Result<usize> {
    if n_fft == 0 || !n_fft.is_power_of_two() {
        return Err(Error::invalid(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::invalid(format!("hop must lie in [1, n_fft], got {hop}")));
    }
    if len < n_fft {
        return Err(Error::invalid(format!(
            "signal of {len} samples is shorter than n_fft={n_fft}"
        )));
    }
    Ok((len - n_fft) / hop + 1)
}

/// Magnitudes of the one-sided Hann-windowed STFT, one row per frame.
pub fn stft_magnitudes(signal: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    let frames = check_stft(signal.len(), n_fft, hop)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window = hann(n_fft);
    Ok(par::map_range(Execution::default(), frames, |t| {
        let mut buf: Vec<Complex<f64>> = signal[t * hop..t * hop + n_fft]
            .iter()
            .zip(&window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        fft.process(&mut buf);
        buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
    }))
}

/// Log-compressed mel spectrogram: `ln(1e-5 + mel(|STFT|))`.
pub fn log_mel_frames(
    signal: &[f64],
    sample_rate: u32,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
) -> Result<FeatureSet> {
    check_stft(signal.len(), n_fft, hop)?;
    if n_mels == 0 || n_mels > n_fft / 2 {
        return Err(Error::invalid(format!(
            "n_mels must lie in [1, n_fft/2], got {n_mels}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let bank = mel_filterbank(sample_rate, n_fft, n_mels);
    let mags = stft_magnitudes(signal, n_fft, hop)?;
    let mut data = Vec::with_capacity(mags.len() * n_mels);
    for spectrum in &mags {
        for filt in &bank {
            let e: f64 = filt.iter().zip(spectrum).map(|(w, m)| w * m).sum();
            data.push((LOG_FLOOR + e).ln() as f32);
        }
    }
    Ok(FeatureSet {
        frames: Matrix::from_vec(mags.len(), n_mels, data)?,
        sample_rate_hz: Some(sample_rate),
        source: FeatureSource::Audio,
        metadata: object(json!({
            "front_end": "log-mel",
            "window": "hann-periodic",
            "mel_scale": "slaney",
            "filter_norm": "slaney-area",
            "compression": "ln(1e-5 + x)",
            "n_fft": n_fft,
            "hop": hop,
            "n_mels": n_mels
        })),
    })
}

pub fn features_to_bytes(fs: &FeatureSet) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&json!({
        "source": fs.source,
        "params": fs.metadata,
    }))?;
    let mut out = Vec::with_capacity(24 + meta.len() + 4 * fs.frames.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(fs.dim() as u32).to_le_bytes());
    out.extend_from_slice(&fs.sample_rate_hz.unwrap_or(0).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for v in fs.frames.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(buf: &[u8]) -> Result<FeatureSet> {
    if buf.len() < 24 {
        return Err(Error::parse("feature file shorter than its header"));
    }
    if &buf[..8] != FEATURE_MAGIC {
        return Err(Error::parse("feature file has the wrong magic"));
    }
    let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
    let (t, d, sr, meta_len) = (word(8), word(12), word(16) as u32, word(20));
    if buf.len() < 24 + meta_len {
        return Err(Error::parse("feature file truncated inside its metadata"));
    }
    let meta: Value = serde_json::from_slice(&buf[24..24 + meta_len])
        .map_err(|e| Error::parse(format!("feature metadata is not valid JSON: {e}")))?;
    let body = &buf[24 + meta_len..];
    if body.len() != t * d * 4 {
        return Err(Error::parse(format!(
            "feature body holds {} bytes, header promises {t}x{d} f32 values",
            body.len()
        )));
    }
    if t == 0 || d == 0 {
        return Err(Error::invalid(format!("feature file holds an empty {t}x{d} matrix")));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let frames = Matrix::from_vec(t, d, data)?;
    if !frames.is_finite() {
        return Err(Error::invalid("feature file holds non-finite values"));
    }
    let source = match meta.get("source") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::parse(format!("unknown feature source: {e}")))?,
        None if sr == 0 => FeatureSource::Synthetic,
        None => FeatureSource::Audio,
    };
    let metadata = meta.get("params").cloned().map(object).unwrap_or_default();
    Ok(FeatureSet {
        frames,
        sample_rate_hz: (sr != 0).then_some(sr),
        source,
        metadata,
    })
}

pub fn write_features(path: impl AsRef<Path>, fs: &FeatureSet) -> Result<()> {
    std::fs::write(path, features_to_bytes(fs)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    features_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_frames() {
        let fs = synth_gaussian(10_000, 8, 1).unwrap();
        for j in 0..8 {
            let mean: f64 = (0..fs.len()).map(|t| fs.frames.row(t)[j] as f64).sum::<f64>() / 1e4;
            assert!(mean.abs() < 0.05, "dim {j} mean {mean}");
        }
        assert_eq!(synth_gaussian(10, 3, 4).unwrap(), synth_gaussian(10, 3, 4).unwrap());
        let one = synth_gaussian(1, 1, 0).unwrap();
        assert!(one.frames.row(0)[0].is_finite());
        assert!(synth_gaussian(0, 1, 0).is_err());
        assert!(synth_gaussian(1, 0, 0).is_err());
    }

    #[test]
    fn gmm_means_are_separated() {
        let m = gmm_means(2, 2, 20.0, 3);
        let d: f64 = m[0].iter().zip(&m[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 20.0).abs() < 1e-9);
        let m = gmm_means(3, 1, 0.0, 3);
        assert!(m[0].iter().all(|&v| v == 0.0));
        assert!(synth_gmm(10, 2, 0, 1.0, 0).is_err());
        assert!(synth_gmm(10, 2, 2, -1.0, 0).is_err());
    }

    #[test]
    fn mel_scale_inverts() {
        for hz in [0.0, 300.0, 999.0, 1000.0, 4000.0, 22050.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn silence_hits_the_floor() {
        let fs = log_mel_frames(&vec![0.0; 4096], 44_100, 1024, 256, 32).unwrap();
        assert_eq!(fs.len(), (4096 - 1024) / 256 + 1);
        let floor = (1e-5f64).ln() as f32;
        assert!(fs.frames.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn stft_argument_checks() {
        assert!(log_mel_frames(&[0.0; 100], 44_100, 1024, 256, 32).is_err());
        assert!(log_mel_frames(&[0.0; 2000], 44_100, 1000, 256, 32).is_err());
        assert!(log_mel_frames(&[0.0; 2000], 44_100, 1024, 2048, 32).is_err());
        assert!(log_mel_frames(&[0.0; 2000], 44_100, 64, 16, 33).is_err());
    }

    #[test]
    fn feature_bytes_errors() {
        let fs = synth_gaussian(3, 2, 0).unwrap();
        let b = features_to_bytes(&fs).unwrap();
        assert_eq!(&b[..8], b"RRVQF1\0\0");
        assert!(matches!(features_from_bytes(&b[..b.len() - 3]), Err(Error::Parse(_))));
        let mut bad = b.clone();
        bad[1] = b'x';
        assert!(matches!(features_from_bytes(&bad), Err(Error::Parse(_))));
        assert_eq!(features_from_bytes(&b).unwrap(), fs);
    }
}
