//! Fixed-length utterances to single-plane acoustic images.
//!
//! Pipeline: mono 16 kHz, 1.5 s → Hann STFT (25 ms / 10 ms) → log power
//! (spectrogram), log mel power (128 HTK bands) or 40 DCT-II cepstra of the
//! log mel → bilinear resize → per-image min-max to [0, 1]. Rows run from low
//! to high frequency (or cepstral index), columns are time.

use crate::error::{Error, IoContext, Result};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mel,
    Spectrogram,
    Mfcc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Mel, Mode::Spectrogram, Mode::Mfcc];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Mel => "Mel-Spectrogram",
            Mode::Spectrogram => "Spectrogram",
            Mode::Mfcc => "MFCC",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mel => "mel",
            Mode::Spectrogram => "spec",
            Mode::Mfcc => "mfcc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mel" => Ok(Mode::Mel),
            "spec" | "spectrogram" => Ok(Mode::Spectrogram),
            "mfcc" => Ok(Mode::Mfcc),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendParams {
    pub sample_rate: u32,
    pub duration: f64,
    pub win_length: usize,
    pub hop_length: usize,
    /// FFT size; the window is zero-padded to it. Large enough that every low mel band covers a bin.
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Output images are `image_size × image_size`.
    pub image_size: usize,
}

impl Default for FrontendParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration: 1.5,
            win_length: 400,
            hop_length: 160,
            n_fft: 1024,
            n_mels: 128,
            n_mfcc: 40,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
            image_size: 224,
        }
    }
}

impl FrontendParams {
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn num_frames(&self) -> usize {
        1 + (self.num_samples() - self.win_length) / self.hop_length
    }

    /// Hex SHA-256 over the parameters and the mode; cache and checkpoint key.
    pub fn hash(&self, mode: Mode) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("params serialise"));
        h.update(mode.to_string().as_bytes());
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop_length == 0 || self.win_length > self.n_fft {
            return Err(Error::Invalid("window must be non-empty and fit the FFT".into()));
        }
        if self.num_samples() < self.win_length || self.image_size == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Invalid("inconsistent frontend parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Wraps samples that already have the fixed length.
    pub fn new(samples: Vec<f32>, sample_rate: u32, duration: f64) -> Result<Self> {
        let want = (duration * sample_rate as f64).round() as usize;
        if samples.len() != want {
            return Err(Error::Shape(format!("waveform has {} samples, expected {want}", samples.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Centre-pads with zeros or centre-trims to `len` samples.
    pub fn fit(samples: &[f32], sample_rate: u32, len: usize) -> Self {
        let mut out = vec![0.0f32; len];
        if samples.len() <= len {
            let off = (len - samples.len()) / 2;
            out[off..off + samples.len()].copy_from_slice(samples);
        } else {
            let off = (samples.len() - len) / 2;
            out.copy_from_slice(&samples[off..off + len]);
        }
        Self { samples: out, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-interpolation resampling.
pub fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n_out = ((x.len() as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let step = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let t = i as f64 * step;
            let j = t.floor() as usize;
            if j + 1 >= x.len() {
                x[x.len() - 1]
            } else {
                let f = (t - j as f64) as f32;
                x[j] * (1.0 - f) + x[j + 1] * f
            }
        })
        .collect()
}

/// Reads a PCM/float WAV file as a mono, resampled, fixed-length waveform.
pub fn load_utterance(path: &Path, params: &FrontendParams) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.len() < channels {
        return Err(Error::Audio(format!("{}: zero-length audio", path.display())));
    }
    let mono: Vec<f32> =
        interleaved.chunks_exact(channels).map(|c| c.iter().sum::<f32>() / channels as f32).collect();
    let mono = resample_linear(&mono, spec.sample_rate, params.sample_rate);
    Ok(Waveform::fit(&mono, params.sample_rate, params.num_samples()))
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| Error::Audio(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Audio(e.to_string()))
}

pub fn hann(n: usize) -> Vec<f64> {
    // periodic Hann, as used for STFT analysis
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Power spectrogram `|X|^2`, shape `(n_fft/2 + 1, frames)`.
pub fn power_spectrogram(w: &Waveform, p: &FrontendParams) -> Result<Array2<f64>> {
    p.validate()?;
    let n = w.samples.len();
    if n < p.win_length {
        return Err(Error::Shape(format!("{n} samples is shorter than one window")));
    }
    let frames = 1 + (n - p.win_length) / p.hop_length;
    let bins = p.n_fft / 2 + 1;
    let window = hann(p.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    let mut out = Array2::zeros((bins, frames));
    for t in 0..frames {
        let start = t * p.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < p.win_length {
                Complex::new(w.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[k, t]] = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters, shape `(n_mels, n_fft/2 + 1)`, peak weight 1.
pub fn mel_filterbank(p: &FrontendParams) -> Array2<f64> {
    let bins = p.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(p.f_min), hz_to_mel(p.f_max));
    let edges: Vec<f64> =
        (0..p.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.n_mels + 1) as f64)).collect();
    let bin_hz = |k: usize| k as f64 * p.sample_rate as f64 / p.n_fft as f64;
    let mut fb = Array2::zeros((p.n_mels, bins));
    for m in 0..p.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = bin_hz(k);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    fb
}

/// Orthonormal DCT-II matrix, shape `(n_out, n_in)`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let pi = std::f64::consts::PI;
    Array2::from_shape_fn((n_out, n_in), |(k, n)| {
        let s = if k == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
        s * (pi * k as f64 * (2 * n + 1) as f64 / (2 * n_in) as f64).cos()
    })
}

/// Unresized log time-frequency plane for `mode`, shape `(rows, frames)`.
pub fn time_frequency(w: &Waveform, mode: Mode, p: &FrontendParams) -> Result<Array2<f64>> {
    let power = power_spectrogram(w, p)?;
    let floor = p.log_floor;
    Ok(match mode {
        Mode::Spectrogram => power.mapv(|v| v.sqrt().max(floor).log10()),
        Mode::Mel | Mode::Mfcc => {
            let mel = mel_filterbank(p).dot(&power).mapv(|v| v.max(floor).log10());
            if mode == Mode::Mel {
                mel
            } else {
                dct_matrix(p.n_mfcc, p.n_mels).dot(&mel)
            }
        }
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

/// One normalised plane; the model sees it replicated to three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub plane: Array2<f32>,
    pub mode: Mode,
    pub stats: NormStats,
}

impl FeatureImage {
    pub fn size(&self) -> usize {
        self.plane.nrows()
    }

    /// The `3 × S × S` tensor with identical channels.
    pub fn values(&self) -> Array3<f32> {
        let s = self.plane.dim();
        Array3::from_shape_fn((3, s.0, s.1), |(_, i, j)| self.plane[[i, j]])
    }
}

/// Stacks planes into a `(B, 3, S, S)` batch.
pub fn batch_tensor(images: &[&FeatureImage]) -> Array4<f32> {
    let s = images.first().map(|i| i.size()).unwrap_or(0);
    let mut out = Array4::zeros((images.len(), 3, s, s));
    for (b, img) in images.iter().enumerate() {
        for c in 0..3 {
            out.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), c).assign(&img.plane);
        }
    }
    out
}

/// Renders the acoustic image; a constant plane (e.g. silence at the log floor) maps to zeros.
pub fn acoustic_image(w: &Waveform, mode: Mode, p: &FrontendParams) -> Result<FeatureImage> {
    let tf = time_frequency(w, mode, p)?;
    let img = resize_bilinear(&tf.view(), p.image_size, p.image_size);
    let (min, max) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite("acoustic image".into()));
    }
    let range = max - min;
    let plane = if range > 0.0 {
        img.mapv(|v| ((v - min) / range) as f32)
    } else {
        Array2::zeros(img.dim())
    };
    Ok(FeatureImage { plane, mode, stats: NormStats { min, max } })
}

/// One file per record keyed by path; hits require the same parameter hash.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    hash: String,
    mode: Mode,
    size: usize,
    stats: NormStats,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(Self { dir })
    }

    fn file_for(&self, source: &Path, mode: Mode) -> PathBuf {
        let key = hex::encode(Sha256::digest(source.to_string_lossy().as_bytes()));
        self.dir.join(format!("{}-{mode}.feat", &key[..32]))
    }

    pub fn get(&self, source: &Path, mode: Mode, p: &FrontendParams) -> Option<FeatureImage> {
        let bytes = fs::read(self.file_for(source, mode)).ok()?;
        let nl = bytes.iter().position(|&b| b == b'\n')?;
        let head: CacheHeader = serde_json::from_slice(&bytes[..nl]).ok()?;
        if head.hash != p.hash(mode) || head.mode != mode {
            return None;
        }
        let body = &bytes[nl + 1..];
        if body.len() != head.size * head.size * 4 {
            return None;
        }
        let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let plane = Array2::from_shape_vec((head.size, head.size), vals).ok()?;
        Some(FeatureImage { plane, mode, stats: head.stats })
    }

    pub fn put(&self, source: &Path, img: &FeatureImage, p: &FrontendParams) -> Result<()> {
        let path = self.file_for(source, img.mode);
        let head = CacheHeader { hash: p.hash(img.mode), mode: img.mode, size: img.size(), stats: img.stats };
        let mut buf = serde_json::to_vec(&head)?;
        buf.push(b'\n');
        for v in img.plane.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(&path).at(&path)?;
        f.write_all(&buf).at(&path)
    }

    pub fn load_or_compute(&self, source: &Path, mode: Mode, p: &FrontendParams) -> Result<FeatureImage> {
        if let Some(img) = self.get(source, mode, p) {
            return Ok(img);
        }
        let img = acoustic_image(&load_utterance(source, p)?, mode, p)?;
        self.put(source, &img, p)?;
        Ok(img)
    }
}

/// Loads and renders many files, through the cache when given.
pub fn featurize(
    paths: &[&Path],
    mode: Mode,
    p: &FrontendParams,
    cache: Option<&FeatureCache>,
) -> Result<Vec<FeatureImage>> {
    paths
        .iter()
        .map(|path| match cache {
            Some(c) => c.load_or_compute(path, mode, p),
            None => acoustic_image(&load_utterance(path, p)?, mode, p),
        })
        .collect()
}
