//! Dual audio front-end: 30 s chunking, log-Mel extraction, speech and music
//! encoder stand-ins, channel fusion and 10× token downsampling.
//!
//! Per full chunk the frame arithmetic is fixed:
//! 480 000 samples → 3000 Mel frames → 1500 speech frames → 150 tokens.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CHUNK_SAMPLES: usize = 480_000;
pub const CHUNK_SECONDS: usize = 30;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 128;
pub const MEL_FRAMES: usize = 3000;
pub const SPEECH_FRAMES: usize = MEL_FRAMES / 2;
pub const MEL_FMAX: f64 = 8000.0;
/// Power floor applied before `log10`.
pub const LOG_FLOOR: f32 = 1e-10;

/// Music featurizer energy bands per frame.
const MUSIC_SEGMENTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    /// Largest number of 30 s chunks accepted for one waveform.
    pub max_chunks: usize,
    pub speech_dim: usize,
    pub music_dim: usize,
    /// Samples per music-encoder frame.
    pub music_frame: usize,
    /// Speech frames averaged into one token.
    pub token_factor: usize,
    pub seed: u64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self { max_chunks: 25, speech_dim: 32, music_dim: 16, music_frame: 640, token_factor: 10, seed: 11 }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_chunks == 0 || self.speech_dim == 0 || self.music_dim == 0 {
            return Err(Error::config("audio caps and dims must be positive"));
        }
        if self.music_frame == 0
            || !CHUNK_SAMPLES.is_multiple_of(self.music_frame)
            || !self.music_frame.is_multiple_of(MUSIC_SEGMENTS)
        {
            return Err(Error::config(format!(
                "music_frame {} must divide {CHUNK_SAMPLES} and be a multiple of {MUSIC_SEGMENTS}",
                self.music_frame
            )));
        }
        if self.token_factor == 0 || !SPEECH_FRAMES.is_multiple_of(self.token_factor) {
            return Err(Error::config(format!("token_factor must divide {SPEECH_FRAMES}")));
        }
        Ok(())
    }

    pub fn tokens_per_chunk(&self) -> usize {
        SPEECH_FRAMES / self.token_factor
    }

    pub fn fused_dim(&self) -> usize {
        self.speech_dim + self.music_dim
    }
}

/// Mono 16 kHz samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("waveform is empty"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::input(format!("sample {i} is outside [-1, 1]")));
        }
        Ok(Self { samples })
    }

    /// Reads a mono, 16-bit PCM, 16 kHz WAV file. Other formats are rejected.
    pub fn from_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader =
            hound::WavReader::open(path).map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::input(format!("{} has {} channels, expected mono", path.display(), spec.channels)));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::input(format!(
                "{} is sampled at {} Hz, expected {SAMPLE_RATE} Hz",
                path.display(),
                spec.sample_rate
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::input(format!("{} is not 16-bit PCM", path.display())));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::input(format!("corrupt samples in {}: {e}", path.display())))?;
        Self::new(samples)
    }

    /// Writes the waveform as mono 16-bit PCM at 16 kHz.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        writer.finalize().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(SAMPLE_RATE)
    }
}

/// Exactly [`CHUNK_SAMPLES`] samples; the last chunk of a waveform is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    samples: Vec<f32>,
}

impl AudioChunk {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != CHUNK_SAMPLES {
            return Err(Error::precondition(format!(
                "audio chunks hold {CHUNK_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

pub fn chunk_count(samples: usize) -> usize {
    samples.div_ceil(CHUNK_SAMPLES)
}

/// Cuts a waveform into 30 s chunks, zero-padding the tail.
pub fn chunk_waveform(wav: &Waveform, max_chunks: usize) -> Result<Vec<AudioChunk>> {
    let n = chunk_count(wav.len());
    if n > max_chunks {
        return Err(Error::input(format!(
            "audio of {:.1} s needs {n} chunks; the limit is {max_chunks} chunks ({} s)",
            wav.seconds(),
            max_chunks * CHUNK_SECONDS
        )));
    }
    Ok(wav
        .samples
        .chunks(CHUNK_SAMPLES)
        .map(|piece| {
            let mut samples = piece.to_vec();
            samples.resize(CHUNK_SAMPLES, 0.0);
            AudioChunk { samples }
        })
        .collect())
}

/// Concatenates chunks and trims the padding back off.
pub fn reassemble(chunks: &[AudioChunk], original_len: usize) -> Vec<f32> {
    let mut out: Vec<f32> = chunks.iter().flat_map(|c| c.samples.iter().copied()).collect();
    out.truncate(original_len);
    out
}

/// `N_MELS × frames` log-Mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct MelGram {
    values: Tensor,
}

impl MelGram {
    pub fn new(values: Tensor) -> Result<Self> {
        let (bins, _) = values.dims2()?;
        if bins != N_MELS {
            return Err(Error::input(format!("mel spectrogram has {bins} bins, expected {N_MELS}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel < min_log_mel {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    }
}

/// Triangular Slaney-style filters with area normalisation.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `(first_bin, weights)` per filter; weights cover a contiguous bin range.
    filters: Vec<(usize, Vec<f64>)>,
    n_freqs: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Self {
        let n_freqs = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> =
            (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = |k: usize| k as f64 * sample_rate / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (right - left);
                let weights: Vec<f64> = (0..n_freqs)
                    .map(|k| {
                        let f = bin_hz(k);
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0) * norm
                    })
                    .collect();
                let first = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = weights.iter().rposition(|&w| w > 0.0).map_or(first, |i| i + 1);
                (first, weights[first..last.max(first)].to_vec())
            })
            .collect();
        Self { filters, n_freqs }
    }

    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    /// Dense weight of filter `m` at FFT bin `k`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (first, w) = &self.filters[m];
        if k < *first {
            0.0
        } else {
            w.get(k - first).copied().unwrap_or(0.0)
        }
    }

    fn apply<'a>(&'a self, power: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.filters.iter().map(move |(first, w)| w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum())
    }
}

/// Mel power before log compression, `N_MELS × MEL_FRAMES`.
///
/// Frames are centred: the chunk is reflect-padded by `N_FFT / 2` on both
/// sides, giving 3001 frames at hop 160; the last one is dropped.
pub fn mel_power(chunk: &AudioChunk) -> Tensor {
    let fb = MelFilterbank::new(N_MELS, N_FFT, f64::from(SAMPLE_RATE), 0.0, MEL_FMAX);
    let x = &chunk.samples;
    let n = x.len() as isize;
    let pad = (N_FFT / 2) as isize;
    let reflect = |i: isize| -> f64 {
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        };
        f64::from(x[j as usize])
    };
    let window: Vec<f64> =
        (0..N_FFT).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / N_FFT as f64).cos()).collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut out = vec![0.0f32; N_MELS * MEL_FRAMES];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; fb.n_freqs()];
    for t in 0..MEL_FRAMES {
        let start = (t * HOP) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(reflect(start + k as isize) * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, v) in fb.apply(&power).enumerate() {
            out[m * MEL_FRAMES + t] = v as f32;
        }
    }
    Tensor::from_parts(vec![N_MELS, MEL_FRAMES], out)
}

/// Log-Mel spectrogram of one chunk: `log10(max(power, 1e-10))`.
pub fn mel_spectrogram(chunk: &AudioChunk) -> MelGram {
    let values = mel_power(chunk).map(|v| v.max(LOG_FLOOR).log10());
    MelGram { values }
}

/// Speech encoder stand-in: one temporal convolution, kernel 3, stride 2,
/// zero padding 1, seeded weights. 3000 Mel frames → 1500 feature frames.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    /// `dim × N_MELS × 3`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl SpeechEncoder {
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / (N_MELS * 3) as f32).sqrt();
        let weight = Tensor::uniform(&[dim, N_MELS, 3], scale, &mut rng).into_data();
        let bias = Tensor::uniform(&[dim], 0.5, &mut rng).into_data();
        Self { weight, bias }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn encode(&self, mel: &MelGram) -> Result<Tensor> {
        let (bins, frames) = mel.values.dims2()?;
        if bins != N_MELS {
            return Err(Error::input(format!("speech encoder needs {N_MELS} mel bins, got {bins}")));
        }
        if frames != MEL_FRAMES {
            return Err(Error::input(format!("speech encoder needs {MEL_FRAMES} frames, got {frames}")));
        }
        let dim = self.dim();
        let m = mel.values.data();
        let mut out = Vec::with_capacity(SPEECH_FRAMES * dim);
        for t in 0..SPEECH_FRAMES {
            for o in 0..dim {
                let mut acc = self.bias[o];
                for k in 0..3 {
                    let src = (2 * t + k) as isize - 1;
                    if src < 0 || src >= frames as isize {
                        continue;
                    }
                    let src = src as usize;
                    for bin in 0..N_MELS {
                        acc += self.weight[(o * N_MELS + bin) * 3 + k] * m[bin * frames + src];
                    }
                }
                out.push(acc);
            }
        }
        Ok(Tensor::from_parts(vec![SPEECH_FRAMES, dim], out))
    }
}

/// Music encoder stand-in working on raw samples: per frame, RMS energy of
/// 16 equal segments, mapped linearly to `dim` channels.
#[derive(Debug, Clone)]
pub struct MusicEncoder {
    frame: usize,
    weight: Tensor,
    bias: Tensor,
}

impl MusicEncoder {
    pub fn seeded(dim: usize, frame: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::uniform(&[MUSIC_SEGMENTS, dim], 1.0, &mut rng);
        let bias = Tensor::uniform(&[dim], 0.5, &mut rng);
        Self { frame, weight, bias }
    }

    pub fn frames_per_chunk(&self) -> usize {
        CHUNK_SAMPLES / self.frame
    }

    pub fn encode(&self, chunk: &AudioChunk) -> Result<Tensor> {
        let seg = self.frame / MUSIC_SEGMENTS;
        let energies: Vec<f32> = chunk
            .samples
            .chunks_exact(seg)
            .map(|s| {
                let ms = s.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / seg as f64;
                ms.sqrt() as f32
            })
            .collect();
        let m = Tensor::from_parts(vec![self.frames_per_chunk(), MUSIC_SEGMENTS], energies);
        m.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// Fused speech+music features for one chunk: `frames × (speech_dim + music_dim)`,
/// speech channels first.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub values: Tensor,
    pub speech_dim: usize,
    pub music_dim: usize,
}

/// Aligns music frames to speech frames by nearest-frame mapping and
/// concatenates along channels.
pub fn fuse_audio(speech: &Tensor, music: &Tensor) -> Result<AudioFeatures> {
    let (n, ds) = speech.dims2()?;
    let (m, dm) = music.dims2()?;
    let mut out = Vec::with_capacity(n * (ds + dm));
    for i in 0..n {
        out.extend_from_slice(speech.row(i));
        out.extend_from_slice(music.row(nearest_frame(i, n, m)));
    }
    Ok(AudioFeatures { values: Tensor::from_parts(vec![n, ds + dm], out), speech_dim: ds, music_dim: dm })
}

/// Index of the source frame whose span contains the centre of target frame `i`.
pub fn nearest_frame(i: usize, target_len: usize, source_len: usize) -> usize {
    let pos = ((2 * i + 1) * source_len) / (2 * target_len);
    pos.min(source_len - 1)
}

/// Non-overlapping mean over groups of `factor` frames.
pub fn downsample_audio_tokens(feats: &AudioFeatures, factor: usize) -> Result<Tensor> {
    let (frames, ch) = feats.values.dims2()?;
    if factor == 0 || frames % factor != 0 {
        return Err(Error::precondition(format!("{frames} audio frames are not divisible by factor {factor}")));
    }
    let src = feats.values.data();
    let groups = frames / factor;
    let mut out = vec![0.0f32; groups * ch];
    for g in 0..groups {
        let dst = &mut out[g * ch..(g + 1) * ch];
        for f in 0..factor {
            let row = &src[(g * factor + f) * ch..(g * factor + f + 1) * ch];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= factor as f32;
        }
    }
    Ok(Tensor::from_parts(vec![groups, ch], out))
}

/// Number of audio tokens a waveform of `samples` length produces.
pub fn token_count(samples: usize, cfg: &AudioConfig) -> usize {
    chunk_count(samples) * cfg.tokens_per_chunk()
}

/// The full audio front-end with seeded stand-in encoders.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub speech: SpeechEncoder,
    pub music: MusicEncoder,
    pub cfg: AudioConfig,
}

impl AudioEncoder {
    pub fn from_config(cfg: &AudioConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            speech: SpeechEncoder::seeded(cfg.speech_dim, cfg.seed),
            music: MusicEncoder::seeded(cfg.music_dim, cfg.music_frame, cfg.seed.wrapping_add(1)),
            cfg: cfg.clone(),
        })
    }

    pub fn encode_chunk(&self, chunk: &AudioChunk) -> Result<Tensor> {
        let speech = self.speech.encode(&mel_spectrogram(chunk))?;
        let music = self.music.encode(chunk)?;
        downsample_audio_tokens(&fuse_audio(&speech, &music)?, self.cfg.token_factor)
    }

    /// Token matrices, one per chunk, in chunk order. Chunks are encoded in
    /// parallel.
    pub fn encode(&self, wav: &Waveform) -> Result<Vec<Tensor>> {
        let chunks = chunk_waveform(wav, self.cfg.max_chunks)?;
        chunks.par_iter().map(|c| self.encode_chunk(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav(len: usize) -> Waveform {
        Waveform::new((0..len).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect()).unwrap()
    }

    #[test]
    fn chunking_counts_and_padding() {
        assert_eq!(chunk_waveform(&wav(480_000), 25).unwrap().len(), 1);
        let two = chunk_waveform(&wav(480_001), 25).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two[1].samples()[1..].iter().all(|&s| s == 0.0));
        assert_eq!(two[1].samples().len() - 1, 479_999);
        let err = chunk_waveform(&wav(26 * 480_000), 25).unwrap_err();
        assert!(err.to_string().contains("750 s"), "{err}");
    }

    #[test]
    fn reassembly_is_bit_exact() {
        let w = wav(1_000_003);
        let chunks = chunk_waveform(&w, 25).unwrap();
        assert_eq!(reassemble(&chunks, w.len()), w.samples());
    }

    #[test]
    fn waveform_validation() {
        assert!(Waveform::new(vec![]).is_err());
        assert!(Waveform::new(vec![0.0, 1.5]).is_err());
        assert!(AudioChunk::new(vec![0.0; 10]).is_err());
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let mel = mel_spectrogram(&AudioChunk::new(vec![0.0; CHUNK_SAMPLES]).unwrap());
        assert_eq!(mel.values().shape(), &[N_MELS, MEL_FRAMES]);
        assert!(mel.values().data().iter().all(|&v| v == LOG_FLOOR.log10()));
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
    }

    #[test]
    fn speech_encoder_shapes_and_bias() {
        let enc = SpeechEncoder::seeded(4, 3);
        let zero = MelGram::new(Tensor::zeros(&[N_MELS, MEL_FRAMES])).unwrap();
        let out = enc.encode(&zero).unwrap();
        assert_eq!(out.shape(), &[SPEECH_FRAMES, 4]);
        for row in out.data().chunks(4) {
            assert_eq!(row, enc.bias.as_slice());
        }
        assert!(MelGram::new(Tensor::zeros(&[80, MEL_FRAMES])).is_err());
        let short = MelGram::new(Tensor::zeros(&[N_MELS, 10])).unwrap();
        assert!(enc.encode(&short).is_err());
    }

    #[test]
    fn music_encoder_bias_only_on_silence() {
        let enc = MusicEncoder::seeded(3, 640, 5);
        let out = enc.encode(&AudioChunk::new(vec![0.0; CHUNK_SAMPLES]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[750, 3]);
        for row in out.data().chunks(3) {
            assert_eq!(row, enc.bias.data());
        }
    }

    #[test]
    fn fusion_alignment() {
        let speech = Tensor::full(&[1500, 2], 1.0);
        let music = Tensor::full(&[1500, 1], 2.0);
        let f = fuse_audio(&speech, &music).unwrap();
        assert_eq!(f.values.shape(), &[1500, 3]);
        assert!(f.values.data().chunks(3).all(|r| r == [1.0, 1.0, 2.0]));

        // M = 750: each music frame is used for exactly two consecutive speech frames
        let ramp = Tensor::new(vec![750, 1], (0..750).map(|v| v as f32).collect()).unwrap();
        let f = fuse_audio(&speech, &ramp).unwrap();
        for i in 0..1500 {
            assert_eq!(f.values.row(i)[2], (i / 2) as f32);
        }
        // M = 1500: identity
        let ident = Tensor::new(vec![1500, 1], (0..1500).map(|v| v as f32).collect()).unwrap();
        let f = fuse_audio(&speech, &ident).unwrap();
        assert!((0..1500).all(|i| f.values.row(i)[2] == i as f32));
    }

    #[test]
    fn token_downsampling() {
        let feats = AudioFeatures { values: Tensor::full(&[1500, 3], 0.5), speech_dim: 2, music_dim: 1 };
        let t = downsample_audio_tokens(&feats, 10).unwrap();
        assert_eq!(t.shape(), &[150, 3]);
        assert!(t.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let odd = AudioFeatures { values: Tensor::zeros(&[1499, 3]), speech_dim: 2, music_dim: 1 };
        assert!(downsample_audio_tokens(&odd, 10).is_err());
    }

    #[test]
    fn token_law() {
        let cfg = AudioConfig::default();
        assert_eq!(token_count(30 * 16_000, &cfg), 150);
        assert_eq!(token_count(60 * 16_000, &cfg), 300);
        assert_eq!(token_count(60 * 16_000 + 1, &cfg), 450);
    }

    #[test]
    fn config_validation() {
        assert!(AudioConfig::default().validate().is_ok());
        assert!(AudioConfig { music_frame: 700, ..AudioConfig::default() }.validate().is_err());
        assert!(AudioConfig { token_factor: 7, ..AudioConfig::default() }.validate().is_err());
    }

    #[test]
    fn wav_round_trip_and_rate_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25]).unwrap();
        w.write_wav(&path).unwrap();
        assert_eq!(Waveform::from_wav(&path).unwrap(), w);

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bad = dir.path().join("b.wav");
        let mut wr = hound::WavWriter::create(&bad, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(Waveform::from_wav(&bad).unwrap_err().to_string().contains("44100"));
    }
}
