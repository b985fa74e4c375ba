//! WAV ingestion and log-magnitude spectrograms.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const WINDOW: usize = 400;
/// 10 ms hop.
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const FREQ_BINS: usize = FFT_SIZE / 2 + 1;
pub const LOG_FLOOR: f64 = 1e-6;

/// Corpus labels attached to an utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtteranceInfo {
    pub speaker: String,
    pub language: String,
    pub device: String,
    pub session: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Samples in [-1, 1).
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub info: UtteranceInfo,
}

impl Utterance {
    pub fn new(samples: Vec<f64>, info: UtteranceInfo) -> Self {
        Utterance {
            samples,
            sample_rate: SAMPLE_RATE,
            info,
        }
    }
}

/// Read a 16 kHz mono 16-bit PCM file.
pub fn load_wav(path: &Path) -> Result<Utterance> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: channels is {}, expected 1 (mono)",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample format is {:?} {}-bit, expected 16-bit integer PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample_rate is {}, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Utterance::new(samples, UtteranceInfo::default()))
}

/// Nearest 16-bit code for a sample, saturating at full scale.
pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Write samples as 16 kHz mono 16-bit PCM. Samples that are already multiples
/// of 1/32768 round-trip exactly through [`load_wav`].
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn frame_count(num_samples: usize) -> Option<usize> {
    (num_samples >= WINDOW).then(|| 1 + (num_samples - WINDOW) / HOP)
}

/// `FREQ_BINS × frames` log-magnitude matrix, stored bin-major so that it maps
/// directly onto a `(1, 1, bins, frames)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub values: Vec<f64>,
    pub info: UtteranceInfo,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..FREQ_BINS).map(|b| self.at(b, t)).collect()
    }

    /// Mean over frames of each bin.
    pub fn mean_spectrum(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.frames)
            .map(|row| row.iter().sum::<f64>() / self.frames as f64)
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, FREQ_BINS, self.frames), self.values.clone())
            .expect("spectrogram size is consistent")
    }

    /// Per-bin mean and variance normalisation over time.
    pub fn normalized(&self) -> Spectrogram {
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(self.frames) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-8).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Spectrogram {
            frames: self.frames,
            values,
            info: self.info.clone(),
        }
    }
}

/// Short-time analysis with a fixed periodic Hann window.
pub struct Analyzer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for Analyzer {
    fn default() -> Self {
        Analyzer::new()
    }
}

impl Analyzer {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        Analyzer {
            window,
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Magnitudes of the first `FREQ_BINS` FFT coefficients of one windowed frame.
    pub fn magnitudes(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = s * w;
        }
        self.fft.process(&mut buf);
        buf[..FREQ_BINS].iter().map(|c| c.norm()).collect()
    }

    pub fn spectrogram(&self, utt: &Utterance) -> Result<Spectrogram> {
        let n = utt.samples.len();
        let frames = frame_count(n).ok_or_else(|| {
            Error::Length(format!("{n} samples is shorter than one {WINDOW}-sample window"))
        })?;
        let mut values = vec![0.0; FREQ_BINS * frames];
        for t in 0..frames {
            let mags = self.magnitudes(&utt.samples[t * HOP..t * HOP + WINDOW]);
            for (b, m) in mags.into_iter().enumerate() {
                values[b * frames + t] = (m + LOG_FLOOR).ln();
            }
        }
        Ok(Spectrogram {
            frames,
            values,
            info: utt.info.clone(),
        })
    }
}

pub fn spectrogram(utt: &Utterance) -> Result<Spectrogram> {
    Analyzer::new().spectrogram(utt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    Center,
    /// Uniform random offset drawn from a generator seeded with the value.
    Random(u64),
}

/// Cut or cyclically extend to exactly `frames` frames.
pub fn crop_or_pad(spec: &Spectrogram, frames: usize, crop: Crop) -> Spectrogram {
    let offset = if spec.frames > frames {
        let slack = spec.frames - frames;
        match crop {
            Crop::Center => slack / 2,
            Crop::Random(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slack),
        }
    } else {
        0
    };
    let mut values = Vec::with_capacity(FREQ_BINS * frames);
    for row in spec.values.chunks_exact(spec.frames) {
        values.extend((0..frames).map(|t| row[(offset + t) % spec.frames]));
    }
    Spectrogram {
        frames,
        values,
        info: spec.info.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Utterance {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Utterance::new(s, UtteranceInfo::default())
    }

    #[test]
    fn one_second_gives_98_frames() {
        let s = spectrogram(&tone(440.0, 16_000)).unwrap();
        assert_eq!(s.frames, 98);
        assert_eq!(s.values.len(), 257 * 98);
    }

    #[test]
    fn frame_count_formula() {
        for (n, f) in [(400, 1), (401, 1), (560, 2), (16_000, 98)] {
            assert_eq!(frame_count(n), Some(f));
        }
        assert_eq!(frame_count(399), None);
        let short = Utterance::new(vec![0.0; 399], UtteranceInfo::default());
        assert!(matches!(spectrogram(&short), Err(Error::Length(_))));
    }

    #[test]
    fn kilohertz_tone_peaks_at_bin_32() {
        let s = spectrogram(&tone(1000.0, 16_000)).unwrap();
        for t in 0..s.frames {
            let f = s.frame(t);
            let arg = (0..FREQ_BINS).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(arg, 32, "frame {t}");
        }
    }

    #[test]
    fn silence_is_the_log_floor() {
        let s = spectrogram(&Utterance::new(vec![0.0; 1000], UtteranceInfo::default())).unwrap();
        assert!(s.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn center_crop_offset() {
        let values: Vec<f64> = (0..FREQ_BINS).flat_map(|_| (0..98).map(f64::from)).collect();
        let s = Spectrogram {
            frames: 98,
            values,
            info: UtteranceInfo::default(),
        };
        let c = crop_or_pad(&s, 90, Crop::Center);
        assert_eq!(c.at(0, 0), 4.0);
        assert_eq!(c.at(256, 89), 93.0);
        assert_eq!(crop_or_pad(&s, 98, Crop::Random(3)), s);
    }

    #[test]
    fn short_input_repeats_cyclically() {
        let values: Vec<f64> = (0..FREQ_BINS).flat_map(|b| (0..5).map(move |t| (b * 10 + t) as f64)).collect();
        let s = Spectrogram {
            frames: 5,
            values,
            info: UtteranceInfo::default(),
        };
        let p = crop_or_pad(&s, 10, Crop::Center);
        for b in [0, 100] {
            for t in 0..5 {
                assert_eq!(p.at(b, t), p.at(b, t + 5));
                assert_eq!(p.at(b, t), s.at(b, t));
            }
        }
    }

    #[test]
    fn random_crop_is_seeded() {
        let values: Vec<f64> = (0..FREQ_BINS * 200).map(|v| v as f64).collect();
        let s = Spectrogram {
            frames: 200,
            values,
            info: UtteranceInfo::default(),
        };
        assert_eq!(crop_or_pad(&s, 50, Crop::Random(9)), crop_or_pad(&s, 50, Crop::Random(9)));
    }
}
