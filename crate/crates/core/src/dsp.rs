//! Log-mel features and noise mixing.
//!
//! Framing: 25 ms Hamming-windowed frames every 10 ms, 512-point FFT, 40
//! triangular filters on the HTK mel scale from 0 Hz to Nyquist, natural log
//! of filter energy with a 1e-10 floor.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 40;
pub const FRAME_LENGTH_MS: f64 = 25.0;
pub const FRAME_SHIFT_MS: f64 = 10.0;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    /// Samples between `start` and `end` seconds, clamped to the signal.
    pub fn segment(&self, start: f64, end: f64) -> Result<Waveform> {
        if !(start >= 0.0 && end > start) {
            return Err(Error::param(format!("bad segment {start}..{end}")));
        }
        let sr = f64::from(self.sample_rate);
        let a = ((start * sr).round() as usize).min(self.len());
        let b = ((end * sr).round() as usize).min(self.len());
        Ok(Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}

/// `T×40` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (_, d) = frames.dims2()?;
        if d != N_MELS {
            return Err(Error::shape(format!("features must have {N_MELS} columns, got {d}")));
        }
        Ok(FeatureMatrix { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits into Hamming-windowed frames. Yields `1 + (N − frame_len) / hop`
/// frames.
pub fn frame_signal(w: &Waveform, frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if hop == 0 || frame_len < hop {
        return Err(Error::param(format!(
            "need frame_len >= hop >= 1, got frame_len={frame_len} hop={hop}"
        )));
    }
    if w.len() < frame_len {
        return Err(Error::TooShort {
            len: w.len(),
            needed: frame_len,
        });
    }
    let window = hamming(frame_len);
    let count = 1 + (w.len() - frame_len) / hop;
    Ok((0..count)
        .map(|f| {
            w.samples[f * hop..f * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = f64::from(sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let weights = (0..n_filters)
            .map(|f| {
                let (lo, mid, hi) = (edges[f], edges[f + 1], edges[f + 2]);
                (0..n_bins)
                    .map(|b| {
                        let hz = b as f64 * bin_hz;
                        if hz <= lo || hz >= hi {
                            0.0
                        } else if hz <= mid {
                            (hz - lo) / (mid - lo)
                        } else {
                            (hi - hz) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            centers_hz: edges[1..=n_filters].to_vec(),
        }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Reusable log-mel front end for one sample rate.
#[derive(Clone)]
pub struct FeatureExtractor {
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    n_fft: usize,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("sample_rate", &self.sample_rate)
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl FeatureExtractor {
    pub fn new(sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        let sr = f64::from(sample_rate);
        let frame_len = (sr * FRAME_LENGTH_MS / 1000.0).round() as usize;
        let hop = (sr * FRAME_SHIFT_MS / 1000.0).round() as usize;
        if hop == 0 {
            return Err(Error::param("sample rate too low for a 10 ms hop"));
        }
        let n_fft = frame_len.next_power_of_two();
        Ok(FeatureExtractor {
            sample_rate,
            frame_len,
            hop,
            n_fft,
            filterbank: MelFilterbank::new(N_MELS, n_fft, sample_rate),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&s| Complex::new(s, 0.0)).collect();
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples"));
        }
        if w.sample_rate != self.sample_rate {
            return Err(Error::param(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate, w.sample_rate
            )));
        }
        let frames = frame_signal(w, self.frame_len, self.hop)?;
        let mut data = Vec::with_capacity(frames.len() * N_MELS);
        for frame in &frames {
            let energies = self.filterbank.apply(&self.power_spectrum(frame));
            data.extend(energies.into_iter().map(|e| (e + LOG_FLOOR).ln()));
        }
        FeatureMatrix::new(Tensor::new(&[frames.len(), N_MELS], data)?)
    }
}

/// Log-mel features with filters derived for the waveform's own sample rate.
pub fn log_mel(w: &Waveform) -> Result<FeatureMatrix> {
    FeatureExtractor::new(w.sample_rate)?.log_mel(w)
}

/// Scale applied to `noise` so that the mix has the requested SNR.
pub fn snr_scale(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `clean + α·noise` at `snr_db`. Noise is looped or truncated to the clean
/// length first.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::param("SNR must be finite"));
    }
    let fitted = fit_noise(noise, clean.len())?;
    let clean_power = clean.power();
    let noise_power = mean_power(&fitted);
    if clean_power <= 0.0 {
        return Err(Error::param("clean signal has zero power"));
    }
    if noise_power <= 0.0 {
        return Err(Error::param("noise has zero power"));
    }
    let alpha = snr_scale(clean_power, noise_power, snr_db);
    let samples = clean.samples.iter().zip(&fitted).map(|(c, n)| c + alpha * n).collect();
    Waveform::new(samples, clean.sample_rate)
}

fn fit_noise(noise: &Waveform, len: usize) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::param("noise has zero power"));
    }
    Ok(noise.samples.iter().copied().cycle().take(len).collect())
}

/// Reads a mono PCM16 RIFF/WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "need 16-bit PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!("need mono, found {} channels", spec.channels)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono PCM16 file, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(hz: f64, secs: f64) -> Waveform {
        let n = (secs * 16_000.0) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / 16_000.0).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_counts() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        assert_eq!(frame_signal(&w, 400, 160).unwrap().len(), 98);
        let w = Waveform::new(vec![0.0; 400], SAMPLE_RATE).unwrap();
        assert_eq!(frame_signal(&w, 400, 160).unwrap().len(), 1);
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(matches!(frame_signal(&w, 400, 160), Err(Error::TooShort { .. })));
        assert!(frame_signal(&w, 100, 160).is_err());
    }

    #[test]
    fn one_second_shape_and_silence_floor() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let f = log_mel(&w).unwrap();
        assert_eq!(f.frames.shape(), &[98, 40]);
        assert!(f.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn empty_waveform_errors() {
        let w = Waveform::new(vec![], SAMPLE_RATE).unwrap();
        assert!(matches!(log_mel(&w), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn tone_peaks_in_nearest_filter() {
        let fe = FeatureExtractor::new(SAMPLE_RATE).unwrap();
        let centers = fe.filterbank().centers_hz();
        let nearest = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        let f = fe.log_mel(&tone(1000.0, 1.0)).unwrap();
        let hits = (0..f.num_frames())
            .filter(|&t| {
                let row = f.frames.row(t);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                argmax == nearest
            })
            .count();
        assert!(hits as f64 >= 0.95 * f.num_frames() as f64);
    }

    #[test]
    fn filterbank_covers_spectrum() {
        let fb = MelFilterbank::new(40, 512, SAMPLE_RATE);
        for row in fb.weights() {
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        for bin in 1..256 {
            assert!(fb.weights().iter().any(|r| r[bin] > 0.0), "bin {bin} uncovered");
        }
    }

    #[test]
    fn snr_scale_closed_forms() {
        assert!((snr_scale(1.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((snr_scale(0.3, 0.3, 10.0) - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn mix_hits_requested_snr() {
        let clean = tone(440.0, 0.2);
        let noise = Waveform::new(
            (0..1000).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let mixed = mix_at_snr(&clean, &noise, 7.5).unwrap();
        let residual: Vec<f64> = mixed.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect();
        let achieved = 10.0 * (clean.power() / mean_power(&residual)).log10();
        assert!((achieved - 7.5).abs() < 1e-6);
    }

    #[test]
    fn silent_inputs_rejected() {
        let clean = tone(440.0, 0.1);
        let silent = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        assert!(mix_at_snr(&clean, &silent, 10.0).is_err());
        assert!(mix_at_snr(&silent, &clean, 10.0).is_err());
    }

    #[test]
    fn wav_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = tone(300.0, 0.05);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(back
            .samples
            .iter()
            .zip(&w.samples)
            .all(|(a, b)| (a - b).abs() < 1.0 / 32768.0));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::UnsupportedAudio { .. })));
    }
}
