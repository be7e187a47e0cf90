//! Waveform primitives: WAV I/O, power measurement, SNR-exact mixing and
//! construction of composite noises.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub const SAMPLE_RATE: u32 = 16_000;

/// Peak level of babble and television composites.
pub const COMPOSITE_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform::new(self.samples.iter().map(|&x| x * gain).collect(), self.sample_rate)
    }

    /// Scales so that the absolute peak equals `target`. Fails on silence.
    pub fn peak_normalized(&self, target: f64) -> Result<Waveform> {
        let peak = self.peak();
        if peak == 0.0 {
            return Err(Error::Signal("cannot peak-normalize a silent waveform".into()));
        }
        Ok(self.scaled(target / peak))
    }

    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    fn check_finite(&self) -> Result<()> {
        if self.samples.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("waveform samples".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Music,
    Ambient,
    Television,
    Babble,
}

impl NoiseType {
    pub const ALL: [NoiseType; 4] =
        [NoiseType::Music, NoiseType::Ambient, NoiseType::Television, NoiseType::Babble];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseType::Music => "music",
            NoiseType::Ambient => "ambient",
            NoiseType::Television => "television",
            NoiseType::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "music" => Ok(NoiseType::Music),
            // "noise" is the row label used for ambient noise in result tables
            "ambient" | "noise" => Ok(NoiseType::Ambient),
            "television" | "tv" => Ok(NoiseType::Television),
            "babble" => Ok(NoiseType::Babble),
            other => Err(Error::Config(format!("unknown noise type '{other}'"))),
        }
    }
}

/// What to do with samples outside [-1, 1] when writing PCM16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipPolicy {
    #[default]
    Clip,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteReport {
    pub clipped: usize,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Wav(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Wav(format!(
                "{}: unsupported codec {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    if interleaved.len() < channels {
        return Err(Error::Wav(format!("{}: zero-length payload", path.display())));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let w = Waveform::new(samples, spec.sample_rate);
    w.check_finite()?;
    Ok(w)
}

/// Writes mono PCM16 little-endian.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>, policy: ClipPolicy) -> Result<WriteReport> {
    let path = path.as_ref();
    w.check_finite()?;
    let mut report = WriteReport::default();
    let mut pcm = Vec::with_capacity(w.len());
    for &x in &w.samples {
        let v = if x.abs() > 1.0 {
            if policy == ClipPolicy::Error {
                return Err(Error::Signal(format!("sample {x} exceeds full scale")));
            }
            report.clipped += 1;
            x.signum()
        } else {
            x
        };
        pcm.push((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    {
        let mut i16_writer = writer.get_i16_writer(pcm.len() as u32);
        for s in pcm {
            i16_writer.write_sample(s);
        }
        i16_writer.flush().map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(report)
}

/// Mean of squared samples.
pub fn rms_power(w: &Waveform) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Signal("power of an empty waveform".into()));
    }
    Ok(w.samples.iter().map(|x| x * x).sum::<f64>() / w.len() as f64)
}

pub fn snr_db(signal: &Waveform, noise: &Waveform) -> Result<f64> {
    Ok(10.0 * (rms_power(signal)? / rms_power(noise)?).log10())
}

/// Crops (random contiguous window) or tiles (random phase) `noise` to
/// exactly `target_len` samples.
pub fn fit_noise_to(noise: &Waveform, target_len: usize, rng: &mut RandomStream) -> Result<Waveform> {
    let offset = draw_fit_offset(noise.len(), target_len, rng)?;
    Ok(fit_noise_at(noise, target_len, offset))
}

/// Random crop start (noise at least as long as the target) or tiling phase.
pub fn draw_fit_offset(noise_len: usize, target_len: usize, rng: &mut RandomStream) -> Result<usize> {
    if noise_len == 0 {
        return Err(Error::Signal("cannot fit an empty noise".into()));
    }
    Ok(if noise_len >= target_len {
        rng.gen_range(0..=noise_len - target_len)
    } else {
        rng.gen_range(0..noise_len)
    })
}

/// Deterministic counterpart of [`fit_noise_to`] for a known offset.
pub fn fit_noise_at(noise: &Waveform, target_len: usize, offset: usize) -> Waveform {
    if noise.len() >= target_len {
        noise.slice(offset, target_len)
    } else {
        tile_from(noise, offset, target_len)
    }
}

fn tile_from(w: &Waveform, offset: usize, target_len: usize) -> Waveform {
    let n = w.len();
    let samples = (0..target_len).map(|i| w.samples[(offset + i) % n]).collect();
    Waveform::new(samples, w.sample_rate)
}

/// Gain applied to `noise` so that `clean` over the scaled noise is `snr_db`.
pub fn snr_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let p_clean = rms_power(clean)?;
    let p_noise = rms_power(noise)?;
    if p_clean == 0.0 {
        return Err(Error::Signal("clean signal is silent; SNR undefined".into()));
    }
    if p_noise == 0.0 {
        return Err(Error::Signal("noise is silent; SNR undefined".into()));
    }
    Ok((p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixed: Waveform,
    /// The additive component actually added to the clean signal.
    pub noise: Waveform,
    pub gain: f64,
}

/// Adds `noise` (already `clean.len()` samples) to `clean` at `snr_db`.
pub fn mix_fitted_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Signal(format!(
            "sample rate mismatch: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if clean.len() != noise.len() {
        return Err(Error::Signal("fitted noise length differs from clean".into()));
    }
    let gain = snr_gain(clean, noise, snr_db)?;
    let scaled = noise.scaled(gain);
    let mixed = clean
        .samples
        .iter()
        .zip(&scaled.samples)
        .map(|(c, n)| c + n)
        .collect();
    Ok(Mixture { mixed: Waveform::new(mixed, clean.sample_rate), noise: scaled, gain })
}

pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut RandomStream,
) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Signal(format!(
            "sample rate mismatch: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if clean.is_empty() {
        return Err(Error::Signal("empty clean signal".into()));
    }
    let fitted = fit_noise_to(noise, clean.len(), rng)?;
    mix_fitted_at_snr(clean, &fitted, snr_db)
}

#[derive(Debug, Clone)]
pub struct Babble {
    pub waveform: Waveform,
    pub sources: Vec<usize>,
}

/// Overlaps `k` distinct speech clips from `pool` into one babble noise.
pub fn make_babble(pool: &[Waveform], k: usize, rng: &mut RandomStream) -> Result<Babble> {
    if !(3..=6).contains(&k) {
        return Err(Error::Signal(format!("babble needs 3 to 6 sources, got {k}")));
    }
    if pool.len() < k {
        return Err(Error::Signal(format!(
            "babble pool has {} clips, {k} requested",
            pool.len()
        )));
    }
    let sources = sample_indices(rng, pool.len(), k).into_vec();
    let waveform = babble_from(pool, &sources, rng)?;
    Ok(Babble { waveform, sources })
}

/// Sums the given pool entries (each fitted to the longest) and
/// peak-normalizes the result.
pub fn babble_from(pool: &[Waveform], sources: &[usize], rng: &mut RandomStream) -> Result<Waveform> {
    if sources.is_empty() || sources.iter().any(|&i| i >= pool.len()) {
        return Err(Error::Signal("babble source index out of range".into()));
    }
    let rate = pool[sources[0]].sample_rate;
    if sources.iter().any(|&i| pool[i].sample_rate != rate) {
        return Err(Error::Signal("babble sources differ in sample rate".into()));
    }
    let len = sources.iter().map(|&i| pool[i].len()).max().unwrap_or(0);
    let mut sum = vec![0.0; len];
    for &i in sources {
        let fitted = fit_noise_to(&pool[i], len, rng)?;
        for (acc, x) in sum.iter_mut().zip(&fitted.samples) {
            *acc += x;
        }
    }
    Waveform::new(sum, rate)
        .peak_normalized(COMPOSITE_PEAK)
        .map_err(|_| Error::Signal("degenerate babble: sources cancel to silence".into()))
}

/// Equal-power music + speech composite at the longer of the two lengths.
pub fn make_television(music: &Waveform, speech: &Waveform) -> Result<Waveform> {
    if music.sample_rate != speech.sample_rate {
        return Err(Error::Signal("television sources differ in sample rate".into()));
    }
    if music.is_empty() || speech.is_empty() {
        return Err(Error::Signal("television source is empty".into()));
    }
    let gain = television_speech_gain(music, speech)?;
    let len = music.len().max(speech.len());
    let m = tile_from(music, 0, len);
    let s = tile_from(speech, 0, len);
    let sum = m
        .samples
        .iter()
        .zip(&s.samples)
        .map(|(a, b)| a + gain * b)
        .collect();
    Waveform::new(sum, music.sample_rate)
        .peak_normalized(COMPOSITE_PEAK)
        .map_err(|_| Error::Signal("television composite is silent".into()))
}

/// Gain that brings `speech` to the power of `music`.
pub fn television_speech_gain(music: &Waveform, speech: &Waveform) -> Result<f64> {
    let pm = rms_power(music)?;
    let ps = rms_power(speech)?;
    if pm == 0.0 || ps == 0.0 {
        return Err(Error::Signal("television source is silent".into()));
    }
    Ok((pm / ps).sqrt())
}
