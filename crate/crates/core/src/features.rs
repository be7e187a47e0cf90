//! Log-Mel filterbank features.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const FEATURE_MAGIC: &[u8; 4] = b"LMEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Subtract the per-utterance mean of every mel bin.
    pub mean_normalize: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            sample_rate: 16_000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 64,
            fmin: 20.0,
            fmax: 7600.0,
            log_floor: 1e-10,
            mean_normalize: false,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("fbank: {m}")));
        if self.sample_rate == 0 || self.hop_length == 0 || self.win_length == 0 {
            return bad("sample_rate, win_length and hop_length must be positive");
        }
        if self.win_length > self.n_fft {
            return bad("win_length exceeds n_fft");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

/// Frames x mel-bins matrix of log energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f32>,
    pub frames: usize,
    pub n_mels: usize,
    pub frame_shift_s: f64,
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.values[t * self.n_mels + m]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }
}

pub fn frame_count(n_samples: usize, cfg: &FbankConfig) -> Result<usize> {
    if n_samples < cfg.win_length {
        return Err(Error::Feature(format!(
            "utterance of {n_samples} samples is shorter than one window ({})",
            cfg.win_length
        )));
    }
    Ok((n_samples - cfg.win_length) / cfg.hop_length + 1)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Lower edge, center and upper edge (Hz) of every filter.
pub fn mel_breakpoints(cfg: &FbankConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// `n_mels x (n_fft/2 + 1)` unit-peak triangular weights, row-major.
pub fn mel_filterbank(cfg: &FbankConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let pts = mel_breakpoints(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Per-frame power spectra (`n_fft/2 + 1` bins each) of Hamming-windowed frames.
pub fn power_spectra(w: &Waveform, cfg: &FbankConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let frames = frame_count(w.len(), cfg)?;
    let window = hamming(cfg.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * cfg.hop_length;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (b, wv)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = w.samples[start + i] * wv;
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// Filterbank energies before the log, frames x n_mels.
pub fn mel_energies(w: &Waveform, cfg: &FbankConfig) -> Result<Vec<Vec<f64>>> {
    let fb = mel_filterbank(cfg);
    let spectra = power_spectra(w, cfg)?;
    Ok(spectra.iter().map(|p| apply_filterbank(&fb, p)).collect())
}

pub fn apply_filterbank(fb: &[Vec<f64>], power: &[f64]) -> Vec<f64> {
    fb.iter()
        .map(|row| row.iter().zip(power).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn logmel(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Feature(format!(
            "waveform rate {} differs from configured {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("waveform passed to logmel".into()));
    }
    let energies = mel_energies(w, cfg)?;
    let frames = energies.len();
    let mut logs: Vec<f64> = energies
        .iter()
        .flat_map(|row| row.iter().map(|e| (e + cfg.log_floor).ln()))
        .collect();
    if cfg.mean_normalize {
        for m in 0..cfg.n_mels {
            let mean = (0..frames).map(|t| logs[t * cfg.n_mels + m]).sum::<f64>() / frames as f64;
            for t in 0..frames {
                logs[t * cfg.n_mels + m] -= mean;
            }
        }
    }
    Ok(FeatureMatrix {
        values: logs.into_iter().map(|x| x as f32).collect(),
        frames,
        n_mels: cfg.n_mels,
        frame_shift_s: cfg.frame_shift_s(),
    })
}

/// Binary dump: magic, frames (u32 LE), n_mels (u32 LE), row-major f32 LE.
pub fn write_features(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(12 + fm.values.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(fm.frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(fm.n_mels as u32).to_le_bytes());
    for v in &fm.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>, frame_shift_s: f64) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Feature(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + frames * n_mels * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix { values, frames, n_mels, frame_shift_s })
}

/// Writes `utt_id<TAB>path` lines.
pub fn write_feature_manifest(entries: &[(String, PathBuf)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, p) in entries {
        text.push_str(&format!("{id}\t{}\n", p.display()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_feature_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, p) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected utt_id<TAB>path".into(),
        })?;
        out.push((id.to_string(), PathBuf::from(p)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_from_seed;
    use rand::Rng;

    fn noise(len: usize, amp: f64, seed: u64) -> Waveform {
        let mut rng = stream_from_seed(seed);
        Waveform::new((0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), 16_000)
    }

    #[test]
    fn frame_count_examples() {
        let cfg = FbankConfig::default();
        assert_eq!(frame_count(16_000, &cfg).unwrap(), 98);
        assert_eq!(frame_count(400, &cfg).unwrap(), 1);
        assert!(frame_count(399, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FbankConfig::default().validate().is_ok());
        let bad = [
            FbankConfig { win_length: 600, ..Default::default() },
            FbankConfig { fmax: 9000.0, ..Default::default() },
            FbankConfig { fmin: 8000.0, fmax: 7000.0, ..Default::default() },
            FbankConfig { n_mels: 0, ..Default::default() },
            FbankConfig { log_floor: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn silence_gives_log_floor() {
        let cfg = FbankConfig::default();
        let fm = logmel(&Waveform::zeros(1600, 16_000), &cfg).unwrap();
        assert_eq!(fm.shape(), (8, 64));
        let floor = (cfg.log_floor).ln() as f32;
        assert!(fm.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn gain_shifts_log_energy() {
        let cfg = FbankConfig::default();
        let w = noise(8000, 0.5, 1);
        let a = logmel(&w, &cfg).unwrap();
        let b = logmel(&w.scaled(10.0), &cfg).unwrap();
        let shift = 100f64.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            // f32 storage of values around -5..5 limits precision
            assert!(((*y as f64 - *x as f64) - shift).abs() < 2e-6, "{x} {y}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = FbankConfig::default();
        let w = noise(5000, 0.3, 2);
        assert_eq!(logmel(&w, &cfg).unwrap(), logmel(&w, &cfg).unwrap());
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let cfg = FbankConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.len(), 64);
        assert!(fb.iter().all(|r| r.len() == 257));
        for row in &fb {
            let max = row.iter().cloned().fold(0.0, f64::max);
            assert!(max > 0.0 && max <= 1.0);
            let peak = row.iter().position(|&x| x == max).unwrap();
            // unimodal: rises to the peak and falls after it
            assert!(row[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(row[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
        // a grid that contains every center exactly reaches 1.0
        let exact = FbankConfig {
            sample_rate: 16_000,
            n_fft: 512,
            n_mels: 1,
            fmin: 0.0,
            fmax: 8000.0,
            ..Default::default()
        };
        let pts = mel_breakpoints(&exact);
        let row = &mel_filterbank(&exact)[0];
        let k = (pts[1] / 31.25).round() as usize;
        assert!(row[k] > 0.99);
    }

    #[test]
    fn single_filter_spans_range() {
        let cfg = FbankConfig { n_mels: 1, ..Default::default() };
        let pts = mel_breakpoints(&cfg);
        assert_eq!(pts.len(), 3);
        assert!((pts[0] - 20.0).abs() < 1e-9 && (pts[2] - 7600.0).abs() < 1e-9);
        let row = &mel_filterbank(&cfg)[0];
        for (k, &w) in row.iter().enumerate() {
            let f = k as f64 * 31.25;
            assert_eq!(w > 0.0, f > 20.0 && f < 7600.0, "bin {k}");
        }
    }

    #[test]
    fn filterbank_covers_range() {
        let cfg = FbankConfig::default();
        let fb = mel_filterbank(&cfg);
        for k in 0..257 {
            let f = k as f64 * 31.25;
            if f > cfg.fmin && f < cfg.fmax {
                let total: f64 = fb.iter().map(|r| r[k]).sum();
                assert!(total > 0.0, "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn breakpoints_ascend() {
        let pts = mel_breakpoints(&FbankConfig::default());
        assert!(pts.windows(2).all(|p| p[0] < p[1]));
        let mut prev = hz_to_mel(0.0);
        for f in 1..8000 {
            let m = hz_to_mel(f as f64);
            assert!(m > prev);
            prev = m;
        }
    }

    /// Naive O(N^2) DFT power spectrum of a Hamming-windowed frame.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        let win = hamming(frame.len());
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&x, &wv)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * wv * ang.cos();
                    im += x * wv * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let cfg = FbankConfig { win_length: 100, hop_length: 50, n_fft: 128, n_mels: 8, ..Default::default() };
        let w = noise(400, 0.7, 3);
        let spectra = power_spectra(&w, &cfg).unwrap();
        for (t, spec) in spectra.iter().enumerate() {
            let oracle = dft_power(&w.samples[t * 50..t * 50 + 100], 128);
            for (a, b) in spec.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }
    }

    #[test]
    fn sine_at_center_peaks_in_its_bin() {
        let cfg = FbankConfig {
            win_length: 128,
            hop_length: 64,
            n_fft: 128,
            n_mels: 8,
            fmin: 0.0,
            fmax: 8000.0,
            ..Default::default()
        };
        let fb = mel_filterbank(&cfg);
        let pts = mel_breakpoints(&cfg);
        for j in 1..cfg.n_mels - 1 {
            let f = pts[j + 1];
            let samples: Vec<f64> = (0..640)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
                .collect();
            let w = Waveform::new(samples, 16_000);
            // oracle: naive DFT -> filterbank -> argmax
            let oracle_arg = {
                let p = dft_power(&w.samples[..128], 128);
                let e: Vec<f64> = fb.iter().map(|r| r.iter().zip(&p).map(|(a, b)| a * b).sum()).collect();
                argmax(&e)
            };
            assert_eq!(oracle_arg, j);
            let fm = logmel(&w, &cfg).unwrap();
            for t in 0..fm.frames {
                let row: Vec<f64> = fm.row(t).iter().map(|&v| v as f64).collect();
                assert_eq!(argmax(&row), j, "bin {j}, frame {t}");
            }
        }
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
            .0
    }

    #[test]
    fn energies_add_for_orthogonal_bands() {
        let cfg = FbankConfig::default();
        let fb = mel_filterbank(&cfg);
        let mut rng = stream_from_seed(9);
        // disjoint-band power spectra: filterbank energies add exactly
        let mut low = vec![0.0; 257];
        let mut high = vec![0.0; 257];
        for k in 0..257 {
            let v: f64 = rng.gen_range(0.0..1.0);
            if k < 100 { low[k] = v } else { high[k] = v }
        }
        let both: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
        let (el, eh, eb) = (apply_filterbank(&fb, &low), apply_filterbank(&fb, &high), apply_filterbank(&fb, &both));
        for m in 0..cfg.n_mels {
            assert!(((el[m] + eh[m]) - eb[m]).abs() <= 1e-6 * eb[m].max(f64::MIN_POSITIVE));
        }

        // tones far apart: only windowed leakage couples them, bounded by
        // Cauchy-Schwarz on the nonnegative filter weights
        let tone = |f: f64| {
            Waveform::new(
                (0..4000).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()).collect(),
                16_000,
            )
        };
        let a = tone(500.0);
        let b = tone(5000.0);
        let sum = Waveform::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), 16_000);
        let ea = mel_energies(&a, &cfg).unwrap();
        let eb = mel_energies(&b, &cfg).unwrap();
        let es = mel_energies(&sum, &cfg).unwrap();
        let mut checked = 0;
        for t in 0..es.len() {
            for m in 0..cfg.n_mels {
                let (x, y, s) = (ea[t][m], eb[t][m], es[t][m]);
                assert!(((x + y) - s).abs() <= 2.0 * (x * y).sqrt() + 1e-9 * s);
                if x.max(y) > 1.0 {
                    assert!(((x + y) - s).abs() <= 0.05 * s);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fm = logmel(&noise(2000, 0.2, 4), &FbankConfig::default()).unwrap();
        let p = dir.path().join("a.lmel");
        write_features(&fm, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"LMEL");
        assert_eq!(read_features(&p, fm.frame_shift_s).unwrap(), fm);
        let m = dir.path().join("feats.scp");
        write_feature_manifest(&[("u1".into(), p.clone())], &m).unwrap();
        assert_eq!(read_feature_manifest(&m).unwrap(), vec![("u1".to_string(), p)]);
    }
}
