//! Reproducible synthetic corpus: formant-harmonic speakers, a noise bank
//! with disjoint train/test halves, manifests and verification trials.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Trial, TrialSet};
use crate::rng::{RandomStream, SeedKey};
use crate::signal::{make_television, write_wav, ClipPolicy, NoiseType, Waveform, SAMPLE_RATE};

const SPEECH_PEAK: f64 = 0.5;
const NOISE_PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub f0: f64,
    pub formants: Vec<Formant>,
    /// Spectral tilt of the glottal source, dB per octave (<= 0).
    pub tilt_db_per_octave: f64,
    /// Relative period-to-period pitch perturbation. Syllable-level
    /// intonation scales with it as well.
    pub jitter: f64,
}

impl SpeakerProfile {
    pub fn random(speaker_id: &str, rng: &mut RandomStream) -> Self {
        let f0 = rng.gen_range(85.0..260.0);
        // vocal tract length scaling shared by all formants
        let tract = rng.gen_range(0.85..1.2);
        let formants = vec![
            Formant { freq: tract * rng.gen_range(450.0..800.0), bandwidth: rng.gen_range(60.0..110.0) },
            Formant { freq: tract * rng.gen_range(1100.0..2000.0), bandwidth: rng.gen_range(80.0..140.0) },
            Formant { freq: tract * rng.gen_range(2300.0..3200.0), bandwidth: rng.gen_range(100.0..200.0) },
        ];
        SpeakerProfile {
            speaker_id: speaker_id.to_string(),
            f0,
            formants,
            tilt_db_per_octave: rng.gen_range(-10.0..-2.0),
            jitter: rng.gen_range(0.004..0.015),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(70.0..=320.0).contains(&self.f0) {
            return Err(Error::Corpus(format!("f0 {} outside [70, 320] Hz", self.f0)));
        }
        if self.formants.is_empty() || self.formants.windows(2).any(|w| w[0].freq >= w[1].freq) {
            return Err(Error::Corpus("formants must be non-empty and ascending".into()));
        }
        let nyq = SAMPLE_RATE as f64 / 2.0;
        if self.formants.iter().any(|f| f.freq <= 0.0 || f.freq >= nyq || f.bandwidth <= 0.0) {
            return Err(Error::Corpus("formants must lie below Nyquist with positive bandwidth".into()));
        }
        Ok(())
    }
}

/// Two-pole resonator (unit gain at DC).
#[derive(Debug, Clone, Copy)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let c = -(-2.0 * std::f64::consts::PI * bandwidth / fs).exp();
        let b = 2.0 * (-std::f64::consts::PI * bandwidth / fs).exp() * (2.0 * std::f64::consts::PI * freq / fs).cos();
        Resonator { a: 1.0 - b - c, b, c, y1: 0.0, y2: 0.0 }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let n = Resonator::new(freq, bandwidth);
        self.a = n.a;
        self.b = n.b;
        self.c = n.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Rosenberg glottal pulse over one period, `phase` in [0, 1).
fn glottal_pulse(phase: f64) -> f64 {
    const OPEN: f64 = 0.4;
    const CLOSE: f64 = 0.16;
    if phase < OPEN {
        0.5 * (1.0 - (std::f64::consts::PI * phase / OPEN).cos())
    } else if phase < OPEN + CLOSE {
        (std::f64::consts::PI * (phase - OPEN) / (2.0 * CLOSE)).cos()
    } else {
        0.0
    }
}

struct Syllable {
    start: usize,
    len: usize,
    pitch: f64,
    formant_scale: Vec<f64>,
}

fn plan_syllables(n: usize, jitter: f64, n_formants: usize, rng: &mut RandomStream) -> Vec<Syllable> {
    let fs = SAMPLE_RATE as f64;
    let mut out = Vec::new();
    let mut t = (rng.gen_range(0.02..0.08) * fs) as usize;
    while t < n {
        let len = ((rng.gen_range(0.12..0.30) * fs) as usize).min(n - t);
        let intonation = 10.0 * jitter;
        out.push(Syllable {
            start: t,
            len,
            pitch: 1.0 + intonation * rng.gen_range(-1.0..1.0),
            formant_scale: (0..n_formants).map(|_| rng.gen_range(0.88..1.12)).collect(),
        });
        t += len + (rng.gen_range(0.03..0.10) * fs) as usize;
    }
    out
}

/// Source-filter synthesis: jittered glottal pulses, spectral tilt, cascaded
/// formant resonators and syllable-shaped amplitude bursts, peak-normalized
/// to 0.5.
pub fn synth_speaker(profile: &SpeakerProfile, duration_s: f64, rng: &mut RandomStream) -> Result<Waveform> {
    if duration_s < 1.0 {
        return Err(Error::Corpus(format!("utterance duration {duration_s} s is below 1 s")));
    }
    profile.validate()?;
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let syllables = plan_syllables(n, profile.jitter, profile.formants.len(), rng);

    let mut envelope = vec![0.0; n];
    let mut pitch = vec![1.0; n];
    let mut scale_at = vec![0usize; n];
    let ramp = (0.02 * fs) as usize;
    for (si, s) in syllables.iter().enumerate() {
        for i in 0..s.len {
            let edge = i.min(s.len - 1 - i);
            let e = if edge < ramp {
                0.5 * (1.0 - (std::f64::consts::PI * edge as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            envelope[s.start + i] = e;
            pitch[s.start + i] = s.pitch;
            scale_at[s.start + i] = si;
        }
    }

    // glottal source, differentiated for lip radiation
    let mut source = vec![0.0; n];
    let mut phase = 0.0;
    let mut period_f0 = profile.f0;
    let mut prev = 0.0;
    for i in 0..n {
        let g = glottal_pulse(phase);
        source[i] = g - prev;
        prev = g;
        phase += period_f0 * pitch[i] / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            let z: f64 = StandardNormal.sample(rng);
            period_f0 = profile.f0 * (1.0 + profile.jitter * z);
        }
    }

    let tilt = (-profile.tilt_db_per_octave / 20.0).clamp(0.0, 0.9);
    let mut lp = 0.0;
    let mut res: Vec<Resonator> = profile.formants.iter().map(|f| Resonator::new(f.freq, f.bandwidth)).collect();
    let mut current = usize::MAX;
    let mut out = vec![0.0; n];
    for i in 0..n {
        if !syllables.is_empty() && scale_at[i] != current && envelope[i] > 0.0 {
            current = scale_at[i];
            for (r, (f, s)) in res.iter_mut().zip(profile.formants.iter().zip(&syllables[current].formant_scale)) {
                r.retune((f.freq * s).min(0.45 * fs), f.bandwidth);
            }
        }
        let aspiration: f64 = StandardNormal.sample(rng);
        let x = source[i] * envelope[i] + 0.002 * aspiration * envelope[i];
        lp = (1.0 - tilt) * x + tilt * lp;
        let mut y = lp;
        for r in res.iter_mut() {
            y = r.step(y);
        }
        out[i] = y;
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::Corpus("synthesized utterance is silent".into()));
    }
    // background floor keeps the log spectrum of pauses bounded
    let floor = 1e-3 * peak / SPEECH_PEAK;
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += floor * z;
    }
    Waveform::new(out, SAMPLE_RATE).peak_normalized(SPEECH_PEAK)
}

/// Band-shaped noise: white noise blended with a low-passed copy and a slow
/// level fluctuation.
pub fn synth_ambient(duration_s: f64, rng: &mut RandomStream) -> Result<Waveform> {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let a: f64 = rng.gen_range(0.3..0.85);
    let mix: f64 = rng.gen_range(0.3..0.8);
    let hp: bool = rng.gen();
    let rate = rng.gen_range(0.1..0.6);
    let depth = rng.gen_range(0.0..0.3);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut lp = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        lp = (1.0 - a) * z + a * lp;
        // optionally tilt toward high frequencies instead
        let shaped = if hp { z - a * prev } else { lp };
        prev = z;
        let t = i as f64 / SAMPLE_RATE as f64;
        let level = 1.0 - depth * (0.5 + 0.5 * (std::f64::consts::TAU * rate * t + phase).sin());
        out.push(level * ((1.0 - mix) * z + mix * shaped));
    }
    Waveform::new(out, SAMPLE_RATE).peak_normalized(NOISE_PEAK)
}

/// Tone-cluster chords struck once per beat with a percussive decay.
pub fn synth_music_with_beat(duration_s: f64, beat_s: f64, rng: &mut RandomStream) -> Result<Waveform> {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let beat = (beat_s * fs).round() as usize;
    if beat == 0 {
        return Err(Error::Corpus("beat period too short".into()));
    }
    let scale = [0, 2, 4, 5, 7, 9, 11];
    let root = rng.gen_range(45..60);
    let decay = rng.gen_range(0.15..0.35) * beat_s;
    let mut out = vec![0.0; n];
    let mut chord: Vec<f64> = Vec::new();
    for (b, start) in (0..n).step_by(beat).enumerate() {
        if b % 2 == 0 {
            chord = (0..3)
                .map(|_| {
                    let deg = scale[rng.gen_range(0..scale.len())] + 12 * rng.gen_range(0..3);
                    440.0 * 2f64.powf((root + deg - 69) as f64 / 12.0)
                })
                .collect();
        }
        let accent = if b % 4 == 0 { 1.0 } else { 0.7 };
        for i in start..(start + beat).min(n) {
            let t = (i - start) as f64 / fs;
            let env = accent * (1.0 - (-t / 0.005).exp()) * (-t / decay).exp();
            let mut s = 0.0;
            for &f in &chord {
                for h in 1..=4 {
                    let fh = f * h as f64;
                    if fh < 0.45 * fs {
                        s += (std::f64::consts::TAU * fh * i as f64 / fs).sin() / h as f64;
                    }
                }
            }
            out[i] = env * s;
        }
    }
    Waveform::new(out, SAMPLE_RATE).peak_normalized(NOISE_PEAK)
}

pub fn synth_music(duration_s: f64, rng: &mut RandomStream) -> Result<Waveform> {
    let beat = rng.gen_range(0.25..0.6);
    synth_music_with_beat(duration_s, beat, rng)
}

/// `count` clips of one noise type. Babble sources are speech from fresh
/// random speakers; television pairs a music clip with a speech clip.
pub fn synth_noise_bank(kind: NoiseType, count: usize, duration_s: f64, rng: &mut RandomStream) -> Result<Vec<Waveform>> {
    if count == 0 {
        return Err(Error::Corpus("noise bank needs at least one clip".into()));
    }
    (0..count)
        .map(|i| match kind {
            NoiseType::Ambient => synth_ambient(duration_s, rng),
            NoiseType::Music => synth_music(duration_s, rng),
            NoiseType::Babble => {
                let p = SpeakerProfile::random(&format!("babble{i}"), rng);
                synth_speaker(&p, duration_s, rng)
            }
            NoiseType::Television => {
                let m = synth_music(duration_s, rng)?;
                let p = SpeakerProfile::random(&format!("tv{i}"), rng);
                make_television(&m, &synth_speaker(&p, duration_s, rng)?)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Corpus(format!("unknown split '{other}'"))),
        }
    }
}

/// Raw noise material; television and babble are assembled from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    Music,
    Ambient,
    Speech,
}

impl fmt::Display for NoiseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseSource::Music => "music",
            NoiseSource::Ambient => "ambient",
            NoiseSource::Speech => "speech",
        })
    }
}

impl FromStr for NoiseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "music" => Ok(NoiseSource::Music),
            "ambient" => Ok(NoiseSource::Ambient),
            "speech" => Ok(NoiseSource::Speech),
            other => Err(Error::Corpus(format!("unknown noise source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttEntry {
    pub utt_id: String,
    pub speaker_id: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub duration_s: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub noise_id: String,
    pub source: NoiseSource,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub utterances: Vec<UttEntry>,
    pub noises: Vec<NoiseEntry>,
}

pub const UTT_MANIFEST: &str = "utterances.tsv";
pub const NOISE_MANIFEST: &str = "noise.tsv";

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &UttEntry> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Sorted training speaker ids; a speaker's index is its class label.
    pub fn train_speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.split(Split::Train).map(|u| u.speaker_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn utterance(&self, utt_id: &str) -> Option<&UttEntry> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    pub fn noises(&self, source: NoiseSource, split: Split) -> impl Iterator<Item = &NoiseEntry> {
        self.noises.iter().filter(move |n| n.source == source && n.split == split)
    }

    pub fn abs_path(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for u in &self.utterances {
            if !ids.insert(u.utt_id.as_str()) {
                return Err(Error::Corpus(format!("duplicate utterance id '{}'", u.utt_id)));
            }
        }
        let train: BTreeSet<&str> = self.noises.iter().filter(|n| n.split == Split::Train).map(|n| n.noise_id.as_str()).collect();
        if self.noises.iter().any(|n| n.split == Split::Test && train.contains(n.noise_id.as_str())) {
            return Err(Error::Corpus("noise id appears in both train and test splits".into()));
        }
        Ok(())
    }

    /// Writes `utt_id<TAB>spk_id<TAB>path<TAB>dur<TAB>split` lines and
    /// `noise_id<TAB>source<TAB>path<TAB>split` lines under `root`.
    pub fn write(&self) -> Result<()> {
        let mut utts = String::new();
        for u in &self.utterances {
            utts.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\t{}\n",
                u.utt_id,
                u.speaker_id,
                u.path.display(),
                u.duration_s,
                u.split
            ));
        }
        let p = self.root.join(UTT_MANIFEST);
        std::fs::write(&p, utts).map_err(|e| Error::io(&p, e))?;
        let mut noise = String::new();
        for n in &self.noises {
            noise.push_str(&format!("{}\t{}\t{}\t{}\n", n.noise_id, n.source, n.path.display(), n.split));
        }
        let p = self.root.join(NOISE_MANIFEST);
        std::fs::write(&p, noise).map_err(|e| Error::io(&p, e))
    }

    /// Reads a corpus directory. The noise manifest is optional.
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut m = CorpusManifest { root: root.clone(), ..Default::default() };
        for (line_no, fields) in read_tsv(&root.join(UTT_MANIFEST))? {
            let perr = |msg: String| Error::Parse { path: root.join(UTT_MANIFEST), line: line_no, msg };
            if fields.len() != 5 {
                return Err(perr(format!("expected 5 fields, got {}", fields.len())));
            }
            m.utterances.push(UttEntry {
                utt_id: fields[0].clone(),
                speaker_id: fields[1].clone(),
                path: PathBuf::from(&fields[2]),
                duration_s: fields[3].parse().map_err(|e| perr(format!("duration: {e}")))?,
                split: fields[4].parse().map_err(|e: Error| perr(e.to_string()))?,
            });
        }
        let noise_path = root.join(NOISE_MANIFEST);
        if noise_path.exists() {
            for (line_no, fields) in read_tsv(&noise_path)? {
                let perr = |msg: String| Error::Parse { path: noise_path.clone(), line: line_no, msg };
                if fields.len() != 4 {
                    return Err(perr(format!("expected 4 fields, got {}", fields.len())));
                }
                m.noises.push(NoiseEntry {
                    noise_id: fields[0].clone(),
                    source: fields[1].parse().map_err(|e: Error| perr(e.to_string()))?,
                    path: PathBuf::from(&fields[2]),
                    split: fields[3].parse().map_err(|e: Error| perr(e.to_string()))?,
                });
            }
        }
        m.validate()?;
        Ok(m)
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, line.split('\t').map(str::to_string).collect()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_duration_s: f64,
    /// Verification speakers, disjoint from the training speakers.
    pub n_test_speakers: usize,
    pub test_utts_per_speaker: usize,
    /// Held-out speakers whose speech feeds babble and television noise;
    /// half serve the train split, half the test split.
    pub babble_speakers: usize,
    pub noise_clips_per_split: usize,
    pub noise_duration_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 12,
            utts_per_speaker: 20,
            utt_duration_s: 3.0,
            n_test_speakers: 10,
            test_utts_per_speaker: 8,
            babble_speakers: 4,
            noise_clips_per_split: 8,
            noise_duration_s: 5.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Corpus(format!("need at least 2 speakers, got {}", self.n_speakers)));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::Corpus("need at least 2 utterances per speaker".into()));
        }
        if self.utt_duration_s < 1.0 || self.noise_duration_s < 1.0 {
            return Err(Error::Corpus("utterance and noise durations must be at least 1 s".into()));
        }
        if self.babble_speakers < 2 || self.noise_clips_per_split < 6 {
            return Err(Error::Corpus(
                "need at least 2 babble speakers and 6 clips per split (babble mixes up to 6)".into(),
            ));
        }
        if self.n_test_speakers == 1 || (self.n_test_speakers > 0 && self.test_utts_per_speaker < 2) {
            return Err(Error::Corpus("test split needs 0 or >= 2 speakers with >= 2 utterances".into()));
        }
        Ok(())
    }
}

struct Job {
    entry_id: String,
    kind: JobKind,
    rel: PathBuf,
}

enum JobKind {
    Utt { profile: SpeakerProfile, split: Split },
    Noise { source: NoiseSource, split: Split, profile: Option<SpeakerProfile> },
}

/// Generates the corpus under `out_dir`. Output bytes are a pure function
/// of `(config, seed)`.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    cfg.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    for sub in ["wav", "noise"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let profile = |kind: &str, idx: usize| {
        let id = format!("{kind}{idx:03}");
        let mut rng = SeedKey::new("speaker").u64(seed).str(&id).stream();
        SpeakerProfile::random(&id, &mut rng)
    };

    let mut jobs = Vec::new();
    for (split, n_spk, n_utt, prefix) in [
        (Split::Train, cfg.n_speakers, cfg.utts_per_speaker, "spk"),
        (Split::Test, cfg.n_test_speakers, cfg.test_utts_per_speaker, "tst"),
    ] {
        for s in 0..n_spk {
            let p = profile(prefix, s);
            for u in 0..n_utt {
                let utt_id = format!("{}-u{u:03}", p.speaker_id);
                jobs.push(Job {
                    rel: PathBuf::from(format!("wav/{utt_id}.wav")),
                    entry_id: utt_id,
                    kind: JobKind::Utt { profile: p.clone(), split },
                });
            }
        }
    }
    let babble: Vec<SpeakerProfile> = (0..cfg.babble_speakers).map(|i| profile("bab", i)).collect();
    let half = cfg.babble_speakers / 2;
    for split in [Split::Train, Split::Test] {
        let speakers = match split {
            Split::Train => &babble[..half],
            Split::Test => &babble[half..],
        };
        for source in [NoiseSource::Music, NoiseSource::Ambient, NoiseSource::Speech] {
            for i in 0..cfg.noise_clips_per_split {
                let noise_id = format!("{source}-{split}-{i:02}");
                let profile = (source == NoiseSource::Speech).then(|| speakers[i % speakers.len()].clone());
                jobs.push(Job {
                    rel: PathBuf::from(format!("noise/{noise_id}.wav")),
                    entry_id: noise_id,
                    kind: JobKind::Noise { source, split, profile },
                });
            }
        }
    }

    let waves: Vec<Waveform> = jobs
        .par_iter()
        .map(|job| {
            let mut rng = SeedKey::new("corpus-item").u64(seed).str(&job.entry_id).stream();
            match &job.kind {
                JobKind::Utt { profile, .. } => synth_speaker(profile, cfg.utt_duration_s, &mut rng),
                JobKind::Noise { source, profile, .. } => match source {
                    NoiseSource::Music => synth_music(cfg.noise_duration_s, &mut rng),
                    NoiseSource::Ambient => synth_ambient(cfg.noise_duration_s, &mut rng),
                    NoiseSource::Speech => synth_speaker(profile.as_ref().expect("speech profile"), cfg.noise_duration_s, &mut rng),
                },
            }
        })
        .collect::<Result<_>>()?;

    let mut manifest = CorpusManifest { root: root.clone(), ..Default::default() };
    for (job, wave) in jobs.iter().zip(&waves) {
        write_wav(wave, root.join(&job.rel), ClipPolicy::Error)?;
        match &job.kind {
            JobKind::Utt { profile, split } => manifest.utterances.push(UttEntry {
                utt_id: job.entry_id.clone(),
                speaker_id: profile.speaker_id.clone(),
                path: job.rel.clone(),
                duration_s: wave.duration_s(),
                split: *split,
            }),
            JobKind::Noise { source, split, .. } => manifest.noises.push(NoiseEntry {
                noise_id: job.entry_id.clone(),
                source: *source,
                path: job.rel.clone(),
                split: *split,
            }),
        }
    }
    manifest.validate()?;
    manifest.write()?;
    Ok(manifest)
}

/// Target trials pair same-speaker test utterances, nontarget trials pair
/// different speakers. Pairs are unordered and never repeat.
pub fn build_trials(manifest: &CorpusManifest, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialSet> {
    let test: Vec<&UttEntry> = manifest.split(Split::Test).collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..test.len() {
        for j in i + 1..test.len() {
            let pair = (test[i].utt_id.clone(), test[j].utt_id.clone());
            if test[i].speaker_id == test[j].speaker_id {
                targets.push(pair);
            } else {
                nontargets.push(pair);
            }
        }
    }
    if n_target > targets.len() || n_nontarget > nontargets.len() {
        return Err(Error::Corpus(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, only {} / {} exist",
            targets.len(),
            nontargets.len()
        )));
    }
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Corpus("need at least one target and one nontarget trial".into()));
    }
    let mut rng = SeedKey::new("trials").u64(seed).stream();
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let mut trials: Vec<Trial> = targets
        .into_iter()
        .take(n_target)
        .map(|(e, t)| Trial { target: true, enroll: e, test: t })
        .chain(nontargets.into_iter().take(n_nontarget).map(|(e, t)| Trial { target: false, enroll: e, test: t }))
        .collect();
    trials.shuffle(&mut rng);
    Ok(TrialSet { trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{logmel, FbankConfig};
    use crate::signal::{read_wav, rms_power};

    fn rng(seed: u64) -> RandomStream {
        crate::rng::stream_from_seed(seed)
    }

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / (x.len() - lag) as f64
    }

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 4,
            utts_per_speaker: 6,
            utt_duration_s: 1.0,
            n_test_speakers: 3,
            test_utts_per_speaker: 3,
            babble_speakers: 2,
            noise_clips_per_split: 6,
            noise_duration_s: 1.0,
        }
    }

    #[test]
    fn periodic_speaker_has_pitch_peak() {
        let p = SpeakerProfile {
            speaker_id: "x".into(),
            f0: 160.0,
            formants: vec![Formant { freq: 160.0, bandwidth: 80.0 }],
            tilt_db_per_octave: 0.0,
            jitter: 0.0,
        };
        let w = synth_speaker(&p, 2.0, &mut rng(1)).unwrap();
        assert_eq!(w.len(), 32_000);
        let period = 16_000.0 / 160.0;
        let lags = (period * 0.6) as usize..(period * 1.5) as usize;
        let best = lags.max_by(|&a, &b| autocorr(&w.samples, a).partial_cmp(&autocorr(&w.samples, b)).unwrap()).unwrap();
        assert!((best as f64 - period).abs() <= 1.0, "peak at lag {best}");
    }

    #[test]
    fn speaker_profile_matters() {
        let a = SpeakerProfile::random("a", &mut rng(2));
        let b = SpeakerProfile::random("b", &mut rng(3));
        let wa = synth_speaker(&a, 1.0, &mut rng(9)).unwrap();
        let wb = synth_speaker(&b, 1.0, &mut rng(9)).unwrap();
        assert_ne!(wa, wb);
        assert!((wa.peak() - 0.5).abs() < 1e-12);
        assert!(synth_speaker(&a, 0.5, &mut rng(9)).is_err());
        let bad = SpeakerProfile { f0: 400.0, ..a };
        assert!(synth_speaker(&bad, 1.0, &mut rng(9)).is_err());
    }

    /// Welch-averaged spectral flatness (geometric / arithmetic mean).
    fn flatness(x: &[f64]) -> f64 {
        let cfg = FbankConfig { win_length: 512, hop_length: 256, ..Default::default() };
        let spectra = crate::features::power_spectra(&Waveform::new(x.to_vec(), SAMPLE_RATE), &cfg).unwrap();
        let bins = spectra[0].len();
        let avg: Vec<f64> = (1..bins - 1)
            .map(|k| spectra.iter().map(|s| s[k]).sum::<f64>() / spectra.len() as f64)
            .collect();
        let geo = (avg.iter().map(|v| v.ln()).sum::<f64>() / avg.len() as f64).exp();
        let ari = avg.iter().sum::<f64>() / avg.len() as f64;
        geo / ari
    }

    #[test]
    fn ambient_is_noise_like() {
        for seed in 0..6 {
            let clips = synth_noise_bank(NoiseType::Ambient, 1, 2.0, &mut rng(seed)).unwrap();
            let f = flatness(&clips[0].samples);
            assert!(f > 0.3, "flatness {f}");
        }
    }

    #[test]
    fn music_has_rhythm_at_beat() {
        for (seed, beat) in [(1, 0.3), (2, 0.45), (3, 0.55)] {
            let w = synth_music_with_beat(4.0, beat, &mut rng(seed)).unwrap();
            // amplitude envelope at 100 Hz
            let hop = 160;
            let env: Vec<f64> = w.samples.chunks(hop).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let mean = env.iter().sum::<f64>() / env.len() as f64;
            let centered: Vec<f64> = env.iter().map(|e| e - mean).collect();
            let expected = beat * 100.0;
            let lags = (expected * 0.5) as usize..(expected * 1.5) as usize;
            let best = lags.max_by(|&a, &b| autocorr(&centered, a).partial_cmp(&autocorr(&centered, b)).unwrap()).unwrap();
            assert!((best as f64 - expected).abs() <= 0.1 * expected, "beat {beat}: lag {best}");
        }
    }

    fn max_norm_xcorr(a: &[f64], b: &[f64]) -> f64 {
        use rustfft::{num_complex::Complex, FftPlanner};
        let n = (a.len() + b.len()).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut fa: Vec<Complex<f64>> = a.iter().map(|&x| Complex::new(x, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(n).collect();
        let mut fb: Vec<Complex<f64>> = b.iter().map(|&x| Complex::new(x, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(n).collect();
        fwd.process(&mut fa);
        fwd.process(&mut fb);
        let mut prod: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
        inv.process(&mut prod);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prod.iter().map(|c| c.re.abs() / n as f64).fold(0.0, f64::max) / (na * nb)
    }

    #[test]
    fn bank_clips_are_distinct() {
        for kind in NoiseType::ALL {
            let clips = synth_noise_bank(kind, 5, 1.0, &mut rng(11)).unwrap();
            assert_eq!(clips.len(), 5);
            for i in 0..5 {
                for j in i + 1..5 {
                    let c = max_norm_xcorr(&clips[i].samples, &clips[j].samples);
                    assert!(c < 0.99, "{kind} clips {i},{j}: {c}");
                }
            }
        }
        assert!(synth_noise_bank(NoiseType::Music, 0, 1.0, &mut rng(1)).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_splits_disjoint() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = build_corpus(&small_cfg(), 7, a.path()).unwrap();
        let mb = build_corpus(&small_cfg(), 7, b.path()).unwrap();
        assert_eq!(ma.utterances, mb.utterances);
        for name in [UTT_MANIFEST, NOISE_MANIFEST] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        for u in &ma.utterances {
            assert_eq!(std::fs::read(a.path().join(&u.path)).unwrap(), std::fs::read(b.path().join(&u.path)).unwrap());
        }
        let train: BTreeSet<_> = ma.noises.iter().filter(|n| n.split == Split::Train).map(|n| &n.noise_id).collect();
        let test: BTreeSet<_> = ma.noises.iter().filter(|n| n.split == Split::Test).map(|n| &n.noise_id).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(ma.utterances.len(), 4 * 6 + 3 * 3);
        assert_eq!(ma.train_speakers().len(), 4);

        let back = CorpusManifest::read(a.path()).unwrap();
        assert_eq!(back.utterances.len(), ma.utterances.len());
        assert_eq!(back.noises, ma.noises);
        let w = read_wav(back.abs_path(&back.utterances[0].path)).unwrap();
        assert!(rms_power(&w).unwrap() > 0.0);

        let bad = CorpusConfig { n_speakers: 1, ..small_cfg() };
        assert!(build_corpus(&bad, 7, a.path()).is_err());
    }

    #[test]
    fn speakers_are_separable_in_feature_space() {
        let cfg = FbankConfig::default();
        let mut means: Vec<(usize, Vec<f64>)> = Vec::new();
        for s in 0..4 {
            let p = SpeakerProfile::random(&format!("s{s}"), &mut rng(100 + s));
            for u in 0..4 {
                let w = synth_speaker(&p, 1.5, &mut rng(1000 + 10 * s + u)).unwrap();
                let fm = logmel(&w, &cfg).unwrap();
                let mean: Vec<f64> = (0..64).map(|m| (0..fm.frames).map(|t| fm.get(t, m) as f64).sum::<f64>() / fm.frames as f64).collect();
                means.push((s as usize, mean));
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = dist(&means[i].1, &means[j].1);
                if means[i].0 == means[j].0 {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (nx as f64));
    }

    #[test]
    fn trials_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(&small_cfg(), 3, dir.path()).unwrap();
        // 3 speakers x 3 utts: 9 target pairs, 27 nontarget pairs
        let t = build_trials(&m, 9, 20, 1).unwrap();
        assert_eq!(t.trials.iter().filter(|t| t.target).count(), 9);
        assert_eq!(t.trials.len(), 29);
        for tr in &t.trials {
            let a = m.utterance(&tr.enroll).unwrap();
            let b = m.utterance(&tr.test).unwrap();
            assert_eq!(tr.target, a.speaker_id == b.speaker_id);
            assert_eq!(a.split, Split::Test);
        }
        let mut pairs: Vec<_> = t.trials.iter().map(|t| (t.enroll.clone(), t.test.clone())).collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 29);
        assert!(build_trials(&m, 10, 5, 1).is_err());
        let u = build_trials(&m, 9, 20, 2).unwrap();
        assert_ne!(t.trials, u.trials);
        assert_eq!(u.trials.len(), 29);
    }
}
