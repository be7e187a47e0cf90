//! Clean/noisy pair generation with per-item reproducible randomness.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, NoiseSource, Split};
use crate::error::{Error, Result};
use crate::features::{logmel, FbankConfig, FeatureMatrix};
use crate::rng::{RandomStream, SeedKey};
use crate::signal::{
    babble_from, draw_fit_offset, fit_noise_at, make_television, mix_fitted_at_snr, read_wav, write_wav, ClipPolicy,
    NoiseType, Waveform,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseWeights {
    pub music: f64,
    pub ambient: f64,
    pub television: f64,
    pub babble: f64,
}

impl Default for NoiseWeights {
    fn default() -> Self {
        NoiseWeights { music: 1.0, ambient: 1.0, television: 1.0, babble: 1.0 }
    }
}

impl NoiseWeights {
    pub fn only(kind: NoiseType) -> Self {
        let mut w = NoiseWeights { music: 0.0, ambient: 0.0, television: 0.0, babble: 0.0 };
        *w.get_mut(kind) = 1.0;
        w
    }

    pub fn get(&self, kind: NoiseType) -> f64 {
        match kind {
            NoiseType::Music => self.music,
            NoiseType::Ambient => self.ambient,
            NoiseType::Television => self.television,
            NoiseType::Babble => self.babble,
        }
    }

    fn get_mut(&mut self, kind: NoiseType) -> &mut f64 {
        match kind {
            NoiseType::Music => &mut self.music,
            NoiseType::Ambient => &mut self.ambient,
            NoiseType::Television => &mut self.television,
            NoiseType::Babble => &mut self.babble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub snr_low: f64,
    pub snr_high: f64,
    pub weights: NoiseWeights,
    pub babble_k_min: usize,
    pub babble_k_max: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { snr_low: 0.0, snr_high: 20.0, weights: NoiseWeights::default(), babble_k_min: 3, babble_k_max: 6 }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low.is_finite() && self.snr_high.is_finite() && self.snr_low <= self.snr_high) {
            return Err(Error::Config(format!("snr range [{}, {}] is invalid", self.snr_low, self.snr_high)));
        }
        let ws = NoiseType::ALL.map(|k| self.weights.get(k));
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("noise type weights must be nonnegative with a positive sum".into()));
        }
        if !(3 <= self.babble_k_min && self.babble_k_min <= self.babble_k_max && self.babble_k_max <= 6) {
            return Err(Error::Config("babble source count range must lie within [3, 6]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoisePool {
    pub ids: Vec<String>,
    pub clips: Vec<Waveform>,
}

impl NoisePool {
    pub fn push(&mut self, id: impl Into<String>, clip: Waveform) {
        self.ids.push(id.into());
        self.clips.push(clip);
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Raw noise material of one split.
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    pub music: NoisePool,
    pub ambient: NoisePool,
    pub speech: NoisePool,
}

impl NoiseBank {
    pub fn load(manifest: &CorpusManifest, split: Split) -> Result<Self> {
        let entries: Vec<_> = manifest.noises.iter().filter(|n| n.split == split).collect();
        let clips = entries
            .par_iter()
            .map(|n| read_wav(manifest.abs_path(&n.path)))
            .collect::<Result<Vec<_>>>()?;
        let mut bank = NoiseBank::default();
        for (n, clip) in entries.into_iter().zip(clips) {
            let pool = match n.source {
                NoiseSource::Music => &mut bank.music,
                NoiseSource::Ambient => &mut bank.ambient,
                NoiseSource::Speech => &mut bank.speech,
            };
            pool.push(n.noise_id.clone(), clip);
        }
        Ok(bank)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.music.ids.iter().chain(&self.ambient.ids).chain(&self.speech.ids)
    }
}

/// One sampled corruption. `sources` index into the bank pools: music or
/// ambient hold one clip, television holds a music then a speech clip,
/// babble holds k distinct speech clips.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub kind: NoiseType,
    pub snr_db: f64,
    pub sources: Vec<usize>,
}

pub fn draw_snr(policy: &AugmentPolicy, rng: &mut RandomStream) -> f64 {
    if policy.snr_low == policy.snr_high {
        policy.snr_low
    } else {
        rng.gen_range(policy.snr_low..=policy.snr_high)
    }
}

fn draw_kind(policy: &AugmentPolicy, rng: &mut RandomStream) -> NoiseType {
    let total: f64 = NoiseType::ALL.iter().map(|&k| policy.weights.get(k)).sum();
    let mut u = rng.gen_range(0.0..total);
    for k in NoiseType::ALL {
        let w = policy.weights.get(k);
        if u < w {
            return k;
        }
        u -= w;
    }
    // rounding at the upper edge: last type with positive weight
    *NoiseType::ALL.iter().rev().find(|&&k| policy.weights.get(k) > 0.0).expect("validated weights")
}

fn pick(pool: &NoisePool, what: &str, rng: &mut RandomStream) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Augment(format!("noise bank has no {what} clips")));
    }
    Ok(rng.gen_range(0..pool.len()))
}

pub fn draw_augmentation(policy: &AugmentPolicy, bank: &NoiseBank, rng: &mut RandomStream) -> Result<AugmentDraw> {
    let kind = draw_kind(policy, rng);
    let snr_db = draw_snr(policy, rng);
    let sources = match kind {
        NoiseType::Music => vec![pick(&bank.music, "music", rng)?],
        NoiseType::Ambient => vec![pick(&bank.ambient, "ambient", rng)?],
        NoiseType::Television => vec![pick(&bank.music, "music", rng)?, pick(&bank.speech, "speech", rng)?],
        NoiseType::Babble => {
            let k = rng.gen_range(policy.babble_k_min..=policy.babble_k_max);
            if bank.speech.len() < k {
                return Err(Error::Augment(format!("babble needs {k} speech clips, bank has {}", bank.speech.len())));
            }
            sample_indices(rng, bank.speech.len(), k).into_vec()
        }
    };
    Ok(AugmentDraw { kind, snr_db, sources })
}

pub fn noise_ids(bank: &NoiseBank, draw: &AugmentDraw) -> Vec<String> {
    match draw.kind {
        NoiseType::Music => vec![bank.music.ids[draw.sources[0]].clone()],
        NoiseType::Ambient => vec![bank.ambient.ids[draw.sources[0]].clone()],
        NoiseType::Television => vec![bank.music.ids[draw.sources[0]].clone(), bank.speech.ids[draw.sources[1]].clone()],
        NoiseType::Babble => draw.sources.iter().map(|&i| bank.speech.ids[i].clone()).collect(),
    }
}

/// Builds the (unfitted) noise waveform for a draw.
pub fn compose_noise(bank: &NoiseBank, draw: &AugmentDraw, rng: &mut RandomStream) -> Result<Waveform> {
    let bad = || Error::Augment(format!("{} draw references a missing clip", draw.kind));
    fn get(pool: &NoisePool, i: usize, bad: impl Fn() -> Error) -> Result<&Waveform> {
        pool.clips.get(i).ok_or_else(bad)
    }
    match draw.kind {
        NoiseType::Music => Ok(get(&bank.music, draw.sources[0], bad)?.clone()),
        NoiseType::Ambient => Ok(get(&bank.ambient, draw.sources[0], bad)?.clone()),
        NoiseType::Television => {
            let speech = *draw.sources.get(1).ok_or_else(bad)?;
            make_television(get(&bank.music, draw.sources[0], bad)?, get(&bank.speech, speech, bad)?)
        }
        NoiseType::Babble => babble_from(&bank.speech.clips, &draw.sources, rng),
    }
}

/// Mixes the draw's noise into `clean` at the drawn SNR; returns the
/// mixture and the noise offset used.
pub fn corrupt(clean: &Waveform, bank: &NoiseBank, draw: &AugmentDraw, rng: &mut RandomStream) -> Result<(Waveform, usize)> {
    let noise = compose_noise(bank, draw, rng)?;
    let offset = draw_fit_offset(noise.len(), clean.len(), rng)?;
    let fitted = fit_noise_at(&noise, clean.len(), offset);
    Ok((mix_fitted_at_snr(clean, &fitted, draw.snr_db)?.mixed, offset))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Clean,
    Offline,
    #[default]
    Online,
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::Clean => "clean",
            AugmentMode::Offline => "offline",
            AugmentMode::Online => "online",
        })
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(AugmentMode::Clean),
            "offline" | "offline-aug" => Ok(AugmentMode::Offline),
            "online" | "online-aug" => Ok(AugmentMode::Online),
            other => Err(Error::Config(format!("unknown augmentation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub utt_id: String,
    pub epoch: usize,
    pub step: usize,
    /// `None` for an uncorrupted (clean-mode) pair.
    pub noise_type: Option<NoiseType>,
    pub noise_ids: Vec<String>,
    pub snr_db: Option<f64>,
    pub noise_offset: usize,
    pub crop_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub clean: FeatureMatrix,
    pub noisy: FeatureMatrix,
    pub speaker_index: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    pub speaker_index: usize,
    pub waveform: Waveform,
}

#[derive(Debug, Clone)]
struct OfflineCopy {
    waveform: Waveform,
    provenance: Provenance,
}

/// In-memory training split: clean waveforms, the train noise bank and,
/// for offline augmentation, the pregenerated noisy copies.
#[derive(Debug, Clone)]
pub struct PairSource {
    pub items: Vec<TrainItem>,
    pub speakers: Vec<String>,
    pub bank: NoiseBank,
    pub fbank: FbankConfig,
    /// Training crop length in frames; `None` uses whole utterances.
    pub crop_frames: Option<usize>,
    index: HashMap<String, usize>,
    offline: HashMap<String, Vec<OfflineCopy>>,
}

impl PairSource {
    pub fn new(items: Vec<TrainItem>, speakers: Vec<String>, bank: NoiseBank, fbank: FbankConfig, crop_frames: Option<usize>) -> Result<Self> {
        fbank.validate()?;
        let mut index = HashMap::new();
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.utt_id.clone(), i).is_some() {
                return Err(Error::Augment(format!("duplicate utterance '{}'", it.utt_id)));
            }
            if it.speaker_index >= speakers.len() {
                return Err(Error::Augment(format!("speaker index {} out of range", it.speaker_index)));
            }
        }
        if crop_frames == Some(0) {
            return Err(Error::Config("crop_frames must be positive".into()));
        }
        Ok(PairSource { items, speakers, bank, fbank, crop_frames, index, offline: HashMap::new() })
    }

    /// Loads the train split of a corpus and its train noise bank.
    pub fn load(manifest: &CorpusManifest, fbank: FbankConfig, crop_frames: Option<usize>) -> Result<Self> {
        let speakers = manifest.train_speakers();
        let spk_index: HashMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let entries: Vec<_> = manifest.split(Split::Train).collect();
        let items = entries
            .par_iter()
            .map(|u| {
                Ok(TrainItem {
                    utt_id: u.utt_id.clone(),
                    speaker_index: spk_index[u.speaker_id.as_str()],
                    waveform: read_wav(manifest.abs_path(&u.path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = NoiseBank::load(manifest, Split::Train)?;
        PairSource::new(items, speakers, bank, fbank, crop_frames)
    }

    pub fn item(&self, utt_id: &str) -> Result<&TrainItem> {
        self.index
            .get(utt_id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Augment(format!("utterance '{utt_id}' is not in the training split")))
    }

    pub fn attach_offline(&mut self, set: &OfflineSet) -> Result<()> {
        let mut map: HashMap<String, Vec<OfflineCopy>> = HashMap::new();
        let loaded = set
            .entries
            .par_iter()
            .map(|e| read_wav(set.root.join(&e.path)).map(|w| (e, w)))
            .collect::<Result<Vec<_>>>()?;
        for (e, waveform) in loaded {
            let item = self.item(&e.provenance.utt_id)?;
            if waveform.len() != item.waveform.len() {
                return Err(Error::Augment(format!("offline copy of '{}' has a different length", item.utt_id)));
            }
            map.entry(e.provenance.utt_id.clone()).or_default().push(OfflineCopy { waveform, provenance: e.provenance.clone() });
        }
        if let Some(missing) = self.items.iter().find(|it| !map.contains_key(&it.utt_id)) {
            return Err(Error::Augment(format!("no offline copy for '{}'", missing.utt_id)));
        }
        self.offline = map;
        Ok(())
    }

    fn crop_len(&self, len: usize) -> usize {
        match self.crop_frames {
            Some(f) => ((f - 1) * self.fbank.hop_length + self.fbank.win_length).min(len),
            None => len,
        }
    }
}

/// Reproducible stream for one training item.
pub fn item_stream(seed: u64, epoch: usize, step: usize, utt_id: &str) -> RandomStream {
    SeedKey::new("pair").u64(seed).u64(epoch as u64).u64(step as u64).str(utt_id).stream()
}

/// One clean/noisy training pair. Both views share the crop window and
/// framing; the noise comes only from the source's (train) bank.
pub fn make_pair(
    src: &PairSource,
    utt_id: &str,
    epoch: usize,
    step: usize,
    policy: &AugmentPolicy,
    mode: AugmentMode,
    seed: u64,
) -> Result<PairSample> {
    let item = src.item(utt_id)?;
    let mut rng = item_stream(seed, epoch, step, utt_id);
    let len = item.waveform.len();
    let crop = src.crop_len(len);
    let crop_start = if crop < len { rng.gen_range(0..=len - crop) } else { 0 };
    let clean_wave = item.waveform.slice(crop_start, crop);
    let clean = logmel(&clean_wave, &src.fbank)?;
    let base = Provenance {
        utt_id: utt_id.to_string(),
        epoch,
        step,
        noise_type: None,
        noise_ids: vec![],
        snr_db: None,
        noise_offset: 0,
        crop_start,
    };
    let (noisy, provenance) = match mode {
        AugmentMode::Clean => (clean.clone(), base),
        AugmentMode::Online => {
            let draw = draw_augmentation(policy, &src.bank, &mut rng)?;
            let (mixed, offset) = corrupt(&clean_wave, &src.bank, &draw, &mut rng)?;
            let prov = Provenance {
                noise_type: Some(draw.kind),
                noise_ids: noise_ids(&src.bank, &draw),
                snr_db: Some(draw.snr_db),
                noise_offset: offset,
                ..base
            };
            (logmel(&mixed, &src.fbank)?, prov)
        }
        AugmentMode::Offline => {
            let copies = src
                .offline
                .get(utt_id)
                .ok_or_else(|| Error::Augment(format!("offline mode without a copy of '{utt_id}'")))?;
            let copy = &copies[epoch % copies.len()];
            let prov = Provenance { epoch, step, crop_start, ..copy.provenance.clone() };
            (logmel(&copy.waveform.slice(crop_start, crop), &src.fbank)?, prov)
        }
    };
    Ok(PairSample { clean, noisy, speaker_index: item.speaker_index, provenance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEntry {
    pub path: PathBuf,
    pub copy: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSet {
    pub root: PathBuf,
    pub entries: Vec<OfflineEntry>,
    /// Samples clipped while writing PCM16.
    pub clipped: usize,
}

pub const OFFLINE_MANIFEST: &str = "offline.jsonl";

#[derive(Serialize, Deserialize)]
struct OfflineRecord {
    path: PathBuf,
    copy: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

/// Pregenerates `copies_per_utt` noisy copies of every training utterance
/// from the train noise bank and writes them with a JSON-lines manifest.
pub fn make_offline_set(src: &PairSource, policy: &AugmentPolicy, copies_per_utt: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<OfflineSet> {
    policy.validate()?;
    if copies_per_utt == 0 {
        return Err(Error::Config("copies_per_utt must be at least 1".into()));
    }
    let root = out_dir.as_ref().to_path_buf();
    let wav_dir = root.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let jobs: Vec<(&TrainItem, usize)> = src.items.iter().flat_map(|it| (0..copies_per_utt).map(move |c| (it, c))).collect();
    let made = jobs
        .par_iter()
        .map(|&(it, c)| {
            let mut rng = SeedKey::new("offline").u64(seed).u64(c as u64).str(&it.utt_id).stream();
            let draw = draw_augmentation(policy, &src.bank, &mut rng)?;
            let (mixed, offset) = corrupt(&it.waveform, &src.bank, &draw, &mut rng)?;
            let provenance = Provenance {
                utt_id: it.utt_id.clone(),
                epoch: 0,
                step: 0,
                noise_type: Some(draw.kind),
                noise_ids: noise_ids(&src.bank, &draw),
                snr_db: Some(draw.snr_db),
                noise_offset: offset,
                crop_start: 0,
            };
            Ok((mixed, OfflineEntry { path: PathBuf::from(format!("wav/{}-n{c}.wav", it.utt_id)), copy: c, provenance }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = OfflineSet { root: root.clone(), entries: Vec::with_capacity(made.len()), clipped: 0 };
    for (wave, entry) in made {
        set.clipped += write_wav(&wave, root.join(&entry.path), ClipPolicy::Clip)?.clipped;
        set.entries.push(entry);
    }
    let path = root.join(OFFLINE_MANIFEST);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for e in &set.entries {
        let rec = OfflineRecord { path: e.path.clone(), copy: e.copy, provenance: e.provenance.clone() };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Augment(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))?;
    Ok(set)
}

pub fn read_offline_set(root: impl AsRef<Path>) -> Result<OfflineSet> {
    let root = root.as_ref().to_path_buf();
    let path = root.join(OFFLINE_MANIFEST);
    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OfflineRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.clone(), line: i + 1, msg: e.to_string() })?;
        entries.push(OfflineEntry { path: rec.path, copy: rec.copy, provenance: rec.provenance });
    }
    Ok(OfflineSet { root, entries, clipped: 0 })
}

/// Appends provenance records as JSON lines.
pub fn append_provenance<'a>(records: impl IntoIterator<Item = &'a Provenance>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Augment(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_provenance(path: impl AsRef<Path>) -> Result<Vec<Provenance>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{synth_ambient, synth_music, synth_speaker, SpeakerProfile};
    use crate::rng::stream_from_seed;
    use crate::signal::{rms_power, snr_db};

    pub(crate) fn toy_bank(seed: u64, per_pool: usize) -> NoiseBank {
        let mut rng = stream_from_seed(seed);
        let mut bank = NoiseBank::default();
        for i in 0..per_pool {
            bank.music.push(format!("music-{i}"), synth_music(1.2, &mut rng).unwrap());
            bank.ambient.push(format!("ambient-{i}"), synth_ambient(1.2, &mut rng).unwrap());
            let p = SpeakerProfile::random(&format!("b{i}"), &mut rng);
            bank.speech.push(format!("speech-{i}"), synth_speaker(&p, 1.2, &mut rng).unwrap());
        }
        bank
    }

    pub(crate) fn toy_source(crop: Option<usize>) -> PairSource {
        let mut rng = stream_from_seed(5);
        let speakers: Vec<String> = (0..2).map(|s| format!("spk{s}")).collect();
        let mut items = Vec::new();
        for (s, name) in speakers.iter().enumerate() {
            let p = SpeakerProfile::random(name, &mut rng);
            for u in 0..2 {
                items.push(TrainItem {
                    utt_id: format!("{name}-u{u}"),
                    speaker_index: s,
                    waveform: synth_speaker(&p, 1.0, &mut rng).unwrap(),
                });
            }
        }
        PairSource::new(items, speakers, toy_bank(6, 6), FbankConfig::default(), crop).unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        assert!(AugmentPolicy { snr_low: 5.0, snr_high: 1.0, ..Default::default() }.validate().is_err());
        let zero = NoiseWeights { music: 0.0, ambient: 0.0, television: 0.0, babble: 0.0 };
        assert!(AugmentPolicy { weights: zero, ..Default::default() }.validate().is_err());
        assert!(AugmentPolicy { babble_k_max: 7, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_type_policy() {
        let bank = toy_bank(1, 6);
        let policy = AugmentPolicy { weights: NoiseWeights::only(NoiseType::Music), ..Default::default() };
        let mut rng = stream_from_seed(3);
        for _ in 0..200 {
            assert_eq!(draw_augmentation(&policy, &bank, &mut rng).unwrap().kind, NoiseType::Music);
        }
    }

    #[test]
    fn draws_match_type_contracts() {
        let bank = toy_bank(1, 6);
        let mut rng = stream_from_seed(4);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let d = draw_augmentation(&AugmentPolicy::default(), &bank, &mut rng).unwrap();
            seen.insert(d.kind);
            assert!((0.0..=20.0).contains(&d.snr_db));
            match d.kind {
                NoiseType::Babble => {
                    assert!((3..=6).contains(&d.sources.len()));
                    let mut s = d.sources.clone();
                    s.sort();
                    s.dedup();
                    assert_eq!(s.len(), d.sources.len());
                }
                NoiseType::Television => assert_eq!(d.sources.len(), 2),
                _ => assert_eq!(d.sources.len(), 1),
            }
            assert_eq!(noise_ids(&bank, &d).len(), d.sources.len());
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let mut bank = toy_bank(1, 6);
        bank.ambient = NoisePool::default();
        let policy = AugmentPolicy { weights: NoiseWeights::only(NoiseType::Ambient), ..Default::default() };
        assert!(draw_augmentation(&policy, &bank, &mut stream_from_seed(1)).is_err());
        bank.speech.ids.truncate(2);
        bank.speech.clips.truncate(2);
        let policy = AugmentPolicy { weights: NoiseWeights::only(NoiseType::Babble), ..Default::default() };
        assert!(draw_augmentation(&policy, &bank, &mut stream_from_seed(1)).is_err());
    }

    #[test]
    fn corrupt_hits_requested_snr() {
        let bank = toy_bank(2, 6);
        let src = toy_source(None);
        let clean = &src.items[0].waveform;
        let mut rng = stream_from_seed(8);
        for _ in 0..20 {
            let d = draw_augmentation(&AugmentPolicy::default(), &bank, &mut rng).unwrap();
            let (mixed, _) = corrupt(clean, &bank, &d, &mut rng).unwrap();
            let added = Waveform::new(mixed.samples.iter().zip(&clean.samples).map(|(m, c)| m - c).collect(), clean.sample_rate);
            assert!(rms_power(&added).unwrap() > 0.0);
            assert!((snr_db(clean, &added).unwrap() - d.snr_db).abs() < 1e-6);
        }
    }

    #[test]
    fn pairs_are_reproducible_and_aligned() {
        let src = toy_source(Some(50));
        let p = AugmentPolicy::default();
        let a = make_pair(&src, "spk0-u1", 3, 2, &p, AugmentMode::Online, 11).unwrap();
        let b = make_pair(&src, "spk0-u1", 3, 2, &p, AugmentMode::Online, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clean.shape(), a.noisy.shape());
        assert_eq!(a.clean.frames, 50);
        assert_ne!(a.clean, a.noisy);
        let snr = a.provenance.snr_db.unwrap();
        assert!((0.0..=20.0).contains(&snr));
        let c = make_pair(&src, "spk0-u1", 4, 2, &p, AugmentMode::Online, 11).unwrap();
        assert_ne!(c.provenance.snr_db, a.provenance.snr_db);
        let clean = make_pair(&src, "spk0-u1", 3, 2, &p, AugmentMode::Clean, 11).unwrap();
        assert_eq!(clean.clean, clean.noisy);
        assert!(clean.provenance.noise_type.is_none());
        assert!(make_pair(&src, "nope", 0, 0, &p, AugmentMode::Online, 1).is_err());
        assert!(make_pair(&src, "spk0-u1", 0, 0, &p, AugmentMode::Offline, 1).is_err());
    }

    #[test]
    fn pair_generation_is_schedule_independent() {
        let src = toy_source(Some(40));
        let p = AugmentPolicy::default();
        let ids: Vec<String> = src.items.iter().map(|i| i.utt_id.clone()).collect();
        let seq: Vec<PairSample> = ids.iter().enumerate().map(|(s, u)| make_pair(&src, u, 1, s, &p, AugmentMode::Online, 2).unwrap()).collect();
        let mut rev: Vec<PairSample> = ids.iter().enumerate().rev().map(|(s, u)| make_pair(&src, u, 1, s, &p, AugmentMode::Online, 2).unwrap()).collect();
        rev.reverse();
        assert_eq!(seq, rev);
        let par: Vec<PairSample> = ids.par_iter().enumerate().map(|(s, u)| make_pair(&src, u, 1, s, &p, AugmentMode::Online, 2).unwrap()).collect();
        assert_eq!(seq, par);
    }

    #[test]
    fn offline_set_round_trip() {
        let mut src = toy_source(Some(30));
        let dir = tempfile::tempdir().unwrap();
        let p = AugmentPolicy::default();
        let set = make_offline_set(&src, &p, 1, 4, dir.path()).unwrap();
        assert_eq!(set.entries.len(), src.items.len());
        let train_ids: std::collections::BTreeSet<&String> = src.bank.all_ids().collect();
        for e in &set.entries {
            assert!(e.provenance.noise_ids.iter().all(|id| train_ids.contains(id)));
        }
        let dir2 = tempfile::tempdir().unwrap();
        make_offline_set(&src, &p, 1, 4, dir2.path()).unwrap();
        for e in &set.entries {
            assert_eq!(std::fs::read(dir.path().join(&e.path)).unwrap(), std::fs::read(dir2.path().join(&e.path)).unwrap());
        }
        let back = read_offline_set(dir.path()).unwrap();
        assert_eq!(back.entries, set.entries);
        src.attach_offline(&back).unwrap();
        let a = make_pair(&src, "spk1-u0", 0, 0, &p, AugmentMode::Offline, 9).unwrap();
        let b = make_pair(&src, "spk1-u0", 5, 3, &p, AugmentMode::Offline, 9).unwrap();
        assert_eq!(a.provenance.snr_db, b.provenance.snr_db);
        assert_eq!(a.provenance.noise_ids, b.provenance.noise_ids);
    }

    #[test]
    fn provenance_jsonl_round_trip() {
        let src = toy_source(Some(30));
        let p = AugmentPolicy::default();
        let recs: Vec<Provenance> = (0..3).map(|e| make_pair(&src, "spk0-u0", e, 0, &p, AugmentMode::Online, 1).unwrap().provenance).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prov.jsonl");
        append_provenance(&recs[..2], &path).unwrap();
        append_provenance(&recs[2..], &path).unwrap();
        assert_eq!(read_provenance(&path).unwrap(), recs);
    }
}
