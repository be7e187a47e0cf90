//! Embedding extraction, cosine scoring, EER / minDCF / DET, and noisy
//! test conditions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::augment::{corrupt, AugmentDraw, NoiseBank};
use crate::corpus::{CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::features::{logmel, FbankConfig};
use crate::nn::{features_to_batch, Network};
use crate::rng::SeedKey;
use crate::signal::{read_wav, NoiseType, Waveform};

/// Operating points whose normalized minimum costs are averaged.
pub const DCF_P_TARGETS: [f64; 2] = [0.01, 0.001];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

fn label_str(target: bool) -> &'static str {
    if target {
        "target"
    } else {
        "nontarget"
    }
}

fn parse_label(s: &str) -> std::result::Result<bool, String> {
    match s {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        other => Err(format!("label must be target or nontarget, got '{other}'")),
    }
}

fn text_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn validate(&self) -> Result<()> {
        if !self.trials.iter().any(|t| t.target) || self.trials.iter().all(|t| t.target) {
            return Err(Error::Eval("trial set needs at least one target and one nontarget trial".into()));
        }
        Ok(())
    }

    /// `label enroll test` lines.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let body: String = self.trials.iter().map(|t| format!("{} {} {}\n", label_str(t.target), t.enroll, t.test)).collect();
        write_text(path.as_ref(), &body)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut trials = Vec::new();
        for (line, text) in text_lines(path)? {
            let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(format!("expected 3 fields, got {}", f.len())));
            }
            trials.push(Trial { target: parse_label(f[0]).map_err(perr)?, enroll: f[1].into(), test: f[2].into() });
        }
        Ok(TrialSet { trials })
    }
}

/// Trials with aligned scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    /// Builds a score set from bare labels, with synthetic utterance names.
    pub fn from_labels(labels: &[bool], scores: &[f64]) -> Result<Self> {
        let s = ScoreSet {
            trials: labels
                .iter()
                .enumerate()
                .map(|(i, &t)| Trial { target: t, enroll: format!("e{i}"), test: format!("t{i}") })
                .collect(),
            scores: scores.to_vec(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials.len() != self.scores.len() {
            return Err(Error::Eval(format!("{} trials but {} scores", self.trials.len(), self.scores.len())));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("trial scores".into()));
        }
        TrialSet { trials: self.trials.clone() }.validate()
    }

    pub fn split_by_label(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, &s) in self.trials.iter().zip(&self.scores) {
            if t.target {
                tar.push(s)
            } else {
                non.push(s)
            }
        }
        (tar, non)
    }

    /// Concatenation of several score sets.
    pub fn pooled<'a>(sets: impl IntoIterator<Item = &'a ScoreSet>) -> ScoreSet {
        let mut out = ScoreSet::default();
        for s in sets {
            out.trials.extend(s.trials.iter().cloned());
            out.scores.extend(&s.scores);
        }
        out
    }

    /// `label enroll test score` lines; scores printed round-trip exact.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let body: String = self
            .trials
            .iter()
            .zip(&self.scores)
            .map(|(t, s)| format!("{} {} {} {:?}\n", label_str(t.target), t.enroll, t.test, s))
            .collect();
        write_text(path.as_ref(), &body)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut out = ScoreSet::default();
        for (line, text) in text_lines(path)? {
            let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 4 {
                return Err(perr(format!("expected 4 fields, got {}", f.len())));
            }
            out.trials.push(Trial { target: parse_label(f[0]).map_err(perr)?, enroll: f[1].into(), test: f[2].into() });
            out.scores.push(f[3].parse().map_err(|e| perr(format!("score: {e}")))?);
        }
        out.validate()?;
        Ok(out)
    }
}

pub fn cosine_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() || e1.is_empty() {
        return Err(Error::Eval(format!("embedding sizes differ: {} vs {}", e1.len(), e2.len())));
    }
    let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Eval("cosine score of a zero-norm embedding".into()));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// ROC staircase vertex: a trial is accepted when its score is at least
/// `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// All staircase vertices from accept-everything (threshold = lowest score)
/// to reject-everything (threshold = +inf).
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.validate()?;
    let mut all: Vec<(f64, bool)> = scores.scores.iter().copied().zip(scores.trials.iter().map(|t| t.target)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_tar = all.iter().filter(|x| x.1).count() as f64;
    let n_non = all.len() as f64 - n_tar;
    let (mut miss, mut fa) = (0usize, all.len() - n_tar as usize);
    let mut points = vec![DetPoint { threshold: all[0].0, p_fa: 1.0, p_miss: 0.0 }];
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() { all[i].0 } else { f64::INFINITY };
        points.push(DetPoint { threshold, p_fa: fa as f64 / n_non, p_miss: miss as f64 / n_tar });
    }
    Ok(points)
}

/// EER on a staircase ordered by increasing threshold, interpolating
/// linearly between the two vertices around the crossing. Returns
/// `(eer, threshold)`.
pub fn eer_from_det(points: &[DetPoint]) -> Result<(f64, f64)> {
    let i = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .ok_or_else(|| Error::Eval("DET points never cross".into()))?;
    let p = points[i];
    if p.p_miss == p.p_fa || i == 0 {
        return Ok((p.p_miss, p.threshold));
    }
    let q = points[i - 1];
    let (dm, df) = (p.p_miss - q.p_miss, p.p_fa - q.p_fa);
    let a = (q.p_fa - q.p_miss) / (dm - df);
    let eer = q.p_miss + a * dm;
    let threshold = if p.threshold.is_finite() { q.threshold + a * (p.threshold - q.threshold) } else { q.threshold };
    Ok((eer, threshold))
}

pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    eer_from_det(&det_points(scores)?)
}

/// Minimum over thresholds of `P_miss p + P_fa (1 - p)`, normalized by
/// `min(p, 1 - p)`, with unit miss and false-alarm costs.
pub fn compute_min_dcf(scores: &ScoreSet, p_target: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Eval(format!("p_target {p_target} outside (0, 1)")));
    }
    let norm = p_target.min(1.0 - p_target);
    Ok(det_points(scores)?
        .iter()
        .map(|d| (d.p_miss * p_target + d.p_fa * (1.0 - p_target)) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Mean of the minimum costs at [`DCF_P_TARGETS`].
pub fn average_min_dcf(scores: &ScoreSet) -> Result<f64> {
    let mut total = 0.0;
    for p in DCF_P_TARGETS {
        total += compute_min_dcf(scores, p)?;
    }
    Ok(total / DCF_P_TARGETS.len() as f64)
}

pub fn write_det(points: &[DetPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::from("p_fa,p_miss\n");
    for p in points {
        body.push_str(&format!("{:?},{:?}\n", p.p_fa, p.p_miss));
    }
    write_text(path.as_ref(), &body)
}

/// Evaluation audio: the untouched test set or a noise type at one SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestCondition {
    Original,
    Noisy { kind: NoiseType, snr_db: f64 },
}

pub const TEST_SNRS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
pub const TEST_NOISE_TYPES: [NoiseType; 3] = [NoiseType::Babble, NoiseType::Music, NoiseType::Ambient];

impl TestCondition {
    /// The 15 noisy conditions, grouped by type.
    pub fn noisy_grid() -> Vec<TestCondition> {
        TEST_NOISE_TYPES
            .iter()
            .flat_map(|&kind| TEST_SNRS.iter().map(move |&snr_db| TestCondition::Noisy { kind, snr_db }))
            .collect()
    }

    /// Row label in reports; ambient is shown as "noise".
    pub fn name(&self) -> &'static str {
        match self {
            TestCondition::Original => "original",
            TestCondition::Noisy { kind: NoiseType::Ambient, .. } => "noise",
            TestCondition::Noisy { kind, .. } => kind.as_str(),
        }
    }

    pub fn snr(&self) -> Option<f64> {
        match self {
            TestCondition::Original => None,
            TestCondition::Noisy { snr_db, .. } => Some(*snr_db),
        }
    }
}

impl fmt::Display for TestCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.snr() {
            None => f.write_str(self.name()),
            Some(s) => write!(f, "{}:{}", self.name(), s),
        }
    }
}

impl FromStr for TestCondition {
    type Err = Error;

    /// `original` or `TYPE:SNR`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "original" || s == "clean" {
            return Ok(TestCondition::Original);
        }
        let (kind, snr) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("condition '{s}' is not 'original' or TYPE:SNR")))?;
        let kind: NoiseType = kind.parse()?;
        let snr_db: f64 = snr.parse().map_err(|_| Error::Config(format!("condition SNR '{snr}' is not a number")))?;
        if !snr_db.is_finite() {
            return Err(Error::Config("condition SNR must be finite".into()));
        }
        Ok(TestCondition::Noisy { kind, snr_db })
    }
}

/// Corrupts a test utterance for a condition using the test-split bank.
/// The noise realization depends on `(seed, noise type, utt_id)` only, so
/// every SNR and every system sees the same noise.
pub fn apply_condition(clean: &Waveform, utt_id: &str, cond: &TestCondition, bank: &NoiseBank, seed: u64) -> Result<Waveform> {
    let TestCondition::Noisy { kind, snr_db } = *cond else {
        return Ok(clean.clone());
    };
    let mut rng = SeedKey::new("test-condition").u64(seed).str(kind.as_str()).str(utt_id).stream();
    let pick = |n: usize, what: &str, rng: &mut crate::rng::RandomStream| {
        if n == 0 {
            Err(Error::Eval(format!("test noise bank has no {what} clips")))
        } else {
            Ok(rng.gen_range(0..n))
        }
    };
    let sources = match kind {
        NoiseType::Music => vec![pick(bank.music.len(), "music", &mut rng)?],
        NoiseType::Ambient => vec![pick(bank.ambient.len(), "ambient", &mut rng)?],
        NoiseType::Television => vec![pick(bank.music.len(), "music", &mut rng)?, pick(bank.speech.len(), "speech", &mut rng)?],
        NoiseType::Babble => {
            let k = rng.gen_range(3..=6usize).min(bank.speech.len());
            if k < 3 {
                return Err(Error::Eval("test noise bank has fewer than 3 speech clips".into()));
            }
            sample_indices(&mut rng, bank.speech.len(), k).into_vec()
        }
    };
    let draw = AugmentDraw { kind, snr_db, sources };
    Ok(corrupt(clean, bank, &draw, &mut rng)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

/// Embeddings keyed by utterance id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub entries: BTreeMap<String, EmbeddingEntry>,
}

impl EmbeddingSet {
    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.vector.len())
    }

    pub fn get(&self, utt_id: &str) -> Result<&[f64]> {
        self.entries
            .get(utt_id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::Eval(format!("no embedding for '{utt_id}'")))
    }

    /// Copies the set with `suffix` appended to every utterance id.
    pub fn with_suffix(&self, suffix: &str) -> EmbeddingSet {
        EmbeddingSet { entries: self.entries.iter().map(|(k, v)| (format!("{k}{suffix}"), v.clone())).collect() }
    }

    pub fn merge(&mut self, other: EmbeddingSet) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.insert(k.clone(), v).is_some() {
                return Err(Error::Eval(format!("duplicate embedding id '{k}'")));
            }
        }
        Ok(())
    }
}

/// Test utterance audio: `(utt_id, speaker_id, waveform)`.
pub type Utterance = (String, String, Waveform);

pub fn load_utterances(manifest: &CorpusManifest, split: Split) -> Result<Vec<Utterance>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|u| Ok((u.utt_id.clone(), u.speaker_id.clone(), read_wav(manifest.abs_path(&u.path))?)))
        .collect()
}

/// Eval-mode embeddings of whole utterances, optionally corrupted by a
/// test condition first.
pub fn extract_embeddings(
    net: &Network<f32>,
    utterances: &[Utterance],
    fbank: &FbankConfig,
    condition: Option<(&TestCondition, &NoiseBank, u64)>,
) -> Result<EmbeddingSet> {
    if fbank.n_mels != net.config.n_mels {
        return Err(Error::Eval(format!("features have {} mels, network expects {}", fbank.n_mels, net.config.n_mels)));
    }
    let vectors = utterances
        .par_iter()
        .map(|(utt, _, wave)| {
            let audio = match condition {
                Some((cond, bank, seed)) => apply_condition(wave, utt, cond, bank, seed)?,
                None => wave.clone(),
            };
            let fm = logmel(&audio, fbank)?;
            let x = features_to_batch::<f32>(&[&fm])?;
            let emb = net.forward_eval(&x)?;
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of '{utt}'")));
            }
            Ok(emb.into_iter().map(|v| v as f64).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::default();
    for ((utt, spk, _), vector) in utterances.iter().zip(vectors) {
        set.entries.insert(utt.clone(), EmbeddingEntry { speaker_id: spk.clone(), vector });
    }
    Ok(set)
}

pub fn score_trials(emb: &EmbeddingSet, trials: &TrialSet) -> Result<ScoreSet> {
    trials.validate()?;
    let scores = trials
        .trials
        .iter()
        .map(|t| cosine_score(emb.get(&t.enroll)?, emb.get(&t.test)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { trials: trials.trials.clone(), scores })
}

/// `utt_id spk_id v1 ... vp`, values with 9 significant digits.
pub fn dump_embeddings(emb: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    if emb.entries.is_empty() {
        return Err(Error::Eval("no embeddings to dump".into()));
    }
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (utt, e) in &emb.entries {
        let mut line = format!("{utt} {}", e.speaker_id);
        for v in &e.vector {
            line.push_str(&format!(" {v:e}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut set = EmbeddingSet::default();
    for (line, text) in text_lines(path)? {
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let f: Vec<&str> = text.split_whitespace().collect();
        if f.len() < 3 {
            return Err(perr("expected utt_id spk_id and at least one value".into()));
        }
        let vector = f[2..].iter().map(|v| v.parse::<f64>().map_err(|e| perr(e.to_string()))).collect::<Result<Vec<_>>>()?;
        if set.dim().is_some_and(|d| d != vector.len()) {
            return Err(perr("embedding dimension differs from earlier lines".into()));
        }
        set.entries.insert(f[0].to_string(), EmbeddingEntry { speaker_id: f[1].to_string(), vector });
    }
    Ok(set)
}

/// One row of the condition x SNR results matrix; EER as a fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub condition: String,
    pub snr: Option<f64>,
    pub eer: f64,
    pub dcf: f64,
}

impl MetricRow {
    pub fn from_scores(condition: &str, snr: Option<f64>, scores: &ScoreSet) -> Result<Self> {
        Ok(MetricRow { condition: condition.to_string(), snr, eer: compute_eer(scores)?.0, dcf: average_min_dcf(scores)? })
    }

    pub fn key(&self) -> (String, Option<String>) {
        (self.condition.clone(), self.snr.map(|s| format!("{s}")))
    }
}

pub fn write_metrics(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::from("condition,snr,eer,dcf\n");
    for r in rows {
        let snr = r.snr.map(|s| format!("{s}")).unwrap_or_default();
        body.push_str(&format!("{},{},{:?},{:?}\n", r.condition, snr, r.eer, r.dcf));
    }
    write_text(path.as_ref(), &body)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut rows = Vec::new();
    for (line, text) in text_lines(path)?.into_iter().skip(1) {
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let f: Vec<&str> = text.split(',').collect();
        if f.len() != 4 {
            return Err(perr(format!("expected 4 columns, got {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| perr(format!("'{s}': {e}")));
        rows.push(MetricRow {
            condition: f[0].to_string(),
            snr: if f[1].trim().is_empty() { None } else { Some(num(f[1])?) },
            eer: num(f[2])?,
            dcf: num(f[3])?,
        });
    }
    Ok(rows)
}

/// Relative reduction `(baseline - system) / baseline`; `None` when the
/// baseline is zero.
pub fn relative_reduction(baseline: f64, system: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - system) / baseline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub condition: String,
    pub snr: Option<f64>,
    pub base_eer: f64,
    pub eer: f64,
    pub eer_reduction: Option<f64>,
    pub base_dcf: f64,
    pub dcf: f64,
    pub dcf_reduction: Option<f64>,
}

/// Joins two metric tables on (condition, snr), keeping the baseline's
/// row order.
pub fn compare_metrics(baseline: &[MetricRow], system: &[MetricRow]) -> Vec<DeltaRow> {
    baseline
        .iter()
        .filter_map(|b| {
            let s = system.iter().find(|s| s.key() == b.key())?;
            Some(DeltaRow {
                condition: b.condition.clone(),
                snr: b.snr,
                base_eer: b.eer,
                eer: s.eer,
                eer_reduction: relative_reduction(b.eer, s.eer),
                base_dcf: b.dcf,
                dcf: s.dcf,
                dcf_reduction: relative_reduction(b.dcf, s.dcf),
            })
        })
        .collect()
}
