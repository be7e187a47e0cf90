//! End-to-end runs: train one system, score it under every test condition
//! and tabulate the results.

use std::path::Path;

use crate::augment::{make_offline_set, AugmentMode, AugmentPolicy, NoiseBank, PairSource};
use crate::config::ExperimentConfig;
use crate::corpus::{build_trials, CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{
    extract_embeddings, load_utterances, score_trials, MetricRow, ScoreSet, TestCondition, TrialSet, Utterance,
};
use crate::features::FbankConfig;
use crate::nn::Network;
use crate::train::{reference_mse, run_training, EpochLog, PairedSet, TrainHooks};

/// Condition name of the row pooling all noisy conditions.
pub const POOLED: &str = "all";

/// Test-side data shared by every system of an experiment.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub utterances: Vec<Utterance>,
    pub bank: NoiseBank,
    pub trials: TrialSet,
    pub paired: PairedSet,
    /// Seed of the condition noise; fixed per corpus so every system sees
    /// the same corrupted audio.
    pub noise_seed: u64,
}

impl EvalData {
    pub fn load(manifest: &CorpusManifest, cfg: &ExperimentConfig) -> Result<Self> {
        let utterances = load_utterances(manifest, Split::Test)?;
        if utterances.is_empty() {
            return Err(Error::Eval("corpus has no test utterances".into()));
        }
        let bank = NoiseBank::load(manifest, Split::Test)?;
        let trials = build_trials(manifest, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.corpus_seed)?;
        let take = cfg.eval.paired_utterances.min(utterances.len());
        let paired = PairedSet::build(&utterances[..take], &bank, &AugmentPolicy::default(), &cfg.fbank, cfg.corpus_seed)?;
        Ok(EvalData { utterances, bank, trials, paired, noise_seed: cfg.corpus_seed })
    }
}

#[derive(Debug, Clone)]
pub struct ConditionScores {
    pub condition: TestCondition,
    pub scores: ScoreSet,
}

/// The original condition followed by the 15 noisy ones.
pub fn standard_conditions() -> Vec<TestCondition> {
    std::iter::once(TestCondition::Original).chain(TestCondition::noisy_grid()).collect()
}

pub fn score_conditions(net: &Network<f32>, data: &EvalData, fbank: &FbankConfig, conditions: &[TestCondition]) -> Result<Vec<ConditionScores>> {
    conditions
        .iter()
        .map(|c| {
            let cond = match c {
                TestCondition::Original => None,
                _ => Some((c, &data.bank, data.noise_seed)),
            };
            let emb = extract_embeddings(net, &data.utterances, fbank, cond)?;
            Ok(ConditionScores { condition: *c, scores: score_trials(&emb, &data.trials)? })
        })
        .collect()
}

/// Scores of every noisy condition concatenated.
pub fn pooled_noisy(results: &[ConditionScores]) -> ScoreSet {
    ScoreSet::pooled(results.iter().filter(|r| r.condition != TestCondition::Original).map(|r| &r.scores))
}

/// One row per condition plus a pooled row over all noisy conditions.
pub fn metrics_table(results: &[ConditionScores]) -> Result<Vec<MetricRow>> {
    let mut rows = results
        .iter()
        .map(|r| MetricRow::from_scores(r.condition.name(), r.condition.snr(), &r.scores))
        .collect::<Result<Vec<_>>>()?;
    if results.iter().any(|r| r.condition != TestCondition::Original) {
        rows.push(MetricRow::from_scores(POOLED, None, &pooled_noisy(results))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SystemResult {
    pub net: Network<f32>,
    pub logs: Vec<EpochLog>,
    pub results: Vec<ConditionScores>,
    pub metrics: Vec<MetricRow>,
    pub paired_mse: f64,
}

impl SystemResult {
    pub fn pooled(&self) -> Option<&MetricRow> {
        self.metrics.iter().find(|r| r.condition == POOLED)
    }
}

/// Loads the training split (plus offline copies when configured).
/// Offline copies are written under `work_dir`.
pub fn training_source(manifest: &CorpusManifest, cfg: &ExperimentConfig, work_dir: Option<&Path>) -> Result<PairSource> {
    let tc = cfg.train_config();
    let mut src = PairSource::load(manifest, cfg.fbank.clone(), tc.crop())?;
    if tc.mode == AugmentMode::Offline {
        let dir = work_dir.ok_or_else(|| Error::Config("offline augmentation needs a run directory".into()))?.join("offline");
        let set = make_offline_set(&src, &tc.augment, tc.offline_copies, tc.seed, &dir)?;
        src.attach_offline(&set)?;
    }
    Ok(src)
}

/// Trains one system and evaluates it on `conditions`.
pub fn run_system(
    src: &PairSource,
    cfg: &ExperimentConfig,
    data: &EvalData,
    conditions: &[TestCondition],
    hooks: TrainHooks<'_>,
) -> Result<SystemResult> {
    cfg.validate()?;
    let outcome = run_training(src, &cfg.net, &cfg.train_config(), hooks)?;
    let results = score_conditions(&outcome.net, data, &cfg.fbank, conditions)?;
    let metrics = metrics_table(&results)?;
    let paired_mse = reference_mse(&outcome.net, &data.paired)?;
    Ok(SystemResult { net: outcome.net, logs: outcome.logs, results, metrics, paired_mse })
}
