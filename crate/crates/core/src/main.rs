use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spkinv::augment::AugmentMode;
use spkinv::config::ExperimentConfig;
use spkinv::corpus::{build_corpus, build_trials, CorpusManifest, Split};
use spkinv::eval::{
    compare_metrics, det_points, dump_embeddings, extract_embeddings, load_utterances, read_embeddings, read_metrics,
    score_trials, write_det, write_metrics, MetricRow, ScoreSet, TestCondition, TrialSet,
};
use spkinv::experiment::{metrics_table, pooled_noisy, score_conditions, standard_conditions, training_source, EvalData};
use spkinv::losses::WithinLoss;
use spkinv::nn::{checkpoint, HeadKind, Network};
use spkinv::train::{reference_mse, run_training, write_epoch_logs, TrainHooks};
use spkinv::{Error, Result};

const TRIALS_FILE: &str = "trials.txt";
const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "spkinv", version, about = "Noise-robust speaker embedding toolkit")]
struct Cli {
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the strict reproducible mode
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Parent of run directories created by `train` without `--out`
    #[arg(long, global = true, env = "SPKINV_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, noise bank and trial list
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one system
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory (default: $SPKINV_RUN_ROOT/<system name>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// clean, offline or online
        #[arg(long)]
        mode: Option<AugmentMode>,
        /// softmax or a-softmax
        #[arg(long)]
        head: Option<HeadKind>,
        /// none, mse or cosine
        #[arg(long)]
        within: Option<WithinLoss>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Write per-pair augmentation provenance as JSON lines
        #[arg(long)]
        provenance: bool,
    },
    /// Extract embeddings of a corpus split, optionally under a test condition
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// TYPE:SNR, e.g. music:5
        #[arg(long)]
        condition: Option<TestCondition>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Appended to every utterance id
        #[arg(long, default_value = "")]
        suffix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score a trial list
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a score file, or the full condition matrix of a run
    Eval {
        /// Score file to summarize
        #[arg(long, conflicts_with = "run")]
        scores: Option<PathBuf>,
        /// Run directory with a checkpoint
        #[arg(long, requires = "corpus")]
        run: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Restrict to these conditions (repeatable); default: original plus all 15 noisy ones
        #[arg(long)]
        condition: Vec<TestCondition>,
        /// Metrics CSV (default: <run>/metrics.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// DET curve points of a score file
    Det {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare runs against the first one
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the comparison as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Command::SynthCorpus { ref out } => {
            let m = build_corpus(&cfg.corpus, cfg.corpus_seed, out)?;
            let trials = build_trials(&m, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.corpus_seed)?;
            trials.write(out.join(TRIALS_FILE))?;
            println!(
                "{} utterances, {} noise clips, {} trials in {}",
                m.utterances.len(),
                m.noises.len(),
                trials.trials.len(),
                out.display()
            );
        }
        Command::Train { ref corpus, ref out, mode, head, within, epochs, provenance } => {
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(h) = head {
                cfg.train.head = h;
            }
            if let Some(w) = within {
                cfg.train.within = w;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let run_dir = match out {
                Some(p) => p.clone(),
                None => cli.run_root.join(system_name(&cfg)),
            };
            mkdir(&run_dir)?;
            cfg.save(run_dir.join(CONFIG_FILE))?;
            if let Some(src) = &cli.config {
                std::fs::copy(src, run_dir.join("config.source.toml")).map_err(|e| Error::Io { path: src.clone(), source: e })?;
            }
            let manifest = CorpusManifest::read(corpus)?;
            let src = training_source(&manifest, &cfg, Some(&run_dir))?;
            let prov_path = run_dir.join("provenance.jsonl");
            if provenance && prov_path.exists() {
                std::fs::remove_file(&prov_path).map_err(|e| Error::Io { path: prov_path.clone(), source: e })?;
            }
            let hooks = TrainHooks { provenance_log: provenance.then_some(prov_path.as_path()), reference: None, verbose: true };
            let outcome = run_training(&src, &cfg.net, &cfg.train_config(), hooks)?;
            checkpoint::save(&outcome.net, run_dir.join(CHECKPOINT_FILE))?;
            write_epoch_logs(&outcome.logs, run_dir.join("epochs.csv"))?;
            println!("trained {} -> {}", system_name(&cfg), run_dir.display());
        }
        Command::Extract { ref checkpoint, ref corpus, condition, ref split, ref suffix, ref out } => {
            let net: Network<f32> = checkpoint::load(checkpoint)?;
            let manifest = CorpusManifest::read(corpus)?;
            let split: Split = split.parse()?;
            let utts = load_utterances(&manifest, split)?;
            let bank;
            let cond = match condition {
                Some(c @ TestCondition::Noisy { .. }) => {
                    bank = spkinv::augment::NoiseBank::load(&manifest, Split::Test)?;
                    Some((c, &bank))
                }
                _ => None,
            };
            let emb = extract_embeddings(&net, &utts, &cfg.fbank, cond.as_ref().map(|(c, b)| (c, *b, cfg.corpus_seed)))?;
            dump_embeddings(&emb.with_suffix(suffix), out)?;
        }
        Command::Score { ref embeddings, ref trials, ref out } => {
            let emb = read_embeddings(embeddings)?;
            let trials = TrialSet::read(trials)?;
            score_trials(&emb, &trials)?.write(out)?;
        }
        Command::Eval { ref scores, ref run, ref corpus, ref condition, ref out } => match (scores, run) {
            (Some(scores), _) => {
                let s = ScoreSet::read(scores)?;
                let row = MetricRow::from_scores("scores", None, &s)?;
                print_metrics(std::slice::from_ref(&row));
                if let Some(out) = out {
                    write_metrics(&[row], out)?;
                }
            }
            (None, Some(run)) => {
                let run_cfg = ExperimentConfig::load(run.join(CONFIG_FILE))?;
                let net: Network<f32> = checkpoint::load(run.join(CHECKPOINT_FILE))?;
                let manifest = CorpusManifest::read(corpus.as_ref().expect("clap requires corpus"))?;
                let data = EvalData::load(&manifest, &run_cfg)?;
                let conditions = if condition.is_empty() { standard_conditions() } else { condition.clone() };
                let results = score_conditions(&net, &data, &run_cfg.fbank, &conditions)?;
                let score_dir = run.join("scores");
                mkdir(&score_dir)?;
                for r in &results {
                    r.scores.write(score_dir.join(format!("{}.txt", r.condition.to_string().replace(':', "_"))))?;
                }
                let rows = metrics_table(&results)?;
                write_metrics(&rows, out.clone().unwrap_or_else(|| run.join("metrics.csv")))?;
                if results.iter().any(|r| r.condition != TestCondition::Original) {
                    write_det(&det_points(&pooled_noisy(&results))?, run.join("det_all.csv"))?;
                }
                let mse = reference_mse(&net, &data.paired)?;
                let p = run.join("paired_mse.txt");
                std::fs::write(&p, format!("{mse:?}\n")).map_err(|e| Error::Io { path: p, source: e })?;
                print_metrics(&rows);
                println!("paired clean/noisy embedding MSE {mse:.6}");
            }
            (None, None) => return Err(Error::Config("eval needs --scores or --run".into())),
        },
        Command::Det { ref scores, ref out } => {
            write_det(&det_points(&ScoreSet::read(scores)?)?, out)?;
        }
        Command::Report { ref runs, ref out } => report(runs, out.as_deref())?,
    }
    Ok(())
}

fn system_name(cfg: &ExperimentConfig) -> String {
    let head = match cfg.train.head {
        HeadKind::Softmax => "softmax",
        HeadKind::ASoftmax => "asoftmax",
    };
    let within = match cfg.train.within {
        WithinLoss::None => String::new(),
        WithinLoss::Mse => "-mse".into(),
        WithinLoss::Cosine => "-cosine".into(),
    };
    format!("{}-{head}{within}-s{}", cfg.train.mode, cfg.seed)
}

fn print_metrics(rows: &[MetricRow]) {
    println!("{:<10} {:>5} {:>8} {:>8}", "condition", "snr", "EER%", "DCF");
    for r in rows {
        let snr = r.snr.map(|s| format!("{s}")).unwrap_or_else(|| "-".into());
        println!("{:<10} {:>5} {:>8.2} {:>8.4}", r.condition, snr, 100.0 * r.eer, r.dcf);
    }
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let tables = runs
        .iter()
        .map(|r| {
            let p = if r.is_dir() { r.join("metrics.csv") } else { r.clone() };
            read_metrics(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let name = |p: &PathBuf| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
    let pct = |v: Option<f64>| v.map(|x| format!("{:+.1}%", 100.0 * x)).unwrap_or_else(|| "n/a".into());
    let mut csv = String::from("system,condition,snr,eer,dcf,base_eer,base_dcf,eer_reduction,dcf_reduction\n");
    let base = &tables[0];
    for (run, table) in runs.iter().zip(&tables) {
        println!("== {} (baseline {})", name(run), name(&runs[0]));
        println!("{:<10} {:>5} {:>8} {:>8} {:>9} {:>9}", "condition", "snr", "EER%", "DCF", "dEER", "dDCF");
        for d in compare_metrics(base, table) {
            let snr = d.snr.map(|s| format!("{s}")).unwrap_or_else(|| "-".into());
            println!(
                "{:<10} {:>5} {:>8.2} {:>8.4} {:>9} {:>9}",
                d.condition,
                snr,
                100.0 * d.eer,
                d.dcf,
                pct(d.eer_reduction),
                pct(d.dcf_reduction)
            );
            let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{},{}\n",
                name(run),
                d.condition,
                d.snr.map(|s| format!("{s}")).unwrap_or_default(),
                d.eer,
                d.dcf,
                d.base_eer,
                d.base_dcf,
                opt(d.eer_reduction),
                opt(d.dcf_reduction)
            ));
        }
    }
    if let Some(out) = out {
        std::fs::write(out, csv).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    }
    Ok(())
}
