use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::config::{BpeCorpus, EvalSection, ExperimentConfig, Regime};
use super::report::{
    read_report, write_rows, BucketEval, Failure, ModelStats, ReportRow, Status, TestSetEval, TestSetKind,
};
use crate::analytics::{
    avg_length, bucket_label, global_random_split, oov_rate, sentence_typicality, subset_variability_from_stats,
    subsample_limited, synthetic_reversal_corpus, token_frequencies, typicality_buckets, FrequencyTable,
    ParallelCorpus, Split,
};
use crate::bleu::{corpus_stats, BleuReport, BleuStats, Smoothing};
use crate::error::{Error, Result};
use crate::model::{build_model, decode_beam, decode_greedy, Checkpoint, CheckpointMeta, Trainer};
use crate::pruning::{sparsity_report, PruningSchedule};
use crate::tokenizer::{learn_bpe, MergeTable};

pub const OUT_DIR_ENV: &str = "SPARSENMT_OUT_DIR";
pub const THREADS_ENV: &str = "SPARSENMT_THREADS";

pub const REPORT_FILE: &str = "report.jsonl";
pub const BPE_FILE: &str = "bpe.txt";

/// Where to write and how many sparsity levels to train at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl RunOptions {
    /// `SPARSENMT_OUT_DIR` and `SPARSENMT_THREADS` override the given
    /// defaults.
    pub fn from_env(default_out: impl Into<PathBuf>) -> Result<Self> {
        let out_dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| default_out.into(), PathBuf::from);
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
            Err(_) => 1,
        };
        Ok(RunOptions { out_dir, threads })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSet {
    pub name: String,
    pub kind: TestSetKind,
    pub corpus: ParallelCorpus,
}

/// Everything shared by the sparsity levels of one experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: Split,
    /// Training pairs after the regime is applied.
    pub train: ParallelCorpus,
    pub test_sets: Vec<TestSet>,
    pub bpe: MergeTable,
    /// Word frequencies of the training sources.
    pub train_vocab: FrequencyTable,
    pub train_ids: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let corpus = match (&cfg.data.synthetic, &cfg.data.train) {
        (Some(syn), _) => synthetic_reversal_corpus(syn)?,
        (None, Some(path)) => ParallelCorpus::load(path, cfg.data.train_target.as_deref())?,
        (None, None) => return Err(Error::Config("no training data configured".into())),
    };
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.provenance));
    }
    let full_table = token_frequencies(corpus.sources())?;
    let split = global_random_split(&corpus, &full_table, cfg.eval.n_global, cfg.eval.n_random, cfg.seed)?;
    let train = match cfg.regime {
        Regime::Full => split.train.clone(),
        Regime::Limited { sample } => subsample_limited(&split.train, sample, cfg.seed)?,
    };
    let bpe_source = match cfg.data.bpe_corpus {
        BpeCorpus::Full => &split.train,
        BpeCorpus::Limited => &train,
    };
    let bpe = learn_bpe(bpe_source.sources().chain(bpe_source.targets()), cfg.data.vocab_size)?;
    let train_vocab = token_frequencies(train.sources())?;
    let train_ids = train
        .pairs
        .iter()
        .map(|(s, t)| (bpe.encode(s), bpe.encode(t)))
        .collect();

    let mut test_sets = Vec::new();
    if !split.global.is_empty() {
        test_sets.push(TestSet {
            name: "global".into(),
            kind: TestSetKind::Global,
            corpus: split.global.clone(),
        });
    }
    test_sets.push(TestSet {
        name: "random".into(),
        kind: TestSetKind::Random,
        corpus: split.random.clone(),
    });
    for o in &cfg.ood {
        let corpus = ParallelCorpus::load(&o.path, o.target.as_deref())?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus(format!("OOD set {}", o.name)));
        }
        test_sets.push(TestSet {
            name: o.name.clone(),
            kind: TestSetKind::Ood,
            corpus,
        });
    }
    Ok(PreparedData {
        split,
        train,
        test_sets,
        bpe,
        train_vocab,
        train_ids,
    })
}

/// One test set's scores plus the detokenized hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub name: String,
    pub eval: TestSetEval,
    pub hypotheses: Vec<String>,
}

/// Translates every test set with the checkpoint and scores it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    bpe: &MergeTable,
    test_sets: &[TestSet],
    train_vocab: &FrequencyTable,
    settings: &EvalSection,
    seed: u64,
) -> Result<Vec<Evaluation>> {
    let model = &ckpt.meta.model;
    let max_len = settings.max_decode_len.unwrap_or(model.max_len);
    test_sets
        .iter()
        .map(|set| {
            let sources: Vec<Vec<usize>> = set.corpus.sources().map(|s| bpe.encode(s)).collect();
            let ids = if settings.beam == 1 {
                decode_greedy(model, &ckpt.params, &sources, max_len)?
            } else {
                sources
                    .iter()
                    .map(|s| decode_beam(model, &ckpt.params, s, settings.beam, max_len))
                    .collect::<Result<Vec<_>>>()?
            };
            let hypotheses: Vec<String> = ids.iter().map(|h| bpe.decode(h)).collect();
            let eval = score_test_set(set, &hypotheses, train_vocab, settings, seed)?;
            Ok(Evaluation {
                name: set.name.clone(),
                eval,
                hypotheses,
            })
        })
        .collect()
}

/// BLEU, word statistics, typicality buckets and subset variability of one
/// set of hypotheses.
pub fn score_test_set(
    set: &TestSet,
    hypotheses: &[String],
    train_vocab: &FrequencyTable,
    settings: &EvalSection,
    seed: u64,
) -> Result<TestSetEval> {
    let refs: Vec<&str> = set.corpus.targets().collect();
    let hyps: Vec<&str> = hypotheses.iter().map(String::as_str).collect();
    let stats = corpus_stats(&hyps, &refs)?;
    let bleu = bleu_of(stats.iter());
    let sources: Vec<&str> = set.corpus.sources().collect();
    let typ = sources
        .iter()
        .map(|s| sentence_typicality(s, train_vocab))
        .collect::<Result<Vec<_>>>()?;

    let k = settings.buckets;
    let buckets = if sources.len() >= k {
        let assign = typicality_buckets(&sources, train_vocab, k)?;
        (0..k)
            .map(|b| {
                let members: Vec<usize> = (0..sources.len()).filter(|&i| assign[i] == b).collect();
                Ok(BucketEval {
                    label: bucket_label(b, k),
                    sentences: members.len(),
                    mean_typicality: members.iter().map(|&i| typ[i]).sum::<f64>() / members.len() as f64,
                    avg_src_len: avg_length(members.iter().map(|&i| sources[i]))?,
                    bleu: bleu_of(members.iter().map(|&i| &stats[i])).score,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let sizes: Vec<usize> = settings
        .bootstrap_sizes
        .iter()
        .copied()
        .filter(|&n| n <= stats.len())
        .collect();
    let bootstrap = subset_variability_from_stats(&stats, &sizes, settings.bootstrap_repeats, seed)?;
    Ok(TestSetEval {
        kind: set.kind,
        sentences: sources.len(),
        bleu,
        oov_rate: oov_rate(sources.iter().copied(), train_vocab)?,
        avg_src_len: avg_length(sources.iter().copied())?,
        mean_typicality: typ.iter().sum::<f64>() / typ.len() as f64,
        buckets,
        bootstrap,
    })
}

fn bleu_of<'a>(stats: impl Iterator<Item = &'a BleuStats>) -> BleuReport {
    let mut total = BleuStats::default();
    for s in stats {
        total += *s;
    }
    BleuReport::from_stats(&total, Smoothing::None)
}

/// Trains one model to `end_sparsity` and returns it with its statistics.
pub fn train_model(cfg: &ExperimentConfig, data: &PreparedData, end_sparsity: f64) -> Result<(Checkpoint, ModelStats)> {
    let model = cfg.model_config()?;
    let train = cfg.train_config();
    let vocab = data.bpe.vocab_size();
    let params = build_model::<f32>(&model, vocab, cfg.seed)?;
    let schedule: Option<PruningSchedule> = cfg.pruning.schedule(train.total_steps, end_sparsity)?;
    let mut trainer = Trainer::new(model.clone(), train, vocab, params, schedule)?;
    let trace = trainer.fit(&data.train_ids)?;
    let steps = trainer.step();
    let (params, masks) = trainer.into_parts();
    let sr = sparsity_report(&params, &masks);
    let stats = ModelStats {
        steps,
        final_loss: trace.last().copied().unwrap_or(f32::NAN) as f64,
        total_params: sr.total_size(),
        nonzero_params: sr.total_nonzero(),
        prunable_params: sr.prunable_size,
        prunable_nonzero: sr.prunable_kept,
        prunable_nonzero_fraction: sr.global_nonzero_fraction(),
        schedule,
    };
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model,
            step: steps,
            seed: cfg.seed,
            end_sparsity,
        },
        params,
        masks,
    };
    Ok((ckpt, stats))
}

pub fn sparsity_tag(s: f64) -> String {
    format!("sparsity-{s:.4}")
}

pub fn checkpoint_path(out_dir: &Path, s: f64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{}.ckpt", sparsity_tag(s)))
}

pub fn decodes_path(out_dir: &Path, s: f64, testset: &str) -> PathBuf {
    out_dir.join("decodes").join(sparsity_tag(s)).join(format!("{testset}.txt"))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(path, text).map_err(io_at(path))
}

/// Trains, saves and evaluates one sparsity level.
fn run_level(cfg: &ExperimentConfig, data: &PreparedData, out_dir: &Path, s: f64) -> Vec<ReportRow> {
    let start = Instant::now();
    let base = |testset: String, status| ReportRow {
        config_hash: cfg.hash(),
        experiment: cfg.name.clone(),
        regime: cfg.regime.label(),
        sparsity: s,
        testset,
        status,
        model: None,
        eval: None,
        error: None,
        timestamp: 0,
        elapsed_secs: 0.0,
    };
    let attempt = || -> Result<(ModelStats, Vec<Evaluation>)> {
        let (ckpt, stats) = train_model(cfg, data, s)?;
        let path = checkpoint_path(out_dir, s);
        fs::create_dir_all(path.parent().unwrap()).map_err(io_at(&path))?;
        ckpt.save(&path)?;
        let evals = evaluate_checkpoint(&ckpt, &data.bpe, &data.test_sets, &data.train_vocab, &cfg.eval, cfg.seed)?;
        for e in &evals {
            let mut text = e.hypotheses.join("\n");
            text.push('\n');
            write_text(&decodes_path(out_dir, s, &e.name), &text)?;
        }
        Ok((stats, evals))
    };
    let result = attempt();
    let (elapsed, stamp) = (start.elapsed().as_secs_f64(), now());
    match result {
        Ok((stats, evals)) => evals
            .into_iter()
            .map(|e| ReportRow {
                model: Some(stats.clone()),
                eval: Some(e.eval),
                timestamp: stamp,
                elapsed_secs: elapsed,
                ..base(e.name, Status::Ok)
            })
            .collect(),
        Err(err) => vec![ReportRow {
            error: Some(Failure {
                kind: err.kind().into(),
                message: err.to_string(),
            }),
            timestamp: stamp,
            elapsed_secs: elapsed,
            ..base("-".into(), Status::Failed)
        }],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub report: PathBuf,
    /// Sparsity levels trained in this invocation.
    pub trained: Vec<f64>,
    /// Levels whose complete results were already on disk.
    pub resumed: Vec<f64>,
    pub failed: Vec<f64>,
    /// Every row of the report after the run, in config order.
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    model: crate::model::TransformerConfig,
    schedules: Vec<(f64, Option<PruningSchedule>)>,
    train_pairs: usize,
    vocab_size: usize,
}

/// Runs every sparsity level of `cfg`, writing checkpoints, decodes and a
/// JSON-lines report under `opts.out_dir`.
///
/// Levels whose rows (for this config hash) and checkpoint already exist
/// are kept and not retrained. A failing level is recorded as a single
/// failed row and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let data = prepare_data(cfg)?;
    data.bpe.save(out.join(BPE_FILE))?;
    for (name, c) in [("global", &data.split.global), ("random", &data.split.random), ("train", &data.train)] {
        fs::create_dir_all(out.join("splits")).map_err(io_at(out))?;
        c.save_tsv(out.join("splits").join(format!("{name}.tsv")))?;
    }
    let schedules = cfg
        .pruning
        .end_sparsity
        .iter()
        .map(|&s| Ok((s, cfg.pruning.schedule(cfg.train.steps, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let resolved = ResolvedConfig {
        config_hash: cfg.hash(),
        config: cfg,
        model: cfg.model_config()?,
        schedules,
        train_pairs: data.train.len(),
        vocab_size: data.bpe.vocab_size(),
    };
    write_text(&out.join("config.json"), &serde_json::to_string_pretty(&resolved)?)?;

    let report = out.join(REPORT_FILE);
    let hash = cfg.hash();
    let names: Vec<&str> = data.test_sets.iter().map(|t| t.name.as_str()).collect();
    let previous = if report.exists() { read_report(&report)? } else { Vec::new() };
    let complete = |s: f64| {
        let got: HashSet<&str> = previous
            .iter()
            .filter(|r| r.config_hash == hash && r.sparsity == s && r.status == Status::Ok)
            .map(|r| r.testset.as_str())
            .collect();
        names.iter().all(|n| got.contains(n)) && checkpoint_path(out, s).is_file()
    };
    let resumed: Vec<f64> = cfg.pruning.end_sparsity.iter().copied().filter(|&s| complete(s)).collect();
    let mut rows: Vec<ReportRow> = Vec::new();
    for &s in &resumed {
        for n in &names {
            let row = previous
                .iter()
                .find(|r| r.config_hash == hash && r.sparsity == s && r.status == Status::Ok && r.testset == *n)
                .expect("checked complete");
            rows.push(row.clone());
        }
    }
    let tmp = out.join(format!("{REPORT_FILE}.tmp"));
    let mut buf = Vec::new();
    write_rows(&rows, &mut buf)?;
    fs::write(&tmp, buf).map_err(io_at(&tmp))?;
    fs::rename(&tmp, &report).map_err(io_at(&report))?;

    let todo: Vec<f64> = cfg
        .pruning
        .end_sparsity
        .iter()
        .copied()
        .filter(|s| !resumed.contains(s))
        .collect();
    let mut failed = Vec::new();
    for chunk in todo.chunks(opts.threads.max(1)) {
        let results: Vec<Vec<ReportRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&s| {
                    let data = &data;
                    scope.spawn(move || run_level(cfg, data, out, s))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        let mut file = OpenOptions::new().append(true).open(&report).map_err(io_at(&report))?;
        for (level, level_rows) in chunk.iter().zip(results) {
            if level_rows.iter().any(|r| r.status == Status::Failed) {
                failed.push(*level);
            }
            write_rows(&level_rows, &mut file)?;
            rows.extend(level_rows);
        }
    }
    let order = |s: f64| cfg.pruning.end_sparsity.iter().position(|&x| x == s);
    rows.sort_by_key(|r| order(r.sparsity));
    Ok(RunSummary {
        report,
        trained: todo,
        resumed,
        failed,
        rows,
    })
}
