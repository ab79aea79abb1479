use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sparsenmt::analytics::{
    self, avg_length, global_random_split, oov_rate, sentence_typicality, synthetic_reversal_corpus,
    token_frequencies, typicality_buckets, ParallelCorpus, SyntheticConfig,
};
use sparsenmt::bleu::{self, Smoothing};
use sparsenmt::experiment::{
    self, emit_plot_data, read_ratings_csv, read_report, score_test_set, EvalSection, ExperimentConfig, PlotKind,
    RunOptions, TestSet, TestSetKind,
};
use sparsenmt::model::{decode_beam, decode_greedy, Checkpoint};
use sparsenmt::sparse::{benchmark_suite, sparse_decode, write_bench_csv};
use sparsenmt::tokenizer::{learn_bpe, MergeTable};
use sparsenmt::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsenmt", version, about = "Train, prune and evaluate small translation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a subword merge table from plain-text files.
    LearnBpe {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        vocab: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run every sparsity level of an experiment config.
    Train {
        config: PathBuf,
        /// Defaults to `runs/<name>`; SPARSENMT_OUT_DIR applies when unset.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Translate a test corpus with a checkpoint and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        /// TSV, or the source side when --target is given.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Training corpus, for OOV and typicality statistics.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        train_target: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Greedy decoding through CSR kernels.
        #[arg(long, conflicts_with = "beam")]
        sparse: bool,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the hypotheses here, one per line.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Word-level statistics of a test corpus against a training corpus.
    Analyze {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        train_target: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        test_target: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        buckets: usize,
    },
    /// Hold out Global (most typical) and Random test sets.
    Split {
        corpus: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        n_global: usize,
        #[arg(long, default_value_t = 500)]
        n_random: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Corpus BLEU of a hypothesis file, or per-line smoothed scores.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        sentence: bool,
    },
    /// Spread of BLEU over random test subsets of each size.
    Bootstrap {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,100,250,500")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Aggregate human ratings from `item_id,system,rater_id,rating` CSV.
    Ratings { input: PathBuf },
    /// Time dense against CSR mat-vec.
    Bench {
        /// Comma-separated `ROWSxCOLS`.
        #[arg(long, value_delimiter = ',', default_value = "512x512,512x2048")]
        shapes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.9,0.98")]
        sparsities: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plot-ready CSV from a run report.
    Report {
        report: PathBuf,
        /// absolute, relative, ood, bootstrap or typicality
        #[arg(long)]
        kind: PlotKind,
    },
    /// Write a synthetic word-reversal corpus as TSV.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 60)]
        vocab: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn stdout_text(s: &str) -> Result<()> {
    io::stdout().write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    stdout_text(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("shape {s:?} is not ROWSxCOLS"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    let dims = (r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?);
    if dims.0 == 0 || dims.1 == 0 {
        return Err(bad());
    }
    Ok(dims)
}

fn load_pair(source: &Path, target: Option<&PathBuf>) -> Result<ParallelCorpus> {
    ParallelCorpus::load(source, target.map(PathBuf::as_path))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::LearnBpe { inputs, vocab, out } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(bleu::read_lines(p)?);
            }
            let table = learn_bpe(lines.iter().map(String::as_str), vocab)?;
            table.save(&out)?;
            print_json(&json!({ "vocab_size": table.vocab_size(), "merges": table.merges().len() }))
        }
        Command::Train { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut opts = RunOptions::from_env(Path::new("runs").join(&cfg.name))?;
            if let Some(d) = out_dir {
                opts.out_dir = d;
            }
            let summary = experiment::run_experiment(&cfg, &opts)?;
            print_json(&json!({
                "config_hash": cfg.hash(),
                "report": summary.report,
                "trained": summary.trained,
                "resumed": summary.resumed,
                "failed": summary.failed,
            }))
        }
        Command::Evaluate {
            checkpoint,
            bpe,
            test,
            target,
            train,
            train_target,
            beam,
            sparse,
            max_len,
            seed,
            hyp_out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bpe = MergeTable::load(&bpe)?;
            let corpus = load_pair(&test, target.as_ref())?;
            let train = load_pair(&train, train_target.as_ref())?;
            let vocab = token_frequencies(train.sources())?;
            let model = &ckpt.meta.model;
            let max_len = max_len.unwrap_or(model.max_len);
            let sources: Vec<Vec<usize>> = corpus.sources().map(|s| bpe.encode(s)).collect();
            let ids = if sparse {
                sparse_decode(model, &ckpt.params, &ckpt.masks, &sources, max_len)?
            } else if beam <= 1 {
                decode_greedy(model, &ckpt.params, &sources, max_len)?
            } else {
                sources
                    .iter()
                    .map(|s| decode_beam(model, &ckpt.params, s, beam, max_len))
                    .collect::<Result<Vec<_>>>()?
            };
            let hyps: Vec<String> = ids.iter().map(|h| bpe.decode(h)).collect();
            if let Some(p) = hyp_out {
                let mut text = hyps.join("\n");
                text.push('\n');
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            let set = TestSet {
                name: test.display().to_string(),
                kind: TestSetKind::Ood,
                corpus,
            };
            let settings = EvalSection {
                beam: beam.max(1),
                max_decode_len: Some(max_len),
                ..EvalSection::default()
            };
            print_json(&score_test_set(&set, &hyps, &vocab, &settings, seed)?)
        }
        Command::Analyze {
            train,
            train_target,
            test,
            test_target,
            buckets,
        } => {
            let train = load_pair(&train, train_target.as_ref())?;
            let test = load_pair(&test, test_target.as_ref())?;
            let table = token_frequencies(train.sources())?;
            let sources: Vec<&str> = test.sources().collect();
            let typ = sources
                .iter()
                .map(|s| sentence_typicality(s, &table))
                .collect::<Result<Vec<_>>>()?;
            let assign = typicality_buckets(&sources, &table, buckets)?;
            let per_bucket: Vec<_> = (0..buckets)
                .map(|b| {
                    let members: Vec<usize> = (0..sources.len()).filter(|&i| assign[i] == b).collect();
                    json!({
                        "label": analytics::bucket_label(b, buckets),
                        "sentences": members.len(),
                        "mean_typicality": members.iter().map(|&i| typ[i]).sum::<f64>() / members.len() as f64,
                    })
                })
                .collect();
            print_json(&json!({
                "sentences": sources.len(),
                "oov_rate": oov_rate(sources.iter().copied(), &table)?,
                "avg_src_len": avg_length(sources.iter().copied())?,
                "mean_typicality": typ.iter().sum::<f64>() / typ.len() as f64,
                "train_zipf_slope": table.zipf_slope(),
                "buckets": per_bucket,
            }))
        }
        Command::Split {
            corpus,
            target,
            n_global,
            n_random,
            seed,
            out_dir,
        } => {
            let corpus = load_pair(&corpus, target.as_ref())?;
            let table = token_frequencies(corpus.sources())?;
            let split = global_random_split(&corpus, &table, n_global, n_random, seed)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (name, part) in [("global", &split.global), ("random", &split.random), ("train", &split.train)] {
                part.save_tsv(out_dir.join(format!("{name}.tsv")))?;
            }
            print_json(&json!({
                "global": split.global.len(),
                "random": split.random.len(),
                "train": split.train.len(),
            }))
        }
        Command::Bleu {
            hyp,
            reference,
            sentence,
        } => {
            let hyps = bleu::read_lines(&hyp)?;
            let refs = bleu::read_lines(&reference)?;
            if sentence {
                bleu::corpus_stats(&hyps, &refs)?;
                let scores: Vec<f64> = hyps
                    .iter()
                    .zip(&refs)
                    .map(|(h, r)| bleu::sentence_bleu(h, r, Smoothing::Exp))
                    .collect();
                print_json(&scores)
            } else {
                print_json(&bleu::corpus_bleu(&hyps, &refs)?)
            }
        }
        Command::Bootstrap {
            hyp,
            reference,
            sizes,
            repeats,
            seed,
        } => {
            let hyps = bleu::read_lines(&hyp)?;
            let refs = bleu::read_lines(&reference)?;
            let rows = analytics::bleu_subset_variability(&hyps, &refs, &sizes, repeats, seed)?;
            analytics::write_variability_csv(&rows, io::stdout().lock())
        }
        Command::Ratings { input } => {
            let file = fs::File::open(&input).map_err(|e| Error::io(&input, e))?;
            let records = read_ratings_csv(file)?;
            print_json(&experiment::aggregate_ratings(&records)?)
        }
        Command::Bench {
            shapes,
            sparsities,
            repeats,
            seed,
        } => {
            let shapes = shapes.iter().map(|s| parse_shape(s)).collect::<Result<Vec<_>>>()?;
            let rows = benchmark_suite(&shapes, &sparsities, repeats, seed)?;
            write_bench_csv(&rows, io::stdout().lock())
        }
        Command::Report { report, kind } => {
            let rows = read_report(&report)?;
            stdout_text(&emit_plot_data(&rows, kind)?)
        }
        Command::Synth { pairs, vocab, seed, out } => {
            let cfg = SyntheticConfig {
                pairs,
                vocab,
                seed,
                ..SyntheticConfig::default()
            };
            let corpus = synthetic_reversal_corpus(&cfg)?;
            corpus.save_tsv(&out)?;
            print_json(&json!({ "pairs": corpus.len() }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "kind": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
