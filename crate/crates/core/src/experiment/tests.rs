use std::fs;
use std::path::Path;

use super::*;
use crate::analytics::VariabilityRow;
use crate::bleu::BleuReport;
use crate::error::Error;
use crate::model::Checkpoint;

fn micro_toml(extra: &str) -> String {
    format!(
        r#"
name = "micro"
seed = 5

[data]
vocab_size = 40
synthetic = {{ pairs = 300, vocab = 12, min_len = 2, max_len = 5, seed = 2 }}

[model]
preset = "tiny"
layers = 1
hidden = 16
heads = 2
filter = 32
max_len = 16
dropout = 0.0

[train]
steps = 20
batch_tokens = 64
base_lr = 1.0
warmup = 5

[eval]
n_global = 20
n_random = 30
bootstrap_sizes = [5, 10, 1000]
bootstrap_repeats = 5
beam = 1
{extra}
"#
    )
}

fn parse(text: &str) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::from_toml(text, Path::new("."))
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: dir.to_path_buf(),
        threads: 1,
    }
}

#[test]
fn parses_defaults_and_overrides() {
    let cfg = parse(&micro_toml("")).unwrap();
    assert_eq!(cfg.pruning.end_sparsity, [0.0]);
    assert_eq!(cfg.regime, Regime::Full);
    let m = cfg.model_config().unwrap();
    assert_eq!((m.layers, m.hidden, m.heads, m.max_len), (1, 16, 2, 16));
    assert_eq!(cfg.train_config().seed, 5);
    assert_eq!(cfg.hash().len(), 16);
    assert_eq!(cfg.hash(), parse(&micro_toml("")).unwrap().hash());
    assert_ne!(cfg.hash(), parse(&micro_toml("").replace("seed = 5", "seed = 6")).unwrap().hash());
}

#[test]
fn rejects_bad_configs() {
    let unknown = micro_toml("").replace("[train]\n", "[train]\nstepz = 3\n");
    assert!(matches!(parse(&unknown), Err(Error::Config(_))));
    let no_seed = micro_toml("").replace("seed = 5\n", "");
    assert!(parse(&no_seed).is_err());
    assert!(parse(&micro_toml("[pruning]\nend_sparsity = [0.0, 1.0]")).is_err());
    assert!(parse(&micro_toml("[pruning]\nend_sparsity = [0.5, 0.5]")).is_err());
    assert!(parse(&micro_toml("[regime]\nkind = \"limited\"\nsample = 0")).is_err());
    assert!(parse(&micro_toml("[regime]\nkind = \"limited\"\nsample = 5\nsize = 3")).is_err());
    let missing = micro_toml("").replace("synthetic = {", "train = \"/nonexistent.tsv\"\nsynthetic = {");
    assert!(parse(&missing).is_err());
    let ood = micro_toml("[[ood]]\nname = \"x\"\npath = \"/nonexistent.tsv\"");
    assert!(parse(&ood).is_err());
}

#[test]
fn relative_paths_follow_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.tsv"), "a b\tb a\n").unwrap();
    fs::write(dir.path().join("ood.tsv"), "a\ta\n").unwrap();
    let text = micro_toml("[[ood]]\nname = \"web\"\npath = \"ood.tsv\"").replace(
        "synthetic = { pairs = 300, vocab = 12, min_len = 2, max_len = 5, seed = 2 }",
        "train = \"train.tsv\"",
    );
    let path = dir.path().join("exp.toml");
    fs::write(&path, &text).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.data.train.as_deref(), Some(dir.path().join("train.tsv").as_path()));
    assert_eq!(cfg.ood[0].path, dir.path().join("ood.tsv"));
}

#[test]
fn schedules_scale_with_steps() {
    let cfg = parse(&micro_toml("[pruning]\nend_sparsity = [0.0, 0.9]\nfrequency = 2")).unwrap();
    assert_eq!(cfg.pruning.schedule(20, 0.0).unwrap(), None);
    let s = cfg.pruning.schedule(3000, 0.9).unwrap().unwrap();
    assert_eq!((s.begin_step, s.frequency, s.end_sparsity), (90, 2, 0.9));
    assert_eq!(s.end_step, 90 + 20 * 100);
}

#[test]
fn dense_only_run_has_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&micro_toml("")).unwrap();
    let sum = run_experiment(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(sum.trained, [0.0]);
    // global + random
    assert_eq!(sum.rows.len(), 2);
    let m = sum.rows[0].model.as_ref().unwrap();
    assert_eq!(m.prunable_nonzero_fraction, 1.0);
    assert!(m.schedule.is_none());
    assert_eq!(m.steps, 20);
    let global = sum.rows[0].eval.as_ref().unwrap();
    assert_eq!(global.sentences, 20);
    assert_eq!(global.buckets.len(), 3);
    assert_eq!(global.bootstrap.iter().map(|b| b.size).collect::<Vec<_>>(), [5, 10]);
    assert_eq!(read_report(&sum.report).unwrap(), sum.rows);
    for f in ["bpe.txt", "config.json", "splits/train.tsv", "checkpoints/sparsity-0.0000.ckpt", "decodes/sparsity-0.0000/random.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let decodes = fs::read_to_string(decodes_path(dir.path(), 0.0, "random")).unwrap();
    assert_eq!(decodes.lines().count(), 30);
}

#[test]
fn pruned_levels_resume_and_repeat_exactly() {
    let text = micro_toml("[pruning]\nend_sparsity = [0.0, 0.5]");
    let cfg = parse(&text).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_experiment(&cfg, &opts(a.path())).unwrap();
    assert_eq!(first.rows.len(), 4);
    let half = first.rows[2].model.as_ref().unwrap();
    assert!((half.prunable_nonzero_fraction - 0.5).abs() < 0.005);
    assert!(half.schedule.is_some());

    let threaded = RunOptions {
        threads: 2,
        ..opts(b.path())
    };
    run_experiment(&cfg, &threaded).unwrap();
    let read = |d: &Path| strip_timing(&fs::read_to_string(d.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(read(a.path()), read(b.path()));

    let again = run_experiment(&cfg, &opts(a.path())).unwrap();
    assert!(again.trained.is_empty());
    assert_eq!(again.resumed, [0.0, 0.5]);
    assert_eq!(read(a.path()).len(), 4);

    fs::remove_file(checkpoint_path(a.path(), 0.5)).unwrap();
    let partial = run_experiment(&cfg, &opts(a.path())).unwrap();
    assert_eq!((partial.resumed.as_slice(), partial.trained.as_slice()), (&[0.0][..], &[0.5][..]));
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn failures_are_recorded_per_level() {
    let text = micro_toml("[pruning]\nend_sparsity = [0.0, 0.5]").replace("base_lr = 1.0", "base_lr = 1e30");
    let cfg = parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sum = run_experiment(&cfg, &opts(dir.path())).unwrap();
    assert_eq!(sum.failed, [0.0, 0.5]);
    assert_eq!(sum.rows.len(), 2);
    for r in &sum.rows {
        assert_eq!((r.status, r.testset.as_str()), (Status::Failed, "-"));
        assert_eq!(r.error.as_ref().unwrap().kind, "non_finite_loss");
    }
}

#[test]
fn checkpoint_reload_gives_same_evaluation() {
    let cfg = parse(&micro_toml("")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sum = run_experiment(&cfg, &opts(dir.path())).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let ckpt = Checkpoint::load(checkpoint_path(dir.path(), 0.0)).unwrap();
    let evals = evaluate_checkpoint(&ckpt, &data.bpe, &data.test_sets, &data.train_vocab, &cfg.eval, cfg.seed).unwrap();
    for (e, row) in evals.iter().zip(&sum.rows) {
        assert_eq!(Some(&e.eval), row.eval.as_ref());
    }
    let twice = evaluate_checkpoint(&ckpt, &data.bpe, &data.test_sets, &data.train_vocab, &cfg.eval, cfg.seed).unwrap();
    assert_eq!(evals, twice);
    assert!(evals.iter().all(|e| e.eval.kind != TestSetKind::Ood));
}

#[test]
fn ood_sets_and_limited_regime() {
    let dir = tempfile::tempdir().unwrap();
    let ood = dir.path().join("ood.tsv");
    let words = (0..12).map(crate::analytics::synthetic_word).collect::<Vec<_>>();
    let lines: String = (0..15).map(|i| format!("{} qq {}\t{} qq {}\n", words[i % 12], words[(i + 1) % 12], words[(i + 1) % 12], words[i % 12])).collect();
    fs::write(&ood, lines).unwrap();
    let text = micro_toml(&format!(
        "[regime]\nkind = \"limited\"\nsample = 100\n\n[[ood]]\nname = \"shifted\"\npath = \"{}\"",
        ood.display()
    ));
    let cfg = parse(&text).unwrap();
    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.train.len(), 100);
    let names: Vec<&str> = data.test_sets.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["global", "random", "shifted"]);
    let sum = run_experiment(&cfg, &opts(&dir.path().join("out"))).unwrap();
    let shifted = sum.rows[2].eval.as_ref().unwrap();
    assert_eq!(shifted.kind, TestSetKind::Ood);
    assert!((shifted.oov_rate - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(sum.rows[0].regime, "limited-100");
    let csv = emit_plot_data(&sum.rows, PlotKind::Ood).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

fn fake_row(testset: &str, sparsity: f64, bleu: f64) -> ReportRow {
    let report = BleuReport {
        score: bleu,
        precisions: [0.5; 4],
        brevity_penalty: 1.0,
        hyp_len: 10,
        ref_len: 10,
    };
    ReportRow {
        config_hash: "h".into(),
        experiment: "e".into(),
        regime: "full".into(),
        sparsity,
        testset: testset.into(),
        status: Status::Ok,
        model: None,
        eval: Some(TestSetEval {
            kind: if testset == "global" { TestSetKind::Global } else { TestSetKind::Random },
            sentences: 10,
            bleu: report,
            oov_rate: 0.0,
            avg_src_len: 3.0,
            mean_typicality: 1.0,
            buckets: vec![],
            bootstrap: vec![VariabilityRow {
                size: 5,
                repeats: 3,
                mean_bleu: 12.5,
                std_bleu: 0.25,
            }],
        }),
        error: None,
        timestamp: 0,
        elapsed_secs: 0.0,
    }
}

#[test]
fn plot_data_shapes() {
    let rows: Vec<ReportRow> = [0.0, 0.5, 0.9]
        .iter()
        .flat_map(|&s| [fake_row("global", s, 40.0 * (1.0 - s / 2.0)), fake_row("random", s, 20.0 * (1.0 - s))])
        .collect();
    let abs = emit_plot_data(&rows, PlotKind::Absolute).unwrap();
    assert_eq!(abs.lines().count(), 1 + 2 * 3);
    assert_eq!(abs.lines().next().unwrap(), "corpus,sparsity,metric,value");
    let rel = emit_plot_data(&rows, PlotKind::Relative).unwrap();
    let dense: Vec<&str> = rel.lines().filter(|l| l.contains(",0.0,")).collect();
    assert_eq!(dense, ["global,0.0,relative_bleu,1.0", "random,0.0,relative_bleu,1.0"]);
    assert!(rel.contains("global,0.5,relative_bleu,0.75"));
    let boot = emit_plot_data(&rows, PlotKind::Bootstrap).unwrap();
    assert_eq!(boot.lines().next().unwrap(), "corpus,sparsity,size,repeats,mean_bleu,std_bleu");
    assert!(boot.contains("global,0.0,5,3,12.5,0.25"));
    assert!(emit_plot_data(&rows, PlotKind::Ood).is_err());
    assert!(emit_plot_data(&rows, PlotKind::Typicality).is_err());

    let mut zero = rows.clone();
    zero[1] = fake_row("random", 0.0, 0.0);
    let rel = emit_plot_data(&zero, PlotKind::Relative).unwrap();
    assert!(!rel.contains("random"));
    assert_eq!("relative".parse::<PlotKind>().unwrap(), PlotKind::Relative);
    assert!("bogus".parse::<PlotKind>().is_err());
}
