use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{OptimizerKind, TrainConfig, TransformerConfig};
use crate::pruning::PruningSchedule;

/// One experiment: a corpus, a model, and the sparsity levels to train.
///
/// Read from TOML. Unknown keys are rejected and `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ood: Vec<OodSet>,
    /// Digest of the config as written, before path resolution.
    #[serde(skip)]
    written_hash: Option<String>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// TSV file, or the source side when `train_target` is set.
    pub train: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    /// Generated reversal corpus instead of files.
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Which training data the subword vocabulary is learned on in the
    /// limited regime.
    #[serde(default)]
    pub bpe_corpus: BpeCorpus,
}

fn default_vocab() -> usize {
    4096
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BpeCorpus {
    #[default]
    Full,
    Limited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub filter: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
    pub label_smoothing: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "base".into(),
            layers: None,
            hidden: None,
            heads: None,
            filter: None,
            max_len: None,
            dropout: None,
            label_smoothing: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<TransformerConfig> {
        let mut c = TransformerConfig::preset(&self.preset)?;
        c.layers = self.layers.unwrap_or(c.layers);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.heads = self.heads.unwrap_or(c.heads);
        c.filter = self.filter.unwrap_or(c.filter);
        c.max_len = self.max_len.unwrap_or(c.max_len);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.label_smoothing = self.label_smoothing.unwrap_or(c.label_smoothing);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_tokens: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.total_steps,
            batch_tokens: t.batch_tokens,
            base_lr: t.base_lr,
            warmup: t.warmup_steps,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub end_sparsity: Vec<f64>,
    /// Unset fields fall back to [`PruningSchedule::scaled_default`].
    pub begin: Option<u64>,
    pub end: Option<u64>,
    pub frequency: Option<u64>,
    pub exponent: Option<f64>,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            end_sparsity: vec![0.0],
            begin: None,
            end: None,
            frequency: None,
            exponent: None,
        }
    }
}

impl PruningSection {
    /// Schedule for one end sparsity; `None` for the dense model.
    pub fn schedule(&self, total_steps: u64, end_sparsity: f64) -> Result<Option<PruningSchedule>> {
        if end_sparsity == 0.0 {
            return Ok(None);
        }
        let mut s = PruningSchedule::scaled_default(total_steps, end_sparsity)?;
        s.begin_step = self.begin.unwrap_or(s.begin_step);
        s.end_step = self.end.unwrap_or(s.end_step);
        s.frequency = self.frequency.unwrap_or(s.frequency);
        s.exponent = self.exponent.unwrap_or(s.exponent);
        s.validate()?;
        Ok(Some(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Regime {
    #[default]
    Full,
    Limited {
        sample: usize,
    },
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::Full => "full".into(),
            Regime::Limited { sample } => format!("limited-{sample}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_global: usize,
    pub n_random: usize,
    /// Sizes larger than a test set are skipped for that set.
    pub bootstrap_sizes: Vec<usize>,
    pub bootstrap_repeats: usize,
    pub buckets: usize,
    pub beam: usize,
    /// Cap on generated tokens; the model's `max_len` when unset.
    pub max_decode_len: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_global: 500,
            n_random: 500,
            bootstrap_sizes: vec![10, 25, 50, 100, 250, 500],
            bootstrap_repeats: 100,
            buckets: 3,
            beam: crate::model::DEFAULT_BEAM,
            max_decode_len: None,
        }
    }
}

/// An extra out-of-distribution test corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSet {
    pub name: String,
    pub path: PathBuf,
    pub target: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.written_hash = Some(cfg.hash());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let Some(p) = cfg.data.train.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.data.train_target.as_mut() {
            fix(p);
        }
        for o in &mut cfg.ood {
            fix(&mut o.path);
            if let Some(p) = o.target.as_mut() {
                fix(p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn model_config(&self) -> Result<TransformerConfig> {
        self.model.resolve()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_tokens: self.train.batch_tokens,
            base_lr: self.train.base_lr,
            warmup_steps: self.train.warmup,
            total_steps: self.train.steps,
            seed: self.seed,
            optimizer: self.train.optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.data.train, &self.data.synthetic) {
            (Some(_), Some(_)) => return bad("data.train and data.synthetic are mutually exclusive".into()),
            (None, None) => return bad("one of data.train or data.synthetic is required".into()),
            _ => {}
        }
        if self.data.train_target.is_some() && self.data.train.is_none() {
            return bad("data.train_target needs data.train".into());
        }
        let mut files: Vec<&Path> = self.data.train.iter().chain(&self.data.train_target).map(PathBuf::as_path).collect();
        for o in &self.ood {
            files.push(&o.path);
            files.extend(o.target.as_deref());
        }
        for f in files {
            if !f.is_file() {
                return bad(format!("file {} does not exist", f.display()));
            }
        }
        let mut names = HashSet::new();
        for o in &self.ood {
            if matches!(o.name.as_str(), "global" | "random") || o.name.is_empty() || !names.insert(&o.name) {
                return bad(format!("OOD set name {:?} is reserved, empty or repeated", o.name));
            }
        }
        if self.data.vocab_size < 8 {
            return bad(format!("vocab_size {} too small", self.data.vocab_size));
        }
        self.model_config()?;
        self.train_config().validate()?;
        if self.pruning.end_sparsity.is_empty() {
            return bad("pruning.end_sparsity is empty".into());
        }
        let mut seen = HashSet::new();
        for &s in &self.pruning.end_sparsity {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("sparsity {s} outside [0, 1)"));
            }
            if !seen.insert(s.to_bits()) {
                return bad(format!("sparsity {s} listed twice"));
            }
            self.pruning.schedule(self.train.steps, s)?;
        }
        if let Regime::Limited { sample: 0 } = self.regime {
            return bad("limited regime needs sample > 0".into());
        }
        let e = &self.eval;
        if e.n_random == 0 {
            return bad("eval.n_random must be positive".into());
        }
        if e.bootstrap_repeats < 2 || e.buckets < 2 || e.beam == 0 {
            return bad("eval needs bootstrap_repeats >= 2, buckets >= 2 and beam >= 1".into());
        }
        if e.bootstrap_sizes.contains(&0) {
            return bad("bootstrap sizes must be positive".into());
        }
        if e.max_decode_len == Some(0) {
            return bad("eval.max_decode_len must be positive".into());
        }
        Ok(())
    }

    /// Short hex digest of the config; tags every report row. Configs read
    /// from a file hash their paths as written.
    pub fn hash(&self) -> String {
        if let Some(h) = &self.written_hash {
            return h.clone();
        }
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
