//! Run configuration: a TOML file merged with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cmow_core::embeddings::{EmbeddingKind, DEFAULT_SIGMA_INIT};
use cmow_core::heads::HeadVariant;
use cmow_core::linalg::Precision;
use cmow_core::tokenizer::DEFAULT_MAX_LEN;
use cmow_core::training::{PairEncoding, TrainConfig};
use cmow_core::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: EmbeddingKind,
    pub d: usize,
    pub d_vec: usize,
    pub sigma_init: f64,
    pub head: HeadVariant,
    /// MLP hidden width; the head input width when unset.
    pub hidden: Option<usize>,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::HybridBidirectional,
            d: 20,
            d_vec: 400,
            sigma_init: DEFAULT_SIGMA_INIT,
            head: HeadVariant::Mlp,
            hidden: None,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Held-out corpus for pretraining model selection. Without it the last
    /// tenth of the corpus lines is held out.
    pub dev_corpus: Option<PathBuf>,
    /// Seed of the static corpus masking; must match teacher records.
    pub mask_seed: u64,
    /// Task description (TOML `TaskSpec`).
    pub task: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
}

/// Where embeddings start from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum InitSource {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

impl FromStr for InitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::config("empty --init value")),
            "random" => Ok(InitSource::Random),
            path => Ok(InitSource::Checkpoint(PathBuf::from(path))),
        }
    }
}

impl fmt::Display for InitSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSource::Random => f.write_str("random"),
            InitSource::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for InitSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Worker threads; rayon's default when unset.
    pub threads: Option<usize>,
    pub init: InitSource,
    pub teacher: Option<PathBuf>,
    pub encoding: PairEncoding,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("run"),
            threads: None,
            init: InitSource::Random,
            teacher: None,
            encoding: PairEncoding::DiffCat,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub encoding: Option<PairEncoding>,
    pub init: Option<InitSource>,
    pub teacher: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Reads `path`; relative paths inside it are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let file = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = absolute(base, p);
        fix(&mut self.out);
        if let InitSource::Checkpoint(p) = &mut self.init {
            fix(p);
        }
        for p in [
            &mut self.teacher,
            &mut self.data.vocab,
            &mut self.data.corpus,
            &mut self.data.dev_corpus,
            &mut self.data.task,
            &mut self.data.train,
            &mut self.data.dev,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Applies flags; their relative paths are taken from the working
    /// directory.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let abs = |p: &PathBuf| absolute(&cwd, p);
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.threads {
            self.threads = Some(v);
        }
        if let Some(v) = o.precision {
            self.train.precision = v;
        }
        if let Some(v) = o.alpha {
            self.train.alpha = v;
        }
        if let Some(v) = o.temperature {
            self.train.temperature = v;
        }
        if let Some(v) = o.encoding {
            self.encoding = v;
        }
        if let Some(v) = &o.init {
            self.init = match v {
                InitSource::Random => InitSource::Random,
                InitSource::Checkpoint(p) => InitSource::Checkpoint(abs(p)),
            };
        }
        if let Some(v) = &o.teacher {
            self.teacher = Some(abs(v));
        }
        if let Some(v) = &o.out {
            self.out = abs(v);
        }
        for (slot, v) in [
            (&mut self.data.vocab, &o.vocab),
            (&mut self.data.corpus, &o.corpus),
            (&mut self.data.task, &o.task),
            (&mut self.data.train, &o.train),
            (&mut self.data.dev, &o.dev),
        ] {
            if let Some(p) = v {
                *slot = Some(abs(p));
            }
        }
        if !self.out.is_absolute() {
            self.out = abs(&self.out);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.kind.validate_dims(self.model.d, self.model.d_vec)?;
        if self.model.max_len < 3 {
            return Err(Error::config(format!("max_len must be at least 3, got {}", self.model.max_len)));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Creates the output directory and writes the resolved config into it.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Unwraps a required path and checks that it exists.
pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::config(format!("no {what} given")))?;
    if !p.exists() {
        return Err(Error::config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.clone())
}
