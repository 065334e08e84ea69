//! `key = value` run configuration with `[section]` headers.
//!
//! Precedence, lowest first: built-in defaults, the `model.preset` choice,
//! the config file, then command-line overrides (`section.key=value`, or a
//! bare key when it is unique across sections).

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pricon::data::{BinariseConfig, CorpusStyle, GeneratorConfig, PreprocessConfig, ThresholdMode};
use pricon::eval::{CellRole, ExperimentConfig, Scheme};
use pricon::losses::{Reduction, SclConfig};
use pricon::models::{DEFAULT_DROPOUT, TEACHER_HIDDEN};
use pricon::train::OptimConfig;

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Override(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Override(i) => write!(f, "override #{i}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {msg}")]
    Syntax { origin: Origin, msg: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: Origin, key: String },
    #[error("{origin}: key {key:?} is ambiguous, use one of {candidates}")]
    Ambiguous {
        origin: Origin,
        key: String,
        candidates: String,
    },
    #[error("{origin}: invalid value {value:?} for {key}: {msg}")]
    BadValue {
        origin: Origin,
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 16×16 frames, 32-unit embedding.
    Desk,
    /// 224×224 frames, 768-unit embedding; for shape audits.
    Paper,
}

/// `train` command settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub role: CellRole,
    pub scheme: Scheme,
    /// α for a student; `None` searches the grid.
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// Existing corpus directory; a corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub step_s: Option<f64>,
    pub window_lengths: Vec<f64>,
    pub epsilon: Option<f64>,
    pub threshold: Option<ThresholdMode>,
    pub shift_s: Option<f64>,
    pub normalize: Option<bool>,
    pub preset: Preset,
    pub embed_dim: usize,
    pub teacher_hidden: usize,
    pub dropout: f64,
    pub opt: OptimConfig,
    pub scl: SclConfig,
    pub alphas: Vec<f64>,
    pub k: usize,
    pub val_frac: f64,
    pub tune_alpha_per_window: bool,
    pub teachers: Vec<CellRole>,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            workers: 0,
            corpus: None,
            generator: GeneratorConfig::desk(CorpusStyle::RecolaLike),
            step_s: None,
            window_lengths: vec![1.0, 2.0, 3.0],
            epsilon: None,
            threshold: None,
            shift_s: None,
            normalize: None,
            preset: Preset::Desk,
            embed_dim: 32,
            teacher_hidden: TEACHER_HIDDEN,
            dropout: DEFAULT_DROPOUT,
            opt: OptimConfig::default(),
            scl: SclConfig::default(),
            alphas: vec![0.25, 0.5, 0.75, 1.0],
            k: 5,
            val_frac: 0.1,
            tune_alpha_per_window: false,
            teachers: vec![CellRole::Tp, CellRole::Tf],
            train: TrainSettings {
                role: CellRole::E,
                scheme: Scheme::Lupi,
                alpha: None,
            },
        }
    }
}

/// Every accepted key as (section, key).
pub const KEYS: &[(&str, &str)] = &[
    ("run", "seed"),
    ("run", "out"),
    ("run", "workers"),
    ("data", "corpus"),
    ("generator", "style"),
    ("generator", "dimension"),
    ("generator", "participants"),
    ("generator", "duration_s"),
    ("generator", "fps"),
    ("generator", "feature_rate"),
    ("generator", "image_size"),
    ("generator", "n_features"),
    ("generator", "annotators"),
    ("generator", "frame_noise"),
    ("generator", "frame_signal"),
    ("generator", "feature_noise"),
    ("generator", "annotator_noise"),
    ("generator", "reaction_lag_s"),
    ("preprocess", "step_s"),
    ("preprocess", "len_s"),
    ("preprocess", "epsilon"),
    ("preprocess", "mode"),
    ("preprocess", "shift_s"),
    ("preprocess", "normalize"),
    ("model", "preset"),
    ("model", "embed_dim"),
    ("model", "teacher_hidden"),
    ("model", "dropout"),
    ("optim", "learning_rate"),
    ("optim", "beta1"),
    ("optim", "beta2"),
    ("optim", "eps"),
    ("optim", "batch_size"),
    ("optim", "max_epochs"),
    ("optim", "patience"),
    ("scl", "temperature"),
    ("scl", "normalize_embeddings"),
    ("scl", "projection_dim"),
    ("eval", "alphas"),
    ("eval", "k"),
    ("eval", "val_frac"),
    ("eval", "tune_alpha_per_window"),
    ("eval", "teachers"),
    ("train", "role"),
    ("train", "scheme"),
    ("train", "alpha"),
];

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

fn parse_mode(v: &str) -> Result<Option<ThresholdMode>, String> {
    match v {
        "auto" => Ok(None),
        "global-median" => Ok(Some(ThresholdMode::GlobalMedian)),
        "session-mean" => Ok(Some(ThresholdMode::SessionMean)),
        _ => Err("expected global-median, session-mean or auto".into()),
    }
}

fn mode_name(m: Option<ThresholdMode>) -> &'static str {
    match m {
        None => "auto",
        Some(ThresholdMode::GlobalMedian) => "global-median",
        Some(ThresholdMode::SessionMean) => "session-mean",
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_str<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_else(|| none.to_string())
}

impl RunConfig {
    fn apply_preset(&mut self, preset: Preset) {
        self.preset = preset;
        match preset {
            Preset::Desk => {
                self.generator.image_size = 16;
                self.embed_dim = 32;
            }
            Preset::Paper => {
                self.generator.image_size = 224;
                self.embed_dim = 768;
            }
        }
    }

    /// Assigns one fully qualified key.
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let g = &mut self.generator;
        match key {
            "run.seed" => self.seed = parse_num(v)?,
            "run.out" => self.out = Some(v).filter(|s| !s.is_empty() && *s != "auto").map(PathBuf::from),
            "run.workers" => self.workers = parse_num(v)?,
            "data.corpus" => self.corpus = Some(v).filter(|s| !s.is_empty() && *s != "none").map(PathBuf::from),
            "generator.style" => g.style = v.parse()?,
            "generator.dimension" => g.dimension = v.parse()?,
            "generator.participants" => g.participants = parse_num(v)?,
            "generator.duration_s" => g.duration_s = parse_num(v)?,
            "generator.fps" => g.fps = parse_num(v)?,
            "generator.feature_rate" => g.feature_rate = parse_num(v)?,
            "generator.image_size" => g.image_size = parse_num(v)?,
            "generator.n_features" => g.n_features = parse_num(v)?,
            "generator.annotators" => g.annotators = parse_opt(v)?,
            "generator.frame_noise" => g.frame_noise = parse_num(v)?,
            "generator.frame_signal" => g.frame_signal = parse_num(v)?,
            "generator.feature_noise" => g.feature_noise = parse_num(v)?,
            "generator.annotator_noise" => g.annotator_noise = parse_num(v)?,
            "generator.reaction_lag_s" => g.reaction_lag_s = parse_num(v)?,
            "preprocess.step_s" => self.step_s = parse_opt(v)?,
            "preprocess.len_s" => self.window_lengths = parse_list(v)?,
            "preprocess.epsilon" => self.epsilon = parse_opt(v)?,
            "preprocess.mode" => self.threshold = parse_mode(v)?,
            "preprocess.shift_s" => self.shift_s = parse_opt(v)?,
            "preprocess.normalize" => {
                self.normalize = if v == "auto" { None } else { Some(parse_bool(v)?) }
            }
            "model.preset" => {
                // consumed before the other keys; see `resolve`
                preset_from(v)?;
            }
            "model.embed_dim" => self.embed_dim = parse_num(v)?,
            "model.teacher_hidden" => self.teacher_hidden = parse_num(v)?,
            "model.dropout" => self.dropout = parse_num(v)?,
            "optim.learning_rate" => self.opt.learning_rate = parse_num(v)?,
            "optim.beta1" => self.opt.beta1 = parse_num(v)?,
            "optim.beta2" => self.opt.beta2 = parse_num(v)?,
            "optim.eps" => self.opt.eps = parse_num(v)?,
            "optim.batch_size" => self.opt.batch_size = parse_num(v)?,
            "optim.max_epochs" => self.opt.max_epochs = parse_num(v)?,
            "optim.patience" => self.opt.patience = parse_num(v)?,
            "scl.temperature" => self.scl.temperature = parse_num(v)?,
            "scl.normalize_embeddings" => self.scl.normalize_embeddings = parse_bool(v)?,
            "scl.projection_dim" => self.scl.projection_dim = parse_opt(v)?,
            "eval.alphas" => self.alphas = parse_list(v)?,
            "eval.k" => self.k = parse_num(v)?,
            "eval.val_frac" => self.val_frac = parse_num(v)?,
            "eval.tune_alpha_per_window" => self.tune_alpha_per_window = parse_bool(v)?,
            "eval.teachers" => {
                self.teachers = v
                    .split(',')
                    .map(str::trim)
                    .map(|s| s.parse::<CellRole>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "train.role" => self.train.role = v.parse().map_err(|e: pricon::Error| e.to_string())?,
            "train.scheme" => self.train.scheme = v.parse().map_err(|e: pricon::Error| e.to_string())?,
            "train.alpha" => self.train.alpha = parse_opt(v)?,
            _ => unreachable!("key table and setter disagree on {key}"),
        }
        Ok(())
    }

    /// The configuration as a config file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let mut out = String::new();
        let mut section = "";
        let mut put = |s: &'static str, k: &str, v: String| {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{s}]").unwrap();
                section = s;
            }
            writeln!(out, "{k} = {v}").unwrap();
        };
        put("run", "seed", self.seed.to_string());
        put("run", "out", opt_str(&self.out.as_ref().map(|p| p.display().to_string()), "auto"));
        put("run", "workers", self.workers.to_string());
        put("data", "corpus", opt_str(&self.corpus.as_ref().map(|p| p.display().to_string()), "none"));
        put("generator", "style", g.style.name().into());
        put("generator", "dimension", g.dimension.name().into());
        put("generator", "participants", g.participants.to_string());
        put("generator", "duration_s", g.duration_s.to_string());
        put("generator", "fps", g.fps.to_string());
        put("generator", "feature_rate", g.feature_rate.to_string());
        put("generator", "image_size", g.image_size.to_string());
        put("generator", "n_features", g.n_features.to_string());
        put("generator", "annotators", opt_str(&g.annotators, "auto"));
        put("generator", "frame_noise", g.frame_noise.to_string());
        put("generator", "frame_signal", g.frame_signal.to_string());
        put("generator", "feature_noise", g.feature_noise.to_string());
        put("generator", "annotator_noise", g.annotator_noise.to_string());
        put("generator", "reaction_lag_s", g.reaction_lag_s.to_string());
        put("preprocess", "step_s", opt_str(&self.step_s, "auto"));
        put("preprocess", "len_s", join(&self.window_lengths));
        put("preprocess", "epsilon", opt_str(&self.epsilon, "auto"));
        put("preprocess", "mode", mode_name(self.threshold).into());
        put("preprocess", "shift_s", opt_str(&self.shift_s, "auto"));
        put("preprocess", "normalize", opt_str(&self.normalize, "auto"));
        put(
            "model",
            "preset",
            match self.preset {
                Preset::Desk => "desk",
                Preset::Paper => "paper",
            }
            .into(),
        );
        put("model", "embed_dim", self.embed_dim.to_string());
        put("model", "teacher_hidden", self.teacher_hidden.to_string());
        put("model", "dropout", self.dropout.to_string());
        put("optim", "learning_rate", self.opt.learning_rate.to_string());
        put("optim", "beta1", self.opt.beta1.to_string());
        put("optim", "beta2", self.opt.beta2.to_string());
        put("optim", "eps", self.opt.eps.to_string());
        put("optim", "batch_size", self.opt.batch_size.to_string());
        put("optim", "max_epochs", self.opt.max_epochs.to_string());
        put("optim", "patience", self.opt.patience.to_string());
        put("scl", "temperature", self.scl.temperature.to_string());
        put("scl", "normalize_embeddings", self.scl.normalize_embeddings.to_string());
        put("scl", "projection_dim", opt_str(&self.scl.projection_dim, "none"));
        put("eval", "alphas", join(&self.alphas));
        put("eval", "k", self.k.to_string());
        put("eval", "val_frac", self.val_frac.to_string());
        put("eval", "tune_alpha_per_window", self.tune_alpha_per_window.to_string());
        put("eval", "teachers", join(&self.teachers));
        put("train", "role", self.train.role.to_string());
        put("train", "scheme", self.train.scheme.to_string());
        put("train", "alpha", opt_str(&self.train.alpha, "auto"));
        out
    }

    /// Preprocessing for one window length; unset keys follow the corpus style.
    pub fn preprocess(&self, len_s: f64) -> PreprocessConfig {
        let base = PreprocessConfig::for_style(self.generator.style, len_s);
        PreprocessConfig {
            step_s: self.step_s.unwrap_or(base.step_s),
            len_s,
            shift_s: self.shift_s.unwrap_or(base.shift_s),
            normalize: self.normalize.unwrap_or(base.normalize),
            binarise: BinariseConfig {
                mode: self.threshold.unwrap_or(base.binarise.mode),
                epsilon: self.epsilon.unwrap_or(base.binarise.epsilon),
            },
        }
    }

    /// Effective ε (the style default when unset).
    pub fn effective_epsilon(&self) -> f64 {
        self.preprocess(1.0).binarise.epsilon
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            preprocess: self.preprocess(self.window_lengths.first().copied().unwrap_or(1.0)),
            window_lengths: self.window_lengths.clone(),
            embed_dim: self.embed_dim,
            teacher_hidden: self.teacher_hidden,
            dropout: self.dropout,
            opt: self.opt.with_seed(self.seed),
            scl: SclConfig {
                reduction: Reduction::Sum,
                ..self.scl.clone()
            },
            alphas: self.alphas.clone(),
            k: self.k,
            val_frac: self.val_frac,
            seed: self.seed,
            workers: self.workers,
            tune_alpha_per_window: self.tune_alpha_per_window,
            teachers: self.teachers.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: pricon::Error| ConfigError::Invalid(e.to_string());
        self.generator.validate().map_err(invalid)?;
        self.experiment().validate().map_err(invalid)?;
        if let Some(a) = self.train.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(ConfigError::Invalid(format!("train.alpha must lie in [0, 1], got {a}")));
            }
        }
        if self.epsilon.is_some_and(|e| e < 0.0) {
            return Err(ConfigError::Invalid("preprocess.epsilon must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(ConfigError::Invalid("eval.val_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn preset_from(v: &str) -> Result<Preset, String> {
    match v {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        _ => Err("expected desk or paper".into()),
    }
}

/// One `key = value` assignment before resolution.
struct Entry {
    origin: Origin,
    key: String,
    value: String,
}

/// Resolves `section.key` or a bare key to its qualified form.
fn qualify(section: Option<&str>, key: &str, origin: &Origin) -> Result<String, ConfigError> {
    let (section, key) = match (section, key.split_once('.')) {
        (_, Some((s, k))) => (Some(s), k),
        (s, None) => (s, key),
    };
    if let Some(s) = section {
        return if KEYS.contains(&(s, key)) {
            Ok(format!("{s}.{key}"))
        } else {
            Err(ConfigError::UnknownKey {
                origin: origin.clone(),
                key: format!("{s}.{key}"),
            })
        };
    }
    let matches: Vec<String> = KEYS
        .iter()
        .filter(|(_, k)| *k == key)
        .map(|(s, k)| format!("{s}.{k}"))
        .collect();
    match matches.len() {
        1 => Ok(matches[0].clone()),
        0 => Err(ConfigError::UnknownKey {
            origin: origin.clone(),
            key: key.to_string(),
        }),
        _ => Err(ConfigError::Ambiguous {
            origin: origin.clone(),
            key: key.to_string(),
            candidates: matches.join(", "),
        }),
    }
}

fn parse_text(text: &str, path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::File {
            path: path.to_path_buf(),
            line: i + 1,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                origin: origin.clone(),
                msg: format!("unterminated section header {line:?}"),
            })?;
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::Syntax {
                    origin,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: origin.clone(),
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let key = qualify(section.as_deref(), k.trim(), &origin)?;
        entries.push(Entry {
            origin,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(entries)
}

/// Loads defaults, then `path` (if any), then `overrides` (`key=value`).
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut entries = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Unreadable {
                path: p.to_path_buf(),
                source,
            })?;
            parse_text(&text, p)?
        }
        None => Vec::new(),
    };
    for (i, o) in overrides.iter().enumerate() {
        let origin = Origin::Override(i + 1);
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: origin.clone(),
            msg: format!("expected key=value, got {o:?}"),
        })?;
        let key = qualify(None, k.trim(), &origin)?;
        entries.push(Entry {
            origin,
            key,
            value: v.trim().to_string(),
        });
    }

    let bad = |e: &Entry, msg: String| ConfigError::BadValue {
        origin: e.origin.clone(),
        key: e.key.clone(),
        value: e.value.clone(),
        msg,
    };
    let mut cfg = RunConfig::default();
    if let Some(e) = entries.iter().rev().find(|e| e.key == "model.preset") {
        cfg.apply_preset(preset_from(&e.value).map_err(|m| bad(e, m))?);
    }
    for e in &entries {
        cfg.set(&e.key, &e.value).map_err(|m| bad(e, m))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
