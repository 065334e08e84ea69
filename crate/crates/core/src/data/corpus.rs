//! Participant sessions, the synthetic corpus generator and corpus persistence.
//!
//! The generator reproduces the asymmetric-information setting: one smooth
//! latent affect signal per participant drives (a) a handful of cleanly
//! observed "privileged" features, (b) small greyscale frames in which the
//! signal is buried under pixel noise and participant-specific nuisance, and
//! (c) annotation traces that follow the latent with annotator jitter.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::container::{read_tensor, write_tensor};
use crate::data::manifest::Manifest;
use crate::error::{contract, Error, Result};
use crate::nn::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorpusStyle {
    /// Several synchronised expert traces, global-median binarisation.
    RecolaLike,
    /// One self-reported, unbounded, delayed trace per session,
    /// session-mean binarisation.
    AgainLike,
}

impl CorpusStyle {
    pub fn name(self) -> &'static str {
        match self {
            CorpusStyle::RecolaLike => "recola-like",
            CorpusStyle::AgainLike => "again-like",
        }
    }
}

impl fmt::Display for CorpusStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusStyle {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "recola-like" => Ok(CorpusStyle::RecolaLike),
            "again-like" => Ok(CorpusStyle::AgainLike),
            other => Err(format!("unknown corpus style {other:?} (recola-like|again-like)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Arousal,
    Valence,
}

impl Dimension {
    pub fn name(self) -> &'static str {
        match self {
            Dimension::Arousal => "arousal",
            Dimension::Valence => "valence",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "arousal" => Ok(Dimension::Arousal),
            "valence" => Ok(Dimension::Valence),
            other => Err(format!("unknown affect dimension {other:?} (arousal|valence)")),
        }
    }
}

/// One participant's recording. Traces are sampled at `feature_rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub participant_id: String,
    /// T_f × H × W greyscale frames at `fps`.
    pub frames: Tensor,
    /// T_x × n_features at `feature_rate`.
    pub features: Tensor,
    /// K × T_x annotation traces.
    pub traces: Tensor,
    pub fps: f64,
    pub feature_rate: f64,
}

impl Session {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_ticks(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn annotators(&self) -> usize {
        self.traces.shape()[0]
    }

    /// Wall-clock span covered by every stream.
    pub fn duration_s(&self) -> f64 {
        (self.frame_count() as f64 / self.fps).min(self.feature_ticks() as f64 / self.feature_rate)
    }

    pub fn trace(&self, k: usize) -> &[f64] {
        self.traces.row(k)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        contract!(
            self.frames.rank() == 3 && self.features.rank() == 2 && self.traces.rank() == 2,
            "session {} has malformed stream ranks",
            self.participant_id
        );
        contract!(
            self.traces.shape()[1] == self.feature_ticks(),
            "session {}: traces and features have different tick counts",
            self.participant_id
        );
        let frames_s = self.frame_count() as f64 / self.fps;
        let features_s = self.feature_ticks() as f64 / self.feature_rate;
        let tick = (1.0 / self.fps).max(1.0 / self.feature_rate);
        contract!(
            (frames_s - features_s).abs() <= tick + 1e-9,
            "session {}: frames cover {frames_s} s but features cover {features_s} s",
            self.participant_id
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub style: CorpusStyle,
    pub dimension: Dimension,
    pub participants: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub feature_rate: f64,
    pub image_size: usize,
    pub n_features: usize,
    /// Annotators per session; `None` uses the style default (6 or 1).
    pub annotators: Option<usize>,
    /// Pixel noise standard deviation.
    pub frame_noise: f64,
    /// Amplitude of the latent-driven blob in the frames.
    pub frame_signal: f64,
    pub feature_noise: f64,
    pub annotator_noise: f64,
    /// Delay of the annotation relative to the stimulus (again-like only).
    pub reaction_lag_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk(CorpusStyle::RecolaLike)
    }
}

impl GeneratorConfig {
    /// 20 participants, 60 s, 16×16 frames at 5 fps, 8 features.
    pub fn desk(style: CorpusStyle) -> Self {
        Self {
            style,
            dimension: Dimension::Arousal,
            participants: 20,
            duration_s: 60.0,
            fps: 5.0,
            feature_rate: 5.0,
            image_size: 16,
            n_features: 8,
            annotators: None,
            frame_noise: 2.0,
            frame_signal: 1.0,
            feature_noise: 0.05,
            annotator_noise: 0.08,
            reaction_lag_s: 1.0,
        }
    }

    pub fn annotator_count(&self) -> usize {
        self.annotators.unwrap_or(match self.style {
            CorpusStyle::RecolaLike => 6,
            CorpusStyle::AgainLike => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.participants >= 1, "participants must be positive");
        contract!(self.duration_s > 0.0, "duration must be positive");
        contract!(self.fps > 0.0 && self.feature_rate > 0.0, "rates must be positive");
        contract!(self.image_size >= 1, "image size must be positive");
        contract!(self.n_features >= 1, "feature count must be positive");
        contract!(self.annotator_count() >= 1, "annotator count must be positive");
        contract!(
            self.frame_noise >= 0.0 && self.feature_noise >= 0.0 && self.annotator_noise >= 0.0,
            "noise levels must be non-negative"
        );
        contract!(self.reaction_lag_s >= 0.0, "reaction lag must be non-negative");
        Ok(())
    }

    fn to_manifest(&self, m: &mut Manifest) {
        m.set("gen.participants", self.participants);
        m.set("gen.duration_s", self.duration_s);
        m.set("gen.image_size", self.image_size);
        m.set("gen.n_features", self.n_features);
        m.set("gen.annotators", self.annotator_count());
        m.set("gen.frame_noise", self.frame_noise);
        m.set("gen.frame_signal", self.frame_signal);
        m.set("gen.feature_noise", self.feature_noise);
        m.set("gen.annotator_noise", self.annotator_noise);
        m.set("gen.reaction_lag_s", self.reaction_lag_s);
    }

    fn from_manifest(m: &Manifest, path: &Path, style: CorpusStyle, dimension: Dimension, fps: f64, feature_rate: f64) -> Result<Self> {
        Ok(Self {
            style,
            dimension,
            participants: m.get(path, "gen.participants")?,
            duration_s: m.get(path, "gen.duration_s")?,
            fps,
            feature_rate,
            image_size: m.get(path, "gen.image_size")?,
            n_features: m.get(path, "gen.n_features")?,
            annotators: Some(m.get(path, "gen.annotators")?),
            frame_noise: m.get(path, "gen.frame_noise")?,
            frame_signal: m.get(path, "gen.frame_signal")?,
            feature_noise: m.get(path, "gen.feature_noise")?,
            annotator_noise: m.get(path, "gen.annotator_noise")?,
            reaction_lag_s: m.get(path, "gen.reaction_lag_s")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub style: CorpusStyle,
    pub dimension: Dimension,
    pub config: GeneratorConfig,
    pub seed: u64,
}

impl Corpus {
    pub fn participant_ids(&self) -> Vec<String> {
        self.sessions.iter().map(|s| s.participant_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = self.participant_ids();
        ids.sort();
        ids.dedup();
        contract!(ids.len() == self.sessions.len(), "participant ids must be unique");
        self.sessions.iter().try_for_each(Session::validate)
    }
}

/// Mean-reverting random walk around 0.5, smoothed with a 1 s moving
/// average and clipped to [0, 1].
fn latent_trace(ticks: usize, rate: f64, rng: &mut RngStream) -> Vec<f64> {
    let theta: f64 = 0.05;
    let sigma = 0.07;
    let stationary = sigma / (2.0 * theta - theta * theta).sqrt();
    let mut raw = Vec::with_capacity(ticks);
    let mut x = 0.5 + stationary * rng.normal();
    for _ in 0..ticks {
        x += theta * (0.5 - x) + sigma * rng.normal();
        raw.push(x);
    }
    let half = ((rate / 2.0).round() as usize).max(1);
    (0..ticks)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(ticks);
            let mean = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            mean.clamp(0.0, 1.0)
        })
        .collect()
}

/// Temporally correlated annotator jitter with standard deviation `sd`.
fn jitter(ticks: usize, sd: f64, rng: &mut RngStream) -> Vec<f64> {
    let rho: f64 = 0.9;
    let innovation = sd * (1.0 - rho * rho).sqrt();
    let mut e = sd * rng.normal();
    (0..ticks)
        .map(|_| {
            e = rho * e + innovation * rng.normal();
            e
        })
        .collect()
}

/// Builds a synthetic corpus. Identical `(cfg, seed)` gives an identical corpus.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: &RngStream) -> Result<Corpus> {
    cfg.validate()?;
    let root = seed.derive(cfg.dimension.name());
    // Shared feature map: loadings and offsets are corpus-wide.
    let mut map_rng = root.derive("feature-map");
    let loadings: Vec<f64> = (0..cfg.n_features)
        .map(|_| {
            let sign = if map_rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * map_rng.uniform_range(0.5, 1.5)
        })
        .collect();
    let offsets: Vec<f64> = (0..cfg.n_features).map(|_| map_rng.normal()).collect();

    let size = cfg.image_size;
    let centre = (size as f64 - 1.0) / 2.0;
    let spread = (size as f64 / 4.0).max(0.5);
    let blob: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (-((y - centre).powi(2) + (x - centre).powi(2)) / (2.0 * spread * spread)).exp()
        })
        .collect();

    let feature_ticks = (cfg.duration_s * cfg.feature_rate).round() as usize;
    let frame_count = (cfg.duration_s * cfg.fps).round() as usize;
    contract!(feature_ticks >= 1 && frame_count >= 1, "session too short for the sampling rates");
    let annotators = cfg.annotator_count();
    let digits = cfg.participants.to_string().len().max(2);

    let mut sessions = Vec::with_capacity(cfg.participants);
    for p in 0..cfg.participants {
        let rng = root.derive_index("participant", p as u64);
        let latent = latent_trace(feature_ticks, cfg.feature_rate, &mut rng.derive("latent"));

        let mut frng = rng.derive("features");
        let mut features = Vec::with_capacity(feature_ticks * cfg.n_features);
        for &z in &latent {
            for k in 0..cfg.n_features {
                features.push(loadings[k] * z + offsets[k] + cfg.feature_noise * frng.normal());
            }
        }

        let mut vrng = rng.derive("frames");
        let background = 0.5 * vrng.normal();
        let texture: Vec<f64> = (0..size * size).map(|_| 0.3 * vrng.normal()).collect();
        let mut frames = Vec::with_capacity(frame_count * size * size);
        for f in 0..frame_count {
            let tick = ((f as f64 / cfg.fps) * cfg.feature_rate).floor() as usize;
            let z = latent[tick.min(feature_ticks - 1)];
            let flicker = 0.3 * vrng.normal();
            for i in 0..size * size {
                frames.push(
                    background
                        + texture[i]
                        + flicker
                        + cfg.frame_signal * (z - 0.5) * 2.0 * blob[i]
                        + cfg.frame_noise * vrng.normal(),
                );
            }
        }

        let mut arng = rng.derive("annotation");
        let mut traces = Vec::with_capacity(annotators * feature_ticks);
        match cfg.style {
            CorpusStyle::RecolaLike => {
                for _ in 0..annotators {
                    let bias = 0.03 * arng.normal();
                    let noise = jitter(feature_ticks, cfg.annotator_noise, &mut arng);
                    traces.extend(latent.iter().zip(&noise).map(|(z, e)| z + bias + e));
                }
            }
            CorpusStyle::AgainLike => {
                let lag = (cfg.reaction_lag_s * cfg.feature_rate).round() as usize;
                for _ in 0..annotators {
                    let gain = arng.uniform_range(0.5, 2.0);
                    let offset = arng.normal();
                    let noise = jitter(feature_ticks, cfg.annotator_noise, &mut arng);
                    traces.extend((0..feature_ticks).map(|t| {
                        gain * (latent[t.saturating_sub(lag)] + noise[t]) + offset
                    }));
                }
            }
        }

        sessions.push(Session {
            participant_id: format!("p{p:0digits$}"),
            frames: Tensor::new(vec![frame_count, size, size], frames)?,
            features: Tensor::new(vec![feature_ticks, cfg.n_features], features)?,
            traces: Tensor::new(vec![annotators, feature_ticks], traces)?,
            fps: cfg.fps,
            feature_rate: cfg.feature_rate,
        });
    }

    Ok(Corpus {
        sessions,
        style: cfg.style,
        dimension: cfg.dimension,
        config: cfg.clone(),
        seed: seed.seed(),
    })
}

const CORPUS_FORMAT: &str = "pricon-corpus-1";

/// Writes `manifest.txt` plus three tensor files per participant.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::new();
    m.set("format", CORPUS_FORMAT);
    m.set("style", corpus.style);
    m.set("dimension", corpus.dimension);
    m.set("seed", corpus.seed);
    m.set("fps", corpus.config.fps);
    m.set("feature_rate", corpus.config.feature_rate);
    m.set("participants", corpus.participant_ids().join(","));
    corpus.config.to_manifest(&mut m);
    for s in &corpus.sessions {
        write_tensor(&dir.join(format!("{}.frames.prc", s.participant_id)), &s.frames)?;
        write_tensor(&dir.join(format!("{}.features.prc", s.participant_id)), &s.features)?;
        write_tensor(&dir.join(format!("{}.traces.prc", s.participant_id)), &s.traces)?;
    }
    m.write(&dir.join("manifest.txt"))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.txt");
    let m = Manifest::read(&path)?;
    let format_err = |msg: String| Error::Format {
        path: path.clone(),
        msg,
    };
    if m.get_str(&path, "format")? != CORPUS_FORMAT {
        return Err(format_err("not a corpus manifest".into()));
    }
    let style: CorpusStyle = m.get_str(&path, "style")?.parse().map_err(format_err)?;
    let dimension: Dimension = m.get_str(&path, "dimension")?.parse().map_err(format_err)?;
    let fps: f64 = m.get(&path, "fps")?;
    let feature_rate: f64 = m.get(&path, "feature_rate")?;
    let config = GeneratorConfig::from_manifest(&m, &path, style, dimension, fps, feature_rate)?;
    let ids: Vec<String> = m.get_list(&path, "participants")?;
    let mut sessions = Vec::with_capacity(ids.len());
    for id in ids {
        let frames = read_tensor(&dir.join(format!("{id}.frames.prc")))?;
        let features = read_tensor(&dir.join(format!("{id}.features.prc")))?;
        let traces = read_tensor(&dir.join(format!("{id}.traces.prc")))?;
        let session = Session {
            participant_id: id,
            frames,
            features,
            traces,
            fps,
            feature_rate,
        };
        session.validate().map_err(|e| Error::LengthMismatch {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?;
        sessions.push(session);
    }
    let corpus = Corpus {
        sessions,
        style,
        dimension,
        config,
        seed: m.get(&path, "seed")?,
    };
    corpus.validate()?;
    Ok(corpus)
}
