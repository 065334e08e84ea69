//! Session preprocessing: annotation fusion, reaction-time shift and
//! normalisation, sliding-window segmentation, per-window feature averaging
//! and ε-band binarisation.

use std::collections::BTreeMap;

use log::warn;

use crate::data::corpus::{Corpus, CorpusStyle, Session};
use crate::error::{contract, Error, Result};
use crate::nn::Tensor;

const TIME_EPS: f64 = 1e-9;

/// A window cut from a session before scoring.
#[derive(Clone, Debug)]
pub struct RawWindow {
    pub participant_id: String,
    pub start_s: f64,
    /// (fps·len) × H × W, frames stacked along the channel axis.
    pub frames: Tensor,
    /// t × n_features feature rows inside the window.
    pub features: Tensor,
    /// K × t annotation segments.
    pub traces: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowLabel {
    High,
    Low,
    Excluded,
}

impl WindowLabel {
    /// Class index used by the models: low = 0, high = 1.
    pub fn class(self) -> Option<usize> {
        match self {
            WindowLabel::Low => Some(0),
            WindowLabel::High => Some(1),
            WindowLabel::Excluded => None,
        }
    }
}

/// One training sample.
#[derive(Clone, Debug)]
pub struct Window {
    pub participant_id: String,
    pub start_s: f64,
    pub frames: Tensor,
    /// Window mean of the feature stream.
    pub features: Tensor,
    pub score: f64,
    pub label: WindowLabel,
}

impl Window {
    /// Class index; excluded windows never reach training.
    pub fn class(&self) -> usize {
        self.label.class().expect("excluded window used as a sample")
    }
}

/// Number of windows: ⌊(T − len)/step⌋ + 1 when the window fits, else 0.
pub fn window_count(duration_s: f64, step_s: f64, len_s: f64) -> usize {
    if len_s > duration_s + TIME_EPS {
        return 0;
    }
    ((duration_s - len_s) / step_s + TIME_EPS).floor() as usize + 1
}

/// Cuts windows starting at 0, step, 2·step, … while they fit in the session.
pub fn segment_windows(session: &Session, step_s: f64, len_s: f64) -> Result<Vec<RawWindow>> {
    contract!(step_s > 0.0, "window step must be positive, got {step_s}");
    contract!(len_s > 0.0, "window length must be positive, got {len_s}");
    let duration = session.duration_s();
    let count = window_count(duration, step_s, len_s);
    if count == 0 {
        warn!(
            "window of {len_s} s does not fit session {} ({duration} s); no windows",
            session.participant_id
        );
        return Ok(Vec::new());
    }
    let (h, w) = session.image_dims();
    let n = session.n_features();
    let frames_per = (len_s * session.fps).round() as usize;
    let ticks_per = (len_s * session.feature_rate).round() as usize;
    contract!(
        frames_per >= 1 && ticks_per >= 1,
        "window of {len_s} s holds no samples at the session rates"
    );
    let k = session.annotators();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i as f64 * step_s;
        let f0 = ((start * session.fps).round() as usize).min(session.frame_count() - frames_per);
        let t0 = ((start * session.feature_rate).round() as usize).min(session.feature_ticks() - ticks_per);
        let frames = Tensor::new(
            vec![frames_per, h, w],
            session.frames.data()[f0 * h * w..(f0 + frames_per) * h * w].to_vec(),
        )?;
        let features = Tensor::new(
            vec![ticks_per, n],
            session.features.data()[t0 * n..(t0 + ticks_per) * n].to_vec(),
        )?;
        let traces: Vec<f64> = (0..k)
            .flat_map(|a| session.trace(a)[t0..t0 + ticks_per].to_vec())
            .collect();
        out.push(RawWindow {
            participant_id: session.participant_id.clone(),
            start_s: start,
            frames,
            features,
            traces: Tensor::new(vec![k, ticks_per], traces)?,
        });
    }
    Ok(out)
}

/// Column-wise mean of a t × n feature block.
pub fn aggregate_features(features: &Tensor) -> Result<Tensor> {
    contract!(
        features.rank() == 2,
        "feature block must be t×n, got {:?}",
        features.shape()
    );
    let (t, n) = (features.shape()[0], features.shape()[1]);
    contract!(t >= 1, "cannot average an empty feature block");
    let mut mean = vec![0.0; n];
    for row in features.data().chunks_exact(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    Ok(Tensor::from_vec(mean.into_iter().map(|m| m / t as f64).collect()))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-tick median across annotators; an even count uses the midpoint of the
/// two central values.
pub fn fuse_annotations(traces: &[&[f64]]) -> Result<Vec<f64>> {
    contract!(!traces.is_empty(), "no annotation traces to fuse");
    let len = traces[0].len();
    contract!(
        traces.iter().all(|t| t.len() == len),
        "annotation traces have different lengths"
    );
    let mut buf = vec![0.0; traces.len()];
    Ok((0..len)
        .map(|i| {
            for (b, t) in buf.iter_mut().zip(traces) {
                *b = t[i];
            }
            median(&mut buf)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTrace {
    pub values: Vec<f64>,
    /// Ticks removed from the front by the backward shift.
    pub shift_ticks: usize,
    /// Set when normalisation met a constant trace.
    pub degenerate_range: bool,
}

/// Shifts the trace backward by round(shift_s·rate) ticks (value at t+shift
/// moves to t; trailing ticks are dropped) and optionally min-max normalises
/// it to [0, 1]. A constant trace normalises to all 0.5.
pub fn prepare_trace(trace: &[f64], shift_s: f64, rate: f64, normalize: bool) -> Result<PreparedTrace> {
    contract!(shift_s >= 0.0, "shift must be non-negative, got {shift_s}");
    contract!(rate > 0.0, "rate must be positive");
    let shift_ticks = (shift_s * rate).round() as usize;
    if shift_ticks >= trace.len() {
        return Err(Error::Contract(format!(
            "shift of {shift_ticks} ticks consumes the whole {}-tick trace",
            trace.len()
        )));
    }
    let mut values = trace[shift_ticks..].to_vec();
    let mut degenerate_range = false;
    if normalize {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        } else {
            warn!("annotation trace is constant; normalising to 0.5");
            degenerate_range = true;
            values.iter_mut().for_each(|v| *v = 0.5);
        }
    }
    Ok(PreparedTrace {
        values,
        shift_ticks,
        degenerate_range,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Median of all window scores in the corpus.
    GlobalMedian,
    /// Mean of each participant's window scores.
    SessionMean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinariseConfig {
    pub mode: ThresholdMode,
    pub epsilon: f64,
}

impl BinariseConfig {
    pub fn recola_like() -> Self {
        Self {
            mode: ThresholdMode::GlobalMedian,
            epsilon: 0.1,
        }
    }

    pub fn again_like() -> Self {
        Self {
            mode: ThresholdMode::SessionMean,
            epsilon: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Binarised {
    pub windows: Vec<Window>,
    /// Threshold per participant (identical values in global mode).
    pub thresholds: BTreeMap<String, f64>,
    pub excluded: usize,
}

/// Labels windows high (score > threshold + ε) or low (score < threshold − ε)
/// and drops the ones inside the band.
pub fn binarise(windows: Vec<Window>, cfg: BinariseConfig) -> Result<Binarised> {
    contract!(!windows.is_empty(), "cannot binarise an empty window set");
    contract!(cfg.epsilon >= 0.0, "epsilon must be non-negative, got {}", cfg.epsilon);
    contract!(
        windows.iter().all(|w| w.score.is_finite()),
        "window scores must be finite"
    );
    let mut thresholds = BTreeMap::new();
    match cfg.mode {
        ThresholdMode::GlobalMedian => {
            let mut scores: Vec<f64> = windows.iter().map(|w| w.score).collect();
            let m = median(&mut scores);
            for w in &windows {
                thresholds.insert(w.participant_id.clone(), m);
            }
        }
        ThresholdMode::SessionMean => {
            let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for w in &windows {
                let e = acc.entry(w.participant_id.clone()).or_insert((0.0, 0));
                e.0 += w.score;
                e.1 += 1;
            }
            for (k, (sum, n)) in acc {
                thresholds.insert(k, sum / n as f64);
            }
        }
    }
    let total = windows.len();
    let kept: Vec<Window> = windows
        .into_iter()
        .filter_map(|mut w| {
            let th = thresholds[&w.participant_id];
            w.label = if w.score > th + cfg.epsilon {
                WindowLabel::High
            } else if w.score < th - cfg.epsilon {
                WindowLabel::Low
            } else {
                WindowLabel::Excluded
            };
            (w.label != WindowLabel::Excluded).then_some(w)
        })
        .collect();
    Ok(Binarised {
        excluded: total - kept.len(),
        windows: kept,
        thresholds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub step_s: f64,
    pub len_s: f64,
    /// Backward annotation shift.
    pub shift_s: f64,
    pub normalize: bool,
    pub binarise: BinariseConfig,
}

impl PreprocessConfig {
    /// 0.4 s step, synchronised traces, global median, ε = 0.1.
    pub fn recola_like(len_s: f64) -> Self {
        Self {
            step_s: 0.4,
            len_s,
            shift_s: 0.0,
            normalize: false,
            binarise: BinariseConfig::recola_like(),
        }
    }

    /// 0.5 s step, 1 s reaction shift, [0, 1] normalisation, session mean, ε = 0.2.
    pub fn again_like(len_s: f64) -> Self {
        Self {
            step_s: 0.5,
            len_s,
            shift_s: 1.0,
            normalize: true,
            binarise: BinariseConfig::again_like(),
        }
    }

    pub fn for_style(style: CorpusStyle, len_s: f64) -> Self {
        match style {
            CorpusStyle::RecolaLike => Self::recola_like(len_s),
            CorpusStyle::AgainLike => Self::again_like(len_s),
        }
    }
}

/// Applies shift/normalisation to every trace and fuses them, trimming the
/// other streams to the shortened duration.
pub fn prepare_session(session: &Session, cfg: &PreprocessConfig) -> Result<Session> {
    let mut prepared = Vec::with_capacity(session.annotators());
    let mut shift_ticks = 0;
    for k in 0..session.annotators() {
        let p = prepare_trace(session.trace(k), cfg.shift_s, session.feature_rate, cfg.normalize)?;
        shift_ticks = p.shift_ticks;
        prepared.push(p.values);
    }
    let refs: Vec<&[f64]> = prepared.iter().map(|v| v.as_slice()).collect();
    let fused = fuse_annotations(&refs)?;
    let ticks = fused.len();
    let n = session.n_features();
    let (h, w) = session.image_dims();
    let shift_s = shift_ticks as f64 / session.feature_rate;
    let frames_keep = session
        .frame_count()
        .saturating_sub((shift_s * session.fps).round() as usize);
    Ok(Session {
        participant_id: session.participant_id.clone(),
        frames: Tensor::new(
            vec![frames_keep, h, w],
            session.frames.data()[..frames_keep * h * w].to_vec(),
        )?,
        features: Tensor::new(vec![ticks, n], session.features.data()[..ticks * n].to_vec())?,
        traces: Tensor::new(vec![1, ticks], fused)?,
        fps: session.fps,
        feature_rate: session.feature_rate,
    })
}

/// Scores windows without binarising them.
pub fn score_windows(corpus: &Corpus, cfg: &PreprocessConfig) -> Result<Vec<Window>> {
    let mut windows = Vec::new();
    for session in &corpus.sessions {
        let prepared = prepare_session(session, cfg)?;
        for raw in segment_windows(&prepared, cfg.step_s, cfg.len_s)? {
            let score = raw.traces.row(0).iter().sum::<f64>() / raw.traces.shape()[1] as f64;
            windows.push(Window {
                participant_id: raw.participant_id,
                start_s: raw.start_s,
                features: aggregate_features(&raw.features)?,
                frames: raw.frames,
                score,
                label: WindowLabel::Excluded,
            });
        }
    }
    Ok(windows)
}

/// Full preprocessing: prepare, segment, average, score and binarise.
pub fn build_windows(corpus: &Corpus, cfg: &PreprocessConfig) -> Result<Binarised> {
    binarise(score_windows(corpus, cfg)?, cfg.binarise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_synthetic_corpus, GeneratorConfig};
    use crate::nn::RngStream;
    use proptest::prelude::*;

    fn session(duration_s: f64, fps: f64, size: usize) -> Session {
        let frames = (duration_s * fps) as usize;
        let ticks = (duration_s * fps) as usize;
        Session {
            participant_id: "p".into(),
            frames: Tensor::zeros(&[frames, size, size]),
            features: Tensor::new(vec![ticks, 2], (0..ticks * 2).map(|i| i as f64).collect()).unwrap(),
            traces: Tensor::new(vec![1, ticks], (0..ticks).map(|i| i as f64).collect()).unwrap(),
            fps,
            feature_rate: fps,
        }
    }

    fn window(pid: &str, score: f64) -> Window {
        Window {
            participant_id: pid.into(),
            start_s: 0.0,
            frames: Tensor::zeros(&[1, 1, 1]),
            features: Tensor::zeros(&[1]),
            score,
            label: WindowLabel::Excluded,
        }
    }

    #[test]
    fn count_examples() {
        assert_eq!(window_count(10.0, 0.5, 2.0), 17);
        let s = session(10.0, 5.0, 2);
        assert_eq!(segment_windows(&s, 0.5, 2.0).unwrap().len(), 17);
        assert!(segment_windows(&s, 0.5, 11.0).unwrap().is_empty());
        assert!(segment_windows(&s, 0.0, 1.0).is_err());
    }

    #[test]
    fn window_frames_stack_on_channels() {
        let s = session(6.0, 5.0, 4);
        let w = segment_windows(&s, 0.4, 3.0).unwrap();
        assert_eq!(w[0].frames.shape(), &[15, 4, 4]);
        assert_eq!(w[1].start_s, 0.4);
        // second window starts two ticks in at 5 Hz
        assert_eq!(w[1].traces.row(0)[0], 2.0);
    }

    #[test]
    fn aggregate_examples() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        assert_eq!(aggregate_features(&t).unwrap().data(), &[2.0, 5.0]);
        assert!(aggregate_features(&Tensor::zeros(&[0, 2])).is_err());
        let s = session(10.0, 5.0, 2);
        for len in [1.0, 2.0, 3.0] {
            let w = segment_windows(&s, 0.4, len).unwrap();
            assert_eq!(aggregate_features(&w[0].features).unwrap().len(), 2);
        }
    }

    #[test]
    fn fuse_examples() {
        let a = [0.3, 0.9];
        assert_eq!(fuse_annotations(&[&a]).unwrap(), vec![0.3, 0.9]);
        assert_eq!(fuse_annotations(&[&[0.0], &[2.0], &[1.0]]).unwrap(), vec![1.0]);
        let six: Vec<[f64; 1]> = [0.6, 0.1, 0.4, 0.2, 0.5, 0.3].iter().map(|&v| [v]).collect();
        let refs: Vec<&[f64]> = six.iter().map(|v| v.as_slice()).collect();
        assert!((fuse_annotations(&refs).unwrap()[0] - 0.35).abs() < 1e-12);
        assert!(fuse_annotations(&[&[1.0, 2.0], &[1.0]]).is_err());
    }

    #[test]
    fn prepare_trace_examples() {
        let trace: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let p = prepare_trace(&trace, 1.0, 5.0, false).unwrap();
        assert_eq!(p.values[0], 5.0);
        assert_eq!(p.values.len(), 15);
        let p = prepare_trace(&[2.0, 3.0, 4.0], 0.0, 5.0, true).unwrap();
        assert_eq!(p.values, vec![0.0, 0.5, 1.0]);
        let p = prepare_trace(&[7.0; 4], 0.0, 5.0, true).unwrap();
        assert_eq!(p.values, vec![0.5; 4]);
        assert!(p.degenerate_range);
        assert!(prepare_trace(&[1.0; 4], 1.0, 5.0, false).is_err());
    }

    #[test]
    fn binarise_rule() {
        let ws = vec![window("a", 0.65), window("a", 0.55), window("a", 0.35), window("a", 0.5), window("a", 0.5)];
        let b = binarise(ws, BinariseConfig::recola_like()).unwrap();
        assert_eq!(b.thresholds["a"], 0.5);
        let labels: Vec<(f64, WindowLabel)> = b.windows.iter().map(|w| (w.score, w.label)).collect();
        assert_eq!(labels, vec![(0.65, WindowLabel::High), (0.35, WindowLabel::Low)]);
        assert_eq!(b.excluded, 3);
        assert!(binarise(Vec::new(), BinariseConfig::recola_like()).is_err());
    }

    #[test]
    fn session_mean_thresholds_are_per_participant() {
        let ws = vec![window("a", 0.0), window("a", 1.0), window("b", 10.0), window("b", 11.0)];
        let b = binarise(ws, BinariseConfig::again_like()).unwrap();
        assert_eq!(b.thresholds["a"], 0.5);
        assert_eq!(b.thresholds["b"], 10.5);
        assert_eq!(b.windows.len(), 4);
    }

    #[test]
    fn again_pipeline_trims_streams() {
        let cfg = GeneratorConfig {
            style: CorpusStyle::AgainLike,
            participants: 2,
            duration_s: 10.0,
            image_size: 8,
            ..GeneratorConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, &RngStream::new(3)).unwrap();
        let prepared = prepare_session(&corpus.sessions[0], &PreprocessConfig::again_like(1.0)).unwrap();
        assert_eq!(prepared.feature_ticks(), 45);
        assert_eq!(prepared.frame_count(), 45);
        let t = prepared.trace(0);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        let windows = score_windows(&corpus, &PreprocessConfig::again_like(1.0)).unwrap();
        assert_eq!(windows.len(), 2 * window_count(9.0, 0.5, 1.0));
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(t in 1.0f64..100.0, step in 0.05f64..5.0, len in 0.1f64..10.0) {
            let mut naive = 0;
            while naive as f64 * step + len <= t + 1e-9 {
                naive += 1;
            }
            prop_assert_eq!(window_count(t, step, len), naive);
        }

        #[test]
        fn averaging_commutes_with_shift(vals in prop::collection::vec(-5.0f64..5.0, 6), c in -3.0f64..3.0) {
            let t = Tensor::new(vec![3, 2], vals).unwrap();
            let a = aggregate_features(&t.map(|v| v + c)).unwrap();
            let b = aggregate_features(&t).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - (y + c)).abs() < 1e-12);
            }
        }

        #[test]
        fn survivors_clear_the_band(scores in prop::collection::vec(0.0f64..1.0, 1..40), eps in 0.0f64..0.3) {
            let ws: Vec<Window> = scores.iter().enumerate().map(|(i, &s)| window(if i % 2 == 0 { "a" } else { "b" }, s)).collect();
            for mode in [ThresholdMode::GlobalMedian, ThresholdMode::SessionMean] {
                let b = binarise(ws.clone(), BinariseConfig { mode, epsilon: eps }).unwrap();
                for w in &b.windows {
                    prop_assert!((w.score - b.thresholds[&w.participant_id]).abs() > eps);
                }
                let dropped = ws.iter().filter(|w| (w.score - b.thresholds[&w.participant_id]).abs() <= eps).count();
                prop_assert_eq!(dropped, b.excluded);
            }
        }
    }
}
