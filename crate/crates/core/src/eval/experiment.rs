//! The model × scheme × window × fold matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;

use crate::data::{build_windows, Corpus, PreprocessConfig, Window};
use crate::error::{contract, Error, Result};
use crate::eval::folds::{make_folds, FoldPlan};
use crate::eval::stats::{accuracy, predicted_classes};
use crate::losses::SclConfig;
use crate::models::{
    build_baseline, build_fusion_teacher, build_privileged_teacher, build_student, FusionTeacherArch, ModelGraph,
    PrivTeacherArch, StudentArch, DEFAULT_DROPOUT, TEACHER_HIDDEN,
};
use crate::nn::RngStream;
use crate::train::{
    alpha_search, fit_linear_probe, labels, pretrain_scl, samples, train_lupi_student, train_supervised, OptimConfig,
    TrainHistory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// End-to-end teachers.
    Lupi,
    /// Contrastively pretrained teachers read out by a linear probe.
    Pc,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Lupi, Scheme::Pc];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Lupi => "LUPI",
            Scheme::Pc => "PC",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LUPI" => Ok(Scheme::Lupi),
            "PC" => Ok(Scheme::Pc),
            _ => Err(Error::Contract(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Table rows, in display order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellRole {
    E,
    Sp,
    Sf,
    Tp,
    Tf,
}

impl CellRole {
    pub const ALL: [CellRole; 5] = [CellRole::E, CellRole::Sp, CellRole::Sf, CellRole::Tp, CellRole::Tf];

    pub fn code(self) -> &'static str {
        match self {
            CellRole::E => "E",
            CellRole::Sp => "S_p",
            CellRole::Sf => "S_f",
            CellRole::Tp => "T_p",
            CellRole::Tf => "T_f",
        }
    }

    pub fn is_student(self) -> bool {
        matches!(self, CellRole::Sp | CellRole::Sf)
    }
}

impl fmt::Display for CellRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for CellRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellRole::ALL
            .into_iter()
            .find(|r| r.code() == s)
            .ok_or_else(|| Error::Contract(format!("unknown role {s:?}")))
    }
}

/// One (role, scheme, window, fold) outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub corpus: String,
    pub dimension: String,
    pub window_s: f64,
    pub role: CellRole,
    pub scheme: Scheme,
    pub fold: usize,
    /// Test accuracy; `None` when the cell failed.
    pub accuracy: Option<f64>,
    pub alpha: Option<f64>,
    pub error: Option<String>,
}

/// Validation accuracy of every α candidate for one teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaRecord {
    pub window_s: f64,
    pub fold: usize,
    pub teacher: CellRole,
    pub scheme: Scheme,
    pub chosen: f64,
    pub scores: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Template; `len_s` is replaced by each entry of `window_lengths`.
    pub preprocess: PreprocessConfig,
    pub window_lengths: Vec<f64>,
    pub embed_dim: usize,
    pub teacher_hidden: usize,
    pub dropout: f64,
    pub opt: OptimConfig,
    pub scl: SclConfig,
    pub alphas: Vec<f64>,
    pub k: usize,
    pub val_frac: f64,
    pub seed: u64,
    /// Fold jobs run concurrently; 0 uses the available parallelism.
    pub workers: usize,
    /// Search α at every window length instead of only the first.
    pub tune_alpha_per_window: bool,
    /// Teacher roles to train (T_p and/or T_f); each brings its student.
    pub teachers: Vec<CellRole>,
}

impl ExperimentConfig {
    pub fn desk(preprocess: PreprocessConfig) -> Self {
        Self {
            preprocess,
            window_lengths: vec![1.0, 2.0, 3.0],
            embed_dim: 32,
            teacher_hidden: TEACHER_HIDDEN,
            dropout: DEFAULT_DROPOUT,
            opt: OptimConfig::default(),
            scl: SclConfig::default(),
            alphas: vec![0.25, 0.5, 0.75, 1.0],
            k: 5,
            val_frac: 0.1,
            seed: 0,
            workers: 0,
            tune_alpha_per_window: false,
            teachers: vec![CellRole::Tp, CellRole::Tf],
        }
    }

    /// Roles present in the results.
    pub fn roles(&self) -> Vec<CellRole> {
        CellRole::ALL
            .into_iter()
            .filter(|r| match r {
                CellRole::E => true,
                CellRole::Sp | CellRole::Tp => self.teachers.contains(&CellRole::Tp),
                CellRole::Sf | CellRole::Tf => self.teachers.contains(&CellRole::Tf),
            })
            .collect()
    }

    /// Cells in a complete report.
    pub fn cell_count(&self) -> usize {
        self.roles().len() * Scheme::ALL.len() * self.window_lengths.len() * self.k
    }

    pub fn validate(&self) -> Result<()> {
        contract!(!self.window_lengths.is_empty(), "no window lengths configured");
        contract!(
            self.window_lengths.iter().all(|&l| l > 0.0 && l.is_finite()),
            "window lengths must be positive"
        );
        contract!(!self.alphas.is_empty(), "alpha grid is empty");
        contract!(
            self.alphas.iter().all(|a| (0.0..=1.0).contains(a)),
            "alpha candidates must lie in [0, 1]"
        );
        contract!(
            !self.teachers.is_empty() && self.teachers.iter().all(|t| matches!(t, CellRole::Tp | CellRole::Tf)),
            "teachers must be a non-empty subset of T_p, T_f"
        );
        contract!(self.embed_dim >= 1 && self.teacher_hidden >= 1, "layer widths must be positive");
        contract!(self.k >= 2, "cross-validation needs at least 2 folds, got {}", self.k);
        contract!((0.0..1.0).contains(&self.val_frac), "val_frac must lie in [0, 1)");
        self.opt.validate()?;
        self.scl.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub alphas: Vec<AlphaRecord>,
}

/// Windows of one length split by a fold.
struct Split {
    train: Vec<Window>,
    val: Vec<Window>,
    test: Vec<Window>,
}

fn split(windows: &[Window], plan: &FoldPlan, fold: usize) -> Result<Split> {
    let test_ids = &plan.folds[fold];
    let train_ids = plan.train_participants(fold);
    let pick = |ids: &BTreeSet<String>| -> Vec<Window> {
        windows.iter().filter(|w| ids.contains(&w.participant_id)).cloned().collect()
    };
    let s = Split {
        train: pick(&train_ids),
        val: pick(&plan.validation),
        test: pick(test_ids),
    };
    // provenance: every evaluated window belongs to a test participant and no
    // test participant leaks into fitting
    contract!(
        s.test.iter().all(|w| test_ids.contains(&w.participant_id)),
        "fold {fold}: test window from a non-test participant"
    );
    contract!(
        s.train
            .iter()
            .chain(&s.val)
            .all(|w| !test_ids.contains(&w.participant_id)),
        "fold {fold}: test participant in the training or validation split"
    );
    contract!(
        !s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty(),
        "fold {fold}: empty split (train {}, val {}, test {})",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(s)
}

/// Frame architecture and feature count implied by a window.
pub fn architectures(sample: &Window, cfg: &ExperimentConfig) -> (StudentArch, usize) {
    let s = sample.frames.shape();
    let mut arch = StudentArch::new(s[0], s[1], s[2], cfg.embed_dim);
    arch.dropout = cfg.dropout;
    (arch, sample.features.len())
}

/// Untrained T_p or T_f.
pub fn build_teacher(
    role: CellRole,
    frame: &StudentArch,
    n_features: usize,
    cfg: &ExperimentConfig,
    rng: &mut RngStream,
) -> Result<ModelGraph> {
    match role {
        CellRole::Tp => {
            let mut a = PrivTeacherArch::new(n_features);
            a.hidden = cfg.teacher_hidden;
            a.dropout = cfg.dropout;
            build_privileged_teacher(a, rng)
        }
        CellRole::Tf => build_fusion_teacher(
            FusionTeacherArch {
                dropout: cfg.dropout,
                ..FusionTeacherArch::new(frame.clone(), n_features)
            },
            rng,
        ),
        other => Err(Error::Contract(format!("{other} is not a teacher role"))),
    }
}

/// Trains a teacher or baseline under a scheme: end-to-end for LUPI,
/// contrastive pretraining plus a linear probe for PC. Returns the model and
/// the histories (pretraining first for PC).
pub fn fit_scheme(
    mut model: ModelGraph,
    train: &[Window],
    val: &[Window],
    scheme: Scheme,
    scl: &SclConfig,
    opt: &OptimConfig,
) -> Result<(ModelGraph, Vec<TrainHistory>)> {
    let histories = match scheme {
        Scheme::Lupi => vec![train_supervised(&mut model, train, val, opt)?],
        Scheme::Pc => {
            let pre = pretrain_scl(&mut model, train, val, scl, opt)?;
            let probe = fit_linear_probe(&mut model, train, val, &opt.with_seed(opt.seed ^ 0x9e37))?;
            vec![pre, probe]
        }
    };
    Ok((model, histories))
}

fn test_accuracy(model: &ModelGraph, test: &[Window]) -> Result<f64> {
    let probs = model.infer(&samples(model.role(), test))?.probs;
    accuracy(&predicted_classes(&probs), &labels(test))
}

fn one_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}

struct FoldRun<'a> {
    cfg: &'a ExperimentConfig,
    corpus: &'a Corpus,
    fold: usize,
    cells: Vec<CellResult>,
    alphas: Vec<AlphaRecord>,
    /// α chosen per (teacher, scheme) on the tuning window.
    tuned: BTreeMap<(CellRole, Scheme), f64>,
}

impl FoldRun<'_> {
    fn record(&mut self, window_s: f64, role: CellRole, scheme: Scheme, outcome: Result<(f64, Option<f64>)>) {
        let (accuracy, alpha, error) = match outcome {
            Ok((acc, alpha)) => (Some(acc), alpha, None),
            Err(e) => {
                warn!(
                    "fold {} {window_s}s {role}/{scheme} failed: {e}",
                    self.fold
                );
                (None, None, Some(one_line(&e)))
            }
        };
        self.cells.push(CellResult {
            corpus: self.corpus.style.name().to_string(),
            dimension: self.corpus.dimension.name().to_string(),
            window_s,
            role,
            scheme,
            fold: self.fold,
            accuracy,
            alpha,
            error,
        });
    }

    fn run_window(&mut self, window_s: f64, windows: &[Window], plan: &FoldPlan, tune: bool) -> Result<()> {
        let split = split(windows, plan, self.fold)?;
        let cfg = self.cfg;
        let (arch, n_features) = architectures(&split.train[0], cfg);

        let base = RngStream::new(cfg.seed)
            .derive_index("fold", self.fold as u64)
            .derive_index("window_ms", (window_s * 1000.0).round() as u64);
        let stream = |label: &str| base.derive(label);
        let opt_for = |label: &str| cfg.opt.with_seed(stream(label).seed());
        // E and every student share initial weights and the optimiser seed
        let student_opt = opt_for("student-opt");

        let e_lupi = build_baseline(arch.clone(), &mut stream("student-init")).and_then(|m| {
            let m = fit_scheme(m, &split.train, &split.val, Scheme::Lupi, &cfg.scl, &student_opt)?.0;
            test_accuracy(&m, &split.test)
        });
        self.record(window_s, CellRole::E, Scheme::Lupi, e_lupi.map(|a| (a, None)));
        let e_pc = build_baseline(arch.clone(), &mut stream("student-init")).and_then(|m| {
            let m = fit_scheme(m, &split.train, &split.val, Scheme::Pc, &cfg.scl, &student_opt)?.0;
            test_accuracy(&m, &split.test)
        });
        self.record(window_s, CellRole::E, Scheme::Pc, e_pc.map(|a| (a, None)));

        for (teacher_role, student_role) in [(CellRole::Tp, CellRole::Sp), (CellRole::Tf, CellRole::Sf)] {
            if !cfg.teachers.contains(&teacher_role) {
                continue;
            }
            for scheme in Scheme::ALL {
                let label = format!("{teacher_role}-{scheme}");
                let teacher = build_teacher(teacher_role, &arch, n_features, cfg, &mut stream(&format!("{label}-init")))
                    .and_then(|m| fit_scheme(m, &split.train, &split.val, scheme, &cfg.scl, &opt_for(&format!("{label}-opt"))))
                    .map(|r| r.0);
                let teacher = match teacher {
                    Ok(t) => t,
                    Err(e) => {
                        let tag = format!("teacher failed: {}", one_line(&e));
                        self.record(window_s, teacher_role, scheme, Err(e));
                        self.record(window_s, student_role, scheme, Err(Error::Numerical(tag)));
                        continue;
                    }
                };
                let t_acc = test_accuracy(&teacher, &split.test);
                self.record(window_s, teacher_role, scheme, t_acc.map(|a| (a, None)));

                let student = self.student(window_s, &arch, &teacher, &split, teacher_role, scheme, &student_opt, &stream, tune);
                self.record(window_s, student_role, scheme, student);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn student(
        &mut self,
        window_s: f64,
        arch: &StudentArch,
        teacher: &ModelGraph,
        split: &Split,
        teacher_role: CellRole,
        scheme: Scheme,
        opt: &OptimConfig,
        stream: &dyn Fn(&str) -> RngStream,
        tune: bool,
    ) -> Result<(f64, Option<f64>)> {
        let initial = build_student(arch.clone(), &mut stream("student-init"))?;
        let tuned = self.tuned.get(&(teacher_role, scheme)).copied();
        let (model, alpha) = match tuned {
            Some(alpha) if !tune => {
                let mut s = initial;
                train_lupi_student(&mut s, teacher, &split.train, &split.val, alpha, opt)?;
                (s, alpha)
            }
            _ => {
                let found = alpha_search(&initial, teacher, &split.train, &split.val, &self.cfg.alphas, opt)?;
                self.tuned.insert((teacher_role, scheme), found.alpha);
                self.alphas.push(AlphaRecord {
                    window_s,
                    fold: self.fold,
                    teacher: teacher_role,
                    scheme,
                    chosen: found.alpha,
                    scores: found.scores,
                });
                (found.model, found.alpha)
            }
        };
        Ok((test_accuracy(&model, &split.test)?, Some(alpha)))
    }
}

fn run_fold(corpus: &Corpus, cfg: &ExperimentConfig, plan: &FoldPlan, windows: &[(f64, Vec<Window>)], fold: usize) -> (Vec<CellResult>, Vec<AlphaRecord>) {
    let mut run = FoldRun {
        cfg,
        corpus,
        fold,
        cells: Vec::new(),
        alphas: Vec::new(),
        tuned: BTreeMap::new(),
    };
    for (i, (len, ws)) in windows.iter().enumerate() {
        let tune = i == 0 || cfg.tune_alpha_per_window;
        if let Err(e) = run.run_window(*len, ws, plan, tune) {
            warn!("fold {fold} window {len}s failed: {e}");
            for role in cfg.roles() {
                for scheme in Scheme::ALL {
                    if !run.cells.iter().any(|c| c.window_s == *len && c.role == role && c.scheme == scheme) {
                        run.record(*len, role, scheme, Err(Error::Contract(one_line(&e))));
                    }
                }
            }
        }
        info!("fold {fold} window {len}s done");
    }
    (run.cells, run.alphas)
}

/// Runs every (window length, fold) and returns the cells sorted by window,
/// role, scheme and fold. α is searched on the first window length (unless
/// `tune_alpha_per_window`) and reused for the others.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let plan = make_folds(&corpus.participant_ids(), cfg.k, cfg.val_frac, cfg.seed)?;
    let mut windows = Vec::with_capacity(cfg.window_lengths.len());
    for &len in &cfg.window_lengths {
        let pre = PreprocessConfig {
            len_s: len,
            ..cfg.preprocess.clone()
        };
        let b = build_windows(corpus, &pre)?;
        info!("{len}s windows: {} kept, {} excluded", b.windows.len(), b.excluded);
        windows.push((len, b.windows));
    }

    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
    let per_fold: Vec<_> = pool.install(|| {
        (0..cfg.k)
            .into_par_iter()
            .map(|f| run_fold(corpus, cfg, &plan, &windows, f))
            .collect()
    });

    let mut report = ExperimentReport::default();
    for (cells, alphas) in per_fold {
        report.cells.extend(cells);
        report.alphas.extend(alphas);
    }
    report.cells.sort_by(|a, b| {
        a.window_s
            .total_cmp(&b.window_s)
            .then(a.role.cmp(&b.role))
            .then(a.scheme.cmp(&b.scheme))
            .then(a.fold.cmp(&b.fold))
    });
    report.alphas.sort_by(|a, b| {
        a.window_s
            .total_cmp(&b.window_s)
            .then(a.teacher.cmp(&b.teacher))
            .then(a.scheme.cmp(&b.scheme))
            .then(a.fold.cmp(&b.fold))
    });
    Ok(report)
}
