use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pricon::data::{build_windows, generate_synthetic_corpus, load_corpus, save_corpus, Corpus, Window};
use pricon::eval::{
    architectures, build_teacher, emit_report, fit_scheme, make_folds, read_results, results_to_csv, run_experiment,
    CellRole, Scheme,
};
use pricon::eval::report::alphas_to_csv;
use pricon::models::build_student;
use pricon::train::{alpha_search, train_lupi_student, TrainHistory};
use pricon::RngStream;

use crate::config::{ConfigError, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PRICON_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] pricon::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 config, 2 IO, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Run(e) => match e {
                pricon::Error::Contract(_) => 1,
                pricon::Error::Numerical(_) => 3,
                _ => 2,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "config",
            2 => "io",
            _ => "numerical",
        }
    }

    /// `error kind=<kind> code=<n> msg="<escaped message>"`
    pub fn one_line(&self) -> String {
        format!("error kind={} code={} msg={:?}", self.kind(), self.exit_code(), self.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

/// `--out` flag, then `run.out`, then `$PRICON_OUT`, then `./pricon-out`.
pub fn output_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pricon-out"))
}

fn corpus_for(cfg: &RunConfig) -> Result<Corpus, CliError> {
    Ok(match &cfg.corpus {
        Some(dir) => load_corpus(dir)?,
        None => generate_synthetic_corpus(&cfg.generator, &RngStream::new(cfg.seed))?,
    })
}

/// Writes `<out>/corpus/` and the resolved config.
pub fn run_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let corpus = generate_synthetic_corpus(&cfg.generator, &RngStream::new(cfg.seed))?;
    let dir = out.join("corpus");
    save_corpus(&corpus, &dir)?;
    let conf = out.join("config.txt");
    write(&conf, &cfg.to_text())?;
    Ok(vec![dir, conf])
}

fn history_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}.csv"))
}

fn write_histories(out: &Path, prefix: &str, scheme: Scheme, hs: &[TrainHistory], written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let names: &[&str] = match scheme {
        Scheme::Lupi => &["history"],
        Scheme::Pc => &["history_pretrain", "history"],
    };
    for (name, h) in names.iter().zip(hs) {
        let p = history_path(out, &format!("{prefix}{name}"));
        write(&p, &h.to_csv())?;
        written.push(p);
    }
    Ok(())
}

/// Trains one model on all fold participants (the validation holdout drives
/// early stopping) at the first configured window length.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let corpus = corpus_for(cfg)?;
    let len = cfg.window_lengths[0];
    let windows = build_windows(&corpus, &cfg.preprocess(len))?.windows;
    let plan = make_folds(&corpus.participant_ids(), cfg.k, cfg.val_frac, cfg.seed)?;
    let (val, train): (Vec<Window>, Vec<Window>) = windows
        .into_iter()
        .partition(|w| plan.validation.contains(&w.participant_id));
    if train.is_empty() || val.is_empty() {
        return Err(pricon::Error::Contract("no windows left for training or validation".into()).into());
    }
    let exp = cfg.experiment();
    let (arch, n_features) = architectures(&train[0], &exp);
    let root = RngStream::new(cfg.seed);
    let opt = exp.opt.clone();
    let settings = &cfg.train;
    let mut written = Vec::new();

    let model = match settings.role {
        CellRole::E => {
            let m = pricon::models::build_baseline(arch, &mut root.derive("init"))?;
            let (m, hs) = fit_scheme(m, &train, &val, settings.scheme, &exp.scl, &opt)?;
            write_histories(out, "", settings.scheme, &hs, &mut written)?;
            m
        }
        CellRole::Tp | CellRole::Tf => {
            let m = build_teacher(settings.role, &arch, n_features, &exp, &mut root.derive("init"))?;
            let (m, hs) = fit_scheme(m, &train, &val, settings.scheme, &exp.scl, &opt)?;
            write_histories(out, "", settings.scheme, &hs, &mut written)?;
            m
        }
        CellRole::Sp | CellRole::Sf => {
            let teacher_role = if settings.role == CellRole::Sp { CellRole::Tp } else { CellRole::Tf };
            let t = build_teacher(teacher_role, &arch, n_features, &exp, &mut root.derive("teacher-init"))?;
            let (teacher, hs) = fit_scheme(t, &train, &val, settings.scheme, &exp.scl, &opt.with_seed(root.derive("teacher-opt").seed()))?;
            write_histories(out, "teacher_", settings.scheme, &hs, &mut written)?;
            let tdir = out.join("teacher");
            teacher.save(&tdir)?;
            written.push(tdir);
            let mut student = build_student(arch, &mut root.derive("init"))?;
            let history = match settings.alpha {
                Some(a) => train_lupi_student(&mut student, &teacher, &train, &val, a, &opt)?,
                None => {
                    let found = alpha_search(&student, &teacher, &train, &val, &exp.alphas, &opt)?;
                    info!("alpha search: {:?} -> {}", found.scores, found.alpha);
                    let p = out.join("alpha.txt");
                    let mut text = String::new();
                    for (a, acc) in &found.scores {
                        text.push_str(&format!("{a} {acc}\n"));
                    }
                    text.push_str(&format!("chosen {}\n", found.alpha));
                    write(&p, &text)?;
                    written.push(p);
                    student = found.model;
                    found.history
                }
            };
            let p = history_path(out, "history");
            write(&p, &history.to_csv())?;
            written.push(p);
            student
        }
    };
    let mdir = out.join("model");
    model.save(&mdir)?;
    written.push(mdir);
    let conf = out.join("config.txt");
    write(&conf, &cfg.to_text())?;
    written.push(conf);
    Ok(written)
}

/// Runs the full matrix and writes `results.csv`, `alphas.csv` and `report.md`.
pub fn run_experiment_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let corpus = corpus_for(cfg)?;
    let report = run_experiment(&corpus, &cfg.experiment())?;
    let results = out.join("results.csv");
    write(&results, &results_to_csv(&report.cells))?;
    let alphas = out.join("alphas.csv");
    write(&alphas, &alphas_to_csv(&report.alphas))?;
    let md = out.join("report.md");
    write(&md, &emit_report(&report.cells))?;
    let conf = out.join("config.txt");
    write(&conf, &cfg.to_text())?;
    Ok(vec![results, alphas, md, conf])
}

/// Re-renders the markdown report from a results CSV.
pub fn run_report(results: &Path, target: &Path) -> Result<Vec<PathBuf>, CliError> {
    let cells = read_results(results)?;
    if cells.is_empty() {
        return Err(pricon::Error::Contract(format!("{} holds no results", results.display())).into());
    }
    write(target, &emit_report(&cells))?;
    Ok(vec![target.to_path_buf()])
}
