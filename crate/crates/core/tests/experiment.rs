use std::collections::BTreeMap;

use pricon::data::{build_windows, generate_synthetic_corpus, Corpus, CorpusStyle, GeneratorConfig, PreprocessConfig};
use pricon::eval::{paired_t_test, results_to_csv, run_experiment, CellRole, ExperimentConfig, Scheme};
use pricon::RngStream;
use proptest::prelude::*;

fn small_corpus(seed: u64) -> Corpus {
    let mut g = GeneratorConfig::desk(CorpusStyle::RecolaLike);
    g.participants = 8;
    g.duration_s = 20.0;
    generate_synthetic_corpus(&g, &RngStream::new(seed)).unwrap()
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(PreprocessConfig::recola_like(1.0));
    cfg.window_lengths = vec![1.0, 2.0];
    cfg.opt.max_epochs = 2;
    cfg.k = 3;
    cfg.alphas = vec![0.5, 1.0];
    cfg
}

#[test]
fn every_cell_is_reported_once() {
    let cfg = small_config();
    let report = run_experiment(&small_corpus(1), &cfg).unwrap();
    assert_eq!(report.cells.len(), cfg.cell_count());
    let mut seen = BTreeMap::new();
    for c in &report.cells {
        assert!(c.error.is_none(), "{c:?}");
        let acc = c.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(c.alpha.is_some(), c.role.is_student(), "{c:?}");
        *seen.entry((c.window_s.to_bits(), c.role, c.scheme, c.fold)).or_insert(0) += 1;
    }
    assert!(seen.values().all(|&n| n == 1));
    for role in cfg.roles() {
        for scheme in Scheme::ALL {
            assert!(seen.keys().any(|k| k.1 == role && k.2 == scheme));
        }
    }
}

#[test]
fn alpha_is_tuned_on_the_first_window_and_reused() {
    let cfg = small_config();
    let report = run_experiment(&small_corpus(2), &cfg).unwrap();
    assert!(!report.alphas.is_empty());
    assert!(report.alphas.iter().all(|a| a.window_s == 1.0 && cfg.alphas.contains(&a.chosen)));
    for c in report.cells.iter().filter(|c| c.role.is_student()) {
        let teacher = if c.role == CellRole::Sp { CellRole::Tp } else { CellRole::Tf };
        let rec = report
            .alphas
            .iter()
            .find(|a| a.fold == c.fold && a.teacher == teacher && a.scheme == c.scheme)
            .unwrap();
        assert_eq!(c.alpha, Some(rec.chosen));
    }
}

#[test]
fn experiment_is_deterministic() {
    let corpus = small_corpus(3);
    let mut cfg = small_config();
    cfg.teachers = vec![CellRole::Tf];
    let a = run_experiment(&corpus, &cfg).unwrap();
    cfg.workers = 2;
    let b = run_experiment(&corpus, &cfg).unwrap();
    assert_eq!(results_to_csv(&a.cells), results_to_csv(&b.cells));
    assert_eq!(a.alphas, b.alphas);
}

#[test]
fn too_few_participants_for_the_folds() {
    let mut g = GeneratorConfig::desk(CorpusStyle::RecolaLike);
    g.participants = 3;
    g.duration_s = 10.0;
    let corpus = generate_synthetic_corpus(&g, &RngStream::new(0)).unwrap();
    assert!(run_experiment(&corpus, &small_config()).is_err());
}

#[test]
fn default_corpus_classes_are_balanced() {
    for seed in 0..5 {
        let corpus = generate_synthetic_corpus(&GeneratorConfig::desk(CorpusStyle::RecolaLike), &RngStream::new(seed)).unwrap();
        let w = build_windows(&corpus, &PreprocessConfig::recola_like(1.0)).unwrap().windows;
        let high = w.iter().filter(|w| w.class() == 1).count() as f64 / w.len() as f64;
        assert!((0.4..=0.6).contains(&high), "seed {seed}: {high}");
    }
}

/// Two-sided Student-t tail by Simpson quadrature in x = tan θ.
fn quadrature_p(t: f64, nu: f64) -> f64 {
    let g = |th: f64| {
        let x = th.tan();
        (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0) / th.cos().powi(2)
    };
    let simpson = |a: f64, b: f64| {
        let n = 10_000;
        let h = (b - a) / n as f64;
        let mut s = g(a);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let top = std::f64::consts::FRAC_PI_2;
    simpson(t.abs().atan(), top) / simpson(0.0, top)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn t_test_matches_quadrature(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..=10)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = paired_t_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p));
        if !r.degenerate {
            prop_assert!((r.p - quadrature_p(r.t, r.df as f64)).abs() <= 1e-4);
        }
    }
}
