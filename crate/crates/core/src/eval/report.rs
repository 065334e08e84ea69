//! Results CSV and the markdown summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::experiment::{AlphaRecord, CellResult, CellRole, Scheme};
use crate::eval::stats::paired_t_test;

pub const RESULTS_HEADER: [&str; 9] = [
    "corpus",
    "dimension",
    "window_s",
    "role",
    "scheme",
    "fold",
    "accuracy",
    "alpha",
    "error_tag",
];

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn results_to_csv(cells: &[CellResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory write");
    for c in cells {
        w.write_record([
            c.corpus.clone(),
            c.dimension.clone(),
            c.window_s.to_string(),
            c.role.code().to_string(),
            c.scheme.name().to_string(),
            c.fold.to_string(),
            opt_num(c.accuracy),
            opt_num(c.alpha),
            c.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Parses results CSV text; `path` only labels diagnostics.
pub fn parse_results(text: &str, path: &Path) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let bad = |field: &str, v: &str| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {line}: invalid {field} {v:?}"),
        };
        let num = |idx: usize, field: &str| -> Result<Option<f64>> {
            let v = &rec[idx];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(field, v))
            }
        };
        let accuracy = num(6, "accuracy")?;
        if let Some(a) = accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad("accuracy", &rec[6]));
            }
        }
        cells.push(CellResult {
            corpus: rec[0].to_string(),
            dimension: rec[1].to_string(),
            window_s: num(2, "window_s")?.ok_or_else(|| bad("window_s", ""))?,
            role: rec[3].parse().map_err(|_| bad("role", &rec[3]))?,
            scheme: rec[4].parse().map_err(|_| bad("scheme", &rec[4]))?,
            fold: rec[5].parse().map_err(|_| bad("fold", &rec[5]))?,
            accuracy,
            alpha: num(7, "alpha")?,
            error: Some(rec[8].to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(cells)
}

pub fn read_results(path: &Path) -> Result<Vec<CellResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, path)
}

pub fn alphas_to_csv(records: &[AlphaRecord]) -> String {
    let mut out = String::from("window_s,teacher,scheme,fold,alpha,val_accuracy,chosen\n");
    for r in records {
        for &(a, acc) in &r.scores {
            writeln!(
                out,
                "{},{},{},{},{a},{acc},{}",
                r.window_s,
                r.teacher,
                r.scheme,
                r.fold,
                u8::from(a == r.chosen)
            )
            .unwrap();
        }
    }
    out
}

/// Paired comparison of one cell column against the best student in it.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceMark {
    pub corpus: String,
    pub dimension: String,
    pub window_s: f64,
    pub scheme: Scheme,
    pub role: CellRole,
    pub versus: CellRole,
    pub t: f64,
    pub p: f64,
    /// p ≥ 0.05.
    pub on_par: bool,
}

type BlockKey = (String, String);
type ColumnKey = (u64, Scheme);

/// Fold accuracies grouped as block → column → role → fold → accuracy.
fn group(cells: &[CellResult]) -> BTreeMap<BlockKey, BTreeMap<ColumnKey, BTreeMap<CellRole, BTreeMap<usize, Option<f64>>>>> {
    let mut g: BTreeMap<_, BTreeMap<_, BTreeMap<_, BTreeMap<_, _>>>> = BTreeMap::new();
    for c in cells {
        g.entry((c.corpus.clone(), c.dimension.clone()))
            .or_default()
            .entry((window_key(c.window_s), c.scheme))
            .or_default()
            .entry(c.role)
            .or_default()
            .insert(c.fold, c.accuracy);
    }
    g
}

// window lengths are sorted numerically via their bit pattern (positive floats)
fn window_key(w: f64) -> u64 {
    w.to_bits()
}

fn mean_accuracy(folds: &BTreeMap<usize, Option<f64>>) -> Option<f64> {
    let ok: Vec<f64> = folds.values().filter_map(|a| *a).collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

/// Best student roles of a column (all of them on an exact tie).
fn best_students(column: &BTreeMap<CellRole, BTreeMap<usize, Option<f64>>>) -> Vec<CellRole> {
    let means: Vec<(CellRole, f64)> = column
        .iter()
        .filter(|(r, _)| r.is_student())
        .filter_map(|(r, f)| mean_accuracy(f).map(|m| (*r, m)))
        .collect();
    let Some(top) = means.iter().map(|m| m.1).reduce(f64::max) else {
        return Vec::new();
    };
    means.into_iter().filter(|m| m.1 == top).map(|m| m.0).collect()
}

/// Compares every other role in each column against the column's best
/// student with a paired t-test over the folds both completed.
pub fn significance_marks(cells: &[CellResult]) -> Vec<SignificanceMark> {
    let mut marks = Vec::new();
    for ((corpus, dimension), columns) in group(cells) {
        for ((wk, scheme), column) in columns {
            let best = best_students(&column);
            let Some(&reference) = best.first() else {
                continue;
            };
            for (&role, folds) in &column {
                if best.contains(&role) {
                    continue;
                }
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for (fold, acc) in folds {
                    if let (Some(x), Some(Some(y))) = (acc, column[&reference].get(fold)) {
                        a.push(*x);
                        b.push(*y);
                    }
                }
                if let Ok(r) = paired_t_test(&a, &b) {
                    marks.push(SignificanceMark {
                        corpus: corpus.clone(),
                        dimension: dimension.clone(),
                        window_s: f64::from_bits(wk),
                        scheme,
                        role,
                        versus: reference,
                        t: r.t,
                        p: r.p,
                        on_par: r.p >= 0.05,
                    });
                }
            }
        }
    }
    marks
}

/// One table per (corpus, dimension): roles as rows, (window, scheme) pairs
/// as columns, mean fold accuracy in percent. The best student per column is
/// bold; cells statistically on par with it are underlined.
pub fn emit_report(cells: &[CellResult]) -> String {
    let marks = significance_marks(cells);
    let mut out = String::new();
    for ((corpus, dimension), columns) in group(cells) {
        if !out.is_empty() {
            out.push('\n');
        }
        writeln!(out, "## {corpus} / {dimension}\n").unwrap();
        let keys: Vec<ColumnKey> = columns.keys().copied().collect();
        let roles: Vec<CellRole> = CellRole::ALL
            .into_iter()
            .filter(|r| columns.values().any(|c| c.contains_key(r)))
            .collect();
        out.push_str("| Model |");
        for (wk, scheme) in &keys {
            write!(out, " {}s {} |", f64::from_bits(*wk), scheme).unwrap();
        }
        out.push_str("\n|---|");
        for _ in &keys {
            out.push_str("---:|");
        }
        out.push('\n');
        for role in roles {
            write!(out, "| {role} |").unwrap();
            for key in &keys {
                let column = &columns[key];
                let text = match column.get(&role) {
                    None => "–".to_string(),
                    Some(folds) => match mean_accuracy(folds) {
                        None => "failed".to_string(),
                        Some(m) => {
                            let v = format!("{:.2}", 100.0 * m);
                            let on_par = marks.iter().any(|mk| {
                                mk.corpus == corpus
                                    && mk.dimension == dimension
                                    && window_key(mk.window_s) == key.0
                                    && mk.scheme == key.1
                                    && mk.role == role
                                    && mk.on_par
                            });
                            if best_students(column).contains(&role) {
                                format!("**{v}**")
                            } else if on_par {
                                format!("<u>{v}</u>")
                            } else {
                                v
                            }
                        }
                    },
                };
                write!(out, " {text} |").unwrap();
            }
            out.push('\n');
        }
    }
    out
}
