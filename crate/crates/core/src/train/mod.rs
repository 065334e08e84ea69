//! Training loops: plain supervised, distillation from a privileged teacher
//! (LUPI), supervised contrastive pretraining and the linear probe.
//!
//! All loops share one epoch driver so the shuffle and dropout streams are
//! consumed identically; in particular the LUPI trainer at α = 0 reproduces
//! the supervised trainer bit for bit.

mod history;
mod optim;

pub use history::{early_stopping, StopDecision, TrainHistory};
pub use optim::{Adam, OptimConfig};

use log::{debug, warn};

use crate::data::Window;
use crate::error::{contract, Error, Result};
use crate::eval::{accuracy, predicted_classes};
use crate::losses::{
    cross_entropy, cross_entropy_grad, lupi_loss, lupi_loss_grad, supcon_loss, LupiConfig, ProbPair,
    Reduction, SclConfig,
};
use crate::models::{ModelGraph, Role, Sample, CLASSES};
use crate::nn::ops::{self, Mode};
use crate::nn::{Parameter, RngStream, Tensor};

/// The inputs a role consumes from a window.
pub fn sample_for(role: Role, w: &Window) -> Sample<'_> {
    match (role.uses_frames(), role.uses_features()) {
        (true, true) => Sample::both(&w.frames, &w.features),
        (true, false) => Sample::frames(&w.frames),
        _ => Sample::features(&w.features),
    }
}

pub fn samples(role: Role, windows: &[Window]) -> Vec<Sample<'_>> {
    windows.iter().map(|w| sample_for(role, w)).collect()
}

pub fn labels(windows: &[Window]) -> Vec<usize> {
    windows.iter().map(Window::class).collect()
}

/// Per-epoch hooks for [`drive`].
trait Objective {
    /// One update on the given training indices; `None` when the batch was
    /// skipped.
    fn step(&mut self, batch: &[usize], rng: &mut RngStream) -> Result<Option<f64>>;
    /// Validation loss and, where meaningful, accuracy.
    fn validate(&self) -> Result<(f64, Option<f64>)>;
    fn snapshot(&self) -> Vec<Tensor>;
    fn restore(&mut self, snapshot: &[Tensor]);
}

fn drive(obj: &mut impl Objective, n_train: usize, opt: &OptimConfig) -> Result<TrainHistory> {
    opt.validate()?;
    contract!(n_train > 0, "empty training set");
    let root = RngStream::new(opt.seed);
    let mut shuffle = root.derive("shuffle");
    let mut dropout = root.derive("dropout");

    let mut history = TrainHistory {
        initial_val_loss: obj.validate()?.0,
        ..TrainHistory::default()
    };
    let mut best = (f64::INFINITY, obj.snapshot(), 0);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=opt.max_epochs {
        shuffle.shuffle(&mut order);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(opt.batch_size) {
            if let Some(loss) = obj.step(batch, &mut dropout)? {
                total += loss * batch.len() as f64;
                seen += batch.len();
            }
        }
        let train_loss = if seen > 0 { total / seen as f64 } else { 0.0 };
        let (val_loss, val_acc) = obj.validate()?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
        }
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc {val_acc:?}");
        if val_loss < best.0 {
            best = (val_loss, obj.snapshot(), epoch);
        }
        history.push(train_loss, val_loss, val_acc);
        if early_stopping(&history.val_loss, opt.patience) == StopDecision::Stop {
            break;
        }
    }
    obj.restore(&best.1);
    history.best_epoch = best.2;
    Ok(history)
}

fn check_split(train: &[Window], val: &[Window]) -> Result<()> {
    contract!(!train.is_empty(), "empty training set");
    contract!(!val.is_empty(), "empty validation set");
    Ok(())
}

/// Per-sample loss and ∂loss/∂probs.
type ProbLoss<'t> = dyn Fn(usize, &[f64], usize) -> Result<(f64, Vec<f64>)> + 't;

struct ProbObjective<'a> {
    model: &'a mut ModelGraph,
    adam: Adam,
    train: Vec<Sample<'a>>,
    train_y: Vec<usize>,
    val: Vec<Sample<'a>>,
    val_y: Vec<usize>,
    /// Called with (index into the split, student probs, label); train and
    /// validation are told apart by `train_loss` / `val_loss`.
    train_loss: Box<ProbLoss<'a>>,
    val_loss: Box<ProbLoss<'a>>,
}

impl Objective for ProbObjective<'_> {
    fn step(&mut self, batch: &[usize], rng: &mut RngStream) -> Result<Option<f64>> {
        let inputs: Vec<Sample<'_>> = batch.iter().map(|&i| self.train[i]).collect();
        self.model.zero_grad();
        let out = self.model.forward(&inputs, Mode::Train, rng)?;
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(batch.len() * CLASSES);
        for (r, &i) in batch.iter().enumerate() {
            let (l, g) = (self.train_loss)(i, out.probs.row(r), self.train_y[i])?;
            loss += l;
            grad.extend(g.into_iter().map(|v| v / b));
        }
        let grad = Tensor::new(vec![batch.len(), CLASSES], grad)?;
        self.model.backward(None, Some(&grad))?;
        self.adam.step(self.model.params_mut());
        Ok(Some(loss / b))
    }

    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let out = self.model.infer(&self.val)?;
        let mut loss = 0.0;
        for (i, &y) in self.val_y.iter().enumerate() {
            loss += (self.val_loss)(i, out.probs.row(i), y)?.0;
        }
        Ok((
            loss / self.val_y.len() as f64,
            Some(accuracy(&predicted_classes(&out.probs), &self.val_y)?),
        ))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.model.snapshot()
    }

    fn restore(&mut self, snapshot: &[Tensor]) {
        self.model.restore(snapshot)
    }
}

fn ce_loss(_: usize, p: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    Ok((cross_entropy(p, y)?, cross_entropy_grad(p, y)))
}

/// Minimises mean cross-entropy; early-stops on validation cross-entropy and
/// leaves `model` at its best validation epoch.
pub fn train_supervised(
    model: &mut ModelGraph,
    train: &[Window],
    val: &[Window],
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    check_split(train, val)?;
    let role = model.role();
    let adam = Adam::all(opt, model.params());
    let mut obj = ProbObjective {
        adam,
        train: samples(role, train),
        train_y: labels(train),
        val: samples(role, val),
        val_y: labels(val),
        model,
        train_loss: Box::new(ce_loss),
        val_loss: Box::new(ce_loss),
    };
    drive(&mut obj, train.len(), opt)
}

/// Teacher class probabilities for each window (eval mode, so deterministic).
pub fn teacher_targets(teacher: &ModelGraph, windows: &[Window]) -> Result<Tensor> {
    Ok(teacher.infer(&samples(teacher.role(), windows))?.probs)
}

fn lupi_term(targets: &Tensor, cfg: LupiConfig) -> impl Fn(usize, &[f64], usize) -> Result<(f64, Vec<f64>)> + '_ {
    move |i, p, y| {
        let pair = ProbPair::new(p, targets.row(i))?;
        Ok((lupi_loss(&pair, y, cfg)?, lupi_loss_grad(&pair, y, cfg)))
    }
}

/// Distils from precomputed teacher probabilities (`B×2`, row-aligned with
/// the windows). Early-stops on the validation LUPI loss at the same α.
pub fn train_lupi_with_targets(
    student: &mut ModelGraph,
    train: &[Window],
    train_targets: &Tensor,
    val: &[Window],
    val_targets: &Tensor,
    alpha: f64,
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    check_split(train, val)?;
    contract!(
        train_targets.shape() == [train.len(), CLASSES] && val_targets.shape() == [val.len(), CLASSES],
        "teacher targets do not line up with the windows"
    );
    let cfg = LupiConfig::new(alpha)?;
    let role = student.role();
    let adam = Adam::all(opt, student.params());
    let mut obj = ProbObjective {
        adam,
        train: samples(role, train),
        train_y: labels(train),
        val: samples(role, val),
        val_y: labels(val),
        model: student,
        train_loss: Box::new(lupi_term(train_targets, cfg)),
        val_loss: Box::new(lupi_term(val_targets, cfg)),
    };
    drive(&mut obj, train.len(), opt)
}

/// Trains `student` against a frozen `teacher` with the LUPI objective.
pub fn train_lupi_student(
    student: &mut ModelGraph,
    teacher: &ModelGraph,
    train: &[Window],
    val: &[Window],
    alpha: f64,
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    let tt = teacher_targets(teacher, train)?;
    let tv = teacher_targets(teacher, val)?;
    train_lupi_with_targets(student, train, &tt, val, &tv, alpha, opt)
}

#[derive(Clone, Debug)]
pub struct AlphaSearch {
    pub alpha: f64,
    /// (α, validation accuracy) in ascending α.
    pub scores: Vec<(f64, f64)>,
    pub model: ModelGraph,
    pub history: TrainHistory,
}

/// Grid search over α. Every candidate starts from the same `initial`
/// weights; the highest validation accuracy wins, ties going to the smaller α.
pub fn alpha_search(
    initial: &ModelGraph,
    teacher: &ModelGraph,
    train: &[Window],
    val: &[Window],
    candidates: &[f64],
    opt: &OptimConfig,
) -> Result<AlphaSearch> {
    contract!(!candidates.is_empty(), "alpha grid is empty");
    let mut grid = candidates.to_vec();
    for &a in &grid {
        LupiConfig::new(a)?;
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let tt = teacher_targets(teacher, train)?;
    let tv = teacher_targets(teacher, val)?;
    let val_samples = samples(initial.role(), val);
    let val_y = labels(val);
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, ModelGraph, TrainHistory)> = None;
    for &a in &grid {
        let mut student = initial.clone();
        let history = train_lupi_with_targets(&mut student, train, &tt, val, &tv, a, opt)?;
        let acc = accuracy(&predicted_classes(&student.infer(&val_samples)?.probs), &val_y)?;
        debug!("alpha {a}: val acc {acc:.4}");
        scores.push((a, acc));
        if best.as_ref().map_or(true, |b| acc > b.1) {
            best = Some((a, acc, student, history));
        }
    }
    let (alpha, _, model, history) = best.expect("non-empty grid");
    Ok(AlphaSearch {
        alpha,
        scores,
        model,
        history,
    })
}

/// Affine projection used only while pretraining.
fn projection(d: usize, p: usize, rng: &mut RngStream) -> Vec<Parameter> {
    vec![
        Parameter::glorot("projection.weight", &[p, d], d, p, rng),
        Parameter::new("projection.bias", Tensor::zeros(&[p])),
    ]
}

fn project(proj: &[Parameter], emb: &Tensor) -> Result<Tensor> {
    if proj.is_empty() {
        return Ok(emb.clone());
    }
    let b = emb.shape()[0];
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        rows.push(ops::dense_forward(
            &Tensor::from_vec(emb.row(i).to_vec()),
            &proj[0].value,
            &proj[1].value,
        )?);
    }
    Tensor::stack(&rows)
}

struct SclObjective<'a> {
    model: &'a mut ModelGraph,
    encoder_adam: Adam,
    proj: Vec<Parameter>,
    proj_adam: Adam,
    cfg: SclConfig,
    train: Vec<Sample<'a>>,
    train_y: Vec<usize>,
    val: Vec<Sample<'a>>,
    val_y: Vec<usize>,
    batch_size: usize,
}

impl Objective for SclObjective<'_> {
    fn step(&mut self, batch: &[usize], rng: &mut RngStream) -> Result<Option<f64>> {
        if batch.len() < 2 {
            debug!("skipping contrastive batch of size {}", batch.len());
            return Ok(None);
        }
        let inputs: Vec<Sample<'_>> = batch.iter().map(|&i| self.train[i]).collect();
        let y: Vec<usize> = batch.iter().map(|&i| self.train_y[i]).collect();
        self.model.zero_grad();
        let out = self.model.forward(&inputs, Mode::Train, rng)?;
        let z = project(&self.proj, &out.embeddings)?;
        let loss = supcon_loss(&z, &y, &self.cfg)?;
        if loss.all_skipped {
            warn!("contrastive batch without positive pairs; update skipped");
            return Ok(None);
        }
        let gemb = if self.proj.is_empty() {
            loss.grad
        } else {
            self.proj.iter_mut().for_each(Parameter::zero_grad);
            let (w, rest) = self.proj.split_at_mut(1);
            let mut rows = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                rows.push(ops::dense_backward(
                    &Tensor::from_vec(out.embeddings.row(i).to_vec()),
                    &w[0].value,
                    &Tensor::from_vec(loss.grad.row(i).to_vec()),
                    w[0].grad.data_mut(),
                    rest[0].grad.data_mut(),
                ));
            }
            self.proj_adam.step(&mut self.proj);
            Tensor::stack(&rows)?
        };
        self.model.backward(Some(&gemb), None)?;
        self.encoder_adam.step(self.model.params_mut());
        Ok(Some(loss.loss))
    }

    /// Mean contrastive loss per contributing anchor over fixed-order chunks.
    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let emb = project(&self.proj, &self.model.infer(&self.val)?.embeddings)?;
        let sum_cfg = SclConfig {
            reduction: Reduction::Sum,
            ..self.cfg.clone()
        };
        let d = emb.shape()[1];
        let (mut total, mut anchors) = (0.0, 0usize);
        for (c, ys) in self.val_y.chunks(self.batch_size).enumerate() {
            if ys.len() < 2 {
                continue;
            }
            let start = c * self.batch_size;
            let rows = emb.data()[start * d..(start + ys.len()) * d].to_vec();
            let out = supcon_loss(&Tensor::new(vec![ys.len(), d], rows)?, ys, &sum_cfg)?;
            total += out.loss;
            anchors += out.anchors;
        }
        Ok((if anchors > 0 { total / anchors as f64 } else { 0.0 }, None))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut s = self.model.snapshot();
        s.extend(self.proj.iter().map(|p| p.value.clone()));
        s
    }

    fn restore(&mut self, snapshot: &[Tensor]) {
        let n = self.model.params().len();
        self.model.restore(&snapshot[..n]);
        for (p, v) in self.proj.iter_mut().zip(&snapshot[n..]) {
            p.value = v.clone();
        }
    }
}

/// Supervised contrastive pretraining of the encoder (the head is left
/// untouched). The per-batch loss is averaged over contributing anchors;
/// batches of one sample or without positive pairs are skipped.
pub fn pretrain_scl(
    encoder: &mut ModelGraph,
    train: &[Window],
    val: &[Window],
    cfg: &SclConfig,
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    check_split(train, val)?;
    cfg.validate()?;
    let role = encoder.role();
    let head = encoder.head_params();
    let trunk: Vec<usize> = (0..encoder.params().len()).filter(|i| !head.contains(i)).collect();
    let encoder_adam = Adam::new(opt, encoder.params(), trunk);
    let proj = match cfg.projection_dim {
        Some(p) => projection(
            encoder.penultimate_dim(),
            p,
            &mut RngStream::new(opt.seed).derive("projection"),
        ),
        None => Vec::new(),
    };
    let proj_adam = Adam::all(opt, &proj);
    let mut obj = SclObjective {
        encoder_adam,
        proj_adam,
        proj,
        cfg: SclConfig {
            reduction: Reduction::MeanOverAnchors,
            ..cfg.clone()
        },
        train: samples(role, train),
        train_y: labels(train),
        val: samples(role, val),
        val_y: labels(val),
        batch_size: opt.batch_size,
        model: encoder,
    };
    drive(&mut obj, train.len(), opt)
}

/// Dropout → dense(2) → softmax on fixed embeddings.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub weight: Parameter,
    pub bias: Parameter,
    pub dropout: f64,
}

impl LinearProbe {
    pub fn new(dim: usize, dropout: f64, rng: &mut RngStream) -> Self {
        Self {
            weight: Parameter::glorot("head.weight", &[CLASSES, dim], dim, CLASSES, rng),
            bias: Parameter::new("head.bias", Tensor::zeros(&[CLASSES])),
            dropout,
        }
    }

    /// Class probabilities (`B×2`, eval mode) for embeddings `B×d`.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Tensor> {
        let b = embeddings.shape()[0];
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let x = Tensor::from_vec(embeddings.row(i).to_vec());
            rows.push(ops::softmax(&ops::dense_forward(&x, &self.weight.value, &self.bias.value)?));
        }
        Tensor::stack(&rows)
    }
}

struct ProbeObjective<'a> {
    params: Vec<Parameter>,
    dropout: f64,
    adam: Adam,
    train: &'a Tensor,
    train_y: &'a [usize],
    val: &'a Tensor,
    val_y: &'a [usize],
}

impl ProbeObjective<'_> {
    fn probe(&self) -> LinearProbe {
        LinearProbe {
            weight: self.params[0].clone(),
            bias: self.params[1].clone(),
            dropout: self.dropout,
        }
    }
}

impl Objective for ProbeObjective<'_> {
    fn step(&mut self, batch: &[usize], rng: &mut RngStream) -> Result<Option<f64>> {
        self.params.iter_mut().for_each(Parameter::zero_grad);
        let b = batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let x = Tensor::from_vec(self.train.row(i).to_vec());
            let (dropped, _) = ops::dropout(&x, self.dropout, Mode::Train, rng)?;
            let p = ops::softmax(&ops::dense_forward(&dropped, &self.params[0].value, &self.params[1].value)?);
            let y = self.train_y[i];
            loss += cross_entropy(p.data(), y)?;
            let g = Tensor::from_vec(cross_entropy_grad(p.data(), y).into_iter().map(|v| v / b).collect());
            let glogits = ops::softmax_backward(&p, &g);
            let (w, rest) = self.params.split_at_mut(1);
            ops::dense_backward(&dropped, &w[0].value, &glogits, w[0].grad.data_mut(), rest[0].grad.data_mut());
        }
        self.adam.step(&mut self.params);
        Ok(Some(loss / b))
    }

    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let p = self.probe().predict(self.val)?;
        let mut loss = 0.0;
        for (i, &y) in self.val_y.iter().enumerate() {
            loss += cross_entropy(p.row(i), y)?;
        }
        Ok((loss / self.val_y.len() as f64, Some(accuracy(&predicted_classes(&p), self.val_y)?)))
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }
}

/// Trains `probe` on fixed embeddings with mean cross-entropy.
pub fn fit_probe(
    probe: &mut LinearProbe,
    train: &Tensor,
    train_y: &[usize],
    val: &Tensor,
    val_y: &[usize],
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    contract!(
        train.rank() == 2 && train.shape()[0] == train_y.len() && !train_y.is_empty(),
        "probe training embeddings do not match labels"
    );
    contract!(
        val.rank() == 2 && val.shape()[0] == val_y.len() && !val_y.is_empty(),
        "probe validation embeddings do not match labels"
    );
    let params = vec![probe.weight.clone(), probe.bias.clone()];
    let mut obj = ProbeObjective {
        adam: Adam::all(opt, &params),
        params,
        dropout: probe.dropout,
        train,
        train_y,
        val,
        val_y,
    };
    let history = drive(&mut obj, train_y.len(), opt)?;
    *probe = obj.probe();
    Ok(history)
}

/// Fits the decision head of `model` on its frozen embeddings; the encoder
/// parameters are not modified.
pub fn fit_linear_probe(
    model: &mut ModelGraph,
    train: &[Window],
    val: &[Window],
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    check_split(train, val)?;
    let role = model.role();
    let et = model.infer(&samples(role, train))?.embeddings;
    let ev = model.infer(&samples(role, val))?.embeddings;
    fit_linear_probe_on(model, &et, &labels(train), &ev, &labels(val), opt)
}

/// As [`fit_linear_probe`] with embeddings already computed.
pub fn fit_linear_probe_on(
    model: &mut ModelGraph,
    train: &Tensor,
    train_y: &[usize],
    val: &Tensor,
    val_y: &[usize],
    opt: &OptimConfig,
) -> Result<TrainHistory> {
    let [w, b] = model.head_params();
    let mut probe = LinearProbe {
        weight: model.params()[w].clone(),
        bias: model.params()[b].clone(),
        dropout: model.dropout_rate(),
    };
    let history = fit_probe(&mut probe, train, train_y, val, val_y, opt)?;
    let params = model.params_mut();
    params[w].value = probe.weight.value;
    params[b].value = probe.bias.value;
    Ok(history)
}
