//! The four architectures: frame student S (and the frames-only baseline E,
//! which shares its layout), the privileged feature teacher T_p and the
//! frame+feature fusion teacher T_f.
//!
//! A [`ModelGraph`] is a small fixed DAG: an optional frame branch, an
//! optional feature branch, an optional fusion block applied to their
//! concatenation, and a decision head (dropout → dense(2) → softmax). The
//! embedding is the output of the last encoder block, taken before dropout.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::data::container::{read_tensor, write_tensor};
use crate::data::manifest::Manifest;
use crate::error::{contract, Error, Result};
use crate::nn::ops::{self, Mode};
use crate::nn::{Parameter, RngStream, Tensor};

pub const CLASSES: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const TEACHER_HIDDEN: usize = 30;
pub const FUSION_WIDTH: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// Frames-only student trained under a teacher.
    Student,
    /// Features-only teacher.
    PrivilegedTeacher,
    /// Frames + features teacher.
    FusionTeacher,
    /// Frames-only model trained without privileged information.
    Baseline,
}

impl Role {
    pub fn uses_frames(self) -> bool {
        !matches!(self, Role::PrivilegedTeacher)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Role::PrivilegedTeacher | Role::FusionTeacher)
    }

    pub fn code(self) -> &'static str {
        match self {
            Role::Student => "S",
            Role::PrivilegedTeacher => "T_p",
            Role::FusionTeacher => "T_f",
            Role::Baseline => "E",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "S" => Some(Role::Student),
            "T_p" => Some(Role::PrivilegedTeacher),
            "T_f" => Some(Role::FusionTeacher),
            "E" => Some(Role::Baseline),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Frame CNN: five 3×3 conv+ReLU stages, flatten, dense+ReLU embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentArch {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv_filters: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub embed_dim: usize,
    pub dropout: f64,
}

impl StudentArch {
    pub const FILTERS: [usize; 5] = [6, 8, 12, 16, 20];
    pub const STRIDES: [usize; 5] = [2, 2, 2, 2, 1];

    pub fn new(input_channels: usize, input_height: usize, input_width: usize, embed_dim: usize) -> Self {
        Self {
            input_channels,
            input_height,
            input_width,
            conv_filters: Self::FILTERS.to_vec(),
            conv_strides: Self::STRIDES.to_vec(),
            embed_dim,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// 5 greyscale 224×224 frames per second of window, 768-unit embedding.
    pub fn paper_scale(window_seconds: usize) -> Self {
        Self::new(5 * window_seconds, 224, 224, 768)
    }

    /// Spatial size after each conv stage.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_height, self.input_width)];
        for &s in &self.conv_strides {
            let (h, w) = *dims.last().unwrap();
            dims.push((ops::same_output_len(h, s), ops::same_output_len(w, s)));
        }
        dims
    }

    pub fn flatten_dim(&self) -> usize {
        let (h, w) = *self.spatial_chain().last().unwrap();
        self.conv_filters.last().copied().unwrap_or(self.input_channels) * h * w
    }

    fn validate(&self) -> Result<()> {
        contract!(self.input_channels >= 1, "student needs at least one input channel");
        contract!(
            self.conv_filters.len() == 5 && self.conv_strides.len() == 5,
            "student has exactly five conv stages"
        );
        contract!(self.embed_dim >= 1, "embedding width must be positive");
        contract!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1)"
        );
        let chain = self.spatial_chain();
        if self.input_height < 8 || self.input_width < 8 {
            let stage = chain
                .iter()
                .zip(&self.conv_strides)
                .position(|(&(h, w), &s)| s > 1 && (h < 2 || w < 2))
                .map(|i| i + 1)
                .unwrap_or(1);
            return Err(Error::Contract(format!(
                "input {}×{} is too small for the conv stack: stride-2 stage conv{stage} receives a {:?} map (minimum input is 8×8)",
                self.input_height, self.input_width, chain[stage - 1]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrivTeacherArch {
    pub n_features: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl PrivTeacherArch {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            hidden: TEACHER_HIDDEN,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionTeacherArch {
    pub frame: StudentArch,
    pub n_features: usize,
    /// Width of each branch projection before concatenation.
    pub branch_dim: usize,
    pub fusion_dim: usize,
    pub dropout: f64,
}

impl FusionTeacherArch {
    pub fn new(frame: StudentArch, n_features: usize) -> Self {
        Self {
            frame,
            n_features,
            branch_dim: TEACHER_HIDDEN,
            fusion_dim: FUSION_WIDTH,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Frames(StudentArch),
    Privileged(PrivTeacherArch),
    Fusion(FusionTeacherArch),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    Dense,
    Relu,
    Logistic,
    Flatten,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    kind: LayerKind,
    /// (weight, bias) indices into the parameter list.
    params: Option<(usize, usize)>,
}

/// Structural description of one layer, for audits.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub block: &'static str,
    pub kind: LayerKind,
    pub output_shape: Vec<usize>,
    pub param_names: Vec<String>,
}

/// Per-sample input: the modalities a model consumes.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sample<'a> {
    pub frames: Option<&'a Tensor>,
    pub features: Option<&'a Tensor>,
}

impl<'a> Sample<'a> {
    pub fn frames(frames: &'a Tensor) -> Self {
        Self {
            frames: Some(frames),
            features: None,
        }
    }

    pub fn features(features: &'a Tensor) -> Self {
        Self {
            frames: None,
            features: Some(features),
        }
    }

    pub fn both(frames: &'a Tensor, features: &'a Tensor) -> Self {
        Self {
            frames: Some(frames),
            features: Some(features),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// B × penultimate_dim, before dropout.
    pub embeddings: Tensor,
    /// B × 2 class probabilities.
    pub probs: Tensor,
}

#[derive(Clone, Debug)]
struct SampleTrace {
    frame_acts: Vec<Tensor>,
    /// Conv patch matrices of the frame branch, per layer (empty elsewhere).
    frame_cols: Vec<Vec<f64>>,
    feature_acts: Vec<Tensor>,
    fusion_acts: Vec<Tensor>,
    mask: Tensor,
    dropped: Tensor,
    probs: Tensor,
}

impl SampleTrace {
    fn embedding(&self) -> &Tensor {
        self.fusion_acts
            .last()
            .or(self.frame_acts.last())
            .or(self.feature_acts.last())
            .expect("model has an encoder")
    }
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    role: Role,
    arch: Architecture,
    params: Vec<Parameter>,
    frame_branch: Vec<Layer>,
    feature_branch: Vec<Layer>,
    fusion: Vec<Layer>,
    head: (usize, usize),
    dropout: f64,
    penultimate_dim: usize,
    trace: Option<Vec<SampleTrace>>,
}

struct Builder<'r> {
    params: Vec<Parameter>,
    rng: &'r mut RngStream,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> Layer {
        let w = Parameter::glorot(
            format!("{name}.weight"),
            &[out_c, in_c, ops::KERNEL, ops::KERNEL],
            in_c * 9,
            out_c * 9,
            self.rng,
        );
        let b = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        self.params.push(w);
        self.params.push(b);
        Layer {
            kind: LayerKind::Conv { stride },
            params: Some((self.params.len() - 2, self.params.len() - 1)),
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Layer {
        let w = Parameter::glorot(format!("{name}.weight"), &[fan_out, fan_in], fan_in, fan_out, self.rng);
        let b = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        self.params.push(w);
        self.params.push(b);
        Layer {
            kind: LayerKind::Dense,
            params: Some((self.params.len() - 2, self.params.len() - 1)),
        }
    }

    fn frame_trunk(&mut self, prefix: &str, arch: &StudentArch) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut channels = arch.input_channels;
        for (i, (&f, &s)) in arch.conv_filters.iter().zip(&arch.conv_strides).enumerate() {
            layers.push(self.conv(&format!("{prefix}conv{}", i + 1), channels, f, s));
            layers.push(act(LayerKind::Relu));
            channels = f;
        }
        layers.push(act(LayerKind::Flatten));
        layers.push(self.dense(&format!("{prefix}embed"), arch.flatten_dim(), arch.embed_dim));
        layers.push(act(LayerKind::Relu));
        layers
    }
}

fn act(kind: LayerKind) -> Layer {
    Layer { kind, params: None }
}

fn frames_graph(role: Role, arch: StudentArch, rng: &mut RngStream) -> Result<ModelGraph> {
    arch.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        rng,
    };
    let frame_branch = b.frame_trunk("", &arch);
    let head = b.dense("head", arch.embed_dim, CLASSES).params.unwrap();
    Ok(ModelGraph {
        role,
        penultimate_dim: arch.embed_dim,
        dropout: arch.dropout,
        arch: Architecture::Frames(arch),
        params: b.params,
        frame_branch,
        feature_branch: Vec::new(),
        fusion: Vec::new(),
        head,
        trace: None,
    })
}

/// conv×5 → flatten → dense(embed, ReLU) → dropout → dense(2) → softmax.
pub fn build_student(arch: StudentArch, rng: &mut RngStream) -> Result<ModelGraph> {
    frames_graph(Role::Student, arch, rng)
}

/// Same layout as the student, trained without a teacher.
pub fn build_baseline(arch: StudentArch, rng: &mut RngStream) -> Result<ModelGraph> {
    frames_graph(Role::Baseline, arch, rng)
}

/// dense(30, logistic) → dropout → dense(2) → softmax.
pub fn build_privileged_teacher(arch: PrivTeacherArch, rng: &mut RngStream) -> Result<ModelGraph> {
    contract!(
        arch.n_features >= 1,
        "privileged teacher needs at least one feature, got {}",
        arch.n_features
    );
    contract!(arch.hidden >= 1, "hidden width must be positive");
    contract!((0.0..1.0).contains(&arch.dropout), "dropout must lie in [0, 1)");
    let mut b = Builder {
        params: Vec::new(),
        rng,
    };
    let feature_branch = vec![b.dense("hidden", arch.n_features, arch.hidden), act(LayerKind::Logistic)];
    let head = b.dense("head", arch.hidden, CLASSES).params.unwrap();
    Ok(ModelGraph {
        role: Role::PrivilegedTeacher,
        penultimate_dim: arch.hidden,
        dropout: arch.dropout,
        arch: Architecture::Privileged(arch),
        params: b.params,
        frame_branch: Vec::new(),
        feature_branch,
        fusion: Vec::new(),
        head,
        trace: None,
    })
}

/// Frame trunk → dense(30, ReLU) and features → dense(30, ReLU), concatenated
/// into an affine 60-unit ReLU fusion layer, then the usual head.
pub fn build_fusion_teacher(arch: FusionTeacherArch, rng: &mut RngStream) -> Result<ModelGraph> {
    arch.frame.validate()?;
    contract!(
        arch.n_features >= 1,
        "fusion teacher needs at least one feature, got {}",
        arch.n_features
    );
    contract!(
        arch.branch_dim >= 1 && arch.fusion_dim >= 1,
        "fusion widths must be positive"
    );
    contract!((0.0..1.0).contains(&arch.dropout), "dropout must lie in [0, 1)");
    let mut b = Builder {
        params: Vec::new(),
        rng,
    };
    let mut frame_branch = b.frame_trunk("frame.", &arch.frame);
    frame_branch.push(b.dense("frame.project", arch.frame.embed_dim, arch.branch_dim));
    frame_branch.push(act(LayerKind::Relu));
    let feature_branch = vec![
        b.dense("feature.hidden", arch.n_features, arch.branch_dim),
        act(LayerKind::Relu),
    ];
    let fusion = vec![
        b.dense("fusion", 2 * arch.branch_dim, arch.fusion_dim),
        act(LayerKind::Relu),
    ];
    let head = b.dense("head", arch.fusion_dim, CLASSES).params.unwrap();
    Ok(ModelGraph {
        role: Role::FusionTeacher,
        penultimate_dim: arch.fusion_dim,
        dropout: arch.dropout,
        arch: Architecture::Fusion(arch),
        params: b.params,
        frame_branch,
        feature_branch,
        fusion,
        head,
        trace: None,
    })
}

/// Builds the graph matching a role and architecture record.
pub fn build(role: Role, arch: Architecture, rng: &mut RngStream) -> Result<ModelGraph> {
    match (role, arch) {
        (Role::Student, Architecture::Frames(a)) => build_student(a, rng),
        (Role::Baseline, Architecture::Frames(a)) => build_baseline(a, rng),
        (Role::PrivilegedTeacher, Architecture::Privileged(a)) => build_privileged_teacher(a, rng),
        (Role::FusionTeacher, Architecture::Fusion(a)) => build_fusion_teacher(a, rng),
        (role, arch) => Err(Error::Contract(format!(
            "architecture {arch:?} does not fit role {role}"
        ))),
    }
}

impl ModelGraph {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn penultimate_dim(&self) -> usize {
        self.penultimate_dim
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Indices of the decision-head parameters (weight, bias).
    pub fn head_params(&self) -> [usize; 2] {
        [self.head.0, self.head.1]
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        contract!((0.0..1.0).contains(&rate), "dropout must lie in [0, 1), got {rate}");
        self.dropout = rate;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Flat copy of all parameter values, in parameter order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// Layer list with output shapes, for structural audits.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut describe = |block: &'static str, layers: &[Layer], mut shape: Vec<usize>| -> Vec<usize> {
            for l in layers {
                shape = match l.kind {
                    LayerKind::Conv { stride } => {
                        let f = self.params[l.params.unwrap().0].value.shape()[0];
                        vec![
                            f,
                            ops::same_output_len(shape[1], stride),
                            ops::same_output_len(shape[2], stride),
                        ]
                    }
                    LayerKind::Dense => vec![self.params[l.params.unwrap().0].value.shape()[0]],
                    LayerKind::Flatten => vec![shape.iter().product()],
                    LayerKind::Relu | LayerKind::Logistic => shape,
                };
                out.push(LayerInfo {
                    block,
                    kind: l.kind,
                    output_shape: shape.clone(),
                    param_names: l
                        .params
                        .map(|(w, b)| vec![self.params[w].name.clone(), self.params[b].name.clone()])
                        .unwrap_or_default(),
                });
            }
            shape
        };
        let frame_in = match &self.arch {
            Architecture::Frames(a) => Some(a),
            Architecture::Fusion(a) => Some(&a.frame),
            Architecture::Privileged(_) => None,
        }
        .map(|a| vec![a.input_channels, a.input_height, a.input_width]);
        let feature_in = match &self.arch {
            Architecture::Privileged(a) => Some(vec![a.n_features]),
            Architecture::Fusion(a) => Some(vec![a.n_features]),
            Architecture::Frames(_) => None,
        };
        let mut widths = 0;
        if let Some(s) = frame_in {
            widths += describe("frame", &self.frame_branch, s)[0];
        }
        if let Some(s) = feature_in {
            widths += describe("feature", &self.feature_branch, s)[0];
        }
        if !self.fusion.is_empty() {
            describe("fusion", &self.fusion, vec![widths]);
        }
        describe(
            "head",
            &[Layer {
                kind: LayerKind::Dense,
                params: Some(self.head),
            }],
            vec![self.penultimate_dim],
        );
        out
    }

    fn check_sample(&self, sample: &Sample<'_>) -> Result<()> {
        let role = self.role;
        contract!(
            sample.frames.is_some() == role.uses_frames(),
            "modality mismatch: model {role} {} frames",
            if role.uses_frames() { "requires" } else { "does not accept" }
        );
        contract!(
            sample.features.is_some() == role.uses_features(),
            "modality mismatch: model {role} {} features",
            if role.uses_features() { "requires" } else { "does not accept" }
        );
        Ok(())
    }

    /// Returns the activations (inputs of every layer when `keep`, then the
    /// output) and, when `keep`, the conv patch matrices in layer order.
    fn branch_forward(&self, layers: &[Layer], input: Tensor, keep: bool) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        let mut cols = Vec::new();
        let mut cur = input;
        for l in layers {
            let next = match l.kind {
                LayerKind::Conv { stride } => {
                    let (w, b) = l.params.unwrap();
                    let (out, patches) = ops::conv2d_forward_cols(&cur, &self.params[w].value, &self.params[b].value, stride)?;
                    if keep {
                        cols.push(patches);
                    }
                    out
                }
                LayerKind::Dense => {
                    let (w, b) = l.params.unwrap();
                    ops::dense_forward(&cur, &self.params[w].value, &self.params[b].value)?
                }
                LayerKind::Relu => ops::relu(&cur),
                LayerKind::Logistic => ops::logistic(&cur),
                LayerKind::Flatten => cur.clone().flatten(),
            };
            if keep {
                acts.push(cur);
            }
            cur = next;
        }
        acts.push(cur);
        Ok((acts, cols))
    }

    fn branch_backward(&mut self, layers: &[Layer], acts: &[Tensor], cols: &[Vec<f64>], mut grad: Tensor) -> Tensor {
        let mut conv_idx = cols.len();
        for (i, l) in layers.iter().enumerate().rev() {
            let input = &acts[i];
            grad = match l.kind {
                LayerKind::Conv { stride } => {
                    let (w, b) = l.params.unwrap();
                    let (wp, rest) = split_pair(&mut self.params, w, b);
                    conv_idx -= 1;
                    // raw frames need no gradient
                    let want_dx = i > 0;
                    let dx = ops::conv2d_backward_cols(
                        input.shape(),
                        &cols[conv_idx],
                        &wp.value,
                        &grad,
                        stride,
                        wp.grad.data_mut(),
                        rest.grad.data_mut(),
                        want_dx,
                    );
                    if !want_dx {
                        return dx;
                    }
                    dx
                }
                LayerKind::Dense => {
                    let (w, b) = l.params.unwrap();
                    let (wp, rest) = split_pair(&mut self.params, w, b);
                    ops::dense_backward(input, &wp.value, &grad, wp.grad.data_mut(), rest.grad.data_mut())
                }
                LayerKind::Relu => ops::relu_backward(input, &grad),
                LayerKind::Logistic => ops::logistic_backward(&acts[i + 1], &grad),
                LayerKind::Flatten => grad.reshape(input.shape().to_vec()).expect("flatten shape"),
            };
        }
        grad
    }

    fn encode(&self, sample: &Sample<'_>, keep: bool) -> Result<SampleTrace> {
        self.check_sample(sample)?;
        let (frame_acts, frame_cols) = match sample.frames {
            Some(x) => self.branch_forward(&self.frame_branch, x.clone(), keep)?,
            None => (Vec::new(), Vec::new()),
        };
        let feature_acts = match sample.features {
            Some(x) => {
                contract!(x.rank() == 1, "feature input must be a vector, got {:?}", x.shape());
                self.branch_forward(&self.feature_branch, x.clone(), keep)?.0
            }
            None => Vec::new(),
        };
        let fusion_acts = if self.fusion.is_empty() {
            Vec::new()
        } else {
            let joined = Tensor::concat(&[frame_acts.last().unwrap(), feature_acts.last().unwrap()]);
            self.branch_forward(&self.fusion, joined, keep)?.0
        };
        Ok(SampleTrace {
            frame_acts,
            frame_cols,
            feature_acts,
            fusion_acts,
            mask: Tensor::zeros(&[0]),
            dropped: Tensor::zeros(&[0]),
            probs: Tensor::zeros(&[0]),
        })
    }

    /// Decision head on a single embedding: returns (dropped input, mask, probs).
    pub(crate) fn head_forward(&self, embedding: &Tensor, mode: Mode, rng: &mut RngStream) -> Result<(Tensor, Tensor, Tensor)> {
        let (dropped, mask) = ops::dropout(embedding, self.dropout, mode, rng)?;
        let logits = ops::dense_forward(&dropped, &self.params[self.head.0].value, &self.params[self.head.1].value)?;
        Ok((dropped, mask, ops::softmax(&logits)))
    }

    /// Accumulates head gradients from ∂L/∂probs; returns ∂L/∂embedding.
    pub(crate) fn head_backward(&mut self, dropped: &Tensor, mask: &Tensor, probs: &Tensor, grad_probs: &Tensor) -> Tensor {
        let glogits = ops::softmax_backward(probs, grad_probs);
        let (w, b) = self.head;
        let (wp, bp) = split_pair(&mut self.params, w, b);
        let gdropped = ops::dense_backward(dropped, &wp.value, &glogits, wp.grad.data_mut(), bp.grad.data_mut());
        ops::dropout_backward(mask, &gdropped)
    }

    fn run(&self, batch: &[Sample<'_>], mode: Mode, rng: &mut RngStream, keep: bool) -> Result<(ForwardOutput, Vec<SampleTrace>)> {
        contract!(!batch.is_empty(), "empty batch");
        let mut traces = Vec::with_capacity(batch.len());
        let mut emb = Vec::with_capacity(batch.len() * self.penultimate_dim);
        let mut probs = Vec::with_capacity(batch.len() * CLASSES);
        for sample in batch {
            let mut t = self.encode(sample, keep)?;
            let (dropped, mask, p) = self.head_forward(t.embedding(), mode, rng)?;
            emb.extend_from_slice(t.embedding().data());
            probs.extend_from_slice(p.data());
            if keep {
                t.dropped = dropped;
                t.mask = mask;
                t.probs = p;
                traces.push(t);
            }
        }
        let out = ForwardOutput {
            embeddings: Tensor::new(vec![batch.len(), self.penultimate_dim], emb)?.ensure_finite("model forward")?,
            probs: Tensor::new(vec![batch.len(), CLASSES], probs)?.ensure_finite("model forward")?,
        };
        Ok((out, traces))
    }

    /// Forward pass that records activations for a subsequent [`backward`](Self::backward).
    pub fn forward(&mut self, batch: &[Sample<'_>], mode: Mode, rng: &mut RngStream) -> Result<ForwardOutput> {
        let (out, traces) = self.run(batch, mode, rng, true)?;
        self.trace = Some(traces);
        Ok(out)
    }

    /// Forward pass without recording; used for inference.
    pub fn predict(&self, batch: &[Sample<'_>], mode: Mode, rng: &mut RngStream) -> Result<ForwardOutput> {
        Ok(self.run(batch, mode, rng, false)?.0)
    }

    /// Eval-mode inference in chunks.
    pub fn infer(&self, batch: &[Sample<'_>]) -> Result<ForwardOutput> {
        let mut rng = RngStream::new(0);
        let mut emb = Vec::new();
        let mut probs = Vec::new();
        for chunk in batch.chunks(256) {
            let out = self.predict(chunk, Mode::Eval, &mut rng)?;
            emb.extend(out.embeddings.into_data());
            probs.extend(out.probs.into_data());
        }
        Ok(ForwardOutput {
            embeddings: Tensor::new(vec![batch.len(), self.penultimate_dim], emb)?,
            probs: Tensor::new(vec![batch.len(), CLASSES], probs)?,
        })
    }

    /// Reverse pass for the batch recorded by the last [`forward`](Self::forward).
    ///
    /// Gradients of the loss with respect to the embeddings (B×d) and/or the
    /// probabilities (B×2) are propagated to every parameter and added to
    /// `Parameter::grad`. Without `grad_probs` the head is not visited.
    pub fn backward(&mut self, grad_embeddings: Option<&Tensor>, grad_probs: Option<&Tensor>) -> Result<()> {
        let traces = self
            .trace
            .take()
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        let b = traces.len();
        if let Some(g) = grad_embeddings {
            contract!(
                g.shape() == [b, self.penultimate_dim],
                "embedding gradient {:?} does not match batch {b}×{}",
                g.shape(),
                self.penultimate_dim
            );
        }
        if let Some(g) = grad_probs {
            contract!(
                g.shape() == [b, CLASSES],
                "probability gradient {:?} does not match batch {b}×{CLASSES}",
                g.shape()
            );
        }
        let (frame_branch, feature_branch, fusion) =
            (self.frame_branch.clone(), self.feature_branch.clone(), self.fusion.clone());
        for (i, t) in traces.iter().enumerate() {
            let mut gemb = match grad_embeddings {
                Some(g) => Tensor::from_vec(g.row(i).to_vec()),
                None => Tensor::zeros(&[self.penultimate_dim]),
            };
            if let Some(gp) = grad_probs {
                let gp = Tensor::from_vec(gp.row(i).to_vec());
                let g = self.head_backward(&t.dropped, &t.mask, &t.probs, &gp);
                gemb.add_scaled(&g, 1.0);
            }
            let (gframe, gfeature) = if fusion.is_empty() {
                if t.frame_acts.is_empty() {
                    (None, Some(gemb))
                } else {
                    (Some(gemb), None)
                }
            } else {
                let gjoined = self.branch_backward(&fusion, &t.fusion_acts, &[], gemb);
                let split = t.frame_acts.last().unwrap().len();
                let d = gjoined.into_data();
                (
                    Some(Tensor::from_vec(d[..split].to_vec())),
                    Some(Tensor::from_vec(d[split..].to_vec())),
                )
            };
            if let Some(g) = gframe {
                self.branch_backward(&frame_branch, &t.frame_acts, &t.frame_cols, g);
            }
            if let Some(g) = gfeature {
                self.branch_backward(&feature_branch, &t.feature_acts, &[], g);
            }
        }
        Ok(())
    }

    /// Writes the checkpoint directory: `model.txt` descriptor plus one tensor
    /// file per named parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        m.set("role", self.role.code());
        m.set("dropout", self.dropout);
        match &self.arch {
            Architecture::Frames(a) => {
                m.set("arch", "frames");
                put_student(&mut m, "", a);
            }
            Architecture::Privileged(a) => {
                m.set("arch", "privileged");
                m.set("n_features", a.n_features);
                m.set("hidden", a.hidden);
                m.set("arch_dropout", a.dropout);
            }
            Architecture::Fusion(a) => {
                m.set("arch", "fusion");
                put_student(&mut m, "frame.", &a.frame);
                m.set("n_features", a.n_features);
                m.set("branch_dim", a.branch_dim);
                m.set("fusion_dim", a.fusion_dim);
                m.set("arch_dropout", a.dropout);
            }
        }
        m.set(
            "params",
            self.params.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(","),
        );
        m.write(&dir.join("model.txt"))?;
        for p in &self.params {
            write_tensor(&dir.join(format!("{}.prc", p.name)), &p.value)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelGraph> {
        let path = dir.join("model.txt");
        let m = Manifest::read(&path)?;
        let role = Role::from_code(m.get_str(&path, "role")?)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: "unknown role".into(),
            })?;
        let arch = match m.get_str(&path, "arch")? {
            "frames" => Architecture::Frames(get_student(&m, &path, "")?),
            "privileged" => Architecture::Privileged(PrivTeacherArch {
                n_features: m.get(&path, "n_features")?,
                hidden: m.get(&path, "hidden")?,
                dropout: m.get(&path, "arch_dropout")?,
            }),
            "fusion" => Architecture::Fusion(FusionTeacherArch {
                frame: get_student(&m, &path, "frame.")?,
                n_features: m.get(&path, "n_features")?,
                branch_dim: m.get(&path, "branch_dim")?,
                fusion_dim: m.get(&path, "fusion_dim")?,
                dropout: m.get(&path, "arch_dropout")?,
            }),
            other => {
                return Err(Error::Format {
                    path,
                    msg: format!("unknown architecture {other}"),
                })
            }
        };
        let mut model = build(role, arch, &mut RngStream::new(0))?;
        model.dropout = m.get(&path, "dropout")?;
        let names = m.get_str(&path, "params")?;
        let expected: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
        if names.split(',').collect::<Vec<_>>() != expected {
            return Err(Error::Format {
                path,
                msg: "parameter list does not match the architecture".into(),
            });
        }
        for p in model.params.iter_mut() {
            let file = dir.join(format!("{}.prc", p.name));
            let value = read_tensor(&file)?;
            if value.shape() != p.value.shape() {
                return Err(Error::LengthMismatch {
                    path: file,
                    msg: format!("expected shape {:?}, found {:?}", p.value.shape(), value.shape()),
                });
            }
            p.value = value;
        }
        Ok(model)
    }
}

fn put_student(m: &mut Manifest, prefix: &str, a: &StudentArch) {
    m.set(&format!("{prefix}input_channels"), a.input_channels);
    m.set(&format!("{prefix}input_height"), a.input_height);
    m.set(&format!("{prefix}input_width"), a.input_width);
    m.set(&format!("{prefix}conv_filters"), join(&a.conv_filters));
    m.set(&format!("{prefix}conv_strides"), join(&a.conv_strides));
    m.set(&format!("{prefix}embed_dim"), a.embed_dim);
    m.set(&format!("{prefix}dropout"), a.dropout);
}

fn get_student(m: &Manifest, path: &Path, prefix: &str) -> Result<StudentArch> {
    Ok(StudentArch {
        input_channels: m.get(path, &format!("{prefix}input_channels"))?,
        input_height: m.get(path, &format!("{prefix}input_height"))?,
        input_width: m.get(path, &format!("{prefix}input_width"))?,
        conv_filters: m.get_list(path, &format!("{prefix}conv_filters"))?,
        conv_strides: m.get_list(path, &format!("{prefix}conv_strides"))?,
        embed_dim: m.get(path, &format!("{prefix}embed_dim"))?,
        dropout: m.get(path, &format!("{prefix}dropout"))?,
    })
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_pair(params: &mut [Parameter], w: usize, b: usize) -> (&mut Parameter, &mut Parameter) {
    debug_assert!(w < b);
    let (lo, hi) = params.split_at_mut(b);
    (&mut lo[w], &mut hi[0])
}
