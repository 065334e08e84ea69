//! Training objectives: cross-entropy, teacher→student KL divergence, their
//! α-blend used for privileged-information transfer, and the supervised
//! contrastive loss.
//!
//! Every loss comes with its analytic gradient with respect to its
//! differentiable input (student probabilities or raw embeddings).

use log::warn;

use crate::error::{contract, Result};
use crate::nn::ops::MIN_NORM;
use crate::nn::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    contract!(
        (sum - 1.0).abs() <= 1e-9,
        "{what} must sum to 1 (got {sum})"
    );
    contract!(
        p.iter().all(|v| (0.0..=1.0).contains(v)),
        "{what} has entries outside [0, 1]: {p:?}"
    );
    Ok(())
}

/// −ln p[y], with p clamped to at least [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    contract!(
        y < p.len(),
        "class index {y} out of range for {} classes",
        p.len()
    );
    Ok(-p[y].max(PROB_FLOOR).ln())
}

/// ∂ cross_entropy / ∂p.
pub fn cross_entropy_grad(p: &[f64], y: usize) -> Vec<f64> {
    let mut g = vec![0.0; p.len()];
    if p[y] >= PROB_FLOOR {
        g[y] = -1.0 / p[y];
    }
    g
}

/// KL(t ‖ s) = Σ t_i ln(t_i/s_i). `t` is the fixed reference (teacher);
/// zero-mass reference entries contribute nothing.
pub fn kl_divergence(t: &[f64], s: &[f64]) -> Result<f64> {
    contract!(
        t.len() == s.len(),
        "KL length mismatch: {} vs {}",
        t.len(),
        s.len()
    );
    check_distribution(t, "teacher distribution")?;
    check_distribution(s, "student distribution")?;
    Ok(t
        .iter()
        .zip(s)
        .filter(|(ti, _)| **ti > 0.0)
        .map(|(ti, si)| {
            let ti = ti.max(PROB_FLOOR);
            ti * (ti / si.max(PROB_FLOOR)).ln()
        })
        .sum())
}

/// ∂ KL(t ‖ s) / ∂s. The reference `t` receives no gradient.
pub fn kl_divergence_grad(t: &[f64], s: &[f64]) -> Vec<f64> {
    t.iter()
        .zip(s)
        .map(|(ti, si)| {
            if *ti > 0.0 && *si >= PROB_FLOOR {
                -ti.max(PROB_FLOOR) / si
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LupiConfig {
    alpha: f64,
}

impl LupiConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        contract!(
            (0.0..=1.0).contains(&alpha),
            "alpha must lie in [0, 1], got {alpha}"
        );
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Student prediction f(x) paired with the teacher prediction g(x̃).
#[derive(Clone, Debug)]
pub struct ProbPair<'a> {
    student: &'a [f64],
    teacher: &'a [f64],
}

impl<'a> ProbPair<'a> {
    pub fn new(student: &'a [f64], teacher: &'a [f64]) -> Result<Self> {
        contract!(
            student.len() == teacher.len(),
            "student/teacher length mismatch"
        );
        check_distribution(student, "student probabilities")?;
        check_distribution(teacher, "teacher probabilities")?;
        Ok(Self { student, teacher })
    }

    pub fn student(&self) -> &[f64] {
        self.student
    }

    pub fn teacher(&self) -> &[f64] {
        self.teacher
    }
}

/// (1−α)·CE(f(x), y) + α·KL(g(x̃) ‖ f(x)).
pub fn lupi_loss(pair: &ProbPair<'_>, y: usize, cfg: LupiConfig) -> Result<f64> {
    let ce = cross_entropy(pair.student, y)?;
    let kl = kl_divergence(pair.teacher, pair.student)?;
    Ok((1.0 - cfg.alpha) * ce + cfg.alpha * kl)
}

/// ∂ lupi_loss / ∂f(x).
pub fn lupi_loss_grad(pair: &ProbPair<'_>, y: usize, cfg: LupiConfig) -> Vec<f64> {
    let ce = cross_entropy_grad(pair.student, y);
    let kl = kl_divergence_grad(pair.teacher, pair.student);
    ce.iter()
        .zip(&kl)
        .map(|(c, k)| (1.0 - cfg.alpha) * c + cfg.alpha * k)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Sum over contributing anchors.
    Sum,
    /// Sum divided by the number of contributing anchors.
    MeanOverAnchors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SclConfig {
    pub temperature: f64,
    pub normalize_embeddings: bool,
    pub reduction: Reduction,
    /// Width of an optional projection head used only during pretraining.
    pub projection_dim: Option<usize>,
}

impl Default for SclConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            normalize_embeddings: true,
            reduction: Reduction::Sum,
            projection_dim: None,
        }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature must be positive, got {}",
            self.temperature
        );
        contract!(
            self.projection_dim != Some(0),
            "projection head width must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupConOutput {
    pub loss: f64,
    /// Anchors with a non-empty positive set.
    pub anchors: usize,
    /// Set when no anchor had a positive; the loss is then 0.
    pub all_skipped: bool,
    /// ∂loss/∂R, same shape as the embeddings.
    pub grad: Tensor,
}

/// Supervised contrastive loss over a batch of embeddings `R[B×d]`.
///
/// For each anchor i with positives P_i (same label, i excluded) adds
/// −1/|P_i| Σ_p ln( exp(r_i·r_p/τ) / Σ_{a≠i} exp(r_i·r_a/τ) ).
/// Anchors without positives are skipped.
pub fn supcon_loss(embeddings: &Tensor, labels: &[usize], cfg: &SclConfig) -> Result<SupConOutput> {
    cfg.validate()?;
    contract!(
        embeddings.rank() == 2,
        "embeddings must be B×d, got {:?}",
        embeddings.shape()
    );
    let (b, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    contract!(b >= 2, "contrastive loss needs at least 2 samples, got {b}");
    contract!(
        labels.len() == b,
        "{} labels for {b} embeddings",
        labels.len()
    );

    let norms: Vec<f64> = (0..b)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let units: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let row = embeddings.row(i);
            if cfg.normalize_embeddings {
                // rows of (near) zero norm are treated as zero vectors
                let n = norms[i].max(MIN_NORM);
                row.iter().map(|v| v / n).collect()
            } else {
                row.to_vec()
            }
        })
        .collect();
    let dot = |i: usize, j: usize| -> f64 {
        units[i].iter().zip(&units[j]).map(|(a, c)| a * c).sum::<f64>() / cfg.temperature
    };

    let mut loss = 0.0;
    let mut anchors = 0;
    // coefficient c[i][j] = ∂loss/∂s_ij
    let mut coef = vec![0.0; b * b];
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let sims: Vec<f64> = (0..b).map(|j| if j == i { 0.0 } else { dot(i, j) }).collect();
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| sims[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&j| j != i).map(|j| (sims[j] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives.len() as f64;
        loss += positives.iter().map(|&p| lse - sims[p]).sum::<f64>() * inv_p;
        for j in (0..b).filter(|&j| j != i) {
            coef[i * b + j] += (sims[j] - lse).exp();
        }
        for &p in &positives {
            coef[i * b + p] -= inv_p;
        }
    }

    let all_skipped = anchors == 0;
    if all_skipped {
        warn!("contrastive batch of {b} samples has no positive pairs; loss is 0");
    }
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::MeanOverAnchors if anchors > 0 => 1.0 / anchors as f64,
        Reduction::MeanOverAnchors => 0.0,
    };
    loss *= scale;

    // gradient w.r.t. the (possibly normalised) rows
    let mut grad_units = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let c = coef[i * b + j] * scale / cfg.temperature;
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_units[i][k] += c * units[j][k];
                grad_units[j][k] += c * units[i][k];
            }
        }
    }
    let mut grad = Vec::with_capacity(b * d);
    for i in 0..b {
        if cfg.normalize_embeddings {
            let n = norms[i].max(MIN_NORM);
            let ug: f64 = units[i].iter().zip(&grad_units[i]).map(|(u, g)| u * g).sum();
            grad.extend(
                grad_units[i]
                    .iter()
                    .zip(&units[i])
                    .map(|(g, u)| (g - u * ug) / n),
            );
        } else {
            grad.extend_from_slice(&grad_units[i]);
        }
    }

    Ok(SupConOutput {
        loss,
        anchors,
        all_skipped,
        grad: Tensor::new(vec![b, d], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::nn::ops::{l2_normalize, softmax};
    use crate::nn::RngStream;
    use proptest::prelude::*;

    fn random_probs(k: usize, rng: &mut RngStream) -> Vec<f64> {
        let z = Tensor::from_vec((0..k).map(|_| 2.0 * rng.normal()).collect());
        softmax(&z).into_data()
    }

    /// Literal evaluation with explicit index sets I, P_i, A_i and no
    /// log-sum-exp rewriting.
    fn supcon_oracle(r: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let n = r.len();
        let dot = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let p_set: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if p_set.is_empty() {
                continue;
            }
            let a_set: Vec<usize> = (0..n).filter(|&a| a != i).collect();
            let mut inner = 0.0;
            for &p in &p_set {
                let num = (dot(&r[i], &r[p]) / tau).exp();
                let mut den = 0.0;
                for &a in &a_set {
                    den += (dot(&r[i], &r[a]) / tau).exp();
                }
                inner += (num / den).ln();
            }
            total += -inner / p_set.len() as f64;
        }
        total
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25, 0.75], 1).unwrap() - 0.287682).abs() < 1e-6);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(cross_entropy(&[1.0, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn kl_examples() {
        assert!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-12);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.130812).abs() < 1e-6);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn lupi_examples() {
        let (s, t) = ([0.5, 0.5], [0.75, 0.25]);
        let pair = ProbPair::new(&s, &t).unwrap();
        let ce = cross_entropy(&s, 0).unwrap();
        let kl = kl_divergence(&t, &s).unwrap();
        assert_eq!(lupi_loss(&pair, 0, LupiConfig::new(0.0).unwrap()).unwrap(), ce);
        assert_eq!(lupi_loss(&pair, 0, LupiConfig::new(1.0).unwrap()).unwrap(), kl);
        let half = lupi_loss(&pair, 0, LupiConfig::new(0.5).unwrap()).unwrap();
        assert!((half - 0.411980).abs() < 1e-6);
        assert!(LupiConfig::new(1.5).is_err());
        assert!(LupiConfig::new(-0.1).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = RngStream::new(31);
        for _ in 0..20 {
            let k = 2 + (rng.next_u64() % 3) as usize;
            let y = (rng.next_u64() % k as u64) as usize;
            let s = random_probs(k, &mut rng);
            let t = random_probs(k, &mut rng);
            let check = |f: &dyn Fn(&[f64]) -> f64, g: Vec<f64>| {
                let num = finite_diff_grad(f, &s, 1e-6).unwrap();
                assert!(max_relative_error(&g, &num) < 1e-4);
            };
            check(&|p| -p[y].ln(), cross_entropy_grad(&s, y));
            check(
                &|p| t.iter().zip(p).map(|(a, b)| a * (a / b).ln()).sum(),
                kl_divergence_grad(&t, &s),
            );
            for alpha in [0.0, 0.5, 1.0] {
                let cfg = LupiConfig::new(alpha).unwrap();
                let pair = ProbPair::new(&s, &t).unwrap();
                check(
                    &|p| {
                        (1.0 - alpha) * -p[y].ln()
                            + alpha * t.iter().zip(p).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                    },
                    lupi_loss_grad(&pair, y, cfg),
                );
            }
        }
    }

    #[test]
    fn supcon_two_same_label_is_zero() {
        let r = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 0.9, 0.3, 0.4]).unwrap();
        let out = supcon_loss(&r, &[1, 1], &SclConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(!out.all_skipped);
        assert!(out.grad.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn supcon_two_different_labels_skips() {
        let r = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = supcon_loss(&r, &[0, 1], &SclConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.all_skipped);
    }

    #[test]
    fn supcon_rejects_single_sample() {
        let r = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(supcon_loss(&r, &[0], &SclConfig::default()).is_err());
        let bad = SclConfig {
            temperature: 0.0,
            ..SclConfig::default()
        };
        let r = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(supcon_loss(&r, &[0, 0], &bad).is_err());
    }

    #[test]
    fn supcon_matches_oracle_b4() {
        let mut rng = RngStream::new(41);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v = Tensor::from_vec((0..3).map(|_| rng.normal()).collect());
                l2_normalize(&v).unwrap().into_data()
            })
            .collect();
        let labels = [0, 0, 1, 1];
        let r = Tensor::new(vec![4, 3], rows.concat()).unwrap();
        let out = supcon_loss(&r, &labels, &SclConfig::default()).unwrap();
        let oracle = supcon_oracle(&rows, &labels, 0.1);
        assert!((out.loss - oracle).abs() < 1e-9, "{} vs {}", out.loss, oracle);
    }

    #[test]
    fn supcon_mean_reduction() {
        let mut rng = RngStream::new(42);
        let r = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 0, 1, 1, 2];
        let sum = supcon_loss(&r, &labels, &SclConfig::default()).unwrap();
        let cfg = SclConfig {
            reduction: Reduction::MeanOverAnchors,
            ..SclConfig::default()
        };
        let mean = supcon_loss(&r, &labels, &cfg).unwrap();
        assert_eq!(sum.anchors, 4);
        assert!((mean.loss - sum.loss / 4.0).abs() < 1e-12);
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(43);
        for case in 0..20 {
            let b = 2 + (rng.next_u64() % 6) as usize;
            let d = 1 + (rng.next_u64() % 4) as usize;
            let labels: Vec<usize> = (0..b).map(|_| (rng.next_u64() % 2) as usize).collect();
            let cfg = SclConfig {
                temperature: [0.1, 0.5, 1.0][case % 3],
                normalize_embeddings: case % 2 == 0,
                reduction: if case % 4 < 2 { Reduction::Sum } else { Reduction::MeanOverAnchors },
                projection_dim: None,
            };
            let raw: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
            let r = Tensor::new(vec![b, d], raw.clone()).unwrap();
            let out = supcon_loss(&r, &labels, &cfg).unwrap();
            let num = finite_diff_grad(
                |v| {
                    let t = Tensor::new(vec![b, d], v.to_vec()).unwrap();
                    supcon_loss(&t, &labels, &cfg).unwrap().loss
                },
                &raw,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(out.grad.data(), &num) < 1e-4);
        }
    }

    #[test]
    fn supcon_moving_positive_closer_lowers_loss() {
        // anchor, one positive, one negative
        let labels = [0, 0, 1];
        let loss_at = |angle: f64| {
            let r = Tensor::new(
                vec![3, 2],
                vec![1.0, 0.0, angle.cos(), angle.sin(), -1.0, 0.2],
            )
            .unwrap();
            supcon_loss(&r, &labels, &SclConfig::default()).unwrap().loss
        };
        let mut prev = loss_at(2.0);
        for step in 1..=20 {
            let cur = loss_at(2.0 - 0.1 * step as f64);
            assert!(cur < prev);
            prev = cur;
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let kl = kl_divergence(&[a, 1.0 - a], &[b, 1.0 - b]).unwrap();
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn lupi_is_linear_in_alpha(z in prop::collection::vec(-4.0f64..4.0, 4), y in 0usize..2, alpha in 0.0f64..=1.0) {
            let s = softmax(&Tensor::from_vec(z[..2].to_vec())).into_data();
            let t = softmax(&Tensor::from_vec(z[2..].to_vec())).into_data();
            let pair = ProbPair::new(&s, &t).unwrap();
            let at = |a: f64| lupi_loss(&pair, y, LupiConfig::new(a).unwrap()).unwrap();
            prop_assert!((at(alpha) - ((1.0 - alpha) * at(0.0) + alpha * at(1.0))).abs() < 1e-12);
        }

        #[test]
        fn supcon_permutation_and_scale_invariance(
            raw in prop::collection::vec(-2.0f64..2.0, 12),
            labels in prop::collection::vec(0usize..2, 4),
            scales in prop::collection::vec(0.1f64..10.0, 4),
            shift in 1usize..4,
        ) {
            let cfg = SclConfig::default();
            let r = Tensor::new(vec![4, 3], raw.clone()).unwrap();
            prop_assume!((0..4).all(|i| r.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let base = supcon_loss(&r, &labels, &cfg).unwrap().loss;

            let order: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let permuted: Vec<f64> = order.iter().flat_map(|&i| r.row(i).to_vec()).collect();
            let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let p = supcon_loss(&Tensor::new(vec![4, 3], permuted).unwrap(), &plabels, &cfg).unwrap().loss;
            prop_assert!((p - base).abs() < 1e-9);

            let scaled: Vec<f64> = (0..4).flat_map(|i| r.row(i).iter().map(|v| v * scales[i]).collect::<Vec<_>>()).collect();
            let s = supcon_loss(&Tensor::new(vec![4, 3], scaled).unwrap(), &labels, &cfg).unwrap().loss;
            prop_assert!((s - base).abs() < 1e-9);
        }
    }
}
