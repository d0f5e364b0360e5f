//! Connectionist temporal classification loss.
//!
//! The loss is computed with log-domain forward/backward recursions over the
//! blank-augmented label sequence `y' = [blank, y1, blank, y2, ..., yU, blank]`.
//! Both `alpha_t(s)` and `beta_t(s)` include the emission at frame `t`, so for
//! every frame
//!
//! ```text
//! P(y | x) = sum_s alpha_t(s) * beta_t(s) / p_t(y'_s)
//! ```
//!
//! Blank is vocabulary index 0.

use crate::error::{Error, Result};
use crate::nn::tensor::{log_add, log_softmax, softmax_unchecked};
use crate::nn::{Graph, Tensor, Var};

pub use crate::vocab::BLANK;

/// Labels interleaved with blanks; length `2U + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedLabelSeq(Vec<usize>);

impl AugmentedLabelSeq {
    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether the lattice may skip from state `s - 2` to `s`.
    fn can_skip_into(&self, s: usize) -> bool {
        s >= 2 && self.0[s] != BLANK && self.0[s] != self.0[s - 2]
    }
}

pub fn augment_labels(labels: &[usize]) -> Result<AugmentedLabelSeq> {
    if labels.is_empty() {
        return Err(Error::Invalid("CTC target sequences must be non-empty".into()));
    }
    if labels.contains(&BLANK) {
        return Err(Error::Invalid("CTC targets must not contain the blank symbol".into()));
    }
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(BLANK);
    for &l in labels {
        out.push(l);
        out.push(BLANK);
    }
    Ok(AugmentedLabelSeq(out))
}

/// Minimum number of frames able to emit `labels`: one per label plus one
/// blank between every pair of equal adjacent labels.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-domain forward/backward tables.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    labels: AugmentedLabelSeq,
    log_alpha: Vec<Vec<f64>>,
    log_beta: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
    log_likelihood: f64,
}

impl CtcLattice {
    pub fn frames(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn labels(&self) -> &AugmentedLabelSeq {
        &self.labels
    }

    pub fn log_alpha(&self) -> &[Vec<f64>] {
        &self.log_alpha
    }

    pub fn log_beta(&self) -> &[Vec<f64>] {
        &self.log_beta
    }

    /// Per-frame log softmax outputs.
    pub fn log_probs(&self) -> &[Vec<f64>] {
        &self.log_probs
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Log of `sum_s alpha_t(s) beta_t(s) / p_t(y'_s)` at zero-based frame `t`.
    fn log_posterior_sum(&self, t: usize) -> f64 {
        let sym = self.labels.symbols();
        let mut acc = f64::NEG_INFINITY;
        for (s, &v) in sym.iter().enumerate() {
            let a = self.log_alpha[t][s];
            let b = self.log_beta[t][s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            acc = log_add(acc, a + b - self.log_probs[t][v]);
        }
        acc
    }
}

/// `sum_s alpha_t(s) beta_t(s) / p_t(y'_s)` in the linear domain for a
/// one-based frame index `t`.
pub fn posterior_sum(lattice: &CtcLattice, t: usize) -> Result<f64> {
    if t == 0 || t > lattice.frames() {
        return Err(Error::Invalid(format!(
            "frame {t} outside 1..={}",
            lattice.frames()
        )));
    }
    Ok(lattice.log_posterior_sum(t - 1).exp())
}

#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln P(y | x)`.
    pub loss: f64,
    /// Gradient of the loss w.r.t. the logits (`T x V`).
    pub grad: Tensor,
    pub lattice: CtcLattice,
}

fn check_inputs(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 || logits.cols() < 2 {
        return Err(Error::dims("ctc_loss", logits.shape(), &[1, 2]));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= logits.cols()) {
        return Err(Error::Invalid(format!(
            "label {bad} outside vocabulary of size {}",
            logits.cols()
        )));
    }
    Ok(())
}

pub fn ctc_loss(logits: &Tensor, labels: &[usize]) -> Result<CtcOutput> {
    check_inputs(logits, labels)?;
    let aug = augment_labels(labels)?;
    let frames = logits.rows();
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::Infeasible { frames, required });
    }
    let sym = aug.symbols();
    let states = sym.len();
    let log_probs: Vec<Vec<f64>> = (0..frames).map(|t| log_softmax(logits.row(t))).collect();
    let emit = |t: usize, s: usize| log_probs[t][sym[s]];

    let mut log_alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    log_alpha[0][0] = emit(0, 0);
    log_alpha[0][1] = emit(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let prev = &log_alpha[t - 1];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if aug.can_skip_into(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            if acc != f64::NEG_INFINITY {
                log_alpha[t][s] = acc + emit(t, s);
            }
        }
    }

    let mut log_beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    let last = frames - 1;
    log_beta[last][states - 1] = emit(last, states - 1);
    log_beta[last][states - 2] = emit(last, states - 2);
    for t in (0..last).rev() {
        for s in 0..states {
            let next = &log_beta[t + 1];
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && aug.can_skip_into(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            if acc != f64::NEG_INFINITY {
                log_beta[t][s] = acc + emit(t, s);
            }
        }
    }

    let log_likelihood = log_add(log_alpha[last][states - 1], log_alpha[last][states - 2]);
    if log_likelihood == f64::NEG_INFINITY {
        return Err(Error::Infeasible { frames, required });
    }
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite("ctc_loss"));
    }

    let vocab = logits.cols();
    let mut grad = Tensor::zeros(frames, vocab);
    for t in 0..frames {
        let probs = softmax_unchecked(logits.row(t));
        let mut occupancy = vec![f64::NEG_INFINITY; vocab];
        for (s, &v) in sym.iter().enumerate() {
            let (a, b) = (log_alpha[t][s], log_beta[t][s]);
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            occupancy[v] = log_add(occupancy[v], a + b - log_probs[t][v]);
        }
        for v in 0..vocab {
            let gamma = if occupancy[v] == f64::NEG_INFINITY {
                0.0
            } else {
                (occupancy[v] - log_likelihood).exp()
            };
            grad.set(t, v, probs[v] - gamma);
        }
    }

    Ok(CtcOutput {
        loss: -log_likelihood,
        grad,
        lattice: CtcLattice {
            labels: aug,
            log_alpha,
            log_beta,
            log_probs,
            log_likelihood,
        },
    })
}

/// Records the CTC loss of `logits` on a graph.
pub fn ctc_loss_node(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let out = ctc_loss(g.value(logits), labels)?;
    g.external_loss(logits, out.loss, out.grad)
}

/// Largest `V^T` the brute-force oracle will enumerate.
pub const BRUTEFORCE_MAX_FRAMES: usize = 8;
pub const BRUTEFORCE_MAX_VOCAB: usize = 4;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `-ln P(y | x)` by summing over every length-`T` path; `+inf` when no path
/// collapses to `labels`.
pub fn ctc_loss_bruteforce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_inputs(logits, labels)?;
    let (frames, vocab) = (logits.rows(), logits.cols());
    if frames > BRUTEFORCE_MAX_FRAMES || vocab > BRUTEFORCE_MAX_VOCAB {
        return Err(Error::Invalid(format!(
            "brute-force CTC limited to T <= {BRUTEFORCE_MAX_FRAMES}, V <= {BRUTEFORCE_MAX_VOCAB}; got T={frames}, V={vocab}"
        )));
    }
    let probs: Vec<Vec<f64>> = (0..frames).map(|t| softmax_unchecked(logits.row(t))).collect();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == labels {
            total += path.iter().enumerate().map(|(t, &v)| probs[t][v]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY });
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_examples() {
        assert_eq!(augment_labels(&[1]).unwrap().symbols(), &[0, 1, 0]);
        assert_eq!(augment_labels(&[1, 2]).unwrap().symbols(), &[0, 1, 0, 2, 0]);
        assert_eq!(augment_labels(&[1, 1]).unwrap().symbols(), &[0, 1, 0, 1, 0]);
        assert!(augment_labels(&[]).is_err());
        assert!(augment_labels(&[0]).is_err());
    }

    #[test]
    fn single_frame_single_label() {
        let logits = Tensor::from_vec(1, 3, vec![0.2, 1.0, -0.5]).unwrap();
        let p = softmax_unchecked(logits.row(0));
        let out = ctc_loss(&logits, &[1]).unwrap();
        assert!((out.loss + p[1].ln()).abs() < 1e-14);
        assert!((posterior_sum(&out.lattice, 1).unwrap() - p[1]).abs() < 1e-14);
        assert!((ctc_loss_bruteforce(&logits, &[1]).unwrap() + p[1].ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_enumerated_by_hand() {
        let logits = Tensor::from_vec(2, 3, vec![0.1, 0.7, -0.3, -0.4, 0.2, 0.9]).unwrap();
        let p1 = softmax_unchecked(logits.row(0));
        let p2 = softmax_unchecked(logits.row(1));
        let expected = p1[0] * p2[1] + p1[1] * p2[0] + p1[1] * p2[1];
        let out = ctc_loss(&logits, &[1]).unwrap();
        assert!((out.loss + expected.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniform_two_symbols() {
        let logits = Tensor::zeros(2, 2);
        let out = ctc_loss(&logits, &[1]).unwrap();
        assert!((out.loss + 0.75f64.ln()).abs() < 1e-15);
        assert!((ctc_loss_bruteforce(&logits, &[1]).unwrap() + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infeasible_alignment_is_reported() {
        let logits = Tensor::zeros(2, 3);
        assert!(matches!(
            ctc_loss(&logits, &[1, 1]),
            Err(Error::Infeasible { frames: 2, required: 3 })
        ));
        assert_eq!(ctc_loss_bruteforce(&logits, &[1, 1]).unwrap(), f64::INFINITY);
        assert!(matches!(ctc_loss(&logits, &[1, 2, 1]), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        let logits = Tensor::zeros(9, 3);
        assert!(ctc_loss_bruteforce(&logits, &[1]).is_err());
    }

    #[test]
    fn per_frame_gradient_sums_to_zero() {
        let logits = Tensor::from_vec(
            4,
            3,
            vec![0.1, 0.5, -0.2, 1.0, -1.0, 0.3, 0.0, 0.2, 0.4, -0.7, 0.8, 0.1],
        )
        .unwrap();
        let out = ctc_loss(&logits, &[1, 2]).unwrap();
        for t in 0..4 {
            let s: f64 = out.grad.row(t).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let frames = 400;
        let logits = Tensor::from_vec(frames, 4, (0..frames * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect()).unwrap();
        let labels: Vec<usize> = (0..60).map(|i| 1 + i % 3).collect();
        let out = ctc_loss(&logits, &labels).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0]), Vec::<usize>::new());
    }
}
