//! CTC: the alignment-marginalizing loss (log-space forward recursion with
//! the standard forward-backward gradient) and the blank/non-blank prefix
//! scorer used during joint decoding.

use crate::error::{RavenError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn logadd(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn extended_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Result of a CTC loss evaluation. `var` is present when the target is
/// alignable (the tape node carrying the differentiable loss); unalignable
/// targets report `loss = +inf` and should be excluded from batch means.
pub struct CtcLoss {
    pub loss: f64,
    pub var: Option<Var>,
    pub alignable: bool,
}

/// -log P(labels | log_probs) summed over the sequence. `log_probs` is a
/// (T, C) tensor of per-frame log-probabilities; `labels` must not contain
/// `blank`.
pub fn ctc_loss(
    tape: &mut Tape,
    log_probs: Var,
    labels: &[usize],
    blank: usize,
) -> Result<CtcLoss> {
    let lp = tape.value(log_probs);
    let (t_len, classes) = (lp.rows(), lp.cols());
    if labels.iter().any(|l| *l == blank) {
        return Err(RavenError::config("CTC target contains the blank id"));
    }
    if labels.iter().any(|l| *l >= classes) {
        return Err(RavenError::config("CTC target id out of vocabulary"));
    }
    let ext = extended_labels(labels, blank);
    let s_len = ext.len();

    let at = |lpd: &[f64], t: usize, k: usize| lpd[t * classes + k];
    let lpd = lp.data().to_vec();
    // Forward (alpha includes the emission at t).
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = at(&lpd, 0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(&lpd, 0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logadd(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = logadd(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + at(&lpd, t, ext[s]);
        }
    }
    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = logadd(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    if log_p == f64::NEG_INFINITY {
        return Ok(CtcLoss { loss: f64::INFINITY, var: None, alignable: false });
    }

    // Backward (beta excludes the emission at t).
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + at(&lpd, t + 1, ext[s]);
            if s + 1 < s_len {
                acc = logadd(acc, beta[(t + 1) * s_len + s + 1] + at(&lpd, t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = logadd(acc, beta[(t + 1) * s_len + s + 2] + at(&lpd, t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = acc;
        }
    }

    // d(-logP)/d lp[t][k] = -sum_{s: ext[s]=k} exp(alpha + beta - logP).
    let mut posterior = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > f64::NEG_INFINITY {
                posterior[t * classes + ext[s]] += (ab - log_p).exp();
            }
        }
    }
    let loss = -log_p;
    let out = Var(tape.len());
    let var = tape.custom_op(
        Tensor::scalar(loss),
        &[log_probs],
        Box::new(move |_vals, grads| {
            let g = grads.take(out).unwrap();
            let gv = g.item();
            let contrib: Vec<f64> = posterior.iter().map(|p| -gv * p).collect();
            grads.accumulate(log_probs, &[t_len, classes], &contrib);
            grads.restore(out, g);
        }),
    );
    Ok(CtcLoss { loss, var: Some(var), alignable: true })
}

/// A decoding step in prefix scoring: append a token or end the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcStep {
    Token(usize),
    End,
}

/// Incremental CTC prefix scoring over fixed per-frame log-probabilities.
///
/// `gamma_n[t]` / `gamma_b[t]` are the log-probabilities that the output up
/// to time t equals the prefix and the path ends in its last symbol / in
/// blank. `prefix_lp` is log P(output starts with prefix).
pub struct CtcPrefixScorer {
    lp: Vec<f64>,
    t_len: usize,
    classes: usize,
    blank: usize,
}

#[derive(Clone, Debug)]
pub struct PrefixState {
    gamma_n: Vec<f64>,
    gamma_b: Vec<f64>,
    pub prefix_lp: f64,
    last: Option<usize>,
}

impl CtcPrefixScorer {
    pub fn new(log_probs: &Tensor, blank: usize) -> Self {
        CtcPrefixScorer {
            lp: log_probs.data().to_vec(),
            t_len: log_probs.rows(),
            classes: log_probs.cols(),
            blank,
        }
    }

    fn at(&self, t: usize, k: usize) -> f64 {
        self.lp[t * self.classes + k]
    }

    /// State for the empty prefix: log P(empty prefix ...) = 0.
    pub fn initial_state(&self) -> PrefixState {
        let mut gamma_b = vec![f64::NEG_INFINITY; self.t_len];
        let mut acc = 0.0;
        for t in 0..self.t_len {
            acc += self.at(t, self.blank);
            gamma_b[t] = acc;
        }
        PrefixState {
            gamma_n: vec![f64::NEG_INFINITY; self.t_len],
            gamma_b,
            prefix_lp: 0.0,
            last: None,
        }
    }

    /// Extends a prefix with token `c`; returns the new state and the
    /// incremental score log P(g.c ...) - log P(g ...).
    pub fn extend(&self, state: &PrefixState, c: usize) -> (PrefixState, f64) {
        assert_ne!(c, self.blank, "cannot extend a prefix with blank");
        let mut gamma_n = vec![f64::NEG_INFINITY; self.t_len];
        let mut gamma_b = vec![f64::NEG_INFINITY; self.t_len];
        // phi(t): prefix g complete at t with a path that permits starting c
        // at t+1; phi(-1) covers starting at time 0.
        let phi_start = if state.last.is_none() { 0.0 } else { f64::NEG_INFINITY };
        let mut psi = f64::NEG_INFINITY; // log P(g.c ...)
        for t in 0..self.t_len {
            let phi_prev = if t == 0 {
                phi_start
            } else {
                let mut p = state.gamma_b[t - 1];
                if state.last != Some(c) {
                    p = logadd(p, state.gamma_n[t - 1]);
                }
                p
            };
            let new_emit = self.at(t, c) + phi_prev;
            psi = logadd(psi, new_emit);
            gamma_n[t] = if t == 0 {
                new_emit
            } else {
                logadd(new_emit, self.at(t, c) + gamma_n[t - 1])
            };
            gamma_b[t] = if t == 0 {
                f64::NEG_INFINITY
            } else {
                self.at(t, self.blank) + logadd(gamma_b[t - 1], gamma_n[t - 1])
            };
        }
        let incremental = psi - state.prefix_lp;
        (
            PrefixState { gamma_n, gamma_b, prefix_lp: psi, last: Some(c) },
            incremental,
        )
    }

    /// Score of ending here: log P(y = g) - log P(g ...).
    pub fn end(&self, state: &PrefixState) -> f64 {
        let complete = logadd(state.gamma_n[self.t_len - 1], state.gamma_b[self.t_len - 1]);
        complete - state.prefix_lp
    }
}

/// One-shot prefix-score query: replays `prefix` then applies `step`.
pub fn ctc_prefix_score(
    log_probs: &Tensor,
    prefix: &[usize],
    step: CtcStep,
    blank: usize,
) -> Result<f64> {
    if prefix.len() > log_probs.rows() {
        return Err(RavenError::numeric("prefix longer than the frame sequence"));
    }
    let scorer = CtcPrefixScorer::new(log_probs, blank);
    let mut state = scorer.initial_state();
    for &c in prefix {
        let (next, _) = scorer.extend(&state, c);
        state = next;
    }
    let score = match step {
        CtcStep::Token(c) => scorer.extend(&state, c).1,
        CtcStep::End => scorer.end(&state),
    };
    if score == f64::NEG_INFINITY && matches!(step, CtcStep::Token(_)) {
        return Err(RavenError::numeric("prefix unalignable within the frame sequence"));
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_logp(t: usize, c: usize) -> Tensor {
        Tensor::full(&[t, c], (1.0 / c as f64).ln())
    }

    #[test]
    fn two_frame_uniform_single_symbol() {
        // vocab {a} + blank, p = 0.5 everywhere, target "a":
        // alignments aa, a-, -a sum to 0.75.
        let mut tape = Tape::new();
        let lp = tape.leaf(uniform_logp(2, 2));
        let out = ctc_loss(&mut tape, lp, &[1], 0).unwrap();
        assert!(out.alignable);
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        // T = L = 2, distinct tokens, probability 1 on the correct path.
        let mut data = vec![f64::NEG_INFINITY; 2 * 3];
        data[0 * 3 + 1] = 0.0;
        data[1 * 3 + 2] = 0.0;
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::new(&[2, 3], data));
        let out = ctc_loss(&mut tape, lp, &[1, 2], 0).unwrap();
        assert!((out.loss - 0.0).abs() < 1e-12);
    }

    #[test]
    fn unalignable_target_flagged() {
        // Repeated token needs a separating blank: minimum T is 3.
        let mut tape = Tape::new();
        let lp = tape.leaf(uniform_logp(2, 2));
        let out = ctc_loss(&mut tape, lp, &[1, 1], 0).unwrap();
        assert!(!out.alignable);
        assert!(out.loss.is_infinite());
        assert!(out.var.is_none());
    }

    #[test]
    fn blank_in_target_rejected() {
        let mut tape = Tape::new();
        let lp = tape.leaf(uniform_logp(3, 2));
        assert!(ctc_loss(&mut tape, lp, &[0], 0).is_err());
    }

    #[test]
    fn prefix_scores_telescope_to_full_loss() {
        // Product of incremental prefix scores (including the end step)
        // equals exp(-ctc_loss) for the complete sequence.
        let t = 3;
        let c = 3;
        let mut rng = crate::rng::rng_for(5, "ctc", &[]);
        for trial in 0..50u64 {
            let _ = trial;
            let logits = Tensor::trunc_normal(&[t, c], 1.5, &mut rng);
            // Normalize rows to log-probs.
            let mut data = logits.data().to_vec();
            for row in data.chunks_mut(c) {
                let lse = {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx + row.iter().map(|r| (r - mx).exp()).sum::<f64>().ln()
                };
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            let lp = Tensor::new(&[t, c], data);
            let target = vec![1usize, 2];
            let mut tape = Tape::new();
            let lpv = tape.leaf(lp.clone());
            let loss = ctc_loss(&mut tape, lpv, &target, 0).unwrap();
            let scorer = CtcPrefixScorer::new(&lp, 0);
            let mut state = scorer.initial_state();
            let mut total = 0.0;
            for &tok in &target {
                let (next, inc) = scorer.extend(&state, tok);
                total += inc;
                state = next;
            }
            total += scorer.end(&state);
            assert!(
                (total - (-loss.loss)).abs() < 1e-9,
                "prefix telescoping {total} vs {}",
                -loss.loss
            );
        }
    }

    #[test]
    fn deterministic_logits_score_certain_paths() {
        // Probability 1 on path (a, blank, b): prefix scores are 0 / -inf.
        let mut data = vec![f64::NEG_INFINITY; 3 * 3];
        data[0 * 3 + 1] = 0.0; // a
        data[1 * 3 + 0] = 0.0; // blank
        data[2 * 3 + 2] = 0.0; // b
        let lp = Tensor::new(&[3, 3], data);
        let s_a = ctc_prefix_score(&lp, &[], CtcStep::Token(1), 0).unwrap();
        assert!((s_a - 0.0).abs() < 1e-12);
        let s_ab = ctc_prefix_score(&lp, &[1], CtcStep::Token(2), 0).unwrap();
        assert!((s_ab - 0.0).abs() < 1e-12);
        assert!(ctc_prefix_score(&lp, &[1], CtcStep::Token(1), 0).is_err());
        let s_end = ctc_prefix_score(&lp, &[1, 2], CtcStep::End, 0).unwrap();
        assert!((s_end - 0.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_blank_mass_matches_direct_computation() {
        let lp = uniform_logp(3, 2);
        let scorer = CtcPrefixScorer::new(&lp, 0);
        let state = scorer.initial_state();
        // P(y = empty) = product of blank probs = 0.5^3.
        let end = scorer.end(&state);
        assert!((end - (0.125f64).ln()).abs() < 1e-12);
    }
}
