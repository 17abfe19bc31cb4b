//! CTC over encoder states: loss and gradient, forward-backward forced
//! alignment, incremental prefix scoring and blank-threshold frame pruning.
//!
//! Lattice arithmetic runs in log space at 64-bit precision regardless of the
//! precision the network runs at.

use crate::error::{Error, Result};
use crate::util::{argmax, log_add, log_sum_exp};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Per-frame log posteriors over output classes plus blank, `frames × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosteriors {
    log_probs: Vec<f64>,
    frames: usize,
    classes: usize,
    blank: usize,
}

impl CtcPosteriors {
    pub fn new(log_probs: Vec<f64>, frames: usize, classes: usize, blank: usize) -> Result<Self> {
        if frames == 0 || classes < 2 {
            return Err(Error::invalid("posteriors need at least one frame and two classes"));
        }
        if log_probs.len() != frames * classes {
            return Err(Error::invalid(format!(
                "expected {frames}x{classes} log probs, got {}",
                log_probs.len()
            )));
        }
        if blank >= classes {
            return Err(Error::invalid(format!("blank {blank} outside {classes} classes")));
        }
        if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::invalid("posteriors contain NaN or +inf"));
        }
        Ok(Self {
            log_probs,
            frames,
            classes,
            blank,
        })
    }

    /// Normalize arbitrary per-frame scores with a log-softmax.
    pub fn from_logits(logits: &[f64], frames: usize, classes: usize, blank: usize) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        let mut lp = Vec::with_capacity(logits.len());
        for row in logits.chunks(classes.max(1)) {
            let z = log_sum_exp(row);
            lp.extend(row.iter().map(|v| v - z));
        }
        Self::new(lp, frames, classes, blank)
    }

    /// From probability rows (zeros become `-inf`).
    pub fn from_probs(rows: &[Vec<f64>], blank: usize) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("ragged probability rows"));
        }
        let lp = rows.iter().flatten().map(|p| p.ln()).collect();
        Self::new(lp, rows.len(), classes, blank)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.log_probs
    }

    #[inline]
    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.classes + k]
    }

    pub fn blank_prob(&self, t: usize) -> f64 {
        self.at(t, self.blank).exp()
    }

    /// Keep only the listed frames, in the given order.
    pub fn select_frames(&self, kept: &[usize]) -> Result<Self> {
        let mut lp = Vec::with_capacity(kept.len() * self.classes);
        for &t in kept {
            if t >= self.frames {
                return Err(Error::invalid(format!("frame {t} out of range {}", self.frames)));
            }
            lp.extend_from_slice(self.row(t));
        }
        Self::new(lp, kept.len(), self.classes, self.blank)
    }
}

/// Number of label repeats (adjacent equal labels), each of which forces a blank.
pub fn repeats(labels: &[u32]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward-backward quantities over the blank-interleaved label lattice.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    extended: Vec<usize>,
    frames: usize,
    log_alpha: Vec<f64>,
    log_beta: Vec<f64>,
    log_likelihood: f64,
}

impl CtcLattice {
    pub fn new(post: &CtcPosteriors, labels: &[u32]) -> Result<Self> {
        for &l in labels {
            if l as usize >= post.classes || l as usize == post.blank {
                return Err(Error::invalid(format!("label {l} is blank or outside the class range")));
            }
        }
        let reps = repeats(labels);
        let needed = labels.len() + reps;
        if post.frames < needed {
            return Err(Error::SequenceTooLong {
                labels: labels.len(),
                repeats: reps,
                needed,
                frames: post.frames,
            });
        }

        let blank = post.blank;
        let mut extended = Vec::with_capacity(2 * labels.len() + 1);
        extended.push(blank);
        for &l in labels {
            extended.push(l as usize);
            extended.push(blank);
        }
        let s_len = extended.len();
        let t_len = post.frames;
        let skip_ok = |s: usize| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2];

        let mut log_alpha = vec![NEG_INF; t_len * s_len];
        log_alpha[0] = post.at(0, extended[0]);
        if s_len > 1 {
            log_alpha[1] = post.at(0, extended[1]);
        }
        for t in 1..t_len {
            let (prev, cur) = log_alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            for s in 0..s_len {
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if skip_ok(s) {
                    acc = log_add(acc, prev[s - 2]);
                }
                cur[s] = acc + post.at(t, extended[s]);
            }
        }

        // beta excludes the emission at its own frame
        let mut log_beta = vec![NEG_INF; t_len * s_len];
        log_beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if s_len > 1 {
            log_beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let next = |s2: usize| log_beta[(t + 1) * s_len + s2] + post.at(t + 1, extended[s2]);
                let mut acc = next(s);
                if s + 1 < s_len {
                    acc = log_add(acc, next(s + 1));
                }
                if s + 2 < s_len && skip_ok(s + 2) {
                    acc = log_add(acc, next(s + 2));
                }
                log_beta[t * s_len + s] = acc;
            }
        }

        let last = (t_len - 1) * s_len;
        let log_likelihood = if s_len > 1 {
            log_add(log_alpha[last + s_len - 1], log_alpha[last + s_len - 2])
        } else {
            log_alpha[last]
        };
        if log_likelihood == NEG_INF {
            return Err(Error::invalid("label sequence has zero probability under the posteriors"));
        }
        Ok(Self {
            extended,
            frames: t_len,
            log_alpha,
            log_beta,
            log_likelihood,
        })
    }

    pub fn num_labels(&self) -> usize {
        (self.extended.len() - 1) / 2
    }

    pub fn loss(&self) -> f64 {
        -self.log_likelihood
    }

    fn log_occupancy(&self, t: usize, s: usize) -> f64 {
        let i = t * self.extended.len() + s;
        self.log_alpha[i] + self.log_beta[i] - self.log_likelihood
    }

    /// Posterior probability of each lattice state at each frame, `frames × (2U+1)`.
    pub fn state_occupancy(&self) -> Vec<Vec<f64>> {
        (0..self.frames)
            .map(|t| (0..self.extended.len()).map(|s| self.log_occupancy(t, s).exp()).collect())
            .collect()
    }

    /// `gamma[u][t]`: posterior probability of being in the state of label `u` at frame `t`.
    pub fn label_occupancy(&self) -> Vec<Vec<f64>> {
        (0..self.num_labels())
            .map(|u| (0..self.frames).map(|t| self.log_occupancy(t, 2 * u + 1).exp()).collect())
            .collect()
    }

    /// Emission frame per label: argmax of its occupancy, earliest frame on ties.
    pub fn alignment(&self) -> Alignment {
        let frames = self
            .label_occupancy()
            .iter()
            .map(|g| argmax(g))
            .collect();
        Alignment { frames }
    }

    /// Gradient of the loss with respect to each log posterior, `frames × classes`.
    pub fn grad_log_probs(&self, classes: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.frames * classes];
        for t in 0..self.frames {
            for (s, &k) in self.extended.iter().enumerate() {
                grad[t * classes + k] -= self.log_occupancy(t, s).exp();
            }
        }
        grad
    }
}

/// Emission frame per label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub frames: Vec<usize>,
}

pub fn ctc_loss(post: &CtcPosteriors, labels: &[u32]) -> Result<f64> {
    Ok(CtcLattice::new(post, labels)?.loss())
}

pub fn ctc_loss_and_grad(post: &CtcPosteriors, labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    let lattice = CtcLattice::new(post, labels)?;
    Ok((lattice.loss(), lattice.grad_log_probs(post.classes)))
}

pub fn forced_alignment(post: &CtcPosteriors, labels: &[u32]) -> Result<Alignment> {
    Ok(CtcLattice::new(post, labels)?.alignment())
}

/// Frames whose blank probability does not exceed `threshold`, in order.
pub fn prune_blank_frames(post: &CtcPosteriors, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("prune threshold {threshold} outside (0, 1]")));
    }
    Ok((0..post.frames).filter(|&t| post.blank_prob(t) <= threshold).collect())
}

/// Incremental CTC prefix score for one hypothesis.
///
/// `r_nonblank[t]` / `r_blank[t]` are the log probabilities that the first
/// `t + 1` frames collapse to exactly this prefix, ending in a label frame or a
/// blank frame respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    r_nonblank: Vec<f64>,
    r_blank: Vec<f64>,
    last_token: Option<u32>,
    /// Frame that maximizes the emission term of the newest label.
    pub last_emission_frame: Option<usize>,
    /// Log probability that the output starts with this prefix.
    pub score: f64,
    /// Set once the prefix can no longer fit in the available frames.
    pub exhausted: bool,
}

impl PrefixState {
    /// State for the empty prefix.
    pub fn initial(post: &CtcPosteriors) -> Self {
        let mut r_blank = Vec::with_capacity(post.frames);
        let mut acc = 0.0;
        for t in 0..post.frames {
            acc += post.at(t, post.blank);
            r_blank.push(acc);
        }
        Self {
            r_nonblank: vec![NEG_INF; post.frames],
            r_blank,
            last_token: None,
            last_emission_frame: None,
            score: 0.0,
            exhausted: false,
        }
    }

    /// Log probability that the whole output is exactly this prefix.
    pub fn full_score(&self) -> f64 {
        let last = self.r_blank.len() - 1;
        log_add(self.r_nonblank[last], self.r_blank[last])
    }

    pub fn extend(&self, token: u32, post: &CtcPosteriors) -> PrefixState {
        let frames = post.frames;
        let c = token as usize;
        let mut rn = vec![NEG_INF; frames];
        let mut rb = vec![NEG_INF; frames];
        let mut emit = vec![NEG_INF; frames];
        if self.last_token.is_none() {
            rn[0] = post.at(0, c);
            emit[0] = rn[0];
        }
        let repeat = self.last_token == Some(token);
        for t in 1..frames {
            let phi = if repeat {
                self.r_blank[t - 1]
            } else {
                log_add(self.r_blank[t - 1], self.r_nonblank[t - 1])
            };
            emit[t] = phi + post.at(t, c);
            rn[t] = log_add(rn[t - 1], phi) + post.at(t, c);
            rb[t] = log_add(rb[t - 1], rn[t - 1]) + post.at(t, post.blank);
        }
        let score = log_sum_exp(&emit);
        let exhausted = score == NEG_INF;
        PrefixState {
            r_nonblank: rn,
            r_blank: rb,
            last_token: Some(token),
            last_emission_frame: if exhausted {
                self.last_emission_frame
            } else {
                Some(argmax(&emit))
            },
            // never above the parent; guards against last-ulp rounding
            score: score.min(self.score),
            exhausted,
        }
    }
}

/// Free-function form of [`PrefixState::extend`].
pub fn prefix_extend(state: &PrefixState, token: u32, post: &CtcPosteriors) -> PrefixState {
    state.extend(token, post)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, classes: usize) -> CtcPosteriors {
        let p = 1.0 / classes as f64;
        CtcPosteriors::from_probs(&vec![vec![p; classes]; frames], classes - 1).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let loss = ctc_loss(&uniform(1, 2), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let loss = ctc_loss(&uniform(2, 2), &[0]).unwrap();
        assert!((loss - -(0.75f64).ln()).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn three_frames_two_labels() {
        let loss = ctc_loss(&uniform(3, 3), &[0, 1]).unwrap();
        assert!((loss - -(5.0f64 / 27.0).ln()).abs() < 1e-12);
        assert!((loss - 1.6864).abs() < 1e-4);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let err = ctc_loss(&uniform(2, 2), &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { needed: 3, .. }));
        assert!(ctc_loss(&uniform(3, 2), &[0, 0]).is_ok());
    }

    #[test]
    fn blank_label_is_rejected() {
        assert!(ctc_loss(&uniform(3, 3), &[2]).is_err());
    }

    #[test]
    fn occupancy_example() {
        // rows: (a .1, blank .9), (a .9, blank .1)
        let post = CtcPosteriors::from_probs(&[vec![0.1, 0.9], vec![0.9, 0.1]], 1).unwrap();
        let lattice = CtcLattice::new(&post, &[0]).unwrap();
        let g = &lattice.label_occupancy()[0];
        assert!((g[0] - 0.10 / 0.91).abs() < 1e-12);
        assert!((g[1] - 0.90 / 0.91).abs() < 1e-12);
        assert_eq!(lattice.alignment().frames, vec![1]);
    }

    #[test]
    fn one_hot_path_aligns_to_its_frame() {
        let post = CtcPosteriors::from_probs(
            &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            1,
        )
        .unwrap();
        assert_eq!(forced_alignment(&post, &[0]).unwrap().frames, vec![1]);
    }

    #[test]
    fn prefix_full_score_equals_negative_loss() {
        let post = CtcPosteriors::from_logits(
            &[0.3, -1.0, 0.2, 1.1, 0.5, -0.3, -0.7, 0.9, 0.0, 0.4, 0.8, -0.2, 0.1, 0.1, 0.6],
            5,
            3,
            2,
        )
        .unwrap();
        let labels = [0u32, 1, 1];
        let mut state = PrefixState::initial(&post);
        for &l in &labels {
            let next = state.extend(l, &post);
            assert!(next.score <= state.score);
            state = next;
        }
        let loss = ctc_loss(&post, &labels).unwrap();
        assert!((state.full_score() + loss).abs() < 1e-9);
    }

    #[test]
    fn one_hot_prefix_emission_frame() {
        // path: blank, blank, a, blank
        let post = CtcPosteriors::from_probs(
            &[vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            1,
        )
        .unwrap();
        let s = PrefixState::initial(&post).extend(0, &post);
        assert_eq!(s.last_emission_frame, Some(2));
        assert!(s.score.abs() < 1e-12);
    }

    #[test]
    fn extending_beyond_frames_exhausts() {
        let post = uniform(2, 2);
        let s = PrefixState::initial(&post).extend(0, &post).extend(0, &post);
        assert!(s.exhausted);
        assert_eq!(s.score, f64::NEG_INFINITY);
    }

    #[test]
    fn pruning_thresholds() {
        let post = CtcPosteriors::from_probs(
            &[vec![0.01, 0.99], vec![0.5, 0.5], vec![0.01, 0.99]],
            1,
        )
        .unwrap();
        assert_eq!(prune_blank_frames(&post, 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(prune_blank_frames(&post, 0.95).unwrap(), vec![1]);
        assert!(prune_blank_frames(&post, 0.0).is_err());
        assert!(prune_blank_frames(&post, 1.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let post = CtcPosteriors::from_logits(&logits, 5, 4, 3).unwrap();
        let labels = [1u32, 0, 0];
        let (_, grad) = ctc_loss_and_grad(&post, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..post.as_slice().len() {
            let mut plus = post.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let lp = ctc_loss(&CtcPosteriors::new(plus, 5, 4, 3).unwrap(), &labels).unwrap();
            let lm = ctc_loss(&CtcPosteriors::new(minus, 5, 4, 3).unwrap(), &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!((numeric - grad[i]).abs() / denom < 1e-4, "entry {i}: {numeric} vs {}", grad[i]);
        }
    }
}
