//! N-best MMI and MWER losses on top of the encoder, and word-level edit
//! statistics.

use crate::ctc::{ctc_posterior, OccupancyGrid};
use crate::error::{FdtError, Result};
use crate::grid::{log_sum_exp, LogPosteriorGrid, Matrix};
use crate::nbest::NBestList;
use crate::tokenizer::{TokenizedUtterance, Tokenizer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    pub fn accumulate(&mut self, other: &EditStats) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Minimum edit distance with unit costs. The backtrace prefers the
/// diagonal (match or substitution), then insertion, then deletion.
pub fn levenshtein_wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<EditStats> {
    if reference.is_empty() {
        return Err(FdtError::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut stats = EditStats { ref_len: n, ..EditStats::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == cost[(i - 1) * w + j - 1] + mismatch {
                stats.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == cost[i * w + j - 1] + 1 {
            stats.insertions += 1;
            j -= 1;
        } else {
            stats.deletions += 1;
            i -= 1;
        }
    }
    Ok(stats)
}

/// Loss value and gradient w.r.t. the logits behind the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineLoss {
    pub loss: f64,
    pub grad_logits: Matrix,
    /// Hypotheses that entered the loss, reference included.
    pub hypotheses: usize,
}

struct Scored {
    pieces: Vec<u32>,
    log_prob: f64,
    occupancy: OccupancyGrid,
}

/// Distinct N-best piece sequences plus the reference, each rescored by the
/// exact CTC forward pass. Hypotheses with no path on the grid are dropped.
fn rescore_with_reference(grid: &LogPosteriorGrid, reference: &[u32], nbest: &NBestList) -> Result<(Vec<Scored>, Option<usize>)> {
    let mut out: Vec<Scored> = Vec::with_capacity(nbest.len() + 1);
    let mut candidates: Vec<&[u32]> = nbest.hyps().iter().map(|h| h.pieces.as_slice()).collect();
    candidates.push(reference);
    for pieces in candidates {
        if out.iter().any(|s| s.pieces == pieces) {
            continue;
        }
        match ctc_posterior(grid, pieces) {
            Ok(post) => out.push(Scored { pieces: pieces.to_vec(), log_prob: -post.loss, occupancy: post.occupancy }),
            Err(FdtError::InfeasibleLabel { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let ref_index = out.iter().position(|s| s.pieces == reference);
    Ok((out, ref_index))
}

/// `sum_i c_i * (occupancy_i - softmax)`: the logit gradient of any loss
/// with `d loss / d log P(h_i) = c_i`.
fn weighted_occupancy_grad(grid: &LogPosteriorGrid, scored: &[Scored], coeffs: &[f64]) -> Matrix {
    let mut grad = Matrix::zeros(grid.frames(), grid.num_classes());
    let total: f64 = coeffs.iter().sum();
    for (s, &c) in scored.iter().zip(coeffs) {
        if c != 0.0 {
            grad.add_scaled(s.occupancy.matrix(), c).expect("same shape");
        }
    }
    if total != 0.0 {
        for t in 0..grid.frames() {
            for (g, lp) in grad.row_mut(t).iter_mut().zip(grid.row(t)) {
                *g -= total * lp.exp();
            }
        }
    }
    grad
}

/// Expected error count under posteriors `softmax(log_scores)`, and its
/// gradient w.r.t. each score, `P_i * (E_i - mean E)`.
pub fn mwer_score_loss(log_scores: &[f64], errors: &[f64]) -> (f64, Vec<f64>) {
    let norm = log_sum_exp(log_scores);
    let post: Vec<f64> = log_scores.iter().map(|s| (s - norm).exp()).collect();
    let base = errors.first().copied().unwrap_or(0.0);
    // Mean taken relative to the first entry so equal errors give exact zeros.
    let mean = base + post.iter().zip(errors).map(|(p, e)| p * (e - base)).sum::<f64>();
    let loss = post.iter().zip(errors).map(|(p, e)| p * e).sum();
    let grads = post.iter().zip(errors).map(|(p, e)| p * (e - mean)).collect();
    (loss, grads)
}

/// Expected word errors over the N-best list with the reference appended,
/// posteriors renormalized from exact CTC scores.
pub fn mwer_loss_grad(
    grid: &LogPosteriorGrid,
    reference: &TokenizedUtterance,
    nbest: &NBestList,
    tokenizer: &Tokenizer,
) -> Result<BaselineLoss> {
    let (scored, _) = rescore_with_reference(grid, &reference.pieces, nbest)?;
    if scored.is_empty() {
        return Ok(BaselineLoss { loss: 0.0, grad_logits: Matrix::zeros(grid.frames(), grid.num_classes()), hypotheses: 0 });
    }
    let mut errors = Vec::with_capacity(scored.len());
    for s in &scored {
        let e = if s.pieces == reference.pieces {
            0
        } else {
            levenshtein_wer(&reference.words, &tokenizer.words_for_pieces(&s.pieces))?.errors()
        };
        errors.push(e as f64);
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.log_prob).collect();
    let (loss, score_grads) = mwer_score_loss(&scores, &errors);
    let grad_logits = weighted_occupancy_grad(grid, &scored, &score_grads);
    Ok(BaselineLoss { loss, grad_logits, hypotheses: scored.len() })
}

/// `-(log P(ref) - logsumexp_h log P(h))` with the denominator over the
/// N-best list plus the reference.
pub fn mmi_loss_grad(grid: &LogPosteriorGrid, reference: &TokenizedUtterance, nbest: &NBestList) -> Result<BaselineLoss> {
    let (scored, ref_index) = rescore_with_reference(grid, &reference.pieces, nbest)?;
    let ref_index = ref_index.ok_or(FdtError::InfeasibleLabel {
        labels: reference.pieces.len(),
        required: crate::ctc::min_frames(&reference.pieces),
        frames: grid.frames(),
    })?;
    let scores: Vec<f64> = scored.iter().map(|s| s.log_prob).collect();
    let norm = log_sum_exp(&scores);
    let loss = norm - scores[ref_index];
    // d loss / d log P_i = P_i - [i == ref]
    let coeffs: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if scored.len() == 1 { 1.0 } else { (s - norm).exp() };
            p - if i == ref_index { 1.0 } else { 0.0 }
        })
        .collect();
    let grad_logits = weighted_occupancy_grad(grid, &scored, &coeffs);
    Ok(BaselineLoss { loss, grad_logits, hypotheses: scored.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbest::{nbest_posteriors, Hypothesis};
    use crate::tokenizer::{Lexicon, PieceVocab};
    use fdt_oracles as oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wer_examples() {
        let s = levenshtein_wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 0, 0));
        assert!((s.wer() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(levenshtein_wer(&["a", "b"], &["a", "b"]).unwrap().errors(), 0);
        assert!(matches!(levenshtein_wer::<&str>(&[], &["a"]), Err(FdtError::EmptyReference)));
        let all_deleted = levenshtein_wer(&["a", "b"], &[] as &[&str]).unwrap();
        assert_eq!(all_deleted.deletions, 2);
        assert_eq!(all_deleted.wer(), 1.0);
    }

    #[test]
    fn wer_matches_exhaustive_scripts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let r: Vec<u8> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..3)).collect();
            let h: Vec<u8> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..3)).collect();
            let s = levenshtein_wer(&r, &h).unwrap();
            let scripts = oracle::minimal_edit_scripts(&r, &h);
            let got = oracle::EditCounts { substitutions: s.substitutions, insertions: s.insertions, deletions: s.deletions };
            assert!(scripts.contains(&got), "{r:?} {h:?}: {got:?} not in {scripts:?}");
        }
    }

    #[test]
    fn mwer_score_examples() {
        let (loss, grads) = mwer_score_loss(&[-1.0, -1.0], &[1.0, 3.0]);
        assert!((loss - 2.0).abs() < 1e-12);
        assert!((grads[0] + 0.5).abs() < 1e-12 && (grads[1] - 0.5).abs() < 1e-12);
        let (_, flat) = mwer_score_loss(&[-0.3, -2.0, -5.0], &[2.0, 2.0, 2.0]);
        assert!(flat.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mwer_shift_invariance() {
        let scores = [-0.4, -1.7, -3.2];
        let errors = [0.0, 2.0, 1.0];
        let (a, ga) = mwer_score_loss(&scores, &errors);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 11.0).collect();
        let (b, gb) = mwer_score_loss(&shifted, &errors);
        assert!((a - b).abs() < 1e-12);
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(ga.iter().sum::<f64>().abs() < 1e-12);
    }

    fn toy() -> (Tokenizer, TokenizedUtterance) {
        let vocab = PieceVocab::new(&["a", "b", "c"]).unwrap();
        let lexicon = Lexicon::parse("a\ta\nb\tb\nc\tc\n", &vocab).unwrap();
        let tok = Tokenizer::new(vocab, lexicon);
        let reference = tok.tokenize(&["a", "b"]).unwrap();
        (tok, reference)
    }

    #[test]
    fn mmi_reference_only_is_zero() {
        let (_, reference) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let grid = LogPosteriorGrid::from_logits(&logits).unwrap();
        let nbest = nbest_posteriors(vec![Hypothesis { pieces: reference.pieces.clone(), log_score: -1.0 }]).unwrap();
        let out = mmi_loss_grad(&grid, &reference, &nbest).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_logits.max_abs(), 0.0);
    }

    #[test]
    fn mmi_nonnegative_and_small_when_reference_dominates() {
        let (_, reference) = toy();
        let hot = [0u32, 1, 0, 2, 0];
        let rows: Vec<Vec<f64>> = hot
            .iter()
            .map(|&h| (0..4).map(|j| if j == h { 8.0 } else { 0.0 }).collect())
            .collect();
        let grid = LogPosteriorGrid::from_logits(&Matrix::from_rows(&rows).unwrap()).unwrap();
        let nbest = nbest_posteriors(vec![
            Hypothesis { pieces: vec![1, 3], log_score: -5.0 },
            Hypothesis { pieces: vec![2], log_score: -6.0 },
        ])
        .unwrap();
        let out = mmi_loss_grad(&grid, &reference, &nbest).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-3);
    }
}
