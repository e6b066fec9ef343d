//! CTC prefix beam search and N-best posterior weights.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{FdtError, Result};
use crate::grid::{log_add, log_sum_exp, LogPosteriorGrid, BLANK};

/// A decoded piece sequence with its approximate `log P(pieces | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub pieces: Vec<u32>,
    pub log_score: f64,
}

/// Ranking used everywhere hypotheses are ordered: higher score first, then
/// shorter, then lexicographically smaller piece ids.
pub fn rank_order(a_pieces: &[u32], a_score: f64, b_pieces: &[u32], b_score: f64) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_pieces.len().cmp(&b_pieces.len()))
        .then_with(|| a_pieces.cmp(b_pieces))
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore { blank: f64::NEG_INFINITY, non_blank: f64::NEG_INFINITY };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Top-`n` distinct collapsed prefixes by total prefix probability, keeping
/// `beam` prefixes alive after every frame.
pub fn prefix_beam_search(grid: &LogPosteriorGrid, beam: usize, n: usize) -> Result<Vec<Hypothesis>> {
    if n == 0 || beam < n {
        return Err(FdtError::InvalidArgument(format!("need beam >= n >= 1, got beam {beam}, n {n}")));
    }
    let mut beams: Vec<(Vec<u32>, PrefixScore)> =
        vec![(Vec::new(), PrefixScore { blank: 0.0, non_blank: f64::NEG_INFINITY })];
    for t in 0..grid.frames() {
        let row = grid.row(t);
        let mut next: HashMap<Vec<u32>, PrefixScore> = HashMap::with_capacity(beams.len() * row.len());
        for (prefix, score) in &beams {
            let total = score.total();
            let last = prefix.last().copied();
            let blank_lp = row[BLANK as usize];
            if blank_lp > f64::NEG_INFINITY {
                let entry = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                entry.blank = log_add(entry.blank, total + blank_lp);
            }
            for (c, &lp) in row.iter().enumerate().skip(1) {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let c = c as u32;
                if last == Some(c) {
                    // Repeat without a blank stays on the same prefix.
                    let entry = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                    entry.non_blank = log_add(entry.non_blank, score.non_blank + lp);
                    let mut extended = prefix.clone();
                    extended.push(c);
                    let entry = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    entry.non_blank = log_add(entry.non_blank, score.blank + lp);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(c);
                    let entry = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    entry.non_blank = log_add(entry.non_blank, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<u32>, PrefixScore, f64)> = next
            .into_iter()
            .map(|(p, s)| {
                let total = s.total();
                (p, s, total)
            })
            .filter(|(_, _, total)| *total > f64::NEG_INFINITY)
            .collect();
        ranked.sort_by(|a, b| rank_order(&a.0, a.2, &b.0, b.2));
        ranked.truncate(beam);
        beams = ranked.into_iter().map(|(p, s, _)| (p, s)).collect();
    }
    let mut hyps: Vec<Hypothesis> =
        beams.into_iter().map(|(pieces, s)| Hypothesis { log_score: s.total(), pieces }).collect();
    hyps.sort_by(|a, b| rank_order(&a.pieces, a.log_score, &b.pieces, b.log_score));
    hyps.truncate(n);
    Ok(hyps)
}

/// Hypotheses in rank order with weights normalized over the list.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    hyps: Vec<Hypothesis>,
    posteriors: Vec<f64>,
}

impl NBestList {
    pub fn hyps(&self) -> &[Hypothesis] {
        &self.hyps
    }

    pub fn posteriors(&self) -> &[f64] {
        &self.posteriors
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Hypothesis, f64)> {
        self.hyps.iter().zip(self.posteriors.iter().copied())
    }

    pub fn top(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

/// `posterior_i = exp(s_i) / sum_j exp(s_j)`, computed in log space.
pub fn nbest_posteriors(mut hyps: Vec<Hypothesis>) -> Result<NBestList> {
    if hyps.is_empty() {
        return Err(FdtError::EmptyNBest);
    }
    hyps.sort_by(|a, b| rank_order(&a.pieces, a.log_score, &b.pieces, b.log_score));
    let scores: Vec<f64> = hyps.iter().map(|h| h.log_score).collect();
    let norm = log_sum_exp(&scores);
    let posteriors = if norm == f64::NEG_INFINITY {
        vec![1.0 / hyps.len() as f64; hyps.len()]
    } else {
        scores.iter().map(|s| (s - norm).exp()).collect()
    };
    Ok(NBestList { hyps, posteriors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Matrix;
    use fdt_oracles as oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LogPosteriorGrid {
        let logits = Matrix::from_vec(
            frames,
            classes,
            (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        LogPosteriorGrid::from_logits(&logits).unwrap()
    }

    fn hyp(pieces: &[u32], log_score: f64) -> Hypothesis {
        Hypothesis { pieces: pieces.to_vec(), log_score }
    }

    #[test]
    fn single_frame_tie_puts_empty_first() {
        let g = LogPosteriorGrid::new(Matrix::filled(1, 2, 0.5f64.ln())).unwrap();
        let hyps = prefix_beam_search(&g, 2, 2).unwrap();
        assert_eq!(hyps.len(), 2);
        assert!(hyps[0].pieces.is_empty());
        assert_eq!(hyps[1].pieces, vec![1]);
        for h in &hyps {
            assert!((h.log_score - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_grid_decodes_exactly() {
        let hot = [0u32, 0, 1, 0, 0, 2];
        let rows: Vec<Vec<f64>> = hot
            .iter()
            .map(|&h| (0..3).map(|j| if j == h { 0.0 } else { f64::NEG_INFINITY }).collect())
            .collect();
        let g = LogPosteriorGrid::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        let hyps = prefix_beam_search(&g, 4, 1).unwrap();
        assert_eq!(hyps[0].pieces, vec![1, 2]);
        assert!(hyps[0].log_score.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_beam() {
        let g = LogPosteriorGrid::new(Matrix::filled(1, 2, 0.5f64.ln())).unwrap();
        assert!(prefix_beam_search(&g, 1, 2).is_err());
        assert!(prefix_beam_search(&g, 1, 0).is_err());
    }

    #[test]
    fn wide_beam_top1_is_exact_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let frames = rng.random_range(1..=6);
            let classes = rng.random_range(2..=4);
            let g = random_grid(&mut rng, frames, classes);
            let classes_p = oracle::collapse_class_probabilities(&g.matrix().to_rows());
            let (best, p) = classes_p
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.len().cmp(&a.0.len())).then_with(|| b.0.cmp(a.0)))
                .unwrap();
            let top = &prefix_beam_search(&g, 64, 1).unwrap()[0];
            assert_eq!(&top.pieces, best);
            assert!((top.log_score.exp() - p).abs() <= 1e-10 * p);
        }
    }

    #[test]
    fn hypotheses_are_distinct_and_ranked() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_grid(&mut rng, 12, 5);
        let hyps = prefix_beam_search(&g, 16, 8).unwrap();
        for (i, a) in hyps.iter().enumerate() {
            assert!(a.log_score <= 1e-6);
            for b in &hyps[i + 1..] {
                assert_ne!(a.pieces, b.pieces);
                assert!(a.log_score >= b.log_score);
            }
        }
    }

    #[test]
    fn wider_beams_never_lose_top1_probability() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let g = random_grid(&mut rng, 10, 5);
            let mut prev = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8, 16, 32, 64] {
                let top = prefix_beam_search(&g, beam, 1).unwrap()[0].log_score;
                assert!(top >= prev - 1e-12, "seed {seed} beam {beam}: {top} < {prev}");
                prev = top;
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let one = nbest_posteriors(vec![hyp(&[1], -3.0)]).unwrap();
        assert_eq!(one.posteriors(), &[1.0]);
        let two = nbest_posteriors(vec![hyp(&[1], -1.0), hyp(&[2], -1.0)]).unwrap();
        assert_eq!(two.posteriors(), &[0.5, 0.5]);
        let skew = nbest_posteriors(vec![hyp(&[2], 0.2f64.ln()), hyp(&[1], 0.6f64.ln())]).unwrap();
        assert_eq!(skew.hyps()[0].pieces, vec![1]);
        assert!((skew.posteriors()[0] - 0.75).abs() < 1e-12);
        assert!((skew.posteriors()[1] - 0.25).abs() < 1e-12);
        assert!(matches!(nbest_posteriors(vec![]), Err(FdtError::EmptyNBest)));
    }

    #[test]
    fn posteriors_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let g = random_grid(&mut rng, 8, 4);
            let list = nbest_posteriors(prefix_beam_search(&g, 8, 4).unwrap()).unwrap();
            assert!((list.posteriors().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
