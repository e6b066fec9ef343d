//! Standard CTC over the blank-interleaved label graph.
//!
//! The graph for labels `l_1..l_U` has `2U + 1` states: even states are
//! blanks, state `2i + 1` emits `l_{i+1}`. All recursions run in log space.

use crate::error::{FdtError, Result};
use crate::grid::{log_add, LogPosteriorGrid, Matrix, BLANK};

/// The collapse mapping: merge repeats, then drop blanks. Repeats separated
/// by a blank survive.
pub fn collapse(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &tok in tokens {
        if Some(tok) != prev && tok != BLANK {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

/// Shortest path length through the standard graph: one frame per label
/// plus a separating blank between equal neighbours.
pub fn min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Frame-level token sequence for a label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// One id per frame, blank included.
    pub tokens: Vec<u32>,
    /// For each label position, the first frame (0-based) the path spends in it.
    pub emission_frames: Vec<usize>,
    /// Sum of the path's per-frame log-posteriors.
    pub log_prob: f64,
}

/// Per-frame posterior occupancy of each vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    gamma: Matrix,
}

impl OccupancyGrid {
    pub(crate) fn new(gamma: Matrix) -> Self {
        Self { gamma }
    }

    #[inline]
    pub fn get(&self, frame: usize, id: u32) -> f64 {
        self.gamma.get(frame, id as usize)
    }

    pub fn frames(&self) -> usize {
        self.gamma.rows()
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        self.gamma.row(frame)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.gamma
    }

    pub fn into_matrix(self) -> Matrix {
        self.gamma
    }
}

struct Graph<'a> {
    labels: &'a [u32],
}

impl Graph<'_> {
    fn states(&self) -> usize {
        2 * self.labels.len() + 1
    }

    #[inline]
    fn id(&self, s: usize) -> u32 {
        if s.is_multiple_of(2) {
            BLANK
        } else {
            self.labels[s / 2]
        }
    }

    /// Whether the skip arc `s - 2 -> s` exists.
    #[inline]
    fn can_skip(&self, s: usize) -> bool {
        s % 2 == 1 && s >= 3 && self.labels[s / 2] != self.labels[s / 2 - 1]
    }
}

fn validate(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<()> {
    grid.check_label(labels)?;
    let required = min_frames(labels);
    if required > grid.frames() {
        return Err(FdtError::InfeasibleLabel { labels: labels.len(), required, frames: grid.frames() });
    }
    Ok(())
}

/// Log forward variables; `alpha[t][s]` includes the emission at `t`.
fn forward(grid: &LogPosteriorGrid, graph: &Graph) -> Matrix {
    let s_count = graph.states();
    let mut alpha = Matrix::filled(grid.frames(), s_count, f64::NEG_INFINITY);
    alpha.set(0, 0, grid.log_prob(0, BLANK));
    if s_count > 1 {
        alpha.set(0, 1, grid.log_prob(0, graph.id(1)));
    }
    for t in 1..grid.frames() {
        for s in 0..s_count {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if graph.can_skip(s) {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc > f64::NEG_INFINITY {
                alpha.set(t, s, acc + grid.log_prob(t, graph.id(s)));
            }
        }
    }
    alpha
}

/// Log backward variables; `beta[t][s]` excludes the emission at `t`.
fn backward(grid: &LogPosteriorGrid, graph: &Graph) -> Matrix {
    let s_count = graph.states();
    let last = grid.frames() - 1;
    let mut beta = Matrix::filled(grid.frames(), s_count, f64::NEG_INFINITY);
    beta.set(last, s_count - 1, 0.0);
    if s_count > 1 {
        beta.set(last, s_count - 2, 0.0);
    }
    for t in (0..last).rev() {
        for s in 0..s_count {
            let mut acc = beta.get(t + 1, s) + grid.log_prob(t + 1, graph.id(s));
            if s + 1 < s_count {
                acc = log_add(acc, beta.get(t + 1, s + 1) + grid.log_prob(t + 1, graph.id(s + 1)));
            }
            if s + 2 < s_count && graph.can_skip(s + 2) {
                acc = log_add(acc, beta.get(t + 1, s + 2) + grid.log_prob(t + 1, graph.id(s + 2)));
            }
            beta.set(t, s, acc);
        }
    }
    beta
}

fn total_log_prob(alpha: &Matrix, s_count: usize) -> f64 {
    let last = alpha.rows() - 1;
    let mut total = alpha.get(last, s_count - 1);
    if s_count > 1 {
        total = log_add(total, alpha.get(last, s_count - 2));
    }
    total
}

/// CTC negative log-likelihood together with its occupancies.
#[derive(Clone, Debug)]
pub struct CtcPosterior {
    pub loss: f64,
    pub occupancy: OccupancyGrid,
}

/// `-log P(labels | x)` summed over every path of the standard graph.
///
/// An empty label sequence is accepted and scores the all-blank path.
pub fn ctc_forward_loss(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<f64> {
    validate(grid, labels)?;
    let graph = Graph { labels };
    let alpha = forward(grid, &graph);
    let log_prob = total_log_prob(&alpha, graph.states());
    if log_prob == f64::NEG_INFINITY {
        return Err(FdtError::InfeasibleLabel {
            labels: labels.len(),
            required: min_frames(labels),
            frames: grid.frames(),
        });
    }
    Ok(-log_prob)
}

/// Forward-backward: loss plus the posterior occupancy of each id per frame.
pub fn ctc_posterior(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<CtcPosterior> {
    validate(grid, labels)?;
    let graph = Graph { labels };
    let alpha = forward(grid, &graph);
    let beta = backward(grid, &graph);
    let log_prob = total_log_prob(&alpha, graph.states());
    if log_prob == f64::NEG_INFINITY {
        return Err(FdtError::InfeasibleLabel {
            labels: labels.len(),
            required: min_frames(labels),
            frames: grid.frames(),
        });
    }
    let mut gamma = Matrix::zeros(grid.frames(), grid.num_classes());
    for t in 0..grid.frames() {
        for s in 0..graph.states() {
            let lp = alpha.get(t, s) + beta.get(t, s);
            if lp > f64::NEG_INFINITY {
                gamma.add_at(t, graph.id(s) as usize, (lp - log_prob).exp());
            }
        }
    }
    Ok(CtcPosterior { loss: -log_prob, occupancy: OccupancyGrid::new(gamma) })
}

pub fn ctc_occupancies(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<OccupancyGrid> {
    Ok(ctc_posterior(grid, labels)?.occupancy)
}

/// Gradient of the CTC loss w.r.t. the logits behind a log-softmax grid:
/// `softmax - occupancy`.
pub fn ctc_grad_logits(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<Matrix> {
    let post = ctc_posterior(grid, labels)?;
    Ok(occupancy_to_logit_grad(grid, &post.occupancy))
}

/// `exp(grid) - occupancy`, the logit gradient of `-log P` for any occupancy.
pub fn occupancy_to_logit_grad(grid: &LogPosteriorGrid, occupancy: &OccupancyGrid) -> Matrix {
    let mut grad = grid.probs();
    for t in 0..grid.frames() {
        for (g, o) in grad.row_mut(t).iter_mut().zip(occupancy.row(t)) {
            *g -= o;
        }
    }
    grad
}

/// Best path among those collapsing to `labels`.
///
/// Exact ties go to the predecessor with the lower state index, and at the
/// last frame to the lower of the two accepting states.
pub fn viterbi_align(grid: &LogPosteriorGrid, labels: &[u32]) -> Result<Alignment> {
    validate(grid, labels)?;
    let graph = Graph { labels };
    let s_count = graph.states();
    let frames = grid.frames();
    let mut delta = Matrix::filled(frames, s_count, f64::NEG_INFINITY);
    let mut back = vec![0usize; frames * s_count];
    delta.set(0, 0, grid.log_prob(0, BLANK));
    if s_count > 1 {
        delta.set(0, 1, grid.log_prob(0, graph.id(1)));
    }
    for t in 1..frames {
        for s in 0..s_count {
            // Candidates in increasing state index; strict `>` keeps the lowest.
            let mut best = f64::NEG_INFINITY;
            let mut arg = s;
            let lo = if graph.can_skip(s) { s - 2 } else { s.saturating_sub(1) };
            for p in lo..=s {
                let v = delta.get(t - 1, p);
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            if best > f64::NEG_INFINITY {
                delta.set(t, s, best + grid.log_prob(t, graph.id(s)));
                back[t * s_count + s] = arg;
            }
        }
    }
    let last = frames - 1;
    let mut state = s_count - 1;
    if s_count > 1 && delta.get(last, s_count - 2) >= delta.get(last, s_count - 1) {
        state = s_count - 2;
    }
    let log_prob = delta.get(last, state);
    if log_prob == f64::NEG_INFINITY {
        return Err(FdtError::InfeasibleLabel { labels: labels.len(), required: min_frames(labels), frames });
    }
    let mut states = vec![0usize; frames];
    for t in (0..frames).rev() {
        states[t] = state;
        if t > 0 {
            state = back[t * s_count + state];
        }
    }
    let tokens = states.iter().map(|&s| graph.id(s)).collect();
    let mut emission_frames = vec![usize::MAX; labels.len()];
    for (t, &s) in states.iter().enumerate() {
        if s % 2 == 1 && emission_frames[s / 2] == usize::MAX {
            emission_frames[s / 2] = t;
        }
    }
    Ok(Alignment { tokens, emission_frames, log_prob })
}
