//! Constrained CTC graph for the pieces of one word.
//!
//! Blanks may only precede the first piece or follow the last one, and every
//! arc carries an explicit transition probability. With `h = max(T, 2)` for a
//! segment of `T` frames:
//!
//! | from           | to                     | q            |
//! |----------------|------------------------|--------------|
//! | start          | initial blank / piece 1 | 1/h, (h-1)/h |
//! | initial blank  | itself / piece 1        | 1/h, (h-1)/h |
//! | piece i < u    | itself / piece i+1      | 1/2, 1/2     |
//! | piece u        | itself / final blank    | 1/2, 1/2     |
//! | final blank    | itself                  | 1            |
//!
//! Paths may end in piece `u` or the final blank. Scores are the
//! unnormalized clique products `Q`; the partition function is never formed.

use crate::ctc::OccupancyGrid;
use crate::error::{FdtError, Result};
use crate::grid::{log_add, LogPosteriorGrid, Matrix, BLANK};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub log_q: f64,
}

/// Transition probabilities for a segment of a given length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionModel {
    pub frames: usize,
}

impl TransitionModel {
    fn horizon(&self) -> f64 {
        self.frames.max(2) as f64
    }

    /// Blank self-loop (and start to initial blank).
    pub fn blank_stay(&self) -> f64 {
        1.0 / self.horizon()
    }

    /// Blank (or start) into the first piece.
    pub fn blank_leave(&self) -> f64 {
        (self.horizon() - 1.0) / self.horizon()
    }

    /// Either arc out of a piece state.
    pub fn piece_arc(&self) -> f64 {
        0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedWordGraph {
    label: Vec<u32>,
    frames: usize,
    state_ids: Vec<u32>,
    start: Vec<(usize, f64)>,
    arcs: Vec<Arc>,
    accepting: Vec<bool>,
}

impl ConstrainedWordGraph {
    /// Graph for `label` over `frames` frames: initial blank, one state per
    /// piece, final blank.
    pub fn new(label: &[u32], frames: usize) -> Result<Self> {
        if label.is_empty() {
            return Err(FdtError::EmptyLabel);
        }
        if let Some(&id) = label.iter().find(|&&id| id == BLANK) {
            return Err(FdtError::InvalidLabel { id, max: usize::MAX });
        }
        if frames < label.len() {
            return Err(FdtError::TooShortSegment { frames, pieces: label.len() });
        }
        let q = TransitionModel { frames };
        let u = label.len();
        let final_blank = u + 1;
        let mut state_ids = Vec::with_capacity(u + 2);
        state_ids.push(BLANK);
        state_ids.extend_from_slice(label);
        state_ids.push(BLANK);

        let stay = q.blank_stay().ln();
        let leave = q.blank_leave().ln();
        let half = q.piece_arc().ln();
        let mut arcs = vec![Arc { from: 0, to: 0, log_q: stay }, Arc { from: 0, to: 1, log_q: leave }];
        for i in 1..=u {
            arcs.push(Arc { from: i, to: i, log_q: half });
            arcs.push(Arc { from: i, to: i + 1, log_q: half });
        }
        arcs.push(Arc { from: final_blank, to: final_blank, log_q: 0.0 });
        let mut accepting = vec![false; u + 2];
        accepting[u] = true;
        accepting[final_blank] = true;
        Ok(Self { label: label.to_vec(), frames, state_ids, start: vec![(0, stay), (1, leave)], arcs, accepting })
    }

    /// A single blank state looping over the whole segment.
    pub fn blank_only(frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(FdtError::TooShortSegment { frames, pieces: 0 });
        }
        Ok(Self {
            label: Vec::new(),
            frames,
            state_ids: vec![BLANK],
            start: vec![(0, 0.0)],
            arcs: vec![Arc { from: 0, to: 0, log_q: 0.0 }],
            accepting: vec![true],
        })
    }

    pub fn label(&self) -> &[u32] {
        &self.label
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_states(&self) -> usize {
        self.state_ids.len()
    }

    pub fn state_id(&self, state: usize) -> u32 {
        self.state_ids[state]
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn start_arcs(&self) -> &[(usize, f64)] {
        &self.start
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.accepting[state]
    }

    fn check_segment(&self, segment: &LogPosteriorGrid) -> Result<()> {
        if segment.frames() != self.frames {
            return Err(FdtError::DimensionMismatch(format!(
                "graph built for {} frames, segment has {}",
                self.frames,
                segment.frames()
            )));
        }
        if let Some(&id) = self.label.iter().find(|&&id| id as usize > segment.vocab_size()) {
            return Err(FdtError::InvalidLabel { id, max: segment.vocab_size() });
        }
        Ok(())
    }
}

/// Forward and backward quantities over one segment.
#[derive(Clone, Debug)]
pub struct ConstrainedPosterior {
    /// `log Q` from the forward pass.
    pub log_score: f64,
    /// `log Q` recomputed at every frame as `logsumexp_s(alpha + beta)`.
    pub frame_log_scores: Vec<f64>,
    pub occupancy: OccupancyGrid,
}

fn forward(graph: &ConstrainedWordGraph, seg: &LogPosteriorGrid) -> Matrix {
    let n = graph.num_states();
    let mut alpha = Matrix::filled(graph.frames, n, f64::NEG_INFINITY);
    for &(s, log_q) in &graph.start {
        alpha.set(0, s, log_q + seg.log_prob(0, graph.state_ids[s]));
    }
    for t in 1..graph.frames {
        let mut acc = vec![f64::NEG_INFINITY; n];
        for arc in &graph.arcs {
            acc[arc.to] = log_add(acc[arc.to], alpha.get(t - 1, arc.from) + arc.log_q);
        }
        for (s, a) in acc.into_iter().enumerate() {
            if a > f64::NEG_INFINITY {
                alpha.set(t, s, a + seg.log_prob(t, graph.state_ids[s]));
            }
        }
    }
    alpha
}

fn backward(graph: &ConstrainedWordGraph, seg: &LogPosteriorGrid) -> Matrix {
    let n = graph.num_states();
    let last = graph.frames - 1;
    let mut beta = Matrix::filled(graph.frames, n, f64::NEG_INFINITY);
    for s in 0..n {
        if graph.accepting[s] {
            beta.set(last, s, 0.0);
        }
    }
    for t in (0..last).rev() {
        for arc in &graph.arcs {
            let v = arc.log_q + seg.log_prob(t + 1, graph.state_ids[arc.to]) + beta.get(t + 1, arc.to);
            let cur = beta.get(t, arc.from);
            beta.set(t, arc.from, log_add(cur, v));
        }
    }
    beta
}

fn final_score(graph: &ConstrainedWordGraph, alpha: &Matrix) -> f64 {
    let last = graph.frames - 1;
    (0..graph.num_states())
        .filter(|&s| graph.accepting[s])
        .fold(f64::NEG_INFINITY, |acc, s| log_add(acc, alpha.get(last, s)))
}

/// `log Q(label | segment)`: log of the summed clique products over every
/// complete constrained path.
pub fn constrained_forward_score(graph: &ConstrainedWordGraph, segment: &LogPosteriorGrid) -> Result<f64> {
    graph.check_segment(segment)?;
    Ok(final_score(graph, &forward(graph, segment)))
}

pub fn constrained_posterior(graph: &ConstrainedWordGraph, segment: &LogPosteriorGrid) -> Result<ConstrainedPosterior> {
    graph.check_segment(segment)?;
    let alpha = forward(graph, segment);
    let beta = backward(graph, segment);
    let log_score = final_score(graph, &alpha);
    let mut gamma = Matrix::zeros(graph.frames, segment.num_classes());
    let mut frame_log_scores = Vec::with_capacity(graph.frames);
    for t in 0..graph.frames {
        let mut frame_total = f64::NEG_INFINITY;
        for s in 0..graph.num_states() {
            let lp = alpha.get(t, s) + beta.get(t, s);
            frame_total = log_add(frame_total, lp);
            if lp > f64::NEG_INFINITY && log_score > f64::NEG_INFINITY {
                gamma.add_at(t, graph.state_ids[s] as usize, (lp - log_score).exp());
            }
        }
        frame_log_scores.push(frame_total);
    }
    Ok(ConstrainedPosterior { log_score, frame_log_scores, occupancy: OccupancyGrid::new(gamma) })
}

/// Occupancy normalized by the sum over all allowed paths; both blank
/// states land on id 0.
pub fn constrained_occupancies(graph: &ConstrainedWordGraph, segment: &LogPosteriorGrid) -> Result<OccupancyGrid> {
    Ok(constrained_posterior(graph, segment)?.occupancy)
}
