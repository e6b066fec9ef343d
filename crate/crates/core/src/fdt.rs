//! Focused discriminative training: word segmentation from the reference
//! alignment, error-region detection against competing hypotheses, and the
//! segment-level contrastive loss between constrained word graphs.
//!
//! Frame indices are 0-based and spans are inclusive at both ends; adjacent
//! words share their boundary frame.

use std::fmt;
use std::ops::Range;

use crate::constrained::{constrained_posterior, ConstrainedWordGraph};
use crate::ctc::{collapse, min_frames, viterbi_align, Alignment};
use crate::error::{FdtError, Result};
use crate::grid::{LogPosteriorGrid, Matrix, BLANK};
use crate::nbest::{Hypothesis, NBestList};
use crate::tokenizer::TokenizedUtterance;

/// Inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
}

impl FrameSpan {
    pub fn frame_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

/// Renders 1-based, as `[start,end]`.
impl fmt::Display for FrameSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start + 1, self.end + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub word_index: usize,
    pub pieces: Range<usize>,
    pub frames: FrameSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordSegmentation {
    pub words: Vec<WordSpan>,
    pub reference_alignment: Alignment,
}

/// Splits an alignment of the full reference into per-word frame spans: word
/// `k` runs from the emission frame of the previous word's last piece (frame
/// 0 for the first word) to the emission frame of its own last piece.
pub fn segment_alignment(alignment: &Alignment, reference: &TokenizedUtterance) -> Result<WordSegmentation> {
    if alignment.emission_frames.len() != reference.pieces.len() {
        return Err(FdtError::DimensionMismatch(format!(
            "alignment has {} label positions, reference has {} pieces",
            alignment.emission_frames.len(),
            reference.pieces.len()
        )));
    }
    let mut words = Vec::with_capacity(reference.word_spans.len());
    let mut start = 0;
    for (k, span) in reference.word_spans.iter().enumerate() {
        if span.is_empty() {
            return Err(FdtError::SpanOutOfRange { start: span.start, end: span.end, len: reference.pieces.len() });
        }
        let end = alignment.emission_frames[span.end - 1];
        words.push(WordSpan { word_index: k, pieces: span.clone(), frames: FrameSpan { start, end } });
        start = end;
    }
    Ok(WordSegmentation { words, reference_alignment: alignment.clone() })
}

/// Viterbi-aligns the reference pieces and segments the result by word.
pub fn segment_by_words(grid: &LogPosteriorGrid, reference: &TokenizedUtterance) -> Result<WordSegmentation> {
    let alignment = viterbi_align(grid, &reference.pieces)?;
    segment_alignment(&alignment, reference)
}

/// A reference word whose aligned region the hypothesis recognizes differently.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSegment {
    pub word_index: usize,
    pub frames: FrameSpan,
    /// The reference word's pieces.
    pub ref_pieces: Vec<u32>,
    /// Hypothesis pieces in the span that do not occur in the reference
    /// alignment over the same frames, in hypothesis order.
    pub err_pieces: Vec<u32>,
    /// Posterior weight of the hypothesis that produced the segment.
    pub hyp_weight: f64,
}

/// Frame-level tokens of a hypothesis, or all blanks when it has no
/// alignment on this grid.
pub fn hypothesis_alignment(grid: &LogPosteriorGrid, pieces: &[u32]) -> Result<Vec<u32>> {
    grid.check_label(pieces)?;
    if pieces.is_empty() || min_frames(pieces) > grid.frames() {
        return Ok(vec![BLANK; grid.frames()]);
    }
    match viterbi_align(grid, pieces) {
        Ok(alignment) => Ok(alignment.tokens),
        Err(FdtError::InfeasibleLabel { .. }) => Ok(vec![BLANK; grid.frames()]),
        Err(e) => Err(e),
    }
}

/// Compares the hypothesis and reference alignments word span by word span
/// and reports every span whose collapsed contents differ.
pub fn detect_error_segments(
    grid: &LogPosteriorGrid,
    reference: &TokenizedUtterance,
    hyp: &Hypothesis,
    segmentation: &WordSegmentation,
) -> Result<Vec<ErrorSegment>> {
    let hyp_tokens = hypothesis_alignment(grid, &hyp.pieces)?;
    let ref_tokens = &segmentation.reference_alignment.tokens;
    if ref_tokens.len() != grid.frames() {
        return Err(FdtError::DimensionMismatch("segmentation was computed on a different grid".into()));
    }
    let mut out = Vec::new();
    for word in &segmentation.words {
        let frames = word.frames.start..word.frames.end + 1;
        let ref_slice = collapse(&ref_tokens[frames.clone()]);
        let hyp_slice = collapse(&hyp_tokens[frames]);
        if ref_slice == hyp_slice {
            continue;
        }
        let err_pieces = hyp_slice.into_iter().filter(|p| !ref_slice.contains(p)).collect();
        out.push(ErrorSegment {
            word_index: word.word_index,
            frames: word.frames,
            ref_pieces: reference.word_pieces(word.word_index).to_vec(),
            err_pieces,
            hyp_weight: 1.0,
        });
    }
    Ok(out)
}

/// Loss of one error segment and its gradient over the segment's frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentLoss {
    /// `log Q(err) - log Q(ref)` over the segment frames.
    pub loss: f64,
    /// `d loss / d log-posterior`, one row per segment frame.
    pub grad_logp: Matrix,
    pub frames: FrameSpan,
}

/// Contrastive loss between the constrained graph of the reference pieces
/// and that of the error pieces (or a blank-only path when there are none).
///
/// The gradient w.r.t. each log-posterior entry is `gamma_err - gamma_ref`,
/// so its negative is `+gamma_ref` on reference pieces, `-gamma_err` on
/// error pieces, their difference on blank, and zero elsewhere.
pub fn segment_contrastive_loss_grad(grid: &LogPosteriorGrid, segment: &ErrorSegment) -> Result<SegmentLoss> {
    if segment.ref_pieces.is_empty() {
        return Err(FdtError::EmptyLabel);
    }
    let frames = segment.frames;
    let seg_grid = grid.slice_frames(frames.start, frames.end)?;
    let span = frames.frame_count();
    let ref_graph = ConstrainedWordGraph::new(&segment.ref_pieces, span)?;
    let err_graph = if segment.err_pieces.is_empty() {
        ConstrainedWordGraph::blank_only(span)?
    } else {
        ConstrainedWordGraph::new(&segment.err_pieces, span)?
    };
    let reference = constrained_posterior(&ref_graph, &seg_grid)?;
    let competitor = constrained_posterior(&err_graph, &seg_grid)?;
    let mut grad_logp = competitor.occupancy.into_matrix();
    grad_logp.add_scaled(reference.occupancy.matrix(), -1.0)?;
    Ok(SegmentLoss { loss: competitor.log_score - reference.log_score, grad_logp, frames })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSegment {
    /// Rank of the originating hypothesis in the N-best list.
    pub hyp_rank: usize,
    pub segment: ErrorSegment,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdtResult {
    pub loss: f64,
    /// `d loss / d log-posterior`, zero outside flagged spans.
    pub grad_logp: Matrix,
    pub segments_flagged: usize,
    /// No hypothesis produced an error segment; the utterance contributes
    /// nothing.
    pub utterance_skipped: bool,
    pub segments: Vec<ScoredSegment>,
}

/// Posterior-weighted sum of segment losses over an N-best list.
pub fn fdt_utterance_loss_grad(
    grid: &LogPosteriorGrid,
    reference: &TokenizedUtterance,
    nbest: &NBestList,
) -> Result<FdtResult> {
    if nbest.is_empty() {
        return Err(FdtError::EmptyNBest);
    }
    let segmentation = segment_by_words(grid, reference)?;
    let mut loss = 0.0;
    let mut grad_logp = Matrix::zeros(grid.frames(), grid.num_classes());
    let mut segments = Vec::new();
    for (rank, (hyp, weight)) in nbest.iter().enumerate() {
        for mut segment in detect_error_segments(grid, reference, hyp, &segmentation)? {
            segment.hyp_weight = weight;
            let scored = segment_contrastive_loss_grad(grid, &segment)?;
            if !scored.loss.is_finite() {
                continue;
            }
            loss += weight * scored.loss;
            for (i, t) in (scored.frames.start..=scored.frames.end).enumerate() {
                for (g, d) in grad_logp.row_mut(t).iter_mut().zip(scored.grad_logp.row(i)) {
                    *g += weight * d;
                }
            }
            segments.push(ScoredSegment { hyp_rank: rank, segment, loss: scored.loss });
        }
    }
    let segments_flagged = segments.len();
    Ok(FdtResult { loss, grad_logp, segments_flagged, utterance_skipped: segments_flagged == 0, segments })
}
