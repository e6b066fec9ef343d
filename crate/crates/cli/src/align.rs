//! Line-oriented alignment dump. Frames and word indices are 1-based.
//!
//! ```text
//! utt     <id>  frames=<T>  words=<L>
//! refalign <id> <token per frame, <blk> for blank>
//! word    <id>  <k>  <word>  pieces=<...>  frames=[s,e]
//! hyp     <id>  <rank>  posterior=<p>  log_score=<s>  <pieces>
//! seg     <id>  hyp=<rank>  weight=<p>  word=<k>  frames=[s,e]  ref=<...>  err=<...>  loss=<l>
//! total   <id>  loss=<sum>  flagged=<n>  skipped=<bool>
//! ```
//!
//! The `seg` lines plus the grid are enough to recompute every segment loss;
//! `total` is the posterior-weighted sum of the `seg` losses.

use std::fmt::Write as _;

use fdt_core::fdt::{fdt_utterance_loss_grad, segment_by_words};
use fdt_core::nbest::{nbest_posteriors, prefix_beam_search};
use fdt_core::tokenizer::PieceVocab;

use crate::error::{CliError, Result};
use crate::inputs::Inputs;

fn pieces_field(vocab: &PieceVocab, ids: &[u32]) -> String {
    if ids.is_empty() {
        "-".to_string()
    } else {
        vocab.render(ids).replace(' ', ",")
    }
}

pub fn dump(inputs: &Inputs, beam: usize, n: usize) -> Result<String> {
    let vocab = inputs.tokenizer.vocab();
    let mut out = String::new();
    for item in &inputs.items {
        let id = &item.id;
        let words = item.words.as_ref().ok_or_else(|| CliError::Data(format!("{id}: no reference transcript")))?;
        let reference = inputs.tokenizer.tokenize(words)?;
        let grid = &item.grid;
        let seg = segment_by_words(grid, &reference)?;
        let _ = writeln!(out, "utt\t{id}\tframes={}\twords={}", grid.frames(), words.len());
        let tokens: Vec<&str> = seg.reference_alignment.tokens.iter().map(|&t| vocab.piece(t).unwrap_or("?")).collect();
        let _ = writeln!(out, "refalign\t{id}\t{}", tokens.join(" "));
        for w in &seg.words {
            let _ = writeln!(
                out,
                "word\t{id}\t{}\t{}\tpieces={}\tframes={}",
                w.word_index + 1,
                words[w.word_index],
                pieces_field(vocab, &reference.pieces[w.pieces.clone()]),
                w.frames
            );
        }
        let nbest = nbest_posteriors(prefix_beam_search(grid, beam, n)?)?;
        for (rank, (h, p)) in nbest.iter().enumerate() {
            let _ = writeln!(out, "hyp\t{id}\t{rank}\tposterior={p:.17e}\tlog_score={:.17e}\t{}", h.log_score, pieces_field(vocab, &h.pieces));
        }
        let result = fdt_utterance_loss_grad(grid, &reference, &nbest)?;
        for s in &result.segments {
            let e = &s.segment;
            let _ = writeln!(
                out,
                "seg\t{id}\thyp={}\tweight={:.17e}\tword={}\tframes={}\tref={}\terr={}\tloss={:.17e}",
                s.hyp_rank,
                e.hyp_weight,
                e.word_index + 1,
                e.frames,
                pieces_field(vocab, &e.ref_pieces),
                pieces_field(vocab, &e.err_pieces),
                s.loss
            );
        }
        let _ = writeln!(out, "total\t{id}\tloss={:.17e}\tflagged={}\tskipped={}", result.loss, result.segments_flagged, result.utterance_skipped);
    }
    Ok(out)
}
