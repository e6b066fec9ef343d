use fdt_core::baselines::{levenshtein_wer, mmi_loss_grad};
use fdt_core::fdt::fdt_utterance_loss_grad;
use fdt_core::grid::log_posterior_grad_to_logits;
use fdt_core::nbest::{nbest_posteriors, prefix_beam_search};
use fdt_core::tokenizer::{Lexicon, PieceVocab, Tokenizer};
use fdt_core::{LogPosteriorGrid, Matrix};

fn tokenizer() -> Tokenizer {
    let vocab = PieceVocab::parse("<blk>\na\nb\nc\nd\n").unwrap();
    let lexicon = Lexicon::parse("ONE\ta b\nTWO\tc\nTOO\td\n", &vocab).unwrap();
    Tokenizer::new(vocab, lexicon)
}

/// "ONE TWO" where the model prefers the confusable `d` for the second word.
fn confused_logits() -> Matrix {
    let probs = [
        [0.1, 0.8, 0.05, 0.025, 0.025],
        [0.1, 0.05, 0.8, 0.025, 0.025],
        [0.8, 0.05, 0.05, 0.05, 0.05],
        [0.1, 0.025, 0.025, 0.3, 0.55],
        [0.1, 0.025, 0.025, 0.3, 0.55],
        [0.8, 0.05, 0.05, 0.05, 0.05],
    ];
    let rows: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p: &f64| p.ln()).collect()).collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn decode_then_score_words() {
    let tok = tokenizer();
    let grid = LogPosteriorGrid::from_logits(&confused_logits()).unwrap();
    let hyps = prefix_beam_search(&grid, 8, 3).unwrap();
    let words = tok.words_for_pieces(&hyps[0].pieces);
    assert_eq!(words, ["ONE", "TOO"]);
    let stats = levenshtein_wer(&["ONE".to_string(), "TWO".to_string()], &words).unwrap();
    assert_eq!((stats.substitutions, stats.insertions, stats.deletions), (1, 0, 0));
}

#[test]
fn fdt_flags_only_the_confused_word() {
    let tok = tokenizer();
    let reference = tok.tokenize(&["ONE", "TWO"]).unwrap();
    let grid = LogPosteriorGrid::from_logits(&confused_logits()).unwrap();
    let nbest = nbest_posteriors(prefix_beam_search(&grid, 8, 1).unwrap()).unwrap();
    let out = fdt_utterance_loss_grad(&grid, &reference, &nbest).unwrap();
    assert_eq!(out.segments_flagged, 1);
    let seg = &out.segments[0].segment;
    assert_eq!(seg.word_index, 1);
    assert_eq!(seg.ref_pieces, [3]);
    assert_eq!(seg.err_pieces, [4]);
    // First-word frames outside the span carry no gradient.
    assert!(out.grad_logp.row(0).iter().all(|g| *g == 0.0));
}

#[test]
fn descending_the_fdt_gradient_lowers_the_loss() {
    let tok = tokenizer();
    let reference = tok.tokenize(&["ONE", "TWO"]).unwrap();
    let mut logits = confused_logits();
    let grid = LogPosteriorGrid::from_logits(&logits).unwrap();
    let nbest = nbest_posteriors(prefix_beam_search(&grid, 8, 2).unwrap()).unwrap();
    let before = fdt_utterance_loss_grad(&grid, &reference, &nbest).unwrap();
    let grad = log_posterior_grad_to_logits(&grid, &before.grad_logp).unwrap();
    logits.add_scaled(&grad, -0.1).unwrap();
    let after = fdt_utterance_loss_grad(&LogPosteriorGrid::from_logits(&logits).unwrap(), &reference, &nbest).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}

#[test]
fn mmi_prefers_the_reference_after_a_step() {
    let tok = tokenizer();
    let reference = tok.tokenize(&["ONE", "TWO"]).unwrap();
    let mut logits = confused_logits();
    let grid = LogPosteriorGrid::from_logits(&logits).unwrap();
    let nbest = nbest_posteriors(prefix_beam_search(&grid, 8, 3).unwrap()).unwrap();
    let before = mmi_loss_grad(&grid, &reference, &nbest).unwrap();
    logits.add_scaled(&before.grad_logits, -0.5).unwrap();
    let after = mmi_loss_grad(&LogPosteriorGrid::from_logits(&logits).unwrap(), &reference, &nbest).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}
