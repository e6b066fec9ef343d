//! Word to word-piece mapping with word-boundary bookkeeping.
//!
//! Pieces carry no boundary markers; word boundaries live only in
//! [`TokenizedUtterance::word_spans`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{FdtError, Result};
use crate::grid::BLANK;

pub const BLANK_PIECE: &str = "<blk>";

/// Piece inventory; id 0 is always the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl PieceVocab {
    /// `pieces` excludes the blank; ids are assigned `1..=pieces.len()` in order.
    pub fn new<S: AsRef<str>>(pieces: &[S]) -> Result<Self> {
        let mut all = Vec::with_capacity(pieces.len() + 1);
        all.push(BLANK_PIECE.to_string());
        all.extend(pieces.iter().map(|p| p.as_ref().to_string()));
        Self::from_lines(all)
    }

    fn from_lines(lines: Vec<String>) -> Result<Self> {
        match lines.first() {
            Some(first) if first == BLANK_PIECE => {}
            Some(first) => return Err(FdtError::MissingBlank(first.clone())),
            None => return Err(FdtError::MissingBlank(String::new())),
        }
        let mut index = HashMap::with_capacity(lines.len());
        for (id, piece) in lines.iter().enumerate() {
            if piece.is_empty() {
                return Err(FdtError::Format(format!("empty piece on vocabulary line {id}")));
            }
            if index.insert(piece.clone(), id as u32).is_some() {
                return Err(FdtError::DuplicatePiece(piece.clone()));
            }
        }
        Ok(Self { pieces: lines, index })
    }

    /// Parses the one-piece-per-line vocabulary format.
    pub fn parse(text: &str) -> Result<Self> {
        let lines = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_lines(lines)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            out.push_str(piece);
            out.push('\n');
        }
        out
    }

    pub fn blank_id(&self) -> u32 {
        BLANK
    }

    /// Number of non-blank pieces.
    pub fn len(&self) -> usize {
        self.pieces.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output classes of a model over this vocabulary, blank included.
    pub fn num_classes(&self) -> usize {
        self.pieces.len()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Non-blank pieces with their ids.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.pieces.iter().enumerate().skip(1).map(|(i, p)| (i as u32, p.as_str()))
    }

    /// Space-joined piece strings, for text dumps.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.piece(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`PieceVocab::render`].
    pub fn lookup_all(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|p| self.id(p).ok_or_else(|| FdtError::Format(format!("unknown piece {p:?}"))))
            .collect()
    }
}

/// Deterministic word to piece-sequence table.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<u32>>, vocab: &PieceVocab) -> Result<Self> {
        for (word, ids) in &entries {
            if ids.is_empty() {
                return Err(FdtError::EmptyEntry(word.clone()));
            }
            for &id in ids {
                if id == BLANK {
                    return Err(FdtError::BlankInLexicon(word.clone()));
                }
                if vocab.piece(id).is_none() {
                    return Err(FdtError::UnknownPiece { word: word.clone(), piece: id.to_string() });
                }
            }
        }
        Ok(Self { entries })
    }

    /// Parses `word<TAB>piece piece ...` lines.
    pub fn parse(text: &str, vocab: &PieceVocab) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (word, pieces) = line
                .split_once('\t')
                .ok_or_else(|| FdtError::Format(format!("lexicon line {} has no tab", n + 1)))?;
            let mut ids = Vec::new();
            for piece in pieces.split_whitespace() {
                if piece == BLANK_PIECE {
                    return Err(FdtError::BlankInLexicon(word.to_string()));
                }
                let id = vocab.id(piece).ok_or_else(|| FdtError::UnknownPiece {
                    word: word.to_string(),
                    piece: piece.to_string(),
                })?;
                ids.push(id);
            }
            if ids.is_empty() {
                return Err(FdtError::EmptyEntry(word.to_string()));
            }
            if entries.insert(word.to_string(), ids).is_some() {
                return Err(FdtError::DuplicateEntry(word.to_string()));
            }
        }
        Self::new(entries, vocab)
    }

    pub fn to_text(&self, vocab: &PieceVocab) -> String {
        let mut out = String::new();
        for (word, ids) in &self.entries {
            out.push_str(word);
            out.push('\t');
            out.push_str(&vocab.render(ids));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }
}

/// Reads a vocabulary file and a lexicon file.
pub fn load_lexicon(vocab_file: &Path, lexicon_file: &Path) -> Result<(PieceVocab, Lexicon)> {
    let vocab = PieceVocab::parse(&fs::read_to_string(vocab_file)?)?;
    let lexicon = Lexicon::parse(&fs::read_to_string(lexicon_file)?, &vocab)?;
    Ok((vocab, lexicon))
}

/// Reference words with their piece sequence and per-word piece ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedUtterance {
    pub words: Vec<String>,
    pub pieces: Vec<u32>,
    pub word_spans: Vec<Range<usize>>,
}

impl TokenizedUtterance {
    /// Pieces of word `k`.
    pub fn word_pieces(&self, k: usize) -> &[u32] {
        &self.pieces[self.word_spans[k].clone()]
    }
}

/// Greedy longest-match cover of `word` by vocabulary piece strings.
fn greedy_longest_match(word: &str, vocab: &PieceVocab) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut rest = word;
    while !rest.is_empty() {
        let mut best: Option<(usize, u32)> = None;
        for (end, _) in rest.char_indices().skip(1).chain(std::iter::once((rest.len(), ' '))) {
            if let Some(id) = vocab.id(&rest[..end]).filter(|&id| id != BLANK) {
                best = Some((end, id));
            }
        }
        let (end, id) = best.ok_or_else(|| FdtError::UntokenizableWord(word.to_string()))?;
        out.push(id);
        rest = &rest[end..];
    }
    Ok(out)
}

/// Maps words to pieces: lexicon entries verbatim, everything else by greedy
/// longest match over the vocabulary.
pub fn tokenize<S: AsRef<str>>(words: &[S], lexicon: &Lexicon, vocab: &PieceVocab) -> Result<TokenizedUtterance> {
    if words.is_empty() {
        return Err(FdtError::EmptyReference);
    }
    let mut pieces = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    for word in words {
        let word = word.as_ref();
        let start = pieces.len();
        match lexicon.get(word) {
            Some(entry) => pieces.extend_from_slice(entry),
            None => pieces.extend(greedy_longest_match(word, vocab)?),
        }
        word_spans.push(start..pieces.len());
    }
    Ok(TokenizedUtterance {
        words: words.iter().map(|w| w.as_ref().to_string()).collect(),
        pieces,
        word_spans,
    })
}

/// Concatenates piece strings within each span.
pub fn detokenize(pieces: &[u32], spans: &[Range<usize>], vocab: &PieceVocab) -> Result<Vec<String>> {
    spans
        .iter()
        .map(|span| {
            if span.start > span.end || span.end > pieces.len() {
                return Err(FdtError::SpanOutOfRange { start: span.start, end: span.end, len: pieces.len() });
            }
            pieces[span.clone()]
                .iter()
                .map(|&id| vocab.piece(id).ok_or(FdtError::InvalidLabel { id, max: vocab.len() }))
                .collect::<Result<String>>()
        })
        .collect()
}

/// Vocabulary, lexicon and the reverse table needed to read words back out
/// of an unsegmented piece sequence.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: PieceVocab,
    lexicon: Lexicon,
    by_pieces: HashMap<Vec<u32>, String>,
    longest_entry: usize,
}

impl Tokenizer {
    pub fn new(vocab: PieceVocab, lexicon: Lexicon) -> Self {
        let mut by_pieces: HashMap<Vec<u32>, String> = HashMap::new();
        // Lexicon iteration is sorted, so homographs resolve to the smallest word.
        for (word, ids) in lexicon.iter() {
            by_pieces.entry(ids.to_vec()).or_insert_with(|| word.to_string());
        }
        let longest_entry = lexicon.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
        Self { vocab, lexicon, by_pieces, longest_entry }
    }

    pub fn load(vocab_file: &Path, lexicon_file: &Path) -> Result<Self> {
        let (vocab, lexicon) = load_lexicon(vocab_file, lexicon_file)?;
        Ok(Self::new(vocab, lexicon))
    }

    pub fn vocab(&self) -> &PieceVocab {
        &self.vocab
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenizedUtterance> {
        tokenize(words, &self.lexicon, &self.vocab)
    }

    /// Reads words out of a decoded piece sequence.
    ///
    /// Chooses the parse covering the most pieces with lexicon entries, then
    /// the one with fewest words; ties prefer the longest final entry.
    /// Pieces no entry covers become single-piece pseudo-words.
    pub fn words_for_pieces(&self, pieces: &[u32]) -> Vec<String> {
        let n = pieces.len();
        // cost = (uncovered pieces, words)
        let mut best: Vec<Option<((usize, usize), usize, bool)>> = vec![None; n + 1];
        best[0] = Some(((0, 0), 0, false));
        for end in 1..=n {
            let mut cand: Option<((usize, usize), usize, bool)> = None;
            let lo = end.saturating_sub(self.longest_entry.max(1));
            for start in lo..end {
                let Some(((miss, words), _, _)) = best[start] else { continue };
                if self.by_pieces.contains_key(&pieces[start..end]) {
                    let cost = (miss, words + 1);
                    if cand.is_none_or(|(c, _, _)| cost < c) {
                        cand = Some((cost, start, true));
                    }
                }
            }
            if let Some(((miss, words), _, _)) = best[end - 1] {
                let cost = (miss + 1, words + 1);
                if cand.is_none_or(|(c, _, _)| cost < c) {
                    cand = Some((cost, end - 1, false));
                }
            }
            best[end] = cand;
        }
        let mut words = Vec::new();
        let mut end = n;
        while end > 0 {
            let (_, start, known) = best[end].expect("every prefix has a parse");
            let word = if known {
                self.by_pieces[&pieces[start..end]].clone()
            } else {
                self.vocab.piece(pieces[start]).unwrap_or("<unk>").to_string()
            };
            words.push(word);
            end = start;
        }
        words.reverse();
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn call_beethoven() -> Tokenizer {
        let vocab = PieceVocab::new(&["ca", "ll", "be", "etho", "ven", "b", "a", "ba"]).unwrap();
        let lexicon = Lexicon::parse("call\tca ll\nbeethoven\tbe etho ven\n", &vocab).unwrap();
        Tokenizer::new(vocab, lexicon)
    }

    #[test]
    fn parses_vocab_and_lexicon() {
        let vocab = PieceVocab::parse("<blk>\na\nb\n").unwrap();
        assert_eq!(vocab.blank_id(), 0);
        assert_eq!(vocab.id("a"), Some(1));
        assert_eq!(vocab.id("b"), Some(2));
        let lex = Lexicon::parse("ab\ta b\n", &vocab).unwrap();
        assert_eq!(lex.get("ab"), Some(&[1, 2][..]));
    }

    #[test]
    fn duplicate_piece_rejected() {
        assert!(matches!(PieceVocab::parse("<blk>\na\na\n"), Err(FdtError::DuplicatePiece(p)) if p == "a"));
    }

    #[test]
    fn vocab_must_start_with_blank() {
        assert!(matches!(PieceVocab::parse("a\n<blk>\n"), Err(FdtError::MissingBlank(_))));
    }

    #[test]
    fn blank_in_lexicon_rejected() {
        let vocab = PieceVocab::parse("<blk>\na\n").unwrap();
        assert!(matches!(Lexicon::parse("x\t<blk>\n", &vocab), Err(FdtError::BlankInLexicon(_))));
    }

    #[test]
    fn unknown_piece_and_empty_entry_rejected() {
        let vocab = PieceVocab::parse("<blk>\na\n").unwrap();
        assert!(matches!(Lexicon::parse("x\tq\n", &vocab), Err(FdtError::UnknownPiece { .. })));
        assert!(matches!(Lexicon::parse("x\t \n", &vocab), Err(FdtError::EmptyEntry(_))));
    }

    #[test]
    fn lexicon_words_use_entries() {
        let tok = call_beethoven();
        let utt = tok.tokenize(&["call", "beethoven"]).unwrap();
        let v = tok.vocab();
        let ids: Vec<u32> = ["ca", "ll", "be", "etho", "ven"].iter().map(|p| v.id(p).unwrap()).collect();
        assert_eq!(utt.pieces, ids);
        assert_eq!(utt.word_spans, vec![0..2, 2..5]);
    }

    #[test]
    fn oov_longest_match_wins() {
        let tok = call_beethoven();
        let utt = tok.tokenize(&["ba"]).unwrap();
        assert_eq!(utt.pieces, vec![tok.vocab().id("ba").unwrap()]);
    }

    #[test]
    fn oov_without_cover_fails() {
        let vocab = PieceVocab::new(&["b", "a"]).unwrap();
        let lex = Lexicon::default();
        assert!(matches!(tokenize(&["bq"], &lex, &vocab), Err(FdtError::UntokenizableWord(w)) if w == "bq"));
    }

    #[test]
    fn detokenize_cases() {
        let tok = call_beethoven();
        let v = tok.vocab();
        let ids = vec![v.id("ca").unwrap(), v.id("ll").unwrap()];
        assert_eq!(detokenize(&ids, &[0..2], v).unwrap(), vec!["call".to_string()]);
        assert!(detokenize(&ids, &[], v).unwrap().is_empty());
        assert!(matches!(detokenize(&ids, &[0..3], v), Err(FdtError::SpanOutOfRange { end: 3, len: 2, .. })));
    }

    #[test]
    fn reads_words_back_from_pieces() {
        let tok = call_beethoven();
        let utt = tok.tokenize(&["call", "beethoven", "call"]).unwrap();
        assert_eq!(tok.words_for_pieces(&utt.pieces), vec!["call", "beethoven", "call"]);
        let v = tok.vocab();
        let junk = vec![v.id("ca").unwrap(), v.id("be").unwrap(), v.id("etho").unwrap(), v.id("ven").unwrap()];
        assert_eq!(tok.words_for_pieces(&junk), vec!["ca", "beethoven"]);
        assert!(tok.words_for_pieces(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn lexicon_words_round_trip(idx in 0usize..2) {
            let tok = call_beethoven();
            let word = ["call", "beethoven"][idx];
            let utt = tok.tokenize(&[word]).unwrap();
            prop_assert_eq!(detokenize(&utt.pieces, &utt.word_spans, tok.vocab()).unwrap(), vec![word.to_string()]);
        }

        #[test]
        fn greedy_pieces_cannot_be_extended(word in "[abc]{1,10}") {
            let vocab = PieceVocab::new(&["a", "b", "c", "ab", "bc", "abc", "ca"]).unwrap();
            let utt = tokenize(&[word.as_str()], &Lexicon::default(), &vocab).unwrap();
            let mut pos = 0;
            for &id in &utt.pieces {
                let piece = vocab.piece(id).unwrap();
                for (_, other) in vocab.iter() {
                    if other.len() > piece.len() && word[pos..].starts_with(other) {
                        prop_assert!(false, "piece {} at {} extends to {}", piece, pos, other);
                    }
                }
                pos += piece.len();
            }
            prop_assert_eq!(pos, word.len());
            let again = tokenize(&[word.as_str()], &Lexicon::default(), &vocab).unwrap();
            prop_assert_eq!(again, utt);
        }
    }
}
