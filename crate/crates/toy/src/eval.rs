//! Decoding, WER scoring and posterior entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fdt_core::baselines::{levenshtein_wer, EditStats};
use fdt_core::nbest::{prefix_beam_search, Hypothesis};
use fdt_core::tokenizer::Tokenizer;
use fdt_core::LogPosteriorGrid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, ToyEncoderParams};
use crate::error::{Result, ToyError};
use crate::synth::{Dataset, Utterance};

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub nbest: Vec<Hypothesis>,
}

impl Decoded {
    pub fn top_pieces(&self) -> &[u32] {
        self.nbest.first().map(|h| h.pieces.as_slice()).unwrap_or(&[])
    }
}

fn run<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ToyError::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

pub fn posterior_grids(params: &ToyEncoderParams, utts: &[Utterance], workers: usize) -> Result<Vec<LogPosteriorGrid>> {
    run(workers, utts.len(), |i| encoder_forward(params, &utts[i].features))
}

/// N-best lists for every utterance, in input order.
pub fn decode_utterances(params: &ToyEncoderParams, utts: &[Utterance], beam: usize, n: usize, workers: usize) -> Result<Vec<Decoded>> {
    run(workers, utts.len(), |i| {
        let grid = encoder_forward(params, &utts[i].features)?;
        Ok(Decoded { id: utts[i].id.clone(), nbest: prefix_beam_search(&grid, beam, n)? })
    })
}

/// One line per hypothesis: `utt_id \t rank \t log_score \t pieces`, pieces
/// rendered as space-separated strings.
pub fn format_nbest(decoded: &[Decoded], tokenizer: &Tokenizer) -> String {
    let vocab = tokenizer.vocab();
    let mut out = String::new();
    for d in decoded {
        for (rank, h) in d.nbest.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{:.17e}\t{}", d.id, rank, h.log_score, vocab.render(&h.pieces));
        }
    }
    out
}

/// Rank-0 piece sequences from an N-best dump, keyed by utterance id.
pub fn parse_nbest_top(text: &str, tokenizer: &Tokenizer) -> Result<BTreeMap<String, Vec<u32>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, rank, _, pieces] = fields[..] else {
            return Err(ToyError::Data(format!("n-best line {}: expected 4 tab-separated fields", lineno + 1)));
        };
        if rank != "0" {
            continue;
        }
        let ids = pieces
            .split_whitespace()
            .map(|p| tokenizer.vocab().id(p).ok_or_else(|| ToyError::Data(format!("n-best line {}: unknown piece {p:?}", lineno + 1))))
            .collect::<Result<Vec<u32>>>()?;
        out.insert(id.to_string(), ids);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub utterances: usize,
    pub overall: EditCounts,
    /// Utterances whose reference contains at least one rare word.
    pub rare_utterances: usize,
    pub rare: EditCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            (self.substitutions + self.insertions + self.deletions) as f64 / self.ref_words as f64
        }
    }

    fn add(&mut self, s: &EditStats) {
        self.substitutions += s.substitutions;
        self.insertions += s.insertions;
        self.deletions += s.deletions;
        self.ref_words += s.ref_len;
    }
}

impl WerReport {
    pub fn to_text(&self) -> String {
        let line = |name: &str, n: usize, c: &EditCounts| {
            format!(
                "{name}\tutts={n}\twords={}\tS={}\tI={}\tD={}\tWER={:.4}\n",
                c.ref_words,
                c.substitutions,
                c.insertions,
                c.deletions,
                c.wer()
            )
        };
        line("overall", self.utterances, &self.overall) + &line("rare", self.rare_utterances, &self.rare)
    }
}

/// Scores top-1 piece sequences against reference words. `hyps[i]` belongs
/// to `utts[i]`.
pub fn score_transcripts(dataset: &Dataset, utts: &[Utterance], hyps: &[&[u32]]) -> Result<WerReport> {
    if hyps.len() != utts.len() {
        return Err(ToyError::Data(format!("{} hypotheses for {} utterances", hyps.len(), utts.len())));
    }
    let mut report = WerReport::default();
    for (utt, pieces) in utts.iter().zip(hyps) {
        let words = dataset.tokenizer.words_for_pieces(pieces);
        let stats = levenshtein_wer(&utt.words, &words)?;
        report.utterances += 1;
        report.overall.add(&stats);
        if dataset.contains_rare(utt) {
            report.rare_utterances += 1;
            report.rare.add(&stats);
        }
    }
    Ok(report)
}

/// Top-1 beam-search WER over `utts`.
pub fn evaluate(params: &ToyEncoderParams, dataset: &Dataset, utts: &[Utterance], beam: usize, n: usize, workers: usize) -> Result<WerReport> {
    let decoded = decode_utterances(params, utts, beam, n, workers)?;
    let hyps: Vec<&[u32]> = decoded.iter().map(Decoded::top_pieces).collect();
    score_transcripts(dataset, utts, &hyps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub frames: usize,
    /// Mean per-frame entropy in nats.
    pub mean: f64,
    /// Upper edge of the histogram range, `ln(classes)`.
    pub max_entropy: f64,
    pub histogram: Vec<usize>,
}

impl EntropyReport {
    /// Plot-ready table: `bin_lo \t bin_hi \t count \t fraction`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# frames={} mean_entropy={:.6}\n", self.frames, self.mean);
        let width = self.max_entropy / self.histogram.len() as f64;
        for (i, &c) in self.histogram.iter().enumerate() {
            let frac = if self.frames == 0 { 0.0 } else { c as f64 / self.frames as f64 };
            let _ = writeln!(out, "{:.6}\t{:.6}\t{}\t{:.6}", i as f64 * width, (i + 1) as f64 * width, c, frac);
        }
        out
    }
}

pub fn frame_entropy(row: &[f64]) -> f64 {
    -row.iter().map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp }).sum::<f64>()
}

pub fn entropy_of_grids(grids: &[LogPosteriorGrid], bins: usize) -> EntropyReport {
    let classes = grids.first().map(|g| g.num_classes()).unwrap_or(1);
    let max_entropy = (classes.max(2) as f64).ln();
    let bins = bins.max(1);
    let mut histogram = vec![0usize; bins];
    let (mut sum, mut frames) = (0.0, 0usize);
    for grid in grids {
        for t in 0..grid.frames() {
            let h = frame_entropy(grid.row(t)).max(0.0);
            sum += h;
            frames += 1;
            let bin = ((h / max_entropy) * bins as f64) as usize;
            histogram[bin.min(bins - 1)] += 1;
        }
    }
    EntropyReport { frames, mean: if frames == 0 { 0.0 } else { sum / frames as f64 }, max_entropy, histogram }
}

/// Mean frame-posterior entropy of the model over `utts`.
pub fn entropy_report(params: &ToyEncoderParams, utts: &[Utterance], bins: usize, workers: usize) -> Result<EntropyReport> {
    Ok(entropy_of_grids(&posterior_grids(params, utts, workers)?, bins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::synth::{gen_dataset, Split};
    use fdt_core::Matrix;

    fn grid(rows: &[Vec<f64>]) -> LogPosteriorGrid {
        LogPosteriorGrid::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn uniform_and_one_hot_entropy() {
        let l3 = -(3f64.ln());
        let r = entropy_of_grids(&[grid(&[vec![l3; 3], vec![l3; 3]])], 4);
        assert!((r.mean - 3f64.ln()).abs() < 1e-12);
        assert_eq!(r.histogram, vec![0, 0, 0, 2]);
        let hot = grid(&[vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        let r = entropy_of_grids(&[hot], 4);
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.histogram, vec![1, 0, 0, 0]);
    }

    fn small() -> Dataset {
        gen_dataset(&SynthConfig { train_size: 5, finetune_size: 2, eval_general_size: 6, eval_rare_size: 4, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn perfect_transcripts_score_zero() {
        let ds = small();
        let utts = ds.split(Split::EvalRare);
        let refs: Vec<Vec<u32>> = utts.iter().map(|u| ds.tokenizer.tokenize(&u.words).unwrap().pieces).collect();
        let hyps: Vec<&[u32]> = refs.iter().map(Vec::as_slice).collect();
        let r = score_transcripts(&ds, utts, &hyps).unwrap();
        assert_eq!(r.overall.wer(), 0.0);
        assert_eq!(r.rare_utterances, utts.len());
    }

    #[test]
    fn empty_hypotheses_are_all_deletions() {
        let ds = small();
        let utts = ds.split(Split::EvalGeneral);
        let hyps: Vec<&[u32]> = vec![&[]; utts.len()];
        let r = score_transcripts(&ds, utts, &hyps).unwrap();
        assert_eq!(r.overall.wer(), 1.0);
        assert_eq!(r.overall.deletions, r.overall.ref_words);
    }

    #[test]
    fn nbest_dump_round_trips_top_hypotheses() {
        let ds = small();
        let utts = ds.split(Split::EvalGeneral);
        let cfg = crate::config::RunConfig::default();
        let state = crate::train::TrainState::init(&cfg, 1, ds.feature_dim, ds.tokenizer.vocab().num_classes());
        let decoded = decode_utterances(&state.params, utts, 4, 2, 1).unwrap();
        let text = format_nbest(&decoded, &ds.tokenizer);
        let tops = parse_nbest_top(&text, &ds.tokenizer).unwrap();
        for d in &decoded {
            assert_eq!(tops[&d.id], d.top_pieces());
        }
        assert_eq!(decode_utterances(&state.params, utts, 4, 2, 2).unwrap(), decoded);
    }
}
