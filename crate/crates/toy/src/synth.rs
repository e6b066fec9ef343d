//! Synthetic rare-word corpus.
//!
//! Every piece owns a Gaussian prototype in feature space. Frames emitted for
//! a piece are its prototype plus isotropic noise; silence frames are pure
//! noise. Each rare word is paired with a common "twin" of the same length
//! and its piece prototypes are the twin's plus `alpha`-scaled noise, so an
//! undertrained model hears the twin.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use fdt_core::container::MatrixContainer;
use fdt_core::tokenizer::{Lexicon, PieceVocab, Tokenizer};
use fdt_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::SynthConfig;
use crate::error::{Result, ToyError};

const ONSETS: &str = "bdfghjklmnprstvwz";
const VOWELS: &str = "aeiou";
const CODAS: [&str; 6] = ["", "n", "r", "s", "l", "m"];
const FEATURES: &str = "features";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Finetune,
    EvalGeneral,
    EvalRare,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Finetune, Split::EvalGeneral, Split::EvalRare];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Finetune => "finetune",
            Split::EvalGeneral => "eval_general",
            Split::EvalRare => "eval_rare",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| ToyError::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    /// T x d, values exactly representable in f32.
    pub features: Matrix,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub rare_words: BTreeSet<String>,
    pub feature_dim: usize,
    splits: BTreeMap<Split, Vec<Utterance>>,
}

struct Word {
    text: String,
    pieces: Vec<u32>,
}

struct Inventory {
    vocab: PieceVocab,
    common: Vec<Word>,
    rare: Vec<Word>,
    /// Indexed by piece id; row 0 (blank) is the silence prototype.
    prototypes: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn syllables() -> Vec<String> {
    let mut out = Vec::new();
    for coda in CODAS {
        for c in ONSETS.chars() {
            for v in VOWELS.chars() {
                out.push(format!("{c}{v}{coda}"));
            }
        }
    }
    out
}

fn build_inventory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Inventory> {
    let mut pool = syllables();
    pool.shuffle(rng);
    let mut pool = pool.into_iter();
    let mut piece_strings: Vec<String> = Vec::new();
    let mut take = |n: usize| -> Result<Vec<u32>> {
        (0..n)
            .map(|_| {
                let s = pool.next().ok_or_else(|| ToyError::Config("synth: word inventory needs more distinct pieces than available".into()))?;
                piece_strings.push(s);
                Ok(piece_strings.len() as u32)
            })
            .collect()
    };
    let mut common_ids = Vec::with_capacity(cfg.common_words);
    for _ in 0..cfg.common_words {
        let n = rng.random_range(cfg.pieces_per_word[0]..=cfg.pieces_per_word[1]);
        common_ids.push(take(n)?);
    }
    let mut rare_ids = Vec::with_capacity(cfg.rare_words);
    for twin in common_ids.iter().take(cfg.rare_words) {
        rare_ids.push(take(twin.len())?);
    }
    let vocab = PieceVocab::new(&piece_strings)?;
    let spell = |ids: Vec<u32>| Word { text: ids.iter().map(|&i| piece_strings[i as usize - 1].as_str()).collect(), pieces: ids };
    let common: Vec<Word> = common_ids.into_iter().map(spell).collect();
    let rare: Vec<Word> = rare_ids.into_iter().map(spell).collect();

    let d = cfg.feature_dim;
    let mut prototypes = vec![vec![0.0; d]; vocab.num_classes()];
    for w in &common {
        for &p in &w.pieces {
            prototypes[p as usize] = normal_vec(rng, d, 1.0);
        }
    }
    for (w, twin) in rare.iter().zip(&common) {
        for (&p, &q) in w.pieces.iter().zip(&twin.pieces) {
            let delta = normal_vec(rng, d, cfg.alpha);
            prototypes[p as usize] = prototypes[q as usize].iter().zip(delta).map(|(a, b)| a + b).collect();
        }
    }
    Ok(Inventory { vocab, common, rare, prototypes })
}

fn push_frames(rows: &mut Vec<f64>, proto: &[f64], count: usize, sigma: f64, rng: &mut ChaCha8Rng) {
    for _ in 0..count {
        for &m in proto {
            let x = m + sigma * rng.sample::<f64, _>(StandardNormal);
            rows.push(x as f32 as f64);
        }
    }
}

fn render(cfg: &SynthConfig, inv: &Inventory, words: &[&Word], rng: &mut ChaCha8Rng) -> Matrix {
    let d = cfg.feature_dim;
    let silence = &inv.prototypes[0];
    let mut data = Vec::new();
    let gap = |data: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        let n = rng.random_range(cfg.silence[0]..=cfg.silence[1]);
        push_frames(data, silence, n, cfg.noise_sigma, rng);
    };
    gap(&mut data, rng);
    for w in words {
        for &p in &w.pieces {
            let n = rng.random_range(cfg.piece_duration[0]..=cfg.piece_duration[1]);
            push_frames(&mut data, &inv.prototypes[p as usize], n, cfg.noise_sigma, rng);
        }
        gap(&mut data, rng);
    }
    let frames = data.len() / d;
    Matrix::from_vec(frames, d, data).expect("whole frames")
}

fn utterance(cfg: &SynthConfig, inv: &Inventory, split: Split, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split.stream() << 32) | index as u64);
    let n = rng.random_range(cfg.words_per_utterance[0]..=cfg.words_per_utterance[1]);
    let mut words: Vec<&Word> = Vec::with_capacity(n);
    let forced_rare = (split == Split::EvalRare).then(|| rng.random_range(0..n));
    for slot in 0..n {
        let rare = match forced_rare {
            Some(k) => slot == k,
            None => rng.random_bool(cfg.rare_train_fraction),
        };
        words.push(if rare {
            &inv.rare[rng.random_range(0..inv.rare.len())]
        } else {
            &inv.common[rng.random_range(0..inv.common.len())]
        });
    }
    let features = render(cfg, inv, &words, &mut rng);
    Utterance {
        id: format!("{}-{:05}", split.name(), index),
        words: words.iter().map(|w| w.text.clone()).collect(),
        features,
    }
}

fn split_size(cfg: &SynthConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.train_size,
        Split::Finetune => cfg.finetune_size,
        Split::EvalGeneral => cfg.eval_general_size,
        Split::EvalRare => cfg.eval_rare_size,
    }
}

/// Generates the whole corpus. A pure function of `cfg`.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inv = build_inventory(cfg, &mut rng)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let utts = (0..split_size(cfg, split)).map(|i| utterance(cfg, &inv, split, i)).collect();
        splits.insert(split, utts);
    }
    let entries: BTreeMap<String, Vec<u32>> =
        inv.common.iter().chain(&inv.rare).map(|w| (w.text.clone(), w.pieces.clone())).collect();
    let lexicon = Lexicon::new(entries, &inv.vocab)?;
    Ok(Dataset {
        tokenizer: Tokenizer::new(inv.vocab, lexicon),
        rare_words: inv.rare.iter().map(|w| w.text.clone()).collect(),
        feature_dim: cfg.feature_dim,
        splits,
    })
}

fn data_err(path: &Path, detail: impl fmt::Display) -> ToyError {
    ToyError::Data(format!("{}: {detail}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ToyError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| data_err(path, e))
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_rare(&self, utt: &Utterance) -> bool {
        utt.words.iter().any(|w| self.rare_words.contains(w))
    }

    /// Writes `vocab.txt`, `lexicon.txt`, `rare_words.txt`, one manifest
    /// `<split>.tsv` per split and one feature container per utterance.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| ToyError::io(p, e));
        mkdir(dir)?;
        let vocab = self.tokenizer.vocab();
        write_text(&dir.join("vocab.txt"), &vocab.to_text())?;
        write_text(&dir.join("lexicon.txt"), &self.tokenizer.lexicon().to_text(vocab))?;
        let rare: String = self.rare_words.iter().map(|w| format!("{w}\n")).collect();
        write_text(&dir.join("rare_words.txt"), &rare)?;
        for (split, utts) in &self.splits {
            let feat_dir = dir.join("feats").join(split.name());
            mkdir(&feat_dir)?;
            let mut manifest = String::new();
            for utt in utts {
                let rel = format!("feats/{}/{}.fdt", split.name(), utt.id);
                let mut c = MatrixContainer::new();
                c.push(FEATURES, utt.features.clone())?;
                let path = dir.join(&rel);
                c.write(&path).map_err(|e| data_err(&path, e))?;
                manifest.push_str(&format!("{}\t{}\t{}\n", utt.id, rel, utt.words.join(" ")));
            }
            write_text(&dir.join(format!("{}.tsv", split.name())), &manifest)?;
        }
        Ok(())
    }

    /// Loads a corpus written by [`Dataset::write`]. Splits without a
    /// manifest are left empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        let lex_path = dir.join("lexicon.txt");
        let vocab = PieceVocab::parse(&read_text(&vocab_path)?).map_err(|e| data_err(&vocab_path, e))?;
        let lexicon = Lexicon::parse(&read_text(&lex_path)?, &vocab).map_err(|e| data_err(&lex_path, e))?;
        let tokenizer = Tokenizer::new(vocab, lexicon);
        let rare_path = dir.join("rare_words.txt");
        let rare_words = if rare_path.exists() {
            read_text(&rare_path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect()
        } else {
            BTreeSet::new()
        };
        let mut splits = BTreeMap::new();
        let mut feature_dim = None;
        for split in Split::ALL {
            let path = dir.join(format!("{}.tsv", split.name()));
            if !path.exists() {
                continue;
            }
            let mut utts = Vec::new();
            for (lineno, line) in read_text(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let [id, rel, words] = fields[..] else {
                    return Err(data_err(&path, format!("line {}: expected 3 tab-separated fields", lineno + 1)));
                };
                let words: Vec<String> = words.split_whitespace().map(str::to_string).collect();
                tokenizer.tokenize(&words).map_err(|e| data_err(&path, format!("line {}: {e}", lineno + 1)))?;
                let feat_path = dir.join(rel);
                let c = MatrixContainer::read(&feat_path).map_err(|e| data_err(&feat_path, e))?;
                let features = c.require(FEATURES).map_err(|e| data_err(&feat_path, e))?.clone();
                match feature_dim {
                    None => feature_dim = Some(features.cols()),
                    Some(d) if d != features.cols() => {
                        return Err(data_err(&feat_path, format!("feature dim {} differs from {d}", features.cols())))
                    }
                    _ => {}
                }
                utts.push(Utterance { id: id.to_string(), words, features });
            }
            splits.insert(split, utts);
        }
        let feature_dim = feature_dim.ok_or_else(|| data_err(dir, "no utterances found"))?;
        Ok(Dataset { tokenizer, rare_words, feature_dim, splits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { train_size: 40, finetune_size: 10, eval_general_size: 10, eval_rare_size: 10, ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&small()).unwrap();
        let b = gen_dataset(&small()).unwrap();
        for split in Split::ALL {
            assert_eq!(a.split(split), b.split(split));
        }
        let c = gen_dataset(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.split(Split::Train), c.split(Split::Train));
    }

    #[test]
    fn written_corpus_is_byte_identical_and_reloads() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&small()).unwrap();
        ds.write(d1.path()).unwrap();
        gen_dataset(&small()).unwrap().write(d2.path()).unwrap();
        for rel in ["vocab.txt", "lexicon.txt", "train.tsv", "eval_rare.tsv", "feats/train/train-00007.fdt"] {
            assert_eq!(std::fs::read(d1.path().join(rel)).unwrap(), std::fs::read(d2.path().join(rel)).unwrap(), "{rel}");
        }
        let back = Dataset::load(d1.path()).unwrap();
        assert_eq!(back.rare_words, ds.rare_words);
        for split in Split::ALL {
            assert_eq!(back.split(split), ds.split(split));
        }
    }

    #[test]
    fn every_utterance_is_consistent() {
        let cfg = small();
        let ds = gen_dataset(&cfg).unwrap();
        for split in Split::ALL {
            for utt in ds.split(split) {
                let tok = ds.tokenizer.tokenize(&utt.words).unwrap();
                assert_eq!(utt.features.cols(), cfg.feature_dim);
                let min = tok.pieces.len() * cfg.piece_duration[0];
                assert!(utt.features.rows() >= min);
                assert!(utt.features.as_slice().iter().all(|&x| x as f32 as f64 == x));
            }
        }
        for utt in ds.split(Split::EvalRare) {
            assert_eq!(utt.words.iter().filter(|w| ds.rare_words.contains(*w)).count(), 1);
        }
    }

    #[test]
    fn zero_rare_fraction_keeps_training_transcripts_common() {
        let ds = gen_dataset(&SynthConfig { rare_train_fraction: 0.0, ..small() }).unwrap();
        for split in [Split::Train, Split::Finetune] {
            assert!(ds.split(split).iter().all(|u| !ds.contains_rare(u)));
        }
    }

    #[test]
    fn default_rare_token_rate_is_near_two_percent() {
        let ds = gen_dataset(&SynthConfig::default()).unwrap();
        let (mut rare, mut total) = (0usize, 0usize);
        for utt in ds.split(Split::Train) {
            total += utt.words.len();
            rare += utt.words.iter().filter(|w| ds.rare_words.contains(*w)).count();
        }
        let rate = rare as f64 / total as f64;
        assert!((0.01..=0.03).contains(&rate), "rare rate {rate}");
    }

    #[test]
    fn rare_prototypes_are_close_to_their_twins() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inv = build_inventory(&cfg, &mut rng).unwrap();
        for (r, c) in inv.rare.iter().zip(&inv.common) {
            assert_eq!(r.pieces.len(), c.pieces.len());
            for (&p, &q) in r.pieces.iter().zip(&c.pieces) {
                let dist: f64 = inv.prototypes[p as usize]
                    .iter()
                    .zip(&inv.prototypes[q as usize])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist < 4.0 * cfg.alpha * (cfg.feature_dim as f64).sqrt());
            }
        }
    }
}
