//! Resolves where posterior grids and references come from: a checkpoint run
//! over a corpus split, or a grid container plus vocabulary files.

use std::path::{Path, PathBuf};

use clap::Args;
use fdt_core::container::MatrixContainer;
use fdt_core::tokenizer::{Lexicon, PieceVocab, Tokenizer};
use fdt_core::LogPosteriorGrid;
use fdt_toy::eval::posterior_grids;
use fdt_toy::synth::{Dataset, Split};
use fdt_toy::TrainState;

use crate::error::{CliError, Result};

#[derive(Args, Debug, Clone)]
pub struct GridSource {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "eval_general")]
    pub split: Split,
    /// Model checkpoint; grids are computed from the split's features.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Matrix container of log-posterior grids, one per utterance id.
    #[arg(long, conflicts_with = "ckpt")]
    pub grids: Option<PathBuf>,
    /// Vocabulary file (used with --grids when --data is absent).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Lexicon file (used with --grids when --data is absent).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// References as `id<TAB>...<TAB>words`; only the first and last fields
    /// are read, so split manifests work too.
    #[arg(long)]
    pub refs: Option<PathBuf>,
}

pub struct Item {
    pub id: String,
    pub grid: LogPosteriorGrid,
    pub words: Option<Vec<String>>,
}

pub struct Inputs {
    pub tokenizer: Tokenizer,
    pub items: Vec<Item>,
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| data_err(path, e))
}

fn parse_refs(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (lineno, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(data_err(path, format!("line {}: expected id and words separated by a tab", lineno + 1)));
        }
        let words = fields[fields.len() - 1].split_whitespace().map(str::to_string).collect();
        out.push((fields[0].to_string(), words));
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn load_tokenizer(src: &GridSource) -> Result<Tokenizer> {
    if let Some(dir) = &src.data {
        let (v, l) = (dir.join("vocab.txt"), dir.join("lexicon.txt"));
        return Tokenizer::load(&v, &l).map_err(|e| data_err(dir, e));
    }
    let vocab_path = src.vocab.as_ref().ok_or_else(|| CliError::Usage("--grids needs --data or --vocab".into()))?;
    let vocab = PieceVocab::parse(&read_text(vocab_path)?).map_err(|e| data_err(vocab_path, e))?;
    let lexicon = match &src.lexicon {
        Some(p) => Lexicon::parse(&read_text(p)?, &vocab).map_err(|e| data_err(p, e))?,
        None => Lexicon::new(Default::default(), &vocab)?,
    };
    Ok(Tokenizer::new(vocab, lexicon))
}

/// Loads grids in container order (or split order for checkpoints).
pub fn load(src: &GridSource, workers: usize) -> Result<Inputs> {
    if let Some(path) = &src.grids {
        let tokenizer = load_tokenizer(src)?;
        let refs = match (&src.refs, &src.data) {
            (Some(p), _) => parse_refs(p)?,
            (None, Some(dir)) => parse_refs(&dir.join(format!("{}.tsv", src.split.name())))?,
            (None, None) => Vec::new(),
        };
        let c = MatrixContainer::read(path).map_err(|e| data_err(path, e))?;
        let mut items = Vec::with_capacity(c.len());
        for (name, m) in c.iter() {
            // Stored values are f32, so rows are renormalized on load.
            let grid = LogPosteriorGrid::from_logits(m).map_err(|e| data_err(path, format!("{name}: {e}")))?;
            if grid.num_classes() != tokenizer.vocab().num_classes() {
                return Err(data_err(
                    path,
                    format!("{name}: grid has {} classes, vocabulary has {}", grid.num_classes(), tokenizer.vocab().num_classes()),
                ));
            }
            let words = refs.iter().find(|(id, _)| id == name).map(|(_, w)| w.clone());
            items.push(Item { id: name.to_string(), grid, words });
        }
        return Ok(Inputs { tokenizer, items });
    }
    let (Some(dir), Some(ckpt)) = (&src.data, &src.ckpt) else {
        return Err(CliError::Usage("need --data with --ckpt, or --grids".into()));
    };
    let ds = load_dataset(dir)?;
    let state = TrainState::load(ckpt)?;
    if state.params.input_dim != ds.feature_dim || state.params.classes != ds.tokenizer.vocab().num_classes() {
        return Err(data_err(ckpt, "checkpoint shape does not match the corpus"));
    }
    let utts = ds.split(src.split);
    let grids = posterior_grids(&state.params, utts, workers)?;
    let items = utts
        .iter()
        .zip(grids)
        .map(|(u, grid)| Item { id: u.id.clone(), grid, words: Some(u.words.clone()) })
        .collect();
    Ok(Inputs { tokenizer: ds.tokenizer, items })
}
