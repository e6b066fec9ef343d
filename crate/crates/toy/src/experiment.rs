//! The two-stage experiment behind the desk-scale comparison: one CTC
//! model per seed, then one fine-tuning arm per loss kind from that model.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{entropy_report, evaluate, WerReport};
use crate::synth::{gen_dataset, Dataset, Split};
use crate::train::{finetune_stage, train_ctc_stage, FinetuneStats, LossKind, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub general: WerReport,
    pub rare: WerReport,
    /// Mean frame entropy on the general eval split.
    pub entropy: f64,
}

impl ModelScores {
    pub fn rare_wer(&self) -> f64 {
        self.rare.overall.wer()
    }

    pub fn general_wer(&self) -> f64 {
        self.general.overall.wer()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub kind: LossKind,
    pub scores: ModelScores,
    pub stats: FinetuneStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub stage1: ModelScores,
    pub stage1_epoch_losses: Vec<f64>,
    pub arms: Vec<ArmOutcome>,
}

impl SeedOutcome {
    pub fn arm(&self, kind: LossKind) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.kind == kind)
    }

    /// Relative rare-split WER reduction of `kind` against the stage-one model.
    pub fn rare_werr(&self, kind: LossKind) -> Option<f64> {
        let base = self.stage1.rare_wer();
        let arm = self.arm(kind)?.scores.rare_wer();
        Some(if base == 0.0 { 0.0 } else { (base - arm) / base })
    }
}

pub fn score_model(state: &TrainState, ds: &Dataset, cfg: &RunConfig, workers: usize) -> Result<ModelScores> {
    let d = &cfg.decode;
    let general_utts = ds.split(Split::EvalGeneral);
    Ok(ModelScores {
        general: evaluate(&state.params, ds, general_utts, d.beam, d.nbest, workers)?,
        rare: evaluate(&state.params, ds, ds.split(Split::EvalRare), d.beam, d.nbest, workers)?,
        entropy: entropy_report(&state.params, general_utts, d.entropy_bins, workers)?.mean,
    })
}

/// Generates the corpus for `seed`, trains stage one and fine-tunes every
/// arm in `kinds` from the same stage-one state.
pub fn run_seed(cfg: &RunConfig, seed: u64, kinds: &[LossKind], workers: usize) -> Result<SeedOutcome> {
    let mut cfg = cfg.clone();
    cfg.synth.seed = seed;
    let ds = gen_dataset(&cfg.synth)?;
    let state = train_ctc_stage(&cfg, seed, ds.split(Split::Train), &ds.tokenizer, workers)?;
    run_arms(&cfg, &ds, &state, kinds, workers)
}

/// Scores `state` and fine-tunes one copy of it per arm.
pub fn run_arms(cfg: &RunConfig, ds: &Dataset, state: &TrainState, kinds: &[LossKind], workers: usize) -> Result<SeedOutcome> {
    let stage1 = score_model(state, ds, cfg, workers)?;
    let mut arms = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (tuned, stats) = finetune_stage(state, ds.split(Split::Finetune), &ds.tokenizer, kind, cfg, workers)?;
        arms.push(ArmOutcome { kind, scores: score_model(&tuned, ds, cfg, workers)?, stats });
    }
    Ok(SeedOutcome { seed: state.seed, stage1, stage1_epoch_losses: state.epoch_losses.clone(), arms })
}
