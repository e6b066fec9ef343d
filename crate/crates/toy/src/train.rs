//! CTC pre-training, discriminative fine-tuning and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fdt_core::baselines::{mmi_loss_grad, mwer_loss_grad};
use fdt_core::container::MatrixContainer;
use fdt_core::ctc::{ctc_posterior, occupancy_to_logit_grad};
use fdt_core::fdt::fdt_utterance_loss_grad;
use fdt_core::grid::log_posterior_grad_to_logits;
use fdt_core::nbest::{nbest_posteriors, prefix_beam_search};
use fdt_core::tokenizer::{TokenizedUtterance, Tokenizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, RunConfig};
use crate::encoder::{accumulate_backward, encoder_forward_with_activations, ToyEncoderParams};
use crate::error::{Result, ToyError};
use crate::synth::Utterance;

/// Stream offsets keep the init, pre-training and fine-tuning shuffles apart.
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 1 << 20;
const FINETUNE_STREAM: u64 = 2 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam moments. Parameters and moments are rounded to f32 after every
/// step so a checkpoint holds the exact training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ToyEncoderParams,
    pub v: ToyEncoderParams,
    pub steps: u64,
}

impl Adam {
    pub fn new(like: &ToyEncoderParams) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut ToyEncoderParams, grads: &ToyEncoderParams, h: AdamHyper) {
        self.steps += 1;
        let bc1 = 1.0 - h.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - h.beta2.powi(self.steps as i32);
        let tensors = params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(grads.tensors());
        for (((p, m), v), g) in tensors {
            for i in 0..p.len() {
                let mi = (h.beta1 * m[i] + (1.0 - h.beta1) * g[i]) as f32 as f64;
                let vi = (h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i]) as f32 as f64;
                m[i] = mi;
                v[i] = vi;
                let update = h.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + h.epsilon);
                p[i] = (p[i] - update) as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub epoch: u64,
    pub adam_steps: u64,
    pub seed: u64,
    pub context: usize,
    pub config_hash: String,
    /// Mean utterance loss per completed epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ToyEncoderParams,
    pub adam: Adam,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: String,
    pub epoch_losses: Vec<f64>,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl TrainState {
    /// Freshly initialized model for `cfg` with `classes` output units.
    pub fn init(cfg: &RunConfig, seed: u64, input_dim: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let params = ToyEncoderParams::init(cfg.encoder.context, input_dim, cfg.encoder.hidden, classes, &mut rng);
        let adam = Adam::new(&params);
        Self { params, adam, step: 0, epoch: 0, seed, config_hash: cfg.hash(), epoch_losses: Vec::new() }
    }

    pub fn meta(&self) -> TrainMeta {
        TrainMeta {
            step: self.step,
            epoch: self.epoch,
            adam_steps: self.adam.steps,
            seed: self.seed,
            context: self.params.context,
            config_hash: self.config_hash.clone(),
            epoch_losses: self.epoch_losses.clone(),
        }
    }

    /// Writes the parameter/moment container at `path` and its metadata at
    /// `path.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = MatrixContainer::new();
        self.params.push_to(&mut c, "")?;
        self.adam.m.push_to(&mut c, "adam.m.")?;
        self.adam.v.push_to(&mut c, "adam.v.")?;
        c.write(path).map_err(|e| ToyError::Data(format!("{}: {e}", path.display())))?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes") + "\n";
        let mp = meta_path(path);
        std::fs::write(&mp, meta).map_err(|e| ToyError::io(&mp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| ToyError::Data(format!("{}: {e}", mp.display())))?;
        let meta: TrainMeta = serde_json::from_str(&text).map_err(|e| ToyError::Data(format!("{}: {e}", mp.display())))?;
        let c = MatrixContainer::read(path).map_err(|e| ToyError::Data(format!("{}: {e}", path.display())))?;
        let params = ToyEncoderParams::read_from(&c, "", meta.context)?;
        let m = ToyEncoderParams::read_from(&c, "adam.m.", meta.context)?;
        let v = ToyEncoderParams::read_from(&c, "adam.v.", meta.context)?;
        Ok(Self {
            params,
            adam: Adam { m, v, steps: meta.adam_steps },
            step: meta.step,
            epoch: meta.epoch,
            seed: meta.seed,
            config_hash: meta.config_hash,
            epoch_losses: meta.epoch_losses,
        })
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ToyError::Config(format!("thread pool: {e}")))
}

/// Per-utterance results are computed in parallel, then reduced in input
/// order so the sum does not depend on the worker count.
fn map_ordered<T: Sync, R: Send>(pool: &rayon::ThreadPool, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if pool.current_num_threads() == 1 {
        return items.iter().map(f).collect();
    }
    pool.install(|| items.par_iter().map(f).collect())
}

pub(crate) fn tokenize_all(tokenizer: &Tokenizer, utts: &[Utterance]) -> Result<Vec<TokenizedUtterance>> {
    utts.iter()
        .map(|u| tokenizer.tokenize(&u.words).map_err(|e| ToyError::Data(format!("{}: {e}", u.id))))
        .collect()
}

fn epoch_order(seed: u64, stream: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

struct UttGrad {
    loss: f64,
    /// `None` when the utterance contributes nothing to the update.
    grads: Option<ToyEncoderParams>,
    segments_flagged: usize,
}

fn ctc_utterance(params: &ToyEncoderParams, utt: &Utterance, labels: &[u32]) -> Result<UttGrad> {
    let (grid, acts) = encoder_forward_with_activations(params, &utt.features)?;
    let post = ctc_posterior(&grid, labels)?;
    let g = occupancy_to_logit_grad(&grid, &post.occupancy);
    let mut grads = params.zeros_like();
    accumulate_backward(params, &utt.features, &acts, &g, &mut grads)?;
    Ok(UttGrad { loss: post.loss, grads: Some(grads), segments_flagged: 0 })
}

fn diverged(step: u64, detail: String) -> ToyError {
    ToyError::Divergence { step, detail }
}

/// Sums per-utterance gradients in order, divides by the batch size and
/// applies one Adam step. Returns false when nothing contributed.
#[derive(Clone, Copy, Debug)]
enum Update {
    Adam(AdamHyper),
    Sgd(f64),
}

fn apply_batch(state: &mut TrainState, results: Vec<UttGrad>, batch: usize, update: Update) -> Result<bool> {
    let mut total = state.params.zeros_like();
    let mut any = false;
    for r in results {
        if let Some(g) = r.grads {
            total.add_scaled(&g, 1.0);
            any = true;
        }
    }
    if !any {
        return Ok(false);
    }
    total.scale(1.0 / batch as f64);
    if !total.is_finite() {
        return Err(diverged(state.step, "non-finite gradient".into()));
    }
    match update {
        Update::Adam(h) => state.adam.step(&mut state.params, &total, h),
        Update::Sgd(lr) => {
            state.params.add_scaled(&total, -lr);
            state.params.round_to_f32();
        }
    }
    state.step += 1;
    if !state.params.is_finite() {
        return Err(diverged(state.step, "non-finite parameters after update".into()));
    }
    Ok(true)
}

/// Runs `epochs` further epochs of CTC training on `utts`.
pub fn train_ctc_epochs(state: &mut TrainState, utts: &[Utterance], tokenizer: &Tokenizer, cfg: &RunConfig, epochs: usize, workers: usize) -> Result<()> {
    if utts.is_empty() {
        return Err(ToyError::Data("empty training set".into()));
    }
    let labels = tokenize_all(tokenizer, utts)?;
    let pool = pool(workers)?;
    let t = &cfg.train;
    let h = AdamHyper { learning_rate: t.learning_rate, beta1: t.beta1, beta2: t.beta2, epsilon: t.epsilon };
    for _ in 0..epochs {
        let order = epoch_order(state.seed, TRAIN_STREAM + state.epoch, utts.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(t.batch_size) {
            let params = &state.params;
            let results = map_ordered(&pool, batch, |&i| ctc_utterance(params, &utts[i], &labels[i].pieces))?;
            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() {
                return Err(diverged(state.step, format!("non-finite CTC loss in epoch {}", state.epoch)));
            }
            loss_sum += batch_loss;
            apply_batch(state, results, batch.len(), Update::Adam(h))?;
        }
        state.epoch += 1;
        state.epoch_losses.push(loss_sum / utts.len() as f64);
    }
    Ok(())
}

/// Stage one: CTC training from a seeded initialization.
pub fn train_ctc_stage(cfg: &RunConfig, seed: u64, utts: &[Utterance], tokenizer: &Tokenizer, workers: usize) -> Result<TrainState> {
    cfg.validate()?;
    let input_dim = utts.first().map(|u| u.features.cols()).ok_or_else(|| ToyError::Data("empty training set".into()))?;
    let mut state = TrainState::init(cfg, seed, input_dim, tokenizer.vocab().num_classes());
    train_ctc_epochs(&mut state, utts, tokenizer, cfg, cfg.train.epochs, workers)?;
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Fdt,
    Mmi,
    Mwer,
    CtcControl,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Fdt, LossKind::Mmi, LossKind::Mwer, LossKind::CtcControl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Fdt => "fdt",
            LossKind::Mmi => "mmi",
            LossKind::Mwer => "mwer",
            LossKind::CtcControl => "ctc-control",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ToyError::Config(format!("unknown loss kind {s:?} (expected fdt, mmi, mwer or ctc-control)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStats {
    pub updates: u64,
    pub skipped_batches: u64,
    pub utterances: usize,
    pub utterances_skipped: usize,
    pub segments_flagged: usize,
    /// Mean discriminative (or control CTC) loss over contributing utterances.
    pub mean_loss: f64,
}

fn finetune_utterance(
    params: &ToyEncoderParams,
    utt: &Utterance,
    reference: &TokenizedUtterance,
    tokenizer: &Tokenizer,
    kind: LossKind,
    cfg: &RunConfig,
) -> Result<UttGrad> {
    if kind == LossKind::CtcControl {
        return ctc_utterance(params, utt, &reference.pieces);
    }
    let ft = &cfg.finetune;
    let (grid, acts) = encoder_forward_with_activations(params, &utt.features)?;
    let nbest = nbest_posteriors(prefix_beam_search(&grid, ft.beam, ft.nbest)?)?;
    let (loss, disc, flagged) = match kind {
        LossKind::Fdt => {
            let r = fdt_utterance_loss_grad(&grid, reference, &nbest)?;
            if r.utterance_skipped {
                return Ok(UttGrad { loss: 0.0, grads: None, segments_flagged: 0 });
            }
            (r.loss, log_posterior_grad_to_logits(&grid, &r.grad_logp)?, r.segments_flagged)
        }
        LossKind::Mmi => {
            let r = mmi_loss_grad(&grid, reference, &nbest)?;
            (r.loss, r.grad_logits, 0)
        }
        LossKind::Mwer => {
            let r = mwer_loss_grad(&grid, reference, &nbest, tokenizer)?;
            (r.loss, r.grad_logits, 0)
        }
        LossKind::CtcControl => unreachable!(),
    };
    let ctc = ctc_posterior(&grid, &reference.pieces)?;
    let mut g = occupancy_to_logit_grad(&grid, &ctc.occupancy);
    g.as_mut_slice().iter_mut().for_each(|v| *v *= ft.ctc_weight);
    g.add_scaled(&disc, 1.0 - ft.ctc_weight)?;
    let mut grads = params.zeros_like();
    accumulate_backward(params, &utt.features, &acts, &g, &mut grads)?;
    Ok(UttGrad { loss, grads: Some(grads), segments_flagged: flagged })
}

/// Stage two: `cfg.finetune.epochs` epochs of `kind` on `utts` with a fresh
/// optimizer. Each batch is decoded with the parameters current at that
/// batch (E-step) before its update (M-step).
pub fn finetune_stage(
    state: &TrainState,
    utts: &[Utterance],
    tokenizer: &Tokenizer,
    kind: LossKind,
    cfg: &RunConfig,
    workers: usize,
) -> Result<(TrainState, FinetuneStats)> {
    cfg.validate()?;
    let refs = tokenize_all(tokenizer, utts)?;
    let pool = pool(workers)?;
    let ft = &cfg.finetune;
    let update = match ft.optimizer {
        OptimizerKind::Adam => Update::Adam(AdamHyper {
            learning_rate: ft.learning_rate,
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            epsilon: cfg.train.epsilon,
        }),
        OptimizerKind::Sgd => Update::Sgd(ft.learning_rate),
    };
    let mut next = state.clone();
    next.adam = Adam::new(&next.params);
    next.config_hash = cfg.hash();
    let mut stats = FinetuneStats::default();
    let mut loss_sum = 0.0;
    for epoch in 0..ft.epochs as u64 {
        let order = epoch_order(state.seed, FINETUNE_STREAM + epoch, utts.len());
        for batch in order.chunks(ft.batch_size) {
            let params = &next.params;
            let results = map_ordered(&pool, batch, |&i| finetune_utterance(params, &utts[i], &refs[i], tokenizer, kind, cfg))?;
            for r in &results {
                stats.utterances += 1;
                stats.segments_flagged += r.segments_flagged;
                if r.grads.is_some() {
                    if !r.loss.is_finite() {
                        return Err(diverged(next.step, format!("non-finite {kind} loss")));
                    }
                    loss_sum += r.loss;
                } else {
                    stats.utterances_skipped += 1;
                }
            }
            if apply_batch(&mut next, results, batch.len(), update)? {
                stats.updates += 1;
            } else {
                stats.skipped_batches += 1;
            }
        }
    }
    let contributing = stats.utterances - stats.utterances_skipped;
    stats.mean_loss = if contributing > 0 { loss_sum / contributing as f64 } else { 0.0 };
    Ok((next, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::encoder::encoder_forward;
    use crate::synth::{gen_dataset, Split};
    use fdt_core::ctc::ctc_forward_loss;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth = SynthConfig {
            train_size: 24,
            finetune_size: 8,
            eval_general_size: 4,
            eval_rare_size: 4,
            common_words: 6,
            rare_words: 2,
            words_per_utterance: [2, 3],
            ..SynthConfig::default()
        };
        cfg.encoder.hidden = 16;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        cfg.finetune.batch_size = 4;
        cfg
    }

    #[test]
    fn memorizes_a_single_utterance() {
        let mut cfg = tiny_cfg();
        cfg.train.learning_rate = 1e-2;
        cfg.train.batch_size = 1;
        let ds = gen_dataset(&cfg.synth).unwrap();
        let one = &ds.split(Split::Train)[..1];
        let state = train_ctc_stage(&RunConfig { train: crate::config::OptimizerConfig { epochs: 200, ..cfg.train.clone() }, ..cfg.clone() }, 1, one, &ds.tokenizer, 1).unwrap();
        assert_eq!(state.step, 200);
        let labels = ds.tokenizer.tokenize(&one[0].words).unwrap().pieces;
        let loss = ctc_forward_loss(&encoder_forward(&state.params, &one[0].features).unwrap(), &labels).unwrap();
        assert!(loss < 0.1, "loss after 200 steps: {loss}");
    }

    #[test]
    fn training_is_deterministic_and_worker_independent() {
        let cfg = tiny_cfg();
        let ds = gen_dataset(&cfg.synth).unwrap();
        let train = ds.split(Split::Train);
        let a = train_ctc_stage(&cfg, 3, train, &ds.tokenizer, 1).unwrap();
        let b = train_ctc_stage(&cfg, 3, train, &ds.tokenizer, 1).unwrap();
        let c = train_ctc_stage(&cfg, 3, train, &ds.tokenizer, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
        let d = train_ctc_stage(&cfg, 4, train, &ds.tokenizer, 1).unwrap();
        assert_ne!(a.params, d.params);
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_for_bit() {
        let cfg = tiny_cfg();
        let ds = gen_dataset(&cfg.synth).unwrap();
        let train = ds.split(Split::Train);
        let mut straight = TrainState::init(&cfg, 5, cfg.synth.feature_dim, ds.tokenizer.vocab().num_classes());
        train_ctc_epochs(&mut straight, train, &ds.tokenizer, &cfg, 2, 1).unwrap();

        let mut first = TrainState::init(&cfg, 5, cfg.synth.feature_dim, ds.tokenizer.vocab().num_classes());
        train_ctc_epochs(&mut first, train, &ds.tokenizer, &cfg, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fdt");
        first.save(&path).unwrap();
        let mut resumed = TrainState::load(&path).unwrap();
        assert_eq!(resumed, first);
        train_ctc_epochs(&mut resumed, train, &ds.tokenizer, &cfg, 1, 1).unwrap();
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.adam, straight.adam);
    }

    #[test]
    fn control_with_zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg();
        let ds = gen_dataset(&cfg.synth).unwrap();
        let state = train_ctc_stage(&cfg, 1, ds.split(Split::Train), &ds.tokenizer, 1).unwrap();
        cfg.finetune.learning_rate = 0.0;
        let (next, stats) = finetune_stage(&state, ds.split(Split::Finetune), &ds.tokenizer, LossKind::CtcControl, &cfg, 1).unwrap();
        assert_eq!(next.params, state.params);
        assert_eq!(stats.updates, 2);
    }

    #[test]
    fn fdt_skips_utterances_the_model_already_gets_right() {
        let mut cfg = tiny_cfg();
        cfg.train.learning_rate = 1e-2;
        cfg.train.batch_size = 1;
        cfg.train.epochs = 150;
        // Only the top hypothesis competes; lower-ranked entries of a longer
        // list would still differ from the reference.
        cfg.finetune.nbest = 1;
        let ds = gen_dataset(&cfg.synth).unwrap();
        let one = &ds.split(Split::Train)[..1];
        let state = train_ctc_stage(&cfg, 1, one, &ds.tokenizer, 1).unwrap();
        let (next, stats) = finetune_stage(&state, one, &ds.tokenizer, LossKind::Fdt, &cfg, 1).unwrap();
        assert_eq!(stats.utterances_skipped, 1);
        assert_eq!(stats.updates, 0);
        assert_eq!(next.params, state.params);
    }

    #[test]
    fn small_fdt_step_lowers_the_batch_loss() {
        let mut cfg = tiny_cfg();
        cfg.finetune.ctc_weight = 0.0;
        let ds = gen_dataset(&cfg.synth).unwrap();
        let state = train_ctc_stage(&cfg, 1, ds.split(Split::Train), &ds.tokenizer, 1).unwrap();
        let mut checked = 0;
        for utt in ds.split(Split::Finetune) {
            let reference = ds.tokenizer.tokenize(&utt.words).unwrap();
            let grid = encoder_forward(&state.params, &utt.features).unwrap();
            let nbest = nbest_posteriors(prefix_beam_search(&grid, cfg.finetune.beam, cfg.finetune.nbest).unwrap()).unwrap();
            let before = fdt_utterance_loss_grad(&grid, &reference, &nbest).unwrap();
            let step = finetune_utterance(&state.params, utt, &reference, &ds.tokenizer, LossKind::Fdt, &cfg).unwrap();
            let Some(grads) = step.grads else { continue };
            assert_eq!(step.loss, before.loss);
            let mut params = state.params.clone();
            params.add_scaled(&grads, -1e-4);
            // The E-step is frozen: same hypotheses, same weights.
            let after = fdt_utterance_loss_grad(&encoder_forward(&params, &utt.features).unwrap(), &reference, &nbest).unwrap();
            assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn loss_kinds_parse() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("ctc".parse::<LossKind>().is_err());
    }
}
