use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ToyError};

/// Synthetic rare-word corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub common_words: usize,
    pub rare_words: usize,
    /// Probability that a word slot in a training transcript holds a rare word.
    pub rare_train_fraction: f64,
    /// Inclusive frame-count range per piece.
    pub piece_duration: [usize; 2],
    /// Inclusive silence range before, between and after words.
    pub silence: [usize; 2],
    pub noise_sigma: f64,
    /// Scale of the perturbation separating a rare word from its common twin.
    pub alpha: f64,
    pub train_size: usize,
    pub finetune_size: usize,
    pub eval_general_size: usize,
    pub eval_rare_size: usize,
    pub words_per_utterance: [usize; 2],
    /// Inclusive piece-count range for common words.
    pub pieces_per_word: [usize; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            feature_dim: 16,
            common_words: 40,
            rare_words: 8,
            rare_train_fraction: 0.02,
            piece_duration: [2, 4],
            silence: [0, 2],
            noise_sigma: 0.5,
            alpha: 0.3,
            train_size: 2000,
            finetune_size: 500,
            eval_general_size: 200,
            eval_rare_size: 200,
            words_per_utterance: [3, 8],
            pieces_per_word: [1, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Frames of left context seen at each step, current frame included.
    pub context: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { context: 5, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, batch_size: 8, epochs: 20 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Fine-tuning starts from fresh optimizer state; Adam reuses the
    /// pre-training betas and epsilon.
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the CTC term mixed into every discriminative loss.
    pub ctc_weight: f64,
    pub beam: usize,
    /// Hypotheses per E-step, shared by every arm. Picked with the learning
    /// rate by a sweep over N in {1, 4} and lr in {3e-4, 1e-3, 2e-3}.
    pub nbest: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Adam, learning_rate: 1e-3, batch_size: 8, epochs: 1, ctc_weight: 0.1, beam: 16, nbest: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub nbest: usize,
    pub entropy_bins: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 16, nbest: 4, entropy_bins: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<String>,
    pub work_dir: Option<String>,
}

/// Everything a run depends on. Loaded from TOML; missing keys take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: OptimizerConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    pub paths: PathsConfig,
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ToyError::Config(what.to_string()))
    }
}

fn check_range(range: [usize; 2], name: &str) -> Result<()> {
    check(range[0] <= range[1], &format!("{name}: lower bound {} exceeds upper bound {}", range[0], range[1]))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.feature_dim > 0, "synth.feature_dim must be positive")?;
        check(self.common_words > 0, "synth.common_words must be positive")?;
        check(self.rare_words > 0, "synth.rare_words must be positive")?;
        check(self.rare_words <= self.common_words, "synth.rare_words cannot exceed synth.common_words")?;
        check((0.0..=1.0).contains(&self.rare_train_fraction), "synth.rare_train_fraction must lie in [0, 1]")?;
        check(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(), "synth.noise_sigma must be finite and non-negative")?;
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "synth.alpha must be finite and non-negative")?;
        for (n, name) in [
            (self.train_size, "train_size"),
            (self.finetune_size, "finetune_size"),
            (self.eval_general_size, "eval_general_size"),
            (self.eval_rare_size, "eval_rare_size"),
        ] {
            check(n > 0, &format!("synth.{name} must be positive"))?;
        }
        check_range(self.piece_duration, "synth.piece_duration")?;
        check(self.piece_duration[0] >= 1, "synth.piece_duration must be at least one frame")?;
        check_range(self.silence, "synth.silence")?;
        check_range(self.words_per_utterance, "synth.words_per_utterance")?;
        check(self.words_per_utterance[0] >= 1, "synth.words_per_utterance must allow at least one word")?;
        check_range(self.pieces_per_word, "synth.pieces_per_word")?;
        check(self.pieces_per_word[0] >= 1, "synth.pieces_per_word must be at least one")?;
        Ok(())
    }
}

impl OptimizerConfig {
    fn validate(&self, section: &str) -> Result<()> {
        check(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), &format!("{section}.learning_rate must be finite and non-negative"))?;
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), &format!("{section}: betas must lie in [0, 1)"))?;
        check(self.epsilon > 0.0, &format!("{section}.epsilon must be positive"))?;
        check(self.batch_size > 0, &format!("{section}.batch_size must be positive"))?;
        Ok(())
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        check(self.encoder.context > 0 && self.encoder.hidden > 0, "encoder.context and encoder.hidden must be positive")?;
        self.train.validate("train")?;
        let ft = &self.finetune;
        check(ft.learning_rate >= 0.0 && ft.learning_rate.is_finite(), "finetune.learning_rate must be finite and non-negative")?;
        check(ft.batch_size > 0, "finetune.batch_size must be positive")?;
        check((0.0..=1.0).contains(&ft.ctc_weight), "finetune.ctc_weight must lie in [0, 1]")?;
        check(ft.nbest >= 1 && ft.beam >= ft.nbest, "finetune: need beam >= nbest >= 1")?;
        check(self.decode.nbest >= 1 && self.decode.beam >= self.decode.nbest, "decode: need beam >= nbest >= 1")?;
        check(self.decode.entropy_bins > 0, "decode.entropy_bins must be positive")?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ToyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ToyError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[synth]\nsead = 3\n"), Err(ToyError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[bogus]\n"), Err(ToyError::Config(_))));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("[synth]\nseed = 9\ntrain_size = 10\n").unwrap();
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.synth.train_size, 10);
        assert_eq!(cfg.synth.feature_dim, 16);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "[synth]\nrare_train_fraction = 1.5\n",
            "[synth]\ncommon_words = 0\n",
            "[synth]\npiece_duration = [4, 2]\n",
            "[finetune]\nbeam = 2\nnbest = 4\n",
            "[train]\nbatch_size = 0\n",
        ] {
            assert!(matches!(RunConfig::from_toml(doc), Err(ToyError::Config(_))), "{doc}");
        }
    }
}
