//! Lattice computations for focused discriminative training of streaming
//! word-piece CTC models.
//!
//! * [`ctc`]: standard CTC loss, occupancies, gradients and Viterbi alignment.
//! * [`nbest`]: prefix beam search and N-best posterior weights.
//! * [`constrained`]: the word-level CTC graph without intra-word blanks.
//! * [`fdt`]: word segmentation, error-region detection and the segment
//!   contrastive loss.
//! * [`baselines`]: N-best MMI and MWER, and word edit statistics.

pub mod baselines;
pub mod constrained;
pub mod container;
pub mod ctc;
pub mod error;
pub mod fdt;
pub mod grid;
pub mod nbest;
pub mod tokenizer;

pub use error::{FdtError, Result};
pub use grid::{LogPosteriorGrid, Matrix, BLANK};
