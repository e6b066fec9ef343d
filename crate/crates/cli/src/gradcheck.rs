//! Finite-difference suites behind `grad-check`.

use std::fmt::Write as _;

use fdt_core::baselines::{mmi_loss_grad, mwer_loss_grad};
use fdt_core::ctc::{ctc_forward_loss, ctc_grad_logits};
use fdt_core::fdt::{segment_contrastive_loss_grad, ErrorSegment, FrameSpan};
use fdt_core::nbest::{nbest_posteriors, prefix_beam_search};
use fdt_core::tokenizer::{Lexicon, PieceVocab, Tokenizer};
use fdt_core::{LogPosteriorGrid, Matrix};
use fdt_oracles::{central_difference, relative_error};
use fdt_toy::encoder::{encoder_backward, encoder_forward, ToyEncoderParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

const STEP: f64 = 1e-5;

pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Structural checks (exact zeros, signs) that failed.
    pub violations: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.max_rel_err <= self.tolerance
    }
}

fn random_logits(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Matrix {
    Matrix::from_vec(frames, classes, (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

fn random_label(rng: &mut ChaCha8Rng, len: usize, classes: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(1..classes as u32)).collect()
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
fn max_fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    (0..x.len()).map(|i| relative_error(central_difference(&f, x, i, STEP), analytic[i])).fold(0.0, f64::max)
}

fn ctc_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let frames = rng.random_range(1..=6);
        let classes = rng.random_range(2..=5);
        let len = rng.random_range(1..=frames.min(3));
        let mut label = random_label(rng, len, classes);
        label.dedup();
        let logits = random_logits(rng, frames, classes);
        let analytic = ctc_grad_logits(&LogPosteriorGrid::from_logits(&logits)?, &label)?;
        let f = |v: &[f64]| {
            let m = Matrix::from_vec(frames, classes, v.to_vec()).expect("shape");
            ctc_forward_loss(&LogPosteriorGrid::from_logits(&m).expect("finite"), &label).expect("feasible")
        };
        worst = worst.max(max_fd_error(f, logits.as_slice(), analytic.as_slice()));
    }
    Ok(SuiteReport { name: "ctc_logits", cases, max_rel_err: worst, tolerance: 1e-4, violations: 0 })
}

fn segment_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<SuiteReport> {
    let (mut worst, mut violations) = (0.0f64, 0);
    for _ in 0..cases {
        let classes = 6;
        let ref_len = rng.random_range(1..=2);
        let ref_pieces = random_label(rng, ref_len, 4);
        let frames = rng.random_range(ref_pieces.len().max(2)..=6);
        let err_pieces = if rng.random_bool(0.25) { vec![] } else { vec![rng.random_range(4..classes as u32)] };
        let segment = ErrorSegment { word_index: 0, frames: FrameSpan { start: 0, end: frames - 1 }, ref_pieces, err_pieces, hyp_weight: 1.0 };
        let grid = LogPosteriorGrid::from_logits(&random_logits(rng, frames, classes))?;
        let out = segment_contrastive_loss_grad(&grid, &segment)?;
        let f = |v: &[f64]| {
            let g = LogPosteriorGrid::from_scores(Matrix::from_vec(frames, classes, v.to_vec()).expect("shape")).expect("finite");
            segment_contrastive_loss_grad(&g, &segment).expect("scorable").loss
        };
        worst = worst.max(max_fd_error(f, grid.matrix().as_slice(), out.grad_logp.as_slice()));
        for t in 0..frames {
            for c in 1..classes as u32 {
                let g = out.grad_logp.get(t, c as usize);
                let bad = if segment.ref_pieces.contains(&c) {
                    g > 0.0
                } else if segment.err_pieces.contains(&c) {
                    g < 0.0
                } else {
                    g != 0.0
                };
                violations += bad as usize;
            }
        }
    }
    Ok(SuiteReport { name: "fdt_segment", cases, max_rel_err: worst, tolerance: 1e-4, violations })
}

/// Single-piece words `w1..w{V}` over pieces `p1..p{V}`.
fn toy_tokenizer(pieces: usize) -> Tokenizer {
    let names: Vec<String> = (1..=pieces).map(|i| format!("p{i}")).collect();
    let vocab = PieceVocab::new(&names).expect("distinct pieces");
    let entries = (1..=pieces).map(|i| (format!("w{i}"), vec![i as u32])).collect();
    let lexicon = Lexicon::new(entries, &vocab).expect("valid lexicon");
    Tokenizer::new(vocab, lexicon)
}

fn baseline_suite(rng: &mut ChaCha8Rng, cases: usize, mwer: bool) -> Result<SuiteReport> {
    let classes = 4;
    let tokenizer = toy_tokenizer(classes - 1);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let frames = rng.random_range(3..=6);
        let words: Vec<String> = (0..rng.random_range(1..=2)).map(|_| format!("w{}", rng.random_range(1..classes))).collect();
        let reference = tokenizer.tokenize(&words)?;
        let logits = random_logits(rng, frames, classes);
        let grid = LogPosteriorGrid::from_logits(&logits)?;
        let nbest = nbest_posteriors(prefix_beam_search(&grid, 8, 4)?)?;
        let loss = |g: &LogPosteriorGrid| {
            if mwer {
                mwer_loss_grad(g, &reference, &nbest, &tokenizer)
            } else {
                mmi_loss_grad(g, &reference, &nbest)
            }
        };
        let analytic = loss(&grid)?.grad_logits;
        let f = |v: &[f64]| {
            let m = Matrix::from_vec(frames, classes, v.to_vec()).expect("shape");
            loss(&LogPosteriorGrid::from_logits(&m).expect("finite")).expect("scorable").loss
        };
        worst = worst.max(max_fd_error(f, logits.as_slice(), analytic.as_slice()));
    }
    let name = if mwer { "mwer_logits" } else { "mmi_logits" };
    Ok(SuiteReport { name, cases, max_rel_err: worst, tolerance: 1e-3, violations: 0 })
}

fn encoder_suite(rng: &mut ChaCha8Rng, cases: usize) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (context, dim, hidden, classes, frames) = (3, 4, 5, 4, 7);
        let params = ToyEncoderParams::init(context, dim, hidden, classes, rng);
        let features = random_logits(rng, frames, dim);
        let label = random_label(rng, 2, classes);
        let grid = encoder_forward(&params, &features)?;
        let grads = encoder_backward(&params, &features, &ctc_grad_logits(&grid, &label)?)?;
        for _ in 0..10 {
            let i = rng.random_range(0..params.num_params());
            let x = [params.get_flat(i)];
            let f = |v: &[f64]| {
                let mut p = params.clone();
                p.set_flat(i, v[0]);
                ctc_forward_loss(&encoder_forward(&p, &features).expect("forward"), &label).expect("feasible")
            };
            worst = worst.max(relative_error(central_difference(f, &x, 0, STEP), grads.get_flat(i)));
        }
    }
    Ok(SuiteReport { name: "encoder_params", cases, max_rel_err: worst, tolerance: 1e-4, violations: 0 })
}

/// Runs every suite from one seeded stream.
pub fn run_all(seed: u64, cases: usize) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        ctc_suite(&mut rng, cases)?,
        segment_suite(&mut rng, cases)?,
        baseline_suite(&mut rng, cases, false)?,
        baseline_suite(&mut rng, cases, true)?,
        encoder_suite(&mut rng, cases)?,
    ])
}

pub fn format(reports: &[SuiteReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{}\tcases={}\tmax_rel_err={:.3e}\ttol={:.0e}\tviolations={}\t{}",
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance,
            r.violations,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}
