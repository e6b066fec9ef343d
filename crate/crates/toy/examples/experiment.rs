//! Runs the full two-stage comparison for the given seeds and prints one
//! summary line per arm.
//!
//! cargo run --release -p fdt-toy --example experiment -- [config.toml] [seeds...]

use std::time::Instant;

use fdt_toy::experiment::run_arms;
use fdt_toy::synth::{gen_dataset, Split};
use fdt_toy::train::train_ctc_stage;
use fdt_toy::{LossKind, RunConfig, TrainState};

fn stage1_key(cfg: &RunConfig) -> String {
    RunConfig { finetune: Default::default(), decode: Default::default(), ..cfg.clone() }.hash()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).peekable();
    let cfg = match args.peek() {
        Some(a) if a.ends_with(".toml") => RunConfig::load(std::path::Path::new(&args.next().unwrap()))?,
        _ => RunConfig::default(),
    };
    let seeds: Vec<u64> = args.map(|a| a.parse()).collect::<Result<_, _>>()?;
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    for seed in seeds {
        let start = Instant::now();
        let mut cfg = cfg.clone();
        cfg.synth.seed = seed;
        let ds = gen_dataset(&cfg.synth)?;
        // STAGE1_CACHE=<dir> reuses stage-one checkpoints across runs.
        let cached = std::env::var_os("STAGE1_CACHE").map(|d| std::path::PathBuf::from(d).join(format!("{}-{seed}.fdt", &stage1_key(&cfg)[..12])));
        let state = match &cached {
            Some(p) if p.exists() => TrainState::load(p)?,
            _ => {
                let s = train_ctc_stage(&cfg, seed, ds.split(Split::Train), &ds.tokenizer, 1)?;
                if let Some(p) = &cached {
                    s.save(p)?;
                }
                s
            }
        };
        let out = run_arms(&cfg, &ds, &state, &LossKind::ALL, 1)?;
        println!(
            "seed {seed}: stage1 general {:.4} rare {:.4} entropy {:.4} losses {:.3?} ({:.1}s)",
            out.stage1.general_wer(),
            out.stage1.rare_wer(),
            out.stage1.entropy,
            out.stage1_epoch_losses,
            start.elapsed().as_secs_f64()
        );
        for arm in &out.arms {
            println!(
                "  {:<12} general {:.4} rare {:.4} werr {:+.4} entropy {:.4} updates {} skipped {} flagged {} general S/I/D {}/{}/{} rare S/I/D {}/{}/{}",
                arm.kind.name(),
                arm.scores.general_wer(),
                arm.scores.rare_wer(),
                out.rare_werr(arm.kind).unwrap(),
                arm.scores.entropy,
                arm.stats.updates,
                arm.stats.utterances_skipped,
                arm.stats.segments_flagged,
                arm.scores.general.overall.substitutions,
                arm.scores.general.overall.insertions,
                arm.scores.general.overall.deletions,
                arm.scores.rare.overall.substitutions,
                arm.scores.rare.overall.insertions,
                arm.scores.rare.overall.deletions
            );
        }
    }
    Ok(())
}
