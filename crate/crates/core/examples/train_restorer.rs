//! Supervised training of the restoration unit under a refined loop schedule.
//!
//! cargo run --release --example train_restorer [iterations] [out.ckpt]
//!
//! The training log (CSV) goes to stdout. Try `fixed:8@15,25,35` in place of the refined
//! schedule to train the naive variant.

use std::io::Write;

use durr::degradation::{synthetic_corpus, DegradationKind};
use durr::pipelines::{train_restorer, Schedule, TrainConfig};

fn main() -> durr::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(Ok(300), |s| s.parse()).expect("iterations must be an integer");
    let out = args.next().unwrap_or_else(|| "restorer.ckpt".into());

    let corpus = synthetic_corpus(64, 64, 64, 1);
    let schedule: Schedule = "15:2,25:4,35:6".parse()?;
    let cfg = TrainConfig {
        iterations,
        seed: 1,
        ..TrainConfig::desk(DegradationKind::Gaussian)
    };
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let run = train_restorer(&corpus, &schedule, &cfg, Some(&mut log))?;
    log.flush().ok();
    run.checkpoint.save(&out)?;
    eprintln!("saved {out} ({} parameters)", run.checkpoint.params.param_count());
    Ok(())
}
