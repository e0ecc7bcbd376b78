//! Q-learning of the stopping policy against a frozen restorer.
//!
//! cargo run --release --example train_policy -- restorer.ckpt [env_steps] [out.ckpt]
//!
//! The policy log (CSV) goes to stdout: validation return against the oracle return,
//! mean step gap and PSNR gap to the per-episode peak.

use std::io::Write;

use durr::degradation::{synthetic_corpus, DegradationKind};
use durr::pipelines::{train_policy_dqn, TrainConfig};
use durr::{Checkpoint, UnitKind};

fn main() -> durr::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(restorer) = args.next() else {
        eprintln!("usage: train_policy <restorer.ckpt> [env_steps] [out.ckpt]");
        std::process::exit(1);
    };
    let restorer = Checkpoint::load_kind(restorer, UnitKind::Restorer)?;
    let steps = args.next().map_or(Ok(2000), |s| s.parse()).expect("env_steps must be an integer");
    let out = args.next().unwrap_or_else(|| "policy.ckpt".into());

    let cfg = TrainConfig {
        policy_steps: steps,
        episode_pool: 192,
        val_episodes: 64,
        seed: 1,
        ..TrainConfig::desk(DegradationKind::Gaussian)
    };
    let corpus = synthetic_corpus(64, 64, 64, 1);
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let run = train_policy_dqn(&corpus, &restorer, &cfg, Some(&mut log))?;
    log.flush().ok();
    run.checkpoint.save(&out)?;
    eprintln!("saved {out}, selected at env step {}", run.checkpoint.meta.iteration);
    Ok(())
}
