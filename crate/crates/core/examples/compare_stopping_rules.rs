//! Learned stopping against the oracle peak, decorrelation and fixed unroll lengths.
//!
//! cargo run --release --example compare_stopping_rules -- restorer.ckpt [policy.ckpt]

use durr::degradation::{synthetic_corpus, DegradationKind};
use durr::eval::{eval_policies, EvalOptions, PolicySpec};
use durr::{Checkpoint, UnitKind};

fn main() -> durr::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(restorer) = args.next() else {
        eprintln!("usage: compare_stopping_rules <restorer.ckpt> [policy.ckpt]");
        std::process::exit(1);
    };
    let restorer = Checkpoint::load_kind(restorer, UnitKind::Restorer)?;
    let policy = args.next().map(|p| Checkpoint::load_kind(p, UnitKind::Policy)).transpose()?;

    let mut specs = vec![PolicySpec::Fixed(0), PolicySpec::Oracle, PolicySpec::Decorrelation];
    if policy.is_some() {
        specs.push(PolicySpec::Dqn);
    }
    specs.extend([2, 4, 6, 8].map(PolicySpec::Fixed));
    let held_out = synthetic_corpus(16, 48, 48, 999);
    let opts = EvalOptions::new(DegradationKind::Gaussian, vec![15.0, 25.0, 35.0, 45.0], 20, 7);
    let report = eval_policies(&held_out, &restorer.params, policy.as_ref().map(|c| &c.params), &specs, &opts)?;
    print!("{}", report.to_csv());
    Ok(())
}
