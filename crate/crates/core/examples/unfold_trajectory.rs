//! Unfold a trained restorer for many steps and compare the stopping rules on one image.
//!
//! cargo run --release --example unfold_trajectory -- restorer.ckpt [sigma]
//!
//! Without a checkpoint a short training run (150 iterations) is done first.

use durr::degradation::{degrade, synthetic_corpus, DegradationKind};
use durr::pipelines::{train_restorer, TrainConfig};
use durr::{decorrelation_stop_index, oracle_peak_index, unfold_trajectory, Checkpoint, UnitKind};

fn main() -> durr::Result<()> {
    let mut args = std::env::args().skip(1);
    let restorer = match args.next() {
        Some(path) => Checkpoint::load_kind(path, UnitKind::Restorer)?,
        None => {
            eprintln!("no checkpoint given, training 150 iterations");
            let cfg = TrainConfig { iterations: 150, ..TrainConfig::desk(DegradationKind::Gaussian) };
            let corpus = synthetic_corpus(32, 64, 64, 1);
            train_restorer(&corpus, &"15:2,25:4,35:6".parse()?, &cfg, None)?.checkpoint
        }
    };
    let sigma: f64 = args.next().map_or(35.0, |s| s.parse().expect("sigma must be a number"));

    let clean = synthetic_corpus(1, 64, 64, 404).remove(0);
    let noisy = degrade(&clean, DegradationKind::Gaussian, sigma, 9)?;
    let traj = unfold_trajectory(&noisy, &restorer.params, 20, Some(&clean))?;
    let peak = oracle_peak_index(&traj)?;
    let decorr = decorrelation_stop_index(&traj)?;
    for (n, p) in traj.psnr.as_ref().expect("ground truth given").iter().enumerate() {
        let mark = match (n == peak, n == decorr) {
            (true, true) => "  <- peak, decorrelation",
            (true, false) => "  <- peak",
            (false, true) => "  <- decorrelation",
            _ => "",
        };
        println!("step {n:>2}  {p:7.3} dB{mark}");
    }
    Ok(())
}
