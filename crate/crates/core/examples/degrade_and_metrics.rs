//! Corrupt a synthetic image with noise and blocking, then score the results.
//!
//! cargo run --example degrade_and_metrics [out_dir]

use durr::degradation::{degrade, psnr, ssim, synthetic_corpus, DegradationKind};

fn main() -> durr::Result<()> {
    let out = std::env::args().nth(1);
    let clean = synthetic_corpus(1, 96, 96, 11).remove(0);
    println!("{:<10} {:>6} {:>9} {:>7}", "task", "level", "psnr_db", "ssim");
    for (kind, levels) in [(DegradationKind::Gaussian, [15.0, 25.0, 50.0]), (DegradationKind::Jpeg, [10.0, 30.0, 70.0])] {
        for level in levels {
            let noisy = degrade(&clean, kind, level, 1)?;
            println!("{:<10} {level:>6} {:>9.3} {:>7.4}", kind.to_string(), psnr(&noisy, &clean)?, ssim(&noisy, &clean)?);
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| durr::DurrError::io(dir, e))?;
                noisy.write_pgm(format!("{dir}/{kind}_{level}.pgm"))?;
            }
        }
    }
    if let Some(dir) = &out {
        clean.write_pgm(format!("{dir}/clean.pgm"))?;
    }
    Ok(())
}
