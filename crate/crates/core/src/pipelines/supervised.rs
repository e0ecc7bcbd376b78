//! Restorer training: terminal-state MSE through the full unroll.

use std::collections::BTreeMap;
use std::io::Write;

use durr_tensor::{NetworkParams, OptMethod, OptState, Tape, Tensor, TensorError};

use super::{Schedule, TrainConfig};
use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta, UnitKind};
use crate::csv::{sig6, write_row};
use crate::degradation::{psnr, PatchStream};
use crate::error::{DurrError, Result};
use crate::image::Image;
use crate::restorer::{build_restoration_unit, terminal_loss, unfold_tensor, RestorerArch};

/// One validation round of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    /// Mean validation PSNR per scheduled level, in schedule order.
    pub val_psnr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RestorerRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Learning-rate decay on validation plateaus.
#[derive(Debug, Clone)]
pub struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
    min_delta: f64,
    factor: f64,
    floor: f64,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience: cfg.plateau_patience,
            min_delta: cfg.plateau_min_delta,
            factor: cfg.plateau_factor,
            floor: cfg.lr_floor,
        }
    }

    /// Feeds one validation score; returns the learning rate to use next.
    pub fn observe(&mut self, score: f64, lr: f64) -> f64 {
        if score > self.best + self.min_delta {
            self.best = score;
            self.stale = 0;
            return lr;
        }
        self.best = self.best.max(score);
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

/// Fixed validation crops: `(loops, degraded batch, clean batch)` per scheduled level.
struct Validation {
    groups: Vec<(usize, Tensor<f32>, Vec<Image>)>,
}

impl Validation {
    fn new(corpus: &[Image], schedule: &Schedule, cfg: &TrainConfig) -> Result<Self> {
        let mut groups = Vec::new();
        for (i, &(level, loops)) in schedule.pairs().iter().enumerate() {
            let mut stream = PatchStream::new(corpus, cfg.patch, cfg.val_patches, &[level], cfg.kind, cfg.seed ^ 0x5a17 ^ i as u64)?;
            let mut degraded = Vec::new();
            let mut clean = Vec::new();
            for _ in 0..cfg.val_patches {
                let (c, d, _, _) = stream.next_item()?;
                degraded.push(d.to_tensor());
                clean.push(c);
            }
            groups.push((loops, Tensor::stack_batch(&degraded)?, clean));
        }
        Ok(Self { groups })
    }

    fn psnr_per_level(&self, params: &NetworkParams<f32>) -> Result<Vec<f64>> {
        self.groups
            .iter()
            .map(|(loops, x0, clean)| {
                let last = unfold_tensor(x0, params, *loops)?.pop().expect("non-empty");
                let mut total = 0.0;
                for (i, gt) in clean.iter().enumerate() {
                    total += psnr(&Image::from_tensor(&last, i)?.clamped(), gt)?;
                }
                Ok(total / clean.len() as f64)
            })
            .collect()
    }
}

/// Holds out every eighth image (at least one) for validation when the corpus allows it.
pub fn split_validation(corpus: &[Image]) -> (Vec<Image>, Vec<Image>) {
    if corpus.len() < 2 {
        return (corpus.to_vec(), corpus.to_vec());
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, img) in corpus.iter().enumerate() {
        if i % 8 == 7 || (corpus.len() < 8 && i == corpus.len() - 1) {
            val.push(img.clone());
        } else {
            train.push(img.clone());
        }
    }
    (train, val)
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let items = idx.iter().map(|&i| t.batch_item(i)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

fn restorer_checkpoint(params: &NetworkParams<f32>, opt: &OptState<f32>, schedule: &Schedule, cfg: &TrainConfig, iteration: usize) -> Checkpoint {
    Checkpoint::new(
        UnitKind::Restorer,
        params.clone(),
        Some(opt.clone()),
        CheckpointMeta {
            seed: cfg.seed,
            iteration: iteration as u64,
            schedule: schedule.to_string(),
            config_hash: config_hash(&cfg.fingerprint()),
            notes: format!("task={}", cfg.kind),
        },
    )
}

/// Supervised restorer training. Each batch item is unrolled exactly the loop count of its
/// level; the loss is the terminal-state MSE, back-propagated through every step.
///
/// When `log` is given, a CSV row is appended after every validation round.
pub fn train_restorer(corpus: &[Image], schedule: &Schedule, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<RestorerRun> {
    let arch = RestorerArch::new(cfg.width_scale)?;
    let params = build_restoration_unit(&arch, cfg.seed);
    train_restorer_from(corpus, schedule, cfg, params, log)
}

/// As [`train_restorer`], starting from given parameters.
pub fn train_restorer_from(
    corpus: &[Image],
    schedule: &Schedule,
    cfg: &TrainConfig,
    mut params: NetworkParams<f32>,
    mut log: Option<&mut dyn Write>,
) -> Result<RestorerRun> {
    cfg.validate()?;
    schedule.validate_for(cfg.kind)?;
    if corpus.is_empty() {
        return Err(DurrError::EmptyCorpus);
    }
    let (train, val) = split_validation(corpus);
    let validation = Validation::new(&val, schedule, cfg)?;
    let levels = schedule.levels();
    let mut stream = PatchStream::new(&train, cfg.patch, cfg.batch, &levels, cfg.kind, cfg.seed ^ 0x7a11)?;

    if let Some(out) = log.as_deref_mut() {
        let mut header = vec!["iteration".to_string(), "lr".into(), "train_loss".into()];
        header.extend(levels.iter().map(|l| format!("val_psnr_{l}")));
        write_row(out, &header, "training log")?;
    }

    let mut opt = OptState::new(OptMethod::adam());
    let mut lr = cfg.restorer_lr;
    let mut plateau = Plateau::new(cfg);
    let mut last_good = restorer_checkpoint(&params, &opt, schedule, cfg, 0);
    let mut rows = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;

    for iteration in 1..=cfg.iterations {
        let batch = stream.next_batch()?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &level) in batch.levels.iter().enumerate() {
            let loops = schedule.loops_for(level).expect("stream draws scheduled levels");
            groups.entry(loops).or_default().push(i);
        }

        let mut tape = Tape::new();
        let p = tape.params(&params);
        let mut total = None;
        for (&loops, idx) in &groups {
            let x0 = gather(&batch.degraded, idx)?;
            let y = gather(&batch.clean, idx)?;
            let l = terminal_loss(&mut tape, &p, params.arch(), &x0, &y, loops)?;
            let l = tape.scale(l, idx.len() as f64 / batch.len() as f64)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.value(total).data()[0] as f64;
        let diverged = |last_good: Checkpoint| DurrError::Diverged {
            iteration: iteration as u64,
            last_good: Box::new(last_good),
        };
        if !loss.is_finite() {
            return Err(diverged(last_good));
        }
        let grads = tape.backward(total)?;
        match opt.step(&mut params, &grads, lr) {
            Err(TensorError::NonFiniteGradient(_)) => return Err(diverged(last_good)),
            other => other?,
        }
        loss_sum += loss;
        loss_count += 1;

        if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
            let val_psnr = validation.psnr_per_level(&params)?;
            let mean = val_psnr.iter().sum::<f64>() / val_psnr.len() as f64;
            if !mean.is_finite() {
                return Err(diverged(last_good));
            }
            let row = TrainLogRow {
                iteration,
                lr,
                train_loss: loss_sum / loss_count as f64,
                val_psnr,
            };
            if let Some(out) = log.as_deref_mut() {
                let mut fields = vec![iteration.to_string(), sig6(row.lr), sig6(row.train_loss)];
                fields.extend(row.val_psnr.iter().map(|&v| sig6(v)));
                write_row(out, &fields, "training log")?;
            }
            rows.push(row);
            loss_sum = 0.0;
            loss_count = 0;
            lr = plateau.observe(mean, lr);
            last_good = restorer_checkpoint(&params, &opt, schedule, cfg, iteration);
        }
    }
    Ok(RestorerRun {
        checkpoint: restorer_checkpoint(&params, &opt, schedule, cfg, cfg.iterations),
        log: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synthetic_corpus, DegradationKind};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            patch: 16,
            batch: 3,
            iterations: 4,
            eval_every: 2,
            val_patches: 2,
            ..TrainConfig::desk(DegradationKind::Gaussian)
        }
    }

    #[test]
    fn plateau_decays_after_patience_and_respects_floor() {
        let cfg = TrainConfig {
            lr_floor: 1e-4,
            ..tiny_cfg()
        };
        let mut p = Plateau::new(&cfg);
        let mut lr = 1e-3;
        lr = p.observe(20.0, lr);
        for _ in 0..4 {
            lr = p.observe(20.005, lr);
            assert_eq!(lr, 1e-3);
        }
        lr = p.observe(20.0, lr);
        assert!((lr - 1e-4).abs() < 1e-18);
        lr = p.observe(25.0, lr);
        for _ in 0..5 {
            lr = p.observe(25.0, lr);
        }
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn short_run_is_seeded_and_logs_every_round() {
        let corpus = synthetic_corpus(6, 24, 24, 1);
        let schedule: Schedule = "15:1,25:2".parse().unwrap();
        let mut csv_a = Vec::new();
        let a = train_restorer(&corpus, &schedule, &tiny_cfg(), Some(&mut csv_a)).unwrap();
        let mut csv_b = Vec::new();
        let b = train_restorer(&corpus, &schedule, &tiny_cfg(), Some(&mut csv_b)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(csv_a, csv_b);
        let text = String::from_utf8(csv_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,lr,train_loss,val_psnr_15,val_psnr_25");
        assert_eq!(lines.len(), 3);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.checkpoint.meta.schedule, "15:1,25:2");
        assert_eq!(a.checkpoint.meta.iteration, 4);
        assert_ne!(a.checkpoint.params, build_restoration_unit(&RestorerArch::new(0.25).unwrap(), 0));
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let corpus = synthetic_corpus(4, 24, 24, 2);
        let schedule: Schedule = "25:2".parse().unwrap();
        let cfg = tiny_cfg();
        let mut params = build_restoration_unit(&RestorerArch::new(0.25).unwrap(), 0);
        params.get_mut("conv9.b").unwrap().data_mut()[0] = f32::NAN;
        match train_restorer_from(&corpus, &schedule, &cfg, params.clone(), None) {
            Err(DurrError::Diverged { iteration, last_good }) => {
                assert_eq!(iteration, 1);
                assert_eq!(last_good.meta.iteration, 0);
                assert_eq!(last_good.params.get("conv1.w").unwrap(), params.get("conv1.w").unwrap());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unschedulable_levels() {
        let corpus = synthetic_corpus(2, 24, 24, 3);
        let cfg = TrainConfig {
            kind: DegradationKind::Jpeg,
            policy_levels: vec![20.0],
            ..tiny_cfg()
        };
        assert!(train_restorer(&corpus, &"20.5:2".parse().unwrap(), &cfg, None).is_err());
        assert!(matches!(train_restorer(&[], &"20:2".parse().unwrap(), &cfg, None), Err(DurrError::EmptyCorpus)));
    }
}
