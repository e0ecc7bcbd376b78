//! Command-line front end used by the `durr` binary.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{params_fingerprint, Checkpoint, UnitKind};
use crate::degradation::{degrade, synthetic_corpus, DegradationKind};
use crate::error::{DurrError, Result};
use crate::eval::{eval_peak_psnr, eval_policies, export_trajectory, EvalOptions, EvalReport, PolicySpec};
use crate::image::{read_dir, Image};
use crate::pipelines::{train_policy_dqn, train_restorer, Schedule, TrainConfig};
use crate::policy::{MAX_STEPS_DEBLOCK, MAX_STEPS_DENOISE};
use crate::restorer::unfold_trajectory;

#[derive(Debug, Parser)]
#[command(name = "durr", version, about = "Recurrent image restoration with learned stopping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic grayscale corpus as PGM files.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corrupt one image or every image of a directory.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        /// Output file (single input) or directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        task: TaskLevel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supervised restorer training under a loop-count schedule.
    TrainRestorer {
        #[arg(long)]
        corpus: PathBuf,
        /// `25:4,35:6` or `fixed:8@35,45`.
        #[arg(long)]
        schedule: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        width_scale: Option<f64>,
    },
    /// Q-learning of the stopping policy against a frozen restorer.
    TrainPolicy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        restorer: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Training levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Environment steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        width_scale: Option<f64>,
        /// Training episodes precomputed from the frozen restorer.
        #[arg(long)]
        episodes: Option<usize>,
        /// Held-out episodes used for checkpoint selection.
        #[arg(long)]
        val_episodes: Option<usize>,
        /// Also feed the degraded observation to the policy.
        #[arg(long)]
        with_observation: bool,
    },
    /// Restore one image with a stopping rule.
    Restore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        restorer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `dqn`, `decorr`, `fixed:N` or `oracle`.
        #[arg(long, default_value = "dqn")]
        policy: String,
        #[arg(long)]
        policy_ckpt: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, default_value_t = MAX_STEPS_DENOISE)]
        max_steps: usize,
    },
    /// Evaluate stopping rules (or peak PSNR) on a corpus of clean images.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        restorer: PathBuf,
        #[arg(long)]
        policy_ckpt: Option<PathBuf>,
        /// Comma-separated rules; `peak` reports peak PSNR and peak step.
        #[arg(long, value_delimiter = ',', default_value = "peak")]
        policies: Vec<String>,
        #[arg(long, value_parser = parse_task, default_value = "denoise")]
        task: DegradationKind,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Summary CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-image CSV at full precision.
        #[arg(long)]
        detail: Option<PathBuf>,
    },
    /// Export every state of one unfolding as CSV rows and PGM images.
    Trajectory {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        restorer: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        policy_ckpt: Option<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        images: PathBuf,
    },
    /// Print a checkpoint's header, architecture and metadata.
    InspectCkpt { path: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct TaskLevel {
    #[arg(long, value_parser = parse_task, default_value = "denoise")]
    pub task: DegradationKind,
    /// Noise level on the 0–255 scale (denoise).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// JPEG quality factor (deblock).
    #[arg(long)]
    pub qf: Option<u32>,
}

impl TaskLevel {
    pub fn level(&self) -> Result<f64> {
        let level = match (self.task, self.sigma, self.qf) {
            (DegradationKind::Gaussian, Some(s), None) => s,
            (DegradationKind::Jpeg, None, Some(q)) => q as f64,
            (DegradationKind::Gaussian, _, _) => return Err(DurrError::InvalidArgument("denoise takes --sigma".into())),
            (DegradationKind::Jpeg, _, _) => return Err(DurrError::InvalidArgument("deblock takes --qf".into())),
        };
        self.task.validate_level(level)?;
        Ok(level)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_task, default_value = "denoise")]
    pub task: DegradationKind,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from full-size settings instead of the single-CPU preset.
    #[arg(long)]
    pub paper: bool,
    /// Training crop size; for the policy this replaces the mixed episode sizes.
    #[arg(long)]
    pub patch: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let base = if self.paper { TrainConfig::paper(self.task) } else { TrainConfig::desk(self.task) };
        TrainConfig {
            seed: self.seed,
            patch: self.patch.unwrap_or(base.patch),
            policy_patches: self.patch.map_or(base.policy_patches.clone(), |p| vec![p]),
            ..base
        }
    }
}

fn parse_task(s: &str) -> std::result::Result<DegradationKind, String> {
    s.parse().map_err(|e: DurrError| e.to_string())
}

fn default_max_steps(kind: DegradationKind) -> usize {
    match kind {
        DegradationKind::Gaussian => MAX_STEPS_DENOISE,
        DegradationKind::Jpeg => MAX_STEPS_DEBLOCK,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DurrError::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| DurrError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| DurrError::io(path, e))
}

fn load_corpus(dir: &Path) -> Result<Vec<Image>> {
    let corpus = read_dir(dir)?;
    if corpus.is_empty() {
        return Err(DurrError::EmptyCorpus);
    }
    Ok(corpus)
}

fn load_policy(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load_kind(p, UnitKind::Policy)).transpose()
}

/// Executes one parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let say = |out: &mut dyn Write, msg: String| writeln!(out, "{msg}").map_err(|e| DurrError::io("stdout", e));
    match cli.command {
        Command::GenCorpus {
            out: dir,
            count,
            width,
            height,
            seed,
        } => {
            if count == 0 || width == 0 || height == 0 {
                return Err(DurrError::InvalidArgument("count, width and height must be positive".into()));
            }
            fs::create_dir_all(&dir).map_err(|e| DurrError::io(&dir, e))?;
            for (i, img) in synthetic_corpus(count, width, height, seed).iter().enumerate() {
                img.write_pgm(dir.join(format!("img_{i:04}.pgm")))?;
            }
            say(out, format!("wrote {count} images to {}", dir.display()))
        }
        Command::Degrade { input, out: dest, task, seed } => {
            let level = task.level()?;
            if input.is_dir() {
                fs::create_dir_all(&dest).map_err(|e| DurrError::io(&dest, e))?;
                let mut paths: Vec<PathBuf> = fs::read_dir(&input)
                    .map_err(|e| DurrError::io(&input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("pgm" | "ppm")))
                    .collect();
                paths.sort();
                for (i, p) in paths.iter().enumerate() {
                    let img = degrade(&Image::read_pnm(p)?, task.task, level, seed.wrapping_add(i as u64))?;
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    img.write_pgm(dest.join(format!("{name}.pgm")))?;
                }
                say(out, format!("degraded {} images", paths.len()))
            } else {
                degrade(&Image::read_pnm(&input)?, task.task, level, seed)?.write_pgm(&dest)?;
                say(out, format!("wrote {}", dest.display()))
            }
        }
        Command::TrainRestorer {
            corpus,
            schedule,
            train,
            iterations,
            batch,
            width_scale,
        } => {
            let schedule: Schedule = schedule.parse()?;
            let base = train.config();
            let cfg = TrainConfig {
                iterations: iterations.unwrap_or(base.iterations),
                batch: batch.unwrap_or(base.batch),
                width_scale: width_scale.unwrap_or(base.width_scale),
                ..base
            };
            let corpus = load_corpus(&corpus)?;
            let mut log = train.log.as_deref().map(create).transpose()?;
            let run = train_restorer(&corpus, &schedule, &cfg, log.as_mut().map(|w| w as &mut dyn Write));
            if let Some(mut w) = log {
                w.flush().map_err(|e| DurrError::io("training log", e))?;
            }
            let run = match run {
                Err(DurrError::Diverged { iteration, last_good }) => {
                    last_good.save(&train.out)?;
                    return Err(DurrError::Diverged { iteration, last_good });
                }
                other => other?,
            };
            run.checkpoint.save(&train.out)?;
            let last = run.log.last().map(|r| format!("{:?}", r.val_psnr)).unwrap_or_default();
            say(out, format!("saved {} (validation PSNR per level {last})", train.out.display()))
        }
        Command::TrainPolicy {
            corpus,
            restorer,
            train,
            levels,
            steps,
            max_steps,
            width_scale,
            episodes,
            val_episodes,
            with_observation,
        } => {
            let base = train.config();
            let cfg = TrainConfig {
                policy_levels: levels.unwrap_or(base.policy_levels.clone()),
                policy_steps: steps.unwrap_or(base.policy_steps),
                max_steps: max_steps.unwrap_or(base.max_steps),
                policy_width_scale: width_scale.unwrap_or(base.policy_width_scale),
                episode_pool: episodes.unwrap_or(base.episode_pool),
                val_episodes: val_episodes.unwrap_or(base.val_episodes),
                with_observation,
                ..base
            };
            let corpus = load_corpus(&corpus)?;
            let restorer = Checkpoint::load_kind(&restorer, UnitKind::Restorer)?;
            let mut log = train.log.as_deref().map(create).transpose()?;
            let run = train_policy_dqn(&corpus, &restorer, &cfg, log.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log {
                w.flush().map_err(|e| DurrError::io("policy log", e))?;
            }
            run.checkpoint.save(&train.out)?;
            say(out, format!("saved {} (iteration {})", train.out.display(), run.checkpoint.meta.iteration))
        }
        Command::Restore {
            input,
            restorer,
            out: dest,
            policy,
            policy_ckpt,
            ground_truth,
            max_steps,
        } => {
            let spec: PolicySpec = policy.parse()?;
            let x0 = Image::read_pnm(&input)?;
            let gt = ground_truth.as_ref().map(Image::read_pnm).transpose()?;
            let restorer = Checkpoint::load_kind(&restorer, UnitKind::Restorer)?;
            let policy = load_policy(policy_ckpt.as_ref())?;
            let horizon = match spec {
                PolicySpec::Fixed(n) => n,
                PolicySpec::Oracle if gt.is_none() => return Err(DurrError::MissingGroundTruth),
                _ => max_steps,
            };
            let started = Instant::now();
            let traj = unfold_trajectory(&x0, &restorer.params, horizon, gt.as_ref())?;
            let stop = crate::eval::stop_index(&traj, spec, policy.as_ref().map(|c| &c.params), max_steps)?;
            let per_step = started.elapsed().as_secs_f64() / horizon.max(1) as f64;
            traj.states[stop].clamped().write_pgm(&dest)?;
            let quality = traj.psnr.as_ref().map(|p| format!(", PSNR {:.2} dB", p[stop])).unwrap_or_default();
            eprintln!("{:.3} ms per step", per_step * 1e3);
            say(out, format!("stopped at step {stop}{quality}; wrote {}", dest.display()))
        }
        Command::Eval {
            corpus,
            restorer,
            policy_ckpt,
            policies,
            task,
            levels,
            max_steps,
            seed,
            threads,
            out: dest,
            detail,
        } => {
            let corpus = load_corpus(&corpus)?;
            let restorer = Checkpoint::load_kind(&restorer, UnitKind::Restorer)?;
            let policy = load_policy(policy_ckpt.as_ref())?;
            let opts = EvalOptions {
                threads,
                ..EvalOptions::new(task, levels, max_steps.unwrap_or(default_max_steps(task)), seed)
            };
            let report = if policies.iter().all(|p| p == "peak") {
                eval_peak_psnr(&corpus, &restorer.params, &opts)?
            } else {
                let specs = policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicySpec>>>()?;
                eval_policies(&corpus, &restorer.params, policy.as_ref().map(|c| &c.params), &specs, &opts)?
            };
            emit_report(&report, dest.as_deref(), detail.as_deref(), out)
        }
        Command::Trajectory {
            input,
            restorer,
            steps,
            ground_truth,
            policy_ckpt,
            csv,
            images,
        } => {
            let x0 = Image::read_pnm(&input)?;
            let gt = ground_truth.as_ref().map(Image::read_pnm).transpose()?;
            let restorer = Checkpoint::load_kind(&restorer, UnitKind::Restorer)?;
            let policy = load_policy(policy_ckpt.as_ref())?;
            let started = Instant::now();
            export_trajectory(&x0, &restorer.params, steps, gt.as_ref(), policy.as_ref().map(|c| &c.params), &csv, &images)?;
            eprintln!("{:.3} ms per step", started.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64);
            say(out, format!("wrote {} and {} images to {}", csv.display(), steps + 1, images.display()))
        }
        Command::InspectCkpt { path } => {
            let ck = Checkpoint::load(&path)?;
            let arch = ck.params.arch();
            let mut lines = vec![
                format!("unit: {}", ck.kind),
                format!("family: {}", arch.family),
                format!("parameters: {}", ck.params.param_count()),
                format!("fingerprint: {:08x}", params_fingerprint(&ck.params)),
            ];
            for l in &arch.layers {
                lines.push(format!(
                    "  {} {} in={} out={} k={} stride={} dilation={}",
                    l.name,
                    l.kind.tag(),
                    l.in_ch,
                    l.out_ch,
                    l.kernel,
                    l.stride,
                    l.dilation
                ));
            }
            lines.push(match &ck.optimizer {
                Some(o) => format!("optimizer: {} step {}", o.method.name(), o.step),
                None => "optimizer: none".into(),
            });
            let m = &ck.meta;
            lines.push(format!("seed: {}", m.seed));
            lines.push(format!("iteration: {}", m.iteration));
            lines.push(format!("schedule: {}", m.schedule));
            lines.push(format!("config hash: {:08x}", m.config_hash));
            lines.push(format!("notes: {}", m.notes));
            say(out, lines.join("\n"))
        }
    }
}

fn emit_report(report: &EvalReport, dest: Option<&Path>, detail: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(p) => write_text(p, &report.to_csv())?,
        None => out.write_all(report.to_csv().as_bytes()).map_err(|e| DurrError::io("stdout", e))?,
    }
    if let Some(p) = detail {
        write_text(p, &report.detail_csv())?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("durr").chain(args.iter().copied()))
    }

    #[test]
    fn every_subcommand_parses() {
        let cases: &[&[&str]] = &[
            &["gen-corpus", "--out", "d"],
            &["degrade", "--input", "a.pgm", "--out", "b.pgm", "--task", "deblock", "--qf", "20"],
            &["train-restorer", "--corpus", "d", "--schedule", "25:4,35:6", "--out", "r.ckpt"],
            &["train-policy", "--corpus", "d", "--restorer", "r.ckpt", "--out", "p.ckpt", "--levels", "15,25"],
            &["restore", "--input", "a.pgm", "--restorer", "r.ckpt", "--out", "o.pgm", "--policy", "fixed:3"],
            &["eval", "--corpus", "d", "--restorer", "r.ckpt", "--levels", "15,25", "--policies", "oracle,fixed:4"],
            &["trajectory", "--input", "a.pgm", "--restorer", "r.ckpt", "--csv", "t.csv", "--images", "t"],
            &["inspect-ckpt", "r.ckpt"],
        ];
        for args in cases {
            parse(args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        assert!(parse(&["degrade", "--input", "a", "--out", "b", "--task", "blur"]).is_err());
        assert!(parse(&["eval", "--corpus", "d", "--restorer", "r"]).is_err());
    }

    #[test]
    fn task_level_pairs_flags_with_tasks() {
        let t = |task, sigma, qf| TaskLevel { task, sigma, qf }.level();
        assert_eq!(t(DegradationKind::Gaussian, Some(45.0), None).unwrap(), 45.0);
        assert_eq!(t(DegradationKind::Jpeg, None, Some(20)).unwrap(), 20.0);
        assert!(t(DegradationKind::Gaussian, None, Some(20)).is_err());
        assert!(t(DegradationKind::Jpeg, Some(3.0), None).is_err());
        assert!(t(DegradationKind::Jpeg, None, Some(0)).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["durr", "no-such-command"]), 1);
        assert_eq!(run(["durr", "restore", "--input", "x"]), 1);
        assert_eq!(run(["durr", "--help"]), 0);
    }
}
