//! Evaluation harnesses: peak-PSNR tables, stop-controlled restoration and trajectory export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use durr_tensor::NetworkParams;

use crate::csv::{full, sig6};
use crate::degradation::{degrade, psnr, ssim, DegradationKind};
use crate::error::{DurrError, Result};
use crate::image::Image;
use crate::policy::{decorrelation_stop_index, oracle_peak_index, policy_q_step_observed, PolicyState};
use crate::restorer::{unfold_trajectory, Trajectory};

/// Which rule picks the output state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySpec {
    /// Learned Q-network.
    Dqn,
    /// Least correlation between removed component and estimate.
    Decorrelation,
    /// Always `n` steps.
    Fixed(usize),
    /// Highest PSNR against ground truth.
    Oracle,
}

impl FromStr for PolicySpec {
    type Err = DurrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(Self::Dqn),
            "decorr" => Ok(Self::Decorrelation),
            "oracle" => Ok(Self::Oracle),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|n| n.parse().ok())
                .map(Self::Fixed)
                .ok_or_else(|| DurrError::InvalidArgument(format!("unknown policy {s:?} (expected dqn, decorr, fixed:N or oracle)"))),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dqn => f.write_str("dqn"),
            Self::Decorrelation => f.write_str("decorr"),
            Self::Fixed(n) => write!(f, "fixed:{n}"),
            Self::Oracle => f.write_str("oracle"),
        }
    }
}

/// Shared evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub kind: DegradationKind,
    pub levels: Vec<f64>,
    /// Step cap for the policy, decorrelation and oracle rules.
    pub max_steps: usize,
    /// Seeds the per-image degradation.
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(kind: DegradationKind, levels: Vec<f64>, max_steps: usize, seed: u64) -> Self {
        Self {
            kind,
            levels,
            max_steps,
            seed,
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(DurrError::InvalidArgument("no evaluation levels".into()));
        }
        self.levels.iter().try_for_each(|&l| self.kind.validate_level(l))
    }

    /// Noise seed of image `index` at `level`; identical for every policy.
    pub fn image_seed(&self, level: f64, index: usize) -> u64 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.seed.to_le_bytes());
        h.update(&level.to_le_bytes());
        h.update(&(index as u64).to_le_bytes());
        h.finalize() as u64 | (self.seed << 32)
    }
}

/// Per-image outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailRow {
    pub level: f64,
    pub policy: String,
    pub image: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub stop: usize,
}

/// Means over one `(level, policy)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub level: f64,
    pub policy: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_stop: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub detail: Vec<DetailRow>,
}

pub const SUMMARY_HEADER: &str = "level,policy,mean_psnr,mean_ssim,mean_stop,count";
pub const DETAIL_HEADER: &str = "level,policy,image,psnr,ssim,stop";

impl EvalReport {
    /// Groups detail rows in first-seen `(level, policy)` order.
    pub fn from_detail(detail: Vec<DetailRow>) -> Self {
        let mut rows: Vec<EvalRow> = Vec::new();
        for d in &detail {
            let pos = rows.iter().position(|r| r.level == d.level && r.policy == d.policy);
            let row = match pos {
                Some(i) => &mut rows[i],
                None => {
                    rows.push(EvalRow {
                        level: d.level,
                        policy: d.policy.clone(),
                        mean_psnr: 0.0,
                        mean_ssim: 0.0,
                        mean_stop: 0.0,
                        count: 0,
                    });
                    rows.last_mut().expect("just pushed")
                }
            };
            row.mean_psnr += d.psnr;
            row.mean_ssim += d.ssim;
            row.mean_stop += d.stop as f64;
            row.count += 1;
        }
        for r in &mut rows {
            let n = r.count as f64;
            r.mean_psnr /= n;
            r.mean_ssim /= n;
            r.mean_stop /= n;
        }
        Self { rows, detail }
    }

    pub fn row(&self, level: f64, policy: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.level == level && r.policy == policy)
    }

    /// Summary CSV, floats with six significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                sig6(r.level),
                r.policy,
                sig6(r.mean_psnr),
                sig6(r.mean_ssim),
                sig6(r.mean_stop),
                r.count
            );
        }
        s
    }

    /// Per-image CSV at full precision, so summary means can be recomputed exactly.
    pub fn detail_csv(&self) -> String {
        let mut s = format!("{DETAIL_HEADER}\n");
        for d in &self.detail {
            s += &format!("{},{},{},{},{},{}\n", full(d.level), d.policy, d.image, full(d.psnr), full(d.ssim), d.stop);
        }
        s
    }
}

/// Runs `f` over `0..n` on up to `threads` workers; output order follows the index.
fn ordered_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let per = n.div_ceil(threads);
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * per..((t + 1) * per).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn check_corpus(corpus: &[Image]) -> Result<()> {
    if corpus.is_empty() {
        Err(DurrError::EmptyCorpus)
    } else {
        Ok(())
    }
}

/// Mean peak PSNR and mean peak step per level (policy column `peak`).
pub fn eval_peak_psnr(corpus: &[Image], restorer: &NetworkParams<f32>, opts: &EvalOptions) -> Result<EvalReport> {
    eval_policies(corpus, restorer, None, &[PolicySpec::Oracle], opts).map(|mut r| {
        for d in &mut r.detail {
            d.policy = "peak".into();
        }
        EvalReport::from_detail(r.detail)
    })
}

/// Stop-controlled restoration under one policy.
pub fn eval_durr(
    corpus: &[Image],
    restorer: &NetworkParams<f32>,
    policy: Option<&NetworkParams<f32>>,
    spec: PolicySpec,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    eval_policies(corpus, restorer, policy, &[spec], opts)
}

/// Evaluates several stopping rules on identical degraded images, sharing one trajectory
/// per image. Rows are ordered by level, then by `specs` order.
pub fn eval_policies(
    corpus: &[Image],
    restorer: &NetworkParams<f32>,
    policy: Option<&NetworkParams<f32>>,
    specs: &[PolicySpec],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_corpus(corpus)?;
    opts.validate()?;
    if specs.contains(&PolicySpec::Dqn) && policy.is_none() {
        return Err(DurrError::InvalidArgument("the dqn rule needs a policy checkpoint".into()));
    }
    let needs_cap = specs.iter().any(|s| !matches!(s, PolicySpec::Fixed(_)));
    if needs_cap && opts.max_steps == 0 {
        return Err(DurrError::InvalidArgument("max_steps must be at least 1".into()));
    }
    let horizon = specs
        .iter()
        .map(|s| match s {
            PolicySpec::Fixed(n) => *n,
            _ => opts.max_steps,
        })
        .max()
        .unwrap_or(0);
    let mut detail = Vec::new();
    for &level in &opts.levels {
        let per_image = ordered_map(corpus.len(), opts.threads, |i| {
            let gt = &corpus[i];
            let x0 = degrade(gt, opts.kind, level, opts.image_seed(level, i))?;
            let traj = unfold_trajectory(&x0, restorer, horizon, Some(gt))?;
            specs
                .iter()
                .map(|&spec| {
                    let stop = stop_index(&traj, spec, policy, opts.max_steps)?;
                    let out = traj.states[stop].clamped();
                    Ok(DetailRow {
                        level,
                        policy: spec.to_string(),
                        image: i,
                        psnr: psnr(&out, gt)?,
                        ssim: ssim(&out, gt)?,
                        stop,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for spec_idx in 0..specs.len() {
            detail.extend(per_image.iter().map(|rows| rows[spec_idx].clone()));
        }
    }
    Ok(EvalReport::from_detail(detail))
}

/// Output step chosen by `spec` on a trajectory that reaches at least the needed horizon.
pub fn stop_index(traj: &Trajectory, spec: PolicySpec, policy: Option<&NetworkParams<f32>>, max_steps: usize) -> Result<usize> {
    let capped = || Trajectory {
        states: traj.states[..=max_steps.min(traj.steps())].to_vec(),
        psnr: traj.psnr.as_ref().map(|p| p[..=max_steps.min(traj.steps())].to_vec()),
    };
    match spec {
        PolicySpec::Fixed(n) if n <= traj.steps() => Ok(n),
        PolicySpec::Fixed(n) => Err(DurrError::InvalidArgument(format!("trajectory has only {} steps, need {n}", traj.steps()))),
        PolicySpec::Oracle => oracle_peak_index(&capped()),
        PolicySpec::Decorrelation => decorrelation_stop_index(&capped()),
        PolicySpec::Dqn => {
            let policy = policy.ok_or_else(|| DurrError::InvalidArgument("the dqn rule needs a policy checkpoint".into()))?;
            let cap = max_steps.min(traj.steps());
            let mut state = PolicyState::for_params(policy)?;
            for n in 0..cap {
                let (q, next) = policy_q_step_observed(&traj.states[n], Some(traj.x0()), &state, policy)?;
                if q <= 0.0 {
                    return Ok(n);
                }
                state = next;
            }
            Ok(cap)
        }
    }
}

/// Unfolds `image` for `n_steps`, writing a per-step CSV and one PGM per state.
///
/// Columns: `step`, then `psnr` and `ssim` when ground truth is given, then `q_continue`
/// when a policy is given.
pub fn export_trajectory(
    image: &Image,
    restorer: &NetworkParams<f32>,
    n_steps: usize,
    ground_truth: Option<&Image>,
    policy: Option<&NetworkParams<f32>>,
    out_csv: &Path,
    out_images_dir: &Path,
) -> Result<Trajectory> {
    let traj = unfold_trajectory(image, restorer, n_steps, ground_truth)?;
    let mut q_values = Vec::new();
    if let Some(p) = policy {
        let mut state = PolicyState::for_params(p)?;
        for s in &traj.states {
            let (q, next) = policy_q_step_observed(s, Some(image), &state, p)?;
            q_values.push(q);
            state = next;
        }
    }
    let mut header = vec!["step"];
    if ground_truth.is_some() {
        header.extend(["psnr", "ssim"]);
    }
    if policy.is_some() {
        header.push("q_continue");
    }
    let mut csv = header.join(",") + "\n";
    fs::create_dir_all(out_images_dir).map_err(|e| DurrError::io(out_images_dir, e))?;
    for (n, state) in traj.states.iter().enumerate() {
        let out = state.clamped();
        let mut fields = vec![n.to_string()];
        if let (Some(gt), Some(p)) = (ground_truth, &traj.psnr) {
            fields.push(sig6(p[n]));
            fields.push(sig6(ssim(&out, gt)?));
        }
        if let Some(q) = q_values.get(n) {
            fields.push(sig6(*q));
        }
        csv += &(fields.join(",") + "\n");
        out.write_pgm(out_images_dir.join(format!("step_{n:03}.pgm")))?;
    }
    fs::write(out_csv, csv).map_err(|e| DurrError::io(out_csv, e))?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::synthetic_corpus;
    use crate::policy::{build_policy_unit, PolicyArch};
    use crate::restorer::{init_params, RestorerArch};

    fn zero_residual() -> NetworkParams<f32> {
        let mut p = init_params(RestorerArch::new(0.25).unwrap().descriptor(), 0);
        p.get_mut("conv9.w").unwrap().data_mut().fill(0.0);
        p.get_mut("conv9.b").unwrap().data_mut().fill(0.0);
        p
    }

    fn opts() -> EvalOptions {
        EvalOptions::new(DegradationKind::Gaussian, vec![15.0, 35.0], 4, 3)
    }

    #[test]
    fn policy_spec_parse() {
        for s in ["dqn", "decorr", "fixed:7", "oracle"] {
            assert_eq!(s.parse::<PolicySpec>().unwrap().to_string(), s);
        }
        for s in ["", "fixed", "fixed:x", "greedy"] {
            assert!(s.parse::<PolicySpec>().is_err());
        }
    }

    #[test]
    fn zero_residual_peak_is_input() {
        let corpus = synthetic_corpus(3, 20, 18, 1);
        let o = opts();
        let report = eval_peak_psnr(&corpus, &zero_residual(), &o).unwrap();
        for (li, &level) in o.levels.iter().enumerate() {
            let row = report.row(level, "peak").unwrap();
            assert_eq!(row.mean_stop, 0.0);
            assert_eq!(row.count, 3);
            let noisy: f64 = (0..3)
                .map(|i| psnr(&degrade(&corpus[i], o.kind, level, o.image_seed(level, i)).unwrap(), &corpus[i]).unwrap())
                .sum::<f64>()
                / 3.0;
            assert!((row.mean_psnr - noisy).abs() < 1e-9, "level {li}");
        }
        assert!(matches!(eval_peak_psnr(&[], &zero_residual(), &o), Err(DurrError::EmptyCorpus)));
    }

    #[test]
    fn fixed_zero_matches_input_and_oracle_dominates() {
        let corpus = synthetic_corpus(3, 16, 16, 2);
        let restorer = init_params(RestorerArch::new(0.25).unwrap().descriptor(), 4);
        let policy = build_policy_unit(&PolicyArch::new(0.25).unwrap(), 4);
        let specs = [PolicySpec::Fixed(0), PolicySpec::Fixed(2), PolicySpec::Decorrelation, PolicySpec::Dqn, PolicySpec::Oracle];
        let o = opts();
        let report = eval_policies(&corpus, &restorer, Some(&policy), &specs, &o).unwrap();
        assert_eq!(report.rows.len(), 10);
        for &level in &o.levels {
            let fixed0 = report.row(level, "fixed:0").unwrap();
            let noisy: Vec<Image> = (0..3).map(|i| degrade(&corpus[i], o.kind, level, o.image_seed(level, i)).unwrap()).collect();
            let want = (0..3).map(|i| psnr(&noisy[i], &corpus[i]).unwrap()).sum::<f64>() / 3.0;
            assert!((fixed0.mean_psnr - want).abs() < 1e-9);
            let oracle = report.row(level, "oracle").unwrap().mean_psnr;
            for r in report.rows.iter().filter(|r| r.level == level) {
                assert!(oracle >= r.mean_psnr - 1e-12, "{r:?}");
            }
        }
        let single = eval_durr(&corpus, &restorer, Some(&policy), PolicySpec::Fixed(2), &o).unwrap();
        assert_eq!(single.row(35.0, "fixed:2"), report.row(35.0, "fixed:2"));
        assert!(eval_durr(&corpus, &restorer, None, PolicySpec::Dqn, &o).is_err());
    }

    #[test]
    fn threads_do_not_change_results_and_detail_recomputes_summary() {
        let corpus = synthetic_corpus(5, 16, 16, 3);
        let restorer = init_params(RestorerArch::new(0.25).unwrap().descriptor(), 5);
        let specs = [PolicySpec::Oracle, PolicySpec::Fixed(3)];
        let one = eval_policies(&corpus, &restorer, None, &specs, &opts()).unwrap();
        let many = eval_policies(&corpus, &restorer, None, &specs, &EvalOptions { threads: 3, ..opts() }).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.to_csv(), many.to_csv());
        let parsed: Vec<DetailRow> = one
            .detail_csv()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                DetailRow {
                    level: f[0].parse().unwrap(),
                    policy: f[1].into(),
                    image: f[2].parse().unwrap(),
                    psnr: f[3].parse().unwrap(),
                    ssim: f[4].parse().unwrap(),
                    stop: f[5].parse().unwrap(),
                }
            })
            .collect();
        let again = EvalReport::from_detail(parsed);
        for (a, b) in again.rows.iter().zip(&one.rows) {
            assert!((a.mean_psnr - b.mean_psnr).abs() < 1e-9 && (a.mean_ssim - b.mean_ssim).abs() < 1e-9);
        }
    }

    #[test]
    fn export_writes_one_row_and_image_per_state() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic_corpus(1, 17, 15, 4).remove(0);
        let noisy = degrade(&img, DegradationKind::Gaussian, 25.0, 1).unwrap();
        let csv = dir.path().join("t.csv");
        export_trajectory(&noisy, &zero_residual(), 0, None, None, &csv, &dir.path().join("a")).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), "step\n0\n");
        assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 1);

        let policy = build_policy_unit(&PolicyArch::new(0.25).unwrap(), 1);
        export_trajectory(&noisy, &zero_residual(), 3, Some(&img), Some(&policy), &csv, &dir.path().join("b")).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,psnr,ssim,q_continue");
        assert_eq!(lines.len(), 5);
        let psnr_col: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert!(psnr_col.iter().all(|p| *p == psnr_col[0]));
        assert_eq!(fs::read_dir(dir.path().join("b")).unwrap().count(), 4);
        assert!(export_trajectory(&noisy, &zero_residual(), 1, None, None, Path::new("/nonexistent/x.csv"), &dir.path().join("c")).is_err());
    }
}
