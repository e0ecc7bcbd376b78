//! Deep Q-learning of the stopping policy against a frozen restorer.
//!
//! The restorer never changes during this stage, so every training episode is a walk along
//! a precomputed trajectory. The pool stores those trajectories and their per-step losses;
//! transitions refer to pool states by index together with the recurrent state. Episodes may
//! differ in image size; batches are formed per size.

use std::collections::BTreeMap;
use std::io::Write;

use durr_tensor::{NetworkParams, OptMethod, OptState, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::replay::{epsilon_greedy, reward, ReplayBuffer, Snapshot, Transition};
use super::TrainConfig;
use crate::checkpoint::{config_hash, params_fingerprint, Checkpoint, CheckpointMeta, UnitKind};
use crate::csv::{sig6, write_row};
use crate::degradation::{mean_sq_error, PatchStream};
use crate::error::{DurrError, Result};
use crate::image::Image;
use crate::policy::{argmax_earliest, build_policy_unit, q_batch, q_on_tape, Action, PolicyArch};
use crate::restorer::unfold_tensor;

/// Frozen-restorer trajectories with their losses against ground truth.
#[derive(Debug, Clone, Default)]
pub struct EpisodePool {
    /// Per episode, states `X_0..X_max` as `(1, 1, h, w)` tensors.
    states: Vec<Vec<Tensor<f32>>>,
    /// Per episode, MSE of each clamped state against ground truth.
    losses: Vec<Vec<f64>>,
    levels: Vec<f64>,
}

impl EpisodePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, states: &[Image], ground_truth: &Image, level: f64) -> Result<()> {
        if states.len() < 2 {
            return Err(DurrError::InvalidArgument("episodes need at least one step".into()));
        }
        if let Some(first) = self.states.first() {
            if first.len() != states.len() {
                return Err(DurrError::InvalidArgument("all episodes must share their length".into()));
            }
        }
        let losses = states
            .iter()
            .map(|s| mean_sq_error(&s.clamped(), ground_truth))
            .collect::<Result<Vec<_>>>()?;
        self.states.push(states.iter().map(Image::to_tensor).collect());
        self.losses.push(losses);
        self.levels.push(level);
        Ok(())
    }

    /// Degrades `count` random crops and unfolds each `max_steps` times with the restorer.
    #[allow(clippy::too_many_arguments)]
    pub fn from_restorer(
        corpus: &[Image],
        restorer: &NetworkParams<f32>,
        kind: crate::degradation::DegradationKind,
        levels: &[f64],
        count: usize,
        patch: usize,
        max_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if !patch.is_multiple_of(2) {
            return Err(DurrError::InvalidArgument("episode patches must have even size".into()));
        }
        let mut stream = PatchStream::new(corpus, patch, 1, levels, kind, seed)?;
        let mut pool = Self::new();
        let chunk = 32;
        let mut done = 0;
        while done < count {
            let n = chunk.min(count - done);
            let mut items = Vec::with_capacity(n);
            for _ in 0..n {
                items.push(stream.next_item()?);
            }
            let x0 = Tensor::stack_batch(&items.iter().map(|(_, d, _, _)| d.to_tensor()).collect::<Vec<_>>())?;
            let traj = unfold_tensor(&x0, restorer, max_steps)?;
            for (i, (clean, _, level, _)) in items.iter().enumerate() {
                let states = traj.iter().map(|t| Image::from_tensor(t, i)).collect::<Result<Vec<_>>>()?;
                pool.push(&states, clean, *level)?;
            }
            done += n;
        }
        Ok(pool)
    }

    /// Moves every episode of `other` into this pool.
    pub fn append(&mut self, other: Self) -> Result<()> {
        if let (Some(a), Some(b)) = (self.states.first(), other.states.first()) {
            if a.len() != b.len() {
                return Err(DurrError::InvalidArgument("all episodes must share their length".into()));
            }
        }
        self.states.extend(other.states);
        self.losses.extend(other.losses);
        self.levels.extend(other.levels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    /// Image `(height, width)` of an episode.
    pub fn size(&self, episode: usize) -> (usize, usize) {
        let shape = self.states[episode][0].shape();
        (shape[2], shape[3])
    }

    /// Groups items by the image size of the episode `episode_of` names, in size order.
    fn by_size<T>(&self, items: impl IntoIterator<Item = T>, episode_of: impl Fn(&T) -> usize) -> Vec<Vec<T>> {
        let mut groups: BTreeMap<(usize, usize), Vec<T>> = BTreeMap::new();
        for item in items {
            groups.entry(self.size(episode_of(&item))).or_default().push(item);
        }
        groups.into_values().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Last reachable step index.
    pub fn horizon(&self) -> usize {
        self.states.first().map_or(0, |s| s.len() - 1)
    }

    pub fn level(&self, episode: usize) -> f64 {
        self.levels[episode]
    }

    pub fn losses(&self, episode: usize) -> &[f64] {
        &self.losses[episode]
    }

    pub fn state(&self, episode: usize, step: usize) -> Image {
        Image::from_tensor(&self.states[episode][step], 0).expect("pool stores single images")
    }

    /// Policy input at `(episode, step)`, with the observation channel when `observed`.
    fn input(&self, episode: usize, step: usize, observed: bool) -> Tensor<f32> {
        let x = &self.states[episode][step];
        if !observed {
            return x.clone();
        }
        let mut shape = x.shape().to_vec();
        shape[1] = 2;
        let mut data = x.data().to_vec();
        data.extend_from_slice(self.states[episode][0].data());
        Tensor::from_vec(shape, data).expect("matching sizes")
    }

    fn batch_input(&self, at: &[(usize, usize)], observed: bool) -> Result<Tensor<f32>> {
        let items: Vec<_> = at.iter().map(|&(e, n)| self.input(e, n, observed)).collect();
        Ok(Tensor::stack_batch(&items)?)
    }
}

fn observed(params: &NetworkParams<f32>) -> bool {
    params.arch().layer("conv1").map(|l| l.in_ch) == Some(2)
}

fn stack_rows(rows: &[&[f32]]) -> Tensor<f32> {
    let width = rows[0].len();
    Tensor::from_vec(vec![rows.len(), width], rows.concat()).expect("equal row widths")
}

/// Greedy stopping step of every pool episode, evaluated in lockstep batches.
pub fn greedy_stops(pool: &EpisodePool, policy: &NetworkParams<f32>, max_steps: usize) -> Result<Vec<usize>> {
    if max_steps > pool.horizon() {
        return Err(DurrError::InvalidArgument(format!(
            "max_steps {max_steps} exceeds the pool horizon {}",
            pool.horizon()
        )));
    }
    let hidden = policy.arch().layer("lstm").map(|l| l.out_ch).unwrap_or(0);
    let obs = observed(policy);
    let mut stops = vec![max_steps; pool.len()];
    let mut h = vec![vec![0f32; hidden]; pool.len()];
    let mut c = vec![vec![0f32; hidden]; pool.len()];
    let mut active: Vec<usize> = (0..pool.len()).collect();
    for step in 0..max_steps {
        let mut still = Vec::new();
        for chunk in pool.by_size(active, |&e| e).iter().flat_map(|g| g.chunks(64)) {
            let at: Vec<_> = chunk.iter().map(|&e| (e, step)).collect();
            let x = pool.batch_input(&at, obs)?;
            let hs: Vec<&[f32]> = chunk.iter().map(|&e| h[e].as_slice()).collect();
            let cs: Vec<&[f32]> = chunk.iter().map(|&e| c[e].as_slice()).collect();
            let (q, h2, c2) = q_batch(&x, &stack_rows(&hs), &stack_rows(&cs), policy)?;
            for (j, &e) in chunk.iter().enumerate() {
                if q[j] > 0.0 {
                    h[e].copy_from_slice(&h2.data()[j * hidden..(j + 1) * hidden]);
                    c[e].copy_from_slice(&c2.data()[j * hidden..(j + 1) * hidden]);
                    still.push(e);
                } else {
                    stops[e] = step;
                }
            }
        }
        still.sort_unstable();
        active = still;
        if active.is_empty() {
            break;
        }
    }
    Ok(stops)
}

/// Greedy-policy quality on a pool, relative to the PSNR-peak oracle within `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolScore {
    pub mean_return: f64,
    pub oracle_return: f64,
    pub mean_step_gap: f64,
    pub mean_psnr_gap: f64,
    pub mean_stop: f64,
}

pub fn score_stops(pool: &EpisodePool, stops: &[usize], max_steps: usize, lambda: f64) -> PoolScore {
    let n = pool.len() as f64;
    let mut s = PoolScore {
        mean_return: 0.0,
        oracle_return: 0.0,
        mean_step_gap: 0.0,
        mean_psnr_gap: 0.0,
        mean_stop: 0.0,
    };
    for (e, &stop) in stops.iter().enumerate() {
        let losses = &pool.losses(e)[..=max_steps];
        let psnr: Vec<f64> = losses.iter().map(|&l| -10.0 * l.log10()).collect();
        let oracle = argmax_earliest(&psnr);
        s.mean_return += lambda * (losses[0] - losses[stop]) / n;
        s.oracle_return += lambda * (losses[0] - losses[oracle]) / n;
        s.mean_step_gap += stop.abs_diff(oracle) as f64 / n;
        s.mean_psnr_gap += (psnr[oracle] - psnr[stop]) / n;
        s.mean_stop += stop as f64 / n;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLogRow {
    pub env_step: usize,
    pub updates: usize,
    pub epsilon: f64,
    pub td_loss: f64,
    pub val: PoolScore,
}

#[derive(Debug, Clone)]
pub struct PolicyRun {
    /// Policy with the best validation return seen during training.
    pub checkpoint: Checkpoint,
    pub log: Vec<PolicyLogRow>,
}

struct Learner {
    online: NetworkParams<f32>,
    target: NetworkParams<f32>,
    opt: OptState<f32>,
    updates: usize,
}

impl Learner {
    /// One Bellman regression step on a minibatch; stop transitions carry no loss. Each image
    /// size contributes its share of the mean squared TD error.
    fn update(&mut self, pool: &EpisodePool, batch: &[&Transition], cfg: &TrainConfig) -> Result<Option<f64>> {
        let cont: Vec<&Transition> = batch.iter().copied().filter(|t| t.action == Action::Continue).collect();
        if cont.is_empty() {
            return Ok(None);
        }
        let obs = observed(&self.online);
        let at = |s: &Snapshot| (s.episode, s.step);
        let mut tape = Tape::new();
        let p = tape.params(&self.online);
        let mut total = None;
        for group in pool.by_size(cont.iter().copied(), |t| t.state.episode) {
            let x = pool.batch_input(&group.iter().map(|t| at(&t.state)).collect::<Vec<_>>(), obs)?;
            let h = stack_rows(&group.iter().map(|t| t.state.h.as_slice()).collect::<Vec<_>>());
            let c = stack_rows(&group.iter().map(|t| t.state.c.as_slice()).collect::<Vec<_>>());
            let xn = pool.batch_input(&group.iter().map(|t| at(&t.next)).collect::<Vec<_>>(), obs)?;
            let hn = stack_rows(&group.iter().map(|t| t.next.h.as_slice()).collect::<Vec<_>>());
            let cn = stack_rows(&group.iter().map(|t| t.next.c.as_slice()).collect::<Vec<_>>());
            let (q_next, _, _) = q_batch(&xn, &hn, &cn, &self.target)?;
            let y: Vec<f32> = group
                .iter()
                .zip(&q_next)
                .map(|(t, &qn)| {
                    let bootstrap = if t.terminal { 0.0 } else { cfg.gamma * (qn as f64).max(0.0) };
                    (t.reward + bootstrap) as f32
                })
                .collect();

            let (xv, hv, cv) = (tape.input(x), tape.input(h), tape.input(c));
            let (q, _, _) = q_on_tape(&mut tape, &p, self.online.arch(), xv, hv, cv)?;
            let yv = tape.input(Tensor::from_vec(vec![y.len(), 1], y)?);
            let mse = tape.mse(q, yv)?;
            let part = tape.scale(mse, group.len() as f64 / cont.len() as f64)?;
            total = Some(match total {
                None => part,
                Some(sum) => tape.add(sum, part)?,
            });
        }
        let loss = total.expect("at least one size group");
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "td_loss" }.into());
        }
        let grads = tape.backward(loss)?;
        self.opt.step(&mut self.online, &grads, cfg.policy_lr)?;
        self.updates += 1;
        if self.updates.is_multiple_of(cfg.target_sync) {
            self.target = self.online.clone();
        }
        Ok(Some(value))
    }
}

fn policy_checkpoint(params: &NetworkParams<f32>, opt: &OptState<f32>, cfg: &TrainConfig, iteration: usize, notes: String) -> Checkpoint {
    let levels: Vec<String> = cfg.policy_levels.iter().map(|l| l.to_string()).collect();
    Checkpoint::new(
        UnitKind::Policy,
        params.clone(),
        Some(opt.clone()),
        CheckpointMeta {
            seed: cfg.seed,
            iteration: iteration as u64,
            schedule: levels.join(","),
            config_hash: config_hash(&cfg.fingerprint()),
            notes,
        },
    )
}

/// DQN on precomputed episodes. `val` selects the returned checkpoint and feeds the log.
pub fn train_policy_on_pool(
    train: &EpisodePool,
    val: &EpisodePool,
    cfg: &TrainConfig,
    notes: &str,
    mut log: Option<&mut dyn Write>,
) -> Result<PolicyRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DurrError::EmptyCorpus);
    }
    let max_steps = cfg.max_steps;
    if max_steps > train.horizon() || max_steps > val.horizon() {
        return Err(DurrError::InvalidArgument("episode pool is shorter than max_steps".into()));
    }
    let arch = PolicyArch::new(cfg.policy_width_scale)?.with_observation(cfg.with_observation);
    let online = build_policy_unit(&arch, cfg.seed ^ 0x9011c7);
    let hidden = arch.hidden;
    let obs = cfg.with_observation;
    let mut learner = Learner {
        target: online.clone(),
        online,
        opt: OptState::new(OptMethod::rmsprop()),
        updates: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0_5eed);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;

    if let Some(out) = log.as_deref_mut() {
        let header = ["env_step", "updates", "epsilon", "td_loss", "val_return", "val_oracle_return", "val_step_gap", "val_psnr_gap", "val_mean_stop"];
        write_row(out, &header.map(String::from), "policy log")?;
    }
    let eval_every = cfg.eval_every.max(1) * 10;
    let mut rows = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    let mut episode = rng.gen_range(0..train.len());
    let mut step = 0usize;
    let mut h = vec![0f32; hidden];
    let mut c = vec![0f32; hidden];

    for env_step in 1..=cfg.policy_steps {
        let epsilon = cfg.epsilon_at(env_step - 1);
        let x = train.input(episode, step, obs);
        let (q, h2, c2) = q_batch(&x, &stack_rows(&[&h]), &stack_rows(&[&c]), &learner.online)?;
        let action = if step >= max_steps {
            Action::Stop
        } else {
            epsilon_greedy(q[0] as f64, epsilon, &mut rng)
        };
        let state = Snapshot {
            episode,
            step,
            h: h.clone(),
            c: c.clone(),
        };
        let losses = train.losses(episode);
        let end_episode = match action {
            Action::Continue => {
                let r = reward(losses[step], losses[step + 1], action, cfg.lambda)?;
                let next = Snapshot {
                    episode,
                    step: step + 1,
                    h: h2.data().to_vec(),
                    c: c2.data().to_vec(),
                };
                let terminal = step + 1 == max_steps;
                replay.push(Transition {
                    state,
                    action,
                    reward: r,
                    next,
                    terminal,
                });
                step += 1;
                h.copy_from_slice(h2.data());
                c.copy_from_slice(c2.data());
                terminal
            }
            Action::Stop => {
                replay.push(Transition {
                    next: state.clone(),
                    state,
                    action,
                    reward: 0.0,
                    terminal: true,
                });
                true
            }
        };
        if end_episode {
            episode = rng.gen_range(0..train.len());
            step = 0;
            h.fill(0.0);
            c.fill(0.0);
        }

        if replay.len() >= cfg.warmup {
            let batch = replay.sample(cfg.policy_batch, &mut rng)?;
            if let Some(l) = learner.update(train, &batch, cfg)? {
                loss_sum += l;
                loss_count += 1;
            }
        }

        if env_step % eval_every == 0 || env_step == cfg.policy_steps {
            let stops = greedy_stops(val, &learner.online, max_steps)?;
            let score = score_stops(val, &stops, max_steps, cfg.lambda);
            let row = PolicyLogRow {
                env_step,
                updates: learner.updates,
                epsilon,
                td_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
                val: score,
            };
            if let Some(out) = log.as_deref_mut() {
                let v = &row.val;
                let fields = [
                    row.env_step.to_string(),
                    row.updates.to_string(),
                    sig6(row.epsilon),
                    sig6(row.td_loss),
                    sig6(v.mean_return),
                    sig6(v.oracle_return),
                    sig6(v.mean_step_gap),
                    sig6(v.mean_psnr_gap),
                    sig6(v.mean_stop),
                ];
                write_row(out, &fields, "policy log")?;
            }
            // only greedy policies trained past the warmup compete for the returned checkpoint
            if learner.updates > 0 && best.as_ref().is_none_or(|(b, _)| score.mean_return > *b) {
                best = Some((score.mean_return, policy_checkpoint(&learner.online, &learner.opt, cfg, env_step, notes.to_string())));
            }
            rows.push(row);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    let checkpoint = match best {
        Some((_, ck)) => ck,
        None => policy_checkpoint(&learner.online, &learner.opt, cfg, cfg.policy_steps, notes.to_string()),
    };
    Ok(PolicyRun { checkpoint, log: rows })
}

/// Builds training and validation pools from the frozen restorer and runs DQN.
pub fn train_policy_dqn(corpus: &[Image], restorer: &Checkpoint, cfg: &TrainConfig, log: Option<&mut dyn Write>) -> Result<PolicyRun> {
    cfg.validate()?;
    if restorer.kind != UnitKind::Restorer {
        return Err(crate::checkpoint::CheckpointError::ArchMismatch(format!("expected a restorer checkpoint, got {}", restorer.kind)).into());
    }
    if corpus.is_empty() {
        return Err(DurrError::EmptyCorpus);
    }
    let (train_imgs, val_imgs) = super::split_validation(corpus);
    let sizes = cfg.episode_patches();
    // episodes are split evenly over the crop sizes
    let build = |imgs: &[Image], count: usize, seed: u64| -> Result<EpisodePool> {
        let mut pool = EpisodePool::new();
        for (i, &patch) in sizes.iter().enumerate() {
            let n = count * (i + 1) / sizes.len() - count * i / sizes.len();
            if n > 0 {
                let part = EpisodePool::from_restorer(imgs, &restorer.params, cfg.kind, &cfg.policy_levels, n, patch, cfg.max_steps, seed ^ ((patch as u64) << 20))?;
                pool.append(part)?;
            }
        }
        Ok(pool)
    };
    let train = build(&train_imgs, cfg.episode_pool, cfg.seed ^ 0xe915)?;
    let val = build(&val_imgs, cfg.val_episodes, cfg.seed ^ 0x7a1e)?;
    let notes = format!("task={} restorer={:08x}", cfg.kind, params_fingerprint(&restorer.params));
    train_policy_on_pool(&train, &val, cfg, &notes, log)
}
