//! Stopping rules: the recurrent Q-network, the decorrelation heuristic and the PSNR oracle.

use durr_tensor::{ArchDescriptor, ConvSpec, Float, LayerSpec, NetworkParams, ParamVars, Tape, Tensor, Var};

use crate::error::{DurrError, Result};
use crate::image::Image;
use crate::restorer::{init_params, pad_even, scaled_width, step_tensor, Trajectory};

pub const POLICY_FAMILY: &str = "policy";
pub const POLICY_FAMILY_OBSERVED: &str = "policy+observation";

/// Default step caps.
pub const MAX_STEPS_DENOISE: usize = 20;
pub const MAX_STEPS_DEBLOCK: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyArch {
    /// Multiplies the conv widths 16/32/64.
    pub width_scale: f64,
    /// LSTM hidden units; independent of `width_scale`.
    pub hidden: usize,
    /// Feed the degraded observation as a second input channel.
    pub with_observation: bool,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            width_scale: 1.0,
            hidden: 32,
            with_observation: false,
        }
    }
}

/// `(conv, out width, stride, residual link)` per conv layer; the link marks where a
/// block's first output is tapped (`Some(true)`) or added back (`Some(false)`).
const CONV_LAYOUT: [(&str, usize, usize, usize, Option<bool>); 10] = [
    ("conv1", 16, 5, 1, None),
    ("conv2", 16, 3, 1, Some(true)),
    ("conv3", 16, 3, 1, None),
    ("conv4", 16, 3, 1, Some(false)),
    ("conv5", 32, 3, 2, Some(true)),
    ("conv6", 32, 3, 1, None),
    ("conv7", 32, 3, 1, Some(false)),
    ("conv8", 64, 3, 2, Some(true)),
    ("conv9", 64, 3, 1, None),
    ("conv10", 64, 3, 1, Some(false)),
];

impl PolicyArch {
    pub fn new(width_scale: f64) -> Result<Self> {
        if !(width_scale > 0.0 && width_scale <= 1.0) {
            return Err(DurrError::InvalidArgument(format!("width_scale must be in (0, 1], got {width_scale}")));
        }
        Ok(Self {
            width_scale,
            ..Self::default()
        })
    }

    pub fn with_observation(mut self, on: bool) -> Self {
        self.with_observation = on;
        self
    }

    pub fn in_channels(&self) -> usize {
        if self.with_observation {
            2
        } else {
            1
        }
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        let mut layers = Vec::new();
        let mut cin = self.in_channels();
        for (name, width, k, stride, _) in CONV_LAYOUT {
            let out = scaled_width(width, self.width_scale);
            layers.push(LayerSpec::conv(name, cin, out, k, stride, 1));
            cin = out;
        }
        layers.push(LayerSpec::lstm("lstm", cin, self.hidden));
        layers.push(LayerSpec::dense("head", self.hidden, 1));
        ArchDescriptor {
            family: if self.with_observation { POLICY_FAMILY_OBSERVED } else { POLICY_FAMILY }.into(),
            layers,
        }
    }

    pub fn from_descriptor(arch: &ArchDescriptor) -> Result<Self> {
        let with_observation = match arch.family.as_str() {
            POLICY_FAMILY => false,
            POLICY_FAMILY_OBSERVED => true,
            other => return Err(DurrError::InvalidArgument(format!("expected a policy, got {other}"))),
        };
        let hidden = arch.layer("lstm").map(|l| l.out_ch).unwrap_or(0);
        for (layer, base) in [("conv1", 16.0), ("conv10", 64.0)] {
            let w = arch.layer(layer).map(|l| l.out_ch).unwrap_or(0) as f64;
            let candidate = Self {
                width_scale: w / base,
                hidden,
                with_observation,
            };
            if candidate.descriptor() == *arch {
                return Ok(candidate);
            }
        }
        Err(DurrError::InvalidArgument("descriptor does not match the policy layout".into()))
    }
}

pub fn build_policy_unit(arch: &PolicyArch, seed: u64) -> NetworkParams<f32> {
    init_params(arch.descriptor(), seed)
}

fn hidden_of(params: &NetworkParams<f32>) -> Result<usize> {
    params
        .arch()
        .layer("lstm")
        .map(|l| l.out_ch)
        .ok_or_else(|| DurrError::InvalidArgument("parameters are not a policy unit".into()))
}

/// Recurrent state carried across the steps of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    /// `(1, hidden)`
    pub h: Tensor<f32>,
    /// `(1, hidden)`
    pub c: Tensor<f32>,
    pub step_index: usize,
}

impl PolicyState {
    pub fn new(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![1, hidden]),
            c: Tensor::zeros(vec![1, hidden]),
            step_index: 0,
        }
    }

    pub fn for_params(params: &NetworkParams<f32>) -> Result<Self> {
        Ok(Self::new(hidden_of(params)?))
    }
}

/// Q(continue) for a batch on the tape. `x` is `(b, c, h, w)` with `c` the arch's input
/// channels; `h`, `c` are `(b, hidden)`. Returns `(q (b, 1), h', c')`.
pub fn q_on_tape<T: Float>(tape: &mut Tape<T>, p: &ParamVars, arch: &ArchDescriptor, x: Var, h: Var, c: Var) -> Result<(Var, Var, Var)> {
    let mut a = x;
    let mut link = None;
    for (name, _, k, stride, role) in CONV_LAYOUT {
        let spec = ConvSpec::new(stride, 1, (k - 1) / 2);
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        let z = tape.conv2d(a, w, b, spec)?;
        a = match role {
            Some(false) => {
                let tap = link.take().expect("layout pairs each add with a tap");
                let sum = tape.add(z, tap)?;
                tape.relu(sum)?
            }
            _ => tape.relu(z)?,
        };
        if role == Some(true) {
            link = Some(a);
        }
    }
    if arch.layer("conv1").map(|l| l.in_ch) != Some(tape.value(x).shape()[1]) {
        return Err(DurrError::InvalidArgument("policy input channels do not match its architecture".into()));
    }
    let pooled = tape.pool_gap(a)?;
    let (h2, c2) = tape.lstm_step(pooled, h, c, p, "lstm")?;
    let q = tape.dense(h2, p.get("head.w")?, p.get("head.b")?)?;
    Ok((q, h2, c2))
}

/// Stacks `[x, x0]` channels when the arch expects the observation.
pub fn policy_input(x: &Image, x0: Option<&Image>, arch: &ArchDescriptor) -> Result<Tensor<f32>> {
    let observed = arch.layer("conv1").map(|l| l.in_ch) == Some(2);
    match (observed, x0) {
        (false, _) => Ok(x.to_tensor()),
        (true, Some(x0)) => {
            x.ensure_same_dims(x0)?;
            let mut data = x.pixels().to_vec();
            data.extend_from_slice(x0.pixels());
            Ok(Tensor::from_vec(vec![1, 2, x.height(), x.width()], data)?)
        }
        (true, None) => Err(DurrError::InvalidArgument("this policy needs the degraded observation".into())),
    }
}

/// Batched, gradient-free Q evaluation: `x` is `(b, c, h, w)`, states `(b, hidden)`.
pub fn q_batch(
    x: &Tensor<f32>,
    h: &Tensor<f32>,
    c: &Tensor<f32>,
    params: &NetworkParams<f32>,
) -> Result<(Vec<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let p = tape.params(params);
    let (xv, hv, cv) = (tape.input(x.clone()), tape.input(h.clone()), tape.input(c.clone()));
    let (q, h2, c2) = q_on_tape(&mut tape, &p, params.arch(), xv, hv, cv)?;
    Ok((tape.value(q).data().to_vec(), tape.value(h2).clone(), tape.value(c2).clone()))
}

/// Q(continue) at the current estimate and the advanced recurrent state.
pub fn policy_q_step(x_current: &Image, state: &PolicyState, params: &NetworkParams<f32>) -> Result<(f64, PolicyState)> {
    policy_q_step_observed(x_current, None, state, params)
}

/// As [`policy_q_step`], also passing the degraded observation for policies built with it.
pub fn policy_q_step_observed(
    x_current: &Image,
    x0: Option<&Image>,
    state: &PolicyState,
    params: &NetworkParams<f32>,
) -> Result<(f64, PolicyState)> {
    let hidden = hidden_of(params)?;
    if state.h.shape() != [1, hidden] || state.c.shape() != [1, hidden] {
        return Err(DurrError::InvalidArgument(format!(
            "policy state has width {:?}, network expects {hidden}",
            state.h.shape()
        )));
    }
    let input = policy_input(x_current, x0, params.arch())?;
    let (q, h, c) = q_batch(&input, &state.h, &state.c, params)?;
    Ok((
        q[0] as f64,
        PolicyState {
            h,
            c,
            step_index: state.step_index + 1,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    Stop,
}

/// One greedy decision of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopDecision {
    pub action: Action,
    pub q_continue: f64,
    pub step: usize,
}

/// Outcome of a policy-controlled restoration.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Final state, clamped to `[0, 1]`.
    pub restored: Image,
    pub trajectory: Trajectory,
    /// Number of restorer steps taken.
    pub steps: usize,
    pub decisions: Vec<StopDecision>,
}

/// Greedy episode driver shared by [`policy_decide`] and tests: at step `n` the policy
/// scores state `n`; the episode continues while `q > 0` and `n < max_steps`.
/// `advance` is called exactly once per continue decision.
pub fn run_greedy<S>(
    x0: S,
    max_steps: usize,
    mut score: impl FnMut(&S, usize) -> Result<f64>,
    mut advance: impl FnMut(&S) -> Result<S>,
) -> Result<(Vec<S>, Vec<StopDecision>)> {
    let mut states = vec![x0];
    let mut decisions = Vec::new();
    loop {
        let step = states.len() - 1;
        let q = score(states.last().expect("non-empty"), step)?;
        if q > 0.0 && step < max_steps {
            decisions.push(StopDecision {
                action: Action::Continue,
                q_continue: q,
                step,
            });
            let next = advance(states.last().expect("non-empty"))?;
            states.push(next);
        } else {
            decisions.push(StopDecision {
                action: Action::Stop,
                q_continue: q,
                step,
            });
            return Ok((states, decisions));
        }
    }
}

/// Restores `x0` with the restorer, stopping when the policy's Q(continue) is not positive.
pub fn policy_decide(
    x0: &Image,
    restorer: &NetworkParams<f32>,
    policy: &NetworkParams<f32>,
    max_steps: usize,
    ground_truth: Option<&Image>,
) -> Result<Episode> {
    if max_steps == 0 {
        return Err(DurrError::InvalidArgument("max_steps must be at least 1".into()));
    }
    let (w, h) = x0.dims();
    let x0_padded = pad_even(x0).to_tensor();
    let mut state = PolicyState::for_params(policy)?;
    let (padded, decisions) = run_greedy(
        x0_padded.clone(),
        max_steps,
        |x, _| {
            let current = Image::from_tensor(x, 0)?.crop(0, 0, w, h)?;
            let (q, next) = policy_q_step_observed(&current, Some(x0), &state, policy)?;
            state = next;
            Ok(q)
        },
        |x| step_tensor(x, &x0_padded, restorer),
    )?;
    let states = padded
        .iter()
        .map(|t| Image::from_tensor(t, 0)?.crop(0, 0, w, h))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = Trajectory::from_states(states, ground_truth)?;
    let steps = trajectory.steps();
    Ok(Episode {
        restored: trajectory.states[steps].clamped(),
        trajectory,
        steps,
        decisions,
    })
}

/// Pearson correlation over pixels; zero when either side has no variance.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Step `n >= 1` whose removed component `X_0 - X_n` is least correlated with `X_n`.
pub fn decorrelation_stop_index(traj: &Trajectory) -> Result<usize> {
    if traj.states.len() < 2 {
        return Err(DurrError::InvalidArgument("decorrelation rule needs at least one step".into()));
    }
    let x0 = traj.x0().pixels();
    let mut best = (1, f64::INFINITY);
    for (n, xn) in traj.states.iter().enumerate().skip(1) {
        let removed: Vec<f32> = x0.iter().zip(xn.pixels()).map(|(a, b)| a - b).collect();
        let c = pearson(&removed, xn.pixels()).abs();
        if c < best.1 {
            best = (n, c);
        }
    }
    Ok(best.0)
}

/// Earliest step with the highest PSNR against ground truth.
pub fn oracle_peak_index(traj: &Trajectory) -> Result<usize> {
    let psnr = traj.psnr.as_ref().ok_or(DurrError::MissingGroundTruth)?;
    Ok(argmax_earliest(psnr))
}

pub(crate) fn argmax_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restorer::{build_restoration_unit, RestorerArch};
    use std::cell::Cell;

    fn textured(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| 0.5 + 0.3 * ((x as f32 * 0.9).sin() * (y as f32 * 0.4).cos()))
    }

    fn with_head(mut p: NetworkParams<f32>, weight: f32, bias: f32) -> NetworkParams<f32> {
        p.get_mut("head.w").unwrap().data_mut().fill(weight);
        p.get_mut("head.b").unwrap().data_mut().fill(bias);
        p
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let convs = [(1, 16, 5), (16, 16, 3), (16, 16, 3), (16, 16, 3), (16, 32, 3), (32, 32, 3), (32, 32, 3), (32, 64, 3), (64, 64, 3), (64, 64, 3)];
        let conv_total: usize = convs.iter().map(|&(i, o, k)| o * i * k * k + o).sum();
        let lstm = 4 * 32 * 64 + 4 * 32 * 32 + 4 * 32;
        let full = conv_total + lstm + 32 + 1;
        assert_eq!(full, 135_313);
        assert_eq!(build_policy_unit(&PolicyArch::default(), 0).param_count(), full);
        // conv part scales quadratically; the fixed-width LSTM input shrinks linearly
        let half = PolicyArch::new(0.5).unwrap().descriptor().param_count();
        let half_convs: usize = convs.iter().map(|&(i, o, k)| (o / 2) * i.div_ceil(2) * k * k + o / 2).sum();
        assert_eq!(half, half_convs + 4 * 32 * 32 + 4 * 32 * 32 + 4 * 32 + 33);
        assert!((half as f64 / full as f64 - 0.25).abs() < 0.06);
    }

    #[test]
    fn descriptor_round_trip_and_seeding() {
        for arch in [PolicyArch::new(0.25).unwrap(), PolicyArch::new(0.5).unwrap().with_observation(true)] {
            assert_eq!(PolicyArch::from_descriptor(&arch.descriptor()).unwrap(), arch);
            assert_eq!(build_policy_unit(&arch, 5), build_policy_unit(&arch, 5));
            assert_ne!(build_policy_unit(&arch, 5), build_policy_unit(&arch, 6));
        }
    }

    #[test]
    fn zero_head_gives_zero_q_and_step_advances() {
        let p = with_head(build_policy_unit(&PolicyArch::new(0.25).unwrap(), 1), 0.0, 0.0);
        let s = PolicyState::for_params(&p).unwrap();
        for img in [textured(16, 16), Image::constant(12, 20, 0.9)] {
            let (q, next) = policy_q_step(&img, &s, &p).unwrap();
            assert_eq!(q, 0.0);
            assert_eq!(next.step_index, 1);
        }
        let bad = PolicyState::new(7);
        assert!(policy_q_step(&textured(8, 8), &bad, &p).is_err());
    }

    #[test]
    fn q_is_deterministic_and_replayable() {
        let p = build_policy_unit(&PolicyArch::new(0.25).unwrap(), 2);
        let imgs: Vec<Image> = (0..4).map(|i| textured(16, 16).map(|v| v * (1.0 - 0.1 * i as f32))).collect();
        let run = || {
            let mut s = PolicyState::for_params(&p).unwrap();
            imgs.iter()
                .map(|img| {
                    let (q, next) = policy_q_step(img, &s, &p).unwrap();
                    s = next;
                    q
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batched_q_matches_single() {
        let p = build_policy_unit(&PolicyArch::new(0.25).unwrap(), 3);
        let a = textured(16, 16);
        let b = a.map(|v| 1.0 - v);
        let s = PolicyState::for_params(&p).unwrap();
        let (qa, _) = policy_q_step(&a, &s, &p).unwrap();
        let (qb, _) = policy_q_step(&b, &s, &p).unwrap();
        let x = Tensor::stack_batch(&[a.to_tensor(), b.to_tensor()]).unwrap();
        let z = Tensor::zeros(vec![2, 32]);
        let (q, _, _) = q_batch(&x, &z, &z, &p).unwrap();
        assert!((q[0] as f64 - qa).abs() < 1e-6 && (q[1] as f64 - qb).abs() < 1e-6);
    }

    #[test]
    fn biased_heads_stop_immediately_or_run_to_cap() {
        let restorer = build_restoration_unit(&RestorerArch::new(0.25).unwrap(), 1);
        let base = build_policy_unit(&PolicyArch::new(0.25).unwrap(), 1);
        let x0 = textured(10, 9);
        let ep = policy_decide(&x0, &restorer, &with_head(base.clone(), 0.0, -1.0), 20, None).unwrap();
        assert_eq!(ep.steps, 0);
        assert_eq!(ep.restored, x0.clamped());
        assert_eq!(ep.decisions.len(), 1);
        let ep = policy_decide(&x0, &restorer, &with_head(base, 0.0, 1.0), 6, Some(&x0)).unwrap();
        assert_eq!(ep.steps, 6);
        assert_eq!(ep.trajectory.states.len(), 7);
        assert_eq!(ep.decisions.last().unwrap().action, Action::Stop);
        assert!(policy_decide(&x0, &restorer, &build_policy_unit(&PolicyArch::new(0.25).unwrap(), 1), 0, None).is_err());
    }

    #[test]
    fn stop_is_absorbing() {
        // q sequence turns negative at step 3: exactly three restorer calls happen
        let qs = [0.5, 0.2, 0.1, -0.3, 0.9, 0.9];
        let scored = Cell::new(0);
        let advanced = Cell::new(0);
        let (states, decisions) = run_greedy(
            0usize,
            10,
            |_, n| {
                scored.set(scored.get() + 1);
                Ok(qs[n])
            },
            |s| {
                advanced.set(advanced.get() + 1);
                Ok(s + 1)
            },
        )
        .unwrap();
        assert_eq!(states, vec![0, 1, 2, 3]);
        assert_eq!((scored.get(), advanced.get()), (4, 3));
        assert_eq!(decisions.last().unwrap().action, Action::Stop);
        assert_eq!(decisions.last().unwrap().step, 3);
    }

    #[test]
    fn decorrelation_tie_and_constructed_case() {
        let x0 = textured(8, 8);
        let flat = Trajectory::from_states(vec![x0.clone(); 5], None).unwrap();
        assert_eq!(decorrelation_stop_index(&flat).unwrap(), 1);
        assert!(decorrelation_stop_index(&Trajectory::from_states(vec![x0], None).unwrap()).is_err());

        // y is a checkerboard; the noise is a different checker pattern orthogonal to it
        // with zero mean, so X_n = y + (1 - n/N) noise has corr(X_0 - X_n, X_n) -> 0 only at N
        let n_steps = 6;
        let y = Image::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0.7 } else { 0.3 });
        let noise: Vec<f32> = (0..64).map(|i| if (i / 8 / 2 + i % 8 / 2) % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let states: Vec<Image> = (0..=n_steps)
            .map(|n| {
                let f = 1.0 - n as f32 / n_steps as f32;
                Image::new(8, 8, y.pixels().iter().zip(&noise).map(|(a, e)| a + f * e).collect()).unwrap()
            })
            .collect();
        let traj = Trajectory::from_states(states, None).unwrap();
        assert_eq!(decorrelation_stop_index(&traj).unwrap(), n_steps);
    }

    #[test]
    fn decorrelation_is_affine_invariant() {
        let states: Vec<Image> = (0..5).map(|n| textured(12, 12).map(|v| (v * (1.0 + 0.07 * n as f32)).sin())).collect();
        let traj = Trajectory::from_states(states.clone(), None).unwrap();
        let scaled = Trajectory::from_states(states.iter().map(|s| s.map(|v| 2.0 * v + 0.25)).collect(), None).unwrap();
        assert_eq!(decorrelation_stop_index(&traj).unwrap(), decorrelation_stop_index(&scaled).unwrap());
    }

    #[test]
    fn oracle_peak_examples() {
        let traj = |ps: Vec<f64>| Trajectory {
            states: vec![Image::constant(2, 2, 0.0); ps.len()],
            psnr: Some(ps),
        };
        assert_eq!(oracle_peak_index(&traj(vec![20.0, 24.0, 26.0, 25.5, 25.0])).unwrap(), 2);
        assert_eq!(oracle_peak_index(&traj(vec![1.0, 2.0, 3.0])).unwrap(), 2);
        assert_eq!(oracle_peak_index(&traj(vec![f64::INFINITY, 40.0, 50.0])).unwrap(), 0);
        assert_eq!(oracle_peak_index(&traj(vec![3.0, 5.0, 5.0])).unwrap(), 1);
        let gt = textured(8, 8);
        let t = Trajectory::from_states(vec![gt.clone(), gt.map(|v| v * 0.9)], Some(&gt)).unwrap();
        assert_eq!(oracle_peak_index(&t).unwrap(), 0);
        let missing = Trajectory::from_states(vec![gt], None).unwrap();
        assert!(matches!(oracle_peak_index(&missing), Err(DurrError::MissingGroundTruth)));
    }
}
