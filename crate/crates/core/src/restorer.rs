//! The restoration unit: a small U-Net predicting a residual, applied as a forward-Euler step
//! `X_n = X_{n-1} + f([X_{n-1}, X_0])`.

use durr_tensor::{ArchDescriptor, ConvSpec, Float, LayerKind, LayerSpec, NetworkParams, ParamVars, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::psnr;
use crate::error::{DurrError, Result};
use crate::image::Image;

pub const RESTORER_FAMILY: &str = "restorer";

/// Channel-width configuration of the restoration unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestorerArch {
    /// Multiplies the nominal widths 32 and 64.
    pub width_scale: f64,
}

impl Default for RestorerArch {
    fn default() -> Self {
        Self { width_scale: 1.0 }
    }
}

pub(crate) fn scaled_width(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

impl RestorerArch {
    pub fn new(width_scale: f64) -> Result<Self> {
        if !(width_scale > 0.0 && width_scale <= 1.0) {
            return Err(DurrError::InvalidArgument(format!("width_scale must be in (0, 1], got {width_scale}")));
        }
        Ok(Self { width_scale })
    }

    /// `(narrow, wide)` channel counts.
    pub fn widths(&self) -> (usize, usize) {
        (scaled_width(32, self.width_scale), scaled_width(64, self.width_scale))
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        let (n, w) = self.widths();
        ArchDescriptor {
            family: RESTORER_FAMILY.into(),
            layers: vec![
                LayerSpec::conv("conv1", 2, n, 5, 1, 1),
                LayerSpec::prelu("act1", n),
                LayerSpec::conv("conv2", n, n, 3, 1, 1),
                LayerSpec::prelu("act2", n),
                LayerSpec::conv("conv3", n, w, 3, 2, 1),
                LayerSpec::prelu("act3", w),
                LayerSpec::conv("conv4", w, w, 3, 1, 1),
                LayerSpec::prelu("act4", w),
                LayerSpec::conv("conv5", w, w, 3, 1, 2),
                LayerSpec::prelu("act5", w),
                LayerSpec::conv("conv6", w, w, 3, 1, 4),
                LayerSpec::prelu("act6", w),
                LayerSpec::deconv("up7", w, w, 4, 2),
                LayerSpec::prelu("act7", w),
                LayerSpec::conv("conv8", w + n, n, 3, 1, 1),
                LayerSpec::prelu("act8", n),
                LayerSpec::conv("conv9", n, 1, 5, 1, 1),
            ],
        }
    }

    /// Recovers the configuration from a stored descriptor.
    pub fn from_descriptor(arch: &ArchDescriptor) -> Result<Self> {
        if arch.family != RESTORER_FAMILY {
            return Err(DurrError::InvalidArgument(format!("expected a restorer, got {}", arch.family)));
        }
        let narrow = arch.layer("conv1").map(|l| l.out_ch).unwrap_or(0);
        let candidate = Self {
            width_scale: narrow as f64 / 32.0,
        };
        if candidate.descriptor() == *arch {
            return Ok(candidate);
        }
        // widths may have been rounded; search the exact scale via the wide layer
        let wide = arch.layer("conv3").map(|l| l.out_ch).unwrap_or(0);
        let candidate = Self {
            width_scale: wide as f64 / 64.0,
        };
        if candidate.descriptor() == *arch {
            return Ok(candidate);
        }
        Err(DurrError::InvalidArgument("descriptor does not match the restorer layout".into()))
    }
}

/// He fan-in initialization for conv/deconv/dense weights, zero biases, PReLU slopes 0.25.
pub(crate) fn init_params(arch: ArchDescriptor, seed: u64) -> NetworkParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(arch.clone());
    for layer in &arch.layers {
        match layer.kind {
            LayerKind::Conv | LayerKind::Deconv | LayerKind::Dense => {
                let k2 = layer.kernel * layer.kernel;
                let fan_in = match layer.kind {
                    // each output pixel of a stride-s deconv sees in·k²/s² weights
                    LayerKind::Deconv => (layer.in_ch * k2 / (layer.stride * layer.stride)).max(1),
                    _ => layer.in_ch * k2,
                };
                let w = params.get_mut(&format!("{}.w", layer.name)).expect("arch parameter");
                let fresh = Tensor::<f32>::randn(w.shape().to_vec(), (2.0 / fan_in as f64).sqrt(), &mut rng);
                w.data_mut().copy_from_slice(fresh.data());
            }
            LayerKind::Prelu => {
                let s = params.get_mut(&format!("{}.slope", layer.name)).expect("arch parameter");
                s.data_mut().fill(0.25);
            }
            LayerKind::Lstm => {
                let hidden = layer.out_ch;
                let std = 1.0 / (hidden as f64).sqrt();
                for suffix in ["w_ih", "w_hh"] {
                    let w = params.get_mut(&format!("{}.{suffix}", layer.name)).expect("arch parameter");
                    let fresh = Tensor::<f32>::uniform(w.shape().to_vec(), -std, std, &mut rng);
                    w.data_mut().copy_from_slice(fresh.data());
                }
            }
        }
    }
    params
}

/// Seeded initialization. The output conv starts at zero, so a fresh unit is the identity
/// step and deep unrolls stay bounded early in training.
pub fn build_restoration_unit(arch: &RestorerArch, seed: u64) -> NetworkParams<f32> {
    let mut p = init_params(arch.descriptor(), seed);
    p.get_mut("conv9.w").expect("restorer head").data_mut().fill(0.0);
    p
}

fn conv<T: Float>(tape: &mut Tape<T>, p: &ParamVars, arch: &ArchDescriptor, name: &str, x: Var) -> Result<Var> {
    let l = arch
        .layer(name)
        .ok_or_else(|| DurrError::InvalidArgument(format!("architecture has no layer {name}")))?;
    let spec = ConvSpec {
        stride: l.stride,
        dilation: l.dilation,
        padding: l.dilation * (l.kernel - 1) / 2,
    };
    Ok(tape.conv2d(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?, spec)?)
}

fn prelu<T: Float>(tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    Ok(tape.prelu(x, p.get(&format!("{name}.slope"))?)?)
}

/// Predicted residual `f([x, x0])` for `(b, 1, h, w)` inputs with even `h`, `w`.
pub fn residual<T: Float>(tape: &mut Tape<T>, p: &ParamVars, arch: &ArchDescriptor, x: Var, x0: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4("restorer")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DurrError::InvalidArgument(format!("restorer needs even dims, got {w}x{h}")));
    }
    let input = tape.concat_channels(x, x0)?;
    let a = conv(tape, p, arch, "conv1", input)?;
    let a = prelu(tape, p, "act1", a)?;
    let a = conv(tape, p, arch, "conv2", a)?;
    let skip = prelu(tape, p, "act2", a)?;
    let mut a = skip;
    for (c, act) in [("conv3", "act3"), ("conv4", "act4"), ("conv5", "act5"), ("conv6", "act6")] {
        a = conv(tape, p, arch, c, a)?;
        a = prelu(tape, p, act, a)?;
    }
    let a = tape.conv_transpose2d(a, p.get("up7.w")?, p.get("up7.b")?, 2, 1)?;
    let a = prelu(tape, p, "act7", a)?;
    let a = tape.concat_channels(a, skip)?;
    let a = conv(tape, p, arch, "conv8", a)?;
    let a = prelu(tape, p, "act8", a)?;
    conv(tape, p, arch, "conv9", a)
}

/// One Euler step on the tape: `x + f([x, x0])`.
pub fn step_on_tape<T: Float>(tape: &mut Tape<T>, p: &ParamVars, arch: &ArchDescriptor, x: Var, x0: Var) -> Result<Var> {
    let r = residual(tape, p, arch, x, x0)?;
    Ok(tape.add(x, r)?)
}

/// Applies `n` steps on the tape; returns every state including `x0`.
pub fn unroll_on_tape<T: Float>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    arch: &ArchDescriptor,
    x0: Var,
    n: usize,
) -> Result<Vec<Var>> {
    let mut states = vec![x0];
    for _ in 0..n {
        let next = step_on_tape(tape, p, arch, *states.last().expect("non-empty"), x0)?;
        states.push(next);
    }
    Ok(states)
}

/// Terminal-state MSE after `n` steps, recorded on `tape` for backpropagation.
pub fn terminal_loss<T: Float>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    arch: &ArchDescriptor,
    x0: &Tensor<T>,
    target: &Tensor<T>,
    n: usize,
) -> Result<Var> {
    let x0 = tape.input(x0.clone());
    let target = tape.input(target.clone());
    let states = unroll_on_tape(tape, p, arch, x0, n)?;
    Ok(tape.mse(*states.last().expect("non-empty"), target)?)
}

/// One step on a `(b, 1, h, w)` batch with even dims, without recording gradients.
pub fn step_tensor(x: &Tensor<f32>, x0: &Tensor<f32>, params: &NetworkParams<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = tape.params(params);
    let xv = tape.input(x.clone());
    let x0v = tape.input(x0.clone());
    let out = step_on_tape(&mut tape, &p, params.arch(), xv, x0v)?;
    Ok(tape.value(out).clone())
}

/// Unfolds a batch of even-sized images `n` steps; returns `X_0..X_n`.
pub fn unfold_tensor(x0: &Tensor<f32>, params: &NetworkParams<f32>, n: usize) -> Result<Vec<Tensor<f32>>> {
    let mut states = vec![x0.clone()];
    for _ in 0..n {
        let next = step_tensor(states.last().expect("non-empty"), x0, params)?;
        if !next.all_finite() {
            return Err(durr_tensor::TensorError::NonFinite { op: "unfold" }.into());
        }
        states.push(next);
    }
    Ok(states)
}

/// Edge-pads an image to even dims for the stride-2/up-2 pair.
pub fn pad_even(img: &Image) -> Image {
    img.pad_to_multiple(2)
}

/// `x_prev + f([x_prev, x0])`. Odd sizes are edge-padded for the step and cropped back.
pub fn unfold_step(x_prev: &Image, x0: &Image, params: &NetworkParams<f32>) -> Result<Image> {
    x_prev.ensure_same_dims(x0)?;
    let next = step_tensor(&pad_even(x_prev).to_tensor(), &pad_even(x0).to_tensor(), params)?;
    Image::from_tensor(&next, 0)?.crop(0, 0, x0.width(), x0.height())
}

/// States `X_0..X_N` of one unfolding, with per-state PSNR when ground truth is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Image>,
    pub psnr: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn from_states(states: Vec<Image>, ground_truth: Option<&Image>) -> Result<Self> {
        let psnr = ground_truth
            .map(|gt| states.iter().map(|s| psnr(&s.clamped(), gt)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self { states, psnr })
    }

    /// Number of unfolding steps `N`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn x0(&self) -> &Image {
        &self.states[0]
    }
}

/// Iterates [`unfold_step`] `n_steps` times. The image is padded once to even dims for the
/// whole unfolding and each recorded state is cropped back.
pub fn unfold_trajectory(
    x0: &Image,
    params: &NetworkParams<f32>,
    n_steps: usize,
    ground_truth: Option<&Image>,
) -> Result<Trajectory> {
    if let Some(gt) = ground_truth {
        x0.ensure_same_dims(gt)?;
    }
    let padded = unfold_tensor(&pad_even(x0).to_tensor(), params, n_steps)?;
    let states = padded
        .iter()
        .map(|t| Image::from_tensor(t, 0)?.crop(0, 0, x0.width(), x0.height()))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::from_states(states, ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_head(mut p: NetworkParams<f32>) -> NetworkParams<f32> {
        p.get_mut("conv9.w").unwrap().data_mut().fill(0.0);
        p.get_mut("conv9.b").unwrap().data_mut().fill(0.0);
        p
    }

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 17) as f32 / 17.0)
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // conv: out·in·k² + out, prelu: channels
        let full = 32 * 2 * 25 + 32
            + 32 * 32 * 9 + 32
            + 64 * 32 * 9 + 64
            + 3 * (64 * 64 * 9 + 64)
            + 64 * 64 * 16 + 64
            + 32 * 96 * 9 + 32
            + 32 * 25 + 1
            + (32 + 32 + 64 + 64 + 64 + 64 + 64 + 32);
        assert_eq!(full, 234_657);
        let p = build_restoration_unit(&RestorerArch::default(), 0);
        assert_eq!(p.param_count(), full);
        assert_eq!(RestorerArch::default().descriptor().param_count(), full);
        let half = build_restoration_unit(&RestorerArch::new(0.5).unwrap(), 0).param_count() as f64;
        let ratio = half / full as f64;
        assert!((ratio - 0.25).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn seeded_build_and_descriptor_round_trip() {
        let arch = RestorerArch::new(0.25).unwrap();
        assert_eq!(arch.widths(), (8, 16));
        assert_eq!(build_restoration_unit(&arch, 3), build_restoration_unit(&arch, 3));
        assert_ne!(build_restoration_unit(&arch, 3), build_restoration_unit(&arch, 4));
        assert_eq!(RestorerArch::from_descriptor(&arch.descriptor()).unwrap(), arch);
        assert!(RestorerArch::new(0.0).is_err());
        assert!(RestorerArch::new(1.5).is_err());
        let p = build_restoration_unit(&arch, 3);
        assert!(p.get("act4.slope").unwrap().data().iter().all(|&s| s == 0.25));
        assert!(p.get("conv4.b").unwrap().data().iter().all(|&b| b == 0.0));
        // a fresh unit is the identity step
        let x0 = ramp(10, 8);
        assert_eq!(unfold_step(&x0.map(|v| v * 0.3), &x0, &p).unwrap(), x0.map(|v| v * 0.3));
    }

    #[test]
    fn zero_residual_is_identity() {
        let p = zero_head(build_restoration_unit(&RestorerArch::new(0.25).unwrap(), 1));
        let x0 = ramp(13, 10);
        let x = ramp(13, 10).map(|v| v * 0.5 + 0.1);
        assert_eq!(unfold_step(&x, &x0, &p).unwrap(), x);
        let traj = unfold_trajectory(&x0, &p, 5, Some(&x)).unwrap();
        assert_eq!(traj.steps(), 5);
        assert!(traj.states.iter().all(|s| *s == x0));
        let ps = traj.psnr.unwrap();
        assert!(ps.iter().all(|&v| v == ps[0]));
    }

    #[test]
    fn zero_steps_and_dim_errors() {
        let p = build_restoration_unit(&RestorerArch::new(0.25).unwrap(), 1);
        let x0 = ramp(8, 8);
        let traj = unfold_trajectory(&x0, &p, 0, None).unwrap();
        assert_eq!(traj.states, vec![x0.clone()]);
        assert!(traj.psnr.is_none());
        assert!(unfold_step(&ramp(8, 6), &x0, &p).is_err());
    }

    #[test]
    fn doubling_head_doubles_residual() {
        // with strictly positive inputs and positive weights every pre-activation stays
        // positive, so PReLU is linear and the head scales the residual exactly
        let arch = RestorerArch::new(0.25).unwrap();
        let mut p = build_restoration_unit(&arch, 2);
        for (name, t) in p.iter_mut() {
            if name.ends_with(".w") {
                t.data_mut().iter_mut().for_each(|v| *v = v.abs() * 0.1);
            }
        }
        p.get_mut("conv9.w").unwrap().data_mut().fill(0.01);
        let x0 = ramp(16, 16).map(|v| v + 0.1);
        let x = ramp(16, 16).map(|v| 0.9 - v * 0.5);
        let r1: Vec<f32> = {
            let y = unfold_step(&x, &x0, &p).unwrap();
            y.pixels().iter().zip(x.pixels()).map(|(a, b)| a - b).collect()
        };
        for v in p.get_mut("conv9.w").unwrap().data_mut() {
            *v *= 2.0;
        }
        let y = unfold_step(&x, &x0, &p).unwrap();
        for ((a, b), r) in y.pixels().iter().zip(x.pixels()).zip(&r1) {
            assert!(((a - b) - 2.0 * r).abs() < 1e-4 * r.abs().max(1.0), "{} vs {}", a - b, 2.0 * r);
        }
    }
}
