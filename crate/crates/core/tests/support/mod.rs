//! Independent oracles for the acceptance run: naive convolution loops and finite differences.

use std::collections::BTreeMap;

use durr_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Direct cross-correlation by index arithmetic.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, d: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape()[..] else { unreachable!() };
    let [cout, _, k, _] = w.shape()[..] else { unreachable!() };
    let ho = (h + 2 * p - d * (k - 1) - 1) / s + 1;
    let wo = (wd + 2 * p - d * (k - 1) - 1) / s + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki * d) as isize - p as isize;
                                let ix = (ox * s + kj * d) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, ho, wo], out).unwrap()
}

/// Transposed convolution as a scatter of each input pixel times the kernel.
pub fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape()[..] else { unreachable!() };
    let [_, cout, k, _] = w.shape()[..] else { unreachable!() };
    let ho = (h - 1) * s + k - 2 * p;
    let wo = (wd - 1) * s + k - 2 * p;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for o in 0..cout {
            out[(bi * cout + o) * ho * wo..(bi * cout + o + 1) * ho * wo].fill(b.data()[o]);
        }
        for c in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((bi * cin + c) * h + iy) * wd + ix];
                    for o in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (iy * s + ki) as isize - p as isize;
                                let ox = (ix * s + kj) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                out[((bi * cout + o) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * w.data()[((c * cout + o) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, ho, wo], out).unwrap()
}

/// Uniform values with magnitude in [0.05, 1), so ReLU-type kinks sit away from the stencil.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

pub type Inputs = BTreeMap<String, Tensor<f64>>;
pub type Build<'a> = &'a dyn Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Var;

pub fn inputs(pairs: Vec<(&str, Tensor<f64>)>) -> Inputs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Loss `sum(out * probe)` with a fixed random probe, on a fresh tape.
fn probe_loss(ins: &Inputs, build: Build) -> (f64, Tape<f64>, Var) {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = ins
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k, &v.clone().with_grad(true))))
        .collect();
    let out = build(&mut tape, &vars);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(99);
    let probe = tape.input(Tensor::uniform(tape.value(out).shape().to_vec(), -1.0, 1.0, &mut rng));
    let weighted = tape.mul(out, probe).unwrap();
    let loss = tape.sum(weighted).unwrap();
    (tape.value(loss).data()[0], tape, loss)
}

/// Worst relative error between reverse-mode and central-difference gradients over all inputs.
pub fn op_gradient_error(ins: &Inputs, build: Build) -> f64 {
    let (_, tape, loss) = probe_loss(ins, build);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (name, value) in ins {
        let analytic = grads.get(name).unwrap();
        let mut num = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            let mut plus = ins.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_EPS;
            let mut minus = ins.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_EPS;
            num.push((probe_loss(&plus, build).0 - probe_loss(&minus, build).0) / (2.0 * FD_EPS));
        }
        let diff = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&mut analytic.data().iter().copied()).max(norm(&mut num.iter().copied()));
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}
