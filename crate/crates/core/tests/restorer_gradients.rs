//! Backpropagation through the unrolled restorer against central finite differences (f64).

use durr::restorer::{terminal_loss, unroll_on_tape, RestorerArch};
use durr_tensor::{NetworkParams, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn random_unit(seed: u64) -> NetworkParams<f64> {
    let arch = RestorerArch::new(0.125).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::<f64>::zeros(arch.descriptor());
    for (name, t) in p.iter_mut() {
        let scale = if name.ends_with(".slope") { 0.3 } else { 0.25 };
        let fresh = Tensor::<f64>::uniform(t.shape().to_vec(), -scale, scale, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
    p
}

fn pair(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (
        Tensor::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng),
        Tensor::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng),
    )
}

/// Loss value and the sign pattern of every PReLU input.
fn loss_value(p: &NetworkParams<f64>, x0: &Tensor<f64>, y: &Tensor<f64>, n: usize) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let pv = tape.params(p);
    let l = terminal_loss(&mut tape, &pv, p.arch(), x0, y, n).unwrap();
    (tape.value(l).data()[0], tape.activation_pattern())
}

#[test]
fn bptt_matches_finite_differences() {
    for n in 1..=3 {
        for seed in 0..3u64 {
            let p = random_unit(seed * 10 + n as u64);
            let (x0, y) = pair(seed);
            let mut tape = Tape::new();
            let pv = tape.params(&p);
            let l = terminal_loss(&mut tape, &pv, p.arch(), &x0, &y, n).unwrap();
            let grads = tape.backward(l).unwrap();
            let pattern = tape.activation_pattern();
            let (mut diff, mut norm) = (0.0, 0.0);
            let (mut checked, mut kinked) = (0usize, 0usize);
            for (name, t) in p.iter() {
                let g = grads.get(name).unwrap();
                // a strided subset keeps the stencil count bounded for the wide tensors
                let stride = t.len().div_ceil(16);
                for i in (0..t.len()).step_by(stride) {
                    let mut plus = p.clone();
                    plus.get_mut(name).unwrap().data_mut()[i] += EPS;
                    let mut minus = p.clone();
                    minus.get_mut(name).unwrap().data_mut()[i] -= EPS;
                    let (fp, pp) = loss_value(&plus, &x0, &y, n);
                    let (fm, pm) = loss_value(&minus, &x0, &y, n);
                    checked += 1;
                    // skip stencils that cross a PReLU kink
                    if pp != pattern || pm != pattern {
                        kinked += 1;
                        continue;
                    }
                    let num = (fp - fm) / (2.0 * EPS);
                    diff += (g.data()[i] - num).powi(2);
                    norm += num * num;
                }
            }
            assert!(kinked * 2 < checked, "N={n} seed={seed}: {kinked} of {checked} stencils hit a kink");
            let rel = diff.sqrt() / norm.sqrt();
            assert!(rel < 1e-4, "N={n} seed={seed}: relative error {rel:e}");
        }
    }
}

#[test]
fn recording_intermediate_states_does_not_change_gradients() {
    let p = random_unit(7);
    let (x0, y) = pair(7);
    let plain = {
        let mut tape = Tape::new();
        let pv = tape.params(&p);
        let l = terminal_loss(&mut tape, &pv, p.arch(), &x0, &y, 2).unwrap();
        tape.backward(l).unwrap()
    };
    let recorded = {
        let mut tape = Tape::new();
        let pv = tape.params(&p);
        let x0v = tape.input(x0.clone());
        let states = unroll_on_tape(&mut tape, &pv, p.arch(), x0v, 2).unwrap();
        // read every intermediate state and compute (unused) per-step losses
        let yv = tape.input(y.clone());
        let _per_step: Vec<_> = states.iter().map(|&s| tape.mse(s, yv).unwrap()).collect();
        let snapshot: Vec<Tensor<f64>> = states.iter().map(|&s| tape.value(s).clone()).collect();
        assert_eq!(snapshot.len(), 3);
        let l = tape.mse(states[2], yv).unwrap();
        tape.backward(l).unwrap()
    };
    for (name, g) in plain.iter() {
        assert_eq!(g, recorded.get(name).unwrap(), "{name}");
    }
}
