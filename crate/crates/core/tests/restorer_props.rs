use durr::restorer::step_tensor;
use durr::{unfold_trajectory, Image, RestorerArch};
use durr_tensor::{NetworkParams, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Receptive-field radius of the unit in full-resolution pixels, rounded up.
const BORDER: usize = 24;
const CROP: usize = 64;

fn random_unit(seed: u64) -> NetworkParams<f32> {
    let arch = RestorerArch::new(0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::<f32>::zeros(arch.descriptor());
    for (name, t) in p.iter_mut() {
        let fresh = if name.ends_with(".slope") {
            Tensor::full(t.shape().to_vec(), 0.25)
        } else {
            Tensor::uniform(t.shape().to_vec(), -0.15, 0.15, &mut rng)
        };
        t.data_mut().copy_from_slice(fresh.data());
    }
    p
}

fn scene(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f32>::uniform(vec![h * w], 0.0, 1.0, &mut rng);
    Image::new(w, h, t.into_data()).unwrap()
}

fn residual(p: &NetworkParams<f32>, x: &Image, x0: &Image) -> Image {
    let next = step_tensor(&x.to_tensor(), &x0.to_tensor(), p).unwrap();
    let next = Image::from_tensor(&next, 0).unwrap();
    Image::new(x.width(), x.height(), next.pixels().iter().zip(x.pixels()).map(|(a, b)| a - b).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // The unit downsamples by 2 once, so covariance holds for even translations.
    #[test]
    fn residual_follows_even_translations(seed in 0u64..500, sx in 0usize..5, sy in 0usize..5) {
        let (dx, dy) = (2 * sx, 2 * sy);
        let p = random_unit(seed);
        let big_x = scene(seed, CROP + 8, CROP + 8);
        let big_x0 = scene(seed + 1, CROP + 8, CROP + 8);
        let a_x = big_x.crop(0, 0, CROP, CROP).unwrap();
        let a_x0 = big_x0.crop(0, 0, CROP, CROP).unwrap();
        let b_x = big_x.crop(dx, dy, CROP, CROP).unwrap();
        let b_x0 = big_x0.crop(dx, dy, CROP, CROP).unwrap();
        let ra = residual(&p, &a_x, &a_x0);
        let rb = residual(&p, &b_x, &b_x0);
        for y in BORDER..CROP - BORDER - dy {
            for x in BORDER..CROP - BORDER - dx {
                let (u, v) = (ra.get(x + dx, y + dy), rb.get(x, y));
                prop_assert!((u - v).abs() < 1e-5, "({x},{y}) shift ({dx},{dy}): {u} vs {v}");
            }
        }
    }

    #[test]
    fn constant_input_keeps_finite_states(seed in 0u64..500, level in 0.0f32..=1.0) {
        let p = random_unit(seed);
        let flat = Image::constant(24, 24, level);
        let traj = unfold_trajectory(&flat, &p, 4, None).unwrap();
        prop_assert_eq!(traj.states.len(), 5);
        for s in &traj.states {
            prop_assert!(s.pixels().iter().all(|v| v.is_finite()));
        }
    }
}
