use durr::checkpoint::{config_hash, params_fingerprint};
use durr::{build_policy_unit, build_restoration_unit, Checkpoint, CheckpointError, CheckpointMeta, PolicyArch, RestorerArch, UnitKind};
use durr_tensor::{OptMethod, OptState, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(kind: UnitKind, seed: u64, with_opt: bool, schedule: &str) -> Checkpoint {
    let params = match kind {
        UnitKind::Restorer => build_restoration_unit(&RestorerArch::new(0.125).unwrap(), seed),
        UnitKind::Policy => build_policy_unit(&PolicyArch::new(0.25).unwrap(), seed),
    };
    let optimizer = with_opt.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = OptState::new(if kind == UnitKind::Restorer { OptMethod::adam() } else { OptMethod::rmsprop() });
        opt.step = seed % 1000;
        for (name, t) in params.iter() {
            if kind == UnitKind::Restorer {
                opt.first.insert(name.to_string(), Tensor::randn(t.shape().to_vec(), 1.0, &mut rng));
            }
            opt.second.insert(name.to_string(), Tensor::uniform(t.shape().to_vec(), 0.0, 1.0, &mut rng));
        }
        opt
    });
    let meta = CheckpointMeta {
        seed,
        iteration: seed.wrapping_mul(31),
        schedule: schedule.to_string(),
        config_hash: config_hash(schedule),
        notes: format!("seed {seed}"),
    };
    Checkpoint::new(kind, params, optimizer, meta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_is_bit_exact(seed in any::<u64>(), policy in any::<bool>(), with_opt in any::<bool>(), schedule in "[0-9:,]{0,12}") {
        let kind = if policy { UnitKind::Policy } else { UnitKind::Restorer };
        let ck = unit(kind, seed, with_opt, &schedule);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unit.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load_kind(&path, kind).unwrap();
        prop_assert_eq!(params_fingerprint(&back.params), params_fingerprint(&ck.params));
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            prop_assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn any_payload_flip_fails_integrity(seed in 0u64..1000, pick in any::<prop::sample::Index>()) {
        let ck = unit(UnitKind::Restorer, seed, false, "25:4");
        let clean = ck.to_bytes();
        // flip one byte inside the first record's float payload
        let first = ck.params.iter().next().unwrap();
        let name = first.0.as_bytes();
        let at = clean.windows(name.len()).position(|w| w == name).unwrap();
        let header = name.len() + 1 + 4 * first.1.rank() + 8;
        let offset = at + header + pick.index(first.1.len() * 4);
        let mut bad = clean.clone();
        bad[offset] ^= 0x10;
        match Checkpoint::from_bytes(&bad) {
            Err(CheckpointError::Integrity(n)) => prop_assert_eq!(n, first.0),
            other => prop_assert!(false, "expected integrity failure, got {:?}", other.map(|c| c.kind)),
        }
    }
}

#[test]
fn loading_the_wrong_kind_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    unit(UnitKind::Policy, 3, true, "").save(&path).unwrap();
    assert!(Checkpoint::load_kind(&path, UnitKind::Restorer).is_err());
    assert!(Checkpoint::load_kind(&path, UnitKind::Policy).is_ok());
}
