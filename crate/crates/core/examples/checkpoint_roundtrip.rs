//! Save and reload both unit kinds; show the stored header and the integrity check.

use durr::checkpoint::{config_hash, params_fingerprint};
use durr::{build_policy_unit, build_restoration_unit, Checkpoint, CheckpointMeta, PolicyArch, RestorerArch, UnitKind};

fn main() -> durr::Result<()> {
    let dir = std::env::temp_dir().join("durr_checkpoint_example");
    std::fs::create_dir_all(&dir).map_err(|e| durr::DurrError::io(&dir, e))?;
    let units = [
        (UnitKind::Restorer, build_restoration_unit(&RestorerArch::new(0.25)?, 7)),
        (UnitKind::Policy, build_policy_unit(&PolicyArch::new(0.5)?, 7)),
    ];
    for (kind, params) in units {
        let meta = CheckpointMeta {
            seed: 7,
            schedule: "15:2,25:4,35:6".into(),
            config_hash: config_hash("example"),
            ..Default::default()
        };
        let ck = Checkpoint::new(kind, params, None, meta);
        let path = dir.join(format!("{kind}.ckpt"));
        ck.save(&path)?;
        let back = Checkpoint::load_kind(&path, kind)?;
        assert_eq!(back, ck);
        println!(
            "{kind}: {} parameters in {} layers, fingerprint {:08x}, {} bytes",
            back.params.param_count(),
            back.params.arch().layers.len(),
            params_fingerprint(&back.params),
            ck.to_bytes().len()
        );
    }

    // one flipped payload byte is caught by the record checksum
    let mut bytes = std::fs::read(dir.join("restorer.ckpt")).map_err(|e| durr::DurrError::io(&dir, e))?;
    let at = bytes.len() / 2;
    bytes[at] ^= 0x01;
    match Checkpoint::from_bytes(&bytes) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy loaded (flip landed outside a payload)"),
    }
    Ok(())
}
