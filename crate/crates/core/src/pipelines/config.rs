use crate::degradation::DegradationKind;
use crate::error::{DurrError, Result};

/// Hyper-parameters for both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: DegradationKind,
    pub seed: u64,

    // restorer stage
    pub width_scale: f64,
    pub batch: usize,
    pub patch: usize,
    pub iterations: usize,
    pub restorer_lr: f64,
    /// Iterations between validation rounds.
    pub eval_every: usize,
    /// Validation crops per scheduled level.
    pub val_patches: usize,
    pub plateau_factor: f64,
    /// Validation rounds without improvement before the learning rate drops.
    pub plateau_patience: usize,
    /// Minimum validation gain in dB that counts as improvement.
    pub plateau_min_delta: f64,
    pub lr_floor: f64,

    // policy stage
    pub policy_width_scale: f64,
    pub with_observation: bool,
    pub policy_lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the environment steps over which ε decays.
    pub eps_fraction: f64,
    pub replay_capacity: usize,
    pub warmup: usize,
    /// Gradient updates between target-network syncs.
    pub target_sync: usize,
    pub policy_batch: usize,
    /// Environment steps of DQN training.
    pub policy_steps: usize,
    /// Degraded patches whose frozen-restorer trajectories form the episode pool.
    pub episode_pool: usize,
    /// Episode crop sizes, shared evenly; empty means `patch` alone.
    pub policy_patches: Vec<usize>,
    pub val_episodes: usize,
    pub policy_levels: Vec<f64>,
    pub max_steps: usize,
}

impl TrainConfig {
    /// Full-size settings: batch 24 of 64×64 patches, full-width networks.
    pub fn paper(kind: DegradationKind) -> Self {
        let (levels, max_steps) = match kind {
            DegradationKind::Gaussian => (vec![25.0, 35.0, 45.0, 55.0], crate::policy::MAX_STEPS_DENOISE),
            DegradationKind::Jpeg => (vec![20.0, 30.0], crate::policy::MAX_STEPS_DEBLOCK),
        };
        Self {
            kind,
            seed: 0,
            width_scale: 1.0,
            batch: 24,
            patch: 64,
            iterations: 100_000,
            restorer_lr: 1e-3,
            eval_every: 500,
            val_patches: 32,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_min_delta: 0.01,
            lr_floor: 1e-6,
            policy_width_scale: 1.0,
            with_observation: false,
            policy_lr: 1e-4,
            lambda: 100.0,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            replay_capacity: 10_000,
            warmup: 500,
            target_sync: 200,
            policy_batch: 32,
            policy_steps: 200_000,
            episode_pool: 4096,
            policy_patches: Vec::new(),
            val_episodes: 256,
            policy_levels: levels,
            max_steps,
        }
    }

    /// Single-CPU settings: quarter-width networks on 32×32 patches.
    pub fn desk(kind: DegradationKind) -> Self {
        Self {
            width_scale: 0.25,
            batch: 8,
            patch: 32,
            iterations: 1500,
            eval_every: 100,
            val_patches: 16,
            policy_width_scale: 0.5,
            policy_steps: 6_000,
            episode_pool: 384,
            // several sizes keep the learned stop from keying on image area
            policy_patches: vec![32, 48, 64],
            val_episodes: 96,
            policy_levels: match kind {
                DegradationKind::Gaussian => vec![15.0, 25.0, 35.0],
                DegradationKind::Jpeg => vec![20.0, 30.0],
            },
            ..Self::paper(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(DurrError::InvalidArgument(format!("training config: {what}")));
        let positive = [
            ("width_scale", self.width_scale),
            ("restorer_lr", self.restorer_lr),
            ("policy_lr", self.policy_lr),
            ("policy_width_scale", self.policy_width_scale),
            ("plateau_factor", self.plateau_factor),
            ("lr_floor", self.lr_floor),
            ("lambda", self.lambda),
            ("eps_fraction", self.eps_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("batch", self.batch),
            ("patch", self.patch),
            ("eval_every", self.eval_every),
            ("val_patches", self.val_patches),
            ("plateau_patience", self.plateau_patience),
            ("replay_capacity", self.replay_capacity),
            ("target_sync", self.target_sync),
            ("policy_batch", self.policy_batch),
            ("episode_pool", self.episode_pool),
            ("val_episodes", self.val_episodes),
            ("max_steps", self.max_steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        if !self.patch.is_multiple_of(2) || self.policy_patches.iter().any(|p| !p.is_multiple_of(2) || *p == 0) {
            return bad("patch sizes must be even and positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(&format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if self.plateau_factor >= 1.0 || self.plateau_min_delta < 0.0 {
            return bad("plateau factor must be below 1 and min delta non-negative");
        }
        if self.policy_levels.is_empty() {
            return bad("policy levels must be non-empty");
        }
        self.policy_levels.iter().try_for_each(|&l| self.kind.validate_level(l))
    }

    /// Crop sizes of policy episodes.
    pub fn episode_patches(&self) -> Vec<usize> {
        if self.policy_patches.is_empty() {
            vec![self.patch]
        } else {
            self.policy_patches.clone()
        }
    }

    /// Stable text used for the checkpoint config hash.
    pub fn fingerprint(&self) -> String {
        format!("{self:?}")
    }

    /// Linear decay from `eps_start` to `eps_end` over the first `eps_fraction` of `policy_steps`.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = self.eps_fraction * self.policy_steps as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * step as f64 / horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for kind in [DegradationKind::Gaussian, DegradationKind::Jpeg] {
            TrainConfig::paper(kind).validate().unwrap();
            TrainConfig::desk(kind).validate().unwrap();
        }
        let p = TrainConfig::paper(DegradationKind::Gaussian);
        assert_eq!((p.batch, p.patch, p.restorer_lr, p.policy_lr), (24, 64, 1e-3, 1e-4));
        assert_eq!(TrainConfig::paper(DegradationKind::Jpeg).max_steps, 12);
    }

    #[test]
    fn rejects_bad_values() {
        let base = TrainConfig::desk(DegradationKind::Gaussian);
        let cases: Vec<TrainConfig> = vec![
            TrainConfig { gamma: 0.0, ..base.clone() },
            TrainConfig { gamma: 1.5, ..base.clone() },
            TrainConfig { lambda: -1.0, ..base.clone() },
            TrainConfig { batch: 0, ..base.clone() },
            TrainConfig { patch: 31, ..base.clone() },
            TrainConfig { policy_patches: vec![32, 33], ..base.clone() },
            TrainConfig { policy_levels: vec![], ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(TrainConfig { gamma: 1.0, ..base }.validate().is_ok());
    }

    #[test]
    fn epsilon_decays_linearly_then_holds() {
        let c = TrainConfig {
            policy_steps: 1000,
            ..TrainConfig::desk(DegradationKind::Gaussian)
        };
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(150) - 0.525).abs() < 1e-12);
        assert_eq!(c.epsilon_at(300), 0.05);
        assert_eq!(c.epsilon_at(999), 0.05);
    }
}
