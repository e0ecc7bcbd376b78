use std::fmt;
use std::str::FromStr;

use crate::degradation::DegradationKind;
use crate::error::{DurrError, Result};

/// How many unfolding steps a training item at a given level receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// One loop count for every level.
    Naive(usize),
    /// Per-level loop counts.
    Refined,
}

/// Level → loop count table used by restorer training.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pairs: Vec<(f64, usize)>,
    kind: ScheduleKind,
}

impl Schedule {
    pub fn refined(pairs: Vec<(f64, usize)>) -> Result<Self> {
        Self::checked(pairs, ScheduleKind::Refined)
    }

    pub fn naive(levels: &[f64], loops: usize) -> Result<Self> {
        Self::checked(levels.iter().map(|&l| (l, loops)).collect(), ScheduleKind::Naive(loops))
    }

    fn checked(pairs: Vec<(f64, usize)>, kind: ScheduleKind) -> Result<Self> {
        if pairs.is_empty() {
            return Err(DurrError::InvalidArgument("schedule needs at least one level".into()));
        }
        for (i, &(level, loops)) in pairs.iter().enumerate() {
            if loops == 0 {
                return Err(DurrError::InvalidArgument(format!("level {level}: loop count must be at least 1")));
            }
            if !level.is_finite() {
                return Err(DurrError::InvalidArgument(format!("bad level {level}")));
            }
            if pairs[..i].iter().any(|&(l, _)| l == level) {
                return Err(DurrError::InvalidArgument(format!("level {level} listed twice")));
            }
        }
        Ok(Self { pairs, kind })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn pairs(&self) -> &[(f64, usize)] {
        &self.pairs
    }

    pub fn levels(&self) -> Vec<f64> {
        self.pairs.iter().map(|&(l, _)| l).collect()
    }

    pub fn loops_for(&self, level: f64) -> Option<usize> {
        self.pairs.iter().find(|&&(l, _)| l == level).map(|&(_, n)| n)
    }

    pub fn max_loops(&self) -> usize {
        self.pairs.iter().map(|&(_, n)| n).max().unwrap_or(0)
    }

    pub fn validate_for(&self, kind: DegradationKind) -> Result<()> {
        self.pairs.iter().try_for_each(|&(l, _)| kind.validate_level(l))
    }
}

/// `25:4,35:6` (refined) or `fixed:8@35,45` (naive).
impl FromStr for Schedule {
    type Err = DurrError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DurrError::InvalidArgument(format!("cannot parse schedule {s:?}"));
        let number = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        if let Some(rest) = s.strip_prefix("fixed:") {
            let (loops, levels) = rest.split_once('@').ok_or_else(bad)?;
            let loops = loops.trim().parse().map_err(|_| bad())?;
            let levels = levels.split(',').map(number).collect::<Result<Vec<_>>>()?;
            return Self::naive(&levels, loops);
        }
        let pairs = s
            .split(',')
            .map(|pair| {
                let (level, loops) = pair.split_once(':').ok_or_else(bad)?;
                Ok((number(level)?, loops.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::refined(pairs)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Naive(n) => {
                let levels: Vec<String> = self.pairs.iter().map(|(l, _)| l.to_string()).collect();
                write!(f, "fixed:{n}@{}", levels.join(","))
            }
            ScheduleKind::Refined => {
                let pairs: Vec<String> = self.pairs.iter().map(|(l, n)| format!("{l}:{n}")).collect();
                f.write_str(&pairs.join(","))
            }
        }
    }
}
